//! Exact k-nearest-neighbour structure.
//!
//! The graph is built once for a maximal `k` and sliced to any smaller `k`
//! afterwards, so a whole tuning grid shares a single construction. Neighbour
//! lists are exact (brute-force squared Euclidean distances) and ordered by
//! `(distance, index)`, which makes every downstream result deterministic.
//! The reverse adjacency stores, for each point `j`, the points that rank `j`
//! among their neighbours together with that rank; slicing the reverse map to
//! a given `k` is then a prefix of each list.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("k_max must satisfy 1 <= k_max <= n-1, got k_max={k_max} with n={n}")]
    KMaxOutOfRange { k_max: usize, n: usize },
    #[error("graph cache i/o failed for {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("graph cache {path} is not valid JSON: {source}")]
    CacheFormat {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Immutable k-nearest-neighbour lists with reverse adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourGraph {
    n: usize,
    k_max: usize,
    /// Row-major `n x k_max`; row `i` holds the neighbours of `i` ordered by
    /// ascending `(squared distance, index)`.
    neighbours: Vec<u32>,
    /// CSR offsets into `rev_entries`, length `n + 1`.
    rev_offsets: Vec<usize>,
    /// For each target `j`: `(source, rank)` pairs with `neighbours[source][rank] == j`,
    /// sorted by `(rank, source)`.
    rev_entries: Vec<(u32, u32)>,
}

/// Builds the exact graph at `k_max` by brute-force distance evaluation.
///
/// Ties in distance are broken towards the smaller index, so identical inputs
/// produce identical lists on every run and thread count.
pub fn build_graph(data: &Dataset, k_max: usize) -> Result<NeighbourGraph, GraphError> {
    let n = data.n();
    if k_max < 1 || k_max > n - 1 {
        return Err(GraphError::KMaxOutOfRange { k_max, n });
    }
    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = data.row(i);
            let mut candidates: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = data.row(j);
                let mut d2 = 0.0;
                for (a, b) in xi.iter().zip(xj) {
                    let diff = a - b;
                    d2 += diff * diff;
                }
                candidates.push((d2, j as u32));
            }
            let cmp = |a: &(f64, u32), b: &(f64, u32)| {
                a.0.partial_cmp(&b.0)
                    .expect("finite coordinates give finite distances")
                    .then(a.1.cmp(&b.1))
            };
            if k_max < candidates.len() {
                candidates.select_nth_unstable_by(k_max - 1, cmp);
                candidates.truncate(k_max);
            }
            candidates.sort_unstable_by(cmp);
            candidates.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    let mut neighbours = Vec::with_capacity(n * k_max);
    for row in &rows {
        neighbours.extend_from_slice(row);
    }
    Ok(NeighbourGraph::from_lists(n, k_max, neighbours))
}

impl NeighbourGraph {
    fn from_lists(n: usize, k_max: usize, neighbours: Vec<u32>) -> NeighbourGraph {
        debug_assert_eq!(neighbours.len(), n * k_max);
        let mut degree = vec![0usize; n];
        for &j in &neighbours {
            degree[j as usize] += 1;
        }
        let mut rev_offsets = vec![0usize; n + 1];
        for j in 0..n {
            rev_offsets[j + 1] = rev_offsets[j] + degree[j];
        }
        let mut cursor = rev_offsets.clone();
        let mut rev_entries = vec![(0u32, 0u32); neighbours.len()];
        for i in 0..n {
            for rank in 0..k_max {
                let j = neighbours[i * k_max + rank] as usize;
                rev_entries[cursor[j]] = (i as u32, rank as u32);
                cursor[j] += 1;
            }
        }
        for j in 0..n {
            rev_entries[rev_offsets[j]..rev_offsets[j + 1]]
                .sort_unstable_by_key(|&(source, rank)| (rank, source));
        }
        NeighbourGraph {
            n,
            k_max,
            neighbours,
            rev_offsets,
            rev_entries,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// The `k` nearest neighbours of `i`, ordered by ascending distance.
    ///
    /// # Panics
    /// If `i >= n` or `k > k_max`.
    pub fn neighbours(&self, i: usize, k: usize) -> &[u32] {
        assert!(k <= self.k_max, "k={k} exceeds k_max={}", self.k_max);
        &self.neighbours[i * self.k_max..i * self.k_max + k]
    }

    /// Reverse adjacency of `j` at the build `k_max`: `(source, rank)` pairs.
    pub fn reverse_entries(&self, j: usize) -> &[(u32, u32)] {
        &self.rev_entries[self.rev_offsets[j]..self.rev_offsets[j + 1]]
    }

    /// Number of points having `j` among their `k` nearest neighbours.
    ///
    /// # Panics
    /// If `j >= n` or `k > k_max`.
    pub fn reverse_count(&self, k: usize, j: usize) -> usize {
        assert!(k <= self.k_max, "k={k} exceeds k_max={}", self.k_max);
        self.reverse_entries(j)
            .partition_point(|&(_, rank)| (rank as usize) < k)
    }

    /// Reverse counts for every point at once.
    pub fn reverse_counts_all(&self, k: usize) -> Vec<u32> {
        (0..self.n).map(|j| self.reverse_count(k, j) as u32).collect()
    }

    /// Overlap counts from scratch: `m[i] = |N_k(x_i) ∩ cluster|`.
    ///
    /// # Panics
    /// If `k > k_max` or any member index is out of range.
    pub fn overlap_counts(&self, k: usize, cluster: &[u32]) -> Vec<u32> {
        let mut counts = vec![0u32; self.n];
        self.apply_overlap_delta(k, &mut counts, cluster, &[]);
        counts
    }

    /// Applies the effect of adding and removing cluster members to existing
    /// overlap counts, walking only the reverse adjacency of the changed
    /// points.
    pub fn apply_overlap_delta(
        &self,
        k: usize,
        counts: &mut [u32],
        added: &[u32],
        removed: &[u32],
    ) {
        assert!(k <= self.k_max, "k={k} exceeds k_max={}", self.k_max);
        assert_eq!(counts.len(), self.n);
        for &x in added {
            for &(source, rank) in self.reverse_entries(x as usize) {
                if (rank as usize) >= k {
                    break;
                }
                counts[source as usize] += 1;
            }
        }
        for &x in removed {
            for &(source, rank) in self.reverse_entries(x as usize) {
                if (rank as usize) >= k {
                    break;
                }
                counts[source as usize] -= 1;
            }
        }
    }

    /// Writes a versioned cache of the neighbour lists, keyed by the content
    /// hash of the matrix the graph was built from.
    pub fn save_cache(&self, path: &Path, content_hash: &str) -> Result<(), GraphError> {
        let file = CacheFile {
            version: CACHE_VERSION,
            content_hash: content_hash.to_string(),
            n: self.n,
            k_max: self.k_max,
            neighbours: self.neighbours.clone(),
        };
        let json = serde_json::to_string(&file).expect("cache serialization cannot fail");
        let mut out = fs::File::create(path).map_err(|source| GraphError::CacheIo {
            path: path.display().to_string(),
            source,
        })?;
        out.write_all(json.as_bytes())
            .map_err(|source| GraphError::CacheIo {
                path: path.display().to_string(),
                source,
            })
    }

    /// Loads a cached graph if the file exists, matches `content_hash`, and
    /// was built with at least `needed_k_max` neighbours. Any mismatch returns
    /// `Ok(None)` so callers rebuild.
    pub fn load_cache(
        path: &Path,
        content_hash: &str,
        needed_k_max: usize,
    ) -> Result<Option<NeighbourGraph>, GraphError> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|source| GraphError::CacheIo {
            path: path.display().to_string(),
            source,
        })?;
        let file: CacheFile =
            serde_json::from_str(&text).map_err(|source| GraphError::CacheFormat {
                path: path.display().to_string(),
                source,
            })?;
        if file.version != CACHE_VERSION
            || file.content_hash != content_hash
            || file.k_max < needed_k_max
            || file.neighbours.len() != file.n * file.k_max
        {
            return Ok(None);
        }
        Ok(Some(NeighbourGraph::from_lists(
            file.n,
            file.k_max,
            file.neighbours,
        )))
    }
}

const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    content_hash: String,
    n: usize,
    k_max: usize,
    neighbours: Vec<u32>,
}
