//! The complete clustering procedure.
//!
//! Equilibrium clusters are grown from seeds chosen by reverse-neighbour
//! count until every point belongs to at least one. A grown cluster that
//! excludes its own seed is followed by a dummy singleton holding just that
//! seed, so the seed cannot be selected again. Points are then assigned to
//! the cluster of their maximum membership strength, with ties going to the
//! smallest cluster id, and the surviving clusters are renumbered compactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{grow_cluster, EquilibriumParams, Lambda, ParamError, Termination};
use crate::neighbours::NeighbourGraph;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("every point is already covered")]
    AllCovered,
    #[error("covering loop made no progress after {iterations} growths")]
    CoverageStall { iterations: usize },
}

/// Where a cluster in the solution came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterOrigin {
    /// Returned by the iterative grower.
    Grown {
        status: Termination,
        iterations: usize,
    },
    /// Singleton inserted because a grown cluster excluded its seed.
    Dummy,
}

/// One cluster of the covering: its seed, members, and provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterInfo {
    pub seed: u32,
    /// Sorted member indices; empty for degenerate growths.
    pub members: Vec<u32>,
    pub origin: ClusterOrigin,
}

impl ClusterInfo {
    pub fn is_dummy(&self) -> bool {
        matches!(self.origin, ClusterOrigin::Dummy)
    }
}

/// Output of [`cluster`]: the covering, the strength matrix, and the final
/// hard assignment.
#[derive(Debug, Clone)]
pub struct ClusteringSolution {
    pub params: EquilibriumParams,
    pub n: usize,
    /// All clusters in creation order, dummies included.
    pub clusters: Vec<ClusterInfo>,
    /// Row-major `n x clusters.len()` membership strengths.
    pub strengths: Vec<f64>,
    /// Per point, the index into `clusters` it was assigned to.
    pub assignment: Vec<u32>,
    /// Per point, the compacted cluster label.
    pub labels: Vec<u32>,
    /// Per cluster, its compacted id, or `None` if it received no points.
    pub cluster_ids: Vec<Option<u32>>,
    /// Points that had zero strength everywhere and were assigned through the
    /// nearest resolved neighbour (or the first cluster as a last resort).
    pub fallback_count: usize,
}

impl ClusteringSolution {
    /// Number of clusters that received at least one point.
    pub fn cluster_count(&self) -> usize {
        self.cluster_ids.iter().flatten().count()
    }

    pub fn strength(&self, point: usize, cluster: usize) -> f64 {
        self.strengths[point * self.clusters.len() + cluster]
    }

    /// Seeds in cluster-creation order.
    pub fn seeds(&self) -> Vec<u32> {
        self.clusters.iter().map(|c| c.seed).collect()
    }
}

/// Picks the uncovered point with the highest reverse-neighbour count,
/// breaking ties towards the smaller index.
pub fn select_seed(
    graph: &NeighbourGraph,
    k: usize,
    covered: &[bool],
) -> Result<usize, ClusterError> {
    let counts = graph.reverse_counts_all(k);
    select_seed_counted(&counts, covered)
}

fn select_seed_counted(reverse_counts: &[u32], covered: &[bool]) -> Result<usize, ClusterError> {
    let mut best: Option<(u32, usize)> = None;
    for (j, &count) in reverse_counts.iter().enumerate() {
        if covered[j] {
            continue;
        }
        if best.map_or(true, |(best_count, _)| count > best_count) {
            best = Some((count, j));
        }
    }
    best.map(|(_, j)| j).ok_or(ClusterError::AllCovered)
}

/// Runs the full procedure: cover the data with equilibrium clusters, compute
/// the strength matrix, and assign every point to its strongest cluster.
///
/// Empty growths stay in the cluster list (their strength column is zero) but
/// are not assignment candidates. Points whose strength row is entirely zero
/// are resolved through their nearest already-assigned neighbour, walking the
/// full `k_max` neighbour list and repeating until settled; anything still
/// unresolved falls back to the first candidate cluster. Cluster ids are
/// compacted afterwards: clusters that received no points are dropped and the
/// rest renumbered in creation order.
pub fn cluster(
    graph: &NeighbourGraph,
    params: &EquilibriumParams,
) -> Result<ClusteringSolution, ClusterError> {
    params.validate(graph)?;
    let n = graph.n();
    let reverse_counts = graph.reverse_counts_all(params.k);

    let mut covered = vec![false; n];
    let mut n_covered = 0usize;
    let mut clusters: Vec<ClusterInfo> = Vec::new();
    let mut growths = 0usize;

    while n_covered < n {
        if growths > n {
            return Err(ClusterError::CoverageStall { iterations: growths });
        }
        growths += 1;

        let seed = select_seed_counted(&reverse_counts, &covered)?;
        let grown = grow_cluster(graph, params, seed);
        let contains_seed = grown.members.binary_search(&(seed as u32)).is_ok();
        for &m in &grown.members {
            if !covered[m as usize] {
                covered[m as usize] = true;
                n_covered += 1;
            }
        }
        clusters.push(ClusterInfo {
            seed: seed as u32,
            members: grown.members,
            origin: ClusterOrigin::Grown {
                status: grown.status,
                iterations: grown.iterations,
            },
        });
        if !contains_seed {
            clusters.push(ClusterInfo {
                seed: seed as u32,
                members: vec![seed as u32],
                origin: ClusterOrigin::Dummy,
            });
            if !covered[seed] {
                covered[seed] = true;
                n_covered += 1;
            }
        }
    }

    let member_sets: Vec<&[u32]> = clusters.iter().map(|c| c.members.as_slice()).collect();
    let numerators = strength_numerators(graph, params.k, params.lambda, &member_sets);
    let c = clusters.len();

    // Candidates are the non-empty clusters, in creation order.
    let candidates: Vec<usize> = (0..c)
        .filter(|&ci| !clusters[ci].members.is_empty())
        .collect();

    let mut assignment = vec![0u32; n];
    let mut resolved = vec![false; n];
    let mut unresolved: Vec<usize> = Vec::new();
    for i in 0..n {
        let row = &numerators[i * c..(i + 1) * c];
        let mut best: Option<(u64, usize)> = None;
        for &ci in &candidates {
            if best.map_or(true, |(best_num, _)| row[ci] > best_num) {
                best = Some((row[ci], ci));
            }
        }
        match best {
            Some((num, ci)) if num > 0 => {
                assignment[i] = ci as u32;
                resolved[i] = true;
            }
            _ => unresolved.push(i),
        }
    }

    // Zero-strength rows: adopt the cluster of the nearest resolved
    // neighbour, sweeping until no further point settles.
    let fallback_count = unresolved.len();
    resolve_by_neighbours(graph, &mut assignment, &mut resolved, &mut unresolved);
    let last_resort = candidates.first().copied().unwrap_or(0) as u32;
    for &i in &unresolved {
        assignment[i] = last_resort;
    }

    let (cluster_ids, labels) = compact_ids(c, &assignment);

    let denom = (params.lambda.denom() as f64) * (params.k as f64) * (n as f64);
    let strengths = numerators.iter().map(|&v| v as f64 / denom).collect();

    Ok(ClusteringSolution {
        params: *params,
        n,
        clusters,
        strengths,
        assignment,
        labels,
        cluster_ids,
        fallback_count,
    })
}

/// Membership strengths `max(0, |N_k(x_i) ∩ C|/k − lambda·|C|/n)` for every
/// point and cluster, as floating point.
pub fn strength_matrix(
    graph: &NeighbourGraph,
    k: usize,
    lambda: Lambda,
    clusters: &[&[u32]],
) -> Vec<f64> {
    let numerators = strength_numerators(graph, k, lambda, clusters);
    let denom = (lambda.denom() as f64) * (k as f64) * (graph.n() as f64);
    numerators.iter().map(|&v| v as f64 / denom).collect()
}

/// Integer strength numerators over the common denominator `q·k·n`:
/// `max(0, q·n·m − p·k·|C|)` with `lambda = p/q`.
fn strength_numerators(
    graph: &NeighbourGraph,
    k: usize,
    lambda: Lambda,
    clusters: &[&[u32]],
) -> Vec<u64> {
    let n = graph.n();
    let c = clusters.len();
    let p = lambda.numer() as i128;
    let q = lambda.denom() as i128;
    let mut numerators = vec![0u64; n * c];
    for (ci, members) in clusters.iter().enumerate() {
        let counts = graph.overlap_counts(k, members);
        let bound = p * k as i128 * members.len() as i128;
        for (i, &m) in counts.iter().enumerate() {
            let value = q * n as i128 * m as i128 - bound;
            if value > 0 {
                numerators[i * c + ci] = value as u64;
            }
        }
    }
    numerators
}

fn resolve_by_neighbours(
    graph: &NeighbourGraph,
    assignment: &mut [u32],
    resolved: &mut [bool],
    unresolved: &mut Vec<usize>,
) {
    loop {
        let mut still = Vec::new();
        let mut changed = false;
        for &i in unresolved.iter() {
            let mut adopted = None;
            for &j in graph.neighbours(i, graph.k_max()) {
                if resolved[j as usize] {
                    adopted = Some(assignment[j as usize]);
                    break;
                }
            }
            match adopted {
                Some(cluster_id) => {
                    assignment[i] = cluster_id;
                    resolved[i] = true;
                    changed = true;
                }
                None => still.push(i),
            }
        }
        *unresolved = still;
        if unresolved.is_empty() || !changed {
            break;
        }
    }
}

fn compact_ids(c: usize, assignment: &[u32]) -> (Vec<Option<u32>>, Vec<u32>) {
    let mut has_points = vec![false; c];
    for &a in assignment {
        has_points[a as usize] = true;
    }
    let mut cluster_ids = vec![None; c];
    let mut next = 0u32;
    for ci in 0..c {
        if has_points[ci] {
            cluster_ids[ci] = Some(next);
            next += 1;
        }
    }
    let labels = assignment
        .iter()
        .map(|&a| cluster_ids[a as usize].expect("assigned clusters are kept"))
        .collect();
    (cluster_ids, labels)
}

/// Recomputes the final assignment from the stored clusters and strength
/// matrix, replaying the argmax with smallest-index ties, the fallback sweep,
/// and the compaction. Used to check assignment consistency.
pub fn replay_assignment(
    graph: &NeighbourGraph,
    solution: &ClusteringSolution,
) -> (Vec<u32>, Vec<u32>) {
    let n = solution.n;
    let c = solution.clusters.len();
    let candidates: Vec<usize> = (0..c)
        .filter(|&ci| !solution.clusters[ci].members.is_empty())
        .collect();
    let mut assignment = vec![0u32; n];
    let mut resolved = vec![false; n];
    let mut unresolved = Vec::new();
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for &ci in &candidates {
            let v = solution.strength(i, ci);
            if best.map_or(true, |(best_v, _)| v > best_v) {
                best = Some((v, ci));
            }
        }
        match best {
            Some((v, ci)) if v > 0.0 => {
                assignment[i] = ci as u32;
                resolved[i] = true;
            }
            _ => unresolved.push(i),
        }
    }
    resolve_by_neighbours(graph, &mut assignment, &mut resolved, &mut unresolved);
    let last_resort = candidates.first().copied().unwrap_or(0) as u32;
    for &i in &unresolved {
        assignment[i] = last_resort;
    }
    let (_, labels) = compact_ids(c, &assignment);
    (assignment, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::neighbours::build_graph;

    fn line_graph() -> NeighbourGraph {
        let data = Dataset::from_rows(
            &[
                vec![0.0],
                vec![1.0],
                vec![2.0],
                vec![10.0],
                vec![11.0],
                vec![12.0],
            ],
            None,
        )
        .unwrap();
        build_graph(&data, 2).unwrap()
    }

    #[test]
    fn seed_selection_prefers_small_index_on_ties() {
        let graph = line_graph();
        let covered = vec![false; 6];
        assert_eq!(select_seed(&graph, 2, &covered).unwrap(), 0);
        let covered = vec![true, true, true, false, false, false];
        assert_eq!(select_seed(&graph, 2, &covered).unwrap(), 3);
        let covered = vec![true; 6];
        assert!(matches!(
            select_seed(&graph, 2, &covered),
            Err(ClusterError::AllCovered)
        ));
    }

    #[test]
    fn seed_selection_two_points() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]], None).unwrap();
        let graph = build_graph(&data, 1).unwrap();
        assert_eq!(select_seed(&graph, 1, &[true, false]).unwrap(), 1);
    }

    #[test]
    fn six_point_fixture_end_to_end() {
        let graph = line_graph();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 2);
        let solution = cluster(&graph, &params).unwrap();

        assert_eq!(solution.clusters.len(), 2);
        assert_eq!(solution.clusters[0].members, vec![0, 1, 2]);
        assert_eq!(solution.clusters[1].members, vec![3, 4, 5]);
        assert_eq!(solution.seeds(), vec![0, 3]);
        assert_eq!(solution.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(solution.cluster_count(), 2);
        assert_eq!(solution.fallback_count, 0);
        // Member strengths are 2/2 - 1*3/6 = 0.5 exactly.
        for i in 0..3 {
            assert_eq!(solution.strength(i, 0), 0.5);
            assert_eq!(solution.strength(i, 1), 0.0);
        }
        for i in 3..6 {
            assert_eq!(solution.strength(i, 1), 0.5);
            assert_eq!(solution.strength(i, 0), 0.0);
        }
    }

    #[test]
    fn two_point_cycle_covers_via_dummy() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]], None).unwrap();
        let graph = build_graph(&data, 1).unwrap();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 1);
        let solution = cluster(&graph, &params).unwrap();

        // Growth from seed 0 cycles and returns {1}; the dummy {0} follows.
        assert_eq!(solution.clusters.len(), 2);
        assert_eq!(solution.clusters[0].members, vec![1]);
        assert!(matches!(
            solution.clusters[0].origin,
            ClusterOrigin::Grown {
                status: Termination::Cycled,
                ..
            }
        ));
        assert_eq!(solution.clusters[1].members, vec![0]);
        assert!(solution.clusters[1].is_dummy());
        // Each point is strongest in the cluster containing it.
        assert_eq!(solution.strength(0, 0), 0.5);
        assert_eq!(solution.strength(1, 1), 0.5);
        assert_eq!(solution.labels, vec![0, 1]);
        assert_eq!(solution.fallback_count, 0);
        assert_eq!(solution.cluster_count(), 2);
    }

    #[test]
    fn covering_invariant_holds() {
        let graph = line_graph();
        for tenths in [10u32, 15, 20, 30] {
            let params = EquilibriumParams::new(Lambda::from_tenths(tenths).unwrap(), 2);
            let solution = cluster(&graph, &params).unwrap();
            let mut covered = vec![false; graph.n()];
            for info in &solution.clusters {
                for &m in &info.members {
                    covered[m as usize] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "lambda={tenths} left a gap");
            assert!(solution.clusters.len() <= 2 * graph.n());
        }
    }

    #[test]
    fn strength_matrix_matches_solution() {
        let graph = line_graph();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 2);
        let solution = cluster(&graph, &params).unwrap();
        let sets: Vec<&[u32]> = solution
            .clusters
            .iter()
            .map(|c| c.members.as_slice())
            .collect();
        let recomputed = strength_matrix(&graph, params.k, params.lambda, &sets);
        assert_eq!(recomputed, solution.strengths);
    }

    #[test]
    fn empty_cluster_gives_zero_column() {
        let graph = line_graph();
        let m = strength_matrix(&graph, 2, Lambda::from_tenths(10).unwrap(), &[&[]]);
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replay_reproduces_assignment() {
        let graph = line_graph();
        for tenths in [10u32, 20, 30] {
            let params = EquilibriumParams::new(Lambda::from_tenths(tenths).unwrap(), 2);
            let solution = cluster(&graph, &params).unwrap();
            let (assignment, labels) = replay_assignment(&graph, &solution);
            assert_eq!(assignment, solution.assignment);
            assert_eq!(labels, solution.labels);
        }
    }
}
