//! Dataset loading and preprocessing.
//!
//! Data sets are dense `n x d` matrices of finite real coordinates with an
//! optional ground-truth label per point. Preprocessing follows a single
//! rule: every column is scaled to unit sample variance, and data sets wider
//! than 100 columns are projected onto their leading principal components.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Width above which [`pca_reduce`] actually projects.
pub const DEFAULT_MAX_DIM: usize = 100;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed delimited input: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error("{path}: row {row}, column {col}: cannot parse {token:?} as a number")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        token: String,
    },
    #[error("{path}: row {row}, column {col}: value is not finite")]
    NonFinite { path: String, row: usize, col: usize },
    #[error("{path}: row {row} has {got} columns, expected {expected}")]
    Ragged {
        path: String,
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("label column {column:?} not found ({width} columns available)")]
    LabelColumn { column: String, width: usize },
    #[error("a dataset needs at least 2 points and 1 feature column, got n={n}, d={d}")]
    TooSmall { n: usize, d: usize },
    #[error("point matrix has {len} entries, expected n*d = {expected}")]
    ShapeMismatch { len: usize, expected: usize },
    #[error("labels have length {got}, expected {expected}")]
    LabelLength { got: usize, expected: usize },
    #[error("max_dim must be at least 1")]
    BadMaxDim,
}

/// How to find the label column of a delimited file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSelector {
    /// Zero-based column index.
    Index(usize),
    /// Header name; requires `has_header`.
    Name(String),
}

impl ColumnSelector {
    /// Parses a CLI-style spec: a bare integer is an index, anything else a name.
    pub fn parse(spec: &str) -> ColumnSelector {
        match spec.parse::<usize>() {
            Ok(idx) => ColumnSelector::Index(idx),
            Err(_) => ColumnSelector::Name(spec.to_string()),
        }
    }
}

/// Options for [`load_delimited`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub has_header: bool,
    pub label_column: Option<ColumnSelector>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: b',',
            has_header: false,
            label_column: None,
        }
    }
}

/// A dense point matrix with optional ground-truth labels.
///
/// Invariants enforced on construction: `n >= 2`, `d >= 1`, every coordinate
/// finite, and labels (when present) re-encoded to contiguous ids
/// `0..label_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<f64>,
    n: usize,
    d: usize,
    labels: Option<Vec<usize>>,
    label_count: usize,
}

impl Dataset {
    /// Builds a dataset from a row-major matrix, validating the invariants.
    ///
    /// Labels may carry arbitrary integers; they are re-encoded to contiguous
    /// ids ordered by ascending original value.
    pub fn new(
        points: Vec<f64>,
        n: usize,
        d: usize,
        labels: Option<Vec<i64>>,
    ) -> Result<Dataset, DatasetError> {
        if points.len() != n * d {
            return Err(DatasetError::ShapeMismatch {
                len: points.len(),
                expected: n * d,
            });
        }
        if n < 2 || d < 1 {
            return Err(DatasetError::TooSmall { n, d });
        }
        for (idx, &v) in points.iter().enumerate() {
            if !v.is_finite() {
                return Err(DatasetError::NonFinite {
                    path: "<memory>".into(),
                    row: idx / d + 1,
                    col: idx % d + 1,
                });
            }
        }
        let (labels, label_count) = match labels {
            None => (None, 0),
            Some(raw) => {
                if raw.len() != n {
                    return Err(DatasetError::LabelLength {
                        got: raw.len(),
                        expected: n,
                    });
                }
                let (encoded, count) = encode_labels(&raw);
                (Some(encoded), count)
            }
        };
        Ok(Dataset {
            points,
            n,
            d,
            labels,
            label_count,
        })
    }

    /// Builds a dataset from per-point rows.
    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<i64>>) -> Result<Dataset, DatasetError> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut points = Vec::with_capacity(n * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(DatasetError::Ragged {
                    path: "<memory>".into(),
                    row: i + 1,
                    expected: d,
                    got: row.len(),
                });
            }
            points.extend_from_slice(row);
        }
        Dataset::new(points, n, d, labels)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Ground-truth labels re-encoded to `0..label_count`, if present.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    /// Returns a copy of this dataset with labels attached from a raw id list.
    pub fn with_labels(&self, raw: &[i64]) -> Result<Dataset, DatasetError> {
        if raw.len() != self.n {
            return Err(DatasetError::LabelLength {
                got: raw.len(),
                expected: self.n,
            });
        }
        let (encoded, count) = encode_labels(raw);
        let mut out = self.clone();
        out.labels = Some(encoded);
        out.label_count = count;
        Ok(out)
    }

    /// SHA-256 of the matrix shape and little-endian coordinate bytes.
    ///
    /// Used to key graph cache files and to stamp reports.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"nnec-matrix-v1");
        hasher.update((self.n as u64).to_le_bytes());
        hasher.update((self.d as u64).to_le_bytes());
        for v in &self.points {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

/// Re-encodes label values to contiguous ids ordered by ascending value.
fn encode_labels<T: Ord + Clone>(values: &[T]) -> (Vec<usize>, usize) {
    let mut ids: BTreeMap<T, usize> = values.iter().map(|v| (v.clone(), 0)).collect();
    for (rank, (_, id)) in ids.iter_mut().enumerate() {
        *id = rank;
    }
    let encoded = values.iter().map(|v| ids[v]).collect();
    (encoded, ids.len())
}

/// Loads a delimited numeric file, optionally splitting off a label column.
///
/// Every non-label cell must parse as a finite real number; parse failures
/// report the offending row and column (1-based, counting data rows). Label
/// tokens are kept as opaque strings and re-encoded to contiguous ids ordered
/// by ascending token.
pub fn load_delimited(path: &Path, options: &LoadOptions) -> Result<Dataset, DatasetError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(options.has_header)
        .flexible(true)
        .from_reader(BufReader::new(file));

    let label_idx = match &options.label_column {
        None => None,
        Some(ColumnSelector::Index(idx)) => Some(*idx),
        Some(ColumnSelector::Name(name)) => {
            if !options.has_header {
                return Err(DatasetError::LabelColumn {
                    column: name.clone(),
                    width: 0,
                });
            }
            let headers = reader.headers().map_err(|source| DatasetError::Csv {
                path: display.clone(),
                source,
            })?;
            let pos = headers.iter().position(|h| h == name);
            match pos {
                Some(idx) => Some(idx),
                None => {
                    return Err(DatasetError::LabelColumn {
                        column: name.clone(),
                        width: headers.len(),
                    })
                }
            }
        }
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut label_tokens: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;

    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|source| DatasetError::Csv {
            path: display.clone(),
            source,
        })?;
        // Skip completely blank trailing lines.
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        let row_no = row_idx + 1;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(DatasetError::Ragged {
                path: display.clone(),
                row: row_no,
                expected,
                got: record.len(),
            });
        }
        if let Some(idx) = label_idx {
            if idx >= expected {
                return Err(DatasetError::LabelColumn {
                    column: idx.to_string(),
                    width: expected,
                });
            }
        }
        let mut row = Vec::with_capacity(expected.saturating_sub(label_idx.is_some() as usize));
        for (col_idx, cell) in record.iter().enumerate() {
            if Some(col_idx) == label_idx {
                label_tokens.push(cell.trim().to_string());
                continue;
            }
            let value: f64 = cell.trim().parse().map_err(|_| DatasetError::Parse {
                path: display.clone(),
                row: row_no,
                col: col_idx + 1,
                token: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DatasetError::NonFinite {
                    path: display.clone(),
                    row: row_no,
                    col: col_idx + 1,
                });
            }
            row.push(value);
        }
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(DatasetError::Empty { path: display });
    }
    let n = rows.len();
    let d = rows[0].len();
    let mut points = Vec::with_capacity(n * d);
    for row in &rows {
        points.extend_from_slice(row);
    }
    if n < 2 || d < 1 {
        return Err(DatasetError::TooSmall { n, d });
    }
    let (labels, label_count) = if label_idx.is_some() {
        let (encoded, count) = encode_labels(&label_tokens);
        (Some(encoded), count)
    } else {
        (None, 0)
    };
    Ok(Dataset {
        points,
        n,
        d,
        labels,
        label_count,
    })
}

/// Reads a single-column label file: one integer per line, blank lines skipped.
pub fn load_labels_file(path: &Path) -> Result<Vec<i64>, DatasetError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let mut labels = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: display.clone(),
            source,
        })?;
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        let value: i64 = token.parse().map_err(|_| DatasetError::Parse {
            path: display.clone(),
            row: idx + 1,
            col: 1,
            token: token.to_string(),
        })?;
        labels.push(value);
    }
    if labels.is_empty() {
        return Err(DatasetError::Empty { path: display });
    }
    Ok(labels)
}

/// Scales every column to unit sample variance (divisor `n - 1`).
///
/// The mean is not subtracted; pairwise distances only care about scale, and
/// centering happens inside [`pca_reduce`] where it is actually required.
/// Exactly constant columns are left unchanged.
pub fn standardize(data: &Dataset) -> Dataset {
    let n = data.n;
    let d = data.d;
    let mut out = data.clone();
    for col in 0..d {
        let first = data.points[col];
        if (0..n).all(|i| data.points[i * d + col] == first) {
            continue;
        }
        let mean = (0..n).map(|i| data.points[i * d + col]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| {
                let dev = data.points[i * d + col] - mean;
                dev * dev
            })
            .sum::<f64>()
            / (n - 1) as f64;
        if var == 0.0 {
            continue;
        }
        let sd = var.sqrt();
        for i in 0..n {
            out.points[i * d + col] /= sd;
        }
    }
    out
}

/// Projects onto the leading `max_dim` principal components when `d > max_dim`.
///
/// The input is expected to be standardized already. Columns are mean-centered
/// here, the covariance (divisor `n - 1`) is eigendecomposed, and components
/// are ordered by descending eigenvalue with the sign fixed so that each
/// component's largest-magnitude loading is positive. Narrow inputs are
/// returned unchanged.
pub fn pca_reduce(data: &Dataset, max_dim: usize) -> Result<Dataset, DatasetError> {
    if max_dim < 1 {
        return Err(DatasetError::BadMaxDim);
    }
    if data.d <= max_dim {
        return Ok(data.clone());
    }
    let n = data.n;
    let d = data.d;

    let mut means = vec![0.0f64; d];
    for i in 0..n {
        for (col, m) in means.iter_mut().enumerate() {
            *m += data.points[i * d + col];
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut centered = vec![0.0f64; n * d];
    for i in 0..n {
        for col in 0..d {
            centered[i * d + col] = data.points[i * d + col] - means[col];
        }
    }

    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mut acc = 0.0;
            for i in 0..n {
                acc += centered[i * d + a] * centered[i * d + b];
            }
            let value = acc / (n - 1) as f64;
            cov[(a, b)] = value;
            cov[(b, a)] = value;
        }
    }

    let eigen = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("eigenvalues of a real symmetric matrix are finite")
    });

    // Component matrix d x max_dim with deterministic sign: the entry of
    // largest magnitude (first such index) is made positive.
    let mut components = vec![0.0f64; d * max_dim];
    for (rank, &src) in order.iter().take(max_dim).enumerate() {
        let col = eigen.eigenvectors.column(src);
        let mut pivot = 0;
        for j in 1..d {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[j * max_dim + rank] = sign * col[j];
        }
    }

    let mut scores = vec![0.0f64; n * max_dim];
    for i in 0..n {
        for rank in 0..max_dim {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centered[i * d + j] * components[j * max_dim + rank];
            }
            scores[i * max_dim + rank] = acc;
        }
    }

    Ok(Dataset {
        points: scores,
        n,
        d: max_dim,
        labels: data.labels.clone(),
        label_count: data.label_count,
    })
}
