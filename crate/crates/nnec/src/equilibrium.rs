//! The equilibrium predicate and the iterative cluster grower.
//!
//! A set `C` is a `(lambda, k)` equilibrium cluster when every member keeps a
//! strictly larger share of its `k` nearest neighbours inside `C` than the
//! size term `lambda * |C| / n`, while no outsider exceeds that term. The
//! grower iterates the membership update map from a single seed until the set
//! revisits one of its recent states or an iteration cap is hit.
//!
//! `lambda` is carried as an exact rational, so both inequality sides are
//! evaluated in integer arithmetic and no floating-point rounding can flip a
//! membership decision.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neighbours::NeighbourGraph;

/// Default window of recent states checked for cycling.
pub const DEFAULT_CYCLE_WINDOW: usize = 5;
/// Default cap on update sweeps.
pub const DEFAULT_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParamError {
    #[error("lambda must be positive")]
    LambdaNotPositive,
    #[error("lambda denominator must be positive")]
    ZeroDenominator,
    #[error("lambda numerator and denominator must stay below {max}", max = LAMBDA_LIMIT)]
    LambdaTooLarge,
    #[error("cannot parse {input:?} as a lambda value")]
    LambdaParse { input: String },
    #[error("k must satisfy 1 <= k <= k_max of the graph, got k={k} with k_max={k_max}")]
    KOutOfRange { k: usize, k_max: usize },
    #[error("cycle window must be at least 1")]
    ZeroCycleWindow,
    #[error("max iterations must be at least 1")]
    ZeroMaxIterations,
}

const LAMBDA_LIMIT: u32 = 1_000_000;

/// Positive rational threshold, kept reduced.
///
/// Grid values are exact tenths or thirtieths; arbitrary decimals parse
/// exactly, and float intake rounds to the nearest thirtieth (documented on
/// [`Lambda::from_f64_nearest_thirtieth`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lambda {
    num: u32,
    den: u32,
}

impl Lambda {
    pub fn new(num: u32, den: u32) -> Result<Lambda, ParamError> {
        if den == 0 {
            return Err(ParamError::ZeroDenominator);
        }
        if num == 0 {
            return Err(ParamError::LambdaNotPositive);
        }
        if num > LAMBDA_LIMIT || den > LAMBDA_LIMIT {
            return Err(ParamError::LambdaTooLarge);
        }
        let g = gcd(num, den);
        Ok(Lambda {
            num: num / g,
            den: den / g,
        })
    }

    /// Exact construction from integer tenths: `from_tenths(12)` is 1.2.
    pub fn from_tenths(tenths: u32) -> Result<Lambda, ParamError> {
        Lambda::new(tenths, 10)
    }

    /// Parses `"1.2"`, `"2"`, or `"5/3"` exactly.
    pub fn parse(input: &str) -> Result<Lambda, ParamError> {
        let s = input.trim();
        let parse_err = || ParamError::LambdaParse {
            input: input.to_string(),
        };
        if let Some((num, den)) = s.split_once('/') {
            let num: u32 = num.trim().parse().map_err(|_| parse_err())?;
            let den: u32 = den.trim().parse().map_err(|_| parse_err())?;
            return Lambda::new(num, den);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.len() > 6 || frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(parse_err());
            }
            let int: u32 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|_| parse_err())?
            };
            let frac_value: u32 = frac.parse().map_err(|_| parse_err())?;
            let scale = 10u32.pow(frac.len() as u32);
            let num = int
                .checked_mul(scale)
                .and_then(|v| v.checked_add(frac_value))
                .ok_or(ParamError::LambdaTooLarge)?;
            return Lambda::new(num, scale);
        }
        let int: u32 = s.parse().map_err(|_| parse_err())?;
        Lambda::new(int, 1)
    }

    /// Rounds a float to the nearest thirtieth, the finest granularity used by
    /// the built-in search grids. Intended for bindings that only speak f64.
    pub fn from_f64_nearest_thirtieth(value: f64) -> Result<Lambda, ParamError> {
        if !value.is_finite() || value <= 0.0 {
            return Err(ParamError::LambdaNotPositive);
        }
        let thirtieths = (value * 30.0).round();
        if thirtieths < 1.0 || thirtieths > LAMBDA_LIMIT as f64 {
            return Err(ParamError::LambdaTooLarge);
        }
        Lambda::new(thirtieths as u32, 30)
    }

    pub fn numer(&self) -> u32 {
        self.num
    }

    pub fn denom(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialOrd for Lambda {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Lambda {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let lhs = self.num as u64 * other.den as u64;
        let rhs = other.num as u64 * self.den as u64;
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Exact decimal when the denominator divides a power of ten.
        for (scale, digits) in [(1u32, 0usize), (10, 1), (100, 2)] {
            if scale % self.den == 0 {
                let units = self.num as u64 * (scale / self.den) as u64;
                let int = units / scale as u64;
                let frac = units % scale as u64;
                return if digits == 0 {
                    write!(f, "{int}")
                } else {
                    write!(f, "{int}.{frac:0width$}", width = digits)
                };
            }
        }
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Parameters of a single equilibrium clustering run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquilibriumParams {
    pub lambda: Lambda,
    pub k: usize,
    /// Longest cycle the grower can detect (`r`).
    pub cycle_window: usize,
    /// Cap on update sweeps (`T`).
    pub max_iterations: usize,
}

impl EquilibriumParams {
    pub fn new(lambda: Lambda, k: usize) -> EquilibriumParams {
        EquilibriumParams {
            lambda,
            k,
            cycle_window: DEFAULT_CYCLE_WINDOW,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn validate(&self, graph: &NeighbourGraph) -> Result<(), ParamError> {
        if self.k < 1 || self.k > graph.k_max() {
            return Err(ParamError::KOutOfRange {
                k: self.k,
                k_max: graph.k_max(),
            });
        }
        if self.cycle_window < 1 {
            return Err(ParamError::ZeroCycleWindow);
        }
        if self.max_iterations < 1 {
            return Err(ParamError::ZeroMaxIterations);
        }
        Ok(())
    }
}

/// How a growth run terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    /// The update map reached a fixed point.
    Converged,
    /// The set revisited an earlier state within the cycle window.
    Cycled,
    /// The iteration cap was reached first.
    Capped,
}

/// Final set of a growth run plus how it stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquilibriumClusterResult {
    /// Sorted member indices; may be empty.
    pub members: Vec<u32>,
    pub status: Termination,
    /// Number of update sweeps performed.
    pub iterations: usize,
}

/// One record per update sweep, for optional trace emission.
#[derive(Debug, Clone, Copy)]
pub struct SweepTrace<'a> {
    pub t: usize,
    pub size: usize,
    pub added: &'a [u32],
    pub removed: &'a [u32],
}

/// Tests the full equilibrium predicate for an arbitrary index set.
///
/// Both sides are evaluated exactly: with `lambda = p/q` the member condition
/// `|N_k(x_j) ∩ C|/k > lambda |C|/n` becomes `q·n·m_j > p·k·|C|` over
/// integers, and the outsider condition is the mirrored `>=`. The empty set
/// satisfies the predicate vacuously.
///
/// # Panics
/// If a member index is out of range or `params.k > k_max`.
pub fn is_equilibrium(graph: &NeighbourGraph, params: &EquilibriumParams, cluster: &[u32]) -> bool {
    let n = graph.n();
    let counts = graph.overlap_counts(params.k, cluster);
    let mut member = vec![false; n];
    for &j in cluster {
        member[j as usize] = true;
    }
    let p = params.lambda.numer() as u128;
    let q = params.lambda.denom() as u128;
    let k = params.k as u128;
    let size = cluster.len() as u128;
    let n = n as u128;
    for (i, &m) in counts.iter().enumerate() {
        let share = q * n * m as u128;
        let bound = p * k * size;
        if member[i] {
            if share <= bound {
                return false;
            }
        } else if share > bound {
            return false;
        }
    }
    true
}

/// Grows an equilibrium cluster from a seed; see [`grow_cluster_with_trace`].
pub fn grow_cluster(
    graph: &NeighbourGraph,
    params: &EquilibriumParams,
    seed: usize,
) -> EquilibriumClusterResult {
    grow_cluster_with_trace(graph, params, seed, |_| {})
}

/// Iterates the membership update map from `C0 = {seed}`, invoking `trace`
/// once per sweep.
///
/// Each sweep recomputes the member set as the points whose neighbour share
/// strictly exceeds the size term of the previous set, then compares the new
/// set against the previous `cycle_window` states (a sorted-member fingerprint
/// short-circuits the comparison; equality is confirmed on match). Stopping on
/// the immediately preceding state is convergence, on an older one cycling,
/// and exhausting `max_iterations` caps the run. The set at detection time is
/// returned; an empty set is legal.
///
/// Overlap counts are maintained incrementally across sweeps via the reverse
/// adjacency of the points that changed.
///
/// # Panics
/// If `seed >= n` or the parameters do not fit the graph.
pub fn grow_cluster_with_trace<F: FnMut(SweepTrace<'_>)>(
    graph: &NeighbourGraph,
    params: &EquilibriumParams,
    seed: usize,
    mut trace: F,
) -> EquilibriumClusterResult {
    assert!(seed < graph.n(), "seed {seed} out of range");
    let n = graph.n();
    let k = params.k;
    let p = params.lambda.numer() as u128;
    let q = params.lambda.denom() as u128;
    let n_wide = n as u128;
    let k_wide = k as u128;

    let mut members: Vec<u32> = vec![seed as u32];
    let mut counts = graph.overlap_counts(k, &members);
    let mut history: VecDeque<(u64, Vec<u32>)> = VecDeque::with_capacity(params.cycle_window + 1);
    history.push_back((fingerprint(&members), members.clone()));

    for t in 1..=params.max_iterations {
        let bound = p * k_wide * members.len() as u128;
        let mut next: Vec<u32> = Vec::new();
        for (i, &m) in counts.iter().enumerate() {
            if q * n_wide * m as u128 > bound {
                next.push(i as u32);
            }
        }
        let (added, removed) = sorted_diff(&members, &next);
        trace(SweepTrace {
            t,
            size: next.len(),
            added: &added,
            removed: &removed,
        });

        let fp = fingerprint(&next);
        let mut matched_back = None;
        for (back, (fp_h, set_h)) in history.iter().rev().enumerate() {
            if *fp_h == fp && set_h == &next {
                matched_back = Some(back + 1);
                break;
            }
        }
        if let Some(back) = matched_back {
            return EquilibriumClusterResult {
                members: next,
                status: if back == 1 {
                    Termination::Converged
                } else {
                    Termination::Cycled
                },
                iterations: t,
            };
        }

        graph.apply_overlap_delta(k, &mut counts, &added, &removed);
        members = next;
        history.push_back((fp, members.clone()));
        if history.len() > params.cycle_window {
            history.pop_front();
        }
    }

    EquilibriumClusterResult {
        members,
        status: Termination::Capped,
        iterations: params.max_iterations,
    }
}

/// FNV-1a over the sorted member list; order-insensitive because the inputs
/// are always kept sorted.
fn fingerprint(members: &[u32]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &m in members {
        for byte in m.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash ^ members.len() as u64
}

/// Splits two sorted sets into (added, removed) relative to `old`.
fn sorted_diff(old: &[u32], new: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut added = Vec::new();
    let mut removed = Vec::new();
    let (mut a, mut b) = (0usize, 0usize);
    while a < old.len() || b < new.len() {
        match (old.get(a), new.get(b)) {
            (Some(&x), Some(&y)) if x == y => {
                a += 1;
                b += 1;
            }
            (Some(&x), Some(&y)) if x < y => {
                removed.push(x);
                a += 1;
            }
            (Some(_), Some(&y)) => {
                added.push(y);
                b += 1;
            }
            (Some(&x), None) => {
                removed.push(x);
                a += 1;
            }
            (None, Some(&y)) => {
                added.push(y);
                b += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    (added, removed)
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
    fn lambda_construction_and_display() {
        assert_eq!(Lambda::from_tenths(20).unwrap().to_string(), "2");
        assert_eq!(Lambda::from_tenths(12).unwrap().to_string(), "1.2");
        assert_eq!(Lambda::new(5, 3).unwrap().to_string(), "5/3");
        assert_eq!(Lambda::parse("1.2").unwrap(), Lambda::from_tenths(12).unwrap());
        assert_eq!(Lambda::parse("5/3").unwrap(), Lambda::new(5, 3).unwrap());
        assert_eq!(Lambda::parse("2").unwrap(), Lambda::new(2, 1).unwrap());
        assert!(Lambda::parse("0").is_err());
        assert!(Lambda::parse("nope").is_err());
        assert!(Lambda::new(1, 0).is_err());
        // Reduction happens on construction.
        assert_eq!(Lambda::new(20, 10).unwrap(), Lambda::new(2, 1).unwrap());
        assert!(Lambda::new(3, 10).unwrap() < Lambda::new(1, 3).unwrap());
    }

    #[test]
    fn lambda_from_f64_rounds_to_thirtieths() {
        let l = Lambda::from_f64_nearest_thirtieth(1.2).unwrap();
        assert_eq!(l, Lambda::new(36, 30).unwrap());
        let l = Lambda::from_f64_nearest_thirtieth(1.66).unwrap();
        assert_eq!(l, Lambda::new(5, 3).unwrap());
        assert!(Lambda::from_f64_nearest_thirtieth(-1.0).is_err());
    }

    #[test]
    fn whole_set_is_equilibrium_below_one() {
        let graph = line_graph();
        let params = EquilibriumParams::new(Lambda::from_tenths(5).unwrap(), 2);
        let all: Vec<u32> = (0..6).collect();
        assert!(is_equilibrium(&graph, &params, &all));
    }

    #[test]
    fn empty_set_is_equilibrium() {
        let graph = line_graph();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 2);
        assert!(is_equilibrium(&graph, &params, &[]));
    }

    #[test]
    fn left_triple_is_equilibrium_at_lambda_one() {
        let graph = line_graph();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 2);
        assert!(is_equilibrium(&graph, &params, &[0, 1, 2]));
        // A lopsided set is not: member 3 has no neighbours inside.
        assert!(!is_equilibrium(&graph, &params, &[0, 1, 2, 3]));
    }

    #[test]
    fn growth_traces_the_hand_computed_path() {
        let graph = line_graph();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 2);
        let mut sizes = Vec::new();
        let result = grow_cluster_with_trace(&graph, &params, 0, |sweep| {
            sizes.push((sweep.t, sweep.size, sweep.added.len(), sweep.removed.len()));
        });
        // C1 = {1,2} (the seed exits), C2 = {0,1,2}, C3 = C2.
        assert_eq!(result.members, vec![0, 1, 2]);
        assert_eq!(result.status, Termination::Converged);
        assert_eq!(result.iterations, 3);
        assert_eq!(sizes, vec![(1, 2, 2, 1), (2, 3, 1, 0), (3, 3, 0, 0)]);
        assert!(is_equilibrium(&graph, &params, &result.members));
    }

    #[test]
    fn unreachable_seed_converges_to_empty() {
        let data = Dataset::from_rows(
            &[vec![0.0], vec![1.0], vec![2.0], vec![100.0]],
            None,
        )
        .unwrap();
        let graph = build_graph(&data, 1).unwrap();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 1);
        let result = grow_cluster(&graph, &params, 3);
        assert!(result.members.is_empty());
        assert_eq!(result.status, Termination::Converged);
        assert_eq!(result.iterations, 2);
    }

    #[test]
    fn two_point_cycle_is_detected() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]], None).unwrap();
        let graph = build_graph(&data, 1).unwrap();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 1);
        let result = grow_cluster(&graph, &params, 0);
        // C1 = {1}, C2 = {0}, C3 = {1} = C1: a 2-cycle caught at t = 3.
        assert_eq!(result.status, Termination::Cycled);
        assert_eq!(result.iterations, 3);
        assert_eq!(result.members, vec![1]);
    }

    #[test]
    fn cap_applies_when_window_is_too_short() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]], None).unwrap();
        let graph = build_graph(&data, 1).unwrap();
        let mut params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 1);
        params.cycle_window = 1; // a 2-cycle is invisible now
        params.max_iterations = 7;
        let result = grow_cluster(&graph, &params, 0);
        assert_eq!(result.status, Termination::Capped);
        assert_eq!(result.iterations, 7);
    }

    #[test]
    fn replaying_iterations_reproduces_members() {
        let graph = line_graph();
        let params = EquilibriumParams::new(Lambda::from_tenths(10).unwrap(), 2);
        let result = grow_cluster(&graph, &params, 0);
        // Re-apply the raw update map `iterations` times from the seed.
        let mut members: Vec<u32> = vec![0];
        for _ in 0..result.iterations {
            let counts = graph.overlap_counts(params.k, &members);
            let bound =
                params.lambda.numer() as u128 * params.k as u128 * members.len() as u128;
            members = (0..graph.n())
                .filter(|&i| {
                    params.lambda.denom() as u128 * graph.n() as u128 * counts[i] as u128 > bound
                })
                .map(|i| i as u32)
                .collect();
        }
        assert_eq!(members, result.members);
    }

    #[test]
    fn converged_members_are_fixed_points(){
        let graph = line_graph();
        let params = EquilibriumParams::new(Lambda::from_tenths(15).unwrap(), 2);
        for seed in 0..graph.n() {
            let result = grow_cluster(&graph, &params, seed);
            if result.status == Termination::Converged {
                let counts = graph.overlap_counts(params.k, &result.members);
                let bound = params.lambda.numer() as u128
                    * params.k as u128
                    * result.members.len() as u128;
                let image: Vec<u32> = (0..graph.n())
                    .filter(|&i| {
                        params.lambda.denom() as u128 * graph.n() as u128 * counts[i] as u128
                            > bound
                    })
                    .map(|i| i as u32)
                    .collect();
                assert_eq!(image, result.members);
            }
        }
    }

    #[test]
    fn integer_path_matches_float_path_on_fixtures() {
        let graph = line_graph();
        for tenths in [10u32, 12, 15, 20, 30] {
            let lambda = Lambda::from_tenths(tenths).unwrap();
            let params = EquilibriumParams::new(lambda, 2);
            for seed in 0..graph.n() {
                // Float route: naive evaluation of the update map.
                let mut members: Vec<u32> = vec![seed as u32];
                let exact = grow_cluster(&graph, &params, seed);
                for _ in 0..exact.iterations {
                    let counts = graph.overlap_counts(params.k, &members);
                    let bound = lambda.as_f64() * members.len() as f64 / graph.n() as f64;
                    members = (0..graph.n())
                        .filter(|&i| counts[i] as f64 / params.k as f64 > bound)
                        .map(|i| i as u32)
                        .collect();
                }
                assert_eq!(members, exact.members, "lambda={lambda} seed={seed}");
            }
        }
    }
}
