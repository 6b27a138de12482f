//! Ground-truth machinery: exact costs on full inputs, exhaustive
//! solution enumeration, coreset certification, and tiny-instance
//! optimal clustering. Everything here is deliberately brute force and
//! independent of the sampling implementations it checks.

use num_rational::BigRational;
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metric::{MetricError, Objective, Point, Space, WeightedPoint};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("exhaustive enumeration guard exceeded: C({n}, <= {k}) = {count} > {guard}")]
    GuardExceeded {
        n: usize,
        k: usize,
        count: u128,
        guard: u128,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("inner certification failed at eps={0}")]
    InnerCertificationFailed(f64),
}

pub const ENUMERATION_GUARD: u128 = 1_000_000;

/// How certification walks the solution space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertMode {
    /// Every subset of the candidate points of size <= k.
    Exhaustive,
    /// Random solutions plus distance-power-seeded and degenerate ones.
    Sampled { count: usize, seed: u64 },
}

/// Outcome of certifying one candidate coreset against one input.
#[derive(Debug, Clone)]
pub struct CertificationReport {
    pub solutions_tested: usize,
    pub exhaustive: bool,
    /// max over S of |c(S,X) - c(S,C)| / c(S,X); infinite when the input
    /// cost is zero but the coreset cost is not.
    pub worst_deviation: f64,
    pub passed: bool,
    pub eps: f64,
    /// Ids of the centers realizing the worst deviation.
    pub witness: Vec<u64>,
}

/// Number of subsets of size 1..=k, saturating.
fn count_solutions(n: usize, k: usize) -> u128 {
    let mut total: u128 = 0;
    for size in 1..=k.min(n) {
        let mut c: u128 = 1;
        for i in 0..size {
            c = c.saturating_mul((n - i) as u128) / (i as u128 + 1);
        }
        total = total.saturating_add(c);
    }
    total
}

/// Visit every subset of `1..=k` indices out of `n`.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut stack: Vec<usize> = Vec::with_capacity(k);
    fn rec(n: usize, k: usize, start: usize, stack: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if !stack.is_empty() {
            f(stack);
        }
        if stack.len() == k {
            return;
        }
        for i in start..n {
            stack.push(i);
            rec(n, k, i + 1, stack, f);
            stack.pop();
        }
    }
    rec(n, k, 0, &mut stack, &mut f);
}

/// A flattened, distance-cached view of (input, coreset) used to price
/// many solutions quickly: weights converted to f64 once, distances from
/// every candidate center to every point computed once per solution.
struct CostView<'a> {
    space: &'a Space,
    candidates: Vec<&'a Point>,
    input: Vec<(&'a Point, f64)>,
    coreset: Vec<(&'a Point, f64)>,
    /// dist[c][i]: candidate c to input point i
    dist_input: Vec<Vec<f64>>,
    dist_coreset: Vec<Vec<f64>>,
}

impl<'a> CostView<'a> {
    fn new(
        space: &'a Space,
        candidates: Vec<&'a Point>,
        input: Vec<(&'a Point, f64)>,
        coreset: Vec<(&'a Point, f64)>,
    ) -> Result<Self, MetricError> {
        let dist_input = candidates
            .iter()
            .map(|c| input.iter().map(|(p, _)| space.distance(c, p)).collect())
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        let dist_coreset = candidates
            .iter()
            .map(|c| coreset.iter().map(|(p, _)| space.distance(c, p)).collect())
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        Ok(CostView {
            space,
            candidates,
            input,
            coreset,
            dist_input,
            dist_coreset,
        })
    }

    fn pair_costs(&self, centers: &[usize], z: Objective) -> (f64, f64) {
        let cx = priced(&self.input, &self.dist_input, centers, z);
        let cc = priced(&self.coreset, &self.dist_coreset, centers, z);
        (cx, cc)
    }
}

fn priced(points: &[(&Point, f64)], dist: &[Vec<f64>], centers: &[usize], z: Objective) -> f64 {
    let mut total = 0.0;
    for (i, (_, w)) in points.iter().enumerate() {
        let mut best = f64::INFINITY;
        for &c in centers {
            let d = dist[c][i];
            if d < best {
                best = d;
            }
        }
        total += w * z.apply(best);
    }
    total
}

fn to_f64_set(points: &[WeightedPoint]) -> Vec<(&Point, f64)> {
    points
        .iter()
        .map(|wp| (&wp.point, wp.weight.to_f64()))
        .collect()
}

/// Certify that `coreset` is an eps-coreset of `input`: for every tested
/// solution S, `c(S, input)` must lie in `[1-eps, 1+eps] * c(S, coreset)`.
/// Candidates are the input's points (the default query space).
pub fn certify_coreset(
    space: &Space,
    coreset: &[WeightedPoint],
    input: &[WeightedPoint],
    eps: f64,
    k: usize,
    z: Objective,
    mode: CertMode,
) -> Result<CertificationReport, OracleError> {
    let input_f = to_f64_set(input);
    let coreset_f = to_f64_set(coreset);
    certify_f64(space, &coreset_f, &input_f, eps, k, z, mode)
}

/// The f64-weight core of [`certify_coreset`], usable when weights have
/// already been materialized.
pub fn certify_f64(
    space: &Space,
    coreset: &[(&Point, f64)],
    input: &[(&Point, f64)],
    eps: f64,
    k: usize,
    z: Objective,
    mode: CertMode,
) -> Result<CertificationReport, OracleError> {
    let candidates: Vec<&Point> = input.iter().map(|(p, _)| *p).collect();
    certify_against_candidates(space, coreset, input, candidates, eps, k, z, mode)
}

/// Certification over an explicit candidate list, for query spaces other
/// than the input's own points.
#[allow(clippy::too_many_arguments)]
pub fn certify_with_candidates(
    space: &Space,
    coreset: &[WeightedPoint],
    input: &[WeightedPoint],
    candidates: &[Point],
    eps: f64,
    k: usize,
    z: Objective,
    mode: CertMode,
) -> Result<CertificationReport, OracleError> {
    let input_f = to_f64_set(input);
    let coreset_f = to_f64_set(coreset);
    certify_against_candidates(
        space,
        &coreset_f,
        &input_f,
        candidates.iter().collect(),
        eps,
        k,
        z,
        mode,
    )
}

#[allow(clippy::too_many_arguments)]
fn certify_against_candidates<'a>(
    space: &Space,
    coreset: &[(&'a Point, f64)],
    input: &[(&'a Point, f64)],
    candidates: Vec<&'a Point>,
    eps: f64,
    k: usize,
    z: Objective,
    mode: CertMode,
) -> Result<CertificationReport, OracleError> {
    let n = candidates.len();
    if n == 0 {
        // empty input: a coreset must also cost zero everywhere, which an
        // empty or zero-weight coreset does vacuously
        return Ok(CertificationReport {
            solutions_tested: 0,
            exhaustive: true,
            worst_deviation: 0.0,
            passed: coreset.iter().all(|(_, w)| *w == 0.0),
            eps,
            witness: Vec::new(),
        });
    }
    let view = CostView::new(space, candidates, input.to_vec(), coreset.to_vec())?;

    let mut tested = 0usize;
    let mut worst = 0.0f64;
    let mut witness: Vec<u64> = Vec::new();
    let mut passed = true;
    let mut check = |centers: &[usize]| {
        tested += 1;
        let (cx, cc) = view.pair_costs(centers, z);
        let dev = if cx == 0.0 {
            if cc == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (cx - cc).abs() / cx
        };
        if dev > worst {
            worst = dev;
            witness = centers.iter().map(|&c| view.candidates[c].id).collect();
        }
        // the defining two-sided bound, relative to the coreset cost
        if !(cx >= (1.0 - eps) * cc && cx <= (1.0 + eps) * cc) {
            passed = false;
        }
    };

    let exhaustive = match mode {
        CertMode::Exhaustive => {
            let count = count_solutions(n, k);
            if count > ENUMERATION_GUARD {
                return Err(OracleError::GuardExceeded {
                    n,
                    k,
                    count,
                    guard: ENUMERATION_GUARD,
                });
            }
            for_each_subset(n, k, &mut check);
            true
        }
        CertMode::Sampled { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..n).collect();
            // degenerate stress solutions: every singleton
            for i in 0..n {
                check(&[i]);
            }
            // distance-power-seeded solutions
            for round in 0..4u64 {
                let centers =
                    d2_seed_indices(&view, k, z, seed.wrapping_add(round.wrapping_mul(0x9e37)));
                if !centers.is_empty() {
                    check(&centers);
                }
            }
            // farthest-pair style solution
            if n >= 2 {
                let far = farthest_pair(&view)?;
                check(&far);
            }
            for _ in 0..count {
                idx.shuffle(&mut rng);
                let size = rng.gen_range(1..=k.min(n));
                let mut centers: Vec<usize> = idx[..size].to_vec();
                centers.sort_unstable();
                check(&centers);
            }
            false
        }
    };

    Ok(CertificationReport {
        solutions_tested: tested,
        exhaustive,
        worst_deviation: worst,
        passed,
        eps,
        witness,
    })
}

/// The candidate nearest to a given input point.
fn nearest_candidate(view: &CostView, input_idx: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..view.candidates.len() {
        let d = view.dist_input[c][input_idx];
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn d2_seed_indices(view: &CostView, k: usize, z: Objective, seed: u64) -> Vec<usize> {
    let n = view.input.len();
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // seed over input points, then snap each pick to its nearest
    // candidate center
    let mut picks = vec![rng.gen_range(0..n)];
    let mut centers = vec![nearest_candidate(view, picks[0])];
    while picks.len() < k.min(n) {
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let d = centers
                    .iter()
                    .map(|&c| view.dist_input[c][i])
                    .fold(f64::INFINITY, f64::min);
                view.input[i].1 * z.apply(d)
            })
            .collect();
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut t = rng.gen_range(0.0..total);
        let mut pick = n - 1;
        for (i, s) in scores.iter().enumerate() {
            if t < *s {
                pick = i;
                break;
            }
            t -= s;
        }
        picks.push(pick);
        centers.push(nearest_candidate(view, pick));
    }
    centers.sort_unstable();
    centers.dedup();
    centers
}

fn farthest_pair(view: &CostView) -> Result<Vec<usize>, MetricError> {
    let n = view.input.len();
    let mut best = (0usize, 0usize);
    let mut best_d = -1.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = view.space.distance(view.input[i].0, view.input[j].0)?;
            if d > best_d {
                best_d = d;
                best = (i, j);
            }
        }
    }
    let mut pair = vec![
        nearest_candidate(view, best.0),
        nearest_candidate(view, best.1),
    ];
    pair.sort_unstable();
    pair.dedup();
    Ok(pair)
}

/// Exhaustive optimum over all subsets of at most k input points.
pub fn optimal_cost(
    space: &Space,
    input: &[WeightedPoint],
    k: usize,
    z: Objective,
) -> Result<(f64, Vec<u64>), OracleError> {
    let n = input.len();
    if n == 0 || k == 0 {
        return Ok((0.0, Vec::new()));
    }
    if k >= n {
        return Ok((0.0, input.iter().map(|wp| wp.point.id).collect()));
    }
    let count = count_solutions(n, k);
    if count > ENUMERATION_GUARD {
        return Err(OracleError::GuardExceeded {
            n,
            k,
            count,
            guard: ENUMERATION_GUARD,
        });
    }
    let input_f = to_f64_set(input);
    let candidates: Vec<&Point> = input_f.iter().map(|(p, _)| *p).collect();
    let view = CostView::new(space, candidates, input_f.clone(), Vec::new())?;
    let mut best = f64::INFINITY;
    let mut best_ids = Vec::new();
    for_each_subset(n, k, |centers| {
        let c = priced(&view.input, &view.dist_input, centers, z);
        if c < best {
            best = c;
            best_ids = centers.iter().map(|&i| view.candidates[i].id).collect();
        }
    });
    Ok((best, best_ids))
}

/// Exact-rational certification deviation on a fixed list of solutions:
/// used by the composition checks, where deviations must be reproduced
/// exactly (weights rational, distances rationalized doubles).
pub fn exact_worst_deviation(
    space: &Space,
    coreset: &[(Point, BigRational)],
    input: &[(Point, BigRational)],
    k: usize,
    z: Objective,
) -> Result<BigRational, OracleError> {
    let n = input.len();
    let count = count_solutions(n, k);
    if count > ENUMERATION_GUARD {
        return Err(OracleError::GuardExceeded {
            n,
            k,
            count,
            guard: ENUMERATION_GUARD,
        });
    }
    let mut worst = BigRational::zero();
    let candidates: Vec<&Point> = input.iter().map(|(p, _)| p).collect();
    for_each_subset(n, k, |centers| {
        let sol = crate::metric::Solution {
            centers: centers
                .iter()
                .map(|&i| candidates[i].clone())
                .collect(),
        };
        let cx = crate::metric::cost_exact_weights(space, &sol, input, z).unwrap();
        let cc = crate::metric::cost_exact_weights(space, &sol, coreset, z).unwrap();
        if cx.is_zero() {
            return;
        }
        let dev = if cx >= cc {
            (cx.clone() - cc) / cx
        } else {
            (cc - cx.clone()) / cx
        };
        if dev > worst {
            worst = dev;
        }
    });
    Ok(worst)
}

/// Build an eps-coreset of `input`, a delta-coreset of that, and check
/// the composition certifies at `eps + delta + eps*delta`. The "coreset"
/// at each level is the weight-scaling trick: multiplying all weights by
/// (1 + e) has worst deviation exactly e, so the composed deviation is
/// exactly (1+eps)(1+delta) - 1.
pub fn certify_composition(
    space: &Space,
    input: &[(Point, BigRational)],
    eps: &BigRational,
    delta: &BigRational,
    k: usize,
    z: Objective,
) -> Result<bool, OracleError> {
    use num_traits::One;
    let one = BigRational::one();
    let scale1 = &one + eps;
    let level1: Vec<(Point, BigRational)> = input
        .iter()
        .map(|(p, w)| (p.clone(), w * &scale1))
        .collect();
    let scale2 = &one + delta;
    let level2: Vec<(Point, BigRational)> = level1
        .iter()
        .map(|(p, w)| (p.clone(), w * &scale2))
        .collect();
    let composed_eps = eps + delta + eps * delta;
    let worst = exact_worst_deviation(space, &level2, input, k, z)?;
    Ok(worst == composed_eps)
}

/// Scale-chain form of the level-budget identity: an l-level chain of
/// (1+eps_s) weight scalings deviates by exactly (1+eps_s)^l - 1.
pub fn scaled_chain_deviation(
    space: &Space,
    input: &[(Point, BigRational)],
    eps_s: &BigRational,
    levels: u32,
    k: usize,
    z: Objective,
) -> Result<BigRational, OracleError> {
    use num_traits::One;
    let scale = (BigRational::one() + eps_s).pow(levels as i32);
    let chained: Vec<(Point, BigRational)> = input
        .iter()
        .map(|(p, w)| (p.clone(), w * &scale))
        .collect();
    exact_worst_deviation(space, &chained, input, k, z)
}

pub fn weighted_from_plain(points: &[(Point, BigRational)]) -> Vec<WeightedPoint> {
    use crate::weights::{BoundedRational, DenomFactor, DenomTag};
    use num_traits::ToPrimitive;
    points
        .iter()
        .map(|(p, w)| {
            let numer = w.numer().to_biguint().expect("nonnegative weight");
            let den = w.denom().to_u64().expect("small denominator");
            let denom = if den == 1 {
                DenomTag::one()
            } else {
                DenomTag::one().with(DenomFactor::Plain(den))
            };
            WeightedPoint {
                point: p.clone(),
                weight: BoundedRational::new(numer, denom),
            }
        })
        .collect()
}
