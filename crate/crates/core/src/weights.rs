//! Exact rational weight arithmetic with structured denominators.
//!
//! Weights flowing through the dynamic structure are fractions whose
//! denominators are never materialized as plain integers while the tree
//! operates: a denominator is a multiset of known factors ([`DenomTag`]),
//! compared and divided symbolically and only turned into a `BigUint` at
//! I/O boundaries. Numerators are arbitrary-precision integers.
//!
//! The module also houses the rounding primitives (floor rounding,
//! fractional-part rounding, input-weight rounding) and the error-budget
//! algebra used to justify the per-level epsilon schedule.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightError {
    #[error("weight numerator or denominator exceeds the configured bound {bound} (got {got})")]
    InputBoundExceeded { bound: String, got: String },
    #[error("target denominator is not a multiple of the weight's denominator")]
    NotACommonMultiple,
    #[error("fractional-part rounding requires r >= 1 (got {0})")]
    BelowOne(String),
    #[error("denominator factor value overflows 128 bits (n_cap={n_cap}, exponent={exp})")]
    FactorOverflow { n_cap: u64, exp: u32 },
    #[error("weight must be nonnegative")]
    Negative,
}

/// `ceil(log2(n))` for `n >= 1`; `0` for `n <= 1`.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Global rounding parameters shared by every weight in one structure:
/// the exponent `c` bounding raw input weights by `n^c`, and epsilon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightParams {
    pub c_exp: u32,
    pub eps: f64,
}

impl WeightParams {
    pub fn new(c_exp: u32, eps: f64) -> Self {
        assert!(eps > 0.0 && eps < 1.0, "eps must lie in (0,1)");
        WeightParams { c_exp, eps }
    }

    /// `ceil(1/eps)`.
    pub fn inv_eps(&self) -> u64 {
        (1.0 / self.eps).ceil() as u64
    }

    /// `n_cap^(c+1)` as a factor value.
    pub fn phase_base(&self, n_cap: u64) -> Result<u128, WeightError> {
        let mut v: u128 = 1;
        for _ in 0..=self.c_exp {
            v = v
                .checked_mul(n_cap as u128)
                .ok_or(WeightError::FactorOverflow {
                    n_cap,
                    exp: self.c_exp + 1,
                })?;
        }
        Ok(v)
    }

    /// `ceil(ceil_log2(n_cap)/eps)`: the per-level rounding grain.
    /// Uses the integer ceiling of `log2` inside; this only makes the
    /// grain finer, so the `1/d <= eps/log2(n_cap)` error bound is kept.
    pub fn level_round(&self, n_cap: u64) -> u64 {
        let l = ceil_log2(n_cap).max(1) as f64;
        (l / self.eps).ceil() as u64
    }

    /// The denominator stamped on a freshly rounded input weight:
    /// `n_cap^(c+1) * ceil(1/eps)`.
    pub fn input_denom(&self, n_cap: u64) -> Result<DenomTag, WeightError> {
        let mut tag = DenomTag::one();
        tag.push(DenomFactor::InvEps(self.inv_eps()));
        tag.push(DenomFactor::PhaseBase {
            n_phase: n_cap,
            value: self.phase_base(n_cap)?,
        });
        Ok(tag)
    }
}

/// One atomic factor of a structured denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DenomFactor {
    /// `ceil(1/eps)`.
    InvEps(u64),
    /// `n_phase^(c+1)`, stamped when an input weight is rounded in a
    /// phase whose bound is `n_phase`.
    PhaseBase { n_phase: u64, value: u128 },
    /// The coreset-size threshold of the phase that ran the constructor.
    SizeThreshold(u64),
    /// `ceil(ceil_log2(n_phase)/eps)`: fractional-part rounding grain.
    LevelRound { n_phase: u64, value: u64 },
    /// An unstructured factor (uniform-sampling baseline only).
    Plain(u64),
}

impl DenomFactor {
    pub fn value(&self) -> BigUint {
        match *self {
            DenomFactor::InvEps(v) => BigUint::from(v),
            DenomFactor::PhaseBase { value, .. } => BigUint::from(value),
            DenomFactor::SizeThreshold(v) => BigUint::from(v),
            DenomFactor::LevelRound { value, .. } => BigUint::from(value),
            DenomFactor::Plain(v) => BigUint::from(v),
        }
    }

    /// True for the factor kinds the structured rounding pipeline
    /// produces (everything except `Plain`).
    pub fn is_structured(&self) -> bool {
        !matches!(self, DenomFactor::Plain(_))
    }
}

/// A denominator as a multiset of factors. The realized value is the
/// product of `factor^exponent` over all entries; the empty tag is 1.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DenomTag {
    factors: BTreeMap<DenomFactor, u32>,
}

impl DenomTag {
    pub fn one() -> Self {
        DenomTag::default()
    }

    pub fn is_one(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn push(&mut self, f: DenomFactor) {
        *self.factors.entry(f).or_insert(0) += 1;
    }

    pub fn with(mut self, f: DenomFactor) -> Self {
        self.push(f);
        self
    }

    pub fn factors(&self) -> impl Iterator<Item = (&DenomFactor, u32)> {
        self.factors.iter().map(|(f, e)| (f, *e))
    }

    /// Structural divisibility: every factor of `self` appears in
    /// `other` with at least the same exponent.
    pub fn divides(&self, other: &DenomTag) -> bool {
        self.factors
            .iter()
            .all(|(f, e)| other.factors.get(f).is_some_and(|oe| oe >= e))
    }

    /// Pointwise max of exponents: the smallest structural common
    /// multiple of the two tags.
    pub fn union(&self, other: &DenomTag) -> DenomTag {
        let mut out = self.clone();
        for (f, e) in &other.factors {
            let entry = out.factors.entry(*f).or_insert(0);
            *entry = (*entry).max(*e);
        }
        out
    }

    /// Materialize the denominator value.
    pub fn value(&self) -> BigUint {
        let mut v = BigUint::one();
        for (f, e) in &self.factors {
            v *= f.value().pow(*e);
        }
        v
    }

    /// The exact factor by which a numerator must be scaled to move a
    /// weight from this denominator to `target`.
    pub fn scale_to(&self, target: &DenomTag) -> Result<BigUint, WeightError> {
        if !self.divides(target) {
            return Err(WeightError::NotACommonMultiple);
        }
        let mut scale = BigUint::one();
        for (f, e) in &target.factors {
            let have = self.factors.get(f).copied().unwrap_or(0);
            if *e > have {
                scale *= f.value().pow(*e - have);
            }
        }
        Ok(scale)
    }

    pub fn all_structured(&self) -> bool {
        self.factors.keys().all(DenomFactor::is_structured)
    }
}

impl fmt::Display for DenomTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_one() {
            return write!(f, "1");
        }
        write!(f, "{}", self.value())
    }
}

/// A nonnegative exact rational: arbitrary-precision numerator over a
/// structurally tracked denominator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundedRational {
    pub numer: BigUint,
    pub denom: DenomTag,
}

impl BoundedRational {
    pub fn new(numer: BigUint, denom: DenomTag) -> Self {
        BoundedRational { numer, denom }
    }

    pub fn from_integer(n: u64) -> Self {
        BoundedRational {
            numer: BigUint::from(n),
            denom: DenomTag::one(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.numer.is_zero()
    }

    /// Exact value as a reduced big rational.
    pub fn value(&self) -> BigRational {
        BigRational::new(
            BigInt::from(self.numer.clone()),
            BigInt::from(self.denom.value()),
        )
    }

    pub fn to_f64(&self) -> f64 {
        ratio_to_f64(&self.value())
    }

    /// Rescale to `target` without changing the value.
    pub fn rebase(&self, target: &DenomTag) -> Result<BoundedRational, WeightError> {
        let scale = self.denom.scale_to(target)?;
        Ok(BoundedRational {
            numer: &self.numer * scale,
            denom: target.clone(),
        })
    }

    /// Exact sum; operands are brought to the union denominator first.
    pub fn add(&self, other: &BoundedRational) -> BoundedRational {
        let target = self.denom.union(&other.denom);
        let a = self.rebase(&target).expect("union is a common multiple");
        let b = other.rebase(&target).expect("union is a common multiple");
        BoundedRational {
            numer: a.numer + b.numer,
            denom: target,
        }
    }

    /// Exact difference, `None` if the result would be negative.
    pub fn checked_sub(&self, other: &BoundedRational) -> Option<BoundedRational> {
        let target = self.denom.union(&other.denom);
        let a = self.rebase(&target).expect("union is a common multiple");
        let b = other.rebase(&target).expect("union is a common multiple");
        if a.numer < b.numer {
            None
        } else {
            Some(BoundedRational {
                numer: a.numer - b.numer,
                denom: target,
            })
        }
    }

    /// Exact comparison via cross multiplication.
    pub fn cmp_exact(&self, other: &BoundedRational) -> std::cmp::Ordering {
        (&self.numer * other.denom.value()).cmp(&(&other.numer * self.denom.value()))
    }
}

/// `floor(a*d/b)` for positive integers. The result `c` satisfies
/// `a/b - a/d <= c/d <= a/b`, so `c*D/d` stays within `[1 +- b/d]` of
/// `a*D/b` for any nonnegative `D`.
pub fn floor_round(a: &BigUint, b: &BigUint, d: &BigUint) -> BigUint {
    debug_assert!(!a.is_zero() && !b.is_zero() && !d.is_zero());
    a * d / b
}

/// `ceil(a*d/b)` for positive integers; the input-weight variant rounds
/// up so integer weights survive exactly.
pub fn ceil_round(a: &BigUint, b: &BigUint, d: &BigUint) -> BigUint {
    debug_assert!(!b.is_zero());
    (a * d + b - BigUint::one()) / b
}

/// Round the fractional part of `r >= 1` onto the grid `1/d`:
/// returns `floor(r) + floor(frac(r)*d)/d`, which lies in
/// `[(1 - 1/d) * r, r]`.
pub fn round_fractional_part(r: &BigRational, d: u64) -> Result<BigRational, WeightError> {
    if r < &BigRational::one() {
        return Err(WeightError::BelowOne(r.to_string()));
    }
    let num = numerator_on_grid(r, d)?;
    Ok(BigRational::new(BigInt::from(num), BigInt::from(d)))
}

/// Same rounding as [`round_fractional_part`] but returning the integer
/// numerator over denominator `d` directly.
pub fn numerator_on_grid(r: &BigRational, d: u64) -> Result<BigUint, WeightError> {
    if r < &BigRational::one() {
        return Err(WeightError::BelowOne(r.to_string()));
    }
    let floor = r.floor().to_integer();
    let frac = r - BigRational::from_integer(floor.clone());
    // c = floor(frac * d), computed exactly
    let c = (frac * BigRational::from_integer(BigInt::from(d)))
        .floor()
        .to_integer();
    let num = floor * BigInt::from(d) + c;
    Ok(num.to_biguint().expect("nonnegative by construction"))
}

/// Round a raw input weight `a/b` (both bounded by `n_cap^c`) to the
/// phase denominator `d = n_cap^(c+1)*ceil(1/eps)` via `f = ceil(a*d/b)`.
/// Guarantees `f <= n_cap^(2c+1)*ceil(1/eps)` and a relative error of at
/// most `eps/n_cap`.
pub fn round_input_weight(
    a: &BigUint,
    b: &BigUint,
    n_cap: u64,
    params: &WeightParams,
) -> Result<BoundedRational, WeightError> {
    let bound = BigUint::from(n_cap).pow(params.c_exp);
    if a > &bound || b > &bound || b.is_zero() {
        return Err(WeightError::InputBoundExceeded {
            bound: bound.to_string(),
            got: format!("{a}/{b}"),
        });
    }
    let denom = params.input_denom(n_cap)?;
    let f = if a.is_zero() {
        BigUint::zero()
    } else {
        ceil_round(a, b, &denom.value())
    };
    // Claim-level cap: f <= n_cap^(2c+1) * ceil(1/eps)
    debug_assert!(
        f <= BigUint::from(n_cap).pow(2 * params.c_exp + 1) * BigUint::from(params.inv_eps())
    );
    Ok(BoundedRational::new(f, denom))
}

/// Bring every weight of `set` to the shared denominator `target`,
/// scaling numerators exactly.
pub fn rebase_to_common_denominator<T: Clone>(
    set: &[(T, BoundedRational)],
    target: &DenomTag,
) -> Result<Vec<(T, BoundedRational)>, WeightError> {
    set.iter()
        .map(|(x, w)| Ok((x.clone(), w.rebase(target)?)))
        .collect()
}

/// `(1 + eps_s)^level - 1`, the exact accumulated quality of a
/// `level`-deep chain of eps_s-coresets. Equals the binomial sum
/// `sum_{i=1..level} C(level,i) eps_s^i`.
pub fn level_error_budget(level: u32, eps_s: &BigRational) -> BigRational {
    let one = BigRational::one();
    (one.clone() + eps_s).pow(level as i32) - one
}

/// The quality budget of a chain of per-level coresets.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBudget {
    pub level: u32,
    pub per_level_eps: BigRational,
}

impl ErrorBudget {
    pub fn new(level: u32, per_level_eps: BigRational) -> Self {
        ErrorBudget {
            level,
            per_level_eps,
        }
    }

    /// The exact accumulated bound `(1 + eps_s)^level - 1`.
    pub fn accumulated(&self) -> BigRational {
        level_error_budget(self.level, &self.per_level_eps)
    }
}

/// Exact binomial sum `sum_{i=1..l} C(l,i) alpha^i`, the slow route the
/// closed form above is checked against.
pub fn binomial_sum(l: u32, alpha: &BigRational) -> BigRational {
    let mut total = BigRational::zero();
    let mut coeff = BigInt::one();
    let mut power = BigRational::one();
    for i in 1..=l {
        // C(l, i) built incrementally: C(l,i) = C(l,i-1)*(l-i+1)/i
        coeff = coeff * BigInt::from(l - i + 1) / BigInt::from(i);
        power *= alpha;
        total += BigRational::from_integer(coeff.clone()) * power.clone();
    }
    total
}

/// Regression guard on the budget algebra:
/// `alpha + (1+alpha) * sum_{i=1..l-1} C(l-1,i) alpha^i
///  == sum_{i=1..l} C(l,i) alpha^i`, exactly.
pub fn binom_recurrence_check(l: u32, alpha: &BigRational) -> bool {
    assert!(l >= 1);
    let lhs = alpha + (BigRational::one() + alpha) * binomial_sum(l - 1, alpha);
    let rhs = binomial_sum(l, alpha);
    lhs == rhs
}

/// `sum_{i=1..l} C(l,i) (alpha/(2l))^i <= alpha` for `alpha` in `[0,1]`:
/// the bound that justifies running each level at `eps/(2l)`.
pub fn budget_bound_check(l: u32, alpha: &BigRational) -> bool {
    assert!(l >= 1);
    assert!(!alpha.is_negative() && alpha <= &BigRational::one());
    let per_level = alpha / BigRational::from_integer(BigInt::from(2 * l));
    level_error_budget(l, &per_level) <= *alpha
}

/// Quality of a coreset of a coreset: `eps + delta + eps*delta`.
pub fn compose_quality(eps: f64, delta: f64) -> f64 {
    eps + delta + eps * delta
}

/// Exact conversion of an f64 into a rational (every finite f64 is one).
pub fn ratio_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite float")
}

pub fn ratio_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        // fall back to a manual division for values outside f64 range
        let n = r.numer().to_f64().unwrap_or(f64::MAX);
        let d = r.denom().to_f64().unwrap_or(f64::MAX);
        n / d
    })
}

/// Parse a weight literal `NUM` or `NUM/DEN` into an exact nonnegative
/// rational. Round-trips exactly with [`format_ratio`].
pub fn parse_ratio(s: &str) -> Option<BigRational> {
    let s = s.trim();
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s, "1"),
    };
    let n: BigInt = num.parse().ok()?;
    let d: BigInt = den.parse().ok()?;
    if d.is_zero() || n.is_negative() || d.is_negative() {
        return None;
    }
    Some(BigRational::new(n, d))
}

pub fn format_ratio(r: &BigRational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}
