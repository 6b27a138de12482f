//! The insertion-only merge-and-reduce baseline: buckets that fill and
//! carry like a binary counter, each full bucket holding a coreset that
//! stands in for its capacity's worth of original points. Used as a
//! comparator and as a cross-check on insertion-only streams.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::Zero;
use thiserror::Error;

use crate::dyntree::TaggedSet;
use crate::metric::{Objective, Point, Space, WeightedPoint};
use crate::static_coreset::{derive_seed, CallParams, ConstructError, Constructor, SizeBound};
use crate::weights::{
    ceil_log2, round_input_weight, BoundedRational, WeightError, WeightParams,
};

#[derive(Debug, Error)]
pub enum MergeReduceError {
    #[error("merge-and-reduce is insertion-only: deletions are not supported")]
    DeletionUnsupported,
    #[error("capacity {0} reached; N_max must be supplied upfront")]
    CapacityReached(u64),
    #[error("point id {0} is already live")]
    DuplicateId(u64),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Construct(#[from] ConstructError),
}

#[derive(Debug, Clone)]
pub struct MergeReduceConfig {
    pub k: usize,
    pub z: Objective,
    pub eps: f64,
    pub lambda: f64,
    /// Insertion-only structures know their capacity upfront; the
    /// per-level schedule is eps/(2*ceil_log2(n_max)).
    pub n_max: u64,
    pub weight_params: WeightParams,
    pub constructor: Constructor,
    pub space: Space,
    pub seed: u64,
}

impl MergeReduceConfig {
    pub fn new(k: usize, z: Objective, eps: f64, lambda: f64, n_max: u64, space: Space) -> Self {
        MergeReduceConfig {
            k,
            z,
            eps,
            lambda,
            n_max,
            weight_params: WeightParams::new(2, eps),
            constructor: Constructor::new(
                crate::static_coreset::ConstructorKind::Passthrough,
                eps,
            ),
            space,
            seed: 0,
        }
    }

    pub fn with_constructor(mut self, c: Constructor) -> Self {
        self.constructor = c;
        self
    }

    pub fn with_seed(mut self, s: u64) -> Self {
        self.seed = s;
        self
    }

    fn node_eps(&self) -> f64 {
        self.eps / (2.0 * ceil_log2(self.n_max).max(1) as f64)
    }

    fn node_lambda(&self) -> f64 {
        self.lambda / (2.0 * self.n_max as f64)
    }
}

/// One full bucket: the coreset plus how many reduce levels its
/// contents have been through (at most its index, by the counter).
#[derive(Debug, Clone)]
struct Bucket {
    set: TaggedSet,
    reduce_depth: u32,
}

/// Bucket i (1-indexed) has capacity 2^(i-1) original points and stores
/// only a coreset of them.
pub struct MergeReduce {
    cfg: MergeReduceConfig,
    buckets: Vec<Option<Bucket>>,
    inserts: u64,
    threshold: SizeBound,
    ids: std::collections::HashSet<u64>,
}

impl MergeReduce {
    pub fn new(cfg: MergeReduceConfig) -> Self {
        let w0 = BigUint::from(cfg.n_max).pow(2 * cfg.weight_params.c_exp + 2)
            * BigUint::from(cfg.weight_params.inv_eps());
        let threshold =
            cfg.constructor
                .size_bound(cfg.node_eps(), cfg.node_lambda(), &w0, cfg.k, cfg.n_max);
        MergeReduce {
            cfg,
            buckets: Vec::new(),
            inserts: 0,
            threshold,
            ids: std::collections::HashSet::new(),
        }
    }

    pub fn inserts(&self) -> u64 {
        self.inserts
    }

    /// Bucket occupancy, least-significant first: equals the binary
    /// representation of the insert count.
    pub fn bucket_pattern(&self) -> Vec<bool> {
        self.buckets.iter().map(Option::is_some).collect()
    }

    /// How many reduce levels each full bucket's contents have been
    /// through; bucket at index i (0-based) has been through at most i,
    /// so its certified budget is level_error_budget(depth, eps_s).
    pub fn reduce_depths(&self) -> Vec<Option<u32>> {
        self.buckets
            .iter()
            .map(|b| b.as_ref().map(|b| b.reduce_depth))
            .collect()
    }

    pub fn mr_insert(&mut self, point: Point, weight: BigRational) -> Result<(), MergeReduceError> {
        if self.inserts >= self.cfg.n_max {
            return Err(MergeReduceError::CapacityReached(self.cfg.n_max));
        }
        if !self.ids.insert(point.id) {
            return Err(MergeReduceError::DuplicateId(point.id));
        }
        let wp = self.cfg.weight_params;
        let num = weight.numer().to_biguint().ok_or(WeightError::Negative)?;
        let den = weight.denom().to_biguint().expect("positive");
        let rounded = if num.is_zero() {
            BigUint::zero()
        } else {
            round_input_weight(&num, &den, self.cfg.n_max, &wp)?
        .numer
        };
        let fresh = Bucket {
            set: TaggedSet {
                denom: wp.input_denom(self.cfg.n_max)?,
                items: vec![(point, rounded)],
            },
            reduce_depth: 0,
        };

        // binary-counter carry: merge everything below the first empty
        // bucket into it, then reduce
        let mut carry = fresh;
        let mut slot = 0usize;
        loop {
            if slot == self.buckets.len() {
                self.buckets.push(None);
            }
            match self.buckets[slot].take() {
                None => break,
                Some(existing) => {
                    carry = Bucket {
                        set: merge(existing.set, carry.set)?,
                        reduce_depth: existing.reduce_depth.max(carry.reduce_depth),
                    };
                    slot += 1;
                }
            }
        }
        let (reduced, sampled) = self.reduce(carry.set, slot as u64)?;
        self.buckets[slot] = Some(Bucket {
            set: reduced,
            reduce_depth: carry.reduce_depth + sampled as u32,
        });
        self.inserts += 1;
        Ok(())
    }

    pub fn mr_delete(&self) -> Result<(), MergeReduceError> {
        Err(MergeReduceError::DeletionUnsupported)
    }

    /// Union of all full buckets.
    pub fn mr_query(&self) -> Vec<WeightedPoint> {
        let mut out = Vec::new();
        for b in self.buckets.iter().flatten() {
            for (p, w) in &b.set.items {
                out.push(WeightedPoint {
                    point: p.clone(),
                    weight: BoundedRational::new(w.clone(), b.set.denom.clone()),
                });
            }
        }
        out
    }

    pub fn query_total_weight(&self) -> BigRational {
        self.mr_query()
            .iter()
            .fold(BigRational::zero(), |acc, wp| acc + wp.weight.value())
    }

    fn reduce(
        &mut self,
        set: TaggedSet,
        bucket_index: u64,
    ) -> Result<(TaggedSet, bool), MergeReduceError> {
        if !self.threshold.exceeded_by(set.len()) {
            return Ok((set, false));
        }
        let s_scale = self.threshold.finite().expect("exceeded implies finite");
        let params = CallParams {
            k: self.cfg.k,
            z: self.cfg.z,
            eps_s: self.cfg.node_eps(),
            lambda_s: self.cfg.node_lambda(),
            s_scale,
            n_cap: self.cfg.n_max,
            seed: derive_seed(self.cfg.seed, bucket_index, self.inserts),
            space: &self.cfg.space,
            weight_params: &self.cfg.weight_params,
        };
        let out = self.cfg.constructor.run(&set.items, &params)?;
        let mut denom = set.denom;
        for f in &out.extra_denom {
            denom.push(*f);
        }
        Ok((
            TaggedSet {
                denom,
                items: out.items,
            },
            out.sampled,
        ))
    }
}

fn merge(a: TaggedSet, b: TaggedSet) -> Result<TaggedSet, MergeReduceError> {
    let target = a.denom.union(&b.denom);
    let mut items = Vec::with_capacity(a.len() + b.len());
    for set in [&a, &b] {
        let scale = set.denom.scale_to(&target).map_err(WeightError::from_scale)?;
        for (p, w) in &set.items {
            items.push((p.clone(), w * &scale));
        }
    }
    Ok(TaggedSet {
        denom: target,
        items,
    })
}

// small shim so merge() can use ? on scale errors
trait FromScale {
    fn from_scale(e: WeightError) -> WeightError;
}
impl FromScale for WeightError {
    fn from_scale(e: WeightError) -> WeightError {
        e
    }
}
