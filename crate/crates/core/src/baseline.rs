//! Full-recompute baseline: stores the live points and reruns the static
//! constructor over the entire set on every update. The quality matches
//! a single static call; the per-update cost is what the dynamic tree is
//! measured against.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::Zero;

use crate::dyntree::TaggedSet;
use crate::metric::{Objective, Point, Space, WeightedPoint};
use crate::static_coreset::{derive_seed, CallParams, ConstructError, Constructor, SizeBound};
use crate::weights::{round_input_weight, WeightError, WeightParams};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("point id {0} is already live")]
    DuplicateId(u64),
    #[error("point id {0} is not live")]
    UnknownId(u64),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Construct(#[from] ConstructError),
}

pub struct RecomputeBaseline {
    pub k: usize,
    pub z: Objective,
    pub eps: f64,
    pub lambda: f64,
    pub weight_params: WeightParams,
    pub constructor: Constructor,
    pub space: Space,
    pub seed: u64,
    points: Vec<(Point, BigRational)>,
    cache: TaggedSet,
    updates: u64,
}

impl RecomputeBaseline {
    pub fn new(
        k: usize,
        z: Objective,
        eps: f64,
        lambda: f64,
        constructor: Constructor,
        space: Space,
        seed: u64,
    ) -> Self {
        RecomputeBaseline {
            k,
            z,
            eps,
            lambda,
            weight_params: WeightParams::new(2, eps),
            constructor,
            space,
            seed,
            points: Vec::new(),
            cache: TaggedSet::empty(),
            updates: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn insert(&mut self, point: Point, weight: BigRational) -> Result<(), BaselineError> {
        if self.points.iter().any(|(p, _)| p.id == point.id) {
            return Err(BaselineError::DuplicateId(point.id));
        }
        self.points.push((point, weight));
        self.recompute()
    }

    /// Load many points with a single recompute at the end; benchmark
    /// setup only.
    pub fn preload(
        &mut self,
        points: impl IntoIterator<Item = (Point, BigRational)>,
    ) -> Result<(), BaselineError> {
        self.points.extend(points);
        self.recompute()
    }

    pub fn delete(&mut self, id: u64) -> Result<(), BaselineError> {
        let before = self.points.len();
        self.points.retain(|(p, _)| p.id != id);
        if self.points.len() == before {
            return Err(BaselineError::UnknownId(id));
        }
        self.recompute()
    }

    pub fn update_weight(&mut self, id: u64, delta: &BigRational) -> Result<(), BaselineError> {
        let slot = self
            .points
            .iter_mut()
            .find(|(p, _)| p.id == id)
            .ok_or(BaselineError::UnknownId(id))?;
        slot.1 = &slot.1 + delta;
        if slot.1 < BigRational::zero() {
            slot.1 = &slot.1 - delta;
            return Err(BaselineError::Weight(WeightError::Negative));
        }
        self.recompute()
    }

    pub fn query(&self) -> Vec<WeightedPoint> {
        self.cache.materialize()
    }

    /// One static call over the whole set, sized like the tree's outer
    /// instance (eps/3, lambda/2).
    fn recompute(&mut self) -> Result<(), BaselineError> {
        self.updates += 1;
        if self.points.is_empty() {
            self.cache = TaggedSet::empty();
            return Ok(());
        }
        let n_cap = (4 * self.points.len() as u64).max(8);
        let wp = self.weight_params;
        let denom = wp.input_denom(n_cap)?;
        let mut items: Vec<(Point, BigUint)> = Vec::with_capacity(self.points.len());
        let mut total = BigUint::zero();
        for (p, w) in &self.points {
            let num = w.numer().to_biguint().ok_or(WeightError::Negative)?;
            let den = w.denom().to_biguint().expect("positive");
            let rounded = if num.is_zero() {
                BigUint::zero()
            } else {
                round_input_weight(&num, &den, n_cap, &wp)?.numer
            };
            total += &rounded;
            items.push((p.clone(), rounded));
        }
        let eps_s = self.eps / 3.0;
        let lambda_s = self.lambda / 2.0;
        let bound = self
            .constructor
            .size_bound(eps_s, lambda_s, &total, self.k, n_cap);
        self.cache = match bound {
            SizeBound::Unbounded => TaggedSet { denom, items },
            SizeBound::Finite(s) => {
                let params = CallParams {
                    k: self.k,
                    z: self.z,
                    eps_s,
                    lambda_s,
                    s_scale: s,
                    n_cap,
                    seed: derive_seed(self.seed, 0xba5e, self.updates),
                    space: &self.space,
                    weight_params: &self.weight_params,
                };
                let out = self.constructor.run(&items, &params)?;
                let mut tag = denom;
                for f in &out.extra_denom {
                    tag.push(*f);
                }
                TaggedSet {
                    denom: tag,
                    items: out.items,
                }
            }
        };
        Ok(())
    }
}
