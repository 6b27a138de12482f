//! Browser playground for the fully-dynamic coreset tree.
//!
//! A single wasm class wraps one tree; the page drives it with three
//! operations (insert a point, delete near a point, adversary step:
//! delete everything the last query returned) and reads back a JSON
//! snapshot of the live points, the maintained coreset, and per-update
//! counters after every call.

use num_rational::BigRational;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use dyncoreset::dyntree::{CoresetTree, TreeConfig};
use dyncoreset::metric::{Location, Objective, Point, Space};
use dyncoreset::oracle::{self, CertMode};
use dyncoreset::static_coreset::{Constructor, ConstructorKind};
use dyncoreset::weights::format_ratio;

#[derive(Serialize)]
struct PointView {
    id: u64,
    x: f64,
    y: f64,
    weight: f64,
    weight_exact: String,
}

#[derive(Serialize)]
struct Snapshot {
    n: usize,
    points: Vec<PointView>,
    coreset: Vec<PointView>,
    phase_id: u64,
    phase_n_cap: u64,
    phase_updates_left: u64,
    threshold: String,
    last_op: String,
    last_nonouter_calls: u64,
    last_outer_calls: u64,
    last_wall_micros: f64,
    work_bound: u64,
    certified: Option<bool>,
    worst_deviation: Option<f64>,
    error: Option<String>,
}

fn coords_of(loc: &Location) -> (f64, f64) {
    match loc {
        Location::Coords(c) => (
            c.first().copied().unwrap_or(0.0),
            c.get(1).copied().unwrap_or(0.0),
        ),
        Location::MatrixRow(r) => (*r as f64, 0.0),
    }
}

#[wasm_bindgen]
pub struct Playground {
    tree: CoresetTree,
    next_id: u64,
    last_error: Option<String>,
}

#[wasm_bindgen]
impl Playground {
    /// Build a fresh tree. `constructor` is one of passthrough, uniform,
    /// rings, sensitivity; `size_const` scales its size formula.
    #[wasm_bindgen(constructor)]
    pub fn new(
        k: usize,
        z: u32,
        eps: f64,
        lambda: f64,
        constructor: &str,
        size_const: f64,
        seed: u64,
    ) -> Result<Playground, JsError> {
        let kind = ConstructorKind::parse(constructor)
            .ok_or_else(|| JsError::new("unknown constructor"))?;
        let z = Objective::from_z(z).ok_or_else(|| JsError::new("z must be 1 or 2"))?;
        let mut ctor = Constructor::new(kind, eps);
        ctor.size_const = size_const;
        let cfg = TreeConfig::new(k, z, eps, lambda, Space::euclidean(2))
            .with_constructor(ctor)
            .with_seed(seed);
        Ok(Playground {
            tree: CoresetTree::new(cfg),
            next_id: 0,
            last_error: None,
        })
    }

    /// Insert a point at (x, y); `weight` is a rational literal like
    /// "3/2" (defaults to 1 when unparsable).
    pub fn insert(&mut self, x: f64, y: f64, weight: &str) {
        let w = dyncoreset::weights::parse_ratio(weight)
            .unwrap_or_else(|| BigRational::from_integer(1.into()));
        let id = self.next_id;
        self.next_id += 1;
        self.last_error = self
            .tree
            .insert(Point::new(id, vec![x, y]), w)
            .err()
            .map(|e| e.to_string());
    }

    /// Delete the live point nearest to (x, y); no-op on an empty tree.
    pub fn delete_near(&mut self, x: f64, y: f64) {
        let mut best: Option<(u64, f64)> = None;
        for (p, _) in self.tree.true_point_set() {
            let (px, py) = coords_of(&p.loc);
            let d = (px - x).powi(2) + (py - y).powi(2);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((p.id, d));
            }
        }
        if let Some((id, _)) = best {
            self.last_error = self.tree.delete(id).err().map(|e| e.to_string());
        }
    }

    /// The adaptive adversary's move: delete every point the current
    /// coreset contains. Returns how many points were deleted.
    pub fn adversary_step(&mut self) -> usize {
        let ids: Vec<u64> = match self.tree.query() {
            Ok(c) => c.iter().map(|wp| wp.point.id).collect(),
            Err(e) => {
                self.last_error = Some(e.to_string());
                return 0;
            }
        };
        let mut deleted = 0;
        for id in ids {
            match self.tree.delete(id) {
                Ok(_) => deleted += 1,
                Err(e) => {
                    self.last_error = Some(e.to_string());
                    break;
                }
            }
        }
        deleted
    }

    /// Full state as JSON. When `certify` is set and the instance is
    /// small enough, the coreset is checked exhaustively against the
    /// exact live input.
    pub fn snapshot(&mut self, certify: bool) -> String {
        let coreset = self.tree.query().unwrap_or_default();
        let points: Vec<PointView> = self
            .tree
            .true_point_set()
            .iter()
            .map(|(p, w)| {
                let (x, y) = coords_of(&p.loc);
                PointView {
                    id: p.id,
                    x,
                    y,
                    weight: dyncoreset::weights::ratio_to_f64(w),
                    weight_exact: format_ratio(w),
                }
            })
            .collect();
        let coreset_view: Vec<PointView> = coreset
            .iter()
            .map(|wp| {
                let (x, y) = coords_of(&wp.point.loc);
                PointView {
                    id: wp.point.id,
                    x,
                    y,
                    weight: wp.weight.to_f64(),
                    weight_exact: format_ratio(&wp.weight.value()),
                }
            })
            .collect();
        let (certified, worst) = if certify && self.tree.len() <= 400 && !coreset.is_empty() {
            let input = oracle::weighted_from_plain(&self.tree.true_point_set());
            let cfg = self.tree.config().clone();
            match oracle::certify_coreset(
                &Space::euclidean(2),
                &coreset,
                &input,
                cfg.eps,
                cfg.k,
                cfg.z,
                CertMode::Exhaustive,
            ) {
                Ok(r) => (Some(r.passed), Some(r.worst_deviation)),
                Err(_) => (None, None),
            }
        } else {
            (None, None)
        };
        let report = self.tree.last_report().clone();
        let n = self.tree.len().max(1) as u64;
        let snap = Snapshot {
            n: self.tree.len(),
            points,
            coreset: coreset_view,
            phase_id: self.tree.phase().id,
            phase_n_cap: self.tree.phase().n_cap,
            phase_updates_left: self.tree.phase().updates_left,
            threshold: format!("{}", self.tree.phase().threshold),
            last_op: report.op.to_string(),
            last_nonouter_calls: report.nonouter_calls,
            last_outer_calls: report.outer_calls,
            last_wall_micros: report.wall_nanos as f64 / 1e3,
            work_bound: 4 * dyncoreset::weights::ceil_log2(n) as u64,
            certified,
            worst_deviation: worst,
            error: self.last_error.take(),
        };
        serde_json::to_string(&snap).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }
}
