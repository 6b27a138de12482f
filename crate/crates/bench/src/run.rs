//! Replay machinery: drive a structure from a stream, emit per-update
//! metrics rows, verify queries against the exact live input, and
//! compare structures on the same stream.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use num_rational::BigRational;

use dyncoreset::baseline::RecomputeBaseline;
use dyncoreset::dyntree::{CoresetTree, OuterMode, TreeConfig, TreeError, Validation};
use dyncoreset::mergereduce::{MergeReduce, MergeReduceConfig};
use dyncoreset::metric::{Objective, Point, Space, WeightedPoint};
use dyncoreset::oracle::{self, CertMode};
use dyncoreset::static_coreset::{ConstructError, Constructor, ConstructorKind};
use dyncoreset::weights::format_ratio;

use crate::stream::StreamEvent;

pub const METRICS_HEADER: &str = "update_index,op,n,static_calls_nonouter,static_calls_outer,wall_nanos,coreset_size,certified_deviation,phase_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureKind {
    Dyntree,
    MergeReduce,
    Recompute,
}

impl StructureKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dyntree" => Some(StructureKind::Dyntree),
            "mergereduce" => Some(StructureKind::MergeReduce),
            "recompute" => Some(StructureKind::Recompute),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureKind::Dyntree => "dyntree",
            StructureKind::MergeReduce => "mergereduce",
            StructureKind::Recompute => "recompute",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    None,
    Sampled,
    Exhaustive,
}

impl VerifyMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(VerifyMode::None),
            "sampled" => Some(VerifyMode::Sampled),
            "exhaustive" => Some(VerifyMode::Exhaustive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub k: usize,
    pub z: Objective,
    pub eps: f64,
    pub lambda: f64,
    pub c_exp: u32,
    pub constructor: ConstructorKind,
    pub size_const: f64,
    pub bicriteria_factor: u32,
    pub structure: StructureKind,
    pub bucketed: bool,
    pub outer: OuterMode,
    pub verify: VerifyMode,
    pub seed: u64,
    pub validate_invariants: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 2,
            z: Objective::Median,
            eps: 0.5,
            lambda: 0.1,
            c_exp: 2,
            constructor: ConstructorKind::Passthrough,
            size_const: 1.0,
            bicriteria_factor: 2,
            structure: StructureKind::Dyntree,
            bucketed: false,
            outer: OuterMode::Eager,
            verify: VerifyMode::None,
            seed: 0,
            validate_invariants: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            bail!("--eps must lie in (0,1)");
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            bail!("--lambda must lie in (0,1)");
        }
        if self.k < 1 {
            bail!("--k must be at least 1");
        }
        Ok(())
    }

    pub fn build_constructor(&self) -> Constructor {
        let mut c = Constructor::new(self.constructor, self.eps);
        c.size_const = self.size_const;
        c.bicriteria_factor = self.bicriteria_factor;
        c
    }
}

fn stream_dimension(events: &[StreamEvent]) -> usize {
    events
        .iter()
        .find_map(|e| match e {
            StreamEvent::Insert { coords, .. } => Some(coords.len()),
            _ => None,
        })
        .unwrap_or(2)
}

fn stream_insert_count(events: &[StreamEvent]) -> u64 {
    events
        .iter()
        .filter(|e| matches!(e, StreamEvent::Insert { .. }))
        .count() as u64
}

pub fn is_insertion_only(events: &[StreamEvent]) -> bool {
    events
        .iter()
        .all(|e| matches!(e, StreamEvent::Insert { .. } | StreamEvent::Query))
}

enum Runner {
    Tree(CoresetTree),
    Merge(MergeReduce),
    Recompute(RecomputeBaseline),
}

struct StepStats {
    nonouter: u64,
    outer: u64,
    wall_nanos: u128,
    n: usize,
    phase_id: u64,
}

impl Runner {
    fn new(cfg: &RunConfig, events: &[StreamEvent]) -> Result<Self> {
        let dim = stream_dimension(events);
        let space = Space::euclidean(dim);
        let ctor = cfg.build_constructor();
        Ok(match cfg.structure {
            StructureKind::Dyntree => {
                let mut tc = TreeConfig::new(cfg.k, cfg.z, cfg.eps, cfg.lambda, space)
                    .with_constructor(ctor)
                    .with_seed(cfg.seed)
                    .with_bucketed(cfg.bucketed)
                    .with_outer(cfg.outer);
                tc.weight_params = dyncoreset::weights::WeightParams::new(cfg.c_exp, cfg.eps);
                if cfg.validate_invariants {
                    tc = tc.with_validation(Validation::Full);
                }
                Runner::Tree(CoresetTree::new(tc))
            }
            StructureKind::MergeReduce => {
                let n_max = stream_insert_count(events).max(2);
                let mut mc =
                    MergeReduceConfig::new(cfg.k, cfg.z, cfg.eps, cfg.lambda, n_max, space)
                        .with_constructor(ctor)
                        .with_seed(cfg.seed);
                mc.weight_params = dyncoreset::weights::WeightParams::new(cfg.c_exp, cfg.eps);
                Runner::Merge(MergeReduce::new(mc))
            }
            StructureKind::Recompute => {
                let mut b = RecomputeBaseline::new(
                    cfg.k, cfg.z, cfg.eps, cfg.lambda, ctor, space, cfg.seed,
                );
                b.weight_params = dyncoreset::weights::WeightParams::new(cfg.c_exp, cfg.eps);
                Runner::Recompute(b)
            }
        })
    }

    fn apply(&mut self, event: &StreamEvent) -> Result<StepStats> {
        let started = Instant::now();
        match (self, event) {
            (Runner::Tree(t), StreamEvent::Insert { id, weight, coords }) => {
                let r = t.insert(Point::new(*id, coords.clone()), weight.clone())?;
                Ok(StepStats {
                    nonouter: r.nonouter_calls,
                    outer: r.outer_calls,
                    wall_nanos: r.wall_nanos,
                    n: r.n_after,
                    phase_id: r.phase_id,
                })
            }
            (Runner::Tree(t), StreamEvent::Delete { id }) => {
                let r = t.delete(*id)?;
                Ok(StepStats {
                    nonouter: r.nonouter_calls,
                    outer: r.outer_calls,
                    wall_nanos: r.wall_nanos,
                    n: r.n_after,
                    phase_id: r.phase_id,
                })
            }
            (Runner::Tree(t), StreamEvent::UpdateWeight { id, delta }) => {
                let r = t.update_weight(*id, delta)?;
                Ok(StepStats {
                    nonouter: r.nonouter_calls,
                    outer: r.outer_calls,
                    wall_nanos: r.wall_nanos,
                    n: r.n_after,
                    phase_id: r.phase_id,
                })
            }
            (Runner::Merge(m), StreamEvent::Insert { id, weight, coords }) => {
                m.mr_insert(Point::new(*id, coords.clone()), weight.clone())?;
                Ok(StepStats {
                    nonouter: 0,
                    outer: 0,
                    wall_nanos: started.elapsed().as_nanos(),
                    n: m.inserts() as usize,
                    phase_id: 0,
                })
            }
            (Runner::Merge(_), StreamEvent::Delete { .. } | StreamEvent::UpdateWeight { .. }) => {
                bail!("mergereduce is insertion-only; the stream contains deletes or weight updates")
            }
            (Runner::Recompute(b), StreamEvent::Insert { id, weight, coords }) => {
                b.insert(Point::new(*id, coords.clone()), weight.clone())?;
                Ok(StepStats {
                    nonouter: 0,
                    outer: 1,
                    wall_nanos: started.elapsed().as_nanos(),
                    n: b.len(),
                    phase_id: 0,
                })
            }
            (Runner::Recompute(b), StreamEvent::Delete { id }) => {
                b.delete(*id)?;
                Ok(StepStats {
                    nonouter: 0,
                    outer: 1,
                    wall_nanos: started.elapsed().as_nanos(),
                    n: b.len(),
                    phase_id: 0,
                })
            }
            (Runner::Recompute(b), StreamEvent::UpdateWeight { id, delta }) => {
                b.update_weight(*id, delta)?;
                Ok(StepStats {
                    nonouter: 0,
                    outer: 1,
                    wall_nanos: started.elapsed().as_nanos(),
                    n: b.len(),
                    phase_id: 0,
                })
            }
            (_, StreamEvent::Query) => unreachable!("queries handled by the caller"),
        }
    }

    fn query(&mut self) -> Result<Vec<WeightedPoint>> {
        Ok(match self {
            Runner::Tree(t) => t.query()?,
            Runner::Merge(m) => m.mr_query(),
            Runner::Recompute(b) => b.query(),
        })
    }

    /// Ids of the points stored at the tree's root, for the
    /// pass-through cross-check.
    fn root_ids(&self) -> Option<Vec<u64>> {
        match self {
            Runner::Tree(t) => Some(t.root_tagged().items.iter().map(|(p, _)| p.id).collect()),
            _ => None,
        }
    }

    fn phase_id(&self) -> u64 {
        match self {
            Runner::Tree(t) => t.phase().id,
            _ => 0,
        }
    }

    fn len(&self) -> usize {
        match self {
            Runner::Tree(t) => t.len(),
            Runner::Merge(m) => m.inserts() as usize,
            Runner::Recompute(b) => b.len(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplaySummary {
    pub events: usize,
    pub updates: usize,
    pub queries: usize,
    pub mean_update_nanos: f64,
    pub max_update_nanos: u128,
    pub final_n: usize,
    pub final_coreset_size: usize,
    pub verified_queries: usize,
    pub verify_failures: usize,
    pub worst_deviation: f64,
}

/// Replay a stream, writing one metrics row per event and a JSON
/// snapshot per query, plus a final coreset dump.
pub fn replay(
    events: &[StreamEvent],
    cfg: &RunConfig,
    mut metrics: Option<&mut dyn Write>,
    mut snapshots: Option<&mut dyn Write>,
) -> Result<ReplaySummary> {
    cfg.validate()?;
    let mut runner = Runner::new(cfg, events)?;
    let dim = stream_dimension(events);
    let space = Space::euclidean(dim);

    // the exact live input, tracked independently for verification
    let mut live: BTreeMap<u64, (Vec<f64>, BigRational)> = BTreeMap::new();

    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }

    let mut summary = ReplaySummary {
        events: events.len(),
        ..Default::default()
    };
    let mut total_update_nanos: u128 = 0;

    for (idx, event) in events.iter().enumerate() {
        let (stats, coreset_size, deviation) = match event {
            StreamEvent::Query => {
                let started = Instant::now();
                let coreset = runner.query()?;
                let wall = started.elapsed().as_nanos();
                summary.queries += 1;
                let deviation = if cfg.verify != VerifyMode::None {
                    let dev = verify_query(&space, &coreset, &live, cfg)?;
                    summary.verified_queries += 1;
                    if !dev.1 {
                        summary.verify_failures += 1;
                    }
                    summary.worst_deviation = summary.worst_deviation.max(dev.0);
                    // pass-through regime: the root must hold exactly the
                    // live point multiset
                    if cfg.constructor == ConstructorKind::Passthrough {
                        if let Some(mut root_ids) = runner.root_ids() {
                            root_ids.sort_unstable();
                            let mut live_ids: Vec<u64> = live.keys().copied().collect();
                            live_ids.sort_unstable();
                            if root_ids != live_ids {
                                bail!(
                                    "verification: root multiset diverged from the live input at event {idx}"
                                );
                            }
                        }
                    }
                    Some(dev.0)
                } else {
                    None
                };
                if let Some(w) = snapshots.as_deref_mut() {
                    writeln!(w, "{}", snapshot_json(idx, runner.len(), &coreset))?;
                }
                summary.final_coreset_size = coreset.len();
                (
                    StepStats {
                        nonouter: 0,
                        outer: 0,
                        wall_nanos: wall,
                        n: runner.len(),
                        phase_id: runner.phase_id(),
                    },
                    coreset.len(),
                    deviation,
                )
            }
            _ => {
                match event {
                    StreamEvent::Insert { id, weight, coords } => {
                        live.insert(*id, (coords.clone(), weight.clone()));
                    }
                    StreamEvent::Delete { id } => {
                        live.remove(id);
                    }
                    StreamEvent::UpdateWeight { id, delta } => {
                        if let Some((_, w)) = live.get_mut(id) {
                            *w = w.clone() + delta;
                        }
                    }
                    StreamEvent::Query => unreachable!(),
                }
                let stats = runner.apply(event)?;
                summary.updates += 1;
                total_update_nanos += stats.wall_nanos;
                summary.max_update_nanos = summary.max_update_nanos.max(stats.wall_nanos);
                (stats, 0usize, None)
            }
        };
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                idx,
                event.op_code(),
                stats.n,
                stats.nonouter,
                stats.outer,
                stats.wall_nanos,
                coreset_size,
                deviation.map(|d| format!("{d:.9}")).unwrap_or_default(),
                stats.phase_id,
            )?;
        }
    }

    // final coreset dump
    let final_coreset = runner.query()?;
    summary.final_coreset_size = final_coreset.len();
    summary.final_n = runner.len();
    if let Some(w) = snapshots {
        writeln!(w, "{}", snapshot_json(events.len(), runner.len(), &final_coreset))?;
    }
    summary.mean_update_nanos = if summary.updates > 0 {
        total_update_nanos as f64 / summary.updates as f64
    } else {
        0.0
    };
    Ok(summary)
}

/// Certify a query output against the tracked exact input. Returns the
/// worst relative deviation and whether certification passed at eps.
fn verify_query(
    space: &Space,
    coreset: &[WeightedPoint],
    live: &BTreeMap<u64, (Vec<f64>, BigRational)>,
    cfg: &RunConfig,
) -> Result<(f64, bool)> {
    let input: Vec<(Point, BigRational)> = live
        .iter()
        .map(|(id, (coords, w))| (Point::new(*id, coords.clone()), w.clone()))
        .collect();
    let input_wp = oracle::weighted_from_plain(&input);
    let mode = match cfg.verify {
        VerifyMode::Exhaustive => CertMode::Exhaustive,
        VerifyMode::Sampled => CertMode::Sampled {
            count: 200,
            seed: cfg.seed,
        },
        VerifyMode::None => unreachable!(),
    };
    let report = oracle::certify_coreset(space, coreset, &input_wp, cfg.eps, cfg.k, cfg.z, mode)
        .map_err(|e| anyhow!("verification failed to run: {e}"))?;
    Ok((report.worst_deviation, report.passed))
}

fn snapshot_json(event_index: usize, n: usize, coreset: &[WeightedPoint]) -> String {
    let points: Vec<serde_json::Value> = coreset
        .iter()
        .map(|wp| {
            let coords = match &wp.point.loc {
                dyncoreset::metric::Location::Coords(c) => c.clone(),
                dyncoreset::metric::Location::MatrixRow(r) => vec![*r as f64],
            };
            serde_json::json!({
                "id": wp.point.id,
                "weight": format_ratio(&wp.weight.value()),
                "coords": coords,
            })
        })
        .collect();
    serde_json::json!({
        "event_index": event_index,
        "n": n,
        "coreset_size": coreset.len(),
        "coreset": points,
    })
    .to_string()
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub structure: &'static str,
    pub summary: ReplaySummary,
}

/// Run several structures over the same stream and tabulate.
pub fn compare(events: &[StreamEvent], cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    let mut kinds = vec![StructureKind::Dyntree];
    if is_insertion_only(events) {
        kinds.push(StructureKind::MergeReduce);
    }
    kinds.push(StructureKind::Recompute);
    for kind in kinds {
        let mut c = cfg.clone();
        c.structure = kind;
        let summary = replay(events, &c, None, None)
            .with_context(|| format!("running {}", kind.name()))?;
        rows.push(CompareRow {
            structure: kind.name(),
            summary,
        });
    }
    Ok(rows)
}

/// Exit code policy: contract/invariant breaches are 2, everything else 1.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(TreeError::InvariantViolation { .. }) = cause.downcast_ref::<TreeError>() {
            return 2;
        }
        if let Some(TreeError::Construct(ConstructError::ContractViolation(_))) =
            cause.downcast_ref::<TreeError>()
        {
            return 2;
        }
        if let Some(ConstructError::ContractViolation(_)) = cause.downcast_ref::<ConstructError>()
        {
            return 2;
        }
    }
    1
}
