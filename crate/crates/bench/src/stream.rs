//! The update-stream format and its generators.
//!
//! One event per line:
//!   `I <id> <num>[/<den>] <x1> ... <xd>`  insert with exact weight
//!   `D <id>`                              delete
//!   `U <id> <+/-num>[/<den>]`             weight delta
//!   `Q`                                   query
//! Rational literals round-trip exactly; fixtures stay diffable.

use anyhow::{anyhow, bail, Context, Result};
use num_rational::BigRational;
use num_traits::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

use dyncoreset::weights::{format_ratio, parse_ratio};

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Insert {
        id: u64,
        weight: BigRational,
        coords: Vec<f64>,
    },
    Delete {
        id: u64,
    },
    UpdateWeight {
        id: u64,
        delta: BigRational,
    },
    Query,
}

impl StreamEvent {
    pub fn op_code(&self) -> &'static str {
        match self {
            StreamEvent::Insert { .. } => "I",
            StreamEvent::Delete { .. } => "D",
            StreamEvent::UpdateWeight { .. } => "U",
            StreamEvent::Query => "Q",
        }
    }
}

pub fn parse_stream(text: &str) -> Result<Vec<StreamEvent>> {
    let mut events = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let event = parse_line(line)
            .with_context(|| format!("stream parse error at line {}", lineno + 1))?;
        events.push(event);
    }
    Ok(events)
}

fn parse_line(line: &str) -> Result<StreamEvent> {
    let mut parts = line.split_whitespace();
    let op = parts.next().ok_or_else(|| anyhow!("empty event"))?;
    match op {
        "I" => {
            let id: u64 = parts
                .next()
                .ok_or_else(|| anyhow!("I needs an id"))?
                .parse()
                .context("bad id")?;
            let w = parts.next().ok_or_else(|| anyhow!("I needs a weight"))?;
            let weight = parse_ratio(w).ok_or_else(|| anyhow!("bad weight literal {w:?}"))?;
            let coords: Vec<f64> = parts
                .map(|c| c.parse::<f64>().context("bad coordinate"))
                .collect::<Result<_>>()?;
            if coords.is_empty() {
                bail!("I needs at least one coordinate");
            }
            Ok(StreamEvent::Insert { id, weight, coords })
        }
        "D" => {
            let id: u64 = parts
                .next()
                .ok_or_else(|| anyhow!("D needs an id"))?
                .parse()
                .context("bad id")?;
            if parts.next().is_some() {
                bail!("D takes only an id");
            }
            Ok(StreamEvent::Delete { id })
        }
        "U" => {
            let id: u64 = parts
                .next()
                .ok_or_else(|| anyhow!("U needs an id"))?
                .parse()
                .context("bad id")?;
            let lit = parts.next().ok_or_else(|| anyhow!("U needs a delta"))?;
            let (neg, body) = match lit.strip_prefix('-') {
                Some(b) => (true, b),
                None => (false, lit.strip_prefix('+').unwrap_or(lit)),
            };
            let mag = parse_ratio(body).ok_or_else(|| anyhow!("bad delta literal {lit:?}"))?;
            let delta = if neg { -mag } else { mag };
            if parts.next().is_some() {
                bail!("U takes an id and a delta");
            }
            Ok(StreamEvent::UpdateWeight { id, delta })
        }
        "Q" => {
            if parts.next().is_some() {
                bail!("Q takes no arguments");
            }
            Ok(StreamEvent::Query)
        }
        other => bail!("unknown op {other:?}"),
    }
}

pub fn format_stream(events: &[StreamEvent]) -> String {
    let mut out = String::new();
    for e in events {
        match e {
            StreamEvent::Insert { id, weight, coords } => {
                let _ = write!(out, "I {id} {}", format_ratio(weight));
                for c in coords {
                    let _ = write!(out, " {c}");
                }
                out.push('\n');
            }
            StreamEvent::Delete { id } => {
                let _ = writeln!(out, "D {id}");
            }
            StreamEvent::UpdateWeight { id, delta } => {
                let sign = if delta.is_negative() { "-" } else { "+" };
                let _ = writeln!(out, "U {id} {sign}{}", format_ratio(&delta.abs()));
            }
            StreamEvent::Query => out.push_str("Q\n"),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    RandomMix,
    InsertionOnly,
    AdversarialDeleteCoreset,
    ClusterDrift,
}

impl StreamKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random-mix" => Some(StreamKind::RandomMix),
            "insertion-only" => Some(StreamKind::InsertionOnly),
            "adversarial-delete-coreset" => Some(StreamKind::AdversarialDeleteCoreset),
            "cluster-drift" => Some(StreamKind::ClusterDrift),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenParams {
    pub kind: StreamKind,
    /// Initial / target live point count.
    pub points: usize,
    /// Total events after the initial ramp (mix kinds).
    pub events: usize,
    pub delete_fraction: f64,
    pub update_fraction: f64,
    /// Every `query_every` events a Q is emitted (0 = only final).
    pub query_every: usize,
    pub clusters: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            kind: StreamKind::RandomMix,
            points: 200,
            events: 1000,
            delete_fraction: 0.3,
            update_fraction: 0.1,
            query_every: 0,
            clusters: 2,
            spread: 1.0,
            seed: 0,
        }
    }
}

fn cluster_centers(clusters: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    (0..clusters)
        .map(|i| {
            let angle = i as f64 * std::f64::consts::TAU / clusters.max(1) as f64;
            let r = 40.0 + rng.gen_range(0.0..10.0);
            (r * angle.cos(), r * angle.sin())
        })
        .collect()
}

fn sample_point(
    centers: &[(f64, f64)],
    spread: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (cx, cy) = centers[rng.gen_range(0..centers.len())];
    // Box-Muller normal-ish scatter around the cluster center
    let u: f64 = rng.gen_range(1e-9..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = spread * (-2.0 * u.ln()).sqrt();
    vec![cx + r * v.cos(), cy + r * v.sin()]
}

fn small_weight(rng: &mut ChaCha8Rng) -> BigRational {
    let num = rng.gen_range(1..=4i64);
    let den = rng.gen_range(1..=4i64);
    parse_ratio(&format!("{num}/{den}")).unwrap()
}

/// Deterministic stream generation. The adversarial kind needs to run a
/// structure to know what each query returns; the caller supplies that
/// loop via [`generate_adversarial`].
pub fn generate(params: &GenParams) -> Vec<StreamEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let centers = cluster_centers(params.clusters, &mut rng);
    let mut events = Vec::new();
    let mut next_id: u64 = 0;
    let mut live: Vec<u64> = Vec::new();
    // running weights so emitted deltas never drive a weight negative
    let mut weights: std::collections::HashMap<u64, BigRational> = Default::default();

    let push_insert =
        |events: &mut Vec<StreamEvent>, live: &mut Vec<u64>, next_id: &mut u64, rng: &mut ChaCha8Rng, centers: &[(f64, f64)], weights: &mut std::collections::HashMap<u64, BigRational>| {
            let id = *next_id;
            *next_id += 1;
            live.push(id);
            let weight = small_weight(rng);
            weights.insert(id, weight.clone());
            events.push(StreamEvent::Insert {
                id,
                weight,
                coords: sample_point(centers, params.spread, rng),
            });
        };

    match params.kind {
        StreamKind::InsertionOnly => {
            for i in 0..params.points {
                push_insert(&mut events, &mut live, &mut next_id, &mut rng, &centers, &mut weights);
                if params.query_every > 0 && (i + 1) % params.query_every == 0 {
                    events.push(StreamEvent::Query);
                }
            }
            events.push(StreamEvent::Query);
        }
        StreamKind::RandomMix => {
            for _ in 0..params.points {
                push_insert(&mut events, &mut live, &mut next_id, &mut rng, &centers, &mut weights);
            }
            for i in 0..params.events {
                let roll: f64 = rng.gen();
                if roll < params.delete_fraction && live.len() > 1 {
                    let idx = rng.gen_range(0..live.len());
                    let id = live.swap_remove(idx);
                    weights.remove(&id);
                    events.push(StreamEvent::Delete { id });
                } else if roll < params.delete_fraction + params.update_fraction
                    && !live.is_empty()
                {
                    let id = live[rng.gen_range(0..live.len())];
                    // power-of-two denominators keep the running weight's
                    // reduced form small; subtract only when it stays >= 0
                    let mag = parse_ratio(&format!("1/{}", 1 << rng.gen_range(1..=2)))
                        .unwrap();
                    let current = weights.get(&id).cloned().expect("live ids carry weights");
                    let delta = if rng.gen_bool(0.5) && current >= mag {
                        -mag
                    } else {
                        mag
                    };
                    weights.insert(id, current + &delta);
                    events.push(StreamEvent::UpdateWeight { id, delta });
                } else {
                    push_insert(&mut events, &mut live, &mut next_id, &mut rng, &centers, &mut weights);
                }
                if params.query_every > 0 && (i + 1) % params.query_every == 0 {
                    events.push(StreamEvent::Query);
                }
            }
            events.push(StreamEvent::Query);
        }
        StreamKind::ClusterDrift => {
            // clusters orbit while a sliding window inserts ahead and
            // deletes behind
            let mut window: std::collections::VecDeque<u64> = Default::default();
            for i in 0..params.events {
                let t = i as f64 / params.events.max(1) as f64;
                let drift: Vec<(f64, f64)> = centers
                    .iter()
                    .map(|(x, y)| {
                        let a = t * std::f64::consts::TAU;
                        (x * a.cos() - y * a.sin(), x * a.sin() + y * a.cos())
                    })
                    .collect();
                let id = next_id;
                next_id += 1;
                window.push_back(id);
                events.push(StreamEvent::Insert {
                    id,
                    weight: small_weight(&mut rng),
                    coords: sample_point(&drift, params.spread, &mut rng),
                });
                if window.len() > params.points {
                    let id = window.pop_front().unwrap();
                    events.push(StreamEvent::Delete { id });
                }
                if params.query_every > 0 && (i + 1) % params.query_every == 0 {
                    events.push(StreamEvent::Query);
                }
            }
            events.push(StreamEvent::Query);
        }
        StreamKind::AdversarialDeleteCoreset => {
            unreachable!("adversarial streams are produced by generate_adversarial")
        }
    }
    events
}

/// The adaptive-adversary stream: insert `points`, then repeatedly query
/// and delete every returned point until the structure answers with the
/// empty set. `query` is called with the ids deleted so far this round
/// already applied.
pub fn generate_adversarial(
    params: &GenParams,
    mut query: impl FnMut(&[StreamEvent]) -> Result<Vec<u64>>,
) -> Result<Vec<StreamEvent>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let centers = cluster_centers(params.clusters, &mut rng);
    let mut events = Vec::new();
    for id in 0..params.points as u64 {
        events.push(StreamEvent::Insert {
            id,
            weight: small_weight(&mut rng),
            coords: sample_point(&centers, params.spread, &mut rng),
        });
    }
    loop {
        events.push(StreamEvent::Query);
        let returned = query(&events)?;
        if returned.is_empty() {
            break;
        }
        for id in returned {
            events.push(StreamEvent::Delete { id });
        }
        if events.len() > params.points * 1000 {
            bail!("adversarial generation did not terminate");
        }
    }
    Ok(events)
}
