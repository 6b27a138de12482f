//! Command-line harness: stream generation, replay with metrics, and
//! structure comparisons.

mod run;
mod stream;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use dyncoreset::dyntree::OuterMode;
use dyncoreset::metric::Objective;
use dyncoreset::static_coreset::ConstructorKind;

use run::{compare, exit_code_for, replay, RunConfig, StructureKind, VerifyMode};
use stream::{format_stream, generate, generate_adversarial, parse_stream, GenParams, StreamKind};

#[derive(Parser)]
#[command(
    name = "coreset-bench",
    about = "Dynamic coreset harness: generate, replay, and compare update streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Number of centers a solution may use
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Cost power: 1 = k-median, 2 = k-means
    #[arg(long, default_value_t = 1)]
    z: u32,
    /// Target coreset quality
    #[arg(long, default_value_t = 0.5)]
    eps: f64,
    /// Target failure probability
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Input weights are fractions bounded by n^c
    #[arg(long = "c-exp", default_value_t = 2)]
    c_exp: u32,
    /// Static constructor plugged into the structure
    #[arg(long, default_value = "passthrough")]
    constructor: String,
    /// Multiplier on the constructor's size-function formula
    #[arg(long = "size-const", default_value_t = 1.0)]
    size_const: f64,
    /// Bicriteria center-count multiplier
    #[arg(long = "bicriteria-factor", default_value_t = 2)]
    bicriteria_factor: u32,
    /// Structure to drive
    #[arg(long, default_value = "dyntree")]
    structure: String,
    /// Batch leaves into buckets of Theta(s') points
    #[arg(long, default_value_t = false)]
    bucketed: bool,
    /// When the outer instance runs: eager or lazy
    #[arg(long, default_value = "eager")]
    outer: String,
    /// Query verification: none, sampled, or exhaustive
    #[arg(long, default_value = "none")]
    verify: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run full structural self-checks inside the tree
    #[arg(long = "validate", default_value_t = false)]
    validate: bool,
}

impl ConfigArgs {
    fn to_run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig {
            k: self.k,
            z: Objective::from_z(self.z).ok_or_else(|| anyhow!("--z must be 1 or 2"))?,
            eps: self.eps,
            lambda: self.lambda,
            c_exp: self.c_exp,
            constructor: ConstructorKind::parse(&self.constructor)
                .ok_or_else(|| anyhow!("unknown constructor {:?}", self.constructor))?,
            size_const: self.size_const,
            bicriteria_factor: self.bicriteria_factor,
            structure: StructureKind::parse(&self.structure)
                .ok_or_else(|| anyhow!("unknown structure {:?}", self.structure))?,
            bucketed: self.bucketed,
            outer: match self.outer.as_str() {
                "eager" => OuterMode::Eager,
                "lazy" => OuterMode::Lazy,
                other => return Err(anyhow!("unknown outer mode {other:?}")),
            },
            verify: VerifyMode::parse(&self.verify)
                .ok_or_else(|| anyhow!("unknown verify mode {:?}", self.verify))?,
            seed: self.seed,
            validate_invariants: self.validate,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Replay a stream file through a structure, emitting metrics
    Replay {
        /// Stream file (one event per line)
        #[arg(long)]
        stream: PathBuf,
        /// Metrics CSV destination (stdout if omitted)
        #[arg(long = "metrics-out")]
        metrics_out: Option<PathBuf>,
        /// JSON coreset snapshots destination (one line per query)
        #[arg(long = "coreset-out")]
        coreset_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a reproducible stream file
    Generate {
        #[arg(long)]
        kind: String,
        /// Initial or window point count
        #[arg(long, default_value_t = 200)]
        points: usize,
        /// Post-ramp event count (mix kinds)
        #[arg(long, default_value_t = 1000)]
        events: usize,
        #[arg(long = "delete-fraction", default_value_t = 0.3)]
        delete_fraction: f64,
        #[arg(long = "update-fraction", default_value_t = 0.1)]
        update_fraction: f64,
        /// Emit a query every this many events (0 = final only)
        #[arg(long = "query-every", default_value_t = 0)]
        query_every: usize,
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long)]
        out: PathBuf,
        /// Structure config used by the adversarial generator
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run dyntree, mergereduce (insertion-only streams), and recompute
    /// over the same stream and print a summary table
    Compare {
        #[arg(long)]
        stream: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Replay {
            stream,
            metrics_out,
            coreset_out,
            config,
        } => {
            let cfg = config.to_run_config()?;
            let text = fs::read_to_string(&stream)
                .with_context(|| format!("reading {}", stream.display()))?;
            let events = parse_stream(&text)?;

            let stdout = std::io::stdout();
            let mut metrics_file;
            let mut stdout_lock;
            let metrics: &mut dyn Write = match &metrics_out {
                Some(p) => {
                    metrics_file = std::io::BufWriter::new(
                        fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                    );
                    &mut metrics_file
                }
                None => {
                    stdout_lock = stdout.lock();
                    &mut stdout_lock
                }
            };
            let mut snapshot_file;
            let snapshots: Option<&mut dyn Write> = match &coreset_out {
                Some(p) => {
                    snapshot_file = std::io::BufWriter::new(
                        fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                    );
                    Some(&mut snapshot_file)
                }
                None => None,
            };
            let summary = replay(&events, &cfg, Some(metrics), snapshots)?;
            eprintln!(
                "replayed {} events ({} updates, {} queries): mean update {:.1} us, max {:.1} us, final n={}, coreset size {}{}",
                summary.events,
                summary.updates,
                summary.queries,
                summary.mean_update_nanos / 1e3,
                summary.max_update_nanos as f64 / 1e3,
                summary.final_n,
                summary.final_coreset_size,
                if cfg.verify != VerifyMode::None {
                    format!(
                        ", verified {} queries ({} failures, worst deviation {:.4})",
                        summary.verified_queries, summary.verify_failures, summary.worst_deviation
                    )
                } else {
                    String::new()
                }
            );
            Ok(())
        }
        Command::Generate {
            kind,
            points,
            events,
            delete_fraction,
            update_fraction,
            query_every,
            clusters,
            spread,
            out,
            config,
        } => {
            let kind = StreamKind::parse(&kind)
                .ok_or_else(|| anyhow!("unknown stream kind {kind:?}"))?;
            let params = GenParams {
                kind,
                points,
                events,
                delete_fraction,
                update_fraction,
                query_every,
                clusters,
                spread,
                seed: config.seed,
            };
            let stream_events = if kind == StreamKind::AdversarialDeleteCoreset {
                let cfg = config.to_run_config()?;
                generate_adversarial(&params, |events_so_far| {
                    replay_collect_last_query(events_so_far, &cfg)
                })?
            } else {
                generate(&params)
            };
            fs::write(&out, format_stream(&stream_events))
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} events to {}", stream_events.len(), out.display());
            Ok(())
        }
        Command::Compare { stream, config } => {
            let cfg = config.to_run_config()?;
            let text = fs::read_to_string(&stream)
                .with_context(|| format!("reading {}", stream.display()))?;
            let events = parse_stream(&text)?;
            let rows = compare(&events, &cfg)?;
            println!(
                "{:<12} {:>9} {:>14} {:>14} {:>9} {:>10} {:>9}",
                "structure", "updates", "mean_ns", "max_ns", "final_n", "coreset", "failures"
            );
            for row in rows {
                println!(
                    "{:<12} {:>9} {:>14.0} {:>14} {:>9} {:>10} {:>9}",
                    row.structure,
                    row.summary.updates,
                    row.summary.mean_update_nanos,
                    row.summary.max_update_nanos,
                    row.summary.final_n,
                    row.summary.final_coreset_size,
                    if cfg.verify == VerifyMode::None {
                        "-".to_string()
                    } else {
                        row.summary.verify_failures.to_string()
                    }
                );
            }
            Ok(())
        }
    }
}

/// Replay through a fresh tree and return the ids in the last query's
/// answer; the adversarial generator's view of the algorithm.
fn replay_collect_last_query(
    events: &[stream::StreamEvent],
    cfg: &RunConfig,
) -> Result<Vec<u64>> {
    use dyncoreset::dyntree::{CoresetTree, TreeConfig};
    use dyncoreset::metric::{Point, Space};
    let dim = events
        .iter()
        .find_map(|e| match e {
            stream::StreamEvent::Insert { coords, .. } => Some(coords.len()),
            _ => None,
        })
        .unwrap_or(2);
    let mut tc = TreeConfig::new(cfg.k, cfg.z, cfg.eps, cfg.lambda, Space::euclidean(dim))
        .with_constructor(cfg.build_constructor())
        .with_seed(cfg.seed)
        .with_bucketed(cfg.bucketed)
        .with_outer(cfg.outer);
    tc.weight_params = dyncoreset::weights::WeightParams::new(cfg.c_exp, cfg.eps);
    let mut tree = CoresetTree::new(tc);
    let mut last: Vec<u64> = Vec::new();
    for e in events {
        match e {
            stream::StreamEvent::Insert { id, weight, coords } => {
                tree.insert(Point::new(*id, coords.clone()), weight.clone())?;
            }
            stream::StreamEvent::Delete { id } => {
                tree.delete(*id)?;
            }
            stream::StreamEvent::UpdateWeight { id, delta } => {
                tree.update_weight(*id, delta)?;
            }
            stream::StreamEvent::Query => {
                last = tree.query()?.iter().map(|wp| wp.point.id).collect();
            }
        }
    }
    Ok(last)
}
