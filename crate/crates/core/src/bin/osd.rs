use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use osd::config::{parse_override, RunConfig};
use osd::fixtures::{make_fixtures, FixtureSpec};
use osd::{pipeline, Execution, OsdError, Result};

#[derive(Parser, Debug)]
#[command(name = "osd", version, about = "Overlapped speech detection toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Flat key = value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed for model initialisation, batch order and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Root of the prepared feature/label cache.
    #[arg(long, env = "OSD_CACHE_DIR", global = true)]
    cache_dir: Option<PathBuf>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment recordings and cache features and frame labels.
    Prepare {
        /// Recording manifest (segment_id, audio, start, end, recording, tag).
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding one `<recording_id>.rttm` per recording.
        #[arg(long)]
        rttm_dir: PathBuf,
        /// Output directory; defaults to the cache directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hours and overlap share per dataset tag of a prepared manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a model on the prepared train/validation splits.
    Train {
        /// uniform, inverse_frequency or explicit.
        #[arg(long)]
        weights_mode: Option<String>,
    },
    /// Score a checkpoint on the prepared evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated dataset tags to require.
        #[arg(long)]
        tags: Option<String>,
    },
    /// Write a synthetic corpus with known speaker timelines.
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        overlap_ratio: f64,
        #[arg(long, default_value_t = 20)]
        recording_seconds: usize,
        #[arg(long, default_value_t = 8)]
        train_recordings: usize,
        #[arg(long, default_value_t = 2)]
        dev_recordings: usize,
        #[arg(long, default_value_t = 2)]
        test_recordings: usize,
    },
}

fn run_config(g: &GlobalArgs, extra: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    for o in &g.overrides {
        pairs.push(parse_override(o)?);
    }
    if let Some(s) = g.seed {
        for k in ["model.seed", "train.seed", "augment.seed"] {
            pairs.push((k.to_string(), s.to_string()));
        }
    }
    if let Some(d) = &g.cache_dir {
        pairs.push(("data.cache_dir".into(), d.display().to_string()));
    }
    pairs.extend(extra.iter().cloned());
    RunConfig::load(g.config.as_deref(), &pairs)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(j) = g.jobs {
        if j == 0 {
            return Err(OsdError::Config("--jobs must be at least 1".into()));
        }
        osd::exec::set_jobs(j)?;
    }
    let exec = if g.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Prepare { manifest, rttm_dir, out } => {
            let cfg = run_config(g, &[])?;
            let out = out.unwrap_or_else(|| cfg.paths.cache_dir.clone());
            let report = pipeline::prepare(&manifest, &rttm_dir, &out, &cfg.feature, exec)?;
            println!(
                "{} recordings: {} segments written, {} up to date -> {}",
                report.recordings,
                report.segments_written,
                report.segments_skipped,
                report.manifest_path.display()
            );
            if !report.failures.is_empty() {
                for (rec, err) in &report.failures {
                    eprintln!("failed: {rec}: {err}");
                }
                return Err(OsdError::Data(format!(
                    "{} of {} recordings failed",
                    report.failures.len(),
                    report.recordings
                )));
            }
        }
        Command::Stats { manifest } => {
            print!("{}", pipeline::stats(&manifest, exec)?.render());
        }
        Command::Train { weights_mode } => {
            let extra: Vec<(String, String)> = weights_mode
                .map(|m| vec![("train.weights_mode".to_string(), m)])
                .unwrap_or_default();
            let cfg = run_config(g, &extra)?;
            let out = pipeline::train(&cfg, exec)?;
            for e in &out.log.epochs {
                println!(
                    "epoch {:>3}  train {:.5}  val {:.5}  lr {:.3e}",
                    e.epoch, e.train_loss, e.val_loss, e.lr
                );
            }
            println!(
                "stopped: {} (best epoch {}), weights {}, checkpoint {}",
                out.stop_reason.name(),
                out.log.best_epoch,
                out.log.weights,
                cfg.paths.checkpoint.display()
            );
        }
        Command::Eval { checkpoint, tags } => {
            let extra: Vec<(String, String)> = tags.map(|t| vec![("eval.tags".to_string(), t)]).unwrap_or_default();
            let cfg = run_config(g, &extra)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let report = pipeline::eval(&cfg, &ckpt, exec)?;
            print!("{}", report.table());
        }
        Command::MakeFixtures {
            out,
            overlap_ratio,
            recording_seconds,
            train_recordings,
            dev_recordings,
            test_recordings,
        } => {
            let spec = FixtureSpec {
                seed: g.seed.unwrap_or(FixtureSpec::default().seed),
                overlap_ratio,
                recording_seconds,
                train_recordings,
                dev_recordings,
                test_recordings_per_tag: test_recordings,
                ..FixtureSpec::default()
            };
            let summary = make_fixtures(&out, &spec)?;
            for (split, ov, total) in &summary.splits {
                println!("{split}: {total} frames, {ov} overlap ({:.2}%)", *ov as f64 / *total as f64 * 100.0);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
