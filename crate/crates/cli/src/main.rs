use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixformer::backbone::Preset;
use mixformer::data::SyntheticConfig;
use mixformer::heads::HeadKind;
use mixformer::Result;
use mixformer_cli::{cmd_cost, cmd_eval, cmd_inspect, cmd_synth, cmd_track, cmd_train, load_config, InspectArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "mixformer", version, about = "Mixed-attention single-object tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both stages and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory of sequence subdirectories; synthetic data otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Warm-start checkpoint; its head and score weights are optional.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Where to write per-iteration loss CSVs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Track a sequence from its first ground-truth box.
    Track {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a boxes CSV against a sequence's ground truth.
    Eval {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump attention weights for one frame as CSV files.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// 1-based frame number (at least 2).
        #[arg(long)]
        frame: usize,
        /// 0-based stage; defaults to the last.
        #[arg(long)]
        stage: Option<usize>,
        /// 0-based block within the stage; defaults to the last.
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the parameter and FLOP table.
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured preset (mixformer, mixformer_l, tiny).
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the configured head (corner, query).
        #[arg(long)]
        head: Option<String>,
    },
    /// Write synthetic sequences to disk.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Zero-motion scenes instead of the configured generator.
        #[arg(long = "static")]
        still: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            data,
            init,
            log_dir,
            quiet,
        } => {
            let t = cmd_train(&TrainArgs {
                config: config.as_deref(),
                out: &out,
                data: data.as_deref(),
                init: init.as_deref(),
                log_dir: log_dir.as_deref(),
                verbose: !quiet,
            })?;
            println!(
                "wrote {} ({} parameters) after {:.1}s; final losses {:.4} / {:.4}",
                out.display(),
                t.store.element_count(),
                t.seconds,
                t.stage1.last().map_or(f64::NAN, |r| r.loss),
                t.stage2.last().map_or(f64::NAN, |r| r.loss),
            );
        }
        Command::Track {
            config,
            checkpoint,
            sequence,
            out,
        } => {
            let rows = cmd_track(config.as_deref(), &checkpoint, &sequence, &out)?;
            println!("wrote {} boxes to {}", rows.len(), out.display());
        }
        Command::Eval { boxes, sequence, out } => {
            let m = cmd_eval(&boxes, &sequence, &out)?;
            println!("{}: auc {:.4} precision {:.4}", m.sequence, m.auc, m.precision);
        }
        Command::Inspect {
            config,
            checkpoint,
            sequence,
            frame,
            stage,
            block,
            out_dir,
        } => {
            let files = cmd_inspect(&InspectArgs {
                config: config.as_deref(),
                checkpoint: &checkpoint,
                sequence: &sequence,
                frame,
                stage,
                block,
                out_dir: &out_dir,
            })?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Cost { config, preset, head } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = preset {
                cfg.preset = Preset::parse(&p).ok_or_else(|| mixformer::Error::Usage(format!("unknown preset {p:?}")))?;
            }
            if let Some(h) = head {
                cfg.head = HeadKind::parse(&h).ok_or_else(|| mixformer::Error::Usage(format!("unknown head {h:?}")))?;
            }
            print!("{}", cmd_cost(&cfg)?);
        }
        Command::Synth {
            config,
            out,
            count,
            seed,
            still,
        } => {
            let cfg = load_config(config.as_deref())?;
            let synthetic = if still {
                SyntheticConfig {
                    motion: 0.0,
                    scale_jitter: 0.0,
                    brightness_jitter: 0.0,
                    ..cfg.synthetic
                }
            } else {
                cfg.synthetic
            };
            for d in cmd_synth(&synthetic, &out, count, seed)? {
                println!("{}", d.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
