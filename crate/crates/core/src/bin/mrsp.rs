use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mrsp_core::commands::{cmd_bench, cmd_eval, cmd_filter, cmd_gen, cmd_train, EvalArgs, FilterArgs, GenArgs, TrainArgs};
use mrsp_core::filter::LabelBand;
use mrsp_core::mmseq::{Difficulty, TaskFamily, DEFAULT_FEATURE_DIM};
use mrsp_core::mrsp::BenchConfig;
use mrsp_core::Result;

#[derive(Parser)]
#[command(name = "mrsp", version, about = "Long-video RL at desk scale: GRPO, difficulty filtering and a sequence-parallel rollout engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video-QA dataset (JSONL).
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_samples: usize,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
        feature_dim: usize,
        /// ArgmaxChannel or TemporalHalf; alternates when omitted.
        #[arg(long)]
        family: Option<TaskFamily>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Probe difficulty with repeated sampling and keep the chosen labels.
    Filter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_runs: usize,
        /// Comma-separated labels to keep.
        #[arg(long, value_delimiter = ',', default_value = "medium")]
        keep: Vec<Difficulty>,
        #[arg(long)]
        out: PathBuf,
        /// Probe summary path (default: <out>.probes.jsonl).
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Medium band `lo,hi` on the correct count (default: 1,n-1).
        #[arg(long, value_delimiter = ',', num_args = 2)]
        band: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        encoder_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
    },
    /// SFT warm-up then GRPO, as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Validate the config and print the resolved plan.
        #[arg(long)]
        dry_run: bool,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Accuracy and format report for a checkpoint or a transcript file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL of {"id", "text"} responses scored instead of decoding.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value_t = 0)]
        encoder_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
    },
    /// Step-time benchmark over frames x sp_degree x cache.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,256,512")]
        frames_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        sp_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "false,true")]
        cache_grid: Vec<bool>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        group_size: usize,
        #[arg(long, default_value_t = 512)]
        feature_dim: usize,
        #[arg(long, default_value_t = 128)]
        embed_dim: usize,
        /// JSONL report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let stdout = &mut std::io::stdout();
    match cli.command {
        Command::Gen {
            out,
            n_samples,
            frames,
            feature_dim,
            family,
            seed,
        } => {
            cmd_gen(
                &GenArgs {
                    out,
                    n_samples,
                    frames,
                    feature_dim,
                    family,
                    seed,
                },
                stdout,
            )?;
        }
        Command::Filter {
            data,
            checkpoint,
            n_runs,
            keep,
            out,
            summary,
            band,
            encoder_seed,
            seed,
            temperature,
            max_len,
        } => {
            let args = FilterArgs {
                n_runs,
                keep: keep.into_iter().collect::<BTreeSet<_>>(),
                summary,
                band: band.map(|b| LabelBand { lo: b[0], hi: b[1] }),
                encoder_seed,
                seed,
                temperature,
                max_len,
                ..FilterArgs::new(data, checkpoint, out)
            };
            cmd_filter(&args, stdout)?;
        }
        Command::Train {
            config,
            dry_run,
            resume,
            stop_after,
        } => {
            cmd_train(
                &TrainArgs {
                    config,
                    dry_run,
                    resume,
                    stop_after,
                },
                stdout,
            )?;
        }
        Command::Eval {
            data,
            checkpoint,
            transcripts,
            greedy,
            encoder_seed,
            seed,
            max_len,
        } => {
            cmd_eval(
                &EvalArgs {
                    data,
                    checkpoint,
                    transcripts,
                    greedy,
                    encoder_seed,
                    seed,
                    max_len,
                },
                stdout,
            )?;
        }
        Command::Bench {
            frames_grid,
            sp_grid,
            cache_grid,
            reps,
            group_size,
            feature_dim,
            embed_dim,
            out,
        } => {
            let cfg = BenchConfig {
                frames_grid,
                sp_grid,
                cache_grid,
                repetitions: reps,
                group_size,
                feature_dim,
                embed_dim,
                ..BenchConfig::default()
            };
            cmd_bench(&cfg, out.as_deref(), stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MRSP_LOG", "error")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
