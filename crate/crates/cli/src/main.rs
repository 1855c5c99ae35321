use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mlcl::encoders::EncoderConfig;
use mlcl_cli::commands::{tap_table, PretrainStatus};
use mlcl_cli::plot::render_table;
use mlcl_cli::{cmd_evaluate, cmd_plot, cmd_plot_run, cmd_pretrain, cmd_train_relations, ExperimentConfig, Overrides, Run};

#[derive(Parser)]
#[command(name = "mlcl", version, about = "Multi-level contrastive pretraining and relation-network ensembles for few-shot classification")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Divide epochs and episode counts by 20 for quick checks.
    #[arg(long)]
    smoke: bool,
}

impl RunArgs {
    fn open(&self, episodes: Option<usize>) -> anyhow::Result<Run> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            episodes,
            output_dir: self.output.clone(),
            smoke: self.smoke,
        });
        cfg.validate().context("configuration after overrides")?;
        Run::open(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain every configured encoder; resumes from existing checkpoints.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Stop each run at this global step (it can be resumed later).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Train one relation net per (encoder, tap) of the ensemble.
    TrainRelations {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict to these encoder ids.
        encoders: Vec<String>,
    },
    /// Evaluate every ensemble member and the ensemble.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Number of test episodes (overrides the configuration).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Draw charts from report files, a run's manifest, or chart tables.
    Plot {
        /// Report files or directories containing them.
        reports: Vec<PathBuf>,
        /// Plot the reports listed in this run's manifest.
        #[arg(short, long, conflicts_with_all = ["reports", "from_data"])]
        config: Option<PathBuf>,
        /// Re-render charts from previously written CSV tables.
        #[arg(long, num_args = 1.., conflicts_with = "reports")]
        from_data: Vec<PathBuf>,
        /// Output directory (default: ./plots).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the tap indices and shapes of encoders.
    ListTaps {
        /// Encoder presets.
        #[arg(long)]
        preset: Vec<String>,
        /// Encoders of an experiment configuration.
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { run, stop_after } => {
            let mut r = run.open(None)?;
            for (seed, id, status) in cmd_pretrain(&mut r, stop_after)? {
                match status {
                    PretrainStatus::Complete => println!("seed {seed} {id}: trained"),
                    PretrainStatus::AlreadyComplete => println!("seed {seed} {id}: already complete"),
                    PretrainStatus::Stopped { step } => println!("seed {seed} {id}: stopped at step {step}"),
                }
            }
        }
        Command::TrainRelations { run, encoders } => {
            let mut r = run.open(None)?;
            for p in cmd_train_relations(&mut r, &encoders)? {
                println!("{}", r.dir.join(p).display());
            }
        }
        Command::Evaluate { run, episodes } => {
            let mut r = run.open(episodes)?;
            for p in cmd_evaluate(&mut r)? {
                println!("{}", r.dir.join(p).display());
            }
        }
        Command::Plot {
            reports,
            config,
            from_data,
            output,
        } => {
            let written = if let Some(c) = config {
                let cfg = ExperimentConfig::load(&c)?;
                cmd_plot_run(&mut Run::open(cfg)?)?
            } else {
                let out = output.unwrap_or_else(|| PathBuf::from("plots"));
                if !from_data.is_empty() {
                    let mut w = Vec::new();
                    for t in &from_data {
                        w.extend(render_table(t, &out)?);
                    }
                    w
                } else if reports.is_empty() {
                    bail!("give report files, --config or --from-data");
                } else {
                    cmd_plot(&reports, &out)?
                }
            };
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::ListTaps { preset, config } => {
            let mut encoders = Vec::new();
            for p in &preset {
                encoders.push(EncoderConfig::preset(p)?);
            }
            if let Some(c) = config {
                encoders.extend(ExperimentConfig::load(&c)?.encoder_configs()?);
            }
            if encoders.is_empty() {
                for p in EncoderConfig::PRESETS {
                    encoders.push(EncoderConfig::preset(p)?);
                }
            }
            for e in &encoders {
                print!("{}", tap_table(e));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
