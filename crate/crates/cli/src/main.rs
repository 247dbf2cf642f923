use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use risnet_core::probing::PilotSnr;
use risnet_lab::{
    cmd_compare, cmd_eval, cmd_gen_data, cmd_props, cmd_train, init_threads, CliError, CliResult, ExperimentConfig,
    Overrides,
};

#[derive(Parser)]
#[command(name = "risnet-lab", version, about = "Train and evaluate RISnet on simulated channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Pilot SNR, a positive number or `inf`.
    #[arg(long)]
    snr: Option<PilotSnr>,
    /// Overrides the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        Overrides {
            seed: self.seed,
            snr: self.snr,
            steps: self.steps,
            out: self.out.clone(),
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test datasets.
    GenData(Common),
    /// Train RISnet and write the checkpoint and training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-sample test WSR of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare RISnet against the configured baselines.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the objective property suite.
    Props {
        #[arg(long, default_value = "props-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads(std::env::var("RISNET_THREADS").ok().as_deref())?;
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            let (train, test) = cmd_gen_data(&cfg)?;
            println!("train {} test {} -> {}", train.len(), test.len(), cfg.output_dir.display());
        }
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            let report = cmd_train(&cfg, resume.as_deref())?;
            println!("step {} mean test WSR {:.6}", report.steps, report.final_test_wsr);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let dir = checkpoint.unwrap_or_else(|| cfg.output_dir.clone());
            println!("mean test WSR {:.6}", cmd_eval(&cfg, &dir)?);
        }
        Command::Compare { common, checkpoint } => {
            let cfg = common.load()?;
            let dir = checkpoint.unwrap_or_else(|| cfg.output_dir.clone());
            for row in cmd_compare(&cfg, &dir)? {
                println!("{:<18} {:>10.6} {:>12.3e} s", row.method, row.mean_wsr, row.seconds_per_sample);
            }
        }
        Command::Props { out, seed, instances } => {
            if !cmd_props(&out, seed, instances)? {
                return Err(CliError::Numerical(format!(
                    "property suite failed; see {}",
                    out.join("props.csv").display()
                )));
            }
            println!("all properties hold");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on malformed arguments, matching the config-error code.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
