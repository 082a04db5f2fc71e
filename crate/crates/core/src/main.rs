use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lakehopper::corpus::SplitKind;
use lakehopper::experiment::{self, RunConfig, VerifierKind};
use lakehopper::Result;

#[derive(Parser)]
#[command(name = "lakehopper", version, about = "Adapt a column type annotator to a new data lake")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target lake pair.
    Gen {
        /// TOML lake-pair spec (bare, or under a [lake_pair] table).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source annotator.
    TrainSource(RunArgs),
    /// Adapt the source annotator to the target lake.
    Adapt(RunArgs),
    /// Score a checkpoint on one split of a lake.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lake: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run directory.
    Report {
        run_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifierArg {
    Oracle,
    Noisy,
    Remote,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<usize>,
    /// Comma-separated budgets, one run each.
    #[arg(long, value_delimiter = ',')]
    budget_sweep: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    verifier: Option<VerifierArg>,
    /// Noisy verifier accuracy.
    #[arg(long)]
    noisy_p: Option<f64>,
    /// Noisy verifier "I don't know" rate.
    #[arg(long)]
    noisy_q: Option<f64>,
    /// Sample fine-tuning batches uniformly instead of querying the verifier.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep raw verifier responses in the audit log.
    #[arg(long)]
    audit_raw: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(b) = self.budget {
            cfg.adapt.budget = b;
        }
        if let Some(sweep) = &self.budget_sweep {
            cfg.budget_sweep = sweep.clone();
        }
        if let Some(v) = self.verifier {
            cfg.verifier = match v {
                VerifierArg::Oracle => VerifierKind::Oracle,
                VerifierArg::Noisy => VerifierKind::Noisy,
                VerifierArg::Remote => VerifierKind::Remote,
            };
        }
        if let Some(p) = self.noisy_p {
            cfg.noisy.p = p;
        }
        if let Some(q) = self.noisy_q {
            cfg.noisy.q = q;
        }
        cfg.baseline |= self.baseline;
        cfg.adapt.audit_raw |= self.audit_raw;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, seed, out } => {
            let mut spec = experiment::read_lake_pair_spec(&config)?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            experiment::cmd_gen(&spec, &out)?;
        }
        Command::TrainSource(args) => {
            let (_, report) = experiment::cmd_train_source(&args.config()?)?;
            println!("source test sw_f1 {:.4} ma_f1 {:.4}", report.test.sw_f1, report.test.ma_f1);
        }
        Command::Adapt(args) => {
            for r in experiment::cmd_adapt(&args.config()?)? {
                println!(
                    "budget {} spent {} queries {} test sw_f1 {:.4} ma_f1 {:.4}",
                    r.budget,
                    r.ledger.spent(),
                    r.verifier_queries,
                    r.test.sw_f1,
                    r.test.ma_f1
                );
            }
        }
        Command::Eval {
            checkpoint,
            lake,
            split,
            out,
        } => {
            let split: SplitKind = split.parse()?;
            let report = experiment::cmd_eval(&checkpoint, &lake, split, out.as_deref())?;
            println!(
                "{split}: n {} sw_f1 {:.4} ma_f1 {:.4} ood_rate {:.4}",
                report.n_evaluated, report.sw_f1, report.ma_f1, report.ood_rate
            );
        }
        Command::Report { run_dir } => {
            let (_, summary) = experiment::cmd_report(&run_dir)?;
            print!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
