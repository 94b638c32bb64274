use clap::{Parser, Subcommand, ValueEnum};
use diffplan::commands::{self, Subject};
use diffplan::config::{RunConfig, CONFIG_ENV};
use diffplan::pipeline::Split;
use diffplan_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "diffplan", version, about = "Diffusion trajectory planner: corpus generation, training and evaluation")]
struct Cli {
    /// JSON config file; defaults to $DIFFPLAN_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set rl.gamma=0.8`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
    Forks,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    ConstantVelocity,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene corpus and its manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Scene count for the forks split.
        #[arg(long, default_value_t = 100)]
        forks: usize,
    },
    /// Imitation training from a fresh initialization.
    TrainIl {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulator-rewarded fine-tuning of an imitation checkpoint.
    TrainRl {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Held-out corpus evaluated after every epoch.
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
    },
    /// Score a checkpoint or a baseline on a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long)]
        report: PathBuf,
        /// Write one SVG per scene into this directory.
        #[arg(long)]
        svg_dir: Option<PathBuf>,
    },
    /// Print the noise schedule as CSV.
    InspectSchedule {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one sampled denoising chain as JSON.
    InspectChain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scene: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> diffplan_core::Result<RunConfig> {
    let path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg.resolve())
}

fn run(cli: &Cli) -> diffplan_core::Result<()> {
    let cfg = load_config(cli)?;
    let summary = match &cli.command {
        Command::GenCorpus { out, split, forks } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Heldout => Split::Heldout,
                SplitArg::Forks => Split::Forks(*forks),
            };
            commands::gen_corpus(&cfg, split, out)?
        }
        Command::TrainIl { corpus, out } => commands::train_il(&cfg, corpus, out)?,
        Command::TrainRl { corpus, init, out, eval_corpus } => {
            let init = init.as_deref().ok_or_else(|| Error::Config("train-rl needs --init <imitation checkpoint>".into()))?;
            commands::train_rl(&cfg, corpus, init, eval_corpus.as_deref(), out)?
        }
        Command::Eval { corpus, checkpoint, baseline, report, svg_dir } => {
            let subject = match (checkpoint, baseline) {
                (Some(p), _) => Subject::Checkpoint(p),
                (None, Some(Baseline::ConstantVelocity)) => Subject::ConstantVelocity,
                (None, None) => return Err(Error::Config("eval needs --checkpoint or --baseline".into())),
            };
            commands::eval(&cfg, corpus, subject, report, svg_dir.as_deref())?
        }
        Command::InspectSchedule { out } => {
            let csv = commands::inspect_schedule(&cfg)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            return Ok(());
        }
        Command::InspectChain { checkpoint, corpus, scene, steps } => commands::inspect_chain(&cfg, checkpoint, corpus, *scene, *steps)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}
