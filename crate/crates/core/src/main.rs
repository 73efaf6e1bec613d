use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lungfuse::cli::{self, RunConfig, Selection, TrainStage};
use lungfuse::preprocess::Split;
use lungfuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lungfuse",
    version,
    about = "Dual-modal lung lesion classification on synthetic CT and H&E data"
)]
struct Cli {
    /// Suppress progress messages.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train branch and fusion checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ct, he, fusion or all.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Score the test split and write metrics.json + confusion.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Baseline checkpoint for a DeLong comparison; repeatable.
        #[arg(long)]
        baseline: Vec<PathBuf>,
    },
    /// Attribution heatmaps, insertion curves and IoU.
    Explain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Explain a single patient instead of a split.
        #[arg(long)]
        patient: Option<String>,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated method ids, or `all`.
        #[arg(long, default_value = "all")]
        methods: String,
    },
    /// Consolidate eval/ and explain/ of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn config(path: &Option<PathBuf>) -> Result<RunConfig> {
    path.as_deref()
        .map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
}

fn run(cli: Cli) -> Result<()> {
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Synth { config: c, out } => {
            let manifest = cli::cmd_synth(&config(c)?, out)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            config: c,
            data,
            out,
            stage,
        } => {
            let stage: TrainStage = stage.parse()?;
            for p in cli::cmd_train(&config(c)?, data, out, stage)? {
                say(format!("wrote {}", p.display()));
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            baseline,
        } => {
            let r = cli::cmd_eval(checkpoint, data, baseline, out)?;
            say(format!(
                "{} model: accuracy {:.4}, macro-F1 {:.4}",
                r.model, r.accuracy, r.macro_f1
            ));
        }
        Command::Explain {
            config: c,
            checkpoint,
            data,
            out,
            patient,
            split: s,
            methods,
        } => {
            let methods = cli::parse_methods(methods)?;
            let selection = match patient {
                Some(id) => Selection::Patient(id.clone()),
                None => Selection::Split(split(s)?),
            };
            for m in cli::cmd_explain(&config(c)?, checkpoint, data, &selection, &methods, out)? {
                say(format!("{}: insertion AUC {:.4}", m.method, m.mean_insertion_auc));
            }
        }
        Command::Report { run } => {
            let (md, _) = cli::cmd_report(run)?;
            println!("{}", md.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
