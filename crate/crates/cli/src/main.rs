//! `cfsum`: data generation, the three training stages, debiased decoding and
//! the evaluation harnesses. Exit codes: 0 success, 2 usage or configuration
//! error, 3 numeric failure.

mod artifacts;
mod config;
mod plot;
mod run;
mod stages;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// An error the user can fix by changing arguments or inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "cfsum", version, about = "Counterfactual debiasing for summarization on a synthetic corpus")]
struct Cli {
    /// Sectioned TOML config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base summarizer with teacher-forced cross-entropy.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint and optimizer state already in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Train the counterfactual decoder from a base checkpoint.
    TrainIct(StageArgs),
    /// Train the consistency predictor on a frozen base checkpoint.
    TrainDda(StageArgs),
    /// Decode documents with the debiased decoder.
    Decode(DecodeArgs),
    /// Score summary files against the references.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// `name=path` of a summaries file; repeatable.
        #[arg(long = "summaries", value_name = "NAME=FILE")]
        summaries: Vec<String>,
        /// Also score the reference summaries themselves.
        #[arg(long)]
        with_gold: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fact precision of the base model when forced to attend to unimportant positions.
    ProbeBias {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the full decoder over a grid of debiasing ratios.
    Sweep(ModelsArgs),
    /// Evaluate the decoder with modules switched off.
    Ablate(ModelsArgs),
    /// Draw a line chart from a TSV written by `sweep` or `probe-bias`.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Column for the horizontal axis; defaults to the first column.
        #[arg(long)]
        x: Option<String>,
        /// Columns to draw.
        #[arg(long, value_delimiter = ',', default_value = "rouge_l,fact_precision")]
        y: Vec<String>,
    },
}

#[derive(Args)]
pub struct StageArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ModelsArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub cf: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Counterfactual checkpoint; required when beta > 0.
    #[arg(long)]
    pub cf: Option<PathBuf>,
    /// Predictor checkpoint; required unless --no-dda.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Documents to decode (JSON lines); defaults to the test split.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `extractive` or `abstractive`; replaces the [debias] section before the flags below apply.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub no_dda: bool,
    /// Forces alpha to 0.
    #[arg(long)]
    pub no_ecm: bool,
    /// Forces beta to 0 and ignores --cf.
    #[arg(long)]
    pub no_ict: bool,
    /// Write per-step traces (greedy decoding only).
    #[arg(long)]
    pub trace: bool,
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { out } => stages::gen_data(&cfg, &out),
        Command::TrainBase { data, out, resume } => stages::train_base(&cfg, &data, &out, resume),
        Command::TrainIct(a) => stages::train_ict(&cfg, &a),
        Command::TrainDda(a) => stages::train_dda(&cfg, &a),
        Command::Decode(a) => run::decode(cfg, &a),
        Command::Evaluate { data, summaries, with_gold, out } => run::evaluate(&cfg, &data, &summaries, with_gold, &out),
        Command::ProbeBias { base, data, out } => run::probe_bias(&cfg, &base, &data, &out),
        Command::Sweep(a) => run::sweep(&cfg, &a),
        Command::Ablate(a) => run::ablate(&cfg, &a),
        Command::Plot { input, out, x, y } => plot::plot_tsv(&input, &out, x.as_deref(), &y),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<cfsum_core::Error>(), Some(cfsum_core::Error::Numeric(_))));
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
