// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batch commands over the truthx pipeline. Every command writes its outputs
//! and a `manifest.json` into `--out`.

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod error;
pub mod lmconfig;
pub mod manifest;

pub use error::{CliError, CliResult};

pub const THREADS_ENV: &str = "VERITAS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "truthx",
    version,
    about = "Truthfulness probing and editing on a toy transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emit a synthetic world: corpus, triplets, and vocabulary.
    GenData(GenDataArgs),
    /// Train the toy language model on a corpus.
    TrainLm(TrainLmArgs),
    /// Extract paired representations for every triplet.
    Extract(ExtractArgs),
    /// Train the auto-encoder on each fold of a representation dump.
    TrainTruthx(TrainTruthxArgs),
    /// Held-out probing accuracy per site.
    Probe(ProbeArgs),
    /// Pick the best sites and write an edit plan.
    Select(SelectArgs),
    /// Multiple-choice metrics with and without editing.
    McEval(McEvalArgs),
    /// Truth-flip and MC metrics over a grid of strengths and site counts.
    Sweep(SweepArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Train the base config and one run per ablation flag.
    Ablate(AblateArgs),
    /// Rerun a command from its manifest and compare outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainLm(_) => "train-lm",
            Command::Extract(_) => "extract",
            Command::TrainTruthx(_) => "train-truthx",
            Command::Probe(_) => "probe",
            Command::Select(_) => "select",
            Command::McEval(_) => "mc-eval",
            Command::Sweep(_) => "sweep",
            Command::Gradcheck(_) => "gradcheck",
            Command::Ablate(_) => "ablate",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub entities: usize,
    #[arg(long, default_value_t = 5)]
    pub attributes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub triplets: PathBuf,
    /// Align answers by position instead of by shared tokens.
    #[arg(long)]
    pub all_tokens: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainTruthxArgs {
    #[arg(long)]
    pub reps: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub reps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionKind {
    Truthful,
    Negated,
    Random,
    Orthogonal,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of sites; defaults to 10 or every site if there are fewer.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = DirectionKind::Truthful)]
    pub direction: DirectionKind,
    /// Use each site's own centroids for its direction.
    #[arg(long)]
    pub per_site: bool,
    /// Seed for random and orthogonal control directions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    /// Every position of question and answer.
    All,
    /// Answer positions only.
    Answer,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("questions").required(true).args(["triplets", "qa_csv"])))]
pub struct McEvalArgs {
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    #[arg(long)]
    pub qa_csv: Option<PathBuf>,
    /// Keep only questions held out from the plan's checkpoint.
    #[arg(long, requires = "plan")]
    pub heldout: bool,
    #[arg(long, default_value = "paper_literal")]
    pub mc2: String,
    /// Divide each choice score by its token count.
    #[arg(long)]
    pub per_token: bool,
    #[arg(long, value_enum, default_value_t = ScopeArg::All)]
    pub scope: ScopeArg,
    /// Also write report.csv.
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub reps: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.5,1",
        allow_hyphen_values = true
    )]
    pub alphas: Vec<f64>,
    /// Site counts; defaults to the plan's.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// Toy LM for MC columns; needs --triplets.
    #[arg(long, requires = "triplets")]
    pub lm: Option<PathBuf>,
    #[arg(long, requires = "lm")]
    pub triplets: Option<PathBuf>,
    #[arg(long, default_value = "paper_literal")]
    pub mc2: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Perturb the analytic gradients; every suite must then fail.
    #[arg(long)]
    pub corrupt: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub reps: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Toy LM and triplets for re-extracting the all-tokens bank.
    #[arg(long, requires = "triplets")]
    pub lm: Option<PathBuf>,
    #[arg(long, requires = "lm")]
    pub triplets: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Cap the rayon pool from the environment; 0 means one thread.
fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a count, got `{v}`")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global();
    Ok(())
}

/// Parse `argv` (program name first) and run the command.
pub fn run(argv: &[String]) -> CliResult<()> {
    let cli = Cli::try_parse_from(argv)?;
    configure_threads()?;
    let rest = argv.get(2..).unwrap_or(&[]);
    let args = manifest::strip_out(rest);
    commands::dispatch(cli.command, &args)
}
