//! `seal` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or data error,
//! 3 numerical failure.

mod commands;
mod corpus_io;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use seal_core::SealError;

pub use corpus_io::{load_corpus, CorpusEntry, CorpusIndex};
pub use manifest::{RunManifest, MANIFEST_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(SealError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<SealError> for CliError {
    fn from(e: SealError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "seal",
    version,
    about = "Spatially regularized concept-embedding adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene corpus (images, masks, tags).
    Corpus(CorpusArgs),
    /// Pretrain the toy backbone on a corpus directory.
    Pretrain(PretrainArgs),
    /// Adapt a concept embedding to one reference image.
    Adapt(AdaptArgs),
    /// Sample an image from a tag prompt and a learned embedding.
    Generate(GenerateArgs),
    /// Render concept-token attention maps and leakage metrics.
    InspectAttn(InspectArgs),
    /// Tag file tooling.
    #[command(subcommand)]
    Tags(TagsCommand),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus directory written by `seal corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seed of the initial weights.
    #[arg(long, default_value_t = 0)]
    pub arch_seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    /// Checkpoint path; the loss curve and manifest are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference image (PNG).
    #[arg(long)]
    pub reference: PathBuf,
    /// Object mask (grayscale PNG) of the reference.
    #[arg(long)]
    pub mask: PathBuf,
    /// File whose first tag line describes the reference.
    #[arg(long)]
    pub tags: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_spatial: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_bind: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_supp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the embedding, trajectory logs and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embedding: PathBuf,
    #[arg(long)]
    pub tags: PathBuf,
    /// Attribute override applied before prompting, e.g. `background=stripes`.
    #[arg(long = "set", value_name = "ATTR=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 7.5)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embedding: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub tags: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Heatmap side length in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TagsCommand {
    /// Check every line of a tag file; reports failures with line numbers.
    Validate { file: PathBuf },
    /// Replace one attribute on every record (or one line) of a tag file.
    Edit {
        file: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long)]
        value: String,
        /// 1-based line to edit; all records when omitted.
        #[arg(long)]
        line: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Intra-record tag similarity per line plus a histogram.
    Similarity {
        file: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::dispatch(&cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
