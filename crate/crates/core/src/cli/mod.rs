//! The `embfuse` command-line front-end.
//!
//! Every subcommand reads a JSON [`RunConfig`] (flags override its fields),
//! writes its artifacts under `<output_dir>/<command>/` and finishes with a
//! `run_manifest.json` holding the config hash and sha256 of every input and
//! output. Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure.

mod artifacts;
mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use artifacts::{dataset_files, sha256_bytes, sha256_file, RunManifest, RUN_MANIFEST};
pub use commands::{
    cmd_attention, cmd_cluster, cmd_evaluate, cmd_fuse, cmd_run, cmd_similarity, cmd_synth, cmd_train, cmd_vote, Ctx,
};
pub use config::{
    AttentionModel, AttentionSection, ClusterSection, EvaluateSection, FuseSection, HeadKind, RankLevel, RunConfig,
    SimilaritySection,
    SynthPreset, SynthSection, TrainSection, VoteSection,
};

use crate::evalkit::{EvalError, Metric};
use crate::heads::HeadError;
use crate::lens::LensError;
use crate::prune::PruneError;
use crate::simgauge::SimilarityError;
use crate::store::StoreError;
use crate::synthgen::SynthError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: m.into() }
    }
    pub fn data(m: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: m.into() }
    }
    pub fn numeric(m: impl Into<String>) -> Self {
        CliError { code: EXIT_NUMERIC, message: m.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.code {
            EXIT_CONFIG => "config error",
            EXIT_NUMERIC => "numeric failure",
            _ => "data error",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<SimilarityError> for CliError {
    fn from(e: SimilarityError) -> Self {
        match e {
            SimilarityError::InvalidConfig(_) | SimilarityError::KTooLarge { .. } => CliError::config(e.to_string()),
            SimilarityError::DegenerateInput(_) | SimilarityError::RankCollapse | SimilarityError::SingularSystem => {
                CliError::numeric(e.to_string())
            }
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::BadTheta(_) => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<HeadError> for CliError {
    fn from(e: HeadError) -> Self {
        match e {
            HeadError::NonFinite { .. } => CliError::numeric(e.to_string()),
            HeadError::InvalidArch(_) | HeadError::InvalidConfig(_) => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidConfig(_) => CliError::config(e.to_string()),
            EvalError::NonFinite(_) => CliError::numeric(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<LensError> for CliError {
    fn from(e: LensError) -> Self {
        match e {
            LensError::NonFinite(_) => CliError::numeric(e.to_string()),
            LensError::InvalidConfig(_)
            | LensError::BadPercentile(_)
            | LensError::PerplexityTooLarge { .. }
            | LensError::TooManyPoints { .. } => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::ConfigInvalid(_) => CliError::config(e.to_string()),
            SynthError::SignalRejection(_) => CliError::numeric(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "embfuse", version, about = "Multi-encoder embedding similarity, fusion and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub encoders: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub thetas: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pairwise similarity report between encoders.
    Similarity {
        #[command(flatten)]
        common: Common,
        /// Paired tile subsample size.
        #[arg(long)]
        tiles: Option<usize>,
    },
    /// Feature ranking, correlation pruning over the θ grid, retention profile.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Rank on training tiles or on per-slide mean vectors (tile datasets only).
        #[arg(long, value_enum)]
        rank_level: Option<RankLevel>,
    },
    /// Train one head per model input and fold; holdout predictions.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        head: Option<HeadKind>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
    },
    /// Holdout metrics, majority vote and bootstrap comparisons.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Majority vote over prediction files.
    Vote {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..)]
        predictions: Option<Vec<PathBuf>>,
    },
    /// Attention maps, region coverage and cross-model Dice.
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        regions_dir: Option<PathBuf>,
    },
    /// t-SNE projections and clustering statistics per feature set.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        perplexity: Option<f64>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Uses the `complementary` preset when the config has no synth section.
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Run the configured steps in order (default: synth, fuse, train, evaluate).
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn base_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if c.output_dir.is_some() {
        cfg.output_dir = c.output_dir.clone();
    }
    if c.manifest.is_some() {
        cfg.manifest = c.manifest.clone();
    }
    if c.encoders.is_some() {
        cfg.encoders = c.encoders.clone();
    }
    if c.thetas.is_some() {
        cfg.thetas = c.thetas.clone();
    }
    Ok(cfg)
}

/// Applies flag overrides and runs the subcommand.
pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Similarity { common, tiles } => {
            let mut cfg = base_config(&common)?;
            if let Some(t) = tiles {
                cfg.similarity.tiles = t;
            }
            cmd_similarity(&Ctx::new(cfg)?)
        }
        Command::Fuse { common, rank_level } => {
            let mut cfg = base_config(&common)?;
            if let Some(r) = rank_level {
                cfg.fuse.rank_level = r;
            }
            cmd_fuse(&Ctx::new(cfg)?)
        }
        Command::Train { common, head, max_epochs, models } => {
            let mut cfg = base_config(&common)?;
            if let Some(h) = head {
                cfg.train.head = h;
            }
            if let Some(e) = max_epochs {
                cfg.train.config.max_epochs = e;
            }
            if models.is_some() {
                cfg.train.models = models;
            }
            cmd_train(&Ctx::new(cfg)?)
        }
        Command::Evaluate { common, metric, iterations } => {
            let mut cfg = base_config(&common)?;
            if let Some(m) = metric {
                cfg.evaluate.metric = m;
            }
            if let Some(i) = iterations {
                cfg.evaluate.bootstrap.iterations = i;
            }
            cmd_evaluate(&Ctx::new(cfg)?)
        }
        Command::Vote { common, predictions } => {
            let mut cfg = base_config(&common)?;
            if let Some(p) = predictions {
                cfg.vote.predictions = p;
            }
            cmd_vote(&Ctx::new(cfg)?)
        }
        Command::Attention { common, regions_dir } => {
            let mut cfg = base_config(&common)?;
            if regions_dir.is_some() {
                cfg.attention.regions_dir = regions_dir;
            }
            cmd_attention(&Ctx::new(cfg)?)
        }
        Command::Cluster { common, perplexity } => {
            let mut cfg = base_config(&common)?;
            if let Some(p) = perplexity {
                cfg.cluster.tsne.perplexity = p;
            }
            cmd_cluster(&Ctx::new(cfg)?)
        }
        Command::Synth { common, n_samples } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = n_samples {
                match &mut cfg.synth {
                    Some(SynthSection::Preset(p)) => p.n_samples = n,
                    Some(SynthSection::Full(g)) => g.n_samples = n,
                    None => {
                        cfg.synth = Some(SynthSection::Preset(SynthPreset {
                            preset: "complementary".into(),
                            n_samples: n,
                            bag_mode: None,
                        }))
                    }
                }
            }
            cmd_synth(&Ctx::new(cfg)?).map(|_| ())
        }
        Command::Run { common } => cmd_run(&Ctx::new(base_config(&common)?)?),
    }
}

/// Parses `args` (program name first), runs, prints any error to stderr and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("embfuse: {e}");
            e.code
        }
    }
}
