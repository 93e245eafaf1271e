use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::evalkit::{BootstrapConfig, Metric, SplitConfig};
use crate::heads::{MilArch, MlpArch, TrainConfig};
use crate::lens::{TsneConfig, PERCENTILE_GRID};
use crate::prune::DEFAULT_THETAS;
use crate::simgauge::MetricConfig;
use crate::synthgen::{BagMode, GeneratorConfig};

/// One file drives every subcommand; each reads its own section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<String>,
    /// Required; there is no clock-derived fallback.
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    /// Encoder subset, in the order used for concatenation. All encoders when absent.
    pub encoders: Option<Vec<String>>,
    pub output_dir: Option<PathBuf>,
    pub thetas: Option<Vec<f64>>,
    pub split: SplitConfig,
    /// Stages for `run`; defaults to synth (when configured), fuse, train, evaluate.
    pub steps: Option<Vec<String>>,
    pub similarity: SimilaritySection,
    pub fuse: FuseSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub vote: VoteSection,
    pub attention: AttentionSection,
    pub cluster: ClusterSection,
    pub synth: Option<SynthSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySection {
    /// Paired tile subsample size for tile-level datasets.
    pub tiles: usize,
    pub metrics: MetricConfig,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        SimilaritySection { tiles: 50_000, metrics: MetricConfig::default() }
    }
}

/// Rows used for ranking and correlation on tile datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RankLevel {
    /// Subsampled training tiles carrying their slide's label.
    #[default]
    Tiles,
    /// One mean vector per training slide.
    SlideMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseSection {
    pub rank_level: RankLevel,
    /// Upper bound on the training-tile subsample.
    pub tiles: usize,
}

impl Default for FuseSection {
    fn default() -> Self {
        FuseSection { rank_level: RankLevel::Tiles, tiles: 50_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Mlp,
    Mil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub head: HeadKind,
    /// Encoder ids, `concat`, or `if_<theta>`; defaults to all of them.
    pub models: Option<Vec<String>>,
    pub config: TrainConfig,
    pub mlp: MlpArch,
    pub mil: MilArch,
    /// Z-score slide features with training-fold statistics (MLP only).
    pub standardize: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            head: HeadKind::Mlp,
            models: None,
            config: TrainConfig::default(),
            mlp: MlpArch::default(),
            mil: MilArch::default(),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub metric: Metric,
    pub bootstrap: BootstrapConfig,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { metric: Metric::Auc, bootstrap: BootstrapConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteSection {
    pub predictions: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionModel {
    pub name: String,
    pub checkpoint: PathBuf,
    pub encoders: Vec<String>,
    #[serde(default)]
    pub signature: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub models: Vec<AttentionModel>,
    /// Directory of `<slide_id>.csv` region masks.
    pub regions_dir: Option<PathBuf>,
    pub percentiles: Vec<f64>,
}

impl Default for AttentionSection {
    fn default() -> Self {
        AttentionSection { models: Vec::new(), regions_dir: None, percentiles: PERCENTILE_GRID.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub tsne: TsneConfig,
    pub bootstrap: BootstrapConfig,
    pub feature_sets: Option<Vec<String>>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection { tsne: TsneConfig::default(), bootstrap: BootstrapConfig::default(), feature_sets: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SynthSection {
    Preset(SynthPreset),
    Full(GeneratorConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPreset {
    /// Only `complementary` is defined.
    pub preset: String,
    pub n_samples: usize,
    #[serde(default)]
    pub bag_mode: Option<BagMode>,
}

impl SynthSection {
    pub fn generator(&self, seed: u64) -> Result<GeneratorConfig, CliError> {
        let mut g = match self {
            SynthSection::Full(g) => g.clone(),
            SynthSection::Preset(p) if p.preset == "complementary" => {
                let mut g = GeneratorConfig::complementary(p.n_samples, seed);
                g.bag_mode = p.bag_mode;
                g
            }
            SynthSection::Preset(p) => return Err(CliError::config(format!("unknown synth preset `{}`", p.preset))),
        };
        g.seed = seed;
        Ok(g)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::config("`seed` is required (config or --seed)"))
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir.as_deref().ok_or_else(|| CliError::config("`output_dir` is required (config or --output-dir)"))
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.thetas.clone().unwrap_or_else(|| DEFAULT_THETAS.to_vec())
    }

    /// The manifest path, checked for existence.
    pub fn manifest(&self) -> Result<&Path, CliError> {
        let p = self.manifest.as_deref().ok_or_else(|| CliError::config("`manifest` is required (config or --manifest)"))?;
        if !p.exists() {
            return Err(CliError::data(format!("{}: manifest not found", p.display())));
        }
        Ok(p)
    }

    /// Checks value ranges that do not depend on the data.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        self.output_dir()?;
        for &t in &self.thetas() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(CliError::config(format!("theta {t} is outside (0, 1]")));
            }
        }
        if let Some(e) = &self.encoders {
            if e.is_empty() {
                return Err(CliError::config("`encoders` must not be empty"));
            }
        }
        if self.fuse.tiles == 0 {
            return Err(CliError::config("`fuse.tiles` must be positive"));
        }
        self.similarity.metrics.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.train.config.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(())
    }

    /// Config as recorded in run manifests: independent of where the output lives.
    pub fn canonical(&self) -> serde_json::Value {
        let mut c = self.clone();
        let out = c.output_dir.take();
        if let (Some(out), Some(m)) = (&out, &c.manifest) {
            if let Ok(rel) = m.strip_prefix(out) {
                c.manifest = Some(Path::new("$OUT").join(rel));
            }
        }
        serde_json::to_value(&c).expect("config serializes")
    }
}
