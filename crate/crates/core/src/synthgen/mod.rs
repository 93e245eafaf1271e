//! Seeded synthetic multi-encoder embeddings with known ground truth.
//!
//! Every encoder `m` sees a shared latent block `Z` (N×s) and a private block
//! `Uₘ` (N×uₘ); its output is `Xₘ = [Z Uₘ]·Mₘᵀ + σE` for a mixing map `Mₘ`
//! (dₘ×(s+uₘ)) with orthonormal columns. Labels follow a logistic rule over
//! chosen latents, thresholded at probability 0.5.

mod ladder;
mod write;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use ladder::{redundancy_ladder, LadderConfig, LadderTruth};
pub use write::{write_bag_dataset, write_slide_dataset};

use crate::rng::{substream, Rng};
use crate::store::{BagDataset, EmbeddingMatrix, Label, SlideBag, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    ConfigInvalid(String),
    #[error("could not draw a signal tile above the margin after {0} attempts")]
    SignalRejection(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub id: String,
    pub unique_dim: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    /// Orthonormal columns from the QR factor of a Gaussian matrix.
    #[default]
    Rotation,
    /// Each latent lands on its own randomly chosen output column with a random sign.
    Axis,
}

/// `logit = bias + shared·Z + Σₘ unique[m]·Uₘ`; missing trailing weights are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LabelRule {
    pub bias: f64,
    pub shared: Vec<f64>,
    pub unique: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BagMode {
    pub tiles_per_bag: usize,
    pub signal_fraction: f64,
    /// Signal tiles are redrawn until `w·ℓ/‖w‖` reaches this margin.
    #[serde(default = "default_margin")]
    pub signal_margin: f64,
}

fn default_margin() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub shared_dim: usize,
    pub encoders: Vec<EncoderSpec>,
    pub noise_scale: f64,
    #[serde(default)]
    pub mixing: Mixing,
    pub label_rule: LabelRule,
    #[serde(default)]
    pub bag_mode: Option<BagMode>,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorConfig {
    /// Two encoders whose label signal lives in disjoint private latents, so
    /// each alone sees half of the decision rule. Latents sit on individual
    /// output columns (axis mixing); the shared block appears in both encoders.
    pub fn complementary(n_samples: usize, seed: u64) -> Self {
        let enc = |id: &str| EncoderSpec { id: id.into(), unique_dim: 4, output_dim: 16 };
        GeneratorConfig {
            n_samples,
            shared_dim: 4,
            encoders: vec![enc("enc_a"), enc("enc_b")],
            noise_scale: 0.5,
            mixing: Mixing::Axis,
            label_rule: LabelRule {
                bias: 0.0,
                shared: vec![],
                unique: BTreeMap::from([("enc_a".into(), vec![1.0]), ("enc_b".into(), vec![1.0])]),
            },
            bag_mode: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.encoders.is_empty() {
            return bad("at least one encoder required".into());
        }
        let mut ids = BTreeSet::new();
        for e in &self.encoders {
            if !ids.insert(e.id.as_str()) {
                return bad(format!("duplicate encoder id `{}`", e.id));
            }
            if e.output_dim < self.shared_dim + e.unique_dim || e.output_dim == 0 {
                return bad(format!("encoder `{}`: output_dim must be ≥ shared_dim + unique_dim and positive", e.id));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative".into());
        }
        let r = &self.label_rule;
        if r.shared.len() > self.shared_dim {
            return bad("more shared weights than shared latents".into());
        }
        for (id, w) in &r.unique {
            let Some(e) = self.encoders.iter().find(|e| &e.id == id) else {
                return bad(format!("label rule names unknown encoder `{id}`"));
            };
            if w.len() > e.unique_dim {
                return bad(format!("more weights than unique latents for `{id}`"));
            }
        }
        let all: Vec<f64> = r.shared.iter().chain(r.unique.values().flatten()).copied().collect();
        if !r.bias.is_finite() || all.iter().any(|w| !w.is_finite()) {
            return bad("label weights must be finite".into());
        }
        if all.iter().all(|&w| w == 0.0) {
            return bad("label rule must use at least one latent".into());
        }
        if let Some(b) = &self.bag_mode {
            if b.tiles_per_bag == 0 {
                return bad("tiles_per_bag must be positive".into());
            }
            if !(b.signal_fraction > 0.0 && b.signal_fraction <= 1.0) {
                return bad("signal_fraction must lie in (0, 1]".into());
            }
            if !(b.signal_margin.is_finite()) {
                return bad("signal_margin must be finite".into());
            }
        }
        Ok(())
    }

    /// Latent layout: shared block first, then each encoder's private block.
    fn latent_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.encoders.len());
        let mut next = self.shared_dim;
        for e in &self.encoders {
            off.push(next);
            next += e.unique_dim;
        }
        off
    }

    fn total_latents(&self) -> usize {
        self.shared_dim + self.encoders.iter().map(|e| e.unique_dim).sum::<usize>()
    }

    /// Label weights over the full latent layout.
    fn weight_vector(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.total_latents()];
        w[..self.label_rule.shared.len()].copy_from_slice(&self.label_rule.shared);
        for (e, off) in self.encoders.iter().zip(self.latent_offsets()) {
            if let Some(u) = self.label_rule.unique.get(&e.id) {
                w[off..off + u.len()].copy_from_slice(u);
            }
        }
        w
    }
}

fn ser_rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

fn de_rows<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
    let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(serde::de::Error::custom("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTruth {
    /// dₘ×(s+uₘ) with orthonormal columns.
    #[serde(serialize_with = "ser_rows", deserialize_with = "de_rows")]
    pub mixing: DMatrix<f64>,
    /// Output columns loading on at least one label-relevant latent.
    pub informative_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Samples (or tiles) × all latents, shared block first.
    #[serde(serialize_with = "ser_rows", deserialize_with = "de_rows")]
    pub latents: DMatrix<f64>,
    pub label_weights: Vec<f64>,
    pub logits: Vec<f64>,
    pub encoders: BTreeMap<String, EncoderTruth>,
    /// Bag mode only: per bag, which tiles carry signal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_tiles: Option<Vec<Vec<bool>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub encoders: BTreeMap<String, EmbeddingMatrix>,
    pub labels: Vec<Label>,
    pub truth: SynthTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBags {
    pub dataset: BagDataset,
    pub truth: SynthTruth,
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn mixing_map(out: usize, k: usize, kind: Mixing, rng: &mut Rng) -> DMatrix<f64> {
    if k == 0 {
        return DMatrix::zeros(out, 0);
    }
    match kind {
        Mixing::Rotation => gaussian(out, k, rng).qr().q(),
        Mixing::Axis => {
            let cols = index::sample(rng, out, k).into_vec();
            let mut m = DMatrix::zeros(out, k);
            for (j, &c) in cols.iter().enumerate() {
                m[(c, j)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
            m
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Latent draw for `rows` samples; stream layout is fixed so every block is
/// reproducible on its own.
fn draw_latents(cfg: &GeneratorConfig, rows: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(rows, cfg.total_latents());
    let shared = gaussian(rows, cfg.shared_dim, &mut substream(cfg.seed, 0));
    l.columns_mut(0, cfg.shared_dim).copy_from(&shared);
    for (m, (e, off)) in cfg.encoders.iter().zip(cfg.latent_offsets()).enumerate() {
        let u = gaussian(rows, e.unique_dim, &mut substream(cfg.seed, 1 + 3 * m as u64));
        l.columns_mut(off, e.unique_dim).copy_from(&u);
    }
    l
}

/// Projects latents through every encoder's mixing map and adds noise.
fn render(cfg: &GeneratorConfig, latents: &DMatrix<f64>, w: &[f64]) -> (Vec<DMatrix<f64>>, BTreeMap<String, EncoderTruth>) {
    let rows = latents.nrows();
    let mut outputs = Vec::new();
    let mut truth = BTreeMap::new();
    for (m, (e, off)) in cfg.encoders.iter().zip(cfg.latent_offsets()).enumerate() {
        let k = cfg.shared_dim + e.unique_dim;
        let mix = mixing_map(e.output_dim, k, cfg.mixing, &mut substream(cfg.seed, 2 + 3 * m as u64));
        let mut own = DMatrix::zeros(rows, k);
        own.columns_mut(0, cfg.shared_dim).copy_from(&latents.columns(0, cfg.shared_dim));
        own.columns_mut(cfg.shared_dim, e.unique_dim).copy_from(&latents.columns(off, e.unique_dim));
        let mut x = &own * mix.transpose();
        if cfg.noise_scale > 0.0 {
            x += gaussian(rows, e.output_dim, &mut substream(cfg.seed, 3 + 3 * m as u64)) * cfg.noise_scale;
        }
        let relevant: Vec<usize> = (0..cfg.shared_dim)
            .filter(|&j| w[j] != 0.0)
            .chain((0..e.unique_dim).filter(|&j| w[off + j] != 0.0).map(|j| cfg.shared_dim + j))
            .collect();
        let informative_columns = (0..e.output_dim)
            .filter(|&c| relevant.iter().any(|&j| mix[(c, j)].abs() > 1e-12))
            .collect();
        truth.insert(e.id.clone(), EncoderTruth { mixing: mix, informative_columns });
        outputs.push(x);
    }
    (outputs, truth)
}

fn logits(latents: &DMatrix<f64>, w: &[f64], bias: f64) -> Vec<f64> {
    latents.row_iter().map(|r| bias + r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).collect()
}

/// Flat (one row per sample) generation.
pub fn generate(cfg: &GeneratorConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let w = cfg.weight_vector();
    let latents = draw_latents(cfg, n);
    let logits = logits(&latents, &w, cfg.label_rule.bias);
    let labels: Vec<Label> = logits.iter().map(|&z| Label::from(sigmoid(z) >= 0.5)).collect();
    let (xs, enc_truth) = render(cfg, &latents, &w);
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let encoders = cfg
        .encoders
        .iter()
        .zip(xs)
        .map(|(e, x)| Ok((e.id.clone(), EmbeddingMatrix::new(&e.id, ids.clone(), x)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(SynthOutput {
        encoders,
        labels,
        truth: SynthTruth { latents, label_weights: w, logits, encoders: enc_truth, signal_tiles: None },
    })
}

const MAX_REJECTIONS: usize = 10_000;

/// Bag generation: `n_samples` bags of `tiles_per_bag` tiles, alternating
/// labels. Background tiles have every label-relevant latent set to zero;
/// positive bags hold `⌈ρT⌉` signal tiles whose relevant latents are redrawn
/// until their normalized score clears the margin.
pub fn generate_bags(cfg: &GeneratorConfig) -> Result<SynthBags> {
    cfg.validate()?;
    let mode = cfg
        .bag_mode
        .ok_or_else(|| SynthError::ConfigInvalid("bag_mode must be set for bag generation".into()))?;
    let t = mode.tiles_per_bag;
    let n_bags = cfg.n_samples;
    let w = cfg.weight_vector();
    let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let relevant: Vec<usize> = (0..w.len()).filter(|&j| w[j] != 0.0).collect();
    let mut latents = draw_latents(cfg, n_bags * t);
    let n_signal = ((mode.signal_fraction * t as f64).ceil() as usize).min(t);

    let mut rng = substream(cfg.seed, u64::MAX);
    let mut signal_tiles = Vec::with_capacity(n_bags);
    let mut labels = Vec::with_capacity(n_bags);
    for b in 0..n_bags {
        let label = (b % 2) as Label;
        let mut flags = vec![false; t];
        if label == 1 {
            for k in index::sample(&mut rng, t, n_signal) {
                flags[k] = true;
            }
        }
        for (k, &signal) in flags.iter().enumerate() {
            let row = b * t + k;
            if signal {
                let mut tries = 0;
                loop {
                    let score: f64 = relevant
                        .iter()
                        .map(|&j| {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            latents[(row, j)] = v;
                            v * w[j]
                        })
                        .sum();
                    if score / wnorm >= mode.signal_margin {
                        break;
                    }
                    tries += 1;
                    if tries == MAX_REJECTIONS {
                        return Err(SynthError::SignalRejection(MAX_REJECTIONS));
                    }
                }
            } else {
                for &j in &relevant {
                    latents[(row, j)] = 0.0;
                }
            }
        }
        signal_tiles.push(flags);
        labels.push(label);
    }

    let logits = logits(&latents, &w, cfg.label_rule.bias);
    let (xs, enc_truth) = render(cfg, &latents, &w);
    let slides = (0..n_bags)
        .map(|b| {
            let slide_id = format!("slide{b:04}");
            let tile_ids: Vec<String> = (0..t).map(|k| format!("{slide_id}#{k}")).collect();
            let tiles = cfg
                .encoders
                .iter()
                .zip(&xs)
                .map(|(e, x)| {
                    let m = EmbeddingMatrix::new(&e.id, tile_ids.clone(), x.rows(b * t, t).into_owned())?;
                    Ok((e.id.clone(), m))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(SlideBag::new(slide_id.clone(), format!("patient{b:04}"), labels[b], tiles, None)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = BagDataset::new(slides, ["low".into(), "high".into()])?;
    Ok(SynthBags {
        dataset,
        truth: SynthTruth {
            latents,
            label_weights: w,
            logits,
            encoders: enc_truth,
            signal_tiles: Some(signal_tiles),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_orthonormal() {
        let cfg = GeneratorConfig::complementary(300, 4);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        for t in a.truth.encoders.values() {
            let g = t.mixing.transpose() * &t.mixing;
            assert!((g - DMatrix::identity(8, 8)).abs().max() < 1e-12);
            assert!(!t.informative_columns.is_empty());
        }
        let pos = a.labels.iter().filter(|&&l| l == 1).count();
        assert!(pos > 100 && pos < 200);
    }

    #[test]
    fn labels_follow_rule() {
        let out = generate(&GeneratorConfig::complementary(200, 1)).unwrap();
        let off = [4usize, 8];
        for i in 0..200 {
            let z = out.truth.latents[(i, off[0])] + out.truth.latents[(i, off[1])];
            assert_eq!(out.labels[i], Label::from(z >= 0.0));
        }
    }

    #[test]
    fn axis_mixing_is_sparse() {
        let mut cfg = GeneratorConfig::complementary(50, 2);
        cfg.mixing = Mixing::Axis;
        let out = generate(&cfg).unwrap();
        for t in out.truth.encoders.values() {
            assert_eq!(t.informative_columns.len(), 1);
            let g = t.mixing.transpose() * &t.mixing;
            assert_eq!(g, DMatrix::identity(8, 8));
        }
    }

    #[test]
    fn noiseless_shared_only_is_linear() {
        let mut cfg = GeneratorConfig::complementary(100, 3);
        cfg.noise_scale = 0.0;
        cfg.label_rule = LabelRule { shared: vec![1.0, -1.0], ..Default::default() };
        let out = generate(&cfg).unwrap();
        let a = &out.encoders["enc_a"];
        let t = &out.truth.encoders["enc_a"];
        let back = a.values() * &t.mixing;
        for i in 0..100 {
            for j in 0..4 {
                assert!((back[(i, j)] - out.truth.latents[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bags_have_signal_where_expected() {
        let mut cfg = GeneratorConfig::complementary(10, 5);
        cfg.bag_mode = Some(BagMode { tiles_per_bag: 20, signal_fraction: 0.12, signal_margin: 1.0 });
        let out = generate_bags(&cfg).unwrap();
        let flags = out.truth.signal_tiles.as_ref().unwrap();
        for (b, s) in out.dataset.slides.iter().enumerate() {
            let n_sig = flags[b].iter().filter(|f| **f).count();
            assert_eq!(n_sig, if s.label == 1 { 3 } else { 0 });
            assert_eq!(s.label, (b % 2) as Label);
            for (k, &f) in flags[b].iter().enumerate() {
                let z = out.truth.logits[b * 20 + k];
                if f {
                    assert!(z / 2f64.sqrt() >= 1.0);
                } else {
                    assert_eq!(z, 0.0);
                }
            }
        }
        assert_eq!(generate_bags(&cfg).unwrap(), out);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = GeneratorConfig::complementary(10, 1);
        cfg.encoders[0].output_dim = 3;
        assert!(generate(&cfg).is_err());
        let mut cfg = GeneratorConfig::complementary(10, 1);
        cfg.label_rule.unique.insert("ghost".into(), vec![1.0]);
        assert!(generate(&cfg).is_err());
        let cfg = GeneratorConfig::complementary(10, 1);
        assert!(generate_bags(&cfg).is_err());
    }
}
