//! Downstream classifiers and their training loop: a gated-attention
//! multiple-instance model over tile bags and a feed-forward network over
//! slide vectors. Gradients are computed by hand-written reverse passes.

mod checkpoint;
mod layers;
mod mil;
mod mlp;

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, AnyHead, Checkpoint};
pub use mil::{GatedAttentionMil, MilArch};
pub use mlp::{MlpArch, SlideMlp};

use crate::rng::{substream, Rng};
use crate::store::{BagDataset, EmbeddingMatrix, Label};

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error("input has {found} features, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bag has no tiles")]
    EmptyBag,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    ShapeMismatch { params: usize, grads: usize },
    #[error("non-finite parameters after epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("encoder `{0}` not present in dataset")]
    UnknownEncoder(String),
    #[error("sample index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, HeadError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// A validation loss counts as an improvement only if it is below the best by more than this.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 20,
            max_epochs: 200,
            min_delta: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HeadError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative");
        }
        Ok(())
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update. Weight decay is coupled: `grads` is
/// expected to already contain the `weight_decay · θ` term, as returned by
/// the models' `loss_and_grad`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(HeadError::ShapeMismatch { params: params.len(), grads: grads.len() });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Common interface of the two classifiers, used by the training loop.
pub trait Head: Clone + Send + Sync {
    type Sample: ?Sized + Sync;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn logits(&self, x: &Self::Sample, dropout: Option<&mut Rng>) -> Result<[f64; 2]>;
    fn loss_and_grad(&self, x: &Self::Sample, label: Label, weight_decay: f64, dropout: Option<&mut Rng>) -> Result<(f64, Vec<f64>)>;
    fn to_any(&self) -> AnyHead;
}

impl Head for GatedAttentionMil {
    type Sample = DMatrix<f64>;

    fn params(&self) -> &[f64] {
        GatedAttentionMil::params(self)
    }
    fn params_mut(&mut self) -> &mut [f64] {
        GatedAttentionMil::params_mut(self)
    }
    fn logits(&self, x: &DMatrix<f64>, dropout: Option<&mut Rng>) -> Result<[f64; 2]> {
        Ok(self.trace(x, dropout)?.logits)
    }
    fn loss_and_grad(&self, x: &DMatrix<f64>, label: Label, wd: f64, dropout: Option<&mut Rng>) -> Result<(f64, Vec<f64>)> {
        GatedAttentionMil::loss_and_grad(self, x, label, wd, dropout)
    }
    fn to_any(&self) -> AnyHead {
        AnyHead::Mil(self.clone())
    }
}

impl Head for SlideMlp {
    type Sample = [f64];

    fn params(&self) -> &[f64] {
        SlideMlp::params(self)
    }
    fn params_mut(&mut self) -> &mut [f64] {
        SlideMlp::params_mut(self)
    }
    fn logits(&self, x: &[f64], dropout: Option<&mut Rng>) -> Result<[f64; 2]> {
        self.forward(x, dropout)
    }
    fn loss_and_grad(&self, x: &[f64], label: Label, wd: f64, dropout: Option<&mut Rng>) -> Result<(f64, Vec<f64>)> {
        SlideMlp::loss_and_grad(self, x, label, wd, dropout)
    }
    fn to_any(&self) -> AnyHead {
        AnyHead::Mlp(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Where the training streams stood when training ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: u64,
    pub shuffle_word_pos: u128,
    pub dropout_word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct TrainedModel<H> {
    /// Parameters from the best validation epoch.
    pub model: H,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub rng: RngRecord,
}

impl<H: Head> TrainedModel<H> {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history[e - 1].val_loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { head: self.model.to_any(), best_epoch: self.best_epoch, rng: self.rng }
    }

    pub fn write_history_csv(&self, w: impl Write) -> std::io::Result<()> {
        write_history_csv(&self.history, w)
    }
}

pub fn write_history_csv(history: &[EpochRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss")?;
    for r in history {
        writeln!(w, "{},{:?},{:?}", r.epoch, r.train_loss, r.val_loss)?;
    }
    Ok(())
}

/// Mean evaluation-mode cross-entropy.
pub fn mean_loss<H: Head>(model: &H, data: &[(&H::Sample, Label)]) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|(x, y)| Ok(layers::cross_entropy(model.logits(x, None)?, *y).0))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Generic training loop: one sample per step in a seeded shuffled order,
/// evaluation-mode validation loss after every epoch, early stopping after
/// `patience` epochs without improvement, best-epoch parameters restored.
pub fn train<H: Head>(
    init: H,
    train_set: &[(&H::Sample, Label)],
    val_set: &[(&H::Sample, Label)],
    cfg: &TrainConfig,
) -> Result<TrainedModel<H>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(HeadError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(HeadError::EmptySplit("validation"));
    }
    if let Some(&(_, y)) = train_set.iter().chain(val_set).find(|(_, y)| *y > 1) {
        return Err(HeadError::BadLabel(y));
    }
    let mut model = init;
    let mut shuffle_rng = substream(cfg.seed, 1);
    let mut dropout_rng = substream(cfg.seed, 2);
    let mut adam = AdamState::new(model.params().len());
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let (x, y) = train_set[i];
            let (loss, grad) = model.loss_and_grad(x, y, cfg.weight_decay, Some(&mut dropout_rng))?;
            train_loss += loss;
            adam_step(model.params_mut(), &grad, &mut adam, cfg)?;
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(HeadError::NonFinite { epoch });
        }
        let val_loss = mean_loss(&model, val_set)?;
        history.push(EpochRecord { epoch, train_loss: train_loss / train_set.len() as f64, val_loss });
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_loss < b - cfg.min_delta,
        };
        if improved {
            best = Some((val_loss, epoch, model.params().to_vec()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let best_epoch = best.map(|(_, e, p)| {
        model.params_mut().copy_from_slice(&p);
        e
    });
    Ok(TrainedModel {
        model,
        history,
        best_epoch,
        rng: RngRecord {
            seed: cfg.seed,
            shuffle_word_pos: shuffle_rng.get_word_pos(),
            dropout_word_pos: dropout_rng.get_word_pos(),
        },
    })
}

fn check_indices(idx: &[usize], len: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= len) {
        Some(&index) => Err(HeadError::IndexOutOfRange { index, len }),
        None => Ok(()),
    }
}

/// Trains a gated-attention model on the tiles of `encoder`, using the slides
/// at `train_idx` for updates and `val_idx` for early stopping.
pub fn train_mil(
    data: &BagDataset,
    encoder: &str,
    train_idx: &[usize],
    val_idx: &[usize],
    arch: MilArch,
    cfg: &TrainConfig,
) -> Result<TrainedModel<GatedAttentionMil>> {
    check_indices(train_idx, data.slides.len())?;
    check_indices(val_idx, data.slides.len())?;
    let bag = |i: usize| -> Result<(&DMatrix<f64>, Label)> {
        let s = &data.slides[i];
        let m = s.tiles.get(encoder).ok_or_else(|| HeadError::UnknownEncoder(encoder.to_string()))?;
        Ok((m.values(), s.label))
    };
    let tr = train_idx.iter().map(|&i| bag(i)).collect::<Result<Vec<_>>>()?;
    let va = val_idx.iter().map(|&i| bag(i)).collect::<Result<Vec<_>>>()?;
    let dim = match tr.first() {
        Some((m, _)) => m.ncols(),
        None => return Err(HeadError::EmptySplit("training")),
    };
    let init = GatedAttentionMil::new(dim, arch, cfg.seed)?;
    train(init, &tr, &va, cfg)
}

/// Row `i` of `x` as a contiguous vector.
pub fn row_vectors(x: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    let v = x.values();
    (0..v.nrows()).map(|r| v.row(r).iter().copied().collect()).collect()
}

/// Trains the slide-level network on rows of `x`.
pub fn train_mlp(
    x: &EmbeddingMatrix,
    labels: &[Label],
    train_idx: &[usize],
    val_idx: &[usize],
    arch: MlpArch,
    cfg: &TrainConfig,
) -> Result<TrainedModel<SlideMlp>> {
    let n = x.n_samples();
    if labels.len() != n {
        return Err(HeadError::DimensionMismatch { expected: n, found: labels.len() });
    }
    check_indices(train_idx, n)?;
    check_indices(val_idx, n)?;
    let rows = row_vectors(x);
    let tr: Vec<(&[f64], Label)> = train_idx.iter().map(|&i| (rows[i].as_slice(), labels[i])).collect();
    let va: Vec<(&[f64], Label)> = val_idx.iter().map(|&i| (rows[i].as_slice(), labels[i])).collect();
    let init = SlideMlp::new(x.dim(), arch, cfg.seed)?;
    train(init, &tr, &va, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob_high: f64,
    pub label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
}

impl Prediction {
    /// Class-1 softmax probability; label 1 iff the probability is at least 0.5.
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let prob_high = layers::softmax2(logits)[1];
        Prediction { prob_high, label: Label::from(prob_high >= 0.5), attention: None }
    }
}

impl GatedAttentionMil {
    pub fn predict(&self, bag: &DMatrix<f64>) -> Result<Prediction> {
        let (logits, att) = self.forward(bag, None)?;
        Ok(Prediction { attention: Some(att), ..Prediction::from_logits(logits) })
    }
}

impl SlideMlp {
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        Ok(Prediction::from_logits(self.forward(x, None)?))
    }
}

/// Evaluation-mode predictions for every slide at `idx`.
pub fn predict_bags(model: &GatedAttentionMil, data: &BagDataset, encoder: &str, idx: &[usize]) -> Result<Vec<Prediction>> {
    check_indices(idx, data.slides.len())?;
    idx.par_iter()
        .map(|&i| {
            let m = data.slides[i]
                .tiles
                .get(encoder)
                .ok_or_else(|| HeadError::UnknownEncoder(encoder.to_string()))?;
            model.predict(m.values())
        })
        .collect()
}

pub fn predict_rows(model: &SlideMlp, x: &EmbeddingMatrix, idx: &[usize]) -> Result<Vec<Prediction>> {
    check_indices(idx, x.n_samples())?;
    let v = x.values();
    idx.par_iter()
        .map(|&i| {
            let row: Vec<f64> = v.row(i).iter().copied().collect();
            model.predict(&row)
        })
        .collect()
}
