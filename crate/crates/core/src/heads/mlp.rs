use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::layers::{cross_entropy, dropout_mask, relu, relu_back, Affine, Layout};
use super::{HeadError, Result};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    /// Hidden widths; the network has `hidden.len() + 1` affine layers.
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for MlpArch {
    fn default() -> Self {
        MlpArch { hidden: vec![512, 256, 128, 64, 32], dropout: 0.5 }
    }
}

/// Feed-forward classifier for slide-level vectors: affine layers with ReLU
/// and inverted dropout after every hidden layer, two output logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideMlp {
    input_dim: usize,
    arch: MlpArch,
    layers: Vec<Affine>,
    params: Vec<f64>,
}

struct Trace {
    inputs: Vec<DMatrix<f64>>,
    pres: Vec<DMatrix<f64>>,
    masks: Vec<Option<DMatrix<f64>>>,
    logits: [f64; 2],
}

impl SlideMlp {
    pub fn new(input_dim: usize, arch: MlpArch, seed: u64) -> Result<Self> {
        let mut m = Self::zeroed(input_dim, arch)?;
        let mut rng = seeded(seed);
        for layer in &m.layers {
            layer.init(&mut m.params, &mut rng);
        }
        Ok(m)
    }

    pub(crate) fn zeroed(input_dim: usize, arch: MlpArch) -> Result<Self> {
        if input_dim == 0 || arch.hidden.contains(&0) {
            return Err(HeadError::InvalidArch("all widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&arch.dropout) {
            return Err(HeadError::InvalidArch(format!("dropout {} outside [0, 1)", arch.dropout)));
        }
        let mut lay = Layout::default();
        let mut widths = vec![input_dim];
        widths.extend(&arch.hidden);
        widths.push(2);
        let layers = widths.windows(2).map(|w| lay.affine(w[0], w[1])).collect();
        Ok(SlideMlp { input_dim, arch, layers, params: vec![0.0; lay.len()] })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter ranges `(layer, offset, len)` in storage order.
    pub fn parameter_blocks(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, a)| [(i, a.w, a.inp * a.out), (i, a.b, a.out)])
            .collect()
    }

    fn trace(&self, x: &[f64], mut dropout: Option<&mut Rng>) -> Result<Trace> {
        if x.len() != self.input_dim {
            return Err(HeadError::DimensionMismatch { expected: self.input_dim, found: x.len() });
        }
        let last = self.layers.len() - 1;
        let mut cur = DMatrix::from_row_slice(1, x.len(), x);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&self.params, &cur);
            inputs.push(cur);
            if i == last {
                return Ok(Trace { inputs, pres, masks, logits: [pre[(0, 0)], pre[(0, 1)]] });
            }
            let mut h = relu(&pre);
            let mask = match dropout.as_deref_mut() {
                Some(rng) if self.arch.dropout > 0.0 => {
                    let m = dropout_mask(1, h.ncols(), self.arch.dropout, rng);
                    h.component_mul_assign(&m);
                    Some(m)
                }
                _ => None,
            };
            pres.push(pre);
            masks.push(mask);
            cur = h;
        }
        unreachable!("the output layer returns")
    }

    pub fn forward(&self, x: &[f64], dropout: Option<&mut Rng>) -> Result<[f64; 2]> {
        Ok(self.trace(x, dropout)?.logits)
    }

    /// Loss `CE(softmax(logits), label) + (wd/2)‖θ‖²` and its gradient.
    pub fn loss_and_grad(&self, x: &[f64], label: u8, weight_decay: f64, dropout: Option<&mut Rng>) -> Result<(f64, Vec<f64>)> {
        let t = self.trace(x, dropout)?;
        let (ce, dlogits) = cross_entropy(t.logits, label);
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let l2: f64 = p.iter().map(|v| v * v).sum();
        let mut dy = DMatrix::from_row_slice(1, 2, &dlogits);
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(p, &t.inputs[i], &dy, &mut grad, i > 0);
            if let Some(mut dh) = dx {
                if let Some(m) = &t.masks[i - 1] {
                    dh.component_mul_assign(m);
                }
                dy = relu_back(&t.pres[i - 1], &dh);
            }
        }
        for (g, v) in grad.iter_mut().zip(p) {
            *g += weight_decay * v;
        }
        Ok((ce + 0.5 * weight_decay * l2, grad))
    }
}
