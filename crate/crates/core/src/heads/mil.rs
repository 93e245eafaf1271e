use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::layers::{cross_entropy, dropout_mask, relu, relu_back, sigmoid, Affine, Layout};
use super::{HeadError, Result};
use crate::rng::{seeded, Rng};

/// Widths of the gated-attention network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MilArch {
    pub hidden: usize,
    pub attention: usize,
    pub dropout: f64,
}

impl Default for MilArch {
    fn default() -> Self {
        MilArch { hidden: 512, attention: 256, dropout: 0.5 }
    }
}

/// Gated-attention multiple-instance classifier.
///
/// `hᵢ = dropout(relu(W₀xᵢ + b₀))`, `sᵢ = wᵀ(tanh(Vhᵢ) ⊙ σ(Uhᵢ)) + b_w`,
/// `a = softmax(s)`, `z = Σ aᵢhᵢ`, `logits = W_c z + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedAttentionMil {
    input_dim: usize,
    arch: MilArch,
    proj: Affine,
    attn_v: Affine,
    attn_u: Affine,
    attn_w: Affine,
    classifier: Affine,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
pub(crate) struct MilTrace {
    pre: DMatrix<f64>,
    mask: Option<DMatrix<f64>>,
    h: DMatrix<f64>,
    tanh_v: DMatrix<f64>,
    gate_u: DMatrix<f64>,
    gated: DMatrix<f64>,
    attention: DVector<f64>,
    z: DVector<f64>,
    pub logits: [f64; 2],
}

impl GatedAttentionMil {
    pub fn new(input_dim: usize, arch: MilArch, seed: u64) -> Result<Self> {
        let mut m = Self::zeroed(input_dim, arch)?;
        let mut rng = seeded(seed);
        for layer in m.layers() {
            layer.init(&mut m.params, &mut rng);
        }
        Ok(m)
    }

    pub(crate) fn zeroed(input_dim: usize, arch: MilArch) -> Result<Self> {
        if input_dim == 0 || arch.hidden == 0 || arch.attention == 0 {
            return Err(HeadError::InvalidArch("all widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&arch.dropout) {
            return Err(HeadError::InvalidArch(format!("dropout {} outside [0, 1)", arch.dropout)));
        }
        let mut lay = Layout::default();
        let proj = lay.affine(input_dim, arch.hidden);
        let attn_v = lay.affine(arch.hidden, arch.attention);
        let attn_u = lay.affine(arch.hidden, arch.attention);
        let attn_w = lay.affine(arch.attention, 1);
        let classifier = lay.affine(arch.hidden, 2);
        Ok(GatedAttentionMil {
            input_dim,
            arch,
            proj,
            attn_v,
            attn_u,
            attn_w,
            classifier,
            params: vec![0.0; lay.len()],
        })
    }

    fn layers(&self) -> [Affine; 5] {
        [self.proj, self.attn_v, self.attn_u, self.attn_w, self.classifier]
    }

    pub fn arch(&self) -> MilArch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter ranges `(name, offset, len)` in storage order.
    pub fn parameter_blocks(&self) -> Vec<(&'static str, usize, usize)> {
        let names = [("proj", self.proj), ("attn_v", self.attn_v), ("attn_u", self.attn_u), ("attn_w", self.attn_w), ("classifier", self.classifier)];
        names
            .iter()
            .flat_map(|(n, a)| [(*n, a.w, a.inp * a.out), (*n, a.b, a.out)])
            .collect()
    }

    fn check(&self, bag: &DMatrix<f64>) -> Result<()> {
        if bag.ncols() != self.input_dim {
            return Err(HeadError::DimensionMismatch { expected: self.input_dim, found: bag.ncols() });
        }
        if bag.nrows() == 0 {
            return Err(HeadError::EmptyBag);
        }
        Ok(())
    }

    pub(crate) fn trace(&self, bag: &DMatrix<f64>, dropout: Option<&mut Rng>) -> Result<MilTrace> {
        self.check(bag)?;
        let p = &self.params;
        let pre = self.proj.forward(p, bag);
        let mut h = relu(&pre);
        let mask = match dropout {
            Some(rng) if self.arch.dropout > 0.0 => {
                let m = dropout_mask(h.nrows(), h.ncols(), self.arch.dropout, rng);
                h.component_mul_assign(&m);
                Some(m)
            }
            _ => None,
        };
        let tanh_v = self.attn_v.forward(p, &h).map(f64::tanh);
        let gate_u = self.attn_u.forward(p, &h).map(sigmoid);
        let gated = tanh_v.component_mul(&gate_u);
        let scores = self.attn_w.forward(p, &gated);
        let max = scores.max();
        let mut attention = DVector::from_iterator(scores.nrows(), scores.iter().map(|s| (s - max).exp()));
        let total = attention.sum();
        attention /= total;
        let z = h.tr_mul(&attention);
        let wc = self.classifier.weight(p);
        let bc = self.classifier.bias(p);
        let logits = [wc.column(0).dot(&z) + bc[0], wc.column(1).dot(&z) + bc[1]];
        Ok(MilTrace { pre, mask, h, tanh_v, gate_u, gated, attention, z, logits })
    }

    /// Logits and attention weights. Dropout is applied only when `dropout` is given.
    pub fn forward(&self, bag: &DMatrix<f64>, dropout: Option<&mut Rng>) -> Result<([f64; 2], Vec<f64>)> {
        let t = self.trace(bag, dropout)?;
        Ok((t.logits, t.attention.as_slice().to_vec()))
    }

    /// Loss `CE(softmax(logits), label) + (wd/2)‖θ‖²` and its gradient.
    pub fn loss_and_grad(&self, bag: &DMatrix<f64>, label: u8, weight_decay: f64, dropout: Option<&mut Rng>) -> Result<(f64, Vec<f64>)> {
        let t = self.trace(bag, dropout)?;
        let (ce, dlogits) = cross_entropy(t.logits, label);
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let l2: f64 = p.iter().map(|v| v * v).sum();

        let dl = DMatrix::from_row_slice(1, 2, &dlogits);
        let zrow = DMatrix::from_row_slice(1, t.z.len(), t.z.as_slice());
        let dz = self.classifier.backward(p, &zrow, &dl, &mut grad, true).expect("requested");

        // z = hᵀa
        let da = &t.h * dz.transpose();
        let mut dh = &t.attention * &dz;
        let dot = t.attention.dot(&da.column(0));
        let ds = DMatrix::from_iterator(da.nrows(), 1, t.attention.iter().zip(da.iter()).map(|(a, d)| a * (d - dot)));

        let dgated = self.attn_w.backward(p, &t.gated, &ds, &mut grad, true).expect("requested");
        let dpre_v = dgated.zip_zip_map(&t.gate_u, &t.tanh_v, |g, u, v| g * u * (1.0 - v * v));
        let dpre_u = dgated.zip_zip_map(&t.tanh_v, &t.gate_u, |g, v, u| g * v * u * (1.0 - u));
        dh += self.attn_v.backward(p, &t.h, &dpre_v, &mut grad, true).expect("requested");
        dh += self.attn_u.backward(p, &t.h, &dpre_u, &mut grad, true).expect("requested");

        if let Some(m) = &t.mask {
            dh.component_mul_assign(m);
        }
        let dpre = relu_back(&t.pre, &dh);
        self.proj.backward(p, bag, &dpre, &mut grad, false);
        for (g, v) in grad.iter_mut().zip(p) {
            *g += weight_decay * v;
        }
        Ok((ce + 0.5 * weight_decay * l2, grad))
    }
}
