use nalgebra::{DMatrix, DMatrixView};
use rand::Rng as _;

use crate::linalg::xt_y;
use crate::rng::Rng;

/// An affine map `y = x·W + b` whose `in × out` weight (column-major) and
/// bias live at fixed offsets inside a model's flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Affine {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Affine {
    pub fn weight<'a>(&self, p: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(&p[self.w..self.w + self.inp * self.out], self.inp, self.out)
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.out]
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, p: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        if x.nrows() == 1 {
            return self.forward_row(p, x.as_slice());
        }
        let mut y = x * self.weight(p);
        let b = self.bias(p);
        for (j, mut col) in y.column_iter_mut().enumerate() {
            col.add_scalar_mut(b[j]);
        }
        y
    }

    fn forward_row(&self, p: &[f64], x: &[f64]) -> DMatrix<f64> {
        let w = &p[self.w..self.w + self.inp * self.out];
        let b = self.bias(p);
        DMatrix::from_iterator(1, self.out, w.chunks_exact(self.inp).zip(b).map(|(col, bj)| dot(col, x) + bj))
    }

    /// Accumulates `dW = xᵀ·dy`, `db = Σ_rows dy` into `grad` and returns `dx = dy·Wᵀ`.
    pub fn backward(&self, p: &[f64], x: &DMatrix<f64>, dy: &DMatrix<f64>, grad: &mut [f64], need_dx: bool) -> Option<DMatrix<f64>> {
        if x.nrows() == 1 {
            return self.backward_row(p, x.as_slice(), dy.as_slice(), grad, need_dx);
        }
        let dw = xt_y(x, dy);
        for (g, d) in grad[self.w..self.w + self.inp * self.out].iter_mut().zip(dw.as_slice()) {
            *g += d;
        }
        for (j, col) in dy.column_iter().enumerate() {
            grad[self.b + j] += col.sum();
        }
        need_dx.then(|| (self.weight(p) * dy.transpose()).transpose())
    }

    fn backward_row(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], need_dx: bool) -> Option<DMatrix<f64>> {
        let (gw, gb) = grad[self.w..self.b + self.out].split_at_mut(self.inp * self.out);
        for ((col, &d), b) in gw.chunks_exact_mut(self.inp).zip(dy).zip(gb.iter_mut()) {
            *b += d;
            if d != 0.0 {
                col.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
            }
        }
        need_dx.then(|| {
            let w = &p[self.w..self.w + self.inp * self.out];
            let mut dx = vec![0.0; self.inp];
            for (col, &d) in w.chunks_exact(self.inp).zip(dy) {
                if d != 0.0 {
                    dx.iter_mut().zip(col).for_each(|(o, wi)| *o += d * wi);
                }
            }
            DMatrix::from_vec(1, self.inp, dx)
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, p: &mut [f64], rng: &mut Rng) {
        let limit = (6.0 / (self.inp + self.out) as f64).sqrt();
        for w in &mut p[self.w..self.w + self.inp * self.out] {
            *w = rng.random_range(-limit..limit);
        }
        p[self.b..self.b + self.out].fill(0.0);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, ar) = a.split_at(a.len() / 4 * 4);
    let (b4, br) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Hands out consecutive parameter ranges.
#[derive(Default)]
pub(crate) struct Layout {
    next: usize,
}

impl Layout {
    pub fn affine(&mut self, inp: usize, out: usize) -> Affine {
        let a = Affine { w: self.next, b: self.next + inp * out, inp, out };
        self.next += inp * out + out;
        a
    }

    pub fn len(&self) -> usize {
        self.next
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise `1/(1-rate)`.
pub(crate) fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> DMatrix<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    DMatrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < keep { scale } else { 0.0 })
}

pub(crate) fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

/// `dy ⊙ 1[pre > 0]`
pub(crate) fn relu_back(pre: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    dy.zip_map(pre, |g, x| if x > 0.0 { g } else { 0.0 })
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable two-class softmax.
pub(crate) fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Cross-entropy of `softmax(logits)` against `label` and its gradient w.r.t. the logits.
pub(crate) fn cross_entropy(logits: [f64; 2], label: u8) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let loss = lse - logits[label as usize];
    let p = softmax2(logits);
    let mut g = p;
    g[label as usize] -= 1.0;
    (loss, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_at_zero_logits() {
        let (l, g) = cross_entropy([0.0, 0.0], 1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, [0.5, -0.5]);
    }

    #[test]
    fn softmax_extremes() {
        let p = softmax2([-10.0, 10.0]);
        assert!(p[1] > 1.0 - 1e-8);
        let p = softmax2([1e6, -1e6]);
        assert_eq!(p, [1.0, 0.0]);
    }

    #[test]
    fn row_path_matches_matrix_path() {
        let mut lay = Layout::default();
        let a = lay.affine(7, 5);
        let mut p = vec![0.0; lay.len()];
        let mut r = crate::rng::seeded(2);
        a.init(&mut p, &mut r);
        p[a.b..].iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let x = DMatrix::from_fn(1, 7, |_, j| j as f64 - 3.0);
        let dy = DMatrix::from_fn(1, 5, |_, j| 0.5 - j as f64);
        let two = DMatrix::from_fn(2, 7, |i, j| if i == 0 { x[(0, j)] } else { 0.0 });
        let dy2 = DMatrix::from_fn(2, 5, |i, j| if i == 0 { dy[(0, j)] } else { 0.0 });
        let y1 = a.forward(&p, &x);
        let y2 = a.forward(&p, &two);
        assert!((y1 - y2.rows(0, 1)).abs().max() < 1e-14);
        let mut g1 = vec![0.0; p.len()];
        let mut g2 = vec![0.0; p.len()];
        let d1 = a.backward(&p, &x, &dy, &mut g1, true).unwrap();
        let d2 = a.backward(&p, &two, &dy2, &mut g2, true).unwrap();
        assert!((d1 - d2.rows(0, 1)).abs().max() < 1e-14);
        assert!(g1.iter().zip(&g2).all(|(u, v)| (u - v).abs() < 1e-14));
    }

    #[test]
    fn dropout_mask_values() {
        let mut r = crate::rng::seeded(1);
        let m = dropout_mask(50, 40, 0.5, &mut r);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((800..1200).contains(&kept));
    }
}
