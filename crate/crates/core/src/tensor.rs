//! Dense f64 tensor with row-major layout.
//!
//! Everything in this crate trains and evaluates at double precision so that
//! finite-difference gradient checks are meaningful. Matrix products go
//! through `ndarray` (BLAS-free but cache-blocked); the remaining kernels are
//! plain loops over small grids.

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha20Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * standard_normal(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Identity matrix (square).
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows/cols of a 2-D tensor; vectors of shape [n] are viewed as [1, n].
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on tensor of shape {:?}", self.shape),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", self.shape, other.shape);
        let a = ArrayView2::from_shape((m, k), &self.data).unwrap();
        let b = ArrayView2::from_shape((k2, n), &other.data).unwrap();
        let c = a.dot(&b);
        let (data, _) = c.into_raw_vec_and_offset();
        Tensor { shape: vec![m, n], data }
    }

    pub fn transposed(&self) -> Tensor {
        let (m, n) = self.dims2();
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Box-Muller standard normal draw.
fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ── shared forward kernels (used both off-tape and by tape ops) ──────────

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise softmax of a [m, n] tensor, max-subtracted for stability.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax of a [m, n] tensor.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Row-wise layer norm with learnable gain/bias over the last axis.
pub fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let (m, n) = x.dims2();
    assert_eq!(gain.numel(), n);
    assert_eq!(bias.numel(), n);
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    out
}

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear upsample of a [h, w] map to [oh, ow], half-pixel centers, edges clamped.
/// Source coordinate of output pixel j is (j + 0.5) * w/ow - 0.5. The nested
/// lerp form keeps constant maps constant without rounding drift.
pub fn bilinear_upsample(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = x.dims2();
    let mut out = Tensor::zeros(&[oh, ow]);
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    for oi in 0..oh {
        for oj in 0..ow {
            let [(i0, j0, _), (_, j1, _), (i1, _, _), _] = bilinear_taps(h, w, oh, ow, oi, oj);
            let (fi, fj) = bilinear_fracs(h, w, oh, ow, oi, oj);
            let top = lerp(x.data()[i0 * w + j0], x.data()[i0 * w + j1], fj);
            let bot = lerp(x.data()[i1 * w + j0], x.data()[i1 * w + j1], fj);
            out.data_mut()[oi * ow + oj] = lerp(top, bot, fi);
        }
    }
    out
}

fn bilinear_fracs(h: usize, w: usize, oh: usize, ow: usize, oi: usize, oj: usize) -> (f64, f64) {
    let frac = |o: usize, n_in: usize, n_out: usize| -> f64 {
        let c = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let c = c.clamp(0.0, (n_in - 1) as f64);
        c - c.floor()
    };
    (frac(oi, h, oh), frac(oj, w, ow))
}

/// The (row, col, weight) source taps contributing to output pixel (oi, oj).
pub(crate) fn bilinear_taps(
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    oi: usize,
    oj: usize,
) -> [(usize, usize, f64); 4] {
    let src = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let c = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let c = c.clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let (i0, i1, fi) = src(oi, h, oh);
    let (j0, j1, fj) = src(oj, w, ow);
    [
        (i0, j0, (1.0 - fi) * (1.0 - fj)),
        (i0, j1, (1.0 - fi) * fj),
        (i1, j0, fi * (1.0 - fj)),
        (i1, j1, fi * fj),
    ]
}
