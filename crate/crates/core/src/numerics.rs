//! Dense numeric kernel and deterministic randomness.
//!
//! Everything downstream (quantizer fitting, toy transformers, sampling in
//! layer beam search) draws from the counter-based generator defined here,
//! so fixed seeds give bit-identical results on every platform.

use crate::error::Result;
use crate::invalid_arg;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    /// Builds a matrix by evaluating `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Gaussian entries scaled by `scale`, drawn in row-major order.
    pub fn randn(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.normal() * scale)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// `self (r×k) * other (k×c) -> r×c`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(r);
                for c in 0..other.cols {
                    out_row[c] += a * orow[c];
                }
            }
        }
        out
    }

    /// Vertical concatenation; panics on column mismatch.
    pub fn vcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "vcat column mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// x * m where x is a 1×rows row vector and m is rows×cols.
pub fn vec_matmul(x: &[f64], m: &Matrix) -> Vec<f64> {
    assert_eq!(x.len(), m.rows());
    let mut out = vec![0.0; m.cols()];
    for (k, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (c, &w) in m.row(k).iter().enumerate() {
            out[c] += a * w;
        }
    }
    out
}

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Counter-based deterministic PRNG.
///
/// Draw `n` is `mix64(key + n * GOLDEN)` where `key` is a hash of
/// `(seed, stream)` and `mix64` is the splitmix64 finalizer. Identical
/// `(seed, stream)` pairs therefore produce identical sequences everywhere,
/// and child streams (see [`SeededRng::child`]) never interact with the
/// parent's draw counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    counter: u64,
    key: u64,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = mix64(seed ^ mix64(stream.wrapping_mul(GOLDEN).wrapping_add(1)));
        SeededRng {
            seed,
            stream,
            counter: 0,
            key,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        SeededRng::new(seed, 0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream `index`; independent of how many draws the parent or any
    /// sibling has made.
    pub fn child(&self, index: u64) -> SeededRng {
        let stream = mix64(
            self.stream
                .wrapping_mul(GOLDEN)
                .wrapping_add(index)
                .wrapping_add(1),
        );
        SeededRng::new(self.seed, stream)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; used where log(0) must be avoided.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller. Consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid_arg!("softmax of empty input"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Log of the same values softmax returns.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid_arg!("log_softmax of empty input"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    Ok(logits.iter().map(|&x| x - lse).collect())
}

/// Indices of the `min(k, len)` largest scores, sorted by descending score
/// then ascending index. Ties always break toward the smaller index.
pub fn top_k_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid_arg!("top_k_select with k = 0"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(scores.len()));
    Ok(idx)
}

/// Inverse-CDF categorical draw. Advances `rng` by exactly one draw.
pub fn categorical_sample(probs: &[f64], rng: &mut SeededRng) -> Result<usize> {
    if probs.is_empty() {
        return Err(invalid_arg!("categorical_sample of empty input"));
    }
    let mut sum = 0.0;
    for &p in probs {
        if p < 0.0 {
            return Err(invalid_arg!("categorical_sample with negative entry {p}"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid_arg!("categorical_sample probs sum to {sum}"));
    }
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Zero-mean unit-variance normalization over the feature axis.
pub fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + LAYER_NORM_EPS).sqrt();
    x.iter().map(|&v| (v - mean) / denom).collect()
}

/// Adaptive layer norm: `y = (1 + scale(cond)) .* normalize(x) + shift(cond)`
/// where scale/shift are affine maps of the conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLayerNorm {
    pub w_scale: Matrix, // d_cond × d
    pub b_scale: Vec<f64>,
    pub w_shift: Matrix,
    pub b_shift: Vec<f64>,
}

impl AdaLayerNorm {
    pub fn zeros(d_cond: usize, d: usize) -> Self {
        AdaLayerNorm {
            w_scale: Matrix::zeros(d_cond, d),
            b_scale: vec![0.0; d],
            w_shift: Matrix::zeros(d_cond, d),
            b_shift: vec![0.0; d],
        }
    }

    pub fn randn(d_cond: usize, d: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (d_cond as f64).sqrt();
        AdaLayerNorm {
            w_scale: Matrix::randn(d_cond, d, scale, rng),
            b_scale: vec![0.0; d],
            w_shift: Matrix::randn(d_cond, d, scale, rng),
            b_shift: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.w_scale.cols() || cond.len() != self.w_scale.rows() {
            return Err(invalid_arg!(
                "ada_layer_norm dimension mismatch: x {} cond {} vs params {}x{}",
                x.len(),
                cond.len(),
                self.w_scale.rows(),
                self.w_scale.cols()
            ));
        }
        let mut scale = vec_matmul(cond, &self.w_scale);
        let mut shift = vec_matmul(cond, &self.w_shift);
        for (s, b) in scale.iter_mut().zip(&self.b_scale) {
            *s += b;
        }
        for (s, b) in shift.iter_mut().zip(&self.b_shift) {
            *s += b;
        }
        let core = layer_norm(x);
        Ok(core
            .iter()
            .zip(scale.iter().zip(&shift))
            .map(|(&c, (&s, &t))| (1.0 + s) * c + t)
            .collect())
    }

    pub fn param_count(&self) -> usize {
        2 * (self.w_scale.rows() * self.w_scale.cols() + self.b_scale.len())
    }
}
