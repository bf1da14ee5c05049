//! Residual vector quantization with factorized, L2-normalized codebooks.
//!
//! Lookup happens in a low-dimensional projected space on unit-norm entries;
//! dequantization goes back to feature space through a per-layer out
//! projection. Codebooks are fit by layer-wise k-means with EMA updates,
//! residuals threading from layer to layer.

use crate::error::Result;
use crate::invalid_arg;
use crate::numerics::{dot, l2_norm, vec_matmul, Matrix, SeededRng};

pub const TOKEN_RATE_HZ: f32 = 50.0;
pub const DOWNSAMPLE: usize = 320;
pub const SAMPLE_RATE: usize = 16_000;
/// Epsilon guard for normalizing (near-)zero vectors.
pub const NORM_EPS: f64 = 1e-9;
pub const EMA_DECAY: f64 = 0.99;
/// EMA count below which an entry is considered dead and re-seeded.
pub const DEAD_CODE_THRESHOLD: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RvqConfig {
    pub n_layers: usize,
    pub codebook_size: usize,
    pub feature_dim: usize,
    /// Dimension of the factorized lookup space.
    pub code_dim: usize,
    pub token_rate_hz: f32,
    pub downsample: usize,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            n_layers: 16,
            codebook_size: 256,
            feature_dim: 64,
            code_dim: 8,
            token_rate_hz: TOKEN_RATE_HZ,
            downsample: DOWNSAMPLE,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(invalid_arg!("n_layers must be >= 1"));
        }
        if self.codebook_size < 2 {
            return Err(invalid_arg!("codebook_size must be >= 2"));
        }
        if self.code_dim > self.feature_dim {
            return Err(invalid_arg!(
                "code_dim {} exceeds feature_dim {}",
                self.code_dim,
                self.feature_dim
            ));
        }
        let rate = self.token_rate_hz as f64 * self.downsample as f64;
        if (rate - SAMPLE_RATE as f64).abs() > 1e-6 {
            return Err(invalid_arg!(
                "token_rate_hz * downsample = {rate}, expected {SAMPLE_RATE}"
            ));
        }
        Ok(())
    }
}

/// One RVQ layer: unit-norm entries in the factorized space plus the
/// projections in and out of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub layer: usize,
    pub entries: Matrix,  // C × code_dim, rows unit-norm
    pub in_proj: Matrix,  // feature_dim × code_dim
    pub out_proj: Matrix, // code_dim × feature_dim
    pub ema_counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodec {
    pub cfg: RvqConfig,
    pub books: Vec<Codebook>,
}

/// Layer-major grid of RVQ token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSequence {
    pub n_layers: usize,
    pub n_frames: usize,
    /// Layer-major: codes[layer * n_frames + frame].
    pub codes: Vec<u32>,
    pub token_rate_hz: f32,
}

impl CodeSequence {
    pub fn new(n_layers: usize, n_frames: usize) -> Self {
        CodeSequence {
            n_layers,
            n_frames,
            codes: vec![0; n_layers * n_frames],
            token_rate_hz: TOKEN_RATE_HZ,
        }
    }

    #[inline]
    pub fn get(&self, layer: usize, frame: usize) -> u32 {
        self.codes[layer * self.n_frames + frame]
    }

    #[inline]
    pub fn set(&mut self, layer: usize, frame: usize, code: u32) {
        self.codes[layer * self.n_frames + frame] = code;
    }

    pub fn layer(&self, layer: usize) -> &[u32] {
        &self.codes[layer * self.n_frames..(layer + 1) * self.n_frames]
    }

    /// Copy of the first `n` layers.
    pub fn prefix_layers(&self, n: usize) -> CodeSequence {
        assert!(n <= self.n_layers);
        CodeSequence {
            n_layers: n,
            n_frames: self.n_frames,
            codes: self.codes[..n * self.n_frames].to_vec(),
            token_rate_hz: self.token_rate_hz,
        }
    }

    /// Appends one more layer of codes.
    pub fn push_layer(&mut self, layer_codes: &[u32]) {
        assert_eq!(layer_codes.len(), self.n_frames);
        self.codes.extend_from_slice(layer_codes);
        self.n_layers += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub n_frames: usize,
    pub feature_dim: usize,
    pub frames: Matrix,
}

impl FeatureSequence {
    pub fn new(frames: Matrix) -> Self {
        FeatureSequence {
            n_frames: frames.rows(),
            feature_dim: frames.cols(),
            frames,
        }
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> FeatureSequence {
        assert!(start <= end && end <= self.n_frames);
        let mut rows = Vec::with_capacity((end - start) * self.feature_dim);
        for i in start..end {
            rows.extend_from_slice(self.frame(i));
        }
        FeatureSequence::new(Matrix::from_vec(end - start, self.feature_dim, rows))
    }
}

/// DFT-band log-magnitude features: one frame per `downsample` samples.
pub fn featurize(pcm: &[i16], cfg: &RvqConfig) -> Result<FeatureSequence> {
    let n = cfg.downsample;
    if pcm.len() < n {
        return Err(invalid_arg!("need at least {n} samples, got {}", pcm.len()));
    }
    let n_bins = n / 2 + 1;
    if cfg.feature_dim > n_bins {
        return Err(invalid_arg!(
            "feature_dim {} exceeds {} DFT bins",
            cfg.feature_dim,
            n_bins
        ));
    }
    let n_frames = pcm.len() / n;
    // Precomputed twiddles for the real DFT.
    let mut cos_t = vec![0.0f64; n_bins * n];
    let mut sin_t = vec![0.0f64; n_bins * n];
    for k in 0..n_bins {
        for t in 0..n {
            let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            cos_t[k * n + t] = ang.cos();
            sin_t[k * n + t] = ang.sin();
        }
    }
    let mut frames = Matrix::zeros(n_frames, cfg.feature_dim);
    let mut sample = vec![0.0f64; n];
    for f in 0..n_frames {
        for t in 0..n {
            sample[t] = pcm[f * n + t] as f64 / 32768.0;
        }
        let mut bands = vec![0.0f64; cfg.feature_dim];
        for k in 0..n_bins {
            let mut re = 0.0;
            let mut im = 0.0;
            for t in 0..n {
                re += sample[t] * cos_t[k * n + t];
                im += sample[t] * sin_t[k * n + t];
            }
            let band = k * cfg.feature_dim / n_bins;
            bands[band] += (re * re + im * im).sqrt();
        }
        for (b, &v) in bands.iter().enumerate() {
            frames.set(f, b, (1.0 + v).ln());
        }
    }
    Ok(FeatureSequence::new(frames))
}

fn normalize_guarded(v: &[f64]) -> Vec<f64> {
    let norm = l2_norm(v).max(NORM_EPS);
    v.iter().map(|x| x / norm).collect()
}

/// Quantizes one residual against one codebook.
///
/// Returns `(index, dequantized, new_residual)`. Nearest neighbor in the
/// projected normalized space, ties toward the smaller index.
pub fn quantize_layer(residual: &[f64], book: &Codebook) -> Result<(usize, Vec<f64>, Vec<f64>)> {
    if residual.len() != book.in_proj.rows() {
        return Err(invalid_arg!(
            "residual dim {} != feature_dim {}",
            residual.len(),
            book.in_proj.rows()
        ));
    }
    let z = normalize_guarded(&vec_matmul(residual, &book.in_proj));
    let idx = nearest_entry(&z, &book.entries);
    let quantized = vec_matmul(book.entries.row(idx), &book.out_proj);
    let new_residual: Vec<f64> = residual
        .iter()
        .zip(&quantized)
        .map(|(r, q)| r - q)
        .collect();
    Ok((idx, quantized, new_residual))
}

fn nearest_entry(z: &[f64], entries: &Matrix) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for j in 0..entries.rows() {
        let row = entries.row(j);
        let mut d = 0.0;
        for (a, b) in z.iter().zip(row) {
            let t = a - b;
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Sequential per-frame quantization through the first `n_layers` books.
pub fn encode(feat: &FeatureSequence, codec: &RvqCodec, n_layers: usize) -> Result<CodeSequence> {
    if n_layers == 0 {
        return Err(invalid_arg!("encode with n_layers = 0"));
    }
    if n_layers > codec.books.len() {
        return Err(invalid_arg!(
            "n_layers {} exceeds configured {}",
            n_layers,
            codec.books.len()
        ));
    }
    let mut codes = CodeSequence::new(n_layers, feat.n_frames);
    for f in 0..feat.n_frames {
        let mut residual = feat.frame(f).to_vec();
        for (l, book) in codec.books[..n_layers].iter().enumerate() {
            let (idx, _, new_residual) = quantize_layer(&residual, book)?;
            codes.set(l, f, idx as u32);
            residual = new_residual;
        }
    }
    Ok(codes)
}

/// Reconstruction: sum of out-projected entries over layers `0..n_layers`.
pub fn decode(codes: &CodeSequence, codec: &RvqCodec, n_layers: usize) -> Result<FeatureSequence> {
    if n_layers > codes.n_layers {
        return Err(invalid_arg!(
            "n_layers {} exceeds codes' {}",
            n_layers,
            codes.n_layers
        ));
    }
    if n_layers > codec.books.len() {
        return Err(invalid_arg!(
            "n_layers {} exceeds codec's {}",
            n_layers,
            codec.books.len()
        ));
    }
    let dim = codec.cfg.feature_dim;
    let mut frames = Matrix::zeros(codes.n_frames, dim);
    for f in 0..codes.n_frames {
        for l in 0..n_layers {
            let book = &codec.books[l];
            let entry = book.entries.row(codes.get(l, f) as usize);
            let q = vec_matmul(entry, &book.out_proj);
            let row = frames.row_mut(f);
            for (o, v) in row.iter_mut().zip(&q) {
                *o += v;
            }
        }
    }
    Ok(FeatureSequence::new(frames))
}

/// Orthonormal columns via Gram-Schmidt on seeded Gaussian vectors.
fn random_orthonormal_columns(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for _ in 0..cols {
        loop {
            let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
            for prev in &columns {
                let p = dot(&v, prev);
                for (a, b) in v.iter_mut().zip(prev) {
                    *a -= p * b;
                }
            }
            let norm = l2_norm(&v);
            if norm > 1e-6 {
                for a in v.iter_mut() {
                    *a /= norm;
                }
                columns.push(v);
                break;
            }
        }
    }
    Matrix::from_fn(rows, cols, |r, c| columns[c][r])
}

/// Layer-wise k-means with EMA centroid updates.
///
/// Entries are renormalized to unit L2 after every update; dead entries are
/// re-seeded from a random residual. Each layer's out projection is the
/// transposed in projection scaled by the mean aligned residual magnitude,
/// so reconstruction carries the layer's typical energy.
pub fn fit_codebooks(
    train: &[FeatureSequence],
    cfg: &RvqConfig,
    iters: usize,
    rng: &mut SeededRng,
) -> Result<RvqCodec> {
    cfg.validate()?;
    let mut residuals: Vec<Vec<f64>> = Vec::new();
    for seq in train {
        if seq.feature_dim != cfg.feature_dim {
            return Err(invalid_arg!(
                "training feature_dim {} != cfg {}",
                seq.feature_dim,
                cfg.feature_dim
            ));
        }
        for f in 0..seq.n_frames {
            residuals.push(seq.frame(f).to_vec());
        }
    }
    if residuals.is_empty() {
        return Err(invalid_arg!("empty training set"));
    }
    let n = residuals.len();
    let c = cfg.codebook_size;
    let mut books = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let mut layer_rng = rng.child(layer as u64);
        let in_proj = random_orthonormal_columns(cfg.feature_dim, cfg.code_dim, &mut layer_rng);

        let projected: Vec<Vec<f64>> = residuals.iter().map(|r| vec_matmul(r, &in_proj)).collect();
        let units: Vec<Vec<f64>> = projected.iter().map(|z| normalize_guarded(z)).collect();

        let mut entries = kmeans_pp_seed(&units, c, &mut layer_rng);
        let mut ema_counts = vec![1.0f64; c];
        let mut ema_sums: Vec<Vec<f64>> = (0..c).map(|j| entries.row(j).to_vec()).collect();

        let mut assignment = vec![0usize; n];
        for _ in 0..iters.max(1) {
            for (i, u) in units.iter().enumerate() {
                assignment[i] = nearest_entry(u, &entries);
            }
            let mut counts = vec![0usize; c];
            let mut sums = vec![vec![0.0f64; cfg.code_dim]; c];
            for (i, u) in units.iter().enumerate() {
                let j = assignment[i];
                counts[j] += 1;
                for (s, v) in sums[j].iter_mut().zip(u) {
                    *s += v;
                }
            }
            for j in 0..c {
                ema_counts[j] = EMA_DECAY * ema_counts[j] + (1.0 - EMA_DECAY) * counts[j] as f64;
                for d in 0..cfg.code_dim {
                    ema_sums[j][d] = EMA_DECAY * ema_sums[j][d] + (1.0 - EMA_DECAY) * sums[j][d];
                }
                if ema_counts[j] < DEAD_CODE_THRESHOLD {
                    let pick = layer_rng.uniform_index(n);
                    let seed = normalize_guarded(&units[pick]);
                    entries.row_mut(j).copy_from_slice(&seed);
                    ema_counts[j] = 1.0;
                    ema_sums[j].copy_from_slice(&seed);
                } else {
                    let centroid: Vec<f64> =
                        ema_sums[j].iter().map(|s| s / ema_counts[j]).collect();
                    entries
                        .row_mut(j)
                        .copy_from_slice(&normalize_guarded(&centroid));
                }
            }
        }

        // Final assignment fixes the per-layer output gain.
        let mut gain = 0.0;
        for (z, u) in projected.iter().zip(&units) {
            let j = nearest_entry(u, &entries);
            gain += dot(z, entries.row(j));
        }
        let gain = (gain / n as f64).max(0.0);
        let out_proj = in_proj.transpose().scale(gain);

        let book = Codebook {
            layer,
            entries,
            in_proj,
            out_proj,
            ema_counts,
        };
        for r in residuals.iter_mut() {
            let (_, _, new_residual) = quantize_layer(r, &book)?;
            *r = new_residual;
        }
        books.push(book);
    }
    Ok(RvqCodec {
        cfg: cfg.clone(),
        books,
    })
}

/// k-means++ seeding over unit vectors.
fn kmeans_pp_seed(units: &[Vec<f64>], c: usize, rng: &mut SeededRng) -> Matrix {
    let n = units.len();
    let dim = units[0].len();
    let mut entries = Matrix::zeros(c, dim);
    let first = rng.uniform_index(n);
    entries.row_mut(0).copy_from_slice(&units[first]);
    let mut min_d2 = vec![f64::INFINITY; n];
    for j in 1..c {
        let prev = entries.row(j - 1).to_vec();
        for (i, u) in units.iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in u.iter().zip(&prev) {
                let t = a - b;
                d += t * t;
            }
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= NORM_EPS {
            // All points covered; cycle deterministically.
            j % n
        } else {
            let u = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        entries.row_mut(j).copy_from_slice(&units[pick]);
    }
    entries
}

/// Semantic distillation score between the first-layer reconstruction and a
/// teacher feature sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillationLoss {
    /// Mean over frames of 1 - cosine similarity.
    pub cosine: f64,
    /// Mean absolute difference over all entries.
    pub l1: f64,
}

impl DistillationLoss {
    pub fn total(&self, cosine_weight: f64) -> f64 {
        cosine_weight * self.cosine + self.l1
    }
}

pub fn distillation_loss(
    codes: &CodeSequence,
    codec: &RvqCodec,
    teacher: &FeatureSequence,
) -> Result<DistillationLoss> {
    if teacher.n_frames != codes.n_frames {
        return Err(invalid_arg!(
            "teacher has {} frames, codes have {}",
            teacher.n_frames,
            codes.n_frames
        ));
    }
    let recon = decode(codes, codec, 1)?;
    let mut cos_sum = 0.0;
    let mut l1_sum = 0.0;
    for f in 0..codes.n_frames {
        let r = recon.frame(f);
        let t = teacher.frame(f);
        let denom = (l2_norm(r) * l2_norm(t)).max(NORM_EPS);
        cos_sum += 1.0 - dot(r, t) / denom;
        for (a, b) in r.iter().zip(t) {
            l1_sum += (a - b).abs();
        }
    }
    let n_entries = (codes.n_frames * teacher.feature_dim) as f64;
    Ok(DistillationLoss {
        cosine: cos_sum / codes.n_frames as f64,
        l1: l1_sum / n_entries,
    })
}

/// Mean squared reconstruction error of an `n_layers` prefix.
pub fn reconstruction_mse(
    feat: &FeatureSequence,
    codes: &CodeSequence,
    codec: &RvqCodec,
    n_layers: usize,
) -> Result<f64> {
    let recon = decode(codes, codec, n_layers)?;
    let mut sum = 0.0;
    for f in 0..feat.n_frames {
        for (a, b) in feat.frame(f).iter().zip(recon.frame(f)) {
            let d = a - b;
            sum += d * d;
        }
    }
    Ok(sum / (feat.n_frames * feat.feature_dim) as f64)
}
