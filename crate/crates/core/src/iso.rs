//! Isochrony control features: 160 ms frame tracks with VAD bits, regular
//! and reversed position indices, plus duration-compliance metrics.

use crate::error::Result;
use crate::invalid_arg;
use crate::numerics::Matrix;
use crate::rvq::FeatureSequence;

/// Frame length used for isochrony, in seconds.
pub const FRAME_SECONDS: f64 = 0.16;
/// Samples per isochrony frame at 16 kHz.
pub const FRAME_SAMPLES: usize = 2560;
/// Codec tokens (50 Hz) per isochrony frame.
pub const CODEC_TOKENS_PER_FRAME: usize = 8;
/// VAD threshold relative to the peak window RMS (-40 dB).
pub const VAD_RELATIVE_THRESHOLD: f64 = 0.01;
/// Absolute RMS floor (full scale = 1.0).
pub const VAD_ABSOLUTE_FLOOR: f64 = 1e-4;

/// Per-frame VAD bits; positions are implicit (`pos[i] = i`,
/// `rpos[i] = n_frames - 1 - i`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsochronyTrack {
    pub vad: Vec<bool>,
}

impl IsochronyTrack {
    pub fn new(vad: Vec<bool>) -> Self {
        IsochronyTrack { vad }
    }

    /// All-active track of the given length.
    pub fn active(n_frames: usize) -> Self {
        IsochronyTrack {
            vad: vec![true; n_frames],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.vad.len()
    }

    pub fn pos(&self, i: usize) -> usize {
        i
    }

    pub fn rpos(&self, i: usize) -> usize {
        self.vad.len() - 1 - i
    }

    pub fn from_pcm(pcm: &[i16]) -> Result<Self> {
        Ok(IsochronyTrack {
            vad: vad_frames(pcm)?,
        })
    }
}

/// The three embedding tables of the isochrony control module.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoEmbeddings {
    pub pos: Matrix,  // max_frames × d
    pub rpos: Matrix, // max_frames × d
    pub vad: Matrix,  // 2 × d
}

impl IsoEmbeddings {
    pub fn dim(&self) -> usize {
        self.pos.cols()
    }

    pub fn capacity(&self) -> usize {
        self.pos.rows()
    }
}

/// Number of 160 ms frames covering a duration; partial frames count.
pub fn duration_frames(duration_s: f64) -> Result<usize> {
    if !(duration_s > 0.0) {
        return Err(invalid_arg!("non-positive duration {duration_s}"));
    }
    // Guard against f64 quotients landing epsilon above an integer
    // (e.g. 1.6 / 0.16).
    let f = duration_s / FRAME_SECONDS;
    Ok(((f - 1e-9).ceil() as usize).max(1))
}

/// Energy-threshold VAD over 160 ms windows: active iff the window RMS
/// exceeds both -40 dB relative to the peak window and an absolute floor.
/// The trailing partial window is zero-padded.
pub fn vad_frames(pcm: &[i16]) -> Result<Vec<bool>> {
    if pcm.is_empty() {
        return Err(invalid_arg!("empty pcm"));
    }
    let n_windows = pcm.len().div_ceil(FRAME_SAMPLES);
    let mut rms = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let start = w * FRAME_SAMPLES;
        let end = (start + FRAME_SAMPLES).min(pcm.len());
        let mut acc = 0.0f64;
        for &s in &pcm[start..end] {
            let x = s as f64 / 32768.0;
            acc += x * x;
        }
        rms.push((acc / FRAME_SAMPLES as f64).sqrt());
    }
    let peak = rms.iter().cloned().fold(0.0f64, f64::max);
    let threshold = (peak * VAD_RELATIVE_THRESHOLD).max(VAD_ABSOLUTE_FLOOR);
    Ok(rms.into_iter().map(|r| r > threshold).collect())
}

/// Per-frame sum of the three embedding lookups.
pub fn build_icm_features(
    track: &IsochronyTrack,
    tables: &IsoEmbeddings,
) -> Result<FeatureSequence> {
    let n = track.n_frames();
    if n > tables.capacity() {
        return Err(invalid_arg!(
            "{n} frames exceed embedding capacity {}",
            tables.capacity()
        ));
    }
    let d = tables.dim();
    let mut frames = Matrix::zeros(n, d);
    for i in 0..n {
        let p = tables.pos.row(track.pos(i));
        let r = tables.rpos.row(track.rpos(i));
        let v = tables.vad.row(track.vad[i] as usize);
        let row = frames.row_mut(i);
        for j in 0..d {
            row[j] = p[j] + r[j] + v[j];
        }
    }
    Ok(FeatureSequence::new(frames))
}

/// Speech length compliance: fraction of pairs whose generated/source
/// duration ratio lies within `[1-p, 1+p]` (inclusive).
pub fn slc(durations_src: &[f64], durations_gen: &[f64], p: f64) -> Result<f64> {
    if durations_src.len() != durations_gen.len() {
        return Err(invalid_arg!(
            "length mismatch: {} src vs {} gen",
            durations_src.len(),
            durations_gen.len()
        ));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid_arg!("p must be in (0, 1), got {p}"));
    }
    if durations_src.is_empty() {
        return Err(invalid_arg!("empty duration lists"));
    }
    let compliant = durations_src
        .iter()
        .zip(durations_gen)
        .filter(|(s, g)| {
            let ratio = *g / *s;
            ratio >= 1.0 - p && ratio <= 1.0 + p
        })
        .count();
    Ok(compliant as f64 / durations_src.len() as f64)
}

/// Number of maximal inactive runs strictly inside the active span.
/// Leading and trailing silence do not count as pauses.
pub fn pause_count(vad: &[bool]) -> usize {
    let first = match vad.iter().position(|&v| v) {
        Some(i) => i,
        None => return 0,
    };
    let last = vad.iter().rposition(|&v| v).unwrap();
    let mut count = 0;
    let mut in_pause = false;
    for &v in &vad[first..=last] {
        if !v {
            if !in_pause {
                count += 1;
            }
            in_pause = true;
        } else {
            in_pause = false;
        }
    }
    count
}
