//! Multi-task training example construction: routing speech/text pairs into
//! labeled sequences over the combined vocabulary, loss masking over prompt
//! regions and source-text spans, prompt clipping, and acoustic dropout.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::invalid_arg;
use crate::iso::{IsochronyTrack, CODEC_TOKENS_PER_FRAME};
use crate::model::VocabLayout;
use crate::numerics::SeededRng;
use crate::rvq::{CodeSequence, FeatureSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleKind {
    S2stFwd,
    S2stRev,
    StFwd,
    StRev,
    AsrAsTts,
}

impl ExampleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExampleKind::S2stFwd => "s2st-fwd",
            ExampleKind::S2stRev => "s2st-rev",
            ExampleKind::StFwd => "st-fwd",
            ExampleKind::StRev => "st-rev",
            ExampleKind::AsrAsTts => "asr-as-tts",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleInput {
    Text(Vec<u32>),
    Features(FeatureSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub kind: ExampleKind,
    pub input: ExampleInput,
    pub iso: Option<IsochronyTrack>,
    pub acoustic_prompt: Option<FeatureSequence>,
    pub label: Vec<u32>,
    /// True where the position contributes to the loss.
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| !m).count()
    }
}

fn codec_label(text: &[u32], codes: &CodeSequence, layout: &VocabLayout) -> Result<Vec<u32>> {
    let mut label = Vec::with_capacity(text.len() + 2 + codes.n_frames);
    for &t in text {
        if !layout.is_text(t) {
            return Err(invalid_arg!("text token {t} outside text range"));
        }
        label.push(t);
    }
    label.push(layout.sep_id());
    for f in 0..codes.n_frames {
        let c = codes.get(0, f);
        if c as usize >= layout.codebook_size {
            return Err(invalid_arg!("code {c} outside codebook"));
        }
        label.push(layout.codec_token(c));
    }
    label.push(layout.eos_id());
    Ok(label)
}

fn check_region(region: &Range<usize>, n_frames: usize) -> Result<()> {
    if region.start > region.end || region.end > n_frames {
        return Err(invalid_arg!(
            "prompt region {}..{} outside 0..{n_frames}",
            region.start,
            region.end
        ));
    }
    Ok(())
}

/// Isochrony track covering a codec-frame count: one 160 ms frame per 8
/// codec tokens, all frames marked active (code grids carry no energy).
pub fn iso_from_codec_frames(n_codec_frames: usize) -> IsochronyTrack {
    IsochronyTrack::active(n_codec_frames.div_ceil(CODEC_TOKENS_PER_FRAME))
}

fn build_s2st_directed(
    input_feat: &FeatureSequence,
    target_text: &[u32],
    target_codes: &CodeSequence,
    target_feat: &FeatureSequence,
    prompt_region: Range<usize>,
    kind: ExampleKind,
    layout: &VocabLayout,
) -> Result<TrainingExample> {
    if target_codes.n_frames == 0 {
        return Err(invalid_arg!("empty target codes"));
    }
    if target_feat.n_frames != target_codes.n_frames {
        return Err(invalid_arg!(
            "target features have {} frames, codes {}",
            target_feat.n_frames,
            target_codes.n_frames
        ));
    }
    check_region(&prompt_region, target_codes.n_frames)?;
    let label = codec_label(target_text, target_codes, layout)?;
    let mut loss_mask = vec![true; label.len()];
    // Codec frame f sits at label position |text| + 1 + f.
    let codec_base = target_text.len() + 1;
    for f in prompt_region.clone() {
        loss_mask[codec_base + f] = false;
    }
    let acoustic_prompt = if prompt_region.is_empty() {
        None
    } else {
        Some(target_feat.slice(prompt_region.start, prompt_region.end))
    };
    Ok(TrainingExample {
        kind,
        input: ExampleInput::Features(input_feat.clone()),
        iso: Some(iso_from_codec_frames(target_codes.n_frames)),
        acoustic_prompt,
        label,
        loss_mask,
    })
}

/// Speech-to-speech example from a (X, Ts, Tt, Y) quadruple. Forward maps
/// source speech to target text + codec; reverse swaps the two sides.
#[allow(clippy::too_many_arguments)]
pub fn build_example_s2st(
    x_feat: &FeatureSequence,
    x_codes: &CodeSequence,
    ts_tokens: &[u32],
    y_feat: &FeatureSequence,
    y_codes: &CodeSequence,
    tt_tokens: &[u32],
    prompt_region: Range<usize>,
    direction: Direction,
    layout: &VocabLayout,
) -> Result<TrainingExample> {
    match direction {
        Direction::Forward => build_s2st_directed(
            x_feat,
            tt_tokens,
            y_codes,
            y_feat,
            prompt_region,
            ExampleKind::S2stFwd,
            layout,
        ),
        Direction::Reverse => build_s2st_directed(
            y_feat,
            ts_tokens,
            x_codes,
            x_feat,
            prompt_region,
            ExampleKind::S2stRev,
            layout,
        ),
    }
}

/// Speech-to-text example: the label is text terminated by SEP, no codec
/// segment, no isochrony, no acoustic prompt.
pub fn build_example_st(
    x_feat: &FeatureSequence,
    ts_tokens: &[u32],
    tt_tokens: &[u32],
    direction: Direction,
    layout: &VocabLayout,
) -> Result<TrainingExample> {
    let (input, target, kind) = match direction {
        Direction::Forward => (
            ExampleInput::Features(x_feat.clone()),
            tt_tokens,
            ExampleKind::StFwd,
        ),
        Direction::Reverse => (
            ExampleInput::Text(tt_tokens.to_vec()),
            ts_tokens,
            ExampleKind::StRev,
        ),
    };
    let mut label = Vec::with_capacity(target.len() + 1);
    for &t in target {
        if !layout.is_text(t) {
            return Err(invalid_arg!("text token {t} outside text range"));
        }
        label.push(t);
    }
    label.push(layout.sep_id());
    let loss_mask = vec![true; label.len()];
    Ok(TrainingExample {
        kind,
        input,
        iso: None,
        acoustic_prompt: None,
        label,
        loss_mask,
    })
}

/// ASR data used as a text-to-speech task: source text in, source text plus
/// source codec out, with the loss masked over the echoed text span and the
/// prompt region. No recognition-direction example exists.
pub fn build_example_asr(
    x_feat: &FeatureSequence,
    x_codes: &CodeSequence,
    ts_tokens: &[u32],
    prompt_region: Range<usize>,
    layout: &VocabLayout,
) -> Result<TrainingExample> {
    if x_codes.n_frames == 0 {
        return Err(invalid_arg!("empty source codes"));
    }
    if x_feat.n_frames != x_codes.n_frames {
        return Err(invalid_arg!(
            "features have {} frames, codes {}",
            x_feat.n_frames,
            x_codes.n_frames
        ));
    }
    check_region(&prompt_region, x_codes.n_frames)?;
    let label = codec_label(ts_tokens, x_codes, layout)?;
    let mut loss_mask = vec![true; label.len()];
    for m in loss_mask.iter_mut().take(ts_tokens.len()) {
        *m = false;
    }
    let codec_base = ts_tokens.len() + 1;
    for f in prompt_region.clone() {
        loss_mask[codec_base + f] = false;
    }
    let acoustic_prompt = if prompt_region.is_empty() {
        None
    } else {
        Some(x_feat.slice(prompt_region.start, prompt_region.end))
    };
    Ok(TrainingExample {
        kind: ExampleKind::AsrAsTts,
        input: ExampleInput::Text(ts_tokens.to_vec()),
        iso: Some(iso_from_codec_frames(x_codes.n_frames)),
        acoustic_prompt,
        label,
        loss_mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPurpose {
    Joint,
    Nar,
}

impl PromptPurpose {
    /// Frame cap at 50 frames per second: 10 s for the joint model, 5 s for
    /// the layer predictor.
    pub fn max_frames(&self) -> usize {
        match self {
            PromptPurpose::Joint => 500,
            PromptPurpose::Nar => 250,
        }
    }
}

/// First `min(cap, n)` frames; short inputs pass through whole.
pub fn clip_prompt(feat: &FeatureSequence, purpose: PromptPurpose) -> Result<FeatureSequence> {
    if feat.n_frames == 0 {
        return Err(invalid_arg!("empty prompt"));
    }
    let n = feat.n_frames.min(purpose.max_frames());
    Ok(feat.slice(0, n))
}

pub const ACOUSTIC_DROPOUT_P: f64 = 0.5;

/// Removes the acoustic prompt with probability `p`, decided per example
/// with exactly one draw; SEP then keeps its own embedding downstream.
pub fn acoustic_dropout_p(
    mut example: TrainingExample,
    p: f64,
    rng: &mut SeededRng,
) -> TrainingExample {
    if rng.next_f64() < p {
        example.acoustic_prompt = None;
    }
    example
}

pub fn acoustic_dropout(example: TrainingExample, rng: &mut SeededRng) -> TrainingExample {
    acoustic_dropout_p(example, ACOUSTIC_DROPOUT_P, rng)
}

/// Default prompt-region sampler: uniform start, length = min(3 s, half the
/// utterance).
pub fn sample_prompt_region(n_frames: usize, rng: &mut SeededRng) -> Range<usize> {
    if n_frames < 2 {
        return 0..0;
    }
    let len = (n_frames / 2).min(150);
    let start = rng.uniform_index(n_frames - len + 1);
    start..start + len
}

/// One manifest line: file-backed example description with a pseudo-label
/// confidence used for filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub kind: String,
    pub src_features: String,
    #[serde(default)]
    pub src_codes: Option<String>,
    #[serde(default)]
    pub tgt_features: Option<String>,
    #[serde(default)]
    pub tgt_codes: Option<String>,
    #[serde(default)]
    pub src_text: Vec<u32>,
    #[serde(default)]
    pub tgt_text: Vec<u32>,
    #[serde(default)]
    pub prompt_start: usize,
    #[serde(default)]
    pub prompt_len: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    1.0
}

impl ManifestRecord {
    pub fn prompt_region(&self) -> Range<usize> {
        self.prompt_start..self.prompt_start + self.prompt_len
    }
}

/// Reads a JSON-lines manifest, dropping records below `min_confidence`.
pub fn read_manifest(path: &Path, min_confidence: f64) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| invalid_arg!("manifest line {}: {e}", i + 1))?;
        if rec.confidence >= min_confidence {
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| invalid_arg!("serialize: {e}"))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}
