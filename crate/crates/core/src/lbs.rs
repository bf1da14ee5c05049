//! Layer beam search over the non-autoregressive predictor: each RVQ layer
//! is filled by sampling per-position from the top-K re-softmaxed values,
//! candidates scored by their mean full-vocabulary log-probability, keeping
//! the global top beam. Includes the greedy baseline and an exhaustive
//! oracle for tiny instances.

use crate::error::Result;
use crate::invalid_arg;
use crate::model::{nar_layer_logits, NarPredictor};
use crate::numerics::{categorical_sample, log_softmax, softmax, top_k_select, SeededRng};
use crate::rvq::CodeSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct LbsConfig {
    pub n_codebook: usize,
    pub beam_size: usize,
    pub n_sample: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for LbsConfig {
    fn default() -> Self {
        LbsConfig {
            n_codebook: 16,
            beam_size: 10,
            n_sample: 20,
            top_k: 3,
            seed: 0,
        }
    }
}

impl LbsConfig {
    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        if self.beam_size == 0 || self.n_sample == 0 {
            return Err(invalid_arg!("beam_size and n_sample must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > codebook_size {
            return Err(invalid_arg!(
                "top_k {} outside 1..={codebook_size}",
                self.top_k
            ));
        }
        if self.n_codebook == 0 {
            return Err(invalid_arg!("n_codebook must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbsBeamEntry {
    pub codes: CodeSequence,
    /// Accumulated per-layer mean log-probability.
    pub total_score: f64,
}

fn argmax_row(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Fills layers 1..n_codebook-1 by per-position argmax, ties toward the
/// smaller index.
pub fn greedy_generate(
    first_layer: &CodeSequence,
    prompt: &CodeSequence,
    model: &NarPredictor,
    n_codebook: usize,
) -> Result<CodeSequence> {
    if first_layer.n_layers != 1 {
        return Err(invalid_arg!(
            "first_layer must have exactly 1 layer, got {}",
            first_layer.n_layers
        ));
    }
    let mut codes = first_layer.clone();
    for n in 1..n_codebook {
        let logits = nar_layer_logits(&codes, prompt, n, model)?;
        let layer: Vec<u32> = (0..codes.n_frames)
            .map(|f| argmax_row(logits.row(f)))
            .collect();
        codes.push_layer(&layer);
    }
    Ok(codes)
}

/// One layer of beam expansion: `beam` entries hold layers 0..n, the new beam
/// holds layers 0..=n. Sampling draws come from child streams of `rng`
/// indexed by (beam entry, sample index), so results are independent of
/// evaluation order.
pub fn lbs_step(
    beam: &[LbsBeamEntry],
    layer: usize,
    prompt: &CodeSequence,
    model: &NarPredictor,
    cfg: &LbsConfig,
    rng: &SeededRng,
) -> Result<Vec<LbsBeamEntry>> {
    if beam.is_empty() {
        return Err(invalid_arg!("empty beam"));
    }
    let mut candidates: Vec<LbsBeamEntry> = Vec::with_capacity(beam.len() * cfg.n_sample);
    for (bi, entry) in beam.iter().enumerate() {
        let logits = nar_layer_logits(&entry.codes, prompt, layer, model)?;
        let n_frames = entry.codes.n_frames;
        // Per position: full-vocabulary log-probs for scoring, top-K
        // re-softmaxed values for sampling.
        let mut lprobs = Vec::with_capacity(n_frames);
        let mut topk_ids = Vec::with_capacity(n_frames);
        let mut topk_probs = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let row = logits.row(f);
            lprobs.push(log_softmax(row)?);
            let ids = top_k_select(row, cfg.top_k)?;
            let vals: Vec<f64> = ids.iter().map(|&i| row[i]).collect();
            topk_probs.push(softmax(&vals)?);
            topk_ids.push(ids);
        }
        let entry_rng = rng.child(bi as u64);
        for s in 0..cfg.n_sample {
            let mut sample_rng = entry_rng.child(s as u64);
            let mut layer_codes = Vec::with_capacity(n_frames);
            let mut score_sum = 0.0;
            for f in 0..n_frames {
                let pick = categorical_sample(&topk_probs[f], &mut sample_rng)?;
                let id = topk_ids[f][pick];
                layer_codes.push(id as u32);
                score_sum += lprobs[f][id];
            }
            let mut codes = entry.codes.clone();
            codes.push_layer(&layer_codes);
            candidates.push(LbsBeamEntry {
                codes,
                total_score: entry.total_score + score_sum / n_frames as f64,
            });
        }
    }
    // Global top beam_size; ties resolved by generation order.
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .total_score
            .partial_cmp(&candidates[a].total_score)
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(cfg.beam_size);
    Ok(order.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Full layer beam search: n_codebook - 1 expansion steps starting from the
/// given first layer; returns the best entry's codes.
pub fn lbs_generate(
    first_layer: &CodeSequence,
    prompt: &CodeSequence,
    model: &NarPredictor,
    cfg: &LbsConfig,
) -> Result<CodeSequence> {
    cfg.validate(model.dims.codebook_size)?;
    if first_layer.n_layers != 1 {
        return Err(invalid_arg!(
            "first_layer must have exactly 1 layer, got {}",
            first_layer.n_layers
        ));
    }
    let mut beam = vec![LbsBeamEntry {
        codes: first_layer.clone(),
        total_score: 0.0,
    }];
    let root = SeededRng::new(cfg.seed, 0x4c4253);
    for layer in 1..cfg.n_codebook {
        beam = lbs_step(&beam, layer, prompt, model, cfg, &root.child(layer as u64))?;
    }
    Ok(beam[0].codes.clone())
}

/// Like [`lbs_generate`] but returns the whole final beam.
pub fn lbs_generate_beam(
    first_layer: &CodeSequence,
    prompt: &CodeSequence,
    model: &NarPredictor,
    cfg: &LbsConfig,
) -> Result<Vec<LbsBeamEntry>> {
    cfg.validate(model.dims.codebook_size)?;
    let mut beam = vec![LbsBeamEntry {
        codes: first_layer.clone(),
        total_score: 0.0,
    }];
    let root = SeededRng::new(cfg.seed, 0x4c4253);
    for layer in 1..cfg.n_codebook {
        beam = lbs_step(&beam, layer, prompt, model, cfg, &root.child(layer as u64))?;
    }
    Ok(beam)
}

/// Exhaustively maximizes accumulated mean log-probability over all fillings
/// of layers 1..n_codebook-1. Intermediate layers are enumerated outright;
/// the final layer is separable and solved by per-position argmax.
pub fn exhaustive_nar_oracle(
    first_layer: &CodeSequence,
    prompt: &CodeSequence,
    model: &NarPredictor,
    n_codebook: usize,
) -> Result<(CodeSequence, f64)> {
    if first_layer.n_layers != 1 {
        return Err(invalid_arg!("first_layer must have exactly 1 layer"));
    }
    if n_codebook > 3 {
        return Err(invalid_arg!("oracle limited to 3 layers, got {n_codebook}"));
    }
    let c = model.dims.codebook_size;
    let l = first_layer.n_frames;
    let per_layer = (c as f64).powi(l as i32);
    if n_codebook >= 3 && per_layer > 1e5 {
        return Err(invalid_arg!(
            "{per_layer:.0} fillings per layer exceeds 1e5"
        ));
    }
    oracle_rec(first_layer, prompt, model, n_codebook)
}

fn oracle_rec(
    codes: &CodeSequence,
    prompt: &CodeSequence,
    model: &NarPredictor,
    n_codebook: usize,
) -> Result<(CodeSequence, f64)> {
    let layer = codes.n_layers;
    if layer >= n_codebook {
        return Ok((codes.clone(), 0.0));
    }
    let logits = nar_layer_logits(codes, prompt, layer, model)?;
    let n_frames = codes.n_frames;
    let mut lprobs = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        lprobs.push(log_softmax(logits.row(f))?);
    }
    if layer == n_codebook - 1 {
        // Final layer: mean log-prob is separable across positions.
        let mut best = codes.clone();
        let mut sum = 0.0;
        let mut layer_codes = Vec::with_capacity(n_frames);
        for lp in &lprobs {
            let idx = argmax_row(lp);
            layer_codes.push(idx);
            sum += lp[idx as usize];
        }
        best.push_layer(&layer_codes);
        return Ok((best, sum / n_frames as f64));
    }
    let c = model.dims.codebook_size;
    let mut best: Option<(CodeSequence, f64)> = None;
    let mut filling = vec![0u32; n_frames];
    loop {
        let mut here = 0.0;
        for (f, &id) in filling.iter().enumerate() {
            here += lprobs[f][id as usize];
        }
        let mut next = codes.clone();
        next.push_layer(&filling);
        let (full, rest) = oracle_rec(&next, prompt, model, n_codebook)?;
        let total = here / n_frames as f64 + rest;
        match &best {
            Some((_, b)) if *b >= total => {}
            _ => best = Some((full, total)),
        }
        // Odometer increment over the C^L fillings.
        let mut pos = 0;
        loop {
            if pos == n_frames {
                return Ok(best.unwrap());
            }
            filling[pos] += 1;
            if (filling[pos] as usize) < c {
                break;
            }
            filling[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NarDims;

    fn dims(c: usize, n_layers: usize) -> NarDims {
        NarDims {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_blocks: 1,
            n_codec_layers: n_layers,
            codebook_size: c,
        }
    }

    fn instance(
        seed: u64,
        c: usize,
        n_layers: usize,
        frames: usize,
    ) -> (NarPredictor, CodeSequence) {
        let model = NarPredictor::init(seed, &dims(c, n_layers));
        let mut rng = SeededRng::new(seed, 99);
        let mut first = CodeSequence::new(1, frames);
        for f in 0..frames {
            first.set(0, f, rng.uniform_index(c) as u32);
        }
        (model, first)
    }

    #[test]
    fn greedy_single_layer_unchanged() {
        let (model, first) = instance(1, 8, 4, 5);
        let prompt = CodeSequence::new(4, 0);
        let out = greedy_generate(&first, &prompt, &model, 1).unwrap();
        assert_eq!(out, first);
    }

    #[test]
    fn greedy_argmax_scan_oracle() {
        let (model, first) = instance(2, 8, 3, 4);
        let prompt = CodeSequence::new(3, 0);
        let out = greedy_generate(&first, &prompt, &model, 3).unwrap();
        let mut codes = first.clone();
        for n in 1..3 {
            let logits = nar_layer_logits(&codes, &prompt, n, &model).unwrap();
            let mut layer = Vec::new();
            for f in 0..4 {
                let row = logits.row(f);
                let mut best = 0;
                for i in 1..8 {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                layer.push(best as u32);
                assert_eq!(out.get(n, f), best as u32);
            }
            codes.push_layer(&layer);
        }
    }

    #[test]
    fn greedy_deterministic() {
        let (model, first) = instance(3, 8, 4, 5);
        let prompt = CodeSequence::new(4, 0);
        let a = greedy_generate(&first, &prompt, &model, 4).unwrap();
        let b = greedy_generate(&first, &prompt, &model, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_equivalence() {
        for seed in 0..20 {
            let (model, first) = instance(seed, 16, 4, 8);
            let prompt = CodeSequence::new(4, 0);
            let cfg = LbsConfig {
                n_codebook: 4,
                beam_size: 1,
                n_sample: 1,
                top_k: 1,
                seed,
            };
            let lbs = lbs_generate(&first, &prompt, &model, &cfg).unwrap();
            let greedy = greedy_generate(&first, &prompt, &model, 4).unwrap();
            assert_eq!(lbs, greedy, "seed {seed}");
        }
    }

    #[test]
    fn lbs_deterministic() {
        let (model, first) = instance(5, 8, 4, 5);
        let prompt = CodeSequence::new(4, 0);
        let cfg = LbsConfig {
            n_codebook: 4,
            beam_size: 4,
            n_sample: 6,
            top_k: 3,
            seed: 11,
        };
        let a = lbs_generate_beam(&first, &prompt, &model, &cfg).unwrap();
        let b = lbs_generate_beam(&first, &prompt, &model, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beam_sorted_and_sized() {
        let (model, first) = instance(7, 8, 4, 5);
        let prompt = CodeSequence::new(4, 0);
        let cfg = LbsConfig {
            n_codebook: 4,
            beam_size: 5,
            n_sample: 8,
            top_k: 3,
            seed: 3,
        };
        let beam = lbs_generate_beam(&first, &prompt, &model, &cfg).unwrap();
        assert_eq!(beam.len(), 5);
        for w in beam.windows(2) {
            assert!(w[0].total_score >= w[1].total_score);
        }
    }

    #[test]
    fn sampled_tokens_within_top_k() {
        let (model, first) = instance(9, 8, 2, 4);
        let prompt = CodeSequence::new(2, 0);
        let cfg = LbsConfig {
            n_codebook: 2,
            beam_size: 10,
            n_sample: 20,
            top_k: 3,
            seed: 4,
        };
        let beam = vec![LbsBeamEntry {
            codes: first.clone(),
            total_score: 0.0,
        }];
        let rng = SeededRng::new(4, 1);
        let out = lbs_step(&beam, 1, &prompt, &model, &cfg, &rng).unwrap();
        let logits = nar_layer_logits(&first, &prompt, 1, &model).unwrap();
        for entry in &out {
            for f in 0..4 {
                let ids = top_k_select(logits.row(f), 3).unwrap();
                assert!(ids.contains(&(entry.codes.get(1, f) as usize)));
            }
        }
    }

    #[test]
    fn total_score_accumulates_mean_lprobs() {
        let (model, first) = instance(13, 8, 3, 4);
        let prompt = CodeSequence::new(3, 0);
        let cfg = LbsConfig {
            n_codebook: 3,
            beam_size: 3,
            n_sample: 5,
            top_k: 2,
            seed: 8,
        };
        let beam = lbs_generate_beam(&first, &prompt, &model, &cfg).unwrap();
        for entry in &beam {
            let mut expect = 0.0;
            for n in 1..3 {
                let logits =
                    nar_layer_logits(&entry.codes.prefix_layers(n), &prompt, n, &model).unwrap();
                for f in 0..4 {
                    let lp = log_softmax(logits.row(f)).unwrap();
                    expect += lp[entry.codes.get(n, f) as usize] / 4.0;
                }
            }
            assert!((entry.total_score - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_bounds_lbs() {
        for seed in 0..10 {
            let (model, first) = instance(seed, 5, 2, 4);
            let prompt = CodeSequence::new(2, 0);
            let (_, oracle_score) = exhaustive_nar_oracle(&first, &prompt, &model, 2).unwrap();
            let cfg = LbsConfig {
                n_codebook: 2,
                beam_size: 4,
                n_sample: 10,
                top_k: 3,
                seed,
            };
            let beam = lbs_generate_beam(&first, &prompt, &model, &cfg).unwrap();
            for e in &beam {
                assert!(e.total_score <= oracle_score + 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn oracle_three_layers_brute_force() {
        // Cross-check the recursive oracle against flat enumeration of all
        // C^L x C^L fillings on a tiny instance.
        let (model, first) = instance(17, 3, 3, 2);
        let prompt = CodeSequence::new(3, 0);
        let (best, score) = exhaustive_nar_oracle(&first, &prompt, &model, 3).unwrap();
        let mut flat_best = f64::NEG_INFINITY;
        let mut flat_codes = None;
        for a0 in 0..3u32 {
            for a1 in 0..3u32 {
                let mut c1 = first.clone();
                c1.push_layer(&[a0, a1]);
                let logits1 = nar_layer_logits(&first, &prompt, 1, &model).unwrap();
                let mut s1 = 0.0;
                for (f, &id) in [a0, a1].iter().enumerate() {
                    s1 += log_softmax(logits1.row(f)).unwrap()[id as usize];
                }
                for b0 in 0..3u32 {
                    for b1 in 0..3u32 {
                        let logits2 = nar_layer_logits(&c1, &prompt, 2, &model).unwrap();
                        let mut s2 = 0.0;
                        for (f, &id) in [b0, b1].iter().enumerate() {
                            s2 += log_softmax(logits2.row(f)).unwrap()[id as usize];
                        }
                        let total = s1 / 2.0 + s2 / 2.0;
                        if total > flat_best {
                            flat_best = total;
                            let mut c2 = c1.clone();
                            c2.push_layer(&[b0, b1]);
                            flat_codes = Some(c2);
                        }
                    }
                }
            }
        }
        assert!((score - flat_best).abs() < 1e-9);
        assert_eq!(best, flat_codes.unwrap());
    }

    #[test]
    fn oracle_rejects_large_space() {
        let (model, first) = instance(19, 64, 3, 8);
        let prompt = CodeSequence::new(3, 0);
        assert!(exhaustive_nar_oracle(&first, &prompt, &model, 3).is_err());
        let (model4, first4) = instance(19, 4, 4, 2);
        let prompt4 = CodeSequence::new(4, 0);
        assert!(exhaustive_nar_oracle(&first4, &prompt4, &model4, 4).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let (model, first) = instance(21, 8, 2, 3);
        let prompt = CodeSequence::new(2, 0);
        let bad = LbsConfig {
            top_k: 9,
            ..LbsConfig::default()
        };
        assert!(lbs_generate(&first, &prompt, &model, &bad).is_err());
        let bad = LbsConfig {
            beam_size: 0,
            ..LbsConfig::default()
        };
        assert!(lbs_generate(&first, &prompt, &model, &bad).is_err());
    }
}
