//! Batch command line for the translation pipeline: codec fitting and
//! coding, joint translation search, layer-wise refinement, duration
//! metrics, data-pipeline reports, and a self-test oracle suite.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use tvip::data::{self, Direction, PromptPurpose};
use tvip::formats;
use tvip::iso::{self, IsochronyTrack};
use tvip::joint::{beam_search_joint, BeamConfig};
use tvip::lbs::{greedy_generate, lbs_generate, LbsConfig};
use tvip::model::{init_toy_model, JointScorer, NarDims, NarPredictor, ToyDims, VocabLayout};
use tvip::numerics::SeededRng;
use tvip::rvq::{self, CodeSequence, FeatureSequence, RvqCodec, RvqConfig};

#[derive(Parser)]
#[command(
    name = "tvip",
    about = "Deterministic desk-scale speech translation pipeline",
    version
)]
struct Cli {
    /// key=value config file; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; falls back to the TVIP_SEED environment variable, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for frame-parallel operations (default 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit, encode with, or decode with an RVQ codec.
    Codec {
        #[command(subcommand)]
        cmd: CodecCmd,
    },
    /// Joint text-then-codec beam search over a feature file.
    Translate(TranslateArgs),
    /// Fill RVQ layers 1..N-1 from a first-layer code file.
    Nar(NarArgs),
    /// Duration-compliance and pause metrics.
    Metrics(MetricsArgs),
    /// Data-pipeline operations.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Run the built-in oracle suites; nonzero exit on any failure.
    Selftest,
}

#[derive(Subcommand)]
enum CodecCmd {
    Fit(CodecFitArgs),
    Encode(CodecEncodeArgs),
    Decode(CodecDecodeArgs),
}

#[derive(Args)]
struct CodecFitArgs {
    /// Training feature files (SASF).
    #[arg(long, required = true, num_args = 1..)]
    features: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// RVQ layers (default 16).
    #[arg(long)]
    layers: Option<usize>,
    /// Codebook size (default 256).
    #[arg(long)]
    codebook_size: Option<usize>,
    /// Factorized lookup dimension (default 8).
    #[arg(long)]
    code_dim: Option<usize>,
    /// k-means iterations (default 10).
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct CodecEncodeArgs {
    /// Input feature file (SASF).
    #[arg(long, conflicts_with = "pcm")]
    features: Option<PathBuf>,
    /// Raw headerless 16-bit little-endian mono 16 kHz PCM input.
    #[arg(long)]
    pcm: Option<PathBuf>,
    /// Fitted codec file (SASB).
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Layers to encode (default: all fitted layers).
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args)]
struct CodecDecodeArgs {
    /// Input code file (SASQ).
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Layers to use (default: all present).
    #[arg(long)]
    layers: Option<usize>,
    /// Reference features; when given, reconstruction MSE is printed.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Semantic feature file (SASF).
    #[arg(long)]
    features: PathBuf,
    /// Model weights (TVTM); absent means seed-initialized weights.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Acoustic prompt features (SASF), sum-pooled and injected at SEP.
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Output code file for the best hypothesis's codec tokens.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Isochrony track of this many all-active 160 ms frames.
    #[arg(long)]
    iso_frames: Option<usize>,
    /// Force the codec segment to exactly iso-frames x 8 tokens.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_text: Option<usize>,
    #[arg(long)]
    max_codec: Option<usize>,
    /// Text vocabulary size for seed-initialized models (default 16).
    #[arg(long)]
    n_text: Option<usize>,
    /// Codebook size for seed-initialized models (default 256).
    #[arg(long)]
    codebook_size: Option<usize>,
}

#[derive(Args)]
struct NarArgs {
    /// First-layer code file (SASQ, 1 layer).
    #[arg(long)]
    codes: PathBuf,
    /// Model weights (TVTM); absent means seed-initialized weights.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Full-depth prompt code file (SASQ).
    #[arg(long)]
    prompt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-position argmax instead of layer beam search.
    #[arg(long)]
    greedy: bool,
    /// Total RVQ layers (default 16).
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Source durations, one seconds value per line.
    #[arg(long)]
    src: PathBuf,
    /// Generated durations, one seconds value per line.
    #[arg(long)]
    gen: PathBuf,
    /// Raw PCM whose pause count should be reported.
    #[arg(long)]
    pcm: Option<PathBuf>,
    /// Machine-readable JSON report path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Build training examples from a JSON-lines manifest and report them.
    Build(DataBuildArgs),
}

#[derive(Args)]
struct DataBuildArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Drop records whose confidence is below this value.
    #[arg(long)]
    min_confidence: Option<f64>,
    /// Acoustic dropout probability (default 0.5).
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// key=value file; '#' starts a comment.
fn load_config(path: Option<&Path>) -> anyhow::Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    let Some(path) = path else {
        return Ok(map);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value", i + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Settings {
    cfg: HashMap<String, String>,
    seed: u64,
    threads: usize,
}

impl Settings {
    fn resolve(cli: &Cli) -> anyhow::Result<Settings> {
        let cfg = load_config(cli.config.as_deref())?;
        let env_seed = std::env::var("TVIP_SEED")
            .ok()
            .map(|s| s.parse::<u64>().context("TVIP_SEED must be an integer"))
            .transpose()?;
        let seed = match cli.seed {
            Some(s) => s,
            None => match cfg.get("seed") {
                Some(s) => s.parse().context("config seed must be an integer")?,
                None => env_seed.unwrap_or(0),
            },
        };
        let threads = pick(cli.threads, &cfg, "threads", 1)?;
        if threads == 0 {
            bail!("threads must be >= 1");
        }
        Ok(Settings { cfg, seed, threads })
    }
}

/// Flag wins over config file, config file over default.
fn pick<T: FromStr + Copy>(
    flag: Option<T>,
    cfg: &HashMap<String, String>,
    key: &str,
    default: T,
) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg.get(key) {
        Some(s) => s.parse().map_err(|e| anyhow!("config key {key}: {e}")),
        None => Ok(default),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::resolve(&cli)?;
    match cli.cmd {
        Cmd::Codec { cmd } => match cmd {
            CodecCmd::Fit(args) => codec_fit(&args, &settings),
            CodecCmd::Encode(args) => codec_encode(&args, &settings),
            CodecCmd::Decode(args) => codec_decode(&args, &settings),
        },
        Cmd::Translate(args) => translate(&args, &settings),
        Cmd::Nar(args) => nar(&args, &settings),
        Cmd::Metrics(args) => metrics(&args, &settings),
        Cmd::Data { cmd } => match cmd {
            DataCmd::Build(args) => data_build(&args, &settings),
        },
        Cmd::Selftest => selftest(),
    }
}

fn codec_fit(args: &CodecFitArgs, s: &Settings) -> anyhow::Result<()> {
    let mut train = Vec::new();
    for path in &args.features {
        train.push(formats::read_features(path).with_context(|| path.display().to_string())?);
    }
    let feature_dim = train[0].feature_dim;
    let cfg = RvqConfig {
        n_layers: pick(args.layers, &s.cfg, "layers", 16)?,
        codebook_size: pick(args.codebook_size, &s.cfg, "codebook_size", 256)?,
        feature_dim,
        code_dim: pick(args.code_dim, &s.cfg, "code_dim", 8.min(feature_dim))?,
        ..RvqConfig::default()
    };
    let iters = pick(args.iters, &s.cfg, "iters", 10)?;
    let mut rng = SeededRng::new(s.seed, 0xf17);
    let codec = rvq::fit_codebooks(&train, &cfg, iters, &mut rng)?;
    formats::write_codec(&args.out, &codec)?;
    println!(
        "fit layers={} codebook_size={} feature_dim={} code_dim={}",
        cfg.n_layers, cfg.codebook_size, cfg.feature_dim, cfg.code_dim
    );
    Ok(())
}

/// Frame-parallel encode over contiguous chunks; identical to the serial
/// result for every thread count because frames are independent.
fn encode_chunked(
    feat: &FeatureSequence,
    codec: &RvqCodec,
    n_layers: usize,
    threads: usize,
) -> anyhow::Result<CodeSequence> {
    if threads <= 1 || feat.n_frames < 2 {
        return Ok(rvq::encode(feat, codec, n_layers)?);
    }
    let chunk = feat.n_frames.div_ceil(threads);
    let mut parts: Vec<CodeSequence> = Vec::new();
    std::thread::scope(|scope| -> anyhow::Result<()> {
        let mut handles = Vec::new();
        for start in (0..feat.n_frames).step_by(chunk) {
            let end = (start + chunk).min(feat.n_frames);
            let slice = feat.slice(start, end);
            handles.push(scope.spawn(move || rvq::encode(&slice, codec, n_layers)));
        }
        for h in handles {
            parts.push(h.join().map_err(|_| anyhow!("encode worker panicked"))??);
        }
        Ok(())
    })?;
    let mut codes = CodeSequence::new(n_layers, feat.n_frames);
    let mut offset = 0;
    for part in &parts {
        for l in 0..n_layers {
            for f in 0..part.n_frames {
                codes.set(l, offset + f, part.get(l, f));
            }
        }
        offset += part.n_frames;
    }
    Ok(codes)
}

fn codec_encode(args: &CodecEncodeArgs, s: &Settings) -> anyhow::Result<()> {
    let codec = formats::read_codec(&args.codec)?;
    let feat = match (&args.features, &args.pcm) {
        (Some(path), None) => formats::read_features(path)?,
        (None, Some(path)) => {
            let pcm = formats::read_pcm(path)?;
            rvq::featurize(&pcm, &codec.cfg)?
        }
        _ => bail!("exactly one of --features or --pcm is required"),
    };
    let n_layers = pick(args.layers, &s.cfg, "layers", codec.books.len())?;
    let codes = encode_chunked(&feat, &codec, n_layers, s.threads)?;
    formats::write_codes(&args.out, &codes, codec.cfg.codebook_size)?;
    println!("encoded frames={} layers={n_layers}", codes.n_frames);
    Ok(())
}

fn codec_decode(args: &CodecDecodeArgs, s: &Settings) -> anyhow::Result<()> {
    let codec = formats::read_codec(&args.codec)?;
    let (codes, _) = formats::read_codes(&args.codes)?;
    let n_layers = pick(args.layers, &s.cfg, "layers", codes.n_layers)?;
    let recon = rvq::decode(&codes, &codec, n_layers)?;
    formats::write_features(&args.out, &recon)?;
    println!("decoded frames={} layers={n_layers}", recon.n_frames);
    if let Some(ref_path) = &args.reference {
        let reference = formats::read_features(ref_path)?;
        let mse = rvq::reconstruction_mse(&reference, &codes, &codec, n_layers)?;
        println!("mse={mse:.9}");
    }
    Ok(())
}

fn load_or_init_model(
    model_path: Option<&Path>,
    seed: u64,
    feature_dim: usize,
    n_text: usize,
    codebook_size: usize,
    n_codec_layers: usize,
) -> anyhow::Result<(JointScorer, NarPredictor)> {
    if let Some(path) = model_path {
        return Ok(formats::read_model(path)?);
    }
    let dims = ToyDims {
        feature_dim,
        ..ToyDims::default()
    };
    let nar_dims = NarDims {
        codebook_size,
        n_codec_layers,
        ..NarDims::default()
    };
    Ok(init_toy_model(
        seed,
        &dims,
        &nar_dims,
        VocabLayout::new(n_text, codebook_size),
    ))
}

fn translate(args: &TranslateArgs, s: &Settings) -> anyhow::Result<()> {
    let feat = formats::read_features(&args.features)?;
    let n_text = pick(args.n_text, &s.cfg, "n_text", 16)?;
    let codebook_size = pick(args.codebook_size, &s.cfg, "codebook_size", 256)?;
    let (scorer, _) = load_or_init_model(
        args.model.as_deref(),
        s.seed,
        feat.feature_dim,
        n_text,
        codebook_size,
        16,
    )?;
    let acoustic = match &args.prompt {
        Some(path) => {
            let prompt = formats::read_features(path)?;
            let prompt = data::clip_prompt(&prompt, PromptPurpose::Joint)?;
            Some(scorer.pool_acoustic(&prompt)?)
        }
        None => None,
    };
    let iso_frames = pick(args.iso_frames, &s.cfg, "iso_frames", 0)?;
    let track = (iso_frames > 0).then(|| IsochronyTrack::active(iso_frames));
    if args.force && track.is_none() {
        bail!("--force requires --iso-frames");
    }
    let cfg = BeamConfig {
        beam_size: pick(args.beam, &s.cfg, "beam", 5)?,
        max_text_len: pick(args.max_text, &s.cfg, "max_text", 8)?,
        max_codec_frames: pick(args.max_codec, &s.cfg, "max_codec", 64)?,
        force_frames: args.force.then_some(iso_frames),
        ..BeamConfig::default()
    };
    let hyps = beam_search_joint(&feat, track.as_ref(), acoustic.as_deref(), &scorer, &cfg)?;
    let best = &hyps[0];
    let layout = scorer.layout;
    let text = best.text_tokens(&layout);
    let codec_tokens = best.codec_tokens(&layout);
    println!(
        "text={}",
        text.iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    println!("codec_tokens={}", codec_tokens.len());
    println!("text_logp={:.9}", best.text_logp);
    println!("codec_logp={:.9}", best.codec_logp);
    println!("joint_logp={:.9}", best.joint_logp());
    if let Some(out) = &args.out {
        let mut codes = CodeSequence::new(1, codec_tokens.len());
        for (f, &c) in codec_tokens.iter().enumerate() {
            codes.set(0, f, c);
        }
        formats::write_codes(out, &codes, layout.codebook_size)?;
    }
    Ok(())
}

fn nar(args: &NarArgs, s: &Settings) -> anyhow::Result<()> {
    let (first, codebook_size) = formats::read_codes(&args.codes)?;
    if first.n_layers != 1 {
        bail!("--codes must hold exactly 1 layer, got {}", first.n_layers);
    }
    let n_layers = pick(args.layers, &s.cfg, "layers", 16)?;
    let (_, model) = load_or_init_model(
        args.model.as_deref(),
        s.seed,
        64,
        16,
        codebook_size,
        n_layers,
    )?;
    let prompt = match &args.prompt {
        Some(path) => formats::read_codes(path)?.0,
        None => CodeSequence::new(model.dims.n_codec_layers, 0),
    };
    let out = if args.greedy {
        greedy_generate(&first, &prompt, &model, n_layers)?
    } else {
        let cfg = LbsConfig {
            n_codebook: n_layers,
            beam_size: pick(args.beam, &s.cfg, "beam", 10)?,
            n_sample: pick(args.samples, &s.cfg, "samples", 20)?,
            top_k: pick(args.topk, &s.cfg, "topk", 3)?,
            seed: s.seed,
        };
        lbs_generate(&first, &prompt, &model, &cfg)?
    };
    formats::write_codes(&args.out, &out, codebook_size)?;
    println!("layers={} frames={}", out.n_layers, out.n_frames);
    Ok(())
}

fn read_durations(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            line.parse::<f64>()
                .map_err(|e| anyhow!("{} line {}: {e}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn metrics(args: &MetricsArgs, _s: &Settings) -> anyhow::Result<()> {
    let src = read_durations(&args.src)?;
    let gen = read_durations(&args.gen)?;
    let slc02 = iso::slc(&src, &gen, 0.2)?;
    let slc04 = iso::slc(&src, &gen, 0.4)?;
    println!("slc_0.2={slc02:.6}");
    println!("slc_0.4={slc04:.6}");
    let mut report = serde_json::json!({
        "slc_0.2": slc02,
        "slc_0.4": slc04,
        "pairs": src.len(),
    });
    if let Some(pcm_path) = &args.pcm {
        let pcm = formats::read_pcm(pcm_path)?;
        let vad = iso::vad_frames(&pcm)?;
        let pauses = iso::pause_count(&vad);
        println!("pause_count={pauses}");
        report["pause_count"] = serde_json::json!(pauses);
    }
    if let Some(json_path) = &args.json {
        std::fs::write(json_path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn data_build(args: &DataBuildArgs, s: &Settings) -> anyhow::Result<()> {
    let min_confidence = pick(args.min_confidence, &s.cfg, "min_confidence", 0.0)?;
    let dropout = pick(args.dropout, &s.cfg, "dropout", data::ACOUSTIC_DROPOUT_P)?;
    let records = data::read_manifest(&args.manifest, min_confidence)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| base.join(p);
    let rng = SeededRng::new(s.seed, 0xda7a);
    let mut counts: HashMap<&'static str, usize> = HashMap::new();
    let mut masked_total = 0usize;
    let mut label_total = 0usize;
    for (i, rec) in records.iter().enumerate() {
        let src_feat = formats::read_features(&resolve(&rec.src_features))?;
        let region = rec.prompt_region();
        let mut examples: Vec<data::TrainingExample> = Vec::new();
        match rec.kind.as_str() {
            "s2st" | "s2st-fwd" | "s2st-rev" => {
                let src_codes = formats::read_codes(&resolve(
                    rec.src_codes.as_deref().context("s2st needs src_codes")?,
                ))?;
                let tgt_feat = formats::read_features(&resolve(
                    rec.tgt_features
                        .as_deref()
                        .context("s2st needs tgt_features")?,
                ))?;
                let tgt_codes = formats::read_codes(&resolve(
                    rec.tgt_codes.as_deref().context("s2st needs tgt_codes")?,
                ))?;
                let layout = VocabLayout::new(16, src_codes.1.max(tgt_codes.1));
                let mut dirs = Vec::new();
                if rec.kind != "s2st-rev" {
                    dirs.push(Direction::Forward);
                }
                if rec.kind != "s2st-fwd" {
                    dirs.push(Direction::Reverse);
                }
                for dir in dirs {
                    let ex = data::build_example_s2st(
                        &src_feat,
                        &src_codes.0,
                        &rec.src_text,
                        &tgt_feat,
                        &tgt_codes.0,
                        &rec.tgt_text,
                        region.clone(),
                        dir,
                        &layout,
                    )?;
                    examples.push(data::acoustic_dropout_p(
                        ex,
                        dropout,
                        &mut rng.child(i as u64),
                    ));
                }
            }
            "st" | "st-fwd" | "st-rev" => {
                let layout = VocabLayout::new(16, 256);
                if rec.kind != "st-rev" {
                    examples.push(data::build_example_st(
                        &src_feat,
                        &rec.src_text,
                        &rec.tgt_text,
                        Direction::Forward,
                        &layout,
                    )?);
                }
                if rec.kind != "st-fwd" {
                    examples.push(data::build_example_st(
                        &src_feat,
                        &rec.src_text,
                        &rec.tgt_text,
                        Direction::Reverse,
                        &layout,
                    )?);
                }
            }
            "asr" | "asr-as-tts" => {
                let src_codes = formats::read_codes(&resolve(
                    rec.src_codes.as_deref().context("asr needs src_codes")?,
                ))?;
                let layout = VocabLayout::new(16, src_codes.1);
                let ex = data::build_example_asr(
                    &src_feat,
                    &src_codes.0,
                    &rec.src_text,
                    region.clone(),
                    &layout,
                )?;
                examples.push(data::acoustic_dropout_p(
                    ex,
                    dropout,
                    &mut rng.child(i as u64),
                ));
            }
            other => bail!("manifest line {}: unknown kind {other}", i + 1),
        }
        for ex in examples {
            *counts.entry(ex.kind.as_str()).or_default() += 1;
            masked_total += ex.masked_count();
            label_total += ex.label.len();
        }
    }
    let mut keys: Vec<_> = counts.keys().copied().collect();
    keys.sort_unstable();
    for k in &keys {
        println!("examples_{k}={}", counts[k]);
    }
    println!("label_positions={label_total}");
    println!("masked_positions={masked_total}");
    if let Some(json_path) = &args.json {
        let report = serde_json::json!({
            "examples": counts,
            "label_positions": label_total,
            "masked_positions": masked_total,
        });
        std::fs::write(json_path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn selftest() -> anyhow::Result<()> {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{}: {}", name, if ok { "ok" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // Sampling frequency oracle.
    {
        let mut rng = SeededRng::from_seed(1);
        let mut hits = 0usize;
        let n = 50_000;
        for _ in 0..n {
            if tvip::numerics::categorical_sample(&[0.25, 0.75], &mut rng)? == 1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        check("categorical-frequency", (freq - 0.75).abs() < 0.01);
    }

    // RVQ capacity + monotonicity.
    {
        let cfg = RvqConfig {
            n_layers: 4,
            codebook_size: 16,
            feature_dim: 8,
            code_dim: 8,
            ..RvqConfig::default()
        };
        let mut rng = SeededRng::from_seed(2);
        let mut frames = tvip::numerics::Matrix::zeros(0, 8);
        for _ in 0..16 {
            let mut v: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let norm = tvip::numerics::l2_norm(&v);
            v.iter_mut().for_each(|x| *x /= norm);
            frames.push_row(&v);
        }
        let train = FeatureSequence::new(frames);
        let codec = rvq::fit_codebooks(
            std::slice::from_ref(&train),
            &cfg,
            20,
            &mut SeededRng::from_seed(3),
        )?;
        let codes = rvq::encode(&train, &codec, 1)?;
        let mse1 = rvq::reconstruction_mse(&train, &codes, &codec, 1)?;
        check("rvq-capacity", mse1 < 1e-6);
        let codes4 = rvq::encode(&train, &codec, 4)?;
        let mut prev = f64::INFINITY;
        let mut mono = true;
        for l in 1..=4 {
            let mse = rvq::reconstruction_mse(&train, &codes4, &codec, l)?;
            if mse > prev + 1e-12 {
                mono = false;
            }
            prev = mse;
        }
        check("rvq-monotone", mono);
    }

    // LBS degenerate equivalence on a handful of seeds.
    {
        let mut ok = true;
        for seed in 0..10u64 {
            let nar_dims = NarDims {
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                n_blocks: 1,
                n_codec_layers: 4,
                codebook_size: 16,
            };
            let model = NarPredictor::init(seed, &nar_dims);
            let mut rng = SeededRng::new(seed, 7);
            let mut first = CodeSequence::new(1, 6);
            for f in 0..6 {
                first.set(0, f, rng.uniform_index(16) as u32);
            }
            let prompt = CodeSequence::new(4, 0);
            let cfg = LbsConfig {
                n_codebook: 4,
                beam_size: 1,
                n_sample: 1,
                top_k: 1,
                seed,
            };
            let a = lbs_generate(&first, &prompt, &model, &cfg)?;
            let b = greedy_generate(&first, &prompt, &model, 4)?;
            if a != b {
                ok = false;
            }
        }
        check("lbs-degenerate-equivalence", ok);
    }

    // Joint beam search vs exhaustive oracle.
    {
        let mut ok = true;
        for seed in 0..5u64 {
            let dims = ToyDims {
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                n_enc_blocks: 1,
                n_dec_blocks: 1,
                feature_dim: 8,
                max_iso_frames: 8,
                ac_blocks: 1,
                ..ToyDims::default()
            };
            let layout = VocabLayout::new(3, 4);
            let scorer = JointScorer::init(seed, &dims, layout);
            let mut rng = SeededRng::new(seed, 8);
            let feat = FeatureSequence::new(tvip::numerics::Matrix::randn(3, 8, 1.0, &mut rng));
            let cfg = BeamConfig {
                beam_size: 4000,
                max_text_len: 2,
                max_codec_frames: 2,
                ..BeamConfig::default()
            };
            let beam = beam_search_joint(&feat, None, None, &scorer, &cfg)?;
            let oracle = tvip::joint::enumerate_joint_oracle(&feat, None, None, &scorer, &cfg)?;
            if beam[0].tokens != oracle.tokens {
                ok = false;
            }
        }
        check("joint-oracle", ok);
    }

    // Format round-trips.
    {
        let dir = std::env::temp_dir().join(format!("tvip-selftest-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let mut rng = SeededRng::from_seed(9);
        let feat = FeatureSequence::new(tvip::numerics::Matrix::randn(5, 4, 1.0, &mut rng));
        let p1 = dir.join("a.sasf");
        let p2 = dir.join("b.sasf");
        formats::write_features(&p1, &feat)?;
        let back = formats::read_features(&p1)?;
        formats::write_features(&p2, &back)?;
        let ok = std::fs::read(&p1)? == std::fs::read(&p2)?;
        std::fs::remove_dir_all(&dir)?;
        check("format-roundtrip", ok);
    }

    // SLC arithmetic.
    check(
        "slc-arithmetic",
        iso::slc(&[1.0], &[1.3], 0.2)? == 0.0 && iso::slc(&[1.0], &[1.3], 0.4)? == 1.0,
    );
    // Mask counting.
    {
        let mut rng = SeededRng::from_seed(10);
        let layout = VocabLayout::new(6, 8);
        let mut ok = true;
        for _ in 0..20 {
            let n = 4 + rng.uniform_index(20);
            let region = data::sample_prompt_region(n, &mut rng);
            let mut codes = CodeSequence::new(1, n);
            for f in 0..n {
                codes.set(0, f, rng.uniform_index(8) as u32);
            }
            let frames = FeatureSequence::new(tvip::numerics::Matrix::randn(n, 4, 1.0, &mut rng));
            let ts = [0u32, 1, 2];
            let ex = data::build_example_asr(&frames, &codes, &ts, region.clone(), &layout)?;
            if ex.masked_count() != ts.len() + region.len() {
                ok = false;
            }
        }
        check("loss-mask-counting", ok);
    }

    if failures > 0 {
        bail!("{failures} selftest check(s) failed");
    }
    println!("all selftest checks passed");
    Ok(())
}
