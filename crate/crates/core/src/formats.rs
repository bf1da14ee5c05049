//! Little-endian binary file formats: features ("SASF"), code grids
//! ("SASQ"), fitted codecs ("SASB"), and toy model weights ("TVTM").
//!
//! Floats are stored as f32; a write -> read -> write cycle is byte-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{JointScorer, NarDims, NarPredictor, ToyDims, VocabLayout};
use crate::numerics::Matrix;
use crate::rvq::{CodeSequence, Codebook, FeatureSequence, RvqCodec, RvqConfig};

pub const FEATURE_MAGIC: &[u8; 4] = b"SASF";
pub const CODES_MAGIC: &[u8; 4] = b"SASQ";
pub const CODEC_MAGIC: &[u8; 4] = b"SASB";
pub const MODEL_MAGIC: &[u8; 4] = b"TVTM";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Reader { inner }
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        if &buf != expect {
            return Err(format_err(format!(
                "bad magic {:?}, expected {:?}",
                buf, expect
            )));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let mut buf = [0u8; 2];
        self.inner.read_exact(&mut buf)?;
        Ok(u16::from_le_bytes(buf))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f32(&mut self) -> Result<f32> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf))
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn f32_slice(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f32()? as f64);
        }
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix::from_vec(rows, cols, self.f32_slice(rows * cols)?))
    }

    fn done(&mut self) -> Result<()> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf)? {
            0 => Ok(()),
            _ => Err(format_err("trailing bytes")),
        }
    }
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn new(inner: W) -> Self {
        Writer { inner }
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f32(&mut self, v: f64) -> Result<()> {
        self.bytes(&(v as f32).to_le_bytes())
    }

    fn f32_slice(&mut self, v: &[f64]) -> Result<()> {
        for &x in v {
            self.f32(x)?;
        }
        Ok(())
    }
}

pub fn write_features(path: &Path, feat: &FeatureSequence) -> Result<()> {
    let mut w = Writer::new(std::io::BufWriter::new(std::fs::File::create(path)?));
    w.bytes(FEATURE_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(feat.n_frames as u32)?;
    w.u32(feat.feature_dim as u32)?;
    w.f32_slice(feat.frames.data())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let mut r = Reader::new(std::io::BufReader::new(std::fs::File::open(path)?));
    r.magic(FEATURE_MAGIC)?;
    r.version()?;
    let n_frames = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let frames = r.matrix(n_frames, dim)?;
    r.done()?;
    Ok(FeatureSequence::new(frames))
}

pub fn write_codes(path: &Path, codes: &CodeSequence, codebook_size: usize) -> Result<()> {
    if codebook_size > u16::MAX as usize + 1 {
        return Err(format_err("codebook too large for u16 codes"));
    }
    let mut w = Writer::new(std::io::BufWriter::new(std::fs::File::create(path)?));
    w.bytes(CODES_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u16(codes.n_layers as u16)?;
    w.u32(codebook_size as u32)?;
    w.f32(codes.token_rate_hz as f64)?;
    w.u32(codes.n_frames as u32)?;
    for &c in &codes.codes {
        w.u16(c as u16)?;
    }
    Ok(())
}

pub fn read_codes(path: &Path) -> Result<(CodeSequence, usize)> {
    let mut r = Reader::new(std::io::BufReader::new(std::fs::File::open(path)?));
    r.magic(CODES_MAGIC)?;
    r.version()?;
    let n_layers = r.u16()? as usize;
    let codebook_size = r.u32()? as usize;
    let rate = r.f32()?;
    let n_frames = r.u32()? as usize;
    let mut codes = CodeSequence::new(n_layers, n_frames);
    codes.token_rate_hz = rate;
    for i in 0..n_layers * n_frames {
        let c = r.u16()? as u32;
        if c as usize >= codebook_size {
            return Err(format_err(format!("code {c} >= codebook {codebook_size}")));
        }
        codes.codes[i] = c;
    }
    r.done()?;
    Ok((codes, codebook_size))
}

pub fn write_codec(path: &Path, codec: &RvqCodec) -> Result<()> {
    let cfg = &codec.cfg;
    let mut w = Writer::new(std::io::BufWriter::new(std::fs::File::create(path)?));
    w.bytes(CODEC_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(cfg.n_layers as u32)?;
    w.u32(cfg.codebook_size as u32)?;
    w.u32(cfg.feature_dim as u32)?;
    w.u32(cfg.code_dim as u32)?;
    w.f32(cfg.token_rate_hz as f64)?;
    w.u32(cfg.downsample as u32)?;
    for book in &codec.books {
        w.f32_slice(book.entries.data())?;
        w.f32_slice(book.in_proj.data())?;
        w.f32_slice(book.out_proj.data())?;
        w.f32_slice(&book.ema_counts)?;
    }
    Ok(())
}

pub fn read_codec(path: &Path) -> Result<RvqCodec> {
    let mut r = Reader::new(std::io::BufReader::new(std::fs::File::open(path)?));
    r.magic(CODEC_MAGIC)?;
    r.version()?;
    let cfg = RvqConfig {
        n_layers: r.u32()? as usize,
        codebook_size: r.u32()? as usize,
        feature_dim: r.u32()? as usize,
        code_dim: r.u32()? as usize,
        token_rate_hz: r.f32()?,
        downsample: r.u32()? as usize,
    };
    cfg.validate().map_err(|e| format_err(e.to_string()))?;
    let mut books = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        books.push(Codebook {
            layer,
            entries: r.matrix(cfg.codebook_size, cfg.code_dim)?,
            in_proj: r.matrix(cfg.feature_dim, cfg.code_dim)?,
            out_proj: r.matrix(cfg.code_dim, cfg.feature_dim)?,
            ema_counts: r.f32_slice(cfg.codebook_size)?,
        });
    }
    r.done()?;
    Ok(RvqCodec { cfg, books })
}

/// Model file: magics and dims, then every tensor of the joint scorer and
/// the layer predictor as f32 in parameter-visitation order.
pub fn write_model(path: &Path, scorer: &JointScorer, nar: &NarPredictor) -> Result<()> {
    let mut w = Writer::new(std::io::BufWriter::new(std::fs::File::create(path)?));
    w.bytes(MODEL_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    let d = &scorer.dims;
    for v in [
        d.d_model,
        d.n_heads,
        d.d_ff,
        d.n_enc_blocks,
        d.n_dec_blocks,
        d.feature_dim,
        d.max_iso_frames,
        d.ac_blocks,
        d.ac_use_positions as usize,
        d.ac_use_ffn as usize,
        scorer.layout.n_text,
        scorer.layout.codebook_size,
    ] {
        w.u32(v as u32)?;
    }
    let n = &nar.dims;
    for v in [
        n.d_model,
        n.n_heads,
        n.d_ff,
        n.n_blocks,
        n.n_codec_layers,
        n.codebook_size,
    ] {
        w.u32(v as u32)?;
    }
    let mut err = Ok(());
    scorer.visit_params(&mut |t: &[f64]| {
        if err.is_ok() {
            err = w.f32_slice(t);
        }
    });
    nar.visit_params(&mut |t: &[f64]| {
        if err.is_ok() {
            err = w.f32_slice(t);
        }
    });
    err
}

pub fn read_model(path: &Path) -> Result<(JointScorer, NarPredictor)> {
    let mut r = Reader::new(std::io::BufReader::new(std::fs::File::open(path)?));
    r.magic(MODEL_MAGIC)?;
    r.version()?;
    let dims = ToyDims {
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        d_ff: r.u32()? as usize,
        n_enc_blocks: r.u32()? as usize,
        n_dec_blocks: r.u32()? as usize,
        feature_dim: r.u32()? as usize,
        max_iso_frames: r.u32()? as usize,
        ac_blocks: r.u32()? as usize,
        ac_use_positions: r.u32()? != 0,
        ac_use_ffn: r.u32()? != 0,
    };
    let layout = VocabLayout::new(r.u32()? as usize, r.u32()? as usize);
    let nar_dims = NarDims {
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        d_ff: r.u32()? as usize,
        n_blocks: r.u32()? as usize,
        n_codec_layers: r.u32()? as usize,
        codebook_size: r.u32()? as usize,
    };
    let mut scorer = JointScorer::init(0, &dims, layout);
    let mut nar = NarPredictor::init(0, &nar_dims);
    let mut err: Result<()> = Ok(());
    scorer.visit_params_mut(&mut |t: &mut [f64]| {
        if err.is_ok() {
            match r.f32_slice(t.len()) {
                Ok(v) => t.copy_from_slice(&v),
                Err(e) => err = Err(e),
            }
        }
    });
    nar.visit_params_mut(&mut |t: &mut [f64]| {
        if err.is_ok() {
            match r.f32_slice(t.len()) {
                Ok(v) => t.copy_from_slice(&v),
                Err(e) => err = Err(e),
            }
        }
    });
    err?;
    r.done()?;
    Ok((scorer, nar))
}

/// Headerless 16-bit little-endian mono PCM.
pub fn read_pcm(path: &Path) -> Result<Vec<i16>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 2 != 0 {
        return Err(format_err("odd byte count in raw PCM file"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn write_pcm(path: &Path, pcm: &[i16]) -> Result<()> {
    let mut out = Vec::with_capacity(pcm.len() * 2);
    for &s in pcm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::rvq::fit_codebooks;
    use tempfile::TempDir;

    fn roundtrip_bytes(path: &Path) -> Vec<u8> {
        std::fs::read(path).unwrap()
    }

    #[test]
    fn features_roundtrip() {
        let dir = TempDir::new().unwrap();
        let p1 = dir.path().join("a.sasf");
        let p2 = dir.path().join("b.sasf");
        let mut rng = SeededRng::from_seed(1);
        let feat = FeatureSequence::new(Matrix::randn(7, 5, 1.0, &mut rng));
        write_features(&p1, &feat).unwrap();
        let back = read_features(&p1).unwrap();
        assert_eq!(back.n_frames, 7);
        assert_eq!(back.feature_dim, 5);
        write_features(&p2, &back).unwrap();
        assert_eq!(roundtrip_bytes(&p1), roundtrip_bytes(&p2));
    }

    #[test]
    fn codes_roundtrip() {
        let dir = TempDir::new().unwrap();
        let p1 = dir.path().join("a.sasq");
        let p2 = dir.path().join("b.sasq");
        let mut codes = CodeSequence::new(3, 5);
        let mut rng = SeededRng::from_seed(2);
        for i in 0..15 {
            codes.codes[i] = rng.uniform_index(16) as u32;
        }
        write_codes(&p1, &codes, 16).unwrap();
        let (back, c) = read_codes(&p1).unwrap();
        assert_eq!(back, codes);
        assert_eq!(c, 16);
        write_codes(&p2, &back, c).unwrap();
        assert_eq!(roundtrip_bytes(&p1), roundtrip_bytes(&p2));
    }

    #[test]
    fn codec_roundtrip() {
        let dir = TempDir::new().unwrap();
        let p1 = dir.path().join("a.sasb");
        let p2 = dir.path().join("b.sasb");
        let cfg = RvqConfig {
            n_layers: 2,
            codebook_size: 8,
            feature_dim: 8,
            code_dim: 4,
            ..RvqConfig::default()
        };
        let mut rng = SeededRng::from_seed(3);
        let train = FeatureSequence::new(Matrix::randn(64, 8, 1.0, &mut rng));
        let codec = fit_codebooks(&[train], &cfg, 5, &mut rng).unwrap();
        write_codec(&p1, &codec).unwrap();
        let back = read_codec(&p1).unwrap();
        assert_eq!(back.cfg, cfg);
        write_codec(&p2, &back).unwrap();
        assert_eq!(roundtrip_bytes(&p1), roundtrip_bytes(&p2));
    }

    #[test]
    fn model_roundtrip() {
        let dir = TempDir::new().unwrap();
        let p1 = dir.path().join("a.tvtm");
        let p2 = dir.path().join("b.tvtm");
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
        let nar_dims = NarDims {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_blocks: 1,
            n_codec_layers: 4,
            codebook_size: 8,
        };
        let layout = VocabLayout::new(3, 8);
        let scorer = JointScorer::init(7, &dims, layout);
        let nar = NarPredictor::init(7, &nar_dims);
        write_model(&p1, &scorer, &nar).unwrap();
        let (s2, n2) = read_model(&p1).unwrap();
        assert_eq!(s2.dims, dims);
        assert_eq!(n2.dims, nar_dims);
        assert_eq!(s2.layout, layout);
        write_model(&p2, &s2, &n2).unwrap();
        assert_eq!(roundtrip_bytes(&p1), roundtrip_bytes(&p2));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format(_))));
        assert!(matches!(read_codes(&p), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("trunc.sasf");
        std::fs::write(&p, b"SASF\x01\x00\x00\x00\x05\x00\x00\x00").unwrap();
        assert!(read_features(&p).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("extra.sasf");
        let feat = FeatureSequence::new(Matrix::zeros(1, 1));
        write_features(&p, &feat).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format(_))));
    }

    #[test]
    fn pcm_roundtrip() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("a.s16le");
        let pcm: Vec<i16> = vec![-32768, -1, 0, 1, 32767];
        write_pcm(&p, &pcm).unwrap();
        assert_eq!(read_pcm(&p).unwrap(), pcm);
        std::fs::write(&p, [0u8; 3]).unwrap();
        assert!(read_pcm(&p).is_err());
    }
}
