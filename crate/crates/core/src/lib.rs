//! Desk-scale speech-to-speech translation machinery: a residual vector
//! quantization codec with factorized unit-norm codebooks, a joint
//! text-then-codec beam search with acoustic and isochrony conditioning, a
//! sampling-based layer beam search for non-autoregressive refinement, the
//! multi-task data pipeline feeding them, and binary file formats plus a CLI.
//!
//! Everything is deterministic: all randomness flows through the
//! counter-based generator in [`numerics::SeededRng`], so fixed seeds give
//! bit-identical results on every platform and thread count.

pub mod data;
pub mod error;
pub mod formats;
pub mod iso;
pub mod joint;
pub mod lbs;
pub mod model;
pub mod numerics;
pub mod rvq;

pub use error::{Error, Result};
