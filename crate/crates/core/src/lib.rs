//! Zero-shot keyword spotting by audio/text matching.
//!
//! Audio is turned into log-mel frames ([`dsp`]), encoded together with the
//! keyword's phoneme sequence ([`encoders`]), aligned by cross-attention and
//! scored by a GRU discriminator ([`matcher`]). Training combines utterance
//! and phoneme BCE, CTC, a Viterbi-confidence contrastive term, a pooled
//! audio/text contrastive term and a precision-constrained false-alarm term
//! ([`losses`], [`alignment`], [`train`]).

pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod tape;
pub mod train;

pub use error::{KwsError, Result};
