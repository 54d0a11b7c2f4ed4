//! Corpus handling: WAV I/O, lexicon, synthetic speech and trial lists.

pub mod corpus;
pub mod lexicon;
pub mod synth;
pub mod trials;
pub mod wav;

pub use corpus::{Corpus, TrialLayout};
pub use lexicon::{to_phonemes, Lexicon};
pub use synth::SynthSpec;
pub use trials::{build_trials, Keyword, TrialPair};
