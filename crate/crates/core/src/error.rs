use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KwsError>;

#[derive(Debug, Error)]
pub enum KwsError {
    #[error("audio too short: {0} samples, need at least 400")]
    AudioTooShort(usize),
    #[error("unsupported sample rate {0} Hz, expected 16000")]
    BadSampleRate(u32),
    #[error("audio longer than the configured bound: {0} samples")]
    AudioTooLong(usize),
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("bad argument: {0}")]
    BadArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown phoneme id {0}")]
    UnknownPhonemeId(usize),
    #[error("positional encoding needs an even dimension, got {0}")]
    OddDim(usize),
    #[error("target of length {target_len} (with {repeats} adjacent repeats) cannot fit in {frames} frames")]
    InfeasibleTarget {
        frames: usize,
        target_len: usize,
        repeats: usize,
    },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("similarity matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("non-finite loss term `{0}`")]
    NonFiniteTerm(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("corpus has no trials to train on")]
    DataExhausted,
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("bad WAV format: {0}")]
    BadFormat(String),
    #[error("expected mono audio, got {0} channels")]
    NotMono(u16),
    #[error("out of vocabulary: {0}")]
    OutOfVocabulary(String),
    #[error("need at least 2 keywords, got {0}")]
    InsufficientKeywords(usize),
    #[error("metrics need at least one positive and one negative trial")]
    DegenerateLabels,
    #[error("no negative trials")]
    NoNegatives,
    #[error("inconsistent candidate lists: {0}")]
    InconsistentCandidates(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KwsError {
    /// Stable variant name, used when reporting errors to users.
    pub fn kind(&self) -> &'static str {
        match self {
            KwsError::AudioTooShort(_) => "AudioTooShort",
            KwsError::BadSampleRate(_) => "BadSampleRate",
            KwsError::AudioTooLong(_) => "AudioTooLong",
            KwsError::EmptyWaveform => "EmptyWaveform",
            KwsError::BadArgument(_) => "BadArgument",
            KwsError::ShapeMismatch(_) => "ShapeMismatch",
            KwsError::UnknownPhonemeId(_) => "UnknownPhonemeId",
            KwsError::OddDim(_) => "OddDim",
            KwsError::InfeasibleTarget { .. } => "InfeasibleTarget",
            KwsError::LengthMismatch(..) => "LengthMismatch",
            KwsError::EmptyBatch => "EmptyBatch",
            KwsError::NotSquare(..) => "NotSquare",
            KwsError::NonFiniteTerm(_) => "NonFiniteTerm",
            KwsError::NonFiniteLoss { .. } => "NonFiniteLoss",
            KwsError::DataExhausted => "DataExhausted",
            KwsError::BadMagic => "BadMagic",
            KwsError::CrcMismatch { .. } => "CrcMismatch",
            KwsError::VersionUnsupported(_) => "VersionUnsupported",
            KwsError::BadCheckpoint(_) => "BadCheckpoint",
            KwsError::BadFormat(_) => "BadFormat",
            KwsError::NotMono(_) => "NotMono",
            KwsError::OutOfVocabulary(_) => "OutOfVocabulary",
            KwsError::InsufficientKeywords(_) => "InsufficientKeywords",
            KwsError::DegenerateLabels => "DegenerateLabels",
            KwsError::NoNegatives => "NoNegatives",
            KwsError::InconsistentCandidates(_) => "InconsistentCandidates",
            KwsError::Io { .. } => "IoError",
            KwsError::Csv(_) => "CsvError",
            KwsError::Json(_) => "JsonError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KwsError::Io {
            path: path.into(),
            source,
        }
    }
}
