//! Audio and text encoders.
//!
//! The audio side runs two parallel streams over log-mel frames:
//!
//! * a strided conv stack (total stride 8 mel frames = 80 ms, receptive field
//!   78 mel frames, matching a 775 ms window on a 10 ms grid) emitting 96 dims;
//! * a single linear conv projection of the log-mel (32 dims), average-pooled
//!   onto the same 80 ms grid over the 8 frames at the centre of each window.
//!
//! The streams are concatenated to 128 dims. A per-frame affine CTC head reads
//! the concatenation; sinusoidal positional encodings are added afterwards to
//! form `E_a`. Text goes through a phoneme table, FC + ReLU to 128 dims, and
//! positional encodings.

use rand::Rng;

use crate::dsp::LogMelFrames;
use crate::error::{KwsError, Result};
use crate::params::{he_uniform, xavier_uniform, Bound, ParamSet};
use crate::tape::{Mat, Tape, Var};

pub const EMBED_DIM: usize = 128;
pub const AUDIO_STREAM_DIM: usize = 96;
pub const MEL_STREAM_DIM: usize = 32;
pub const PHONE_TABLE_DIM: usize = 64;
pub const EMBED_HOP_MS: u32 = 80;
/// Receptive field of one embedding frame, in mel frames.
pub const RECEPTIVE_FIELD: usize = 78;
/// Embedding stride, in mel frames.
pub const EMBED_STRIDE: usize = 8;
pub const MAX_PHONEMES: usize = 64;

/// `(kernel, stride, out_channels)` of the strided stack.
const AUDIO_STACK: [(usize, usize, usize); 4] = [(6, 2, 96), (5, 2, 128), (5, 2, 160), (7, 1, 96)];
const MEL_KERNEL: usize = 3;
/// First mel-conv output pooled into embedding frame 0.
const POOL_OFFSET: usize = 34;

// Fixed input conditioning of log-mel values before the first conv.
const MEL_SHIFT: f64 = -2.0;
const MEL_SCALE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub vocab_size: usize,
    /// Positional encodings on `E_a` and `E_t`; disabled only for inspection.
    pub posenc: bool,
}

impl EncoderConfig {
    pub fn new(n_mels: usize, vocab_size: usize) -> Self {
        Self {
            n_mels,
            vocab_size,
            posenc: true,
        }
    }

    pub fn blank_id(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub set: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioEmbedding {
    /// `T_a x 128`
    pub e_a: Mat,
}

impl AudioEmbedding {
    pub const FRAME_HOP_MS: u32 = EMBED_HOP_MS;

    pub fn n_frames(&self) -> usize {
        self.e_a.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeQuery {
    pub phoneme_ids: Vec<usize>,
    /// `T_t x 128`
    pub e_t: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcLogits {
    /// `T_a x (|V| + 1)`, blank in the last column.
    pub z: Mat,
}

impl CtcLogits {
    pub fn blank_id(&self) -> usize {
        self.z.ncols() - 1
    }

    pub fn n_frames(&self) -> usize {
        self.z.nrows()
    }
}

fn conv_name(i: usize) -> (String, String) {
    (format!("audio.conv{}.w", i + 1), format!("audio.conv{}.b", i + 1))
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut set = ParamSet::new();
        let mut in_ch = config.n_mels;
        for (i, &(k, _, out)) in AUDIO_STACK.iter().enumerate() {
            let (w, b) = conv_name(i);
            let fan_in = k * in_ch;
            let weight = if i + 1 < AUDIO_STACK.len() {
                he_uniform(rng, fan_in, out)
            } else {
                xavier_uniform(rng, fan_in, out, 1.0)
            };
            set.insert(w, weight);
            set.insert(b, Mat::zeros((1, out)));
            in_ch = out;
        }
        set.insert(
            "mel.conv.w",
            xavier_uniform(rng, MEL_KERNEL * config.n_mels, MEL_STREAM_DIM, 1.0),
        );
        set.insert("mel.conv.b", Mat::zeros((1, MEL_STREAM_DIM)));
        set.insert(
            "ctc.w",
            xavier_uniform(rng, EMBED_DIM, config.vocab_size + 1, 1.0),
        );
        set.insert("ctc.b", Mat::zeros((1, config.vocab_size + 1)));
        set.insert(
            "text.table",
            Mat::from_shape_simple_fn((config.vocab_size, PHONE_TABLE_DIM), || {
                rng.gen_range(-1.0..=1.0)
            }),
        );
        set.insert("text.fc.w", he_uniform(rng, PHONE_TABLE_DIM, EMBED_DIM));
        set.insert("text.fc.b", Mat::zeros((1, EMBED_DIM)));
        Self { config, set }
    }

    /// Every tensor zero, same shapes as [`EncoderParams::init`].
    pub fn zeros(config: EncoderConfig) -> Self {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let p = Self::init(config, &mut rng);
        Self {
            config,
            set: p.set.zeros_like(),
        }
    }

    /// Rebuilds from named tensors, checking every expected shape.
    pub fn from_set(config: EncoderConfig, set: ParamSet) -> Result<Self> {
        let reference = Self::zeros(config);
        if reference.set.len() != set.len() {
            return Err(KwsError::ShapeMismatch(format!(
                "encoder expects {} tensors, got {}",
                reference.set.len(),
                set.len()
            )));
        }
        for (name, m) in reference.set.iter() {
            match set.get(name) {
                Some(v) if v.dim() == m.dim() => {}
                Some(v) => {
                    return Err(KwsError::ShapeMismatch(format!(
                        "{name}: expected {:?}, got {:?}",
                        m.dim(),
                        v.dim()
                    )))
                }
                None => return Err(KwsError::ShapeMismatch(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { config, set })
    }
}

pub fn param_count(p: &EncoderParams) -> usize {
    p.set.param_count()
}

/// Number of embedding frames produced from `n_mel_frames` log-mel frames.
pub fn embedding_frames(n_mel_frames: usize) -> usize {
    if n_mel_frames < RECEPTIVE_FIELD {
        0
    } else {
        (n_mel_frames - RECEPTIVE_FIELD) / EMBED_STRIDE + 1
    }
}

/// Sinusoidal encodings: `PE[pos, 2i] = sin(pos / 10000^(2i/dim))`,
/// `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(length: usize, dim: usize) -> Result<Mat> {
    if !dim.is_multiple_of(2) {
        return Err(KwsError::OddDim(dim));
    }
    Ok(Mat::from_shape_fn((length, dim), |(pos, c)| {
        let i = c / 2;
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Tape handles of an audio forward pass.
pub struct AudioVars {
    /// `E_a` with positional encodings.
    pub e_a: Var,
    pub logits: Var,
}

pub fn audio_forward(
    tape: &mut Tape,
    bound: &Bound,
    config: &EncoderConfig,
    frames: &Mat,
) -> Result<AudioVars> {
    let (n_mel_frames, n_mels) = frames.dim();
    if n_mels != config.n_mels {
        return Err(KwsError::ShapeMismatch(format!(
            "log-mel has {n_mels} bins, encoder expects {}",
            config.n_mels
        )));
    }
    let t_a = embedding_frames(n_mel_frames);
    if t_a == 0 {
        return Err(KwsError::ShapeMismatch(format!(
            "{n_mel_frames} mel frames is shorter than the {RECEPTIVE_FIELD}-frame receptive field"
        )));
    }
    let x = tape.leaf(frames.mapv(|v| (v - MEL_SHIFT) * MEL_SCALE));

    let mut h = x;
    for (i, &(k, stride, _)) in AUDIO_STACK.iter().enumerate() {
        let (w, b) = conv_name(i);
        h = tape.conv1d(h, bound.var(&w), bound.var(&b), k, stride);
        if i + 1 < AUDIO_STACK.len() {
            h = tape.relu(h);
        }
    }
    debug_assert_eq!(tape.value(h).nrows(), t_a);

    let mel = tape.conv1d(x, bound.var("mel.conv.w"), bound.var("mel.conv.b"), MEL_KERNEL, 1);
    let windows: Vec<(usize, usize)> = (0..t_a)
        .map(|j| (j * EMBED_STRIDE + POOL_OFFSET, EMBED_STRIDE))
        .collect();
    let mel = tape.avg_pool_rows(mel, &windows);

    let joint = tape.concat_cols(&[h, mel]);
    let ctc = tape.matmul(joint, bound.var("ctc.w"));
    let logits = tape.add_row(ctc, bound.var("ctc.b"));
    let e_a = if config.posenc {
        let pe = tape.leaf(positional_encoding(t_a, EMBED_DIM)?);
        tape.add(joint, pe)
    } else {
        joint
    };
    Ok(AudioVars { e_a, logits })
}

pub fn text_forward(
    tape: &mut Tape,
    bound: &Bound,
    config: &EncoderConfig,
    phoneme_ids: &[usize],
) -> Result<Var> {
    check_ids(phoneme_ids, config.vocab_size)?;
    // Lookup as a one-hot product so the table receives gradients.
    let mut onehot = Mat::zeros((phoneme_ids.len(), config.vocab_size));
    for (r, &id) in phoneme_ids.iter().enumerate() {
        onehot[[r, id]] = 1.0;
    }
    let sel = tape.leaf(onehot);
    let looked_up = tape.matmul(sel, bound.var("text.table"));
    let fc = tape.matmul(looked_up, bound.var("text.fc.w"));
    let fc = tape.add_row(fc, bound.var("text.fc.b"));
    let e_t = tape.relu(fc);
    if config.posenc {
        let pe = tape.leaf(positional_encoding(phoneme_ids.len(), EMBED_DIM)?);
        Ok(tape.add(e_t, pe))
    } else {
        Ok(e_t)
    }
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    if ids.is_empty() || ids.len() > MAX_PHONEMES {
        return Err(KwsError::BadArgument(format!(
            "phoneme sequence length {} outside 1..={MAX_PHONEMES}",
            ids.len()
        )));
    }
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(KwsError::UnknownPhonemeId(id)),
        None => Ok(()),
    }
}

pub fn encode_audio(frames: &LogMelFrames, p: &EncoderParams) -> Result<(AudioEmbedding, CtcLogits)> {
    let mut tape = Tape::no_grad();
    let bound = p.set.bind(&mut tape);
    let out = audio_forward(&mut tape, &bound, &p.config, &frames.frames)?;
    Ok((
        AudioEmbedding {
            e_a: tape.value(out.e_a).clone(),
        },
        CtcLogits {
            z: tape.value(out.logits).clone(),
        },
    ))
}

pub fn encode_text(phoneme_ids: &[usize], p: &EncoderParams) -> Result<PhonemeQuery> {
    let mut tape = Tape::no_grad();
    let bound = p.set.bind(&mut tape);
    let e_t = text_forward(&mut tape, &bound, &p.config, phoneme_ids)?;
    Ok(PhonemeQuery {
        phoneme_ids: phoneme_ids.to_vec(),
        e_t: tape.value(e_t).clone(),
    })
}
