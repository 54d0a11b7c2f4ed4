//! Deterministic synthetic speech: each phoneme is a short complex of tones
//! at its template's band centres, with jittered duration and white noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::lexicon::vocab_size;
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{KwsError, Result};
use crate::seed::{rng_for, Stream};

/// Candidate band centres in Hz, log-spaced over the speech band.
fn band_grid() -> Vec<f64> {
    let (lo, hi, n) = (250.0f64, 7000.0f64, 24);
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// One template per phoneme id: 2-4 band centres. Any two templates share at
/// most one band.
pub fn default_templates(n_phonemes: usize, seed: u64) -> Vec<Vec<f64>> {
    let grid = band_grid();
    let mut rng = rng_for(seed, Stream::Templates, 0);
    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(n_phonemes);
    let idx: Vec<usize> = (0..grid.len()).collect();
    while chosen.len() < n_phonemes {
        let k = rng.gen_range(2..=4);
        let mut bands: Vec<usize> = idx.choose_multiple(&mut rng, k).copied().collect();
        bands.sort_unstable();
        let ok = chosen.iter().all(|prev| {
            let shared = prev.iter().filter(|b| bands.contains(b)).count();
            shared <= 1 && !(shared == 1 && (prev.len() == 2 || bands.len() == 2))
        });
        if ok {
            chosen.push(bands);
        }
    }
    chosen
        .into_iter()
        .map(|b| b.into_iter().map(|i| grid[i]).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub keywords: Vec<String>,
    /// Band centres (Hz) per phoneme id.
    pub templates: Vec<Vec<f64>>,
    pub min_phone_ms: f64,
    pub max_phone_ms: f64,
    pub snr_db: f64,
    /// Peak amplitude of the tone complex, as a fraction of full scale.
    pub level: f64,
    /// Silence-plus-noise before the keyword inside a clip.
    pub lead_ms: f64,
    pub lead_jitter_ms: f64,
    /// Minimum clip length; longer keywords get a longer clip.
    pub clip_ms: f64,
    pub seed: u64,
}

pub const DEFAULT_KEYWORDS: [&str; 10] = [
    "light", "right", "pause", "timer", "weather", "camera", "kitchen", "window", "coffee", "search",
];

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            templates: default_templates(vocab_size(), 0),
            min_phone_ms: 80.0,
            max_phone_ms: 120.0,
            snr_db: 20.0,
            level: 0.3,
            lead_ms: 350.0,
            lead_jitter_ms: 40.0,
            clip_ms: 1400.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_phone_ms > 0.0 && self.min_phone_ms <= self.max_phone_ms) {
            return Err(KwsError::BadArgument("phoneme duration range is empty".into()));
        }
        if self.templates.iter().any(|t| t.is_empty()) {
            return Err(KwsError::BadArgument("empty phoneme template".into()));
        }
        Ok(())
    }
}

fn ms_to_samples(ms: f64) -> usize {
    (ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
}

/// Noise-free tone rendering plus the RMS of the voiced part.
fn render_tones(ids: &[usize], spec: &SynthSpec, rng: &mut impl Rng) -> Result<(Vec<f64>, f64)> {
    if ids.is_empty() {
        return Err(KwsError::BadArgument("empty phoneme sequence".into()));
    }
    spec.validate()?;
    let sr = SAMPLE_RATE as f64;
    let fade = ms_to_samples(5.0);
    let mut out = Vec::new();
    for &id in ids {
        let template = spec.templates.get(id).ok_or(KwsError::UnknownPhonemeId(id))?;
        let dur_ms = rng.gen_range(spec.min_phone_ms..=spec.max_phone_ms);
        let n = ms_to_samples(dur_ms)
            .clamp(ms_to_samples(spec.min_phone_ms), ms_to_samples(spec.max_phone_ms));
        // three partials per band, spread 2% around the centre
        let partials: Vec<(f64, f64)> = template
            .iter()
            .flat_map(|&f| [0.98, 1.0, 1.02].map(|m| (f * m, rng.gen_range(0.0..std::f64::consts::TAU))))
            .collect();
        let mut seg = vec![0.0; n];
        for &(f, phase) in &partials {
            let w = std::f64::consts::TAU * f / sr;
            for (i, s) in seg.iter_mut().enumerate() {
                *s += (w * i as f64 + phase).sin();
            }
        }
        let peak = seg.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-9);
        for (i, s) in seg.iter_mut().enumerate() {
            let env = if i < fade {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / fade as f64).cos()
            } else if i >= n - fade {
                0.5 - 0.5 * (std::f64::consts::PI * (n - 1 - i) as f64 / fade as f64).cos()
            } else {
                1.0
            };
            *s *= spec.level * env / peak;
        }
        out.extend(seg);
    }
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / out.len() as f64).sqrt();
    Ok((out, rms))
}

fn add_noise(buf: &mut [f64], signal_rms: f64, snr_db: f64, rng: &mut impl Rng) {
    let sigma = signal_rms / 10f64.powf(snr_db / 20.0);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for s in buf.iter_mut() {
            *s += normal.sample(rng);
        }
    }
}

fn quantize(buf: &[f64]) -> Result<Waveform> {
    let samples = buf
        .iter()
        .map(|&x| (x * 32767.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

/// Renders exactly the phoneme sequence (no padding), noise at `spec.snr_db`.
pub fn synth_utterance(ids: &[usize], spec: &SynthSpec, seed: u64) -> Result<Waveform> {
    let mut rng = rng_for(seed, Stream::Corpus, 0);
    let (mut buf, rms) = render_tones(ids, spec, &mut rng)?;
    add_noise(&mut buf, rms, spec.snr_db, &mut rng);
    quantize(&buf)
}

/// Renders the keyword inside a noise-filled clip, starting `lead_ms`
/// (plus jitter) from the beginning.
pub fn synth_clip(ids: &[usize], spec: &SynthSpec, seed: u64) -> Result<Waveform> {
    let mut rng = rng_for(seed, Stream::Corpus, 1);
    let (tones, rms) = render_tones(ids, spec, &mut rng)?;
    let lead = ms_to_samples(spec.lead_ms + rng.gen_range(0.0..=spec.lead_jitter_ms));
    let tail = ms_to_samples(300.0);
    let len = ms_to_samples(spec.clip_ms).max(lead + tones.len() + tail);
    let mut buf = vec![0.0; len];
    buf[lead..lead + tones.len()].copy_from_slice(&tones);
    add_noise(&mut buf, rms, spec.snr_db, &mut rng);
    quantize(&buf)
}
