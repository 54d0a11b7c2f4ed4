//! Log-mel frontend: 25 ms Hann frames every 10 ms, 512-point power
//! spectrum, HTK triangular filterbank over 0-8000 Hz, natural log.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{KwsError, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const FRAME_LEN_MS: u32 = 25;
pub const HOP_MS: u32 = 10;
pub const DEFAULT_N_MELS: usize = 40;
pub const ENERGY_FLOOR: f64 = 1e-10;
/// Longest accepted waveform (10 s).
pub const MAX_SAMPLES: usize = 10 * SAMPLE_RATE as usize;
const F_MAX: f64 = 8000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<i16>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(KwsError::BadSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(KwsError::EmptyWaveform);
        }
        if samples.len() > MAX_SAMPLES {
            return Err(KwsError::AudioTooLong(samples.len()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelFrames {
    /// `T_f x n_mels` natural-log mel energies.
    pub frames: Array2<f64>,
}

impl LogMelFrames {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn frame_count(n_samples: usize) -> Result<usize> {
    if n_samples < FRAME_LEN {
        return Err(KwsError::AudioTooShort(n_samples));
    }
    Ok(1 + (n_samples - FRAME_LEN) / HOP)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency in Hz of mel bin `k` (0-based).
pub fn mel_center_hz(k: usize, n_mels: usize) -> f64 {
    let step = hz_to_mel(F_MAX) / (n_mels + 1) as f64;
    mel_to_hz(step * (k + 1) as f64)
}

/// `n_mels x (N_FFT/2 + 1)` triangular weights, peak 1 at each center.
pub fn mel_filterbank(n_mels: usize) -> Array2<f64> {
    let n_bins = N_FFT / 2 + 1;
    let step = hz_to_mel(F_MAX) / (n_mels + 1) as f64;
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(step * i as f64)).collect();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > lo && f < mid {
            (f - lo) / (mid - lo)
        } else if f >= mid && f < hi {
            (hi - f) / (hi - mid)
        } else {
            0.0
        }
    })
}

/// Periodic Hann window of the analysis frame length.
pub fn hann_window() -> Vec<f64> {
    (0..FRAME_LEN)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / FRAME_LEN as f64).cos())
        .collect()
}

/// Reusable log-mel extractor holding the FFT plan, window and filterbank.
pub struct LogMelExtractor {
    n_mels: usize,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Array2<f64>,
}

impl LogMelExtractor {
    pub fn new(n_mels: usize) -> Result<Self> {
        if n_mels < 8 {
            return Err(KwsError::BadArgument(format!("n_mels must be >= 8, got {n_mels}")));
        }
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Ok(Self {
            n_mels,
            fft,
            window: hann_window(),
            filterbank: mel_filterbank(n_mels),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn compute(&self, w: &Waveform) -> Result<LogMelFrames> {
        if w.sample_rate() != SAMPLE_RATE {
            return Err(KwsError::BadSampleRate(w.sample_rate()));
        }
        let n_frames = frame_count(w.len())?;
        let n_bins = N_FFT / 2 + 1;
        let samples: Vec<f64> = w.samples().iter().map(|&s| s as f64 / 32768.0).collect();
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = ndarray::Array1::<f64>::zeros(n_bins);
        let mut frames = Array2::zeros((n_frames, self.n_mels));
        for t in 0..n_frames {
            let chunk = &samples[t * HOP..t * HOP + FRAME_LEN];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < FRAME_LEN {
                    Complex::new(chunk[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
            let mel = self.filterbank.dot(&power);
            for (dst, e) in frames.row_mut(t).iter_mut().zip(mel.iter()) {
                *dst = e.max(ENERGY_FLOOR).ln();
            }
        }
        Ok(LogMelFrames { frames })
    }
}

pub fn compute_logmel(w: &Waveform, n_mels: usize) -> Result<LogMelFrames> {
    LogMelExtractor::new(n_mels)?.compute(w)
}
