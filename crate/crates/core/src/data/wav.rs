use std::path::Path;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{KwsError, Result};

/// Reads a RIFF/WAVE file; only 16-bit PCM, mono, 16 kHz is accepted.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => KwsError::io(path, io),
        other => KwsError::BadFormat(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(KwsError::BadFormat(format!(
            "{}: expected 16-bit PCM, got {:?} {} bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(KwsError::NotMono(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(KwsError::BadSampleRate(spec.sample_rate));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| KwsError::BadFormat(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => KwsError::io(path, io),
        other => KwsError::BadFormat(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in w.samples() {
        writer.write_sample(s).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, rate: u32, bits: u16, n: usize) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for i in 0..n * channels as usize {
            if bits == 16 {
                w.write_sample((i % 100) as i16).unwrap();
            } else {
                w.write_sample((i % 100) as i8).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn accepts_mono_16k() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ok.wav");
        write_raw(&p, 1, 16000, 16, 16000);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 16000);
        let p2 = dir.path().join("copy.wav");
        write_wav(&p2, &w).unwrap();
        assert_eq!(load_wav(&p2).unwrap(), w);
    }

    #[test]
    fn rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("stereo.wav");
        write_raw(&stereo, 2, 16000, 16, 100);
        assert!(matches!(load_wav(&stereo), Err(KwsError::NotMono(2))));
        let cd = dir.path().join("cd.wav");
        write_raw(&cd, 1, 44100, 16, 100);
        assert!(matches!(load_wav(&cd), Err(KwsError::BadSampleRate(44100))));
        let eight = dir.path().join("eight.wav");
        write_raw(&eight, 1, 16000, 8, 100);
        assert!(matches!(load_wav(&eight), Err(KwsError::BadFormat(_))));
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"not a wav file at all").unwrap();
        assert!(matches!(load_wav(&junk), Err(KwsError::BadFormat(_))));
    }
}
