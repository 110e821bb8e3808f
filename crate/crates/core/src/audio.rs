//! Time-domain signals and WAV file I/O.

use std::path::Path;

use crate::error::{AecError, Result};

/// Mono time-domain signal with its sampling rate.
///
/// Samples are held in `f64` so that linear decompositions such as
/// `d = e + y` can be checked to tight tolerances. Non-finite samples are
/// rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AecError::config("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AecError::Processing(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn from_f32(samples: &[f32], sample_rate: u32) -> Result<Self> {
        Self::new(samples.iter().map(|&s| s as f64).collect(), sample_rate)
    }

    /// Internal constructor for buffers whose samples are known finite.
    pub(crate) fn from_vec_unchecked(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self { samples, sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
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

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Copy of the buffer cropped or zero-padded to `len` samples.
    pub fn resized(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self { samples, sample_rate: self.sample_rate }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn segment(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.samples.len());
        let start = start.min(end);
        Self { samples: self.samples[start..end].to_vec(), sample_rate: self.sample_rate }
    }
}

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

const SUPPORTED_RATES: [u32; 2] = [16_000, 48_000];

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AecError::Format(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if !SUPPORTED_RATES.contains(&spec.sample_rate) {
        return Err(AecError::Format(format!(
            "{}: unsupported sample rate {}",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(AecError::Format(format!(
                "{}: unsupported encoding {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file. Samples outside [-1, 1] are clamped.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer, format: WavFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in buf.samples() {
        let s = s.clamp(-1.0, 1.0);
        match format {
            WavFormat::Pcm16 => writer.write_sample((s * 32767.0).round() as i16)?,
            WavFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(AudioBuffer::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(AudioBuffer::new(vec![f64::INFINITY], 16_000).is_err());
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn wav_float_round_trip_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let buf = AudioBuffer::new(vec![0.25, -0.5, 1.5, -2.0], 48_000).unwrap();
        write_wav(&path, &buf, WavFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 48_000);
        assert_eq!(back.samples(), &[0.25, -0.5, 1.0, -1.0]);
    }

    #[test]
    fn wav_pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let buf = AudioBuffer::new(vec![0.0, 0.5, -0.5, 0.999], 16_000).unwrap();
        write_wav(&path, &buf, WavFormat::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in buf.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }

    #[test]
    fn rejects_unsupported_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let buf = AudioBuffer::new(vec![0.0; 8], 8_000).unwrap();
        write_wav(&path, &buf, WavFormat::Pcm16).unwrap();
        assert!(matches!(read_wav(&path), Err(AecError::Format(_))));
    }
}
