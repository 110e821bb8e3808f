//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frames start at sample 0 with no head padding, so analysis adds no
//! lookahead. The default analysis/synthesis pair is a periodic
//! square-root Hann window at 50% overlap, whose squared sum is exactly one
//! on the fully overlapped interior.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioBuffer;
use crate::error::{AecError, Result};

/// Sampling rate of the processed wide band.
pub const WIDEBAND_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic square-root Hann, used for both analysis and synthesis.
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 20 ms window, 10 ms hop and a 320-point transform at 16 kHz.
    fn default() -> Self {
        Self { win_len: 320, hop: 160, fft_size: 320, window: WindowKind::SqrtHann }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::SqrtHann => (0..self.win_len)
                .map(|n| {
                    let hann = 0.5 - 0.5 * (2.0 * PI * n as f64 / self.win_len as f64).cos();
                    hann.sqrt()
                })
                .collect(),
        }
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.win_len {
            0
        } else {
            (len - self.win_len) / self.hop + 1
        }
    }

    /// Checks ordering constraints and the constant-overlap-add property of
    /// the analysis-synthesis window product at this hop.
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_len || self.win_len > self.fft_size {
            return Err(AecError::config(format!(
                "need 0 < hop <= win_len <= fft_size, got hop={} win_len={} fft_size={}",
                self.hop, self.win_len, self.fft_size
            )));
        }
        let w = self.window();
        let mut reference = None;
        for phase in 0..self.hop {
            let sum: f64 = (phase..self.win_len).step_by(self.hop).map(|n| w[n] * w[n]).sum();
            match reference {
                None => reference = Some(sum),
                Some(r) if (sum - r).abs() > 1e-9 * r.max(1.0) => {
                    return Err(AecError::config(format!(
                        "window does not satisfy COLA at hop {}",
                        self.hop
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Complex T×F time-frequency matrix, time-major with the DC bin first.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<Complex64>,
    frames: usize,
    bins: usize,
}

impl Spectrogram {
    pub fn new(data: Vec<Complex64>, frames: usize, bins: usize) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(AecError::shape(format!(
                "spectrogram data has {} entries, expected {frames}x{bins}",
                data.len()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(AecError::Processing("non-finite spectrogram entry".into()));
        }
        Ok(Self { data, frames, bins })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { data: vec![Complex64::new(0.0, 0.0); frames * bins], frames, bins }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    pub fn set(&mut self, t: usize, f: usize, value: Complex64) {
        self.data[t * self.bins + f] = value;
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            data: self.data.iter().map(|c| c * gain).collect(),
            frames: self.frames,
            bins: self.bins,
        }
    }

    pub(crate) fn same_shape(&self, other: &Spectrogram, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AecError::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Reusable forward/inverse transforms for one configuration.
#[derive(Clone)]
pub struct StftEngine {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Windowed one-sided spectrum of a single `win_len` frame.
    pub fn analyze_frame(&self, frame: &[f64], out: &mut [Complex64]) {
        let n = self.cfg.fft_size;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (i, (&s, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i] = Complex64::new(s * w, 0.0);
        }
        self.forward.process(&mut buf);
        out.copy_from_slice(&buf[..self.cfg.bins()]);
    }

    /// Inverse transform of one frame followed by the synthesis window.
    pub fn synthesize_frame(&self, spectrum: &[Complex64], out: &mut [f64]) {
        let n = self.cfg.fft_size;
        let bins = self.cfg.bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..bins].copy_from_slice(spectrum);
        // Hermitian completion; DC and Nyquist imaginary parts are dropped.
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[n / 2].im = 0.0;
        }
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (i, (o, &w)) in out.iter_mut().zip(&self.window).enumerate() {
            *o = buf[i].re * scale * w;
        }
    }

    pub fn stft(&self, buf: &AudioBuffer) -> Result<Spectrogram> {
        if buf.sample_rate() != WIDEBAND_RATE {
            return Err(AecError::config(format!(
                "STFT expects {WIDEBAND_RATE} Hz input, got {}",
                buf.sample_rate()
            )));
        }
        let frames = self.cfg.frames_for(buf.len());
        if frames == 0 {
            return Err(AecError::EmptyInput { needed: self.cfg.win_len, got: buf.len() });
        }
        let bins = self.cfg.bins();
        let mut spec = Spectrogram::zeros(frames, bins);
        let x = buf.samples();
        for t in 0..frames {
            let start = t * self.cfg.hop;
            self.analyze_frame(&x[start..start + self.cfg.win_len], spec.frame_mut(t));
        }
        Ok(spec)
    }

    /// Weighted overlap-add; output length is `(T - 1) * hop + win_len`.
    pub fn istft(&self, spec: &Spectrogram) -> Result<AudioBuffer> {
        if spec.bins() != self.cfg.bins() {
            return Err(AecError::shape(format!(
                "spectrogram has {} bins, config expects {}",
                spec.bins(),
                self.cfg.bins()
            )));
        }
        if spec.frames() == 0 {
            return Ok(AudioBuffer::zeros(0, WIDEBAND_RATE));
        }
        let len = (spec.frames() - 1) * self.cfg.hop + self.cfg.win_len;
        let mut out = vec![0.0; len];
        let mut frame = vec![0.0; self.cfg.win_len];
        for t in 0..spec.frames() {
            self.synthesize_frame(spec.frame(t), &mut frame);
            let start = t * self.cfg.hop;
            for (o, s) in out[start..start + self.cfg.win_len].iter_mut().zip(&frame) {
                *o += s;
            }
        }
        Ok(AudioBuffer::from_vec_unchecked(out, WIDEBAND_RATE))
    }
}

pub fn stft(buf: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    StftEngine::new(*cfg)?.stft(buf)
}

pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<AudioBuffer> {
    StftEngine::new(*cfg)?.istft(spec)
}

/// Power-law magnitude compression with the phase left untouched:
/// `|X|^p · e^{j∠X}`. Using `1/p` as the exponent undoes it.
pub fn compress_spectrum(spec: &Spectrogram, p: f64) -> Result<Spectrogram> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(AecError::config(format!("compression exponent must be positive, got {p}")));
    }
    let data = spec
        .data()
        .iter()
        .map(|&c| {
            let mag = c.norm();
            if mag > 0.0 {
                c * mag.powf(p - 1.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok(Spectrogram { data, frames: spec.frames(), bins: spec.bins() })
}

/// Exponent used for feature and output compression.
pub const COMPRESSION_EXPONENT: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                        Complex64::new(v * ang.cos(), v * ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    fn noise(len: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000).unwrap()
    }

    #[test]
    fn silence_gives_zero_frame() {
        let spec = stft(&AudioBuffer::zeros(320, 16_000), &StftConfig::default()).unwrap();
        assert_eq!(spec.shape(), (1, 161));
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn one_second_framing() {
        let spec = stft(&AudioBuffer::zeros(16_000, 16_000), &StftConfig::default()).unwrap();
        assert_eq!(spec.shape(), (99, 161));
    }

    #[test]
    fn short_buffer_is_empty_input() {
        let err = stft(&AudioBuffer::zeros(319, 16_000), &StftConfig::default()).unwrap_err();
        assert!(matches!(err, AecError::EmptyInput { needed: 320, got: 319 }));
    }

    #[test]
    fn wrong_rate_rejected() {
        assert!(stft(&AudioBuffer::zeros(960, 48_000), &StftConfig::default()).is_err());
    }

    #[test]
    fn impulse_matches_naive_dft() {
        let cfg = StftConfig::default();
        // Window value at 0 is zero for a periodic sqrt-Hann, so place the
        // impulse where the window is nonzero as well.
        for pos in [0usize, 37] {
            let mut x = vec![0.0; 320];
            x[pos] = 1.0;
            let spec = stft(&AudioBuffer::new(x.clone(), 16_000).unwrap(), &cfg).unwrap();
            let w = cfg.window();
            let windowed: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b).collect();
            let oracle = naive_dft(&windowed);
            for (a, b) in spec.frame(0).iter().zip(&oracle) {
                assert!((a - b).norm() < 1e-12);
                assert!((a.norm() - w[pos]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::default();
        let x = noise(16_000, 1);
        let y = istft(&stft(&x, &cfg).unwrap(), &cfg).unwrap();
        let (a, b) = (cfg.win_len, y.len() - cfg.win_len);
        let err: f64 = (a..b).map(|i| (x.samples()[i] - y.samples()[i]).powi(2)).sum();
        let sig: f64 = (a..b).map(|i| x.samples()[i].powi(2)).sum();
        assert!((err / sig).sqrt() < 1e-6);
    }

    #[test]
    fn zero_spectrogram_gives_zero_signal() {
        let y = istft(&Spectrogram::zeros(5, 161), &StftConfig::default()).unwrap();
        assert_eq!(y.len(), 4 * 160 + 320);
        assert!(y.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_frame_inverse_matches_naive_idft() {
        let cfg = StftConfig::default();
        let w = cfg.window();
        let windowed: Vec<f64> = (0..320)
            .map(|n| w[n] * (2.0 * PI * 440.0 * n as f64 / 16_000.0).sin())
            .collect();
        let spectrum = naive_dft(&windowed);
        let spec = Spectrogram::new(spectrum.clone(), 1, 161).unwrap();
        let y = istft(&spec, &cfg).unwrap();
        // Naive inverse of the one-sided spectrum, then the synthesis taper.
        for n in 0..320 {
            let mut acc = spectrum[0].re + spectrum[160].re * (PI * n as f64).cos();
            for (k, c) in spectrum.iter().enumerate().take(160).skip(1) {
                let ang = 2.0 * PI * (k * n) as f64 / 320.0;
                acc += 2.0 * (c.re * ang.cos() - c.im * ang.sin());
            }
            let expected = acc / 320.0 * w[n];
            assert!((y.samples()[n] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn istft_rejects_bin_mismatch() {
        assert!(matches!(
            istft(&Spectrogram::zeros(2, 100), &StftConfig::default()),
            Err(AecError::Shape(_))
        ));
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = noise(3_200, 9);
        let spec = stft(&x, &cfg).unwrap();
        let w = cfg.window();
        for t in 0..spec.frames() {
            let time: f64 = (0..320).map(|n| (x.samples()[t * 160 + n] * w[n]).powi(2)).sum();
            let f = spec.frame(t);
            let mut freq = f[0].norm_sqr() + f[160].norm_sqr();
            freq += 2.0 * f[1..160].iter().map(|c| c.norm_sqr()).sum::<f64>();
            freq /= 320.0;
            assert!((freq - time).abs() <= 1e-6 * time);
        }
    }

    #[test]
    fn compression_examples() {
        let c = Complex64::from_polar(4.0, PI / 3.0);
        let spec = Spectrogram::new(vec![c, Complex64::new(0.0, 0.0)], 1, 2).unwrap();
        let out = compress_spectrum(&spec, 0.5).unwrap();
        assert!((out.get(0, 0).norm() - 2.0).abs() < 1e-12);
        assert!((out.get(0, 0).arg() - PI / 3.0).abs() < 1e-12);
        assert_eq!(out.get(0, 1).norm(), 0.0);
        assert_eq!(compress_spectrum(&spec, 1.0).unwrap(), spec);
        let back = compress_spectrum(&out, 2.0).unwrap();
        assert!((back.get(0, 0) - c).norm() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let bad = StftConfig { hop: 400, ..StftConfig::default() };
        assert!(bad.validate().is_err());
        let not_cola = StftConfig { hop: 120, ..StftConfig::default() };
        assert!(not_cola.validate().is_err());
    }
}
