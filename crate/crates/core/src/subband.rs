//! Three-band cosine-modulated FIR filterbank for full-band (48 kHz)
//! operation.
//!
//! The full-band signal is split into three critically sampled 16 kHz
//! bands. Band 0 (0–8 kHz) is the wide band handed to the echo canceller;
//! bands 1 and 2 (8–16 kHz and 16–24 kHz) are kept in the subband domain,
//! scaled frame by frame with the gain derived from the processed wide
//! band, and recombined on synthesis.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::audio::AudioBuffer;
use crate::error::{AecError, Result};
use crate::stft::{istft, Spectrogram, StftConfig, WIDEBAND_RATE};

pub const FULLBAND_RATE: u32 = 48_000;
pub const BANDS: usize = 3;
pub const DEFAULT_TAPS: usize = 96;
pub const KAISER_BETA: f64 = 9.0;

/// Analysis/synthesis filters derived from one lowpass prototype.
#[derive(Debug, Clone)]
pub struct Filterbank {
    prototype: Vec<f64>,
    analysis: [Vec<f64>; BANDS],
    synthesis: [Vec<f64>; BANDS],
}

impl Filterbank {
    pub fn prototype(&self) -> &[f64] {
        &self.prototype
    }

    pub fn analysis_filter(&self, band: usize) -> &[f64] {
        &self.analysis[band]
    }

    pub fn bands(&self) -> usize {
        BANDS
    }

    pub fn decimation(&self) -> usize {
        BANDS
    }

    /// End-to-end analysis+synthesis delay in full-band samples.
    pub fn group_delay(&self) -> usize {
        self.prototype.len() - 1
    }

    /// Writes the prototype followed by the three analysis and three
    /// synthesis filters as little-endian `f32`.
    pub fn write_taps(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let all = std::iter::once(&self.prototype)
            .chain(self.analysis.iter())
            .chain(self.synthesis.iter());
        for taps in all {
            for &t in taps {
                file.write_all(&(t as f32).to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn kaiser(len: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (len - 1) as f64;
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

/// Kaiser-windowed sinc lowpass with unit DC gain. `cutoff` in rad/sample.
fn windowed_sinc(len: usize, cutoff: f64, beta: f64) -> Vec<f64> {
    let center = (len - 1) as f64 / 2.0;
    let win = kaiser(len, beta);
    let mut taps: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - center;
            let sinc = if t == 0.0 { cutoff / PI } else { (cutoff * t).sin() / (PI * t) };
            sinc * win[n]
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= dc);
    taps
}

fn magnitude_sq(taps: &[f64], omega: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &h) in taps.iter().enumerate() {
        re += h * (omega * n as f64).cos();
        im -= h * (omega * n as f64).sin();
    }
    re * re + im * im
}

/// Worst-case deviation from power complementarity across one band width.
fn complementarity_error(taps: &[f64]) -> f64 {
    let band = PI / BANDS as f64;
    (0..=128)
        .map(|i| {
            let w = band * i as f64 / 128.0;
            (magnitude_sq(taps, w) + magnitude_sq(taps, band - w) - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Designs the bank: a Kaiser (β = 9) windowed-sinc prototype whose cutoff
/// is tuned for power complementarity, cosine-modulated onto three bands.
pub fn design_filterbank(taps_per_band: usize) -> Result<Filterbank> {
    if taps_per_band < 32 || !taps_per_band.is_multiple_of(2) {
        return Err(AecError::config(format!(
            "filterbank length must be even and >= 32, got {taps_per_band}"
        )));
    }
    let m = BANDS as f64;
    let nominal = PI / (2.0 * m);

    // Golden-section search over the prototype cutoff.
    let objective = |c: f64| complementarity_error(&windowed_sinc(taps_per_band, c, KAISER_BETA));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.7 * nominal, 1.3 * nominal);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (objective(x1), objective(x2));
    for _ in 0..60 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = objective(x2);
        }
    }
    let prototype = windowed_sinc(taps_per_band, (lo + hi) / 2.0, KAISER_BETA);

    let center = (taps_per_band - 1) as f64 / 2.0;
    let modulate = |k: usize, sign: f64| -> Vec<f64> {
        let phase = if k.is_multiple_of(2) { PI / 4.0 } else { -PI / 4.0 };
        prototype
            .iter()
            .enumerate()
            .map(|(n, &p)| {
                let arg = (2 * k + 1) as f64 * PI / (2.0 * m) * (n as f64 - center);
                2.0 * p * (arg + sign * phase).cos()
            })
            .collect()
    };
    let analysis = [modulate(0, 1.0), modulate(1, 1.0), modulate(2, 1.0)];
    // Synthesis carries the interpolation gain M.
    let synthesis = [0, 1, 2].map(|k| modulate(k, -1.0).into_iter().map(|v| v * m).collect());
    Ok(Filterbank { prototype, analysis, synthesis })
}

/// Wide band plus the two retained high bands, all at 16 kHz.
#[derive(Debug, Clone)]
pub struct SubbandSignal {
    pub wide: AudioBuffer,
    pub high: [Vec<f64>; 2],
    /// Length of the full-band input in samples.
    pub full_len: usize,
}

impl SubbandSignal {
    pub fn band_len(&self) -> usize {
        self.wide.len()
    }
}

pub fn split(full: &AudioBuffer, fb: &Filterbank) -> Result<SubbandSignal> {
    if full.sample_rate() != FULLBAND_RATE {
        return Err(AecError::config(format!(
            "subband split expects {FULLBAND_RATE} Hz, got {}",
            full.sample_rate()
        )));
    }
    let x = full.samples();
    let band_len = x.len().div_ceil(BANDS);
    let mut bands: [Vec<f64>; BANDS] = Default::default();
    for (k, out) in bands.iter_mut().enumerate() {
        let h = &fb.analysis[k];
        *out = (0..band_len)
            .map(|m| {
                let n0 = m * BANDS;
                let taps = h.len().min(n0 + 1);
                let mut acc = 0.0;
                for (i, &hv) in h[..taps].iter().enumerate() {
                    if let Some(&xv) = x.get(n0 - i) {
                        acc += hv * xv;
                    }
                }
                acc
            })
            .collect();
    }
    let [wide, b1, b2] = bands;
    Ok(SubbandSignal {
        wide: AudioBuffer::from_vec_unchecked(wide, WIDEBAND_RATE),
        high: [b1, b2],
        full_len: x.len(),
    })
}

/// Frame-wise attenuation applied to the high bands.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTrack {
    pub g: Vec<f64>,
}

/// One-based inclusive bin ranges `[a, b]` and `[c, d]` used for the gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GainBandConfig {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

impl Default for GainBandConfig {
    /// 0.5–4 kHz and 6–8 kHz at 50 Hz bin spacing.
    fn default() -> Self {
        Self { a: 11, b: 81, c: 121, d: 161 }
    }
}

impl GainBandConfig {
    pub fn validate(&self, bins: usize) -> Result<()> {
        let ok = 1 <= self.a
            && self.a < self.b
            && self.b <= bins
            && self.b < self.c
            && self.c < self.d
            && self.d <= bins;
        if ok {
            Ok(())
        } else {
            Err(AecError::config(format!("invalid gain bands {self:?} for {bins} bins")))
        }
    }
}

pub const GAIN_MAX: f64 = 1.0;
pub const GAIN_FLOOR: f64 = 1e-8;

/// Per-frame minimum of the two band magnitude ratios `Σ|Ŝ| / Σ|D|`,
/// clamped to `[0, GAIN_MAX]`.
pub fn highband_gain(
    s_hat: &Spectrogram,
    d: &Spectrogram,
    cfg: &GainBandConfig,
) -> Result<GainTrack> {
    s_hat.same_shape(d, "highband_gain")?;
    cfg.validate(d.bins())?;
    let band_sum = |frame: &[num_complex::Complex64], lo: usize, hi: usize| -> f64 {
        frame[lo - 1..hi].iter().map(|c| c.norm()).sum()
    };
    let g = (0..d.frames())
        .map(|t| {
            let (sf, df) = (s_hat.frame(t), d.frame(t));
            let ratios = [(cfg.a, cfg.b), (cfg.c, cfg.d)]
                .iter()
                .filter_map(|&(lo, hi)| {
                    let den = band_sum(df, lo, hi);
                    (den > GAIN_FLOOR).then(|| band_sum(sf, lo, hi) / den)
                })
                .fold(f64::INFINITY, f64::min);
            if ratios.is_finite() {
                ratios.clamp(0.0, GAIN_MAX)
            } else {
                0.0
            }
        })
        .collect();
    Ok(GainTrack { g })
}

/// Recombines the processed wide band `istft(Ŝ)` with the high bands scaled
/// by `g`. Gain `g(t)` holds over the hop-sized block starting at `t·hop`.
pub fn synthesize(
    s_hat: &Spectrogram,
    sub: &SubbandSignal,
    g: &GainTrack,
    fb: &Filterbank,
    stft_cfg: &StftConfig,
) -> Result<AudioBuffer> {
    if g.g.len() != s_hat.frames() {
        return Err(AecError::shape(format!(
            "gain track has {} frames, spectrum has {}",
            g.g.len(),
            s_hat.frames()
        )));
    }
    let band_len = sub.band_len();
    if s_hat.frames() != stft_cfg.frames_for(band_len) {
        return Err(AecError::shape(format!(
            "spectrum has {} frames, subband signal of {band_len} samples gives {}",
            s_hat.frames(),
            stft_cfg.frames_for(band_len)
        )));
    }
    if sub.high.iter().any(|h| h.len() != band_len) {
        return Err(AecError::shape("high bands differ in length from the wide band"));
    }
    let wide = istft(s_hat, stft_cfg)?.resized(band_len);
    let last = s_hat.frames().saturating_sub(1);
    let gain_at = |m: usize| g.g.get((m / stft_cfg.hop).min(last)).copied().unwrap_or(0.0);
    let high: Vec<Vec<f64>> = sub
        .high
        .iter()
        .map(|h| h.iter().enumerate().map(|(m, v)| v * gain_at(m)).collect())
        .collect();
    let bands = [wide.samples(), &high[0], &high[1]];
    Ok(AudioBuffer::from_vec_unchecked(recombine(&bands, fb, sub.full_len), FULLBAND_RATE))
}

/// Interpolate, filter and sum the three subband signals.
pub(crate) fn recombine(bands: &[&[f64]; BANDS], fb: &Filterbank, out_len: usize) -> Vec<f64> {
    let taps = fb.prototype.len();
    let mut out = vec![0.0; out_len];
    for (k, band) in bands.iter().enumerate() {
        let f = &fb.synthesis[k];
        for (n, o) in out.iter_mut().enumerate() {
            // Only polyphase terms n - 3m in [0, taps) contribute.
            let m_hi = n / BANDS;
            let m_lo = (n + 1).saturating_sub(taps).div_ceil(BANDS);
            let mut acc = 0.0;
            for m in m_lo..=m_hi.min(band.len().saturating_sub(1)) {
                acc += f[n - m * BANDS] * band[m];
            }
            *o += acc;
        }
    }
    out
}
