//! GCC-PHAT time-delay estimation between the far-end reference and the
//! microphone signal.
//!
//! Delays longer than one analysis block are covered by correlating each
//! microphone block against reference blocks taken `q` blocks earlier.
//! Tile `q` resolves lags `q·B + r` for `r ∈ [-B/2, B/2)`, so the tiles
//! partition the search range and every lag is measured with at least 50%
//! block overlap.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioBuffer;
use crate::error::{AecError, Result};

pub const DEFAULT_BLOCK: usize = 4096;
pub const DEFAULT_FFT: usize = 8192;
pub const DEFAULT_MAX_DELAY: usize = 16_000;
pub const DEFAULT_SMOOTHING: f64 = 0.9;
pub const CONFIDENCE_THRESHOLD: f64 = 2.0;
/// Reference-block length used by streaming mode (4 s at 16 kHz).
pub const PREAMBLE_SAMPLES: usize = 64_000;

const PHAT_FLOOR: f64 = 1e-20;
/// Lags within this distance of the main peak are ignored when looking for
/// the secondary peak.
const PEAK_GUARD: usize = 3;

/// Estimated bulk delay of the microphone relative to the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayEstimate {
    /// Samples by which the reference must be delayed to line up with the
    /// microphone.
    pub delay: usize,
    /// Main correlation peak over the largest secondary peak.
    pub confidence: f64,
}

impl DelayEstimate {
    pub fn is_reliable(&self) -> bool {
        self.confidence >= CONFIDENCE_THRESHOLD
    }
}

/// Phase-transformed cross spectrum of one block pair.
#[derive(Debug, Clone)]
pub struct CrossSpectrum {
    pub bins: Vec<Complex64>,
    /// False when either block was all zeros; such blocks carry no phase
    /// information and are excluded from accumulation.
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdeConfig {
    pub block: usize,
    pub fft_size: usize,
    pub max_delay: usize,
    pub smoothing: f64,
}

impl Default for TdeConfig {
    fn default() -> Self {
        Self {
            block: DEFAULT_BLOCK,
            fft_size: DEFAULT_FFT,
            max_delay: DEFAULT_MAX_DELAY,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

impl TdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || 2 * self.block > self.fft_size {
            return Err(AecError::config(format!(
                "TDE block {} must be positive and at most half the FFT size {}",
                self.block, self.fft_size
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(AecError::config("TDE smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn plan(fft_size: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(fft_size), planner.plan_fft_inverse(fft_size))
}

fn padded_spectrum(block: &[f64], fft: &dyn Fft<f64>) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); fft.len()];
    for (b, &s) in buf.iter_mut().zip(block) {
        b.re = s;
    }
    fft.process(&mut buf);
    buf
}

fn phat(xs: &[Complex64], ds: &[Complex64]) -> Vec<Complex64> {
    xs.iter()
        .zip(ds)
        .map(|(x, d)| {
            let c = x * d.conj();
            c / c.norm().max(PHAT_FLOOR)
        })
        .collect()
}

/// `X(f)·conj(D(f)) / |X(f)·conj(D(f))|` over a zero-padded transform.
pub fn gcc_phat_cross_spectrum(
    x_block: &[f64],
    d_block: &[f64],
    fft_size: usize,
) -> Result<CrossSpectrum> {
    if x_block.len() != d_block.len() || 2 * x_block.len() > fft_size {
        return Err(AecError::shape(format!(
            "GCC-PHAT blocks of {} and {} samples with FFT size {fft_size}",
            x_block.len(),
            d_block.len()
        )));
    }
    if x_block.iter().all(|&v| v == 0.0) || d_block.iter().all(|&v| v == 0.0) {
        return Ok(CrossSpectrum { bins: vec![Complex64::new(0.0, 0.0); fft_size], valid: false });
    }
    let (fwd, _) = plan(fft_size);
    let xs = padded_spectrum(x_block, fwd.as_ref());
    let ds = padded_spectrum(d_block, fwd.as_ref());
    Ok(CrossSpectrum { bins: phat(&xs, &ds), valid: true })
}

/// Accumulating GCC-PHAT estimator for one stream.
pub struct DelayEstimator {
    cfg: TdeConfig,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Smoothed cross spectrum and number of accumulated blocks per tile.
    tiles: Vec<(Vec<Complex64>, u32)>,
}

impl DelayEstimator {
    pub fn new(cfg: TdeConfig) -> Result<Self> {
        cfg.validate()?;
        let (forward, inverse) = plan(cfg.fft_size);
        let n_tiles = (cfg.max_delay + cfg.block / 2) / cfg.block + 1;
        let tiles = vec![(vec![Complex64::new(0.0, 0.0); cfg.fft_size], 0); n_tiles];
        Ok(Self { cfg, forward, inverse, tiles })
    }

    /// Accumulates every complete block of `d` against the matching
    /// reference blocks of `x`.
    pub fn accumulate(&mut self, x: &[f64], d: &[f64]) {
        let b = self.cfg.block;
        let alpha = self.cfg.smoothing;
        let mut start = 0;
        while start + b <= d.len() {
            let d_block = &d[start..start + b];
            if d_block.iter().any(|&v| v != 0.0) {
                let ds = padded_spectrum(d_block, self.forward.as_ref());
                for (q, (acc, count)) in self.tiles.iter_mut().enumerate() {
                    let Some(x_start) = start.checked_sub(q * b) else { break };
                    let Some(x_block) = x.get(x_start..x_start + b) else { continue };
                    if x_block.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let xs = padded_spectrum(x_block, self.forward.as_ref());
                    for (a, c) in acc.iter_mut().zip(phat(&xs, &ds)) {
                        *a = alpha * *a + (1.0 - alpha) * c;
                    }
                    *count += 1;
                }
            }
            start += b;
        }
    }

    /// Generalized cross-correlation for lags `0..=max_delay`, normalized
    /// for block overlap. Lags whose tile saw no data are zero.
    pub fn correlation(&self) -> Vec<f64> {
        let b = self.cfg.block as isize;
        let n = self.cfg.fft_size;
        let alpha = self.cfg.smoothing;
        let mut corr = vec![0.0; self.cfg.max_delay + 1];
        for (q, (acc, count)) in self.tiles.iter().enumerate() {
            if *count == 0 {
                continue;
            }
            let debias = 1.0 - alpha.powi(*count as i32);
            let mut buf = acc.clone();
            self.inverse.process(&mut buf);
            let scale = 1.0 / (n as f64 * debias);
            let q = q as isize;
            for r in -b / 2..b / 2 {
                let k = q * b + r;
                if k < 0 || k as usize > self.cfg.max_delay {
                    continue;
                }
                // X·conj(D) peaks at lag tau = -r for d(n) = x(n - k).
                let idx = (-r).rem_euclid(n as isize) as usize;
                let overlap = (b - r.abs()) as f64 / b as f64;
                corr[k as usize] = buf[idx].re * scale / overlap;
            }
        }
        corr
    }

    pub fn estimate(&self) -> DelayEstimate {
        let corr = self.correlation();
        let (delay, &top) = corr
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("correlation is never empty");
        let second = corr
            .iter()
            .enumerate()
            .filter(|(k, _)| k.abs_diff(delay) > PEAK_GUARD)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        let confidence = if top <= 0.0 {
            0.0
        } else if second > 0.0 {
            top / second
        } else {
            f64::INFINITY
        };
        DelayEstimate { delay, confidence }
    }
}

/// Offline estimate over the whole of both signals.
pub fn estimate_delay(x: &AudioBuffer, d: &AudioBuffer, max_delay: usize) -> Result<DelayEstimate> {
    estimate_delay_with(x, d, &TdeConfig { max_delay, ..TdeConfig::default() })
}

pub fn estimate_delay_with(
    x: &AudioBuffer,
    d: &AudioBuffer,
    cfg: &TdeConfig,
) -> Result<DelayEstimate> {
    if x.sample_rate() != d.sample_rate() {
        return Err(AecError::config("TDE inputs differ in sample rate"));
    }
    let len = x.len().min(d.len());
    if len < cfg.block {
        return Err(AecError::EmptyInput { needed: cfg.block, got: len });
    }
    let mut est = DelayEstimator::new(*cfg)?;
    est.accumulate(&x.samples()[..len], &d.samples()[..len]);
    Ok(est.estimate())
}

/// Delays the reference by the estimated lag; output has `out_len` samples.
pub fn align(x: &AudioBuffer, est: &DelayEstimate, out_len: usize) -> AudioBuffer {
    let mut out = vec![0.0; out_len];
    if est.delay < out_len {
        let n = (out_len - est.delay).min(x.len());
        out[est.delay..est.delay + n].copy_from_slice(&x.samples()[..n]);
    }
    AudioBuffer::from_vec_unchecked(out, x.sample_rate())
}
