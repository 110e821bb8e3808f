//! Multidelay block frequency-domain adaptive filter.
//!
//! The echo path is modelled by `K` partitions of `N` taps. Each block of
//! `N` samples is filtered by overlap-save with a `2N` transform; the
//! gradient of every partition is constrained to `N` causal taps and
//! normalized per bin by the far-end power seen across all partitions.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{write_f32_blob, AecFrameOut, FREEZE_POWER};
use crate::audio::AudioBuffer;
use crate::error::{AecError, Result};

pub const DEFAULT_BLOCK: usize = 320;
pub const DEFAULT_TAIL_MS: f64 = 300.0;
pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_DELTA: f64 = 1e-6;
const SAMPLE_RATE: f64 = 16_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdfConfig {
    pub tail_ms: f64,
    pub block: usize,
    pub mu: f64,
    pub delta: f64,
}

impl Default for MdfConfig {
    fn default() -> Self {
        Self { tail_ms: DEFAULT_TAIL_MS, block: DEFAULT_BLOCK, mu: DEFAULT_MU, delta: DEFAULT_DELTA }
    }
}

pub struct MdfState {
    block: usize,
    partitions: usize,
    mu: f64,
    delta: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    x_prev: Vec<f64>,
    /// Far-end spectra, most recent first.
    history: VecDeque<Vec<Complex64>>,
    /// Frequency-domain taps, one `2N` vector per partition.
    taps: Vec<Vec<Complex64>>,
    /// Per-bin far-end power summed over the partitions in `history`.
    power: Vec<f64>,
}

pub fn mdf_create(tail_ms: f64, block_samples: usize, mu: f64, delta: f64) -> Result<MdfState> {
    if !(tail_ms > 0.0) || block_samples == 0 || !(mu >= 0.0) || !(delta > 0.0) {
        return Err(AecError::config(format!(
            "MDF needs tail > 0, block > 0, mu >= 0, delta > 0 (got {tail_ms}, {block_samples}, {mu}, {delta})"
        )));
    }
    let tail = (tail_ms * SAMPLE_RATE / 1000.0).round() as usize;
    let partitions = tail.div_ceil(block_samples).max(1);
    let n2 = 2 * block_samples;
    let mut planner = FftPlanner::new();
    let zero = Complex64::new(0.0, 0.0);
    Ok(MdfState {
        block: block_samples,
        partitions,
        mu,
        delta,
        forward: planner.plan_fft_forward(n2),
        inverse: planner.plan_fft_inverse(n2),
        x_prev: vec![0.0; block_samples],
        history: (0..partitions).map(|_| vec![zero; n2]).collect(),
        taps: vec![vec![zero; n2]; partitions],
        power: vec![0.0; n2],
    })
}

impl MdfState {
    pub fn from_config(cfg: &MdfConfig) -> Result<Self> {
        mdf_create(cfg.tail_ms, cfg.block, cfg.mu, cfg.delta)
    }

    pub fn partitions(&self) -> usize {
        self.partitions
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// Euclidean norm of the time-domain filter.
    pub fn tap_norm(&self) -> f64 {
        self.time_taps().iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    /// The `K·N`-tap impulse response currently modelled.
    pub fn time_taps(&self) -> Vec<f64> {
        let n2 = 2 * self.block;
        let mut out = Vec::with_capacity(self.partitions * self.block);
        for w in &self.taps {
            let mut buf = w.clone();
            self.inverse.process(&mut buf);
            out.extend(buf[..self.block].iter().map(|c| c.re / n2 as f64));
        }
        out
    }

    /// Writes the time-domain filter as little-endian `f32`.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        write_f32_blob(path.as_ref(), &self.time_taps())
    }

    pub fn process(&mut self, x_frame: &[f64], d_frame: &[f64]) -> Result<AecFrameOut> {
        let n = self.block;
        if x_frame.len() != n || d_frame.len() != n {
            return Err(AecError::shape(format!(
                "MDF expects {n}-sample frames, got {} and {}",
                x_frame.len(),
                d_frame.len()
            )));
        }
        if x_frame.iter().chain(d_frame).any(|v| !v.is_finite()) {
            return Err(AecError::Processing("non-finite sample in MDF input".into()));
        }
        let n2 = 2 * n;
        let zero = Complex64::new(0.0, 0.0);

        let mut xf: Vec<Complex64> = self
            .x_prev
            .iter()
            .chain(x_frame)
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        self.forward.process(&mut xf);
        self.history.pop_back();
        self.history.push_front(xf);
        self.power.iter_mut().for_each(|p| *p = 0.0);
        for xk in &self.history {
            for (p, v) in self.power.iter_mut().zip(xk) {
                *p += v.norm_sqr();
            }
        }
        self.x_prev.copy_from_slice(x_frame);

        let mut yf = vec![zero; n2];
        for (w, xk) in self.taps.iter().zip(&self.history) {
            for ((acc, wv), xv) in yf.iter_mut().zip(w).zip(xk) {
                *acc += wv * xv;
            }
        }
        self.inverse.process(&mut yf);
        let scale = 1.0 / n2 as f64;
        let y_frame: Vec<f64> = yf[n..].iter().map(|c| c.re * scale).collect();
        let e_frame: Vec<f64> = d_frame.iter().zip(&y_frame).map(|(d, y)| d - y).collect();

        let far_power = x_frame.iter().map(|v| v * v).sum::<f64>() / n as f64;
        if self.mu > 0.0 && far_power >= FREEZE_POWER {
            self.adapt(&e_frame);
        }
        Ok(AecFrameOut { e_frame, y_frame })
    }

    fn adapt(&mut self, e_frame: &[f64]) {
        let n = self.block;
        let n2 = 2 * n;
        let mut ef = vec![Complex64::new(0.0, 0.0); n2];
        for (slot, &e) in ef[n..].iter_mut().zip(e_frame) {
            slot.re = e;
        }
        self.forward.process(&mut ef);
        let norm: Vec<f64> = self.power.iter().map(|p| self.mu / (p + self.delta)).collect();
        let scale = 1.0 / n2 as f64;
        let mut grad = vec![Complex64::new(0.0, 0.0); n2];
        for (w, xk) in self.taps.iter_mut().zip(&self.history) {
            for (((g, xv), ev), s) in grad.iter_mut().zip(xk).zip(&ef).zip(&norm) {
                *g = xv.conj() * ev * *s;
            }
            self.inverse.process(&mut grad);
            // Keep only the causal first half of the correlation.
            for g in grad[..n].iter_mut() {
                *g *= scale;
            }
            for g in grad[n..].iter_mut() {
                *g = Complex64::new(0.0, 0.0);
            }
            self.forward.process(&mut grad);
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv += g;
            }
        }
    }

    /// Runs whole signals through the filter, zero-padding the last block.
    pub fn process_buffers(
        &mut self,
        x: &AudioBuffer,
        d: &AudioBuffer,
    ) -> Result<(AudioBuffer, AudioBuffer)> {
        if x.len() != d.len() || x.sample_rate() != d.sample_rate() {
            return Err(AecError::shape("MDF reference and microphone differ in length or rate"));
        }
        let len = d.len();
        let padded = len.div_ceil(self.block) * self.block;
        let (xs, ds) = (x.resized(padded), d.resized(padded));
        let mut e = Vec::with_capacity(padded);
        let mut y = Vec::with_capacity(padded);
        for start in (0..padded).step_by(self.block) {
            let out = self.process(
                &xs.samples()[start..start + self.block],
                &ds.samples()[start..start + self.block],
            )?;
            e.extend(out.e_frame);
            y.extend(out.y_frame);
        }
        e.truncate(len);
        y.truncate(len);
        let rate = d.sample_rate();
        Ok((AudioBuffer::from_vec_unchecked(e, rate), AudioBuffer::from_vec_unchecked(y, rate)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(len: usize, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
            .collect()
    }

    #[test]
    fn partition_counts() {
        assert_eq!(mdf_create(300.0, 320, 0.5, 1e-6).unwrap().partitions(), 15);
        assert_eq!(mdf_create(20.0, 320, 0.5, 1e-6).unwrap().partitions(), 1);
        assert!(mdf_create(0.0, 320, 0.5, 1e-6).is_err());
        assert!(mdf_create(300.0, 0, 0.5, 1e-6).is_err());
        assert!(mdf_create(300.0, 320, -0.1, 1e-6).is_err());
        assert!(mdf_create(300.0, 320, 0.5, 0.0).is_err());
    }

    #[test]
    fn zero_step_never_adapts() {
        let mut st = mdf_create(40.0, 64, 0.0, 1e-6).unwrap();
        let x = gauss(64 * 20, 0.1, 1);
        let d = gauss(64 * 20, 0.1, 2);
        for b in 0..20 {
            let out = st.process(&x[b * 64..(b + 1) * 64], &d[b * 64..(b + 1) * 64]).unwrap();
            assert!(out.y_frame.iter().all(|&v| v == 0.0));
        }
        assert_eq!(st.tap_norm(), 0.0);
    }

    #[test]
    fn silent_far_end_is_pass_through() {
        let mut st = mdf_create(40.0, 64, 0.5, 1e-6).unwrap();
        let d = gauss(64, 0.1, 3);
        for _ in 0..5 {
            let out = st.process(&[0.0; 64], &d).unwrap();
            assert!(out.y_frame.iter().all(|&v| v == 0.0));
            assert_eq!(out.e_frame, d);
        }
        assert_eq!(st.tap_norm(), 0.0);
    }

    #[test]
    fn nan_input_leaves_state_untouched() {
        let mut st = mdf_create(40.0, 64, 0.5, 1e-6).unwrap();
        let x = gauss(64, 0.1, 4);
        st.process(&x, &x).unwrap();
        let before = st.time_taps();
        let mut bad = x.clone();
        bad[3] = f64::NAN;
        assert!(matches!(st.process(&bad, &x), Err(AecError::Processing(_))));
        assert_eq!(st.time_taps(), before);
        assert!(st.process(&x[..10], &x[..10]).is_err());
    }

    #[test]
    fn identifies_short_path() {
        let block = 64;
        let mut st = mdf_create(8.0, block, 0.5, 1e-6).unwrap();
        let path = gauss(40, 0.2, 5);
        let x = gauss(block * 400, 0.1, 6);
        let d: Vec<f64> = (0..x.len())
            .map(|n| path.iter().enumerate().filter(|(k, _)| *k <= n).map(|(k, h)| h * x[n - k]).sum())
            .collect();
        let mut tail_err = 0.0;
        let mut tail_sig = 0.0;
        for b in 0..400 {
            let r = b * block..(b + 1) * block;
            let out = st.process(&x[r.clone()], &d[r.clone()]).unwrap();
            for (i, n) in r.enumerate() {
                assert!((out.e_frame[i] + out.y_frame[i] - d[n]).abs() <= 1e-9 * d[n].abs().max(1e-3));
                if b >= 300 {
                    tail_err += out.e_frame[i].powi(2);
                    tail_sig += d[n].powi(2);
                }
            }
        }
        assert!(10.0 * (tail_sig / tail_err).log10() > 60.0);
        let taps = st.time_taps();
        for (k, h) in path.iter().enumerate() {
            assert!((taps[k] - h).abs() < 1e-3);
        }
    }

    #[test]
    fn snapshot_blob_size() {
        let st = mdf_create(40.0, 64, 0.5, 1e-6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mdf.f32");
        st.write_snapshot(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), st.partitions() * 64 * 4);
    }
}
