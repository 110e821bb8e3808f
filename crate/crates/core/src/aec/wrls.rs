//! Per-bin recursive least squares in the STFT domain.
//!
//! Every frequency bin carries an independent `L`-tap complex filter over
//! the last `L` reference frames. The inverse correlation matrix is updated
//! with exponential forgetting `λ`; weighting of the error is implicit in
//! that forgetting.

use std::path::Path;

use num_complex::Complex64;

use super::{write_f32_blob, FREEZE_POWER};
use crate::error::{AecError, Result};
use crate::stft::Spectrogram;

pub const DEFAULT_TAPS: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 0.999;
pub const DEFAULT_DELTA_INIT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrlsConfig {
    pub taps: usize,
    pub lambda: f64,
    pub delta_init: f64,
}

impl Default for WrlsConfig {
    fn default() -> Self {
        Self { taps: DEFAULT_TAPS, lambda: DEFAULT_LAMBDA, delta_init: DEFAULT_DELTA_INIT }
    }
}

#[derive(Debug, Clone)]
struct BinState {
    /// Filter taps; the echo estimate is `wᴴ·x`.
    w: Vec<Complex64>,
    /// Row-major `L×L` inverse correlation matrix.
    p: Vec<Complex64>,
    /// Reference history, most recent first.
    x: Vec<Complex64>,
}

impl BinState {
    fn new(taps: usize, delta_init: f64) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        let mut p = vec![zero; taps * taps];
        for i in 0..taps {
            p[i * taps + i] = Complex64::new(1.0 / delta_init, 0.0);
        }
        Self { w: vec![zero; taps], p, x: vec![zero; taps] }
    }

    fn reset_correlation(&mut self, delta_init: f64) {
        let taps = self.w.len();
        self.p.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for i in 0..taps {
            self.p[i * taps + i] = Complex64::new(1.0 / delta_init, 0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct WrlsState {
    taps: usize,
    lambda: f64,
    delta_init: f64,
    bins: Vec<BinState>,
    reinit_events: usize,
}

pub fn wrls_create(taps: usize, lambda: f64, delta_init: f64, bins: usize) -> Result<WrlsState> {
    if taps == 0 {
        return Err(AecError::config("wRLS needs at least one tap"));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(AecError::config(format!("forgetting factor must lie in (0, 1), got {lambda}")));
    }
    if !(delta_init > 0.0 && delta_init.is_finite()) {
        return Err(AecError::config(format!("delta_init must be positive, got {delta_init}")));
    }
    Ok(WrlsState {
        taps,
        lambda,
        delta_init,
        bins: vec![BinState::new(taps, delta_init); bins],
        reinit_events: 0,
    })
}

impl WrlsState {
    pub fn from_config(cfg: &WrlsConfig, bins: usize) -> Result<Self> {
        wrls_create(cfg.taps, cfg.lambda, cfg.delta_init, bins)
    }

    pub fn bins(&self) -> usize {
        self.bins.len()
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    /// Number of bins re-initialized after losing positive definiteness.
    pub fn reinit_events(&self) -> usize {
        self.reinit_events
    }

    pub fn tap_norm(&self) -> f64 {
        self.bins
            .iter()
            .flat_map(|b| b.w.iter())
            .map(|w| w.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Checks each inverse correlation matrix for Hermitian symmetry and a
    /// positive real diagonal.
    pub fn correlations_hermitian_pd(&self, tol: f64) -> bool {
        let l = self.taps;
        self.bins.iter().all(|b| {
            (0..l).all(|i| {
                let d = b.p[i * l + i];
                d.re > 0.0
                    && d.im.abs() <= tol * d.re
                    && (0..l).all(|j| (b.p[i * l + j] - b.p[j * l + i].conj()).norm() <= tol * d.re)
            })
        })
    }

    /// Writes taps as interleaved (re, im) `f32`, bin-major.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let flat: Vec<f64> =
            self.bins.iter().flat_map(|b| b.w.iter()).flat_map(|w| [w.re, w.im]).collect();
        write_f32_blob(path.as_ref(), &flat)
    }

    /// Processes one frame; returns `(E, Y)` with `E = D − Y` per bin.
    pub fn process(
        &mut self,
        x_frame: &[Complex64],
        d_frame: &[Complex64],
    ) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        let nb = self.bins.len();
        if x_frame.len() != nb || d_frame.len() != nb {
            return Err(AecError::shape(format!(
                "wRLS expects {nb}-bin frames, got {} and {}",
                x_frame.len(),
                d_frame.len()
            )));
        }
        if x_frame.iter().chain(d_frame).any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(AecError::Processing("non-finite value in wRLS input".into()));
        }
        let adapt = frame_mean_square(x_frame) >= FREEZE_POWER;
        let l = self.taps;
        let (lambda, delta_init) = (self.lambda, self.delta_init);
        let mut e_out = Vec::with_capacity(nb);
        let mut y_out = Vec::with_capacity(nb);
        let mut pi = vec![Complex64::new(0.0, 0.0); l];
        for ((bin, &xv), &dv) in self.bins.iter_mut().zip(x_frame).zip(d_frame) {
            bin.x.rotate_right(1);
            bin.x[0] = xv;
            let y: Complex64 = bin.w.iter().zip(&bin.x).map(|(w, x)| w.conj() * x).sum();
            let e = dv - y;
            y_out.push(y);
            e_out.push(e);
            if !adapt {
                continue;
            }
            // pi = P·x, denom = λ + xᴴ·P·x
            for (i, slot) in pi.iter_mut().enumerate() {
                *slot = bin.p[i * l..(i + 1) * l].iter().zip(&bin.x).map(|(p, x)| p * x).sum();
            }
            let quad: Complex64 = bin.x.iter().zip(&pi).map(|(x, p)| x.conj() * p).sum();
            let denom = lambda + quad.re;
            if !(denom > 0.0 && denom.is_finite()) || quad.re < 0.0 {
                bin.reset_correlation(delta_init);
                self.reinit_events += 1;
                continue;
            }
            let inv = 1.0 / denom;
            let ec = e.conj();
            for (w, p) in bin.w.iter_mut().zip(&pi) {
                *w += p * inv * ec;
            }
            // P ← (P − k·πᴴ)/λ with k = π/denom, then re-symmetrize.
            let scale = 1.0 / lambda;
            for i in 0..l {
                let ki = pi[i] * inv;
                for j in 0..l {
                    let v = &mut bin.p[i * l + j];
                    *v = (*v - ki * pi[j].conj()) * scale;
                }
            }
            let mut healthy = true;
            for i in 0..l {
                let d = &mut bin.p[i * l + i];
                d.im = 0.0;
                healthy &= d.re > 0.0 && d.re.is_finite();
                for j in i + 1..l {
                    let avg = (bin.p[i * l + j] + bin.p[j * l + i].conj()) * 0.5;
                    bin.p[i * l + j] = avg;
                    bin.p[j * l + i] = avg.conj();
                }
            }
            if !healthy {
                bin.reset_correlation(delta_init);
                self.reinit_events += 1;
            }
        }
        Ok((e_out, y_out))
    }

    /// Runs a whole spectrogram pair; returns `(E, Y)`.
    pub fn process_spectrograms(
        &mut self,
        x: &Spectrogram,
        d: &Spectrogram,
    ) -> Result<(Spectrogram, Spectrogram)> {
        x.same_shape(d, "wRLS reference and microphone")?;
        let (frames, bins) = d.shape();
        let mut e = Spectrogram::zeros(frames, bins);
        let mut y = Spectrogram::zeros(frames, bins);
        for t in 0..frames {
            let (ef, yf) = self.process(x.frame(t), d.frame(t))?;
            e.frame_mut(t).copy_from_slice(&ef);
            y.frame_mut(t).copy_from_slice(&yf);
        }
        Ok((e, y))
    }
}

/// Mean-square level of the time frame behind a one-sided sqrt-Hann
/// spectrum (window energy `N/2`).
fn frame_mean_square(frame: &[Complex64]) -> f64 {
    let bins = frame.len();
    if bins < 2 {
        return frame.iter().map(|c| c.norm_sqr()).sum();
    }
    let n = 2 * (bins - 1);
    let mid: f64 = frame[1..bins - 1].iter().map(|c| c.norm_sqr()).sum();
    let energy = (frame[0].norm_sqr() + frame[bins - 1].norm_sqr() + 2.0 * mid) / n as f64;
    energy / (n as f64 / 2.0)
}
