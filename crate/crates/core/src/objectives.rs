//! Training objectives evaluated as plain functions: the compressed
//! phase-aware loss, its echo-weighted variant, the VAD cross-entropy, the
//! VAD-gated mask loss and their weighted sum.
//!
//! Sums run in row-major `T×F` order so every value is reproducible bit for
//! bit.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};

use crate::audio::AudioBuffer;
use crate::error::{AecError, Result};
use crate::net::VadLogits;
use crate::stft::{Spectrogram, StftConfig};

pub const ECHO_WEIGHT: f64 = 1.0;
pub const MASK_WEIGHT: f64 = 0.2;
pub const VAD_WEIGHT: f64 = 0.1;
pub const GUMBEL_TEMPERATURE: f64 = 1.0;
/// Frames more than this far below the loudest frame are inactive.
pub const VAD_RELATIVE_DB: f64 = 40.0;
/// Absolute activity floor on frame mean-square level.
pub const VAD_FLOOR_DBFS: f64 = -70.0;

/// Per-bin loss terms, `T×F`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlcpaTerms {
    pub mag: Array2<f64>,
    pub pha: Array2<f64>,
}

impl PlcpaTerms {
    pub fn mean_mag(&self) -> f64 {
        mean(&self.mag)
    }

    pub fn mean_pha(&self) -> f64 {
        mean(&self.pha)
    }

    /// `mean(L_mag + L_pha)`.
    pub fn total(&self) -> f64 {
        self.mean_mag() + self.mean_pha()
    }
}

fn mean(x: &Array2<f64>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for &v in x.iter() {
        acc += v;
    }
    acc / x.len() as f64
}

fn to_matrix(spec: &Spectrogram, f: impl Fn(num_complex::Complex64) -> f64) -> Array2<f64> {
    Array2::from_shape_vec(spec.shape(), spec.data().iter().map(|&c| f(c)).collect()).expect("shape")
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(AecError::config(format!("compression exponent must lie in (0, 1], got {p}")))
    }
}

/// Compressed magnitude and phase-aware error per bin.
pub fn plcpa(s: &Spectrogram, s_hat: &Spectrogram, p: f64) -> Result<PlcpaTerms> {
    s.same_shape(s_hat, "PLCPA target and estimate")?;
    check_p(p)?;
    let (frames, bins) = s.shape();
    let mut mag = Array2::zeros((frames, bins));
    let mut pha = Array2::zeros((frames, bins));
    for (i, (&a, &b)) in s.data().iter().zip(s_hat.data()).enumerate() {
        let (ma, mb) = (a.norm(), b.norm());
        let (ca, cb) = (ma.powf(p), mb.powf(p));
        let za = if ma > 0.0 { a * (ca / ma) } else { a * 0.0 };
        let zb = if mb > 0.0 { b * (cb / mb) } else { b * 0.0 };
        mag[[i / bins, i % bins]] = (ca - cb).powi(2);
        pha[[i / bins, i % bins]] = (za - zb).norm_sqr();
    }
    Ok(PlcpaTerms { mag, pha })
}

/// Share of echo in each bin, `|Z|²/(|Z|²+|S|²)`, zero where both vanish.
pub fn echo_weight(z: &Spectrogram, s: &Spectrogram) -> Result<Array2<f64>> {
    z.same_shape(s, "echo and near-end spectra")?;
    let (frames, bins) = z.shape();
    let data = z
        .data()
        .iter()
        .zip(s.data())
        .map(|(a, b)| {
            let (ez, es) = (a.norm_sqr(), b.norm_sqr());
            if ez == 0.0 {
                0.0
            } else {
                ez / (ez + es)
            }
        })
        .collect();
    Ok(Array2::from_shape_vec((frames, bins), data).expect("shape"))
}

/// `mean(L_mag·(1 + W_echo) + L_pha)`.
pub fn loss_echo(s: &Spectrogram, s_hat: &Spectrogram, z: &Spectrogram, p: f64) -> Result<f64> {
    let terms = plcpa(s, s_hat, p)?;
    let w = echo_weight(z, s)?;
    Ok(echo_from_terms(&terms, &w))
}

fn echo_from_terms(terms: &PlcpaTerms, w: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for ((&m, &ph), &wv) in terms.mag.iter().zip(&terms.pha).zip(w) {
        acc += m * (1.0 + wv) + ph;
    }
    if terms.mag.is_empty() {
        0.0
    } else {
        acc / terms.mag.len() as f64
    }
}

/// Energy-threshold activity labels on the STFT frame grid.
pub fn vad_labels(s: &AudioBuffer, cfg: &StftConfig) -> Vec<u8> {
    let frames = cfg.frames_for(s.len());
    let x = s.samples();
    let levels: Vec<f64> = (0..frames)
        .map(|t| {
            let seg = &x[t * cfg.hop..t * cfg.hop + cfg.win_len];
            let ms = seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64;
            10.0 * ms.max(1e-300).log10()
        })
        .collect();
    let peak = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    levels
        .iter()
        .map(|&l| u8::from(l > peak - VAD_RELATIVE_DB && l > VAD_FLOOR_DBFS))
        .collect()
}

/// Mean cross-entropy of the row softmax against binary labels.
pub fn loss_vad(logits: &VadLogits, labels: &[u8]) -> Result<f64> {
    if logits.frames() != labels.len() {
        return Err(AecError::shape(format!(
            "{} VAD frames against {} labels",
            logits.frames(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (row, &lab) in logits.data.rows().into_iter().zip(labels) {
        let (a, b) = (row[0] as f64, row[1] as f64);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        acc += lse - if lab == 0 { a } else { b };
    }
    Ok(acc / labels.len() as f64)
}

/// Softmax of `(logits + g)/τ`, with standard Gumbel noise `g` drawn from
/// `seed` or no noise when `seed` is `None`.
pub fn gumbel_softmax(logits: [f64; 2], temperature: f64, seed: Option<u64>) -> Result<[f64; 2]> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AecError::config(format!("temperature must be positive, got {temperature}")));
    }
    let mut z = logits;
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Gumbel::new(0.0, 1.0).expect("valid scale");
        for v in &mut z {
            *v += g.sample(&mut rng);
        }
    }
    let (a, b) = (z[0] / temperature, z[1] / temperature);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    Ok([ea / (ea + eb), eb / (ea + eb)])
}

/// Speech weight per frame from the deterministic Gumbel softmax.
pub fn vad_weights(logits: &VadLogits) -> Vec<f64> {
    logits
        .data
        .rows()
        .into_iter()
        .map(|r| {
            gumbel_softmax([r[0] as f64, r[1] as f64], GUMBEL_TEMPERATURE, None).expect("positive temperature")[1]
        })
        .collect()
}

/// `mean((|S|^p − |Ŝ|^p·W_vad(t))²)`.
pub fn loss_mask(s: &Spectrogram, s_hat: &Spectrogram, logits: &VadLogits, p: f64) -> Result<f64> {
    s.same_shape(s_hat, "mask target and estimate")?;
    check_p(p)?;
    if logits.frames() != s.frames() {
        return Err(AecError::shape(format!(
            "{} VAD frames against {} spectrum frames",
            logits.frames(),
            s.frames()
        )));
    }
    let w = vad_weights(logits);
    let a = to_matrix(s, |c| c.norm().powf(p));
    let b = to_matrix(s_hat, |c| c.norm().powf(p));
    let mut acc = 0.0;
    for ((ra, rb), &wt) in a.rows().into_iter().zip(b.rows()).zip(&w) {
        for (&av, &bv) in ra.iter().zip(rb) {
            acc += (av - bv * wt).powi(2);
        }
    }
    Ok(if a.is_empty() { 0.0 } else { acc / a.len() as f64 })
}

pub fn loss_final(l_echo: f64, l_mask: f64, l_vad: f64) -> f64 {
    ECHO_WEIGHT * l_echo + MASK_WEIGHT * l_mask + VAD_WEIGHT * l_vad
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_mag: f64,
    pub l_pha: f64,
    pub l_vad: f64,
    pub l_echo: f64,
    pub l_mask: f64,
    pub l_final: f64,
}

const REPORT_KEYS: [&str; 6] = ["l_mag", "l_pha", "l_vad", "l_echo", "l_mask", "l_final"];

impl LossReport {
    pub fn compute(
        s: &Spectrogram,
        s_hat: &Spectrogram,
        z: &Spectrogram,
        logits: &VadLogits,
        labels: &[u8],
        p: f64,
    ) -> Result<Self> {
        let terms = plcpa(s, s_hat, p)?;
        let w = echo_weight(z, s)?;
        let l_echo = echo_from_terms(&terms, &w);
        let l_mask = loss_mask(s, s_hat, logits, p)?;
        let l_vad = loss_vad(logits, labels)?;
        Ok(Self {
            l_mag: terms.mean_mag(),
            l_pha: terms.mean_pha(),
            l_vad,
            l_echo,
            l_mask,
            l_final: loss_final(l_echo, l_mask, l_vad),
        })
    }

    fn values(&self) -> [f64; 6] {
        [self.l_mag, self.l_pha, self.l_vad, self.l_echo, self.l_mask, self.l_final]
    }
}

/// One `key=value` line per loss.
impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            writeln!(f, "{k}={v:e}")?;
        }
        Ok(())
    }
}

impl FromStr for LossReport {
    type Err = AecError;

    fn from_str(text: &str) -> Result<Self> {
        let mut vals = [None; 6];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| AecError::Format(format!("bad loss line '{line}'")))?;
            let idx = REPORT_KEYS
                .iter()
                .position(|&key| key == k.trim())
                .ok_or_else(|| AecError::Format(format!("unknown loss '{k}'")))?;
            vals[idx] = Some(v.trim().parse::<f64>().map_err(|e| AecError::Format(format!("{k}: {e}")))?);
        }
        let get = |i: usize| vals[i].ok_or_else(|| AecError::Format(format!("missing {}", REPORT_KEYS[i])));
        Ok(Self { l_mag: get(0)?, l_pha: get(1)?, l_vad: get(2)?, l_echo: get(3)?, l_mask: get(4)?, l_final: get(5)? })
    }
}
