//! Test-set generation with known components `d = s + z + v`.
//!
//! Echo is the far-end signal through a synthetic room response, optionally
//! hard clipped first. Levels are set by SER (near-end against echo, over
//! frames where the near-end is active) and SNR (near-end against noise,
//! over the whole chunk).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioBuffer, WavFormat};
use crate::error::{AecError, Result};
use crate::objectives::vad_labels;
use crate::stft::StftConfig;

pub const SIM_RATE: u32 = 48_000;
pub const CHUNK_SECS: f64 = 10.0;
pub const CLIP_LEVEL: f64 = 0.8;
pub const DEFAULT_RIR_DECAY_MS: f64 = 150.0;
pub const DEFAULT_ECHO_DELAY_MS: f64 = 20.0;
/// Mixtures are rescaled so no component or sum exceeds this peak.
pub const PEAK_LIMIT: f64 = 0.99;
pub const MANIFEST_HEADER: &str = "# gftnn-aec manifest v1";

const LN_1000: f64 = 6.907_755_278_982_137;

/// `10·log10(num/den)` with `+∞` for a silent denominator.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "dt")]
    DoubleTalk,
    #[serde(rename = "st-ne")]
    NearEnd,
    #[serde(rename = "st-fe")]
    FarEnd,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Scenario::DoubleTalk => "DT",
            Scenario::NearEnd => "ST-NE",
            Scenario::FarEnd => "ST-FE",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::DoubleTalk => "dt",
            Scenario::NearEnd => "st-ne",
            Scenario::FarEnd => "st-fe",
        })
    }
}

impl FromStr for Scenario {
    type Err = AecError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dt" => Ok(Scenario::DoubleTalk),
            "st-ne" => Ok(Scenario::NearEnd),
            "st-fe" => Ok(Scenario::FarEnd),
            other => Err(AecError::Format(format!("unknown scenario '{other}'"))),
        }
    }
}

pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

pub fn parse_db(s: &str) -> Result<f64> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t.parse().map_err(|_| AecError::Format(format!("bad level '{s}'"))),
    }
}

/// One grid cell. SER of an ST-FE condition sets the echo level against the
/// near-end speech that would have been present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub scenario: Scenario,
    pub ser_db: f64,
    pub snr_db: f64,
}

impl Condition {
    /// Directory-safe identifier such as `dt_ser-5_snr5`.
    pub fn name(&self) -> String {
        let (ser, snr) = (format_db(self.ser_db), format_db(self.snr_db));
        match self.scenario {
            Scenario::DoubleTalk => format!("dt_ser{ser}_snr{snr}"),
            Scenario::NearEnd => format!("stne_snr{snr}"),
            Scenario::FarEnd => format!("stfe_ser{ser}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    pub ser_db: f64,
    pub snr_db: f64,
    pub nonlinear: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MixtureRecord {
    pub d: AudioBuffer,
    pub s: AudioBuffer,
    pub z: AudioBuffer,
    pub v: AudioBuffer,
    pub x: AudioBuffer,
    /// Near-end speech that sets the echo level; equals `s` except in
    /// far-end single talk, where `s` is silent.
    pub level_reference: AudioBuffer,
    pub spec: MixSpec,
    pub scenario: Scenario,
    pub realized_ser_db: f64,
    pub realized_snr_db: f64,
}

mod db_list {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Level {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for &x in v {
            if x.is_finite() {
                seq.serialize_element(&x)?;
            } else {
                seq.serialize_element(&super::format_db(x))?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        Vec::<Level>::deserialize(d)?
            .into_iter()
            .map(|l| match l {
                Level::Num(v) => Ok(v),
                Level::Text(t) => super::parse_db(&t).map_err(D::Error::custom),
            })
            .collect()
    }
}

/// Test-set grid. Conditions follow the column order of the results
/// table: double talk per SNR and SER, near-end single talk per SNR, then
/// far-end single talk per SER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    #[serde(with = "db_list")]
    pub ser_db: Vec<f64>,
    #[serde(with = "db_list")]
    pub snr_db: Vec<f64>,
    /// Restricts the grid to these scenarios when set.
    pub scenarios: Option<Vec<Scenario>>,
    pub utterances: usize,
    pub duration_s: f64,
    pub rate: u32,
    pub nonlinear: bool,
    pub rir_decay_ms: f64,
    pub echo_delay_ms: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            ser_db: vec![-5.0, 5.0, 15.0, f64::INFINITY],
            snr_db: vec![5.0, f64::INFINITY],
            scenarios: None,
            utterances: 10,
            duration_s: CHUNK_SECS,
            rate: SIM_RATE,
            nonlinear: false,
            rir_decay_ms: DEFAULT_RIR_DECAY_MS,
            echo_delay_ms: DEFAULT_ECHO_DELAY_MS,
        }
    }
}

impl GridConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AecError::config(format!("grid: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let finite: Vec<f64> = self.ser_db.iter().copied().filter(|v| v.is_finite()).collect();
        let has_inf_ser = self.ser_db.contains(&f64::INFINITY);
        let mut out = Vec::new();
        for &snr in &self.snr_db {
            for &ser in &finite {
                out.push(Condition { scenario: Scenario::DoubleTalk, ser_db: ser, snr_db: snr });
            }
        }
        if has_inf_ser {
            for &snr in &self.snr_db {
                out.push(Condition { scenario: Scenario::NearEnd, ser_db: f64::INFINITY, snr_db: snr });
            }
        }
        if !self.snr_db.is_empty() {
            for &ser in &finite {
                out.push(Condition { scenario: Scenario::FarEnd, ser_db: ser, snr_db: f64::INFINITY });
            }
        }
        if let Some(keep) = &self.scenarios {
            out.retain(|c| keep.contains(&c.scenario));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate == 0 || !(self.duration_s > 0.0) {
            return Err(AecError::config("grid needs a positive rate and duration"));
        }
        if !(self.rir_decay_ms >= 0.0) || !(self.echo_delay_ms >= 0.0) {
            return Err(AecError::config("room decay and echo delay must be non-negative"));
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        (self.duration_s * self.rate as f64).round() as usize
    }
}

/// Exponentially decaying noise behind a unit direct path, normalized to
/// unit energy. `decay_ms` is the time for a 60 dB energy drop; zero gives
/// the identity response.
pub fn synth_rir(decay_ms: f64, length: usize, rate: u32, seed: u64) -> Result<Vec<f64>> {
    if !(decay_ms >= 0.0 && decay_ms.is_finite()) || length == 0 || rate == 0 {
        return Err(AecError::config(format!("invalid room response: decay {decay_ms} ms, {length} taps")));
    }
    if decay_ms == 0.0 {
        return Ok(vec![1.0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Amplitude falls by 1000 (60 dB) after `decay_ms`.
    let rate_per_sample = LN_1000 / (decay_ms * 1e-3 * rate as f64);
    let mut h: Vec<f64> = (0..length)
        .map(|n| {
            if n == 0 {
                1.0
            } else {
                let g: f64 = StandardNormal.sample(&mut rng);
                0.2 * g * (-rate_per_sample * n as f64).exp()
            }
        })
        .collect();
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= norm);
    Ok(h)
}

/// T60 from Schroeder backward integration, fitting the −5…−25 dB span.
pub fn schroeder_t60(h: &[f64], rate: u32) -> Option<f64> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for (i, v) in h.iter().enumerate().rev() {
        acc += v * v;
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).max(1e-300).log10()).collect();
    let pts: Vec<(f64, f64)> = db
        .iter()
        .enumerate()
        .filter(|(_, &l)| (-25.0..=-5.0).contains(&l))
        .map(|(i, &l)| (i as f64 / rate as f64, l))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Linear convolution truncated to `out_len` samples.
pub fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return vec![0.0; out_len];
    }
    let n = (a.len() + b.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let lift = |v: &[f64]| {
        let mut buf: Vec<Complex64> = v.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let (fa, fb) = (lift(a), lift(b));
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    inv.process(&mut prod);
    let scale = 1.0 / n as f64;
    let mut out: Vec<f64> = prod.iter().take(out_len).map(|c| c.re * scale).collect();
    out.resize(out_len, 0.0);
    out
}

/// Echo `z = clip(x) ∗ rir`, same length as `x`.
pub fn render_echo(x: &AudioBuffer, rir: &[f64], nonlinear: bool) -> AudioBuffer {
    let src: Vec<f64> = if nonlinear {
        x.samples().iter().map(|v| v.clamp(-CLIP_LEVEL, CLIP_LEVEL)).collect()
    } else {
        x.samples().to_vec()
    };
    let z = if rir.len() <= 64 {
        (0..src.len())
            .map(|n| rir.iter().enumerate().take(n + 1).map(|(k, h)| h * src[n - k]).sum())
            .collect()
    } else {
        fft_convolve(&src, rir, src.len())
    };
    AudioBuffer::from_vec_unchecked(z, x.sample_rate())
}

/// Framing used for activity decisions at any rate: 20 ms windows, 10 ms
/// hop.
fn activity_framing(rate: u32) -> StftConfig {
    let win = (rate as usize) / 50;
    StftConfig { win_len: win, hop: win / 2, fft_size: win, ..StftConfig::default() }
}

/// Per-sample flag: inside at least one active frame of `s`.
pub fn activity_mask(s: &AudioBuffer) -> Vec<bool> {
    let cfg = activity_framing(s.sample_rate());
    let labels = vad_labels(s, &cfg);
    let mut mask = vec![false; s.len()];
    for (t, &l) in labels.iter().enumerate() {
        if l == 1 {
            mask[t * cfg.hop..t * cfg.hop + cfg.win_len].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

fn masked_energy(x: &[f64], mask: &[bool]) -> f64 {
    x.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v * v).sum()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Realized `(SER, SNR)` in dB under the conventions above.
pub fn levels(reference: &AudioBuffer, z: &AudioBuffer, v: &AudioBuffer) -> (f64, f64) {
    let mask = activity_mask(reference);
    let ser = ratio_db(masked_energy(reference.samples(), &mask), masked_energy(z.samples(), &mask));
    let snr = ratio_db(energy(reference.samples()), energy(v.samples()));
    (ser, snr)
}

fn scale_to(target_db: f64, num: f64, den: f64, what: &str) -> Result<f64> {
    if target_db == f64::INFINITY {
        return Ok(0.0);
    }
    if !target_db.is_finite() {
        return Err(AecError::config(format!("{what} must be finite or +inf")));
    }
    if num <= 0.0 {
        return Err(AecError::config(format!("{what} of {target_db} dB requested with silent near-end speech")));
    }
    if den <= 0.0 {
        return Err(AecError::config(format!("{what} of {target_db} dB requested with a silent component")));
    }
    Ok((num / (den * 10f64.powf(target_db / 10.0))).sqrt())
}

fn check_lengths(bufs: &[&AudioBuffer]) -> Result<()> {
    let (len, rate) = (bufs[0].len(), bufs[0].sample_rate());
    if bufs.iter().any(|b| b.len() != len || b.sample_rate() != rate) {
        return Err(AecError::shape("mixture components differ in length or rate"));
    }
    Ok(())
}

/// Mixes double-talk or near-end single-talk components at the requested
/// levels. `x` is the far-end signal behind `z`.
pub fn mix(s: &AudioBuffer, z: &AudioBuffer, v: &AudioBuffer, x: &AudioBuffer, spec: MixSpec) -> Result<MixtureRecord> {
    mix_inner(s, s, z, v, x, spec, Scenario::DoubleTalk)
}

/// Far-end single talk: `s = v = 0`, echo scaled against `nominal_s`.
pub fn mix_far_end(nominal_s: &AudioBuffer, z: &AudioBuffer, x: &AudioBuffer, spec: MixSpec) -> Result<MixtureRecord> {
    let silent = AudioBuffer::zeros(nominal_s.len(), nominal_s.sample_rate());
    let spec = MixSpec { snr_db: f64::INFINITY, ..spec };
    mix_inner(&silent, nominal_s, z, &silent, x, spec, Scenario::FarEnd)
}

fn mix_inner(
    s: &AudioBuffer,
    reference: &AudioBuffer,
    z: &AudioBuffer,
    v: &AudioBuffer,
    x: &AudioBuffer,
    spec: MixSpec,
    scenario: Scenario,
) -> Result<MixtureRecord> {
    check_lengths(&[s, reference, z, v, x])?;
    let rate = s.sample_rate();
    let mask = activity_mask(reference);
    let ref_act = masked_energy(reference.samples(), &mask);
    let gz = scale_to(spec.ser_db, ref_act, masked_energy(z.samples(), &mask), "SER")?;
    let gv = scale_to(spec.snr_db, energy(reference.samples()), energy(v.samples()), "SNR")?;
    let scenario = match scenario {
        Scenario::FarEnd => Scenario::FarEnd,
        _ if gz == 0.0 => Scenario::NearEnd,
        _ => Scenario::DoubleTalk,
    };
    let mut s = s.samples().to_vec();
    let mut reference = reference.samples().to_vec();
    let mut z: Vec<f64> = z.samples().iter().map(|a| a * gz).collect();
    let mut v: Vec<f64> = v.samples().iter().map(|a| a * gv).collect();
    let peak = |a: &[f64]| a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let d_peak = s.iter().zip(&z).zip(&v).map(|((a, b), c)| (a + b + c).abs()).fold(0.0, f64::max);
    let top = d_peak.max(peak(&s)).max(peak(&z)).max(peak(&v)).max(peak(&reference));
    if top > PEAK_LIMIT {
        let k = PEAK_LIMIT / top;
        for buf in [&mut s, &mut reference, &mut z, &mut v] {
            buf.iter_mut().for_each(|a| *a *= k);
        }
    }
    let d: Vec<f64> = s.iter().zip(&z).zip(&v).map(|((a, b), c)| a + b + c).collect();
    let wrap = |a: Vec<f64>| AudioBuffer::from_vec_unchecked(a, rate);
    let (s, reference, z, v, d) = (wrap(s), wrap(reference), wrap(z), wrap(v), wrap(d));
    let (realized_ser_db, realized_snr_db) = levels(&reference, &z, &v);
    Ok(MixtureRecord {
        d,
        s,
        z,
        v,
        x: x.clone(),
        level_reference: reference,
        spec,
        scenario,
        realized_ser_db,
        realized_snr_db,
    })
}

fn resonate(x: &[f64], freq: f64, bw: f64, rate: f64) -> Vec<f64> {
    let r = (-std::f64::consts::PI * bw / rate).exp();
    let c = 2.0 * r * (2.0 * std::f64::consts::PI * freq / rate).cos();
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let y1 = if n >= 1 { y[n - 1] } else { 0.0 };
        let y2 = if n >= 2 { y[n - 2] } else { 0.0 };
        y[n] = (1.0 - r) * x[n] + c * y1 - r * r * y2;
    }
    y
}

/// Speech-like source: voiced syllables (pulse trains through formant
/// resonators) and noisy fricatives separated by pauses. Peak 0.5.
pub fn synth_speech(len: usize, rate: u32, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = rate as f64;
    let mut out = vec![0.0; len];
    let mut pos = (rng.random_range(0.05..0.3) * fs) as usize;
    let f0_base = rng.random_range(90.0..220.0);
    while pos < len {
        let dur = (rng.random_range(0.08..0.35) * fs) as usize;
        let end = (pos + dur).min(len);
        let n = end - pos;
        let voiced = rng.random_bool(0.75);
        let mut exc = vec![0.0; n];
        if voiced {
            let f0 = f0_base * rng.random_range(0.8..1.25);
            let glide = rng.random_range(-0.3..0.3);
            let mut phase = 0.0;
            for (i, e) in exc.iter_mut().enumerate() {
                let f = f0 * (1.0 + glide * i as f64 / n as f64);
                phase += f / fs;
                if phase >= 1.0 {
                    phase -= 1.0;
                    *e = 1.0;
                }
                let g: f64 = StandardNormal.sample(&mut rng);
                *e += 0.02 * g;
            }
        } else {
            for e in exc.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *e = 0.3 * g;
            }
        }
        let formants: Vec<(f64, f64)> = if voiced {
            vec![
                (rng.random_range(300.0..900.0), 90.0),
                (rng.random_range(900.0..2400.0), 120.0),
                (rng.random_range(2400.0..3500.0), 200.0),
            ]
        } else {
            let top = (fs / 2.0 * 0.8).min(rng.random_range(3000.0..9000.0));
            vec![(top, 2500.0), (top * 0.6, 2000.0)]
        };
        let mut seg = vec![0.0; n];
        for (f, bw) in formants {
            if f < fs / 2.0 {
                for (s, v) in seg.iter_mut().zip(resonate(&exc, f, bw, fs)) {
                    *s += v;
                }
            }
        }
        let amp: f64 = rng.random_range(0.3..1.0);
        let attack = (0.02 * fs) as usize;
        for (i, s) in seg.iter().enumerate() {
            let up = (i as f64 / attack as f64).min(1.0);
            let down = ((n - i) as f64 / attack as f64).min(1.0);
            out[pos + i] += amp * s * up * down;
        }
        pos = end + (rng.random_range(0.03..0.5) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    AudioBuffer::from_vec_unchecked(out, rate)
}

pub fn white_noise(len: usize, rate: u32, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..len)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            0.1 * g
        })
        .collect();
    AudioBuffer::from_vec_unchecked(v, rate)
}

/// Splitmix-style seed derivation so every stream is independent of the
/// others and of iteration order.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Source material. Directories, when given, hold mono WAVs at the grid
/// rate and are used round-robin; otherwise signals are synthesized.
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub near: Vec<PathBuf>,
    pub far: Vec<PathBuf>,
    pub noise: Vec<PathBuf>,
}

fn wavs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

impl Sources {
    pub fn synthetic() -> Self {
        Self::default()
    }

    /// Reads `near/`, `far/` and `noise/` under `root`.
    pub fn from_dir(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(AecError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("source directory {} not found", root.display()),
            )));
        }
        Ok(Self { near: wavs_in(&root.join("near"))?, far: wavs_in(&root.join("far"))?, noise: wavs_in(&root.join("noise"))? })
    }

    fn pick(list: &[PathBuf], idx: usize, len: usize, rate: u32, fallback: impl FnOnce() -> AudioBuffer) -> Result<AudioBuffer> {
        if list.is_empty() {
            return Ok(fallback());
        }
        let buf = read_wav(&list[idx % list.len()])?;
        if buf.sample_rate() != rate {
            return Err(AecError::config(format!(
                "{} is {} Hz, grid expects {rate} Hz",
                list[idx % list.len()].display(),
                buf.sample_rate()
            )));
        }
        Ok(buf.resized(len))
    }
}

/// Ground-truth material shared by every condition of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceSources {
    pub near: AudioBuffer,
    pub far: AudioBuffer,
    pub noise: AudioBuffer,
    pub echo: AudioBuffer,
    pub rir: Vec<f64>,
}

pub fn utterance_sources(sources: &Sources, grid: &GridConfig, utt: usize, seed: u64) -> Result<UtteranceSources> {
    grid.validate()?;
    let (len, rate) = (grid.chunk_len(), grid.rate);
    let u = utt as u64;
    let near = Sources::pick(&sources.near, utt, len, rate, || synth_speech(len, rate, derive_seed(seed, &[u, 1])))?;
    let far = Sources::pick(&sources.far, utt, len, rate, || synth_speech(len, rate, derive_seed(seed, &[u, 2])))?;
    let noise = Sources::pick(&sources.noise, utt, len, rate, || white_noise(len, rate, derive_seed(seed, &[u, 3])))?;
    let taps = ((grid.rir_decay_ms * 1e-3 * rate as f64).ceil() as usize).max(1);
    let mut rir = vec![0.0; (grid.echo_delay_ms * 1e-3 * rate as f64).round() as usize];
    rir.extend(synth_rir(grid.rir_decay_ms, taps, rate, derive_seed(seed, &[u, 4]))?);
    let echo = render_echo(&far, &rir, grid.nonlinear);
    Ok(UtteranceSources { near, far, noise, echo, rir })
}

pub fn render_condition(src: &UtteranceSources, cond: &Condition, grid: &GridConfig, seed: u64) -> Result<MixtureRecord> {
    let spec = MixSpec { ser_db: cond.ser_db, snr_db: cond.snr_db, nonlinear: grid.nonlinear, seed };
    match cond.scenario {
        Scenario::FarEnd => mix_far_end(&src.near, &src.echo, &src.far, spec),
        Scenario::NearEnd => mix(&src.near, &src.echo, &src.noise, &src.far, MixSpec { ser_db: f64::INFINITY, ..spec }),
        Scenario::DoubleTalk => mix(&src.near, &src.echo, &src.noise, &src.far, spec),
    }
}

/// One line of the manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub scenario: Scenario,
    pub ser_db: f64,
    pub snr_db: f64,
    pub nonlinear: bool,
    pub seed: u64,
    pub realized_ser_db: f64,
    pub realized_snr_db: f64,
    pub d: PathBuf,
    pub s: PathBuf,
    pub z: PathBuf,
    pub v: PathBuf,
    pub x: PathBuf,
}

impl ManifestEntry {
    pub fn condition(&self) -> Condition {
        Condition { scenario: self.scenario, ser_db: self.ser_db, snr_db: self.snr_db }
    }

    fn to_line(&self) -> String {
        let path = |p: &Path| p.to_string_lossy().replace('\\', "/");
        [
            format!("id={}", self.id),
            format!("scenario={}", self.scenario),
            format!("ser_db={}", format_db(self.ser_db)),
            format!("snr_db={}", format_db(self.snr_db)),
            format!("nonlinear={}", u8::from(self.nonlinear)),
            format!("seed={}", self.seed),
            format!("realized_ser_db={}", format_db(self.realized_ser_db)),
            format!("realized_snr_db={}", format_db(self.realized_snr_db)),
            format!("d={}", path(&self.d)),
            format!("s={}", path(&self.s)),
            format!("z={}", path(&self.z)),
            format!("v={}", path(&self.v)),
            format!("x={}", path(&self.x)),
        ]
        .join("\t")
    }

    fn from_line(line: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for field in line.split('\t') {
            let (k, v) = field.split_once('=').ok_or_else(|| AecError::Format(format!("bad manifest field '{field}'")))?;
            map.insert(k, v);
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| AecError::Format(format!("manifest line lacks '{k}'")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| AecError::Format(format!("bad '{k}'"))) };
        Ok(Self {
            id: get("id")?.to_string(),
            scenario: get("scenario")?.parse()?,
            ser_db: parse_db(get("ser_db")?)?,
            snr_db: parse_db(get("snr_db")?)?,
            nonlinear: num("nonlinear")? != 0,
            seed: num("seed")?,
            realized_ser_db: parse_db(get("realized_ser_db")?)?,
            realized_snr_db: parse_db(get("realized_snr_db")?)?,
            d: get("d")?.into(),
            s: get("s")?.into(),
            z: get("z")?.into(),
            v: get("v")?.into(),
            x: get("x")?.into(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let entries = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(ManifestEntry::from_line)
            .collect::<Result<_>>()?;
        Ok(Self { entries, root: root.into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&fs::read_to_string(path)?, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

/// Renders every utterance under every condition, writes float WAVs into
/// one directory per condition and `manifest.txt` at the top.
pub fn build_testset(sources: &Sources, grid: &GridConfig, out_dir: impl AsRef<Path>, seed: u64) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let conditions = grid.conditions();
    let mut manifest = Manifest { entries: Vec::new(), root: out_dir.to_path_buf() };
    if !conditions.is_empty() {
        for utt in 0..grid.utterances {
            let src = utterance_sources(sources, grid, utt, seed)?;
            for cond in &conditions {
                let rec = render_condition(&src, cond, grid, derive_seed(seed, &[utt as u64]))?;
                let dir = cond.name();
                fs::create_dir_all(out_dir.join(&dir))?;
                let stem = format!("utt{utt:03}");
                let rel = |tag: &str, buf: &AudioBuffer| -> Result<PathBuf> {
                    let rel = PathBuf::from(&dir).join(format!("{stem}_{tag}.wav"));
                    write_wav(out_dir.join(&rel), buf, WavFormat::Float32)?;
                    Ok(rel)
                };
                let entry = ManifestEntry {
                    id: format!("{dir}/{stem}"),
                    scenario: rec.scenario,
                    ser_db: cond.ser_db,
                    snr_db: cond.snr_db,
                    nonlinear: grid.nonlinear,
                    seed: rec.spec.seed,
                    realized_ser_db: rec.realized_ser_db,
                    realized_snr_db: rec.realized_snr_db,
                    d: rel("d", &rec.d)?,
                    s: rel("s", &rec.s)?,
                    z: rel("z", &rec.z)?,
                    v: rel("v", &rec.v)?,
                    x: rel("x", &rec.x)?,
                };
                manifest.entries.push(entry);
            }
        }
    }
    manifest.save(out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn short_grid() -> GridConfig {
        GridConfig { utterances: 1, duration_s: 1.0, rate: 16_000, rir_decay_ms: 50.0, echo_delay_ms: 2.0, ..GridConfig::default() }
    }

    #[test]
    fn rir_basics() {
        assert_eq!(synth_rir(0.0, 100, 16000, 1).unwrap(), vec![1.0]);
        let h = synth_rir(200.0, 4000, 16000, 2).unwrap();
        assert!((h.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(h[0] > h[1..].iter().fold(0.0f64, |m, v| m.max(v.abs())));
        assert!(synth_rir(-1.0, 10, 16000, 1).is_err());
    }

    #[test]
    fn schroeder_tracks_decay() {
        let rate = 16000;
        let short = schroeder_t60(&synth_rir(100.0, 4800, rate, 3).unwrap(), rate).unwrap();
        let long = schroeder_t60(&synth_rir(300.0, 9600, rate, 3).unwrap(), rate).unwrap();
        assert!(long > short, "{short} {long}");
        assert!((long - 0.3).abs() < 0.1, "{long}");
    }

    #[test]
    fn echo_rendering() {
        let x = white_noise(500, 16000, 1);
        assert_eq!(render_echo(&x, &[1.0], false).samples(), x.samples());
        let mut rir = vec![0.0; 7];
        rir.push(1.0);
        let z = render_echo(&x, &rir, false);
        assert_eq!(&z.samples()[7..], &x.samples()[..493]);
        assert!(z.samples()[..7].iter().all(|&v| v == 0.0));
        let long: Vec<f64> = (0..200).map(|i| if i == 150 { 1.0 } else { 0.0 }).collect();
        let z = render_echo(&x, &long, false);
        for (a, b) in z.samples()[150..].iter().zip(x.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_adds_harmonics() {
        let (rate, n, f0) = (16000usize, 16000usize, 1000usize);
        let sine: Vec<f64> = (0..n).map(|i| (2.0 * PI * f0 as f64 * i as f64 / rate as f64).sin()).collect();
        let x = AudioBuffer::new(sine, rate as u32).unwrap();
        let thd = |buf: &AudioBuffer| {
            let mut spec: Vec<Complex64> = buf.samples().iter().map(|&v| Complex64::new(v, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(n).process(&mut spec);
            let bin = f0 * n / rate;
            let fund = spec[bin].norm_sqr();
            let harm: f64 = (2..8).map(|k| k * bin).filter(|&b| b < n / 2).map(|b| spec[b].norm_sqr()).sum();
            (harm / fund).sqrt()
        };
        assert!(thd(&render_echo(&x, &[1.0], false)) < 1e-6);
        assert!(thd(&render_echo(&x, &[1.0], true)) > 0.01);
    }

    #[test]
    fn clean_mix_is_near_end() {
        let s = synth_speech(16000, 16000, 1);
        let z = white_noise(16000, 16000, 2);
        let v = white_noise(16000, 16000, 3);
        let spec = MixSpec { ser_db: f64::INFINITY, snr_db: f64::INFINITY, nonlinear: false, seed: 0 };
        let rec = mix(&s, &z, &v, &z, spec).unwrap();
        assert_eq!(rec.d.samples(), s.samples());
        assert_eq!(rec.realized_ser_db, f64::INFINITY);
        assert_eq!(rec.scenario, Scenario::NearEnd);
    }

    #[test]
    fn zero_db_mix() {
        let s = synth_speech(16000, 16000, 4);
        let z = white_noise(16000, 16000, 5);
        let v = white_noise(16000, 16000, 6);
        let rec = mix(&s, &z, &v, &z, MixSpec { ser_db: 0.0, snr_db: 10.0, nonlinear: false, seed: 0 }).unwrap();
        assert!(rec.realized_ser_db.abs() < 0.1);
        assert!((rec.realized_snr_db - 10.0).abs() < 0.1);
        for i in 0..rec.d.len() {
            assert_eq!(rec.d.samples()[i], rec.s.samples()[i] + rec.z.samples()[i] + rec.v.samples()[i]);
        }
    }

    #[test]
    fn silent_speech_with_finite_ser_fails() {
        let s = AudioBuffer::zeros(1000, 16000);
        let z = white_noise(1000, 16000, 5);
        let r = mix(&s, &z, &z, &z, MixSpec { ser_db: 5.0, snr_db: f64::INFINITY, nonlinear: false, seed: 0 });
        assert!(matches!(r, Err(AecError::Config(_))));
    }

    #[test]
    fn default_grid_layout() {
        let c = GridConfig::default().conditions();
        assert_eq!(c.len(), 11);
        let count = |s| c.iter().filter(|k| k.scenario == s).count();
        assert_eq!((count(Scenario::DoubleTalk), count(Scenario::NearEnd), count(Scenario::FarEnd)), (6, 2, 3));
        assert_eq!(c[0].name(), "dt_ser-5_snr5");
        assert_eq!(c[10].name(), "stfe_ser15");
        let empty = GridConfig { ser_db: vec![], snr_db: vec![], ..GridConfig::default() };
        assert!(empty.conditions().is_empty());
    }

    #[test]
    fn grid_json_accepts_inf() {
        let g = GridConfig::from_json(r#"{"ser_db": [-5, "inf"], "snr_db": ["inf"], "scenarios": ["st-fe"]}"#).unwrap();
        assert_eq!(g.ser_db, vec![-5.0, f64::INFINITY]);
        assert_eq!(g.conditions().len(), 1);
        let back = GridConfig::from_json(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        assert!(GridConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn manifest_round_trip_and_determinism() {
        let grid = GridConfig { ser_db: vec![5.0], snr_db: vec![f64::INFINITY], ..short_grid() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m1 = build_testset(&Sources::synthetic(), &grid, a.path(), 7).unwrap();
        build_testset(&Sources::synthetic(), &grid, b.path(), 7).unwrap();
        assert_eq!(m1.entries.len(), 2);
        let t1 = fs::read(a.path().join("manifest.txt")).unwrap();
        assert_eq!(t1, fs::read(b.path().join("manifest.txt")).unwrap());
        for e in &m1.entries {
            assert_eq!(fs::read(a.path().join(&e.d)).unwrap(), fs::read(b.path().join(&e.d)).unwrap());
        }
        let back = Manifest::load(a.path().join("manifest.txt")).unwrap();
        assert_eq!(back.entries, m1.entries);
        let empty = GridConfig { ser_db: vec![], ..short_grid() };
        let m = build_testset(&Sources::synthetic(), &empty, a.path().join("empty"), 1).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn far_end_keeps_nominal_level() {
        let grid = short_grid();
        let src = utterance_sources(&Sources::synthetic(), &grid, 0, 3).unwrap();
        let cond = Condition { scenario: Scenario::FarEnd, ser_db: 5.0, snr_db: f64::INFINITY };
        let rec = render_condition(&src, &cond, &grid, 3).unwrap();
        assert!(rec.s.samples().iter().all(|&v| v == 0.0));
        assert_eq!(rec.d.samples(), rec.z.samples());
        assert!((rec.realized_ser_db - 5.0).abs() < 0.1);
        assert_eq!(rec.realized_snr_db, f64::INFINITY);
    }
}
