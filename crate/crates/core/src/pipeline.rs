//! End-to-end processing: subband split, delay alignment, linear echo
//! cancellation, optional post-filter, high-band gain and synthesis.
//!
//! Files are processed offline in one pass, but the output is shifted by
//! one window plus one hop so it lines up with what the frame-synchronous
//! real-time schedule would emit.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aec::mdf::MdfConfig;
use crate::aec::wrls::WrlsConfig;
use crate::aec::{FilterKind, MdfState, WrlsState};
use crate::audio::{read_wav, AudioBuffer};
use crate::error::{AecError, Result};
use crate::features::{build_features, Combo, FeatureSources};
use crate::metrics::{erle, EntryScore, ResultsTable};
use crate::net::Model;
use crate::simulation::{Manifest, Scenario};
use crate::stft::{StftConfig, StftEngine, COMPRESSION_EXPONENT, WIDEBAND_RATE};
use crate::subband::{design_filterbank, highband_gain, split, synthesize, GainBandConfig, FULLBAND_RATE};
use crate::tde::{align, estimate_delay_with, DelayEstimate, TdeConfig};

/// Keys accepted in the JSON config file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterKind,
    pub tde: bool,
    pub combo: Combo,
    /// `GFTW` weights; without them the linear-filter output is used.
    pub model: Option<PathBuf>,
    /// Off processes 16 kHz input directly with no split or synthesis.
    pub subband: bool,
    /// Passes the microphone straight through every stage.
    pub bypass: bool,
    pub mdf_tail_ms: f64,
    pub mdf_block: usize,
    pub mdf_mu: f64,
    pub mdf_delta: f64,
    pub wrls_taps: usize,
    pub wrls_lambda: f64,
    pub wrls_delta_init: f64,
    pub tde_block: usize,
    pub tde_fft: usize,
    pub tde_max_delay: usize,
    pub tde_smoothing: f64,
    pub filterbank_taps: usize,
    /// One-based inclusive bin ranges `[a, b, c, d]` for the high-band gain.
    pub gain_bands: [usize; 4],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mdf = MdfConfig::default();
        let wrls = WrlsConfig::default();
        let tde = TdeConfig::default();
        let g = GainBandConfig::default();
        Self {
            filter: FilterKind::Wrls,
            tde: true,
            combo: Combo::Dey,
            model: None,
            subband: true,
            bypass: false,
            mdf_tail_ms: mdf.tail_ms,
            mdf_block: mdf.block,
            mdf_mu: mdf.mu,
            mdf_delta: mdf.delta,
            wrls_taps: wrls.taps,
            wrls_lambda: wrls.lambda,
            wrls_delta_init: wrls.delta_init,
            tde_block: tde.block,
            tde_fft: tde.fft_size,
            tde_max_delay: tde.max_delay,
            tde_smoothing: tde.smoothing,
            filterbank_taps: crate::subband::DEFAULT_TAPS,
            gain_bands: [g.a, g.b, g.c, g.d],
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AecError::config(format!("pipeline config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn mdf(&self) -> MdfConfig {
        MdfConfig { tail_ms: self.mdf_tail_ms, block: self.mdf_block, mu: self.mdf_mu, delta: self.mdf_delta }
    }

    pub fn wrls(&self) -> WrlsConfig {
        WrlsConfig { taps: self.wrls_taps, lambda: self.wrls_lambda, delta_init: self.wrls_delta_init }
    }

    pub fn tde_config(&self) -> TdeConfig {
        TdeConfig {
            block: self.tde_block,
            fft_size: self.tde_fft,
            max_delay: self.tde_max_delay,
            smoothing: self.tde_smoothing,
        }
    }

    pub fn gain(&self) -> GainBandConfig {
        let [a, b, c, d] = self.gain_bands;
        GainBandConfig { a, b, c, d }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bypass && self.combo.needs_linear_filter() && self.filter == FilterKind::None {
            return Err(AecError::config(format!("combo {} needs a linear filter", self.combo)));
        }
        self.tde_config().validate()?;
        self.gain().validate(StftConfig::default().bins())?;
        Ok(())
    }

    /// Rate the pipeline expects on its inputs.
    pub fn input_rate(&self) -> u32 {
        if self.subband {
            FULLBAND_RATE
        } else {
            WIDEBAND_RATE
        }
    }
}

/// Seconds spent per stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimes {
    pub stages: Vec<(&'static str, f64)>,
}

impl StageTimes {
    fn record(&mut self, name: &'static str, start: Instant) {
        self.stages.push((name, start.elapsed().as_secs_f64()));
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.0 == name).map(|s| s.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub filter: FilterKind,
    pub combo: Combo,
    pub model: bool,
    pub bypass: bool,
    pub subband: bool,
    pub delay: Option<DelayEstimate>,
    pub delay_applied: bool,
    pub frames: usize,
    pub duration_s: f64,
    pub latency_samples: usize,
    pub wrls_reinit_events: usize,
    pub times: StageTimes,
}

impl RunReport {
    pub fn rtf(&self, secs: f64) -> f64 {
        if self.duration_s > 0.0 {
            secs / self.duration_s
        } else {
            0.0
        }
    }

    pub fn total_rtf(&self) -> f64 {
        self.rtf(self.times.total())
    }

    /// Real-time factor without the post-filter.
    pub fn dsp_rtf(&self) -> f64 {
        self.rtf(self.times.total() - self.times.get("postfilter").unwrap_or(0.0))
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "filter={}", self.filter)?;
        writeln!(f, "combo={}", self.combo)?;
        writeln!(f, "model={}", self.model)?;
        writeln!(f, "bypass={}", self.bypass)?;
        writeln!(f, "subband={}", self.subband)?;
        match self.delay {
            Some(d) => {
                writeln!(f, "delay_samples={}", d.delay)?;
                writeln!(f, "delay_confidence={:.3}", d.confidence)?;
            }
            None => writeln!(f, "delay_samples=none")?,
        }
        writeln!(f, "delay_applied={}", self.delay_applied)?;
        writeln!(f, "frames={}", self.frames)?;
        writeln!(f, "duration_s={:.3}", self.duration_s)?;
        writeln!(f, "latency_samples={}", self.latency_samples)?;
        writeln!(f, "wrls_reinit_events={}", self.wrls_reinit_events)?;
        for (name, secs) in &self.times.stages {
            writeln!(f, "rtf_{name}={:.4}", self.rtf(*secs))?;
        }
        writeln!(f, "rtf_dsp={:.4}", self.dsp_rtf())?;
        writeln!(f, "rtf_total={:.4}", self.total_rtf())
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    model: Option<Model>,
    stft: StftEngine,
}

impl Pipeline {
    /// Loads the model named in the config, if any.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let model = match &cfg.model {
            Some(p) => Some(Model::from_file(p, None)?),
            None => None,
        };
        Self::with_model(cfg, model)
    }

    pub fn with_model(cfg: PipelineConfig, model: Option<Model>) -> Result<Self> {
        cfg.validate()?;
        if let Some(m) = &model {
            if m.arch().input_channels != cfg.combo.input_channels() {
                return Err(AecError::Load(format!(
                    "model takes {} input channels, combo {} provides {}",
                    m.arch().input_channels,
                    cfg.combo,
                    cfg.combo.input_channels()
                )));
            }
            m.arch().validate().map_err(|e| AecError::Load(e.to_string()))?;
        }
        Ok(Self { cfg, model, stft: StftEngine::new(StftConfig::default())? })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    /// Output lag in input samples: one window plus one hop, plus the
    /// filterbank group delay when the subband path is on.
    pub fn latency_samples(&self) -> Result<usize> {
        let c = self.stft.config();
        let frame = c.win_len + c.hop;
        if self.cfg.subband {
            let fb = design_filterbank(self.cfg.filterbank_taps)?;
            Ok(frame * fb.decimation() + fb.group_delay())
        } else {
            Ok(frame)
        }
    }

    pub fn process(&self, mic: &AudioBuffer, reference: &AudioBuffer) -> Result<(AudioBuffer, RunReport)> {
        let rate = self.cfg.input_rate();
        if mic.sample_rate() != rate || reference.sample_rate() != rate {
            return Err(AecError::config(format!(
                "inputs are {} Hz and {} Hz, pipeline expects {rate} Hz",
                mic.sample_rate(),
                reference.sample_rate()
            )));
        }
        let reference = reference.resized(mic.len());
        let mut times = StageTimes::default();

        let start = Instant::now();
        let fb = if self.cfg.subband { Some(design_filterbank(self.cfg.filterbank_taps)?) } else { None };
        let (d_sub, x_sub) = match &fb {
            Some(fb) => (Some(split(mic, fb)?), Some(split(&reference, fb)?)),
            None => (None, None),
        };
        let d_w = d_sub.as_ref().map_or_else(|| mic.clone(), |s| s.wide.clone());
        let mut x_w = x_sub.as_ref().map_or_else(|| reference.clone(), |s| s.wide.clone());
        times.record("split", start);
        let win = self.stft.config().win_len;
        if d_w.len() < win {
            return Err(AecError::EmptyInput { needed: win * rate as usize / WIDEBAND_RATE as usize, got: mic.len() });
        }

        let start = Instant::now();
        let mut delay = None;
        let mut delay_applied = false;
        if self.cfg.tde && !self.cfg.bypass && d_w.len() >= self.cfg.tde_block {
            let est = estimate_delay_with(&x_w, &d_w, &self.cfg.tde_config())?;
            if est.is_reliable() {
                x_w = align(&x_w, &est, d_w.len());
                delay_applied = true;
            }
            delay = Some(est);
        }
        times.record("tde", start);

        let start = Instant::now();
        let d_spec = self.stft.stft(&d_w)?;
        let mut reinit = 0;
        let (e_spec, y_spec, x_spec) = if self.cfg.bypass {
            (d_spec.clone(), None, None)
        } else {
            let x_spec = self.stft.stft(&x_w)?;
            match self.cfg.filter {
                FilterKind::None => (d_spec.clone(), None, Some(x_spec)),
                FilterKind::Mdf => {
                    let mut st = MdfState::from_config(&self.cfg.mdf())?;
                    let (e, y) = st.process_buffers(&x_w, &d_w)?;
                    (self.stft.stft(&e)?, Some(self.stft.stft(&y)?), Some(x_spec))
                }
                FilterKind::Wrls => {
                    let mut st = WrlsState::from_config(&self.cfg.wrls(), d_spec.bins())?;
                    let (e, y) = st.process_spectrograms(&x_spec, &d_spec)?;
                    reinit = st.reinit_events();
                    (e, Some(y), Some(x_spec))
                }
            }
        };
        times.record("aec", start);

        let s_hat = match (&self.model, self.cfg.bypass) {
            (Some(model), false) => {
                let start = Instant::now();
                let src = FeatureSources { d: Some(&d_spec), e: Some(&e_spec), x: x_spec.as_ref(), y: y_spec.as_ref() };
                let feat = build_features(self.cfg.combo, &src, COMPRESSION_EXPONENT)?;
                let (s, _) = model.forward(&feat)?;
                times.record("postfilter", start);
                s
            }
            _ => e_spec,
        };

        let out = match (&fb, &d_sub) {
            (Some(fb), Some(sub)) => {
                let start = Instant::now();
                let g = highband_gain(&s_hat, &d_spec, &self.cfg.gain())?;
                times.record("gain", start);
                let start = Instant::now();
                let out = synthesize(&s_hat, sub, &g, fb, self.stft.config())?;
                times.record("synthesis", start);
                out
            }
            _ => {
                let start = Instant::now();
                let out = self.stft.istft(&s_hat)?.resized(mic.len());
                times.record("synthesis", start);
                out
            }
        };

        let frame_lag = (self.stft.config().win_len + self.stft.config().hop) * (rate / WIDEBAND_RATE) as usize;
        let out = delay_by(&out, frame_lag, mic.len());
        let report = RunReport {
            filter: self.cfg.filter,
            combo: self.cfg.combo,
            model: self.model.is_some(),
            bypass: self.cfg.bypass,
            subband: self.cfg.subband,
            delay,
            delay_applied,
            frames: d_spec.frames(),
            duration_s: mic.duration_secs(),
            latency_samples: self.latency_samples()?,
            wrls_reinit_events: reinit,
            times,
        };
        Ok((out, report))
    }
}

fn delay_by(x: &AudioBuffer, lag: usize, len: usize) -> AudioBuffer {
    let mut out = vec![0.0; len];
    if lag < len {
        let n = (len - lag).min(x.len());
        out[lag..lag + n].copy_from_slice(&x.samples()[..n]);
    }
    AudioBuffer::from_vec_unchecked(out, x.sample_rate())
}

/// Runs the pipeline on every manifest entry and scores far-end single
/// talk by ERLE. Entries are spread over the available cores; results keep
/// manifest order.
pub fn evaluate(manifest: &Manifest, pipeline: &Pipeline, label: &str) -> Result<(ResultsTable, Vec<EntryScore>)> {
    let n = manifest.entries.len();
    let workers = std::thread::available_parallelism().map_or(1, |v| v.get()).min(n.max(1));
    let mut slots: Vec<Option<Result<EntryScore>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = slots.chunks_mut(n.div_ceil(workers).max(1)).enumerate().collect();
        for (ci, chunk) in chunks {
            let base = ci * n.div_ceil(workers).max(1);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(score_entry(manifest, base + k, pipeline));
                }
            });
        }
    });
    let scores = slots.into_iter().map(|s| s.expect("every slot filled")).collect::<Result<Vec<_>>>()?;
    Ok((ResultsTable::aggregate(label, &scores), scores))
}

fn score_entry(manifest: &Manifest, idx: usize, pipeline: &Pipeline) -> Result<EntryScore> {
    let e = &manifest.entries[idx];
    let d = read_wav(manifest.resolve(&e.d))?;
    let x = read_wav(manifest.resolve(&e.x))?;
    let erle_res = if e.scenario == Scenario::FarEnd {
        let (out, _) = pipeline.process(&d, &x)?;
        Some(erle(&d, &out)?)
    } else {
        None
    };
    Ok(EntryScore {
        condition: e.condition(),
        realized_ser_db: e.realized_ser_db,
        realized_snr_db: e.realized_snr_db,
        erle: erle_res,
    })
}
