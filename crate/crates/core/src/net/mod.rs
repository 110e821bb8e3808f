//! Post-filter network: gated convolutional encoder, FTLSTM stack, two
//! transposed-convolution decoders for the real and imaginary parts of the
//! compressed near-end spectrum, and a VAD head.
//!
//! Weights are immutable after loading. Inference runs in fixed time chunks
//! with carried state, so memory stays bounded for long inputs and the
//! result does not depend on the chunking.

pub mod ftlstm;
pub mod layers;
pub mod vad;
pub mod weights;

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{AecError, Result};
use crate::features::{Combo, FeatureTensor};
use crate::stft::{compress_spectrum, Spectrogram, COMPRESSION_EXPONENT};

use ftlstm::{FtLstmBlock, TimeState};
use layers::{conv_out_bins, trconv_out_bins, Dense, GatedConv, GatedTransConv, Lstm, Prelu};
use vad::{VadHead, VadRow, VAD_WIDTH};
pub use weights::{Init, Tensor, TensorSpec, WeightContainer};

pub const DEFAULT_BINS: usize = 161;
pub const DEFAULT_LAYERS: usize = 4;
pub const DEFAULT_FTLSTM_BLOCKS: usize = 2;
pub const PRELU_INIT: f32 = 0.25;
/// Frames per inference chunk.
pub const CHUNK_FRAMES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub channels: usize,
    pub input_channels: usize,
    pub encoder_layers: usize,
    pub ftlstm_blocks: usize,
    pub vad_head: bool,
    pub bins: usize,
}

impl ModelArch {
    pub fn new(channels: usize, combo: Combo) -> Self {
        Self {
            channels,
            input_channels: combo.input_channels(),
            encoder_layers: DEFAULT_LAYERS,
            ftlstm_blocks: DEFAULT_FTLSTM_BLOCKS,
            vad_head: true,
            bins: DEFAULT_BINS,
        }
    }

    /// Architecture with no layers at all; has no parameters.
    pub fn empty() -> Self {
        Self { channels: 0, input_channels: 0, encoder_layers: 0, ftlstm_blocks: 0, vad_head: false, bins: DEFAULT_BINS }
    }

    /// Bin counts before and after every encoder layer.
    pub fn encoder_bins(&self) -> Vec<usize> {
        std::iter::successors(Some(self.bins), |&f| Some(conv_out_bins(f)))
            .take(self.encoder_layers + 1)
            .collect()
    }

    /// Bin counts through the decoder, ending at the input width.
    pub fn decoder_bins(&self) -> Vec<usize> {
        let mut enc = self.encoder_bins();
        enc.reverse();
        enc
    }

    /// Output padding per decoder layer so each layer lands on the matching
    /// encoder width.
    pub fn output_paddings(&self) -> Vec<usize> {
        self.decoder_bins()
            .windows(2)
            .map(|w| w[1].saturating_sub(trconv_out_bins(w[0], 0)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers == 0 {
            return Err(AecError::config("network has no encoder layers"));
        }
        if self.channels == 0 || self.input_channels == 0 {
            return Err(AecError::config("network channel counts must be positive"));
        }
        let enc = self.encoder_bins();
        if enc.contains(&0) {
            return Err(AecError::config(format!(
                "{} bins cannot pass {} stride-2 layers",
                self.bins, self.encoder_layers
            )));
        }
        for (w, &pad) in self.decoder_bins().windows(2).zip(&self.output_paddings()) {
            if trconv_out_bins(w[0], pad) != w[1] || pad > 1 {
                return Err(AecError::config(format!("decoder cannot map {} bins to {}", w[0], w[1])));
            }
        }
        Ok(())
    }

    /// Every tensor the model owns, in initialization order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let c = self.channels;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(TensorSpec { name, shape, init });
        let uni = |fan_in: usize| Init::Uniform(if fan_in == 0 { 0.0 } else { 1.0 / (fan_in as f32).sqrt() });

        for i in 0..self.encoder_layers {
            let cin = if i == 0 { self.input_channels } else { c };
            let p = format!("enc.{i}");
            push(format!("{p}.weight"), vec![c, cin, 2, 3], uni(cin * 6));
            push(format!("{p}.bias"), vec![c], uni(cin * 6));
            push(format!("{p}.gate_weight"), vec![c, cin, 2, 3], uni(cin * 6));
            push(format!("{p}.gate_bias"), vec![c], uni(cin * 6));
            push(format!("{p}.prelu"), vec![c], Init::Constant(PRELU_INIT));
        }
        for i in 0..self.encoder_layers {
            push(format!("skip.{i}.weight"), vec![c, c], uni(c));
            push(format!("skip.{i}.bias"), vec![c], uni(c));
        }
        let lstm = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, input: usize, hidden: usize| {
            push(format!("{p}.weight_ih"), vec![4 * hidden, input], uni(hidden));
            push(format!("{p}.weight_hh"), vec![4 * hidden, hidden], uni(hidden));
            push(format!("{p}.bias_ih"), vec![4 * hidden], uni(hidden));
            push(format!("{p}.bias_hh"), vec![4 * hidden], uni(hidden));
        };
        for b in 0..self.ftlstm_blocks {
            for axis in ["f", "t"] {
                let p = format!("ftlstm.{b}.{axis}");
                lstm(&mut push, &format!("{p}_lstm"), c, c);
                push(format!("{p}_proj.weight"), vec![c, c], uni(c));
                push(format!("{p}_proj.bias"), vec![c], uni(c));
            }
        }
        for branch in ["dec_real", "dec_imag"] {
            for j in 0..self.encoder_layers {
                let last = j + 1 == self.encoder_layers;
                let cout = if last { 1 } else { c };
                let p = format!("{branch}.{j}");
                push(format!("{p}.weight"), vec![2 * c, cout, 2, 3], uni(2 * c * 6));
                push(format!("{p}.bias"), vec![cout], uni(2 * c * 6));
                push(format!("{p}.gate_weight"), vec![2 * c, cout, 2, 3], uni(2 * c * 6));
                push(format!("{p}.gate_bias"), vec![cout], uni(2 * c * 6));
                if !last {
                    push(format!("{p}.prelu"), vec![cout], Init::Constant(PRELU_INIT));
                }
            }
        }
        if self.vad_head && self.encoder_layers > 0 {
            let f = *self.encoder_bins().last().unwrap_or(&0);
            push("vad.f_dense_in.weight".into(), vec![VAD_WIDTH, f], uni(f));
            push("vad.f_dense_in.bias".into(), vec![VAD_WIDTH], uni(f));
            lstm(&mut push, "vad.f_lstm", c, c);
            push("vad.f_dense_out.weight".into(), vec![1, VAD_WIDTH], uni(VAD_WIDTH));
            push("vad.f_dense_out.bias".into(), vec![1], uni(VAD_WIDTH));
            push("vad.c_dense.weight".into(), vec![2, c], uni(c));
            push("vad.c_dense.bias".into(), vec![2], uni(c));
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.tensor_specs().iter().map(TensorSpec::numel).sum()
    }

    /// Recovers the architecture from tensor names and shapes, assuming the
    /// default bin count.
    pub fn infer(container: &WeightContainer) -> Result<Self> {
        let first = container
            .get("enc.0.weight")
            .ok_or_else(|| AecError::Load("missing tensor 'enc.0.weight'".into()))?;
        if first.shape.len() != 4 {
            return Err(AecError::Load("tensor 'enc.0.weight' must have rank 4".into()));
        }
        let count = |prefix: &str| (0..).take_while(|i| container.get(&format!("{prefix}.{i}.weight")).is_some()).count();
        let blocks = (0..).take_while(|b| container.get(&format!("ftlstm.{b}.f_lstm.weight_ih")).is_some()).count();
        let vad = container.get("vad.f_dense_in.weight");
        let layers = count("enc");
        let arch = Self {
            channels: first.shape[0],
            input_channels: first.shape[1],
            encoder_layers: layers,
            ftlstm_blocks: blocks,
            vad_head: vad.is_some(),
            bins: DEFAULT_BINS,
        };
        container.check_against(&arch.tensor_specs())?;
        Ok(arch)
    }
}

/// VAD logits, one row of two per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VadLogits {
    pub data: Array2<f32>,
}

impl VadLogits {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    /// Row-wise softmax in `f64`.
    pub fn softmax(&self) -> Array2<f64> {
        let mut out = self.data.mapv(f64::from);
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        out
    }
}

/// Shapes observed during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    /// `C×T×F` after each encoder layer, input first.
    pub encoder: Vec<[usize; 3]>,
    pub ftlstm: Vec<[usize; 3]>,
    /// Per decoder branch, output of each layer.
    pub decoder_real: Vec<[usize; 3]>,
    pub decoder_imag: Vec<[usize; 3]>,
    pub vad: Vec<VadRow>,
}

impl ForwardTrace {
    pub fn frequency_chain(&self) -> Vec<usize> {
        self.encoder.iter().chain(&self.decoder_real).map(|s| s[2]).collect()
    }
}

/// Compressed-domain output of the decoders plus the VAD logits.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    /// `T×F`
    pub real: Array2<f32>,
    pub imag: Array2<f32>,
    pub vad: VadLogits,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ModelArch,
    weights: WeightContainer,
    encoder: Vec<GatedConv>,
    skips: Vec<Dense>,
    blocks: Vec<FtLstmBlock>,
    dec_real: Vec<GatedTransConv>,
    dec_imag: Vec<GatedTransConv>,
    vad: Option<VadHead>,
}

struct StreamState {
    enc: Vec<Array2<f32>>,
    dec_real: Vec<Array2<f32>>,
    dec_imag: Vec<Array2<f32>>,
    time: Vec<TimeState>,
}

fn arr1(c: &WeightContainer, name: &str) -> Array1<f32> {
    Array1::from(c.get(name).expect("checked").data.clone())
}

fn arr2(c: &WeightContainer, name: &str) -> Array2<f32> {
    let t = c.get(name).expect("checked");
    Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).expect("checked")
}

fn arr4(c: &WeightContainer, name: &str) -> Array4<f32> {
    let t = c.get(name).expect("checked");
    Array4::from_shape_vec((t.shape[0], t.shape[1], t.shape[2], t.shape[3]), t.data.clone()).expect("checked")
}

fn lstm(c: &WeightContainer, p: &str) -> Lstm {
    Lstm {
        weight_ih: arr2(c, &format!("{p}.weight_ih")),
        weight_hh: arr2(c, &format!("{p}.weight_hh")),
        bias_ih: arr1(c, &format!("{p}.bias_ih")),
        bias_hh: arr1(c, &format!("{p}.bias_hh")),
    }
}

fn dense(c: &WeightContainer, p: &str) -> Dense {
    Dense { weight: arr2(c, &format!("{p}.weight")), bias: arr1(c, &format!("{p}.bias")) }
}

fn dims(x: &Array3<f32>) -> [usize; 3] {
    let (a, b, c) = x.dim();
    [a, b, c]
}

impl Model {
    /// Strict load: every tensor of `arch` must be present with its exact
    /// shape and nothing else may be.
    pub fn load(weights: WeightContainer, arch: ModelArch) -> Result<Self> {
        weights.check_against(&arch.tensor_specs())?;
        let w = &weights;
        let encoder = (0..arch.encoder_layers)
            .map(|i| {
                let p = format!("enc.{i}");
                GatedConv {
                    weight: arr4(w, &format!("{p}.weight")),
                    bias: arr1(w, &format!("{p}.bias")),
                    gate_weight: arr4(w, &format!("{p}.gate_weight")),
                    gate_bias: arr1(w, &format!("{p}.gate_bias")),
                    prelu: Some(Prelu { slope: arr1(w, &format!("{p}.prelu")) }),
                }
            })
            .collect();
        let skips = (0..arch.encoder_layers).map(|i| dense(w, &format!("skip.{i}"))).collect();
        let blocks = (0..arch.ftlstm_blocks)
            .map(|b| FtLstmBlock {
                f_lstm: lstm(w, &format!("ftlstm.{b}.f_lstm")),
                f_proj: dense(w, &format!("ftlstm.{b}.f_proj")),
                t_lstm: lstm(w, &format!("ftlstm.{b}.t_lstm")),
                t_proj: dense(w, &format!("ftlstm.{b}.t_proj")),
            })
            .collect();
        let pads = arch.output_paddings();
        let decoder = |branch: &str| -> Vec<GatedTransConv> {
            (0..arch.encoder_layers)
                .map(|j| {
                    let p = format!("{branch}.{j}");
                    let last = j + 1 == arch.encoder_layers;
                    GatedTransConv {
                        weight: arr4(w, &format!("{p}.weight")),
                        bias: arr1(w, &format!("{p}.bias")),
                        gate_weight: arr4(w, &format!("{p}.gate_weight")),
                        gate_bias: arr1(w, &format!("{p}.gate_bias")),
                        output_padding: pads[j],
                        prelu: (!last).then(|| Prelu { slope: arr1(w, &format!("{p}.prelu")) }),
                    }
                })
                .collect()
        };
        let dec_real = decoder("dec_real");
        let dec_imag = decoder("dec_imag");
        let vad = (arch.vad_head && arch.encoder_layers > 0).then(|| VadHead {
            f_dense_in: dense(w, "vad.f_dense_in"),
            f_lstm: lstm(w, "vad.f_lstm"),
            f_dense_out: dense(w, "vad.f_dense_out"),
            c_dense: dense(w, "vad.c_dense"),
        });
        Ok(Self { arch, weights, encoder, skips, blocks, dec_real, dec_imag, vad })
    }

    pub fn init_random(seed: u64, arch: ModelArch) -> Result<Self> {
        Self::load(WeightContainer::random(&arch.tensor_specs(), seed), arch)
    }

    /// Loads a `GFTW` file, inferring the architecture when `arch` is `None`.
    pub fn from_file(path: impl AsRef<Path>, arch: Option<ModelArch>) -> Result<Self> {
        let weights = WeightContainer::load(path)?;
        let arch = match arch {
            Some(a) => a,
            None => ModelArch::infer(&weights)?,
        };
        Self::load(weights, arch)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.weights.save(path)
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn weights(&self) -> &WeightContainer {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.total_values()
    }

    fn new_state(&self) -> StreamState {
        let bins = self.arch.encoder_bins();
        let c = self.arch.channels;
        let enc = self.encoder.iter().zip(&bins).map(|(l, &f)| Array2::zeros((l.in_channels(), f))).collect();
        let dec_bins = self.arch.decoder_bins();
        let dec = || dec_bins.iter().take(self.arch.encoder_layers).map(|&f| Array2::zeros((2 * c, f))).collect();
        let f_last = *bins.last().unwrap_or(&0);
        let time = self.blocks.iter().map(|b| TimeState::new(b.t_lstm.hidden(), f_last)).collect();
        StreamState { enc, dec_real: dec(), dec_imag: dec(), time }
    }

    fn run_chunk(
        &self,
        x: &ArrayView3<f32>,
        st: &mut StreamState,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<(Array3<f32>, Array3<f32>, Array2<f32>)> {
        let frames = x.dim().1;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.to_owned();
        if let Some(tr) = trace.as_deref_mut() {
            tr.encoder.push(dims(&h));
        }
        for ((layer, prev), skip) in self.encoder.iter().zip(&mut st.enc).zip(&self.skips) {
            h = layer.forward(&h.view(), prev)?;
            skips.push(skip.conv1x1(&h.view())?);
            if let Some(tr) = trace.as_deref_mut() {
                tr.encoder.push(dims(&h));
            }
        }
        for (block, ts) in self.blocks.iter().zip(&mut st.time) {
            h = block.forward(&h.view(), ts)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.ftlstm.push(dims(&h));
            }
        }
        let decode = |layers: &[GatedTransConv], prevs: &mut [Array2<f32>], rec: &mut Vec<[usize; 3]>| {
            let mut y = h.clone();
            for ((layer, prev), skip) in layers.iter().zip(prevs.iter_mut()).zip(skips.iter().rev()) {
                let joined = concatenate(Axis(0), &[y.view(), skip.view()])
                    .map_err(|e| AecError::shape(format!("decoder skip join: {e}")))?;
                y = layer.forward(&joined.view(), prev)?;
                rec.push(dims(&y));
            }
            Ok::<_, AecError>(y)
        };
        let mut rec_r = Vec::new();
        let mut rec_i = Vec::new();
        let real = decode(&self.dec_real, &mut st.dec_real, &mut rec_r)?;
        let imag = decode(&self.dec_imag, &mut st.dec_imag, &mut rec_i)?;
        let logits = match &self.vad {
            Some(v) => {
                let (l, rows) = v.forward(&h.view())?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.vad = rows;
                }
                l
            }
            None => Array2::zeros((frames, 2)),
        };
        if let Some(tr) = trace {
            tr.decoder_real = rec_r;
            tr.decoder_imag = rec_i;
        }
        Ok((real, imag, logits))
    }

    fn check_input(&self, feat: &FeatureTensor) -> Result<()> {
        self.arch.validate()?;
        let (c, _, f) = feat.data.dim();
        if c != self.arch.input_channels || f != self.arch.bins {
            return Err(AecError::shape(format!(
                "network expects {}x?x{} features, got {c}x?x{f}",
                self.arch.input_channels, self.arch.bins
            )));
        }
        Ok(())
    }

    /// Runs the network on compressed features and returns the compressed
    /// estimate plus logits.
    pub fn forward_compressed(&self, feat: &FeatureTensor) -> Result<NetOutput> {
        self.check_input(feat)?;
        let (_, frames, bins) = feat.data.dim();
        let mut real = Array2::zeros((frames, bins));
        let mut imag = Array2::zeros((frames, bins));
        let mut vad = Array2::zeros((frames, 2));
        let mut st = self.new_state();
        let mut t0 = 0;
        while t0 < frames {
            let t1 = (t0 + CHUNK_FRAMES).min(frames);
            let (r, i, l) = self.run_chunk(&feat.data.slice(s![.., t0..t1, ..]), &mut st, None)?;
            real.slice_mut(s![t0..t1, ..]).assign(&r.index_axis(Axis(0), 0));
            imag.slice_mut(s![t0..t1, ..]).assign(&i.index_axis(Axis(0), 0));
            vad.slice_mut(s![t0..t1, ..]).assign(&l);
            t0 = t1;
        }
        Ok(NetOutput { real, imag, vad: VadLogits { data: vad } })
    }

    /// Single-chunk pass that also records every intermediate shape.
    pub fn forward_traced(&self, feat: &FeatureTensor) -> Result<(NetOutput, ForwardTrace)> {
        self.check_input(feat)?;
        let mut trace = ForwardTrace::default();
        let mut st = self.new_state();
        let (r, i, l) = self.run_chunk(&feat.data.view(), &mut st, Some(&mut trace))?;
        let out = NetOutput {
            real: r.index_axis(Axis(0), 0).to_owned(),
            imag: i.index_axis(Axis(0), 0).to_owned(),
            vad: VadLogits { data: l },
        };
        Ok((out, trace))
    }

    /// Decompressed near-end estimate and VAD logits.
    pub fn forward(&self, feat: &FeatureTensor) -> Result<(Spectrogram, VadLogits)> {
        let out = self.forward_compressed(feat)?;
        let (frames, bins) = out.real.dim();
        let data = out
            .real
            .iter()
            .zip(out.imag.iter())
            .map(|(&r, &i)| Complex64::new(r as f64, i as f64))
            .collect();
        let compressed = Spectrogram::new(data, frames, bins)?;
        let spec = compress_spectrum(&compressed, 1.0 / COMPRESSION_EXPONENT)?;
        Ok((spec, out.vad))
    }
}

pub fn load_weights(container: WeightContainer, arch: ModelArch) -> Result<Model> {
    Model::load(container, arch)
}

pub fn init_random(seed: u64, arch: ModelArch) -> Result<Model> {
    Model::init_random(seed, arch)
}

pub fn forward(model: &Model, feat: &FeatureTensor) -> Result<(Spectrogram, VadLogits)> {
    model.forward(feat)
}

pub fn param_count(model: &Model) -> usize {
    model.param_count()
}
