//! Building blocks of the post-filter. Tensors are `C×T×F`, `f32`.
//!
//! Every layer is causal in time and keeps the state it needs to continue
//! across chunk boundaries, so a long input can be processed in pieces with
//! bit-identical results.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::error::{AecError, Result};

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Output width of a stride-2, width-3 frequency convolution.
pub fn conv_out_bins(f: usize) -> usize {
    if f < 3 {
        0
    } else {
        (f - 3) / 2 + 1
    }
}

/// Output width of the matching transposed convolution.
pub fn trconv_out_bins(f: usize, output_padding: usize) -> usize {
    2 * f.saturating_sub(1) + 3 + output_padding
}

fn flat(x: Array3<f32>) -> Array2<f32> {
    let (c, t, f) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, t * f))
        .expect("standard layout")
}

fn unflat(x: Array2<f32>, t: usize, f: usize) -> Array3<f32> {
    let c = x.nrows();
    x.into_shape_with_order((c, t, f)).expect("standard layout")
}

/// Prepends the carried previous frame, then remembers the last frame.
fn with_history(x: &ArrayView3<f32>, prev: &mut Array2<f32>) -> Array3<f32> {
    let (c, t, f) = x.dim();
    let mut xp = Array3::zeros((c, t + 1, f));
    xp.slice_mut(s![.., 0, ..]).assign(prev);
    xp.slice_mut(s![.., 1.., ..]).assign(x);
    if t > 0 {
        prev.assign(&x.slice(s![.., t - 1, ..]));
    }
    xp
}

fn add_bias(x: &mut Array2<f32>, b: &Array1<f32>) {
    for (mut row, &bv) in x.axis_iter_mut(Axis(0)).zip(b) {
        row.mapv_inplace(|v| v + bv);
    }
}

#[derive(Debug, Clone)]
pub struct Prelu {
    pub slope: Array1<f32>,
}

impl Prelu {
    fn apply(&self, x: &mut Array2<f32>) {
        for (mut row, &a) in x.axis_iter_mut(Axis(0)).zip(&self.slope) {
            row.mapv_inplace(|v| if v >= 0.0 { v } else { a * v });
        }
    }
}

/// Gated convolution with kernel (2 time, 3 freq) and frequency stride 2.
#[derive(Debug, Clone)]
pub struct GatedConv {
    /// `[Cout, Cin, 2, 3]`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub gate_weight: Array4<f32>,
    pub gate_bias: Array1<f32>,
    pub prelu: Option<Prelu>,
}

impl GatedConv {
    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub(crate) fn forward(&self, x: &ArrayView3<f32>, prev: &mut Array2<f32>) -> Result<Array3<f32>> {
        let (cin, t, f) = x.dim();
        if cin != self.in_channels() || prev.dim() != (cin, f) {
            return Err(AecError::shape(format!(
                "gated conv expects {} channels, got {cin}x{t}x{f}",
                self.in_channels()
            )));
        }
        let fo = conv_out_bins(f);
        if fo == 0 {
            return Err(AecError::shape(format!("gated conv needs at least 3 bins, got {f}")));
        }
        let xp = with_history(x, prev);
        let cout = self.out_channels();
        let mut acc = Array2::zeros((cout, t * fo));
        let mut gate = Array2::zeros((cout, t * fo));
        for kt in 0..2 {
            for kf in 0..3 {
                let cols = xp.slice(s![.., kt..kt + t, kf..kf + 2 * (fo - 1) + 1;2]).to_owned();
                let cols = flat(cols);
                let w = self.weight.slice(s![.., .., kt, kf]);
                let g = self.gate_weight.slice(s![.., .., kt, kf]);
                general_mat_mul(1.0, &w, &cols, 1.0, &mut acc);
                general_mat_mul(1.0, &g, &cols, 1.0, &mut gate);
            }
        }
        add_bias(&mut acc, &self.bias);
        add_bias(&mut gate, &self.gate_bias);
        acc.zip_mut_with(&gate, |a, &g| *a *= sigmoid(g));
        if let Some(p) = &self.prelu {
            p.apply(&mut acc);
        }
        Ok(unflat(acc, t, fo))
    }
}

/// Gated transposed convolution, the mirror of [`GatedConv`].
#[derive(Debug, Clone)]
pub struct GatedTransConv {
    /// `[Cin, Cout, 2, 3]`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub gate_weight: Array4<f32>,
    pub gate_bias: Array1<f32>,
    pub output_padding: usize,
    pub prelu: Option<Prelu>,
}

impl GatedTransConv {
    pub fn in_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub(crate) fn forward(&self, x: &ArrayView3<f32>, prev: &mut Array2<f32>) -> Result<Array3<f32>> {
        let (cin, t, f) = x.dim();
        if cin != self.in_channels() || prev.dim() != (cin, f) || f == 0 {
            return Err(AecError::shape(format!(
                "transposed gated conv expects {} channels, got {cin}x{t}x{f}",
                self.in_channels()
            )));
        }
        let fo = trconv_out_bins(f, self.output_padding);
        let cout = self.out_channels();
        let xp = with_history(x, prev);
        let mut acc = Array3::<f32>::zeros((cout, t, fo));
        let mut gate = Array3::<f32>::zeros((cout, t, fo));
        let mut part = Array2::<f32>::zeros((cout, t * f));
        for kt in 0..2 {
            let cols = flat(xp.slice(s![.., kt..kt + t, ..]).to_owned());
            for kf in 0..3 {
                let span = s![.., .., kf..kf + 2 * (f - 1) + 1;2];
                let w = self.weight.slice(s![.., .., kt, kf]);
                general_mat_mul(1.0, &w.t(), &cols, 0.0, &mut part);
                let p = part.view().into_shape_with_order((cout, t, f)).expect("contiguous");
                acc.slice_mut(span).zip_mut_with(&p, |a, &v| *a += v);
                let g = self.gate_weight.slice(s![.., .., kt, kf]);
                general_mat_mul(1.0, &g.t(), &cols, 0.0, &mut part);
                let p = part.view().into_shape_with_order((cout, t, f)).expect("contiguous");
                gate.slice_mut(span).zip_mut_with(&p, |a, &v| *a += v);
            }
        }
        let mut acc = flat(acc);
        let mut gate = flat(gate);
        add_bias(&mut acc, &self.bias);
        add_bias(&mut gate, &self.gate_bias);
        acc.zip_mut_with(&gate, |a, &g| *a *= sigmoid(g));
        if let Some(p) = &self.prelu {
            p.apply(&mut acc);
        }
        Ok(unflat(acc, t, fo))
    }
}

/// Pointwise channel mixing (1×1 convolution) or a dense layer on one axis.
#[derive(Debug, Clone)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// Maps the leading axis of `x` (`in×N`) to `out×N`.
    pub(crate) fn apply_cols(&self, x: &ArrayView2<f32>) -> Result<Array2<f32>> {
        if x.nrows() != self.inputs() {
            return Err(AecError::shape(format!(
                "dense layer expects {} inputs, got {}",
                self.inputs(),
                x.nrows()
            )));
        }
        let mut out = Array2::zeros((self.outputs(), x.ncols()));
        general_mat_mul(1.0, &self.weight, x, 0.0, &mut out);
        add_bias(&mut out, &self.bias);
        Ok(out)
    }

    /// 1×1 convolution over the channel axis of a `C×T×F` tensor.
    pub(crate) fn conv1x1(&self, x: &ArrayView3<f32>) -> Result<Array3<f32>> {
        let (_, t, f) = x.dim();
        let out = self.apply_cols(&flat(x.to_owned()).view())?;
        Ok(unflat(out, t, f))
    }

    /// Dense layer over the last axis of `C×T×F`.
    pub(crate) fn last_axis(&self, x: &ArrayView3<f32>) -> Result<Array3<f32>> {
        let (c, t, f) = x.dim();
        if f != self.inputs() {
            return Err(AecError::shape(format!(
                "dense layer expects last axis {}, got {f}",
                self.inputs()
            )));
        }
        let rows = x.as_standard_layout().into_owned().into_shape_with_order((c * t, f)).expect("layout");
        let mut out = Array2::zeros((c * t, self.outputs()));
        general_mat_mul(1.0, &rows, &self.weight.t(), 0.0, &mut out);
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.zip_mut_with(&self.bias, |v, &b| *v += b);
        }
        Ok(out.into_shape_with_order((c, t, self.outputs())).expect("layout"))
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    /// `[4H, I]`
    pub weight_ih: Array2<f32>,
    /// `[4H, H]`
    pub weight_hh: Array2<f32>,
    pub bias_ih: Array1<f32>,
    pub bias_hh: Array1<f32>,
}

impl Lstm {
    pub fn hidden(&self) -> usize {
        self.weight_hh.ncols()
    }

    pub fn inputs(&self) -> usize {
        self.weight_ih.ncols()
    }

    /// `W_ih·x + b_ih + b_hh` for a batch of inputs (`I×N`).
    pub(crate) fn input_projection(&self, x: &ArrayView2<f32>) -> Result<Array2<f32>> {
        if x.nrows() != self.inputs() {
            return Err(AecError::shape(format!(
                "LSTM expects {} inputs, got {}",
                self.inputs(),
                x.nrows()
            )));
        }
        let mut pre = Array2::zeros((4 * self.hidden(), x.ncols()));
        general_mat_mul(1.0, &self.weight_ih, x, 0.0, &mut pre);
        let bias = &self.bias_ih + &self.bias_hh;
        add_bias(&mut pre, &bias);
        Ok(pre)
    }

    /// One step for a batch of `B` sequences; `pre` is `4H×B`, state `H×B`.
    pub(crate) fn step(&self, pre: &ArrayView2<f32>, h: &mut Array2<f32>, c: &mut Array2<f32>) {
        let hd = self.hidden();
        let mut z = pre.to_owned();
        general_mat_mul(1.0, &self.weight_hh, &*h, 1.0, &mut z);
        for b in 0..z.ncols() {
            for j in 0..hd {
                let i = sigmoid(z[[j, b]]);
                let f = sigmoid(z[[hd + j, b]]);
                let g = z[[2 * hd + j, b]].tanh();
                let o = sigmoid(z[[3 * hd + j, b]]);
                let cn = f * c[[j, b]] + i * g;
                c[[j, b]] = cn;
                h[[j, b]] = o * cn.tanh();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f32> {
        Array::from_shape_fn(d, |_| rng.random_range(-0.5..0.5))
    }

    fn rand1(rng: &mut ChaCha8Rng, n: usize) -> Array1<f32> {
        Array::from_shape_fn(n, |_| rng.random_range(-0.5..0.5))
    }

    fn rand3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f32> {
        Array::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn bin_arithmetic() {
        let chain: Vec<usize> = std::iter::successors(Some(161), |&f| Some(conv_out_bins(f))).take(5).collect();
        assert_eq!(chain, vec![161, 80, 39, 19, 9]);
        assert_eq!(trconv_out_bins(9, 0), 19);
        assert_eq!(trconv_out_bins(19, 0), 39);
        assert_eq!(trconv_out_bins(39, 1), 80);
        assert_eq!(trconv_out_bins(80, 0), 161);
    }

    #[test]
    fn gated_conv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cin, cout, t, f) = (3, 4, 5, 11);
        let layer = GatedConv {
            weight: rand4(&mut rng, (cout, cin, 2, 3)),
            bias: rand1(&mut rng, cout),
            gate_weight: rand4(&mut rng, (cout, cin, 2, 3)),
            gate_bias: rand1(&mut rng, cout),
            prelu: None,
        };
        let x = rand3(&mut rng, (cin, t, f));
        let out = layer.forward(&x.view(), &mut Array2::zeros((cin, f))).unwrap();
        let fo = conv_out_bins(f);
        assert_eq!(out.dim(), (cout, t, fo));
        let at = |ci: usize, ti: isize, fi: usize| if ti < 0 { 0.0 } else { x[[ci, ti as usize, fi]] as f64 };
        for co in 0..cout {
            for ti in 0..t {
                for fq in 0..fo {
                    let (mut a, mut g) = (layer.bias[co] as f64, layer.gate_bias[co] as f64);
                    for ci in 0..cin {
                        for kt in 0..2 {
                            for kf in 0..3 {
                                let v = at(ci, ti as isize - 1 + kt as isize, 2 * fq + kf);
                                a += layer.weight[[co, ci, kt, kf]] as f64 * v;
                                g += layer.gate_weight[[co, ci, kt, kf]] as f64 * v;
                            }
                        }
                    }
                    let want = a / (1.0 + (-g).exp());
                    assert!((out[[co, ti, fq]] as f64 - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_matches_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (cin, cout, t, f, op) = (3, 2, 4, 5, 1);
        let layer = GatedTransConv {
            weight: rand4(&mut rng, (cin, cout, 2, 3)),
            bias: rand1(&mut rng, cout),
            gate_weight: rand4(&mut rng, (cin, cout, 2, 3)),
            gate_bias: rand1(&mut rng, cout),
            output_padding: op,
            prelu: None,
        };
        let x = rand3(&mut rng, (cin, t, f));
        let out = layer.forward(&x.view(), &mut Array2::zeros((cin, f))).unwrap();
        let fo = trconv_out_bins(f, op);
        assert_eq!(out.dim(), (cout, t, fo));
        let mut a = vec![0.0f64; cout * t * fo];
        let mut g = vec![0.0f64; cout * t * fo];
        for ci in 0..cin {
            for ti in 0..t {
                for fi in 0..f {
                    for kt in 0..2 {
                        let to = ti + 1 - kt;
                        if to >= t {
                            continue;
                        }
                        for kf in 0..3 {
                            for co in 0..cout {
                                let idx = (co * t + to) * fo + 2 * fi + kf;
                                a[idx] += layer.weight[[ci, co, kt, kf]] as f64 * x[[ci, ti, fi]] as f64;
                                g[idx] += layer.gate_weight[[ci, co, kt, kf]] as f64 * x[[ci, ti, fi]] as f64;
                            }
                        }
                    }
                }
            }
        }
        for co in 0..cout {
            for ti in 0..t {
                for fq in 0..fo {
                    let idx = (co * t + ti) * fo + fq;
                    let av = a[idx] + layer.bias[co] as f64;
                    let gv = g[idx] + layer.gate_bias[co] as f64;
                    let want = av / (1.0 + (-gv).exp());
                    assert!((out[[co, ti, fq]] as f64 - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = GatedConv {
            weight: rand4(&mut rng, (2, 2, 2, 3)),
            bias: Array1::zeros(2),
            gate_weight: rand4(&mut rng, (2, 2, 2, 3)),
            gate_bias: Array1::zeros(2),
            prelu: Some(Prelu { slope: Array1::from_elem(2, 0.25) }),
        };
        let out = conv.forward(&Array3::zeros((2, 3, 9)).view(), &mut Array2::zeros((2, 9))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let tr = GatedTransConv {
            weight: rand4(&mut rng, (2, 1, 2, 3)),
            bias: Array1::zeros(1),
            gate_weight: rand4(&mut rng, (2, 1, 2, 3)),
            gate_bias: Array1::zeros(1),
            output_padding: 0,
            prelu: None,
        };
        let out = tr.forward(&Array3::zeros((2, 3, 9)).view(), &mut Array2::zeros((2, 9))).unwrap();
        assert_eq!(out.dim(), (1, 3, 19));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunked_conv_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let conv = GatedConv {
            weight: rand4(&mut rng, (3, 2, 2, 3)),
            bias: rand1(&mut rng, 3),
            gate_weight: rand4(&mut rng, (3, 2, 2, 3)),
            gate_bias: rand1(&mut rng, 3),
            prelu: Some(Prelu { slope: Array1::from_elem(3, 0.25) }),
        };
        let x = rand3(&mut rng, (2, 7, 13));
        let whole = conv.forward(&x.view(), &mut Array2::zeros((2, 13))).unwrap();
        let mut prev = Array2::zeros((2, 13));
        let a = conv.forward(&x.slice(s![.., ..3, ..]), &mut prev).unwrap();
        let b = conv.forward(&x.slice(s![.., 3.., ..]), &mut prev).unwrap();
        assert_eq!(whole.slice(s![.., ..3, ..]), a);
        assert_eq!(whole.slice(s![.., 3.., ..]), b);
    }

    #[test]
    fn shape_errors() {
        let conv = GatedConv {
            weight: Array4::zeros((2, 3, 2, 3)),
            bias: Array1::zeros(2),
            gate_weight: Array4::zeros((2, 3, 2, 3)),
            gate_bias: Array1::zeros(2),
            prelu: None,
        };
        let r = conv.forward(&Array3::zeros((4, 2, 9)).view(), &mut Array2::zeros((4, 9)));
        assert!(matches!(r, Err(AecError::Shape(_))));
    }

    #[test]
    fn lstm_step_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (i, h) = (3, 2);
        let l = Lstm {
            weight_ih: Array::from_shape_fn((4 * h, i), |_| rng.random_range(-1.0..1.0)),
            weight_hh: Array::from_shape_fn((4 * h, h), |_| rng.random_range(-1.0..1.0)),
            bias_ih: rand1(&mut rng, 4 * h),
            bias_hh: rand1(&mut rng, 4 * h),
        };
        let x = Array::from_shape_fn((i, 1), |_| rng.random_range(-1.0..1.0));
        let mut hs = Array::from_shape_fn((h, 1), |_| rng.random_range(-1.0..1.0));
        let mut cs = Array::from_shape_fn((h, 1), |_| rng.random_range(-1.0..1.0));
        let (h0, c0) = (hs.clone(), cs.clone());
        let pre = l.input_projection(&x.view()).unwrap();
        l.step(&pre.view(), &mut hs, &mut cs);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..h {
            let z = |k: usize| {
                let r = k * h + j;
                let mut v = (l.bias_ih[r] + l.bias_hh[r]) as f64;
                for q in 0..i {
                    v += (l.weight_ih[[r, q]] * x[[q, 0]]) as f64;
                }
                for q in 0..h {
                    v += (l.weight_hh[[r, q]] * h0[[q, 0]]) as f64;
                }
                v
            };
            let c = sig(z(1)) * c0[[j, 0]] as f64 + sig(z(0)) * z(2).tanh();
            let hv = sig(z(3)) * c.tanh();
            assert!((cs[[j, 0]] as f64 - c).abs() < 1e-5);
            assert!((hs[[j, 0]] as f64 - hv).abs() < 1e-5);
        }
    }
}
