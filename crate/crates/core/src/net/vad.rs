//! Voice activity head on the FTLSTM output.
//!
//! Tensors here are time-major (`T×C×F`) to line up with the layer table
//! they reproduce. The recurrence runs over the four pooled groups of each
//! frame, so the head is causal frame by frame.

use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use super::layers::{Dense, Lstm};
use crate::error::{AecError, Result};

/// Width of the expanded frequency axis after the first dense layer.
pub const VAD_WIDTH: usize = 16;
/// Pooling kernel and stride.
pub const VAD_POOL: usize = 4;

/// One row of the layer table: name, input and output shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VadRow {
    pub layer: &'static str,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct VadHead {
    pub f_dense_in: Dense,
    pub f_lstm: Lstm,
    pub f_dense_out: Dense,
    pub c_dense: Dense,
}

impl VadHead {
    /// `h` is `C×T×F`; returns `T×2` logits and the traced shapes.
    pub(crate) fn forward(&self, h: &ArrayView3<f32>) -> Result<(Array2<f32>, Vec<VadRow>)> {
        let (c, t, f) = h.dim();
        let groups = VAD_WIDTH / VAD_POOL;
        if self.f_lstm.inputs() != c || self.f_lstm.hidden() != c || self.c_dense.inputs() != c {
            return Err(AecError::shape(format!("VAD head does not match {c} channels")));
        }
        let mut rows = Vec::with_capacity(7);
        let x = h.view().permuted_axes([1, 0, 2]);

        let dense = self.f_dense_in.last_axis(&x)?;
        rows.push(VadRow { layer: "F-Dense", input: vec![t, c, f], output: shape(&dense) });

        let grouped = dense
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t, groups * c, VAD_POOL))
            .expect("layout");
        rows.push(VadRow { layer: "Reshape", input: shape(&dense), output: shape(&grouped) });

        let pooled = grouped.map_axis(Axis(2), |v| v.iter().copied().fold(f32::NEG_INFINITY, f32::max));
        let pooled = pooled.insert_axis(Axis(2));
        rows.push(VadRow { layer: "Maxpool1d", input: shape(&grouped), output: shape(&pooled) });

        let steps = pooled.into_shape_with_order((t, c, groups)).expect("layout");
        rows.push(VadRow { layer: "Reshape", input: vec![t, groups * c, 1], output: shape(&steps) });

        let mut g = Array3::<f32>::zeros((t, c, groups));
        let mut hs = Array2::zeros((c, t));
        let mut cs = Array2::zeros((c, t));
        for q in 0..groups {
            let input = steps.slice(s![.., .., q]).t().as_standard_layout().into_owned();
            let pre = self.f_lstm.input_projection(&input.view())?;
            self.f_lstm.step(&pre.view(), &mut hs, &mut cs);
            g.slice_mut(s![.., .., q]).assign(&hs.t());
        }
        rows.push(VadRow { layer: "F-LSTM", input: shape(&steps), output: shape(&g) });

        // Group q of the gate scales the four pooled inputs 4q..4q+4.
        let mut gated = dense;
        for ((ti, ci, j), v) in gated.indexed_iter_mut() {
            *v *= g[[ti, ci, j / VAD_POOL]];
        }

        let merged = self.f_dense_out.last_axis(&gated.view())?;
        rows.push(VadRow { layer: "F-Dense", input: shape(&gated), output: shape(&merged) });

        let per_frame = merged.index_axis(Axis(2), 0).t().as_standard_layout().into_owned();
        let logits = self.c_dense.apply_cols(&per_frame.view())?.t().as_standard_layout().into_owned();
        rows.push(VadRow { layer: "C-Dense", input: shape(&merged), output: vec![logits.nrows(), logits.ncols()] });
        Ok((logits, rows))
    }
}

fn shape(x: &Array3<f32>) -> Vec<usize> {
    x.shape().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn head(c: usize, f: usize, seed: u64) -> VadHead {
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(seed));
        let m = |r, k| Array::from_shape_fn((r, k), |_| rng.borrow_mut().random_range(-0.5f32..0.5));
        let v = |n| Array1::from_shape_fn(n, |_| rng.borrow_mut().random_range(-0.5f32..0.5));
        VadHead {
            f_dense_in: Dense { weight: m(16, f), bias: v(16) },
            f_lstm: Lstm { weight_ih: m(4 * c, c), weight_hh: m(4 * c, c), bias_ih: v(4 * c), bias_hh: v(4 * c) },
            f_dense_out: Dense { weight: m(1, 16), bias: v(1) },
            c_dense: Dense { weight: m(2, c), bias: v(2) },
        }
    }

    #[test]
    fn rows_follow_layer_table() {
        let (c, t) = (6, 5);
        let h = Array::from_shape_fn((c, t, 9), |(a, b, d)| ((a * 31 + b * 7 + d) % 11) as f32 / 11.0 - 0.5);
        let (logits, rows) = head(c, 9, 1).forward(&h.view()).unwrap();
        assert_eq!(logits.dim(), (t, 2));
        let want = [
            ("F-Dense", vec![t, c, 9], vec![t, c, 16]),
            ("Reshape", vec![t, c, 16], vec![t, 4 * c, 4]),
            ("Maxpool1d", vec![t, 4 * c, 4], vec![t, 4 * c, 1]),
            ("Reshape", vec![t, 4 * c, 1], vec![t, c, 4]),
            ("F-LSTM", vec![t, c, 4], vec![t, c, 4]),
            ("F-Dense", vec![t, c, 16], vec![t, c, 1]),
            ("C-Dense", vec![t, c, 1], vec![t, 2]),
        ];
        assert_eq!(rows.len(), want.len());
        for (row, (name, i, o)) in rows.iter().zip(want) {
            assert_eq!((row.layer, &row.input, &row.output), (name, &i, &o));
        }
    }

    #[test]
    fn frames_are_independent() {
        let (c, t) = (4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Array::from_shape_fn((c, t, 9), |_| rng.random_range(-1.0f32..1.0));
        let vad = head(c, 9, 2);
        let (a, _) = vad.forward(&h.view()).unwrap();
        let mut h2 = h.clone();
        h2.slice_mut(s![.., 3, ..]).fill(0.0);
        let (b, _) = vad.forward(&h2.view()).unwrap();
        for ti in 0..t {
            if ti == 3 {
                assert_ne!(a.row(ti), b.row(ti));
            } else {
                assert_eq!(a.row(ti), b.row(ti));
            }
        }
    }

    #[test]
    fn pooling_groups_match_manual() {
        let c = 2;
        let vad = head(c, 9, 3);
        let h = Array::from_shape_fn((c, 1, 9), |(a, _, d)| (a as f32 - 0.5) * d as f32 / 9.0);
        let dense = vad.f_dense_in.last_axis(&h.view().permuted_axes([1, 0, 2])).unwrap();
        let grouped = dense.clone().into_shape_with_order((1, 4 * c, 4)).unwrap();
        for ci in 0..c {
            for q in 0..4 {
                for a in 0..4 {
                    assert_eq!(grouped[[0, 4 * ci + q, a]], dense[[0, ci, 4 * q + a]]);
                }
            }
        }
    }
}
