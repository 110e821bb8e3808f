//! Frequency-then-time LSTM block.
//!
//! The F-LSTM scans the bins of each frame independently; the T-LSTM scans
//! frames per bin and carries its state across chunks. Both paths end in a
//! projection back to `C` channels and a residual add.

use ndarray::{s, Array2, Array3, ArrayView3};

use super::layers::{Dense, Lstm};
use crate::error::{AecError, Result};

#[derive(Debug, Clone)]
pub struct FtLstmBlock {
    pub f_lstm: Lstm,
    pub f_proj: Dense,
    pub t_lstm: Lstm,
    pub t_proj: Dense,
}

/// Recurrent state of the time-axis LSTM, `H×F`.
#[derive(Debug, Clone)]
pub(crate) struct TimeState {
    pub h: Array2<f32>,
    pub c: Array2<f32>,
}

impl TimeState {
    pub fn new(hidden: usize, bins: usize) -> Self {
        Self { h: Array2::zeros((hidden, bins)), c: Array2::zeros((hidden, bins)) }
    }
}

fn projected(lstm: &Lstm, x: &ArrayView3<f32>) -> Result<Array3<f32>> {
    let (c, t, f) = x.dim();
    let cols = x.as_standard_layout().into_owned().into_shape_with_order((c, t * f)).expect("layout");
    let pre = lstm.input_projection(&cols.view())?;
    Ok(pre.into_shape_with_order((4 * lstm.hidden(), t, f)).expect("layout"))
}

impl FtLstmBlock {
    pub(crate) fn forward(&self, x: &ArrayView3<f32>, state: &mut TimeState) -> Result<Array3<f32>> {
        let (c, t, f) = x.dim();
        let hd = self.t_lstm.hidden();
        if state.h.dim() != (hd, f) {
            return Err(AecError::shape(format!("FTLSTM state is {:?}, input has {f} bins", state.h.dim())));
        }

        let pre = projected(&self.f_lstm, x)?;
        let fh = self.f_lstm.hidden();
        let mut seq = Array3::<f32>::zeros((fh, t, f));
        let mut h = Array2::zeros((fh, t));
        let mut cell = Array2::zeros((fh, t));
        for bin in 0..f {
            self.f_lstm.step(&pre.slice(s![.., .., bin]), &mut h, &mut cell);
            seq.slice_mut(s![.., .., bin]).assign(&h);
        }
        let mut y = self.f_proj.conv1x1(&seq.view())?;
        if y.dim() != (c, t, f) {
            return Err(AecError::shape("F-LSTM projection must return the input channels"));
        }
        y += x;

        let pre = projected(&self.t_lstm, &y.view())?;
        let mut seq = Array3::<f32>::zeros((hd, t, f));
        for frame in 0..t {
            self.t_lstm.step(&pre.slice(s![.., frame, ..]), &mut state.h, &mut state.c);
            seq.slice_mut(s![.., frame, ..]).assign(&state.h);
        }
        let mut z = self.t_proj.conv1x1(&seq.view())?;
        if z.dim() != (c, t, f) {
            return Err(AecError::shape("T-LSTM projection must return the input channels"));
        }
        z += &y;
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize, fill: impl Fn() -> f32) -> FtLstmBlock {
        let m = |r, k| Array::from_shape_fn((r, k), |_| fill());
        let v = |n| Array1::from_shape_fn(n, |_| fill());
        let lstm = || Lstm { weight_ih: m(4 * c, c), weight_hh: m(4 * c, c), bias_ih: v(4 * c), bias_hh: v(4 * c) };
        FtLstmBlock {
            f_lstm: lstm(),
            f_proj: Dense { weight: m(c, c), bias: v(c) },
            t_lstm: lstm(),
            t_proj: Dense { weight: m(c, c), bias: v(c) },
        }
    }

    #[test]
    fn zero_weights_are_identity() {
        let b = block(4, || 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array::from_shape_fn((4, 6, 9), |_| rng.random_range(-1.0f32..1.0));
        let y = b.forward(&x.view(), &mut TimeState::new(4, 9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn shape_preserved_and_time_causal() {
        let rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(2));
        let b = block(5, || rng.borrow_mut().random_range(-0.4f32..0.4));
        let x = Array::from_shape_fn((5, 8, 9), |_| rng.borrow_mut().random_range(-1.0f32..1.0));
        let y = b.forward(&x.view(), &mut TimeState::new(5, 9)).unwrap();
        assert_eq!(y.dim(), (5, 8, 9));
        let mut x2 = x.clone();
        x2.slice_mut(s![.., 5.., ..]).fill(0.0);
        let y2 = b.forward(&x2.view(), &mut TimeState::new(5, 9)).unwrap();
        assert_eq!(y.slice(s![.., ..5, ..]), y2.slice(s![.., ..5, ..]));
        assert_ne!(y.slice(s![.., 5.., ..]), y2.slice(s![.., 5.., ..]));
    }

    #[test]
    fn chunked_matches_whole() {
        let rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(3));
        let b = block(3, || rng.borrow_mut().random_range(-0.5f32..0.5));
        let x = Array::from_shape_fn((3, 7, 9), |_| rng.borrow_mut().random_range(-1.0f32..1.0));
        let whole = b.forward(&x.view(), &mut TimeState::new(3, 9)).unwrap();
        let mut st = TimeState::new(3, 9);
        let a = b.forward(&x.slice(s![.., ..4, ..]), &mut st).unwrap();
        let c = b.forward(&x.slice(s![.., 4.., ..]), &mut st).unwrap();
        assert_eq!(whole.slice(s![.., ..4, ..]), a);
        assert_eq!(whole.slice(s![.., 4.., ..]), c);
    }
}
