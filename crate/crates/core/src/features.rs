//! Network input assembly from microphone, error, reference and
//! linear-echo spectra.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{AecError, Result};
use crate::stft::{compress_spectrum, Spectrogram};

/// Which signals feed the post-filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combo {
    /// Microphone and far-end reference; no linear AEC needed.
    Dx,
    /// Linear-AEC error and far-end reference.
    Ex,
    /// Microphone, linear-AEC error and linear echo estimate.
    Dey,
}

impl Combo {
    pub fn input_channels(self) -> usize {
        match self {
            Combo::Dx | Combo::Ex => 4,
            Combo::Dey => 6,
        }
    }

    pub fn needs_linear_filter(self) -> bool {
        !matches!(self, Combo::Dx)
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combo::Dx => "dx",
            Combo::Ex => "ex",
            Combo::Dey => "dey",
        })
    }
}

impl FromStr for Combo {
    type Err = AecError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dx" => Ok(Combo::Dx),
            "ex" => Ok(Combo::Ex),
            "dey" => Ok(Combo::Dey),
            other => Err(AecError::config(format!("unknown feature combination '{other}'"))),
        }
    }
}

/// The spectra available to feature assembly. Unused entries may be `None`.
#[derive(Debug, Default, Clone, Copy)]
pub struct FeatureSources<'a> {
    pub d: Option<&'a Spectrogram>,
    pub e: Option<&'a Spectrogram>,
    pub x: Option<&'a Spectrogram>,
    pub y: Option<&'a Spectrogram>,
}

/// Real-valued `C_in × T × F` network input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Array3<f32>,
    pub combo: Combo,
}

impl FeatureTensor {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn bins(&self) -> usize {
        self.data.dim().2
    }
}

/// Stacks real and imaginary parts in a fixed channel order:
///
/// * `Dey`: `[D_r, D_i, E_r, E_i, Y_r, Y_i]`
/// * `Dx`:  `[D_r, D_i, X_r, X_i]`
/// * `Ex`:  `[E_r, E_i, X_r, X_i]`
pub fn stack_features(combo: Combo, src: &FeatureSources<'_>) -> Result<FeatureTensor> {
    let required: Vec<(&str, Option<&Spectrogram>)> = match combo {
        Combo::Dey => vec![("D", src.d), ("E", src.e), ("Y", src.y)],
        Combo::Dx => vec![("D", src.d), ("X", src.x)],
        Combo::Ex => vec![("E", src.e), ("X", src.x)],
    };
    let mut specs = Vec::with_capacity(required.len());
    for (name, spec) in required {
        let spec = spec.ok_or_else(|| {
            AecError::config(format!("combination {combo} requires spectrum {name}"))
        })?;
        specs.push(spec);
    }
    let (frames, bins) = specs[0].shape();
    for s in &specs[1..] {
        specs[0].same_shape(s, "feature spectra")?;
    }
    let mut data = Array3::<f32>::zeros((2 * specs.len(), frames, bins));
    for (i, spec) in specs.iter().enumerate() {
        for t in 0..frames {
            for (f, c) in spec.frame(t).iter().enumerate() {
                data[[2 * i, t, f]] = c.re as f32;
                data[[2 * i + 1, t, f]] = c.im as f32;
            }
        }
    }
    Ok(FeatureTensor { data, combo })
}

/// Compresses every provided spectrum with exponent `p`, then stacks.
pub fn build_features(combo: Combo, src: &FeatureSources<'_>, p: f64) -> Result<FeatureTensor> {
    let compress = |s: Option<&Spectrogram>| s.map(|s| compress_spectrum(s, p)).transpose();
    let d = compress(src.d)?;
    let e = compress(src.e)?;
    let x = compress(src.x)?;
    let y = compress(src.y)?;
    stack_features(
        combo,
        &FeatureSources { d: d.as_ref(), e: e.as_ref(), x: x.as_ref(), y: y.as_ref() },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn ramp(frames: usize, offset: f64) -> Spectrogram {
        let data = (0..frames * 161)
            .map(|i| Complex64::new(offset + i as f64, -(i as f64)))
            .collect();
        Spectrogram::new(data, frames, 161).unwrap()
    }

    #[test]
    fn dey_has_six_channels_in_order() {
        let (d, e, y) = (ramp(3, 0.0), ramp(3, 1000.0), ramp(3, 2000.0));
        let src = FeatureSources { d: Some(&d), e: Some(&e), y: Some(&y), x: None };
        let feat = stack_features(Combo::Dey, &src).unwrap();
        assert_eq!(feat.data.dim(), (6, 3, 161));
        assert_eq!(feat.data[[0, 1, 2]], d.get(1, 2).re as f32);
        assert_eq!(feat.data[[1, 1, 2]], d.get(1, 2).im as f32);
        assert_eq!(feat.data[[2, 0, 0]], 1000.0);
        assert_eq!(feat.data[[4, 0, 0]], 2000.0);
    }

    #[test]
    fn dx_and_ex_have_four_channels() {
        let (d, e, x) = (ramp(2, 0.0), ramp(2, 5.0), ramp(2, 7.0));
        let src = FeatureSources { d: Some(&d), e: Some(&e), x: Some(&x), y: None };
        let dx = stack_features(Combo::Dx, &src).unwrap();
        assert_eq!(dx.data.dim(), (4, 2, 161));
        assert_eq!(dx.data[[2, 0, 0]], 7.0);
        let ex = stack_features(Combo::Ex, &src).unwrap();
        assert_eq!(ex.data[[0, 0, 0]], 5.0);
    }

    #[test]
    fn mismatched_frames_is_shape_error() {
        let (d, e, y) = (ramp(3, 0.0), ramp(4, 0.0), ramp(3, 0.0));
        let src = FeatureSources { d: Some(&d), e: Some(&e), y: Some(&y), x: None };
        assert!(matches!(stack_features(Combo::Dey, &src), Err(AecError::Shape(_))));
    }

    #[test]
    fn missing_signal_is_config_error() {
        let d = ramp(1, 0.0);
        let src = FeatureSources { d: Some(&d), ..Default::default() };
        assert!(matches!(stack_features(Combo::Dx, &src), Err(AecError::Config(_))));
    }

    #[test]
    fn stacking_is_stable() {
        let (d, x) = (ramp(2, 0.5), ramp(2, 3.0));
        let src = FeatureSources { d: Some(&d), x: Some(&x), ..Default::default() };
        let a = build_features(Combo::Dx, &src, 0.5).unwrap();
        let b = build_features(Combo::Dx, &src, 0.5).unwrap();
        let bits = |t: &FeatureTensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
