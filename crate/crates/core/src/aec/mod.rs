//! Linear acoustic echo cancellation.
//!
//! Both filters split the microphone signal into an error `e` and a linear
//! echo estimate `y` with `d = e + y`. [`mdf`] works block-wise in the time
//! domain; [`wrls`] works per STFT bin.

pub mod mdf;
pub mod wrls;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::AecError;

pub use mdf::{mdf_create, MdfState};
pub use wrls::{wrls_create, WrlsState};

/// Far-end frames quieter than this mean-square level (−60 dBFS) do not
/// drive adaptation.
pub const FREEZE_POWER: f64 = 1e-6;

/// Time-domain output of one MDF block.
#[derive(Debug, Clone, PartialEq)]
pub struct AecFrameOut {
    pub e_frame: Vec<f64>,
    pub y_frame: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    /// No linear stage: `e = d`, `y = 0`.
    None,
    Mdf,
    Wrls,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::None => "none",
            FilterKind::Mdf => "mdf",
            FilterKind::Wrls => "wrls",
        })
    }
}

impl FromStr for FilterKind {
    type Err = AecError;

    fn from_str(s: &str) -> Result<Self, AecError> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "off" => Ok(FilterKind::None),
            "mdf" => Ok(FilterKind::Mdf),
            "wrls" => Ok(FilterKind::Wrls),
            other => Err(AecError::config(format!("unknown filter '{other}'"))),
        }
    }
}

pub(crate) fn write_f32_blob(path: &std::path::Path, values: &[f64]) -> crate::Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &v in values {
        file.write_all(&(v as f32).to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}
