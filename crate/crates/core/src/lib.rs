pub mod aec;
pub mod audio;
pub mod error;
pub mod features;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod pipeline;
pub mod simulation;
pub mod stft;
pub mod subband;
pub mod tde;

pub use error::{AecError, Result};
