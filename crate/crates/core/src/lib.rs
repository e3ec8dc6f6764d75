pub mod bvp;
pub mod error;
pub mod nn;
pub mod physio;
pub mod seed;
pub mod spectral;
pub mod srrn;
pub mod stmap;
pub mod synth;
pub mod train;

pub use bvp::BvpSignal;
pub use error::{Error, Result};
