//! The signal refinement and reconstruction network: four refinement blocks
//! (conv, BN, ReLU, TMSC, pool) and three reconstruction blocks (deconv, BN,
//! ELU, spectrum self-attention) followed by a 1×1 head.

pub mod budget;
pub mod config;
pub mod model;
pub mod ssa;

pub use budget::{count_flops, count_params, FlopReport};
pub use config::SrrnConfig;
pub use model::{assemble_input, prepare_input, srrn_forward, ForwardCache, SrrnModel, Tmsc};
pub use ssa::Ssa;
