//! Small 1-D network primitives with exact reverse passes.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod sequential;
pub mod tensor;

pub use attention::sdp_attention;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{check_gradients, Differentiable, GradCheckConfig, GradReport};
pub use layers::{backward_layer, forward_layer, Layer, LayerCache, LayerSpec, Mode};
pub use params::{Param, ParamStore};
pub use sequential::Sequential;
pub use tensor::Tensor1d;
