//! Minimal CPU neural-network engine: NCHW tensors, the handful of layers the
//! branched architecture needs, and reverse-mode gradients for each of them.

pub mod adam;
pub mod conv;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{Adam, Moments};
pub use layers::{backward, forward, infer, Op, Tape};
pub use params::{Grads, ParamStore, ParamTensor};
pub use tensor::Tensor;
