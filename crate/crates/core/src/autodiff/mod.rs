//! Define-by-run reverse-mode automatic differentiation over f32 matrices.
//!
//! [`Tape`] records eagerly executed primitives; [`Tape::backward`] walks the
//! record once in reverse. [`Mlp`] builds fully connected networks on top,
//! [`ParamStore`] owns the trainable tensors, and [`Optimizer`] updates them.

pub mod fdiff;
mod mlp;
mod optim;
mod params;
mod tape;
mod tensor;

pub use mlp::{Activation, Mlp, MlpSpec};
pub use optim::{Optimizer, OptimizerKind};
pub use params::ParamStore;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
