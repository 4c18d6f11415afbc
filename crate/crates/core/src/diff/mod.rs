//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Forward passes record onto a [`Tape`]; [`Tape::backward`] then walks the
//! tape in reverse, calling each primitive's vector-Jacobian product. Fused
//! kernels (splatting, deformable sampling, sparse convolution, losses) plug
//! in through [`CustomOp`].

mod checkpoint;
mod gradcheck;
mod mlp;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, GradMismatch};
pub use mlp::{mlp_forward, Activation, Layer, Mlp};
pub use ops::BilinearTap;
pub use optim::{lr_schedule, AdamConfig, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
