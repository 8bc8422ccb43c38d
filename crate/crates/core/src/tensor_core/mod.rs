//! Tensors, a reverse-mode tape and the handful of layers MicroNet needs.

mod batchnorm;
pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;


pub use batchnorm::{
    BatchNormState, BnMode, StatsAccumulator, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM,
};
pub use checkpoint::NamedTensor;
pub use optim::{sgd_step, SgdConfig};
pub use tape::{Tape, Var};
pub use tensor::{Parameter, Tensor};
