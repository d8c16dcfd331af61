//! Dense tensors, a dynamic reverse-mode tape, and the kernels the model is
//! built from (convolution, pooling, batchnorm, linear algebra, LSTM cell).

mod conv;
pub mod gradcheck;
pub mod kernels;
mod lstm;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use conv::{BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use lstm::LstmVars;
pub use ops::{log_sum_exp, sigmoid, softmax_slice};
pub use scalar::{DType, Scalar};
pub use tape::{Fault, Tape, Var};
pub use tensor::Tensor;
