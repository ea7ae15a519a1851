//! Precision-tagged arithmetic and the small set of kernels the model and
//! the patch computations share.

mod linalg;
mod ops;
mod precision;
mod rng;

pub use linalg::{DenseMatrix, DenseVector};
pub use ops::{rms, rms_denominator, rmsnorm, scaled_rmsnorm, softmax, Activation, DEFAULT_EPS};
pub use precision::{round_bf16, Precision};
pub use rng::Rng;
