//! Reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradcheckReport};
pub use kernels::{conv_out_len, tconv_out_len};
pub use tape::{GradientMap, Tape, ValueId};
pub use tensor::Tensor;
