//! Tensor kernels. Each forward kernel has a matching backward kernel used by
//! the autodiff tape.

pub mod conv;
pub mod layout;
pub mod matmul;
pub mod norm;
pub mod rope;
pub mod softmax;
