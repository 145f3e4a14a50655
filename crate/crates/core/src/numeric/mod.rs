//! Dense `f64` tensors, the handful of differentiable layer primitives the
//! engine needs, SGD and a finite-difference checker.

mod gradcheck;
pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use ops::{
    concat, conv2d, cross_entropy, depthwise_conv2d, global_avg_pool, l2_distance, linear, relu, softmax,
    softmax_cross_entropy,
};
pub use optim::{clip_grad_norm, sgd_step, zero_grad};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, Tensor};
