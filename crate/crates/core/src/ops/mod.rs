//! Differentiable operators.
//!
//! Every operator is a pair of plain functions: a forward that maps tensors
//! to tensors and a hand-derived backward that distributes an upstream
//! gradient back to each input. Callers keep whatever the backward needs
//! (usually the forward inputs) and are responsible for accumulating the
//! returned gradients with `+=` semantics. The gradient checker in
//! [`crate::grad`] validates every pair against central differences.
//!
//! Outputs are deterministic: loops run in a fixed order and there is no
//! internal threading, so identical inputs give bit-identical results.

mod basic;
mod conv;
mod sample;

pub use basic::{
    add, add_backward, linear, linear_backward, matmul, matmul_backward, mean_reduce,
    mean_reduce_backward, mul, mul_backward, relu, relu_backward, smooth_l1, smooth_l1_backward,
    softmax_axis, softmax_axis_backward,
};
pub use conv::{conv2d, conv2d_backward, conv3d, conv3d_backward};
pub use sample::{bilinear_sample2d, bilinear_sample2d_backward, Border};

/// Identifier for every registered primitive operator; the gradient-check
/// suite enumerates these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Conv2d,
    Conv3d,
    Relu,
    SoftmaxAxis,
    Add,
    Mul,
    BilinearSample2d,
    MeanReduce,
    SmoothL1,
}

impl OpKind {
    pub fn all() -> &'static [OpKind] {
        &[
            OpKind::MatMul,
            OpKind::Conv2d,
            OpKind::Conv3d,
            OpKind::Relu,
            OpKind::SoftmaxAxis,
            OpKind::Add,
            OpKind::Mul,
            OpKind::BilinearSample2d,
            OpKind::MeanReduce,
            OpKind::SmoothL1,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv3d => "conv3d",
            OpKind::Relu => "relu",
            OpKind::SoftmaxAxis => "softmax-over-axis",
            OpKind::Add => "elementwise-add",
            OpKind::Mul => "elementwise-mul",
            OpKind::BilinearSample2d => "bilinear-sample-2d",
            OpKind::MeanReduce => "mean-reduce",
            OpKind::SmoothL1 => "smooth-l1",
        }
    }
}
