//! Minimal CPU tensor and reverse-mode autodiff machinery for the 3D
//! feature-pyramid model.

mod adam;
pub mod conv;
mod graph;
pub mod loss_kernels;
mod params;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use conv::ConvGeom;
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use scalar::{gemm, gemm_strided, Scalar, Strides};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
