//! Multi-view kernels from local Mahalanobis metrics, with diffusion-map embedding and the
//! simulators and metrics needed to evaluate them.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod itosim;
pub mod localcov;
pub mod mahalanobis;
pub mod metrics;
pub mod multiview;
pub mod packed;

pub use dataset::{MultiViewDataset, ViewMatrix};
pub use diffusion::{diffusion_map, DiffusionEmbedding};
pub use error::{MvkError, Result};
pub use localcov::{GammaRule, LocalCovariance, NeighborhoodSpec};
pub use multiview::{
    algorithm1_kernel, algorithm2_kernel, Algorithm1Config, Algorithm2Config, KernelConvention, KernelFusion,
    KernelMatrix,
};
