//! Rectified-correlation networks: anchor banks on the unit sphere,
//! LeNet-5 style cascades built from them, spherical k-means and random
//! initialization, SGD training, and interpretability tools.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod init;
pub mod mnist;
pub mod network;
pub mod numerics;
pub mod recos;
pub mod train;

pub use error::{CheckpointError, Error, IdxError, Result};
pub use init::{initialize, kmeans_initialize, random_initialize, InitScheme, KMeansConfig};
pub use mnist::{Dataset, LabeledImage};
pub use network::{build_lenet5, DecisionVector, LayerKind, LayerSpec, LossKind, Network};
pub use numerics::{Shape, Tensor};
pub use recos::{AnchorBank, Rectifier};
pub use train::{train, TrainConfig, TrainHistory};
