//! Point-capsule auto-encoder for 3D point clouds.
//!
//! The pipeline maps an `N x 3` cloud to primary point capsules with a
//! point-wise MLP and independent max-pooled branches, clusters them into
//! latent capsules by dynamic routing, and reconstructs the cloud by
//! replicating each latent capsule over random 2D patch coordinates through
//! a shared MLP. Training minimizes the Chamfer distance with Adam on a small
//! reverse-mode tape that lives in [`autodiff`].

pub mod autodiff;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod latent;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod partseg;
pub mod routing;
pub mod spatial;
pub mod tensor;
pub mod trainer;

pub use dataio::{PointCloud, RunConfig};
pub use decoder::{DecoderConfig, PatchGrid, Reconstruction};
pub use encoder::{EncoderConfig, PrimaryCapsules};
pub use error::{Error, Result};
pub use latent::{CapsuleSelection, LinearClassifier};
pub use model::{ModelConfig, PointCapsNet};
pub use params::{adam_step, AdamConfig, ParameterStore};
pub use partseg::{CapsuleLabeling, PartNet, PartNetConfig};
pub use routing::{LatentCapsules, RoutingConfig, RoutingMode};
pub use tensor::{Real, Tensor};
pub use trainer::{EvalReport, TrainConfig, TrainReport};
