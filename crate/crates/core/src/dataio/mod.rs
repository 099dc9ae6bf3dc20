//! Point clouds, file formats, synthetic shapes, checkpoints and run configs.

pub mod checkpoint;
mod cloud;
pub mod config;
mod formats;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoredTensor};
pub use cloud::{normalize, resample, PointCloud};
pub use config::{DataConfig, Paths, RunConfig};
pub use formats::{parse_cloud, read_cloud, write_cloud, write_cloud_string, CloudFormat};
pub use synthetic::{generate, generate_dataset, Family, Primitive, Synthetic, SyntheticSpec};

/// Independent seed for sub-stream `stream` of a run seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
