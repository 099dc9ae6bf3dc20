//! Point-wise MLP and max-pooled branches producing primary point capsules.

use rand::Rng;

use crate::autodiff::{BatchNormConfig, Graph, Mode, Var};
use crate::dataio::PointCloud;
use crate::error::{Error, Result};
use crate::nn::{register_batchnorm, BnReluLayer};
use crate::params::ParameterStore;
use crate::routing::{self, LatentCapsules, RoutingConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_points: usize,
    pub point_dim: usize,
    /// Shared MLP widths, starting at the point dimension.
    pub mlp_widths: Vec<usize>,
    /// Number of independent branches, which becomes the capsule dimension.
    pub branch_count: usize,
    /// Output width of each branch, which becomes the capsule count.
    pub branch_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_points: 2048,
            point_dim: 3,
            mlp_widths: vec![3, 64, 128],
            branch_count: 16,
            branch_width: 1024,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0
            || self.point_dim == 0
            || self.branch_count == 0
            || self.branch_width == 0
        {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if self.mlp_widths.len() < 2 || self.mlp_widths.contains(&0) {
            return Err(Error::config(
                "encoder.mlp_widths needs at least two positive widths",
            ));
        }
        if self.mlp_widths[0] != self.point_dim {
            return Err(Error::config(format!(
                "encoder.mlp_widths starts at {} but points have dimension {}",
                self.mlp_widths[0], self.point_dim
            )));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<BnReluLayer> {
        self.mlp_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| BnReluLayer::new(&format!("encoder.mlp{i}"), w[0], w[1]))
            .collect()
    }

    fn feature_width(&self) -> usize {
        *self.mlp_widths.last().unwrap()
    }
}

/// `branch_width x branch_count` capsule bank: row `i` holds every branch's
/// pooled response at index `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryCapsules<T> {
    pub capsules: Tensor<T>,
}

pub const BRANCH_WEIGHT: &str = "encoder.branches.weight";
const BRANCH_BN: &str = "encoder.branches.bn";

pub fn register<T: Real>(
    cfg: &EncoderConfig,
    store: &mut ParameterStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    for layer in cfg.layers() {
        layer.register(store, rng)?;
    }
    // The K branches share one weight matrix whose column `i * K + k` belongs to
    // branch `k`; each branch is initialized as its own fan_in x S_c layer.
    let (fan_in, sc, k) = (cfg.feature_width(), cfg.branch_width, cfg.branch_count);
    let a = (6.0 / (fan_in + sc) as f64).sqrt();
    let data = (0..fan_in * sc * k)
        .map(|_| T::of(rng.random_range(-a..a)))
        .collect();
    store.insert(BRANCH_WEIGHT, Tensor::new(vec![fan_in, sc * k], data)?)?;
    register_batchnorm(store, BRANCH_BN, sc * k)
}

/// Graph forward from stacked clouds `[B * N, d]` to primary capsules `[B, S_c, K]`.
pub fn forward<T: Real>(
    cfg: &EncoderConfig,
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    points: Var,
    batch: usize,
    bn: BatchNormConfig,
    mode: Mode,
) -> Result<Var> {
    let shape = g.shape(points).to_vec();
    if shape != [batch * cfg.n_points, cfg.point_dim] {
        return Err(Error::shape(
            "encode_primary",
            format!(
                "expected [{}, {}], got {shape:?}",
                batch * cfg.n_points,
                cfg.point_dim
            ),
        ));
    }
    let mut h = points;
    for layer in cfg.layers() {
        h = layer.forward(g, store, h, bn, mode)?;
    }
    let w = g.param(store, BRANCH_WEIGHT)?;
    let h = g.matmul(h, w)?;
    let h = g.batchnorm_relu_layer(store, BRANCH_BN, h, bn, mode)?;
    let width = cfg.branch_width * cfg.branch_count;
    let h = g.reshape(h, &[batch, cfg.n_points, width])?;
    let pooled = g.max_axis(h, 1)?;
    g.reshape(pooled, &[batch, cfg.branch_width, cfg.branch_count])
}

fn cloud_input<T: Real>(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    if cfg.point_dim != 3 {
        return Err(Error::config(
            "point clouds carry 3D points; encoder.point_dim must be 3",
        ));
    }
    if cloud.len() != cfg.n_points {
        return Err(Error::shape(
            "encode_primary",
            format!("expected {} points, got {}", cfg.n_points, cloud.len()),
        ));
    }
    cloud.to_tensor()
}

/// Eval-mode primary capsules of one cloud.
pub fn encode_primary<T: Real>(
    cloud: &PointCloud,
    cfg: &EncoderConfig,
    store: &ParameterStore<T>,
    bn: BatchNormConfig,
) -> Result<PrimaryCapsules<T>> {
    let mut g = Graph::new();
    let x = g.constant(cloud_input(cloud, cfg)?);
    let ppc = forward(cfg, &mut g, store, x, 1, bn, Mode::Eval)?;
    let capsules = g
        .value(ppc)
        .clone()
        .reshape(vec![cfg.branch_width, cfg.branch_count])?;
    Ok(PrimaryCapsules { capsules })
}

/// Eval-mode latent capsules of one cloud: primary capsules followed by routing.
pub fn encode<T: Real>(
    cloud: &PointCloud,
    cfg: &EncoderConfig,
    store: &ParameterStore<T>,
    routing_cfg: &RoutingConfig,
    bn: BatchNormConfig,
) -> Result<LatentCapsules<T>> {
    let mut g = Graph::new();
    let x = g.constant(cloud_input(cloud, cfg)?);
    let ppc = forward(cfg, &mut g, store, x, 1, bn, Mode::Eval)?;
    let latent = routing::forward(routing_cfg, &mut g, store, ppc)?;
    let capsules = g
        .value(latent)
        .clone()
        .reshape(vec![routing_cfg.latent_count, routing_cfg.latent_dim])?;
    Ok(LatentCapsules { capsules })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            n_points: 32,
            point_dim: 3,
            mlp_widths: vec![3, 8, 16],
            branch_count: 4,
            branch_width: 12,
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
    }

    fn store(cfg: &EncoderConfig) -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        register(cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        s
    }

    #[test]
    fn output_shape_and_wrong_inputs() {
        let cfg = small();
        let s = store(&cfg);
        let ppc = encode_primary(&cloud(32, 2), &cfg, &s, BatchNormConfig::default()).unwrap();
        assert_eq!(ppc.capsules.shape(), &[12, 4]);
        assert!(encode_primary(&cloud(31, 2), &cfg, &s, BatchNormConfig::default()).is_err());
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let cfg = small();
        let s = store(&cfg);
        let c = cloud(32, 3);
        let perm: Vec<usize> = (0..32).rev().collect();
        let a = encode_primary(&c, &cfg, &s, BatchNormConfig::default()).unwrap();
        let b = encode_primary(&c.permuted(&perm), &cfg, &s, BatchNormConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplication_leaves_pooled_features() {
        let cfg = small();
        let s = store(&cfg);
        let c = cloud(32, 4);
        let doubled = PointCloud::new(c.points.iter().chain(&c.points).copied().collect());
        let cfg2 = EncoderConfig {
            n_points: 64,
            ..cfg.clone()
        };
        assert_eq!(
            encode_primary(&c, &cfg, &s, BatchNormConfig::default()).unwrap(),
            encode_primary(&doubled, &cfg2, &s, BatchNormConfig::default()).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.mlp_widths = vec![4, 8];
        assert!(cfg.validate().is_err());
        cfg.mlp_widths = vec![3];
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
