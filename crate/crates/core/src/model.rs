//! The full auto-encoder: encoder, routing and decoder over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormConfig, Graph, Mode, Var};
use crate::dataio::PointCloud;
use crate::decoder::{self, DecoderConfig, PatchGrid, Reconstruction};
use crate::encoder::{self, EncoderConfig, PrimaryCapsules};
use crate::error::{Error, Result};
use crate::losses::{ChamferDistance, ChamferTarget};
use crate::params::ParameterStore;
use crate::routing::{self, LatentCapsules, RoutingConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub routing: RoutingConfig,
    pub decoder: DecoderConfig,
    pub batchnorm: BatchNormConfig,
    pub chamfer: ChamferDistance,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.routing.validate()?;
        self.decoder.validate()
    }

    /// Number of reconstructed points, `latent_count * replicas`.
    pub fn output_points(&self) -> usize {
        self.routing.latent_count * self.decoder.replicas
    }
}

/// Graph handles of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub primary: Var,
    pub latent: Var,
    pub points: Var,
}

#[derive(Clone, Debug)]
pub struct PointCapsNet<T> {
    pub config: ModelConfig,
    pub store: ParameterStore<T>,
}

impl<T: Real> PointCapsNet<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        encoder::register(&config.encoder, &mut store, &mut rng)?;
        routing::register(
            &config.routing,
            config.encoder.branch_count,
            &mut store,
            &mut rng,
        )?;
        decoder::register(
            &config.decoder,
            config.routing.latent_dim,
            &mut store,
            &mut rng,
        )?;
        Ok(Self { config, store })
    }

    pub fn from_parts(config: ModelConfig, store: ParameterStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, store })
    }

    pub fn primary(&self, cloud: &PointCloud) -> Result<PrimaryCapsules<T>> {
        encoder::encode_primary(
            cloud,
            &self.config.encoder,
            &self.store,
            self.config.batchnorm,
        )
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<LatentCapsules<T>> {
        encoder::encode(
            cloud,
            &self.config.encoder,
            &self.store,
            &self.config.routing,
            self.config.batchnorm,
        )
    }

    pub fn decode(&self, latent: &LatentCapsules<T>, grid: &PatchGrid) -> Result<Reconstruction> {
        decoder::decode(
            latent,
            grid,
            &self.config.decoder,
            &self.store,
            self.config.batchnorm,
        )
    }

    pub fn decode_single_capsule(
        &self,
        latent: &LatentCapsules<T>,
        index: usize,
        grid: &PatchGrid,
    ) -> Result<Reconstruction> {
        decoder::decode_single_capsule(
            latent,
            index,
            grid,
            &self.config.decoder,
            &self.store,
            self.config.batchnorm,
        )
    }

    pub fn reconstruct(&self, cloud: &PointCloud, grid: &PatchGrid) -> Result<Reconstruction> {
        self.decode(&self.encode(cloud)?, grid)
    }

    /// Grid for this model's capsule count drawn from `seed`.
    pub fn grid(&self, seed: u64) -> PatchGrid {
        decoder::sample_grid(&self.config.decoder, self.config.routing.latent_count, seed)
    }

    /// Records encode, route and decode of a batch of clouds on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        clouds: &[&PointCloud],
        grids: &[&PatchGrid],
        mode: Mode,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if clouds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = cfg.encoder.n_points;
        let mut data = Vec::with_capacity(clouds.len() * n * 3);
        for cloud in clouds {
            if cloud.len() != n {
                return Err(Error::shape(
                    "forward",
                    format!("expected {n} points, got {}", cloud.len()),
                ));
            }
            data.extend(cloud.points.iter().flatten().map(|&c| T::of(c)));
        }
        let x = g.constant(Tensor::new(vec![clouds.len() * n, 3], data)?);
        let primary = encoder::forward(
            &cfg.encoder,
            g,
            &self.store,
            x,
            clouds.len(),
            cfg.batchnorm,
            mode,
        )?;
        let latent = routing::forward(&cfg.routing, g, &self.store, primary)?;
        let points = decoder::forward(
            &cfg.decoder,
            g,
            &self.store,
            latent,
            grids,
            cfg.batchnorm,
            mode,
        )?;
        Ok(Forward {
            primary,
            latent,
            points,
        })
    }

    /// Mean over the batch of per-shape Chamfer distances.
    pub fn loss(&self, g: &mut Graph<T>, points: Var, targets: &[ChamferTarget<T>]) -> Result<Var> {
        let per_shape = g.chamfer(points, targets, self.config.chamfer)?;
        g.mean(per_shape)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                n_points: 24,
                point_dim: 3,
                mlp_widths: vec![3, 8, 8],
                branch_count: 4,
                branch_width: 10,
            },
            routing: RoutingConfig {
                latent_count: 4,
                latent_dim: 6,
                iterations: 3,
                ..RoutingConfig::default()
            },
            decoder: DecoderConfig {
                replicas: 6,
                mlp_widths: vec![8, 3],
                ..DecoderConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn cloud(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..24)
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

    #[test]
    fn batched_forward_matches_single_eval() {
        let net = PointCapsNet::<f64>::new(tiny_config(), 1).unwrap();
        let grid = net.grid(3);
        let (a, b) = (cloud(1), cloud(2));
        let mut g = Graph::new();
        let f = net
            .forward(&mut g, &[&a, &b], &[&grid], Mode::Eval)
            .unwrap();
        let batched = g.value(f.points).data().to_vec();
        let single = net.reconstruct(&b, &grid).unwrap();
        let flat: Vec<f64> = single.points.iter().flatten().copied().collect();
        let tail = &batched[batched.len() / 2..];
        for (x, y) in tail.iter().zip(&flat) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let net = PointCapsNet::<f64>::new(tiny_config(), 2).unwrap();
        let mut store = net.store.clone();
        let clouds = [cloud(4), cloud(5)];
        let grid = net.grid(1);
        let targets: Vec<_> = clouds
            .iter()
            .map(|c| ChamferTarget::new(c).unwrap())
            .collect();
        let mut g = Graph::new();
        let f = net
            .forward(&mut g, &[&clouds[0], &clouds[1]], &[&grid], Mode::Train)
            .unwrap();
        let loss = net.loss(&mut g, f.points, &targets).unwrap();
        g.backward(loss, &mut store).unwrap();
        for (name, entry) in store.iter() {
            if entry.trainable {
                assert!(
                    entry.grad.data().iter().any(|&v| v != 0.0),
                    "{name} has zero gradient"
                );
            }
        }
    }
}
