//! Capsule-replication decoder: every latent capsule is copied `m` times, each
//! copy gets a random 2D coordinate, and one shared MLP folds the pairs into 3D
//! points. Point `p` of a reconstruction belongs to capsule `p / m`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormConfig, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{BnReluLayer, Linear};
use crate::params::ParameterStore;
use crate::routing::LatentCapsules;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GridMode {
    #[default]
    ResamplePerForward,
    FixedSeed,
}

impl GridMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GridMode::ResamplePerForward => "resample",
            GridMode::FixedSeed => "fixed",
        }
    }
}

impl std::str::FromStr for GridMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resample" | "resample-per-forward" => Ok(GridMode::ResamplePerForward),
            "fixed" | "fixed-seed" => Ok(GridMode::FixedSeed),
            other => Err(Error::config(format!("unknown grid mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub replicas: usize,
    /// Widths after the `latent_dim + 2` input, ending at 3.
    pub mlp_widths: Vec<usize>,
    pub grid_mode: GridMode,
    pub grid_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            replicas: 32,
            mlp_widths: vec![64, 32, 16, 3],
            grid_mode: GridMode::ResamplePerForward,
            grid_seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::config("decoder.replicas must be at least 1"));
        }
        if self.mlp_widths.last() != Some(&3) || self.mlp_widths.contains(&0) {
            return Err(Error::config(
                "decoder.mlp_widths must be positive and end at 3",
            ));
        }
        Ok(())
    }

    fn layers(&self, latent_dim: usize) -> (Vec<BnReluLayer>, Linear) {
        let mut widths = vec![latent_dim + 2];
        widths.extend_from_slice(&self.mlp_widths);
        let n = widths.len() - 1;
        let hidden = (0..n - 1)
            .map(|i| BnReluLayer::new(&format!("decoder.mlp{i}"), widths[i], widths[i + 1]))
            .collect();
        (hidden, Linear::new("decoder.out", widths[n - 1], 3, true))
    }
}

/// `(latent_count * m) x 2` surface coordinates, row `p` feeding point `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub coords: Tensor<f64>,
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.coords.shape()[0]
    }

    /// Rows `k*m .. (k+1)*m`, the coordinates of capsule `k`.
    pub fn capsule_slice(&self, k: usize, replicas: usize) -> Result<PatchGrid> {
        let len = self.rows() / replicas;
        if k >= len {
            return Err(Error::IndexOutOfRange {
                what: "grid capsules",
                index: k,
                len,
            });
        }
        Ok(PatchGrid {
            coords: self.coords.slice_rows(k * replicas, (k + 1) * replicas)?,
        })
    }
}

/// Uniform coordinates in the open square `(0, 1)^2`, reproducible per seed.
/// Draws that land on the boundary, in either precision, are redrawn.
pub fn sample_grid(cfg: &DecoderConfig, latent_count: usize, seed: u64) -> PatchGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = latent_count * cfg.replicas;
    let data = (0..rows * 2)
        .map(|_| loop {
            let u: f64 = rng.random();
            let narrow = u as f32;
            if u > 0.0 && narrow > 0.0 && narrow < 1.0 {
                break u;
            }
        })
        .collect();
    PatchGrid {
        coords: Tensor::new(vec![rows.max(1), 2], data).expect("grid shape"),
    }
}

/// Decoded points plus the capsule that produced each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub points: Vec<[f64; 3]>,
    pub attribution: Vec<usize>,
    pub replicas: usize,
}

impl Reconstruction {
    /// Points grouped in consecutive runs of `replicas` per capsule.
    pub fn new(points: Vec<[f64; 3]>, replicas: usize) -> Result<Self> {
        if replicas == 0 || points.is_empty() || !points.len().is_multiple_of(replicas) {
            return Err(Error::shape(
                "reconstruction",
                format!(
                    "{} points do not split into patches of {replicas}",
                    points.len()
                ),
            ));
        }
        let attribution = (0..points.len()).map(|p| p / replicas).collect();
        Ok(Self {
            points,
            attribution,
            replicas,
        })
    }

    fn from_tensor<T: Real>(t: &Tensor<T>, replicas: usize) -> Result<Self> {
        let points = t
            .data()
            .chunks(3)
            .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
            .collect();
        Self::new(points, replicas)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn capsule_count(&self) -> usize {
        self.points.len() / self.replicas
    }

    pub fn capsule_points(&self, k: usize) -> impl Iterator<Item = &[f64; 3]> {
        self.points[k * self.replicas..(k + 1) * self.replicas].iter()
    }

    pub fn to_cloud(&self) -> crate::dataio::PointCloud {
        crate::dataio::PointCloud::new(self.points.clone())
    }
}

pub fn register<T: Real>(
    cfg: &DecoderConfig,
    latent_dim: usize,
    store: &mut ParameterStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let (hidden, out) = cfg.layers(latent_dim);
    for layer in &hidden {
        layer.register(store, rng)?;
    }
    out.register(store, rng)
}

/// Graph forward from latent capsules `[B, J, D]` to points `[B, J*m, 3]`.
/// `grids` holds one grid per batch item, or a single grid shared by all.
pub fn forward<T: Real>(
    cfg: &DecoderConfig,
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    latent: Var,
    grids: &[&PatchGrid],
    bn: BatchNormConfig,
    mode: Mode,
) -> Result<Var> {
    let shape = g.shape(latent).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "decode",
            format!("latent must be [B, J, D], got {shape:?}"),
        ));
    }
    let (b, j, d) = (shape[0], shape[1], shape[2]);
    let m = cfg.replicas;
    if grids.len() != b && grids.len() != 1 {
        return Err(Error::shape(
            "decode",
            format!("{} grids for a batch of {b}", grids.len()),
        ));
    }
    let mut coords = Vec::with_capacity(b * j * m * 2);
    for i in 0..b {
        let grid = grids[if grids.len() == 1 { 0 } else { i }];
        if grid.coords.shape() != [j * m, 2] {
            return Err(Error::shape(
                "decode",
                format!(
                    "grid has shape {:?}, expected [{}, 2]",
                    grid.coords.shape(),
                    j * m
                ),
            ));
        }
        coords.extend(grid.coords.data().iter().map(|&c| T::of(c)));
    }
    let grid = g.constant(Tensor::new(vec![b * j * m, 2], coords)?);
    let rows = g.reshape(latent, &[b * j, d])?;
    let replicated = g.repeat_rows(rows, m)?;
    let mut h = g.concat(&[replicated, grid], 1)?;
    let (hidden, out) = cfg.layers(d);
    for layer in &hidden {
        h = layer.forward(g, store, h, bn, mode)?;
    }
    let h = out.forward(g, store, h)?;
    let h = g.tanh(h)?;
    g.reshape(h, &[b, j * m, 3])
}

fn decode_eval<T: Real>(
    latent: &Tensor<T>,
    grid: &PatchGrid,
    cfg: &DecoderConfig,
    store: &ParameterStore<T>,
    bn: BatchNormConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let s = latent.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "decode",
            format!("latent must be [J, D], got {s:?}"),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(latent.clone().reshape(vec![1, s[0], s[1]])?);
    let y = forward(cfg, &mut g, store, x, &[grid], bn, Mode::Eval)?;
    Reconstruction::from_tensor(g.value(y), cfg.replicas)
}

/// Eval-mode reconstruction of one latent code.
pub fn decode<T: Real>(
    latent: &LatentCapsules<T>,
    grid: &PatchGrid,
    cfg: &DecoderConfig,
    store: &ParameterStore<T>,
    bn: BatchNormConfig,
) -> Result<Reconstruction> {
    decode_eval(&latent.capsules, grid, cfg, store, bn)
}

/// The `m` points of capsule `index`, equal to that slice of [`decode`].
pub fn decode_single_capsule<T: Real>(
    latent: &LatentCapsules<T>,
    index: usize,
    grid: &PatchGrid,
    cfg: &DecoderConfig,
    store: &ParameterStore<T>,
    bn: BatchNormConfig,
) -> Result<Reconstruction> {
    let count = latent.count();
    if index >= count {
        return Err(Error::IndexOutOfRange {
            what: "latent capsules",
            index,
            len: count,
        });
    }
    if grid.rows() != count * cfg.replicas {
        return Err(Error::shape(
            "decode",
            format!(
                "grid has {} rows, expected {}",
                grid.rows(),
                count * cfg.replicas
            ),
        ));
    }
    let one = latent.capsules.slice_rows(index, index + 1)?;
    decode_eval(
        &one,
        &grid.capsule_slice(index, cfg.replicas)?,
        cfg,
        store,
        bn,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(
        j: usize,
        d: usize,
        m: usize,
    ) -> (DecoderConfig, ParameterStore<f32>, LatentCapsules<f32>) {
        let cfg = DecoderConfig {
            replicas: m,
            ..DecoderConfig::default()
        };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        register(&cfg, d, &mut store, &mut rng).unwrap();
        let data = (0..j * d).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        (
            cfg,
            store,
            LatentCapsules {
                capsules: Tensor::new(vec![j, d], data).unwrap(),
            },
        )
    }

    #[test]
    fn grid_is_open_unit_square_and_reproducible() {
        let cfg = DecoderConfig {
            replicas: 50,
            ..DecoderConfig::default()
        };
        let a = sample_grid(&cfg, 1000, 9);
        assert_eq!(a, sample_grid(&cfg, 1000, 9));
        assert_ne!(a, sample_grid(&cfg, 1000, 10));
        assert!(a.coords.data().iter().all(|&c| c > 0.0 && c < 1.0));
        for axis in 0..2 {
            let mean = (0..a.rows()).map(|r| a.coords.row(r)[axis]).sum::<f64>() / a.rows() as f64;
            assert!((mean - 0.5).abs() < 0.01, "axis {axis}: {mean}");
        }
    }

    #[test]
    fn full_size_shape_and_range() {
        let (cfg, store, latent) = setup(64, 64, 32);
        let grid = sample_grid(&cfg, 64, 1);
        let recon = decode(&latent, &grid, &cfg, &store, BatchNormConfig::default()).unwrap();
        assert_eq!(recon.len(), 2048);
        assert!(recon
            .points
            .iter()
            .flatten()
            .all(|c| (-1.0..=1.0).contains(c)));
        for k in 0..64 {
            assert_eq!(recon.attribution.iter().filter(|&&a| a == k).count(), 32);
        }
    }

    #[test]
    fn single_capsule_equals_slice() {
        let (cfg, store, latent) = setup(6, 8, 5);
        let grid = sample_grid(&cfg, 6, 2);
        let full = decode(&latent, &grid, &cfg, &store, BatchNormConfig::default()).unwrap();
        let mut joined = vec![];
        for k in 0..6 {
            let one =
                decode_single_capsule(&latent, k, &grid, &cfg, &store, BatchNormConfig::default())
                    .unwrap();
            assert_eq!(
                one.points,
                full.capsule_points(k).copied().collect::<Vec<_>>()
            );
            joined.extend(one.points);
        }
        assert_eq!(joined, full.points);
        assert!(
            decode_single_capsule(&latent, 6, &grid, &cfg, &store, BatchNormConfig::default())
                .is_err()
        );
    }

    #[test]
    fn identical_capsules_and_grid_rows_give_identical_points() {
        let (cfg, store, mut latent) = setup(2, 4, 3);
        let first = latent.capsules.row(0).to_vec();
        latent.capsules.data_mut()[4..8].copy_from_slice(&first);
        let mut grid = sample_grid(&cfg, 2, 4);
        let head = grid.coords.data()[..6].to_vec();
        grid.coords.data_mut()[6..].copy_from_slice(&head);
        let recon = decode(&latent, &grid, &cfg, &store, BatchNormConfig::default()).unwrap();
        assert_eq!(recon.points[..3], recon.points[3..]);
    }

    #[test]
    fn shape_errors() {
        let (cfg, store, latent) = setup(4, 4, 2);
        assert!(decode(
            &latent,
            &sample_grid(&cfg, 3, 0),
            &cfg,
            &store,
            BatchNormConfig::default()
        )
        .is_err());
        let bad = DecoderConfig {
            mlp_widths: vec![8, 2],
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        assert!(Reconstruction::new(vec![[0.0; 3]; 5], 2).is_err());
    }
}
