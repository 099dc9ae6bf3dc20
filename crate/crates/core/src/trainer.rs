//! Auto-encoder training, evaluation and the capsule specialization timeline.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::dataio::{derive_seed, save_checkpoint, Checkpoint, PointCloud};
use crate::decoder::{GridMode, PatchGrid, Reconstruction};
use crate::error::{Error, Result};
use crate::losses::{capsule_spread, chamfer_fast, ChamferTarget};
use crate::model::PointCapsNet;
use crate::params::{adam_step, AdamConfig, ParameterStore};
use crate::partseg::gt_capsule_labels;
use crate::spatial::KdTree;
use crate::tensor::Real;

const SHUFFLE_STREAM: u64 = 1 << 40;
const GRID_STREAM: u64 = 2 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epoch `e` uses `learning_rate / (1 + lr_decay * e)`; zero keeps it constant.
    pub lr_decay: f64,
    pub deterministic: bool,
    /// Snapshot every this many epochs; zero disables.
    pub checkpoint_every: usize,
    /// Evaluate the training set every this many epochs; zero disables.
    pub eval_every: usize,
    /// Grid seed of cadence evaluations.
    pub eval_grid_seed: u64,
    /// Where cadence checkpoints are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            adam: AdamConfig::default(),
            lr_decay: 0.0,
            deterministic: false,
            checkpoint_every: 0,
            eval_every: 0,
            eval_grid_seed: 0,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(
                "train.batch_size must be at least 2 for batch normalization",
            ));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::config(
                "train.lr_decay must be finite and non-negative",
            ));
        }
        self.adam.validate()
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.adam.learning_rate / (1.0 + self.lr_decay * epoch as f64)
    }
}

/// Evaluation summary of one pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean Chamfer distance in normalized units.
    pub chamfer: f64,
    /// `chamfer * 1000`.
    pub chamfer_e3: f64,
    pub per_shape: Vec<f64>,
    /// Spread of every capsule averaged over shapes.
    pub capsule_spread: Vec<f64>,
    pub mean_spread: f64,
}

#[derive(Clone, Debug)]
pub struct Snapshot<T> {
    pub epoch: usize,
    pub store: ParameterStore<T>,
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    /// Mean batch loss of every epoch run, first to last.
    pub epoch_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub evals: Vec<(usize, EvalReport)>,
    pub snapshots: Vec<Snapshot<T>>,
    pub final_checkpoint: Option<PathBuf>,
}

fn non_finite(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::RoutingNonFinite { .. } => {
            Error::NonFiniteLoss { epoch, batch }
        }
        other => other,
    }
}

/// Grid of batch item `item` in step `batch` of `epoch`.
pub fn train_grid_seed(seed: u64, epoch: usize, batch: usize, item: usize) -> u64 {
    derive_seed(
        derive_seed(seed, GRID_STREAM | epoch as u64),
        ((batch as u64) << 20) | item as u64,
    )
}

/// Shuffled visiting order of epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        SHUFFLE_STREAM | epoch as u64,
    )));
    order
}

/// Checkpoint of `net` tagged with the epochs completed so far.
pub fn checkpoint_of<T: Real>(net: &PointCapsNet<T>, epoch: usize, seed: u64) -> Checkpoint {
    let mut meta = crate::dataio::config::model_meta(&net.config);
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("seed".into(), seed.to_string());
    Checkpoint::from_store(&net.store, meta)
}

/// Minibatch Adam on the mean per-shape Chamfer loss, for epochs
/// `start_epoch..cfg.epochs`. A final batch of fewer than two shapes is
/// dropped. One `epoch=.. loss=.. time=..` line per epoch goes to `log`.
pub fn train_ae<T: Real>(
    dataset: &[PointCloud],
    cfg: &TrainConfig,
    net: &mut PointCapsNet<T>,
    start_epoch: usize,
    log: &mut dyn Write,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(if dataset.is_empty() {
            Error::EmptyDataset
        } else {
            Error::BatchTooSmall(1)
        });
    }
    let n = net.config.encoder.n_points;
    if let Some(c) = dataset.iter().find(|c| c.len() != n) {
        return Err(Error::shape(
            "train_ae",
            format!("cloud has {} points, expected {n}", c.len()),
        ));
    }
    let targets: Vec<ChamferTarget<T>> = dataset
        .iter()
        .map(ChamferTarget::new)
        .collect::<Result<_>>()?;
    let batch_size = cfg.batch_size.min(dataset.len());
    let fixed_grid = (net.config.decoder.grid_mode == GridMode::FixedSeed)
        .then(|| net.grid(net.config.decoder.grid_seed));
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        epoch_seconds: Vec::new(),
        evals: Vec::new(),
        snapshots: Vec::new(),
        final_checkpoint: None,
    };
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let adam = AdamConfig {
            learning_rate: cfg.learning_rate(epoch),
            ..cfg.adam
        };
        let order = epoch_order(cfg.seed, epoch, dataset.len());
        let mut total = 0.0;
        let mut batches = 0;
        for (batch, idx) in order.chunks(batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &dataset[i]).collect();
            let batch_targets: Vec<ChamferTarget<T>> =
                idx.iter().map(|&i| targets[i].clone()).collect();
            let drawn: Vec<PatchGrid> = match &fixed_grid {
                Some(_) => Vec::new(),
                None => (0..idx.len())
                    .map(|k| net.grid(train_grid_seed(cfg.seed, epoch, batch, k)))
                    .collect(),
            };
            let grids: Vec<&PatchGrid> = match &fixed_grid {
                Some(grid) => vec![grid],
                None => drawn.iter().collect(),
            };
            let step = || -> Result<(f64, Vec<_>, ParameterStore<T>)> {
                let mut g = Graph::new().with_deterministic(cfg.deterministic);
                let f = net.forward(&mut g, &clouds, &grids, Mode::Train)?;
                let loss = net.loss(&mut g, f.points, &batch_targets)?;
                let value = g.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "loss".into() });
                }
                let mut grads = net.store.clone();
                grads.zero_grad();
                g.backward(loss, &mut grads)?;
                Ok((value, g.take_running_updates(), grads))
            };
            let (value, updates, grads) = step().map_err(|e| non_finite(e, epoch, batch))?;
            net.store = grads;
            net.store.apply_running_updates(updates)?;
            adam_step(&mut net.store, &adam).map_err(|e| non_finite(e, epoch, batch))?;
            net.store.zero_grad();
            total += value;
            batches += 1;
        }
        let loss = total / batches as f64;
        let seconds = started.elapsed().as_secs_f64();
        report.epoch_loss.push(loss);
        report.epoch_seconds.push(seconds);
        writeln!(log, "epoch={epoch} loss={loss:.6} time={seconds:.3}")?;
        let done = epoch + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let eval = eval_ae(dataset, net, cfg.eval_grid_seed)?;
            writeln!(
                log,
                "eval epoch={epoch} chamfer={:.6} chamfer_e3={:.3} spread={:.6}",
                eval.chamfer, eval.chamfer_e3, eval.mean_spread
            )?;
            report.evals.push((epoch, eval));
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            report.snapshots.push(Snapshot {
                epoch: done,
                store: net.store.clone(),
            });
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("epoch-{done:04}.pcaps"));
                save_checkpoint(&checkpoint_of(net, done, cfg.seed), &path)?;
                report.final_checkpoint = Some(path);
            }
        }
    }
    Ok(report)
}

/// Eval-mode reconstruction of every shape under the grid of `grid_seed`.
pub fn eval_ae<T: Real>(
    dataset: &[PointCloud],
    net: &PointCapsNet<T>,
    grid_seed: u64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let grid = net.grid(grid_seed);
    let mut per_shape = Vec::with_capacity(dataset.len());
    let mut spread = vec![0.0; net.config.routing.latent_count];
    for cloud in dataset {
        let recon = net.reconstruct(cloud, &grid)?;
        let tree = KdTree::new(cloud.points.clone());
        per_shape.push(chamfer_fast(&recon.to_cloud(), cloud, &tree)?.value);
        for (s, v) in spread.iter_mut().zip(capsule_spread(&recon)) {
            *s += v / dataset.len() as f64;
        }
    }
    let chamfer = per_shape.iter().sum::<f64>() / per_shape.len() as f64;
    let mean_spread = spread.iter().sum::<f64>() / spread.len() as f64;
    Ok(EvalReport {
        chamfer,
        chamfer_e3: chamfer * 1000.0,
        per_shape,
        capsule_spread: spread,
        mean_spread,
    })
}

/// One frame of the specialization timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct TimelineFrame {
    pub epoch: usize,
    pub capsules: Vec<usize>,
    pub points: Vec<[f64; 3]>,
}

impl TimelineFrame {
    /// Mean spread of the tracked capsules.
    pub fn spread(&self, replicas: usize) -> f64 {
        let recon =
            Reconstruction::new(self.points.clone(), replicas).expect("frame holds whole patches");
        let s = capsule_spread(&recon);
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Reconstructions of `cloud` restricted to the capsules that the last
/// snapshot assigns to `part`, one frame per snapshot.
pub fn specialization_timeline<T: Real>(
    net: &PointCapsNet<T>,
    cloud: &PointCloud,
    snapshots: &[Snapshot<T>],
    part: usize,
    grid_seed: u64,
) -> Result<Vec<TimelineFrame>> {
    let last = snapshots
        .last()
        .ok_or_else(|| Error::MissingSnapshot("no snapshots were taken".into()))?;
    let grid = net.grid(grid_seed);
    let at = |s: &Snapshot<T>| PointCapsNet::from_parts(net.config.clone(), s.store.clone());
    let final_net = at(last)?;
    let labels = gt_capsule_labels(&final_net, &final_net.encode(cloud)?, &grid, cloud)?;
    let capsules: Vec<usize> = (0..labels.labels.len())
        .filter(|&k| labels.labels[k] == part)
        .collect();
    if capsules.is_empty() {
        return Err(Error::EmptySelection);
    }
    snapshots
        .iter()
        .map(|s| {
            let snap = at(s)?;
            let latent = snap.encode(cloud)?;
            let mut points = Vec::with_capacity(capsules.len() * net.config.decoder.replicas);
            for &k in &capsules {
                points.extend(snap.decode_single_capsule(&latent, k, &grid)?.points);
            }
            Ok(TimelineFrame {
                epoch: s.epoch,
                capsules: capsules.clone(),
                points,
            })
        })
        .collect()
}
