//! Capsule part labels, the capsule-part classifier and point segmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::dataio::PointCloud;
use crate::decoder::PatchGrid;
use crate::error::{Error, Result};
use crate::model::PointCapsNet;
use crate::nn::Linear;
use crate::params::{adam_step, AdamConfig, ParameterStore};
use crate::routing::LatentCapsules;
use crate::spatial::{brute_nearest, KdTree};
use crate::tensor::{Real, Tensor};

/// Above this many reference points, label transfer goes through a k-d tree.
const BRUTE_LIMIT: usize = 4096;

/// One part label per latent capsule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsuleLabeling {
    pub labels: Vec<usize>,
    pub part_count: usize,
}

impl CapsuleLabeling {
    pub fn new(labels: Vec<usize>, part_count: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= part_count) {
            return Err(Error::Label(format!(
                "capsule label {bad} not below part count {part_count}"
            )));
        }
        Ok(Self { labels, part_count })
    }

    /// Capsule indices carrying `part`.
    pub fn capsules_of(&self, part: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&k| self.labels[k] == part)
            .collect()
    }
}

/// Most frequent label; ties go to the lowest label.
pub fn mode_label(labels: &[usize]) -> Option<usize> {
    let top = *labels.iter().max()?;
    let mut counts = vec![0usize; top + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let best = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == best)
}

/// Label of the nearest point of `reference` for every query point.
pub fn transfer_labels(points: &[[f64; 3]], reference: &PointCloud) -> Result<Vec<usize>> {
    let labels = reference.labels()?;
    if reference.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if reference.len() <= BRUTE_LIMIT {
        Ok(points
            .iter()
            .map(|p| labels[brute_nearest(&reference.points, p).0])
            .collect())
    } else {
        let tree = KdTree::new(reference.points.clone());
        Ok(points
            .iter()
            .map(|p| labels[tree.nearest(p).unwrap().0])
            .collect())
    }
}

/// Decodes every capsule's patch, gives each patch point the label of its
/// nearest ground-truth point and labels the capsule with the mode.
pub fn gt_capsule_labels<T: Real>(
    net: &PointCapsNet<T>,
    latent: &LatentCapsules<T>,
    grid: &PatchGrid,
    gt_cloud: &PointCloud,
) -> Result<CapsuleLabeling> {
    let gt = gt_cloud.labels()?;
    let part_count = gt.iter().max().map_or(0, |&m| m + 1);
    let recon = net.decode(latent, grid)?;
    let transferred = transfer_labels(&recon.points, gt_cloud)?;
    let labels = transferred
        .chunks(recon.replicas)
        .map(|patch| mode_label(patch).unwrap())
        .collect();
    CapsuleLabeling::new(labels, part_count)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartNetConfig {
    pub category_count: usize,
    pub part_count: usize,
    /// Widths of optional ReLU layers before the output layer.
    pub hidden_widths: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PartNetConfig {
    fn default() -> Self {
        Self {
            category_count: 1,
            part_count: 2,
            hidden_widths: Vec::new(),
            learning_rate: 0.01,
            epochs: 200,
            seed: 0,
        }
    }
}

impl PartNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.category_count == 0 || self.part_count == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::config("partnet sizes must be positive"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("partnet.learning_rate must be positive"));
        }
        Ok(())
    }

    fn layers(&self, latent_dim: usize) -> Vec<Linear> {
        let mut widths = vec![latent_dim + self.category_count];
        widths.extend(&self.hidden_widths);
        widths.push(self.part_count);
        let last = widths.len() - 2;
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let name = if i == last {
                    "partnet.out".to_string()
                } else {
                    format!("partnet.hidden{i}")
                };
                Linear::new(name, w[0], w[1], true)
            })
            .collect()
    }
}

/// Shared per-capsule classifier over capsule features and the category one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct PartNet {
    pub config: PartNetConfig,
    pub latent_dim: usize,
    pub store: ParameterStore<f64>,
}

pub fn one_hot(category: usize, count: usize) -> Result<Vec<f64>> {
    if category >= count {
        return Err(Error::IndexOutOfRange {
            what: "categories",
            index: category,
            len: count,
        });
    }
    let mut v = vec![0.0; count];
    v[category] = 1.0;
    Ok(v)
}

impl PartNet {
    pub fn new(config: PartNetConfig, latent_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        for layer in config.layers(latent_dim) {
            layer.register(&mut store, &mut rng)?;
        }
        Ok(Self {
            config,
            latent_dim,
            store,
        })
    }

    /// Capsules `[J, D]` joined with the one-hot on every row.
    fn input<T: Real>(
        &self,
        latent: &LatentCapsules<T>,
        category_onehot: &[f64],
    ) -> Result<Tensor<f64>> {
        let c = self.config.category_count;
        if category_onehot.len() != c || latent.dim() != self.latent_dim {
            return Err(Error::shape(
                "partnet",
                format!(
                    "capsules of dim {} with a one-hot of {}, expected {} and {c}",
                    latent.dim(),
                    category_onehot.len(),
                    self.latent_dim
                ),
            ));
        }
        let mut data = Vec::with_capacity(latent.count() * (self.latent_dim + c));
        for j in 0..latent.count() {
            data.extend(latent.capsule(j).iter().map(|v| v.as_f64()));
            data.extend_from_slice(category_onehot);
        }
        Tensor::new(vec![latent.count(), self.latent_dim + c], data)
    }

    fn logits(&self, g: &mut Graph<f64>, x: Tensor<f64>) -> Result<crate::autodiff::Var> {
        let mut h = g.constant(x);
        let layers = self.config.layers(self.latent_dim);
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(g, &self.store, h)?;
            if i + 1 < layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Per-capsule part probabilities `[J, part_count]`.
    pub fn forward<T: Real>(
        &self,
        latent: &LatentCapsules<T>,
        category_onehot: &[f64],
    ) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, self.input(latent, category_onehot)?)?;
        let p = g.softmax(logits, 1)?;
        Ok(g.value(p).clone())
    }

    /// Argmax part of every capsule, ties to the lowest part.
    pub fn predict<T: Real>(
        &self,
        latent: &LatentCapsules<T>,
        category_onehot: &[f64],
    ) -> Result<Vec<usize>> {
        let p = self.forward(latent, category_onehot)?;
        Ok((0..p.shape()[0]).map(|j| argmax(p.row(j))).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn partnet_forward<T: Real>(
    net: &PartNet,
    latent: &LatentCapsules<T>,
    category_onehot: &[f64],
) -> Result<Tensor<f64>> {
    net.forward(latent, category_onehot)
}

/// Latent code of one shape with its category and capsule labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSample {
    pub latent: LatentCapsules<f64>,
    pub category: usize,
    pub labeling: CapsuleLabeling,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartNetReport {
    /// Cross entropy before each epoch's update.
    pub epoch_loss: Vec<f64>,
    /// Capsule-label accuracy before each epoch's update.
    pub epoch_accuracy: Vec<f64>,
}

/// Full-batch Adam on the mean capsule cross entropy.
pub fn train_partnet(samples: &[PartSample], net: &mut PartNet) -> Result<PartNetReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = net.config.clone();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if s.labeling.labels.len() != s.latent.count() {
            return Err(Error::shape(
                "train_partnet",
                "one label per capsule is required",
            ));
        }
        if let Some(&bad) = s.labeling.labels.iter().find(|&&l| l >= cfg.part_count) {
            return Err(Error::IndexOutOfRange {
                what: "parts",
                index: bad,
                len: cfg.part_count,
            });
        }
        rows.extend(
            net.input(&s.latent, &one_hot(s.category, cfg.category_count)?)?
                .into_data(),
        );
        labels.extend(&s.labeling.labels);
    }
    let x = Tensor::new(
        vec![labels.len(), net.latent_dim + cfg.category_count],
        rows,
    )?;
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut report = PartNetReport::default();
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let logits = net.logits(&mut g, x.clone())?;
        let loss = g.cross_entropy(logits, &labels)?;
        let scores = g.value(logits);
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(r, &l)| argmax(scores.row(r)) == l)
            .count();
        report.epoch_loss.push(g.value(loss).data()[0]);
        report
            .epoch_accuracy
            .push(correct as f64 / labels.len() as f64);
        g.backward(loss, &mut net.store)?;
        drop(g);
        adam_step(&mut net.store, &adam)?;
        net.store.zero_grad();
    }
    Ok(report)
}

/// Decodes `latent` and gives every point the predicted label of its capsule.
pub fn segment_points<T: Real>(
    ae: &PointCapsNet<T>,
    partnet: &PartNet,
    latent: &LatentCapsules<T>,
    category_onehot: &[f64],
    grid: &PatchGrid,
) -> Result<PointCloud> {
    let capsule_labels = partnet.predict(latent, category_onehot)?;
    let recon = ae.decode(latent, grid)?;
    let labels = recon
        .attribution
        .iter()
        .map(|&k| capsule_labels[k])
        .collect();
    PointCloud::with_labels(recon.points, labels)
}

/// Replaces each label by the mode over its `k` nearest points, itself
/// included. Ties keep the original label.
pub fn mode_filter(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let labels = cloud.labels()?;
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::config(format!(
            "mode filter size must be odd and positive, got {k}"
        )));
    }
    if k > cloud.len() {
        return Err(Error::config(format!(
            "mode filter size {k} exceeds {} points",
            cloud.len()
        )));
    }
    let top = labels.iter().max().map_or(0, |&m| m + 1);
    let tree = KdTree::new(cloud.points.clone());
    let mut counts = vec![0usize; top];
    let filtered = cloud
        .points
        .iter()
        .zip(labels)
        .map(|(p, &own)| {
            counts.iter_mut().for_each(|c| *c = 0);
            for (i, _) in tree.k_nearest(p, k) {
                counts[labels[i]] += 1;
            }
            let best = *counts.iter().max().unwrap();
            let winners: Vec<usize> = (0..top).filter(|&l| counts[l] == best).collect();
            if winners.len() == 1 {
                winners[0]
            } else {
                own
            }
        })
        .collect();
    Ok(PointCloud {
        labels: Some(filtered),
        ..cloud.clone()
    })
}
