use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An ordered set of 3D points with optional part labels and class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub labels: Option<Vec<usize>>,
    pub category: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            labels: None,
            category: None,
        }
    }

    pub fn with_labels(points: Vec<[f64; 3]>, labels: Vec<usize>) -> Result<Self> {
        let cloud = Self {
            points,
            labels: Some(labels),
            category: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_category(mut self, category: usize) -> Self {
        self.category = Some(category);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::Label(format!(
                    "{} labels for {} points",
                    labels.len(),
                    self.points.len()
                )));
            }
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                op: "point cloud".into(),
            });
        }
        Ok(())
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::Unlabeled)
    }

    /// `[N, 3]` tensor of the coordinates.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let data = self.points.iter().flatten().map(|&c| T::of(c)).collect();
        Tensor::new(vec![self.points.len(), 3], data)
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (rows, cols) = t.rows_cols();
        if cols != 3 {
            return Err(Error::shape("point cloud", format!("{:?}", t.shape())));
        }
        let points = (0..rows)
            .map(|r| {
                let row = t.row(r);
                [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()]
            })
            .collect();
        Ok(Self::new(points))
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Reorders the points (and labels) by `perm`, where `perm[i]` is the
    /// source index of output point `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| perm.iter().map(|&i| l[i]).collect()),
            category: self.category,
        }
    }
}

/// Centroid and farthest-point radius used by [`normalize`].
pub(crate) fn normalization(cloud: &PointCloud) -> Result<([f64; 3], f64)> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let c = cloud.centroid();
    let radius = cloud
        .points
        .iter()
        .map(|p| {
            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .fold(0.0, f64::max);
    if radius == 0.0 || !radius.is_finite() {
        return Err(Error::DegenerateCloud);
    }
    Ok((c, radius))
}

/// Centers the cloud on its centroid and scales it so the farthest point
/// lies at distance 1.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    let (c, radius) = normalization(cloud)?;
    Ok(PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| [0, 1, 2].map(|k| (p[k] - c[k]) / radius))
            .collect(),
        labels: cloud.labels.clone(),
        category: cloud.category,
    })
}

/// Returns exactly `n` points: a uniform subset without replacement when the
/// cloud is larger, otherwise all points plus uniform draws with replacement.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cloud.len();
    let perm: Vec<usize> = if n <= len {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((len..n).map(|_| rng.random_range(0..len)));
        idx.shuffle(&mut rng);
        idx
    };
    Ok(cloud.permuted(&perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_two_points() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let n = normalize(&c).unwrap();
        assert_eq!(n.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let c = PointCloud::new(vec![
            [0.3, 1.0, -2.0],
            [2.0, 0.5, 0.0],
            [-1.0, -1.0, 4.0],
            [0.0, 0.2, 0.1],
        ]);
        let once = normalize(&c).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        let max = once
            .points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_degenerate() {
        let c = PointCloud::new(vec![[1.0, 1.0, 1.0]; 3]);
        assert!(matches!(normalize(&c), Err(Error::DegenerateCloud)));
        assert!(matches!(
            normalize(&PointCloud::default()),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn resample_sizes_and_pairing() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let labels: Vec<usize> = (0..10).collect();
        let c = PointCloud::with_labels(pts, labels).unwrap();
        for n in [3, 10, 25] {
            let r = resample(&c, n, 9).unwrap();
            assert_eq!(r.len(), n);
            for (p, &l) in r.points.iter().zip(r.labels.as_ref().unwrap()) {
                assert_eq!(p[0] as usize, l);
            }
        }
        let same = resample(&c, 10, 1).unwrap();
        let mut xs: Vec<usize> = same.points.iter().map(|p| p[0] as usize).collect();
        xs.sort();
        assert_eq!(xs, (0..10).collect::<Vec<_>>());
        assert!(resample(&PointCloud::default(), 4, 0).is_err());
    }
}
