//! Chamfer distance, segmentation metrics and the capsule spread diagnostic.

use crate::autodiff::{Graph, Var};
use crate::dataio::PointCloud;
use crate::decoder::Reconstruction;
use crate::error::{Error, Result};
use crate::spatial::{brute_nearest, dist_sq, KdTree};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChamferResult {
    pub value: f64,
    pub term_x_to_y: f64,
    pub term_y_to_x: f64,
}

impl ChamferResult {
    fn from_terms(a: f64, b: f64) -> Self {
        Self {
            value: a + b,
            term_x_to_y: a,
            term_y_to_x: b,
        }
    }
}

/// Distance applied to nearest-neighbour pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChamferDistance {
    /// Plain Euclidean norm.
    #[default]
    Euclidean,
    /// Squared Euclidean norm, as many reference implementations use.
    Squared,
}

impl ChamferDistance {
    pub fn as_str(self) -> &'static str {
        match self {
            ChamferDistance::Euclidean => "euclidean",
            ChamferDistance::Squared => "squared",
        }
    }

    #[inline]
    fn of<T: Real>(self, d2: T) -> T {
        match self {
            ChamferDistance::Euclidean => d2.sqrt(),
            ChamferDistance::Squared => d2,
        }
    }
}

impl std::str::FromStr for ChamferDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(ChamferDistance::Euclidean),
            "squared" => Ok(ChamferDistance::Squared),
            _ => Err(Error::config(format!("unknown chamfer distance `{s}`"))),
        }
    }
}

fn check_nonempty(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        Err(Error::EmptyCloud)
    } else {
        Ok(())
    }
}

/// Symmetric mean nearest-neighbour distance by exhaustive search.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<ChamferResult> {
    chamfer_with(x, y, ChamferDistance::Euclidean)
}

pub fn chamfer_with(
    x: &PointCloud,
    y: &PointCloud,
    distance: ChamferDistance,
) -> Result<ChamferResult> {
    check_nonempty(x, y)?;
    let one_way = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        a.iter()
            .map(|p| distance.of(brute_nearest(b, p).1))
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(ChamferResult::from_terms(
        one_way(&x.points, &y.points),
        one_way(&y.points, &x.points),
    ))
}

/// Same contract as [`chamfer`], with nearest neighbours found through a k-d
/// tree. `y_index` must index the points of `y`.
pub fn chamfer_fast(
    x: &PointCloud,
    y: &PointCloud,
    y_index: &KdTree<f64>,
) -> Result<ChamferResult> {
    check_nonempty(x, y)?;
    if y_index.len() != y.len() {
        return Err(Error::shape(
            "chamfer_fast",
            "index does not match the target cloud",
        ));
    }
    let x_index = KdTree::new(x.points.clone());
    let one_way = |a: &[[f64; 3]], tree: &KdTree<f64>| {
        a.iter()
            .map(|p| tree.nearest(p).unwrap().1.sqrt())
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(ChamferResult::from_terms(
        one_way(&x.points, y_index),
        one_way(&y.points, &x_index),
    ))
}

/// A fixed Chamfer target with its spatial index built once.
#[derive(Clone, Debug)]
pub struct ChamferTarget<T> {
    tree: KdTree<T>,
}

impl<T: Real> ChamferTarget<T> {
    pub fn new(cloud: &PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(Self {
            tree: KdTree::new(cloud.points.iter().map(|p| p.map(T::of)).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }
}

fn as_points<T: Real>(flat: &[T]) -> Vec<[T; 3]> {
    flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

impl<T: Real> Graph<T> {
    /// Per-shape Chamfer distance between predicted clouds `[B, P, 3]` and
    /// fixed targets, returned as a `[B]` vector. Gradients reach each
    /// predicted point through the pairs it takes part in.
    pub fn chamfer(
        &mut self,
        pred: Var,
        targets: &[ChamferTarget<T>],
        distance: ChamferDistance,
    ) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape.len() != 3 || shape[2] != 3 || shape[0] != targets.len() {
            return Err(Error::shape(
                "chamfer",
                format!("{shape:?} against {} targets", targets.len()),
            ));
        }
        let (batch, count) = (shape[0], shape[1]);
        let data = self.value(pred).data();
        let mut values = Vec::with_capacity(batch);
        // (pred index, target point, weight) pairs per shape, used by the adjoint
        let mut pairs: Vec<Vec<(usize, [T; 3], T)>> = Vec::with_capacity(batch);
        for (b, target) in targets.iter().enumerate() {
            let pts = as_points(&data[b * count * 3..(b + 1) * count * 3]);
            let own = KdTree::new(pts.clone());
            let tpts = target.tree.points();
            let (wp, wt) = (
                T::one() / T::of(count as f64),
                T::one() / T::of(tpts.len() as f64),
            );
            let mut shape_pairs = Vec::with_capacity(count + tpts.len());
            let mut forward = T::zero();
            for (i, p) in pts.iter().enumerate() {
                let (j, d2) = target.tree.nearest(p).unwrap();
                forward += distance.of(d2);
                shape_pairs.push((i, tpts[j], wp));
            }
            let mut backward = T::zero();
            for q in tpts {
                let (i, d2) = own.nearest(q).unwrap();
                backward += distance.of(d2);
                shape_pairs.push((i, *q, wt));
            }
            values.push(forward * wp + backward * wt);
            pairs.push(shape_pairs);
        }
        let value = Tensor::new(vec![batch], values)?;
        self.record(
            "chamfer",
            value,
            vec![pred],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); x.len()];
                let two = T::of(2.0);
                for (b, shape_pairs) in pairs.iter().enumerate() {
                    for &(i, q, w) in shape_pairs {
                        let o = (b * count + i) * 3;
                        let p = [x[o], x[o + 1], x[o + 2]];
                        let coef = match distance {
                            ChamferDistance::Euclidean => {
                                let d = dist_sq(&p, &q).sqrt();
                                if d == T::zero() {
                                    continue;
                                }
                                g[b] * w / d
                            }
                            ChamferDistance::Squared => g[b] * w * two,
                        };
                        for k in 0..3 {
                            dx[o + k] += coef * (p[k] - q[k]);
                        }
                    }
                }
                vec![Some(
                    Tensor::new(ctx.inputs[0].shape().to_vec(), dx).unwrap(),
                )]
            }),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub accuracy: f64,
    pub mean_iou: f64,
    pub per_part_iou: Vec<f64>,
    /// Parts absent from both labelings score an IoU of 1 and are averaged in.
    pub absent_part_iou: f64,
}

pub fn seg_metrics(pred: &[usize], gt: &[usize], part_count: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Label(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l >= part_count) {
        return Err(Error::IndexOutOfRange {
            what: "part label",
            index: bad,
            len: part_count,
        });
    }
    let correct = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    let per_part_iou: Vec<f64> = (0..part_count)
        .map(|part| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &g) in pred.iter().zip(gt) {
                let (a, b) = (p == part, g == part);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    Ok(SegMetrics {
        accuracy: correct as f64 / pred.len() as f64,
        mean_iou: per_part_iou.iter().sum::<f64>() / part_count as f64,
        per_part_iou,
        absent_part_iou: 1.0,
    })
}

/// Mean pairwise distance among the points of each capsule's patch.
pub fn capsule_spread(recon: &Reconstruction) -> Vec<f64> {
    (0..recon.capsule_count())
        .map(|k| {
            let pts: Vec<&[f64; 3]> = recon.capsule_points(k).collect();
            if pts.len() < 2 {
                return 0.0;
            }
            let mut total = 0.0;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    total += dist_sq(pts[i], pts[j]).sqrt();
                }
            }
            total / (pts.len() * (pts.len() - 1) / 2) as f64
        })
        .collect()
}

pub fn mean_spread(recon: &Reconstruction) -> f64 {
    let s = capsule_spread(recon);
    s.iter().sum::<f64>() / s.len().max(1) as f64
}
