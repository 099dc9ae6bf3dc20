//! Latent capsule arithmetic: part matching, interpolation, replacement and a
//! linear classifier on flattened codes.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::partseg::CapsuleLabeling;
use crate::routing::LatentCapsules;
use crate::tensor::{Real, Tensor};

/// Source capsules paired with target capsules. Label matching pairs equal
/// indices; cosine matching may pair different ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsuleSelection {
    pub indices: Vec<usize>,
    pub partners: Vec<usize>,
    pub source_id: Option<String>,
    pub target_id: Option<String>,
}

impl CapsuleSelection {
    /// Same-index pairs.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        Self::paired(indices.clone(), indices)
    }

    pub fn paired(indices: Vec<usize>, partners: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptySelection);
        }
        if indices.len() != partners.len() {
            return Err(Error::shape("selection", "every capsule needs one partner"));
        }
        for list in [&indices, &partners] {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::config("capsule selection repeats an index"));
            }
        }
        Ok(Self {
            indices,
            partners,
            source_id: None,
            target_id: None,
        })
    }

    pub fn with_ids(mut self, source: impl Into<String>, target: impl Into<String>) -> Self {
        self.source_id = Some(source.into());
        self.target_id = Some(target.into());
        self
    }

    /// The same pairs read from target to source.
    pub fn swapped(&self) -> Self {
        Self {
            indices: self.partners.clone(),
            partners: self.indices.clone(),
            source_id: self.target_id.clone(),
            target_id: self.source_id.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, capsule: usize) -> bool {
        self.indices.contains(&capsule)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MatchMode {
    /// Capsules labeled with the part in both shapes.
    #[default]
    Labels,
    /// Greedy nearest target capsule by cosine similarity.
    Cosine,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Labels => "labels",
            MatchMode::Cosine => "cosine",
        }
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labels" => Ok(MatchMode::Labels),
            "cosine" => Ok(MatchMode::Cosine),
            _ => Err(Error::config(format!("unknown capsule matching `{s}`"))),
        }
    }
}

/// Capsules labeled `part` in both labelings.
pub fn match_part_capsules(
    a: &CapsuleLabeling,
    b: &CapsuleLabeling,
    part: usize,
) -> Result<CapsuleSelection> {
    if a.labels.len() != b.labels.len() || a.part_count != b.part_count {
        return Err(Error::shape(
            "match_part_capsules",
            "labelings disagree in capsule or part count",
        ));
    }
    let both: Vec<usize> = (0..a.labels.len())
        .filter(|&k| a.labels[k] == part && b.labels[k] == part)
        .collect();
    CapsuleSelection::new(both)
}

fn cosine<T: Real>(x: &[T], y: &[T]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let nx: f64 = x
        .iter()
        .map(|a| a.as_f64() * a.as_f64())
        .sum::<f64>()
        .sqrt();
    let ny: f64 = y
        .iter()
        .map(|a| a.as_f64() * a.as_f64())
        .sum::<f64>()
        .sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx * ny)
    }
}

/// Pairs each source capsule in `capsules`, in order, with the most similar
/// unused target capsule; ties go to the lower index.
pub fn match_by_cosine<T: Real>(
    src: &LatentCapsules<T>,
    tgt: &LatentCapsules<T>,
    capsules: &[usize],
) -> Result<CapsuleSelection> {
    check_pair(src, tgt)?;
    let mut used = vec![false; tgt.count()];
    let mut partners = Vec::with_capacity(capsules.len());
    for &i in capsules {
        if i >= src.count() {
            return Err(Error::IndexOutOfRange {
                what: "latent capsules",
                index: i,
                len: src.count(),
            });
        }
        let mut best: Option<(usize, f64)> = None;
        for j in (0..tgt.count()).filter(|&j| !used[j]) {
            let s = cosine(src.capsule(i), tgt.capsule(j));
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let (j, _) =
            best.ok_or_else(|| Error::config("more source capsules than target capsules"))?;
        used[j] = true;
        partners.push(j);
    }
    CapsuleSelection::paired(capsules.to_vec(), partners)
}

fn check_pair<T: Real>(src: &LatentCapsules<T>, tgt: &LatentCapsules<T>) -> Result<()> {
    if src.capsules.shape() != tgt.capsules.shape() {
        return Err(Error::shape(
            "latent pair",
            format!("{:?} vs {:?}", src.capsules.shape(), tgt.capsules.shape()),
        ));
    }
    Ok(())
}

/// Selected capsules become `(1 - t) * src + t * tgt`; the rest are copied.
pub fn interpolate_part<T: Real>(
    src: &LatentCapsules<T>,
    tgt: &LatentCapsules<T>,
    sel: &CapsuleSelection,
    t: f64,
) -> Result<LatentCapsules<T>> {
    check_pair(src, tgt)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!(
            "interpolation t = {t} is outside [0, 1]"
        )));
    }
    if sel.is_empty() {
        return Err(Error::EmptySelection);
    }
    let count = src.count();
    if let Some(&bad) = sel
        .indices
        .iter()
        .chain(&sel.partners)
        .find(|&&k| k >= count)
    {
        return Err(Error::IndexOutOfRange {
            what: "latent capsules",
            index: bad,
            len: count,
        });
    }
    let d = src.dim();
    let mut out = src.capsules.clone();
    let data = out.data_mut();
    for (&i, &j) in sel.indices.iter().zip(&sel.partners) {
        let row = &mut data[i * d..(i + 1) * d];
        if t == 0.0 {
            continue;
        }
        if t == 1.0 {
            row.copy_from_slice(tgt.capsule(j));
            continue;
        }
        let (a, b) = (T::of(1.0 - t), T::of(t));
        for (v, &w) in row.iter_mut().zip(tgt.capsule(j)) {
            *v = a * *v + b * w;
        }
    }
    Ok(LatentCapsules { capsules: out })
}

/// `interpolate_part` at `t = 1`.
pub fn replace_part<T: Real>(
    src: &LatentCapsules<T>,
    tgt: &LatentCapsules<T>,
    sel: &CapsuleSelection,
) -> Result<LatentCapsules<T>> {
    interpolate_part(src, tgt, sel, 1.0)
}

/// Row-major flattening of the capsule matrix.
pub fn flatten_latent<T: Real>(latent: &LatentCapsules<T>) -> Vec<f64> {
    latent.capsules.data().iter().map(|v| v.as_f64()).collect()
}

pub fn unflatten_latent(v: &[f64], count: usize, dim: usize) -> Result<LatentCapsules<f64>> {
    if v.len() != count * dim {
        return Err(Error::shape(
            "unflatten_latent",
            format!("{} values for {count} x {dim}", v.len()),
        ));
    }
    Ok(LatentCapsules {
        capsules: Tensor::new(vec![count, dim], v.to_vec())?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    /// L2 weight on the classifier weights.
    pub l2: f64,
    /// Base step; epoch `e` starts from `step / sqrt(e + 1)`.
    pub step: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            l2: 1e-3,
            step: 0.5,
        }
    }
}

/// One-vs-rest linear classifier with hinge loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `class_count x feature_width`.
    pub weights: Tensor<f64>,
    pub bias: Vec<f64>,
    /// Objective after each epoch.
    pub loss_history: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(class_count: usize, width: usize) -> Self {
        Self {
            weights: Tensor::zeros(vec![class_count, width]),
            bias: vec![0.0; class_count],
            loss_history: Vec::new(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn width(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.class_count())
            .map(|c| {
                self.weights
                    .row(c)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.bias[c]
            })
            .collect()
    }
}

/// Highest-scoring class; ties go to the lowest class index.
pub fn classify(clf: &LinearClassifier, x: &[f64]) -> Result<usize> {
    if x.len() != clf.width() {
        return Err(Error::shape(
            "classify",
            format!("feature of width {}, expected {}", x.len(), clf.width()),
        ));
    }
    Ok(crate::partseg::argmax(&clf.scores(x)))
}

fn objective(w: &[f64], b: &[f64], features: &[Vec<f64>], labels: &[usize], l2: f64) -> f64 {
    let (classes, width) = (b.len(), features[0].len());
    let mut hinge = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        for c in 0..classes {
            let s: f64 = w[c * width..(c + 1) * width]
                .iter()
                .zip(x)
                .map(|(a, v)| a * v)
                .sum::<f64>()
                + b[c];
            let sign = if c == y { 1.0 } else { -1.0 };
            hinge += (1.0 - sign * s).max(0.0);
        }
    }
    0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>() + hinge / features.len() as f64
}

/// Full-batch subgradient descent on L2-regularized one-vs-rest hinge loss.
/// A step that would raise the objective is halved until it does not, so
/// the recorded objective never increases.
pub fn train_linear_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(Error::shape(
            "train_linear_classifier",
            "one label per feature is required",
        ));
    }
    let width = features[0].len();
    if features.iter().any(|f| f.len() != width) {
        return Err(Error::shape(
            "train_linear_classifier",
            "features differ in width",
        ));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleClass);
    }
    if !(cfg.l2 >= 0.0 && cfg.step > 0.0) {
        return Err(Error::config(
            "classifier needs l2 >= 0 and a positive step",
        ));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut w = vec![0.0; classes * width];
    let mut b = vec![0.0; classes];
    let mut loss = objective(&w, &b, features, labels, cfg.l2);
    let mut history = Vec::with_capacity(cfg.epochs);
    let n = features.len() as f64;
    for epoch in 0..cfg.epochs {
        let mut gw: Vec<f64> = w.iter().map(|v| cfg.l2 * v).collect();
        let mut gb = vec![0.0; classes];
        for (x, &y) in features.iter().zip(labels) {
            for c in 0..classes {
                let row = &w[c * width..(c + 1) * width];
                let s: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b[c];
                let sign = if c == y { 1.0 } else { -1.0 };
                if sign * s < 1.0 {
                    for (g, v) in gw[c * width..(c + 1) * width].iter_mut().zip(x) {
                        *g -= sign * v / n;
                    }
                    gb[c] -= sign / n;
                }
            }
        }
        let mut eta = cfg.step / ((epoch + 1) as f64).sqrt();
        for _ in 0..40 {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - eta * g).collect();
            let nb: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - eta * g).collect();
            let next = objective(&nw, &nb, features, labels, cfg.l2);
            if next <= loss {
                (w, b, loss) = (nw, nb, next);
                break;
            }
            eta *= 0.5;
        }
        history.push(loss);
    }
    Ok(LinearClassifier {
        weights: Tensor::new(vec![classes, width], w)?,
        bias: b,
        loss_history: history,
    })
}

/// Fraction of `features` classified as their label.
pub fn accuracy(clf: &LinearClassifier, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for (x, &y) in features.iter().zip(labels) {
        correct += (classify(clf, x)? == y) as usize;
    }
    Ok(correct as f64 / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lat(rows: &[[f64; 2]]) -> LatentCapsules<f64> {
        LatentCapsules {
            capsules: Tensor::new(vec![rows.len(), 2], rows.concat()).unwrap(),
        }
    }

    fn labeling(labels: &[usize]) -> CapsuleLabeling {
        CapsuleLabeling::new(labels.to_vec(), 2).unwrap()
    }

    #[test]
    fn matching_is_intersection() {
        let a = labeling(&[0, 0, 0, 1]);
        let b = labeling(&[1, 0, 0, 0]);
        assert_eq!(match_part_capsules(&a, &b, 0).unwrap().indices, vec![1, 2]);
        assert_eq!(
            match_part_capsules(&a, &a, 0).unwrap().indices,
            vec![0, 1, 2]
        );
        let c = labeling(&[1, 1, 1, 0]);
        assert!(matches!(
            match_part_capsules(&a, &c, 1),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let src = lat(&[[0.0, 2.0], [5.0, 5.0]]);
        let tgt = lat(&[[2.0, 0.0], [7.0, 7.0]]);
        let sel = CapsuleSelection::new(vec![0]).unwrap();
        assert_eq!(interpolate_part(&src, &tgt, &sel, 0.0).unwrap(), src);
        let mid = interpolate_part(&src, &tgt, &sel, 0.5).unwrap();
        assert_eq!(mid.capsule(0), &[1.0, 1.0]);
        assert_eq!(mid.capsule(1), src.capsule(1));
        let end = interpolate_part(&src, &tgt, &sel, 1.0).unwrap();
        assert_eq!(end.capsule(0), tgt.capsule(0));
        assert!(interpolate_part(&src, &tgt, &sel, 1.5).is_err());
    }

    #[test]
    fn replacement_rules() {
        let src = lat(&[[0.0, 2.0], [5.0, 5.0], [1.0, 1.0]]);
        let tgt = lat(&[[2.0, 0.0], [7.0, 7.0], [3.0, 3.0]]);
        let all = CapsuleSelection::new(vec![0, 1, 2]).unwrap();
        assert_eq!(replace_part(&src, &tgt, &all).unwrap(), tgt);
        let sel = CapsuleSelection::new(vec![1]).unwrap();
        let once = replace_part(&src, &tgt, &sel).unwrap();
        assert_eq!(replace_part(&once, &src, &sel).unwrap(), src);
        assert!(matches!(
            CapsuleSelection::new(vec![]),
            Err(Error::EmptySelection)
        ));
        assert!(CapsuleSelection::new(vec![1, 1]).is_err());
    }

    #[test]
    fn cosine_matching_pairs_similar_capsules() {
        let src = lat(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let tgt = lat(&[[0.0, 3.0], [2.0, 2.0], [5.0, 0.1]]);
        let sel = match_by_cosine(&src, &tgt, &[0, 1]).unwrap();
        assert_eq!(sel.partners, vec![2, 0]);
        let moved = replace_part(&src, &tgt, &sel).unwrap();
        assert_eq!(moved.capsule(0), tgt.capsule(2));
        assert_eq!(moved.capsule(1), tgt.capsule(0));
        assert_eq!(moved.capsule(2), src.capsule(2));
        assert_eq!(sel.swapped().partners, vec![0, 1]);
    }

    #[test]
    fn flatten_round_trip() {
        let ones = LatentCapsules {
            capsules: Tensor::<f64>::ones(vec![64, 64]),
        };
        let flat = flatten_latent(&ones);
        assert_eq!(flat.len(), 4096);
        assert!(flat.iter().all(|&v| v == 1.0));
        let src = lat(&[[0.0, 2.0], [5.0, 5.0]]);
        assert_eq!(unflatten_latent(&flatten_latent(&src), 2, 2).unwrap(), src);
        assert!(unflatten_latent(&[1.0; 3], 2, 2).is_err());
    }

    fn clusters(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -1.0 } else { 1.0 };
            xs.push(vec![
                c + rng.random_range(-0.5..0.5),
                c + rng.random_range(-0.5..0.5),
                rng.random_range(-1.0..1.0),
            ]);
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn separable_clusters_classified_perfectly() {
        let (x, y) = clusters(40, 1);
        let clf = train_linear_classifier(&x, &y, &ClassifierConfig::default()).unwrap();
        let (xt, yt) = clusters(40, 2);
        assert_eq!(accuracy(&clf, &xt, &yt).unwrap(), 1.0);
        for w in clf.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
        assert!(matches!(
            train_linear_classifier(&x, &vec![1; 40], &ClassifierConfig::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn classify_tie_and_scaling_rules() {
        let zero = LinearClassifier::zeros(3, 2);
        assert_eq!(classify(&zero, &[4.0, -1.0]).unwrap(), 0);
        let (x, y) = clusters(20, 3);
        let mut clf = train_linear_classifier(&x, &y, &ClassifierConfig::default()).unwrap();
        let before: Vec<usize> = x.iter().map(|f| classify(&clf, f).unwrap()).collect();
        clf.weights = clf.weights.map(|v| v * 3.5);
        clf.bias.iter_mut().for_each(|b| *b *= 3.5);
        let after: Vec<usize> = x.iter().map(|f| classify(&clf, f).unwrap()).collect();
        assert_eq!(before, after);
    }
}
