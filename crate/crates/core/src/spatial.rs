//! Static 3D k-d tree for exact nearest-neighbour queries.
//!
//! Ties on distance resolve to the lowest point index, so queries agree
//! exactly with a brute-force scan that keeps the first minimum.

use crate::tensor::Real;

const LEAF_SIZE: usize = 8;

#[inline]
pub fn dist_sq<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Nearest point of `points` to `q` by linear scan: `(index, squared distance)`.
pub fn brute_nearest<T: Real>(points: &[[T; 3]], q: &[T; 3]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (i, p) in points.iter().enumerate() {
        let d = dist_sq(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct KdTree<T> {
    points: Vec<[T; 3]>,
    /// Point indices permuted into tree order; the node for `lo..hi` pivots at the midpoint.
    order: Vec<usize>,
}

impl<T: Real> KdTree<T> {
    pub fn new(points: Vec<[T; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(&points, &mut order, 0);
        Self { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[T; 3]] {
        &self.points
    }

    /// `(index, squared distance)` of the nearest point, or `None` when empty.
    pub fn nearest(&self, q: &[T; 3]) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, T::infinity());
        self.search(q, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    /// The `k` nearest points sorted by (distance, index).
    pub fn k_nearest(&self, q: &[T; 3], k: usize) -> Vec<(usize, T)> {
        let mut heap: Vec<(usize, T)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search_k(q, 0, self.order.len(), 0, k, &mut heap);
        }
        heap
    }

    fn consider(&self, q: &[T; 3], idx: usize, best: &mut (usize, T)) {
        let d = dist_sq(&self.points[idx], q);
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
    }

    fn search(&self, q: &[T; 3], lo: usize, hi: usize, depth: usize, best: &mut (usize, T)) {
        if hi - lo <= LEAF_SIZE {
            for &idx in &self.order[lo..hi] {
                self.consider(q, idx, best);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = depth % 3;
        let pivot = self.order[mid];
        self.consider(q, pivot, best);
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff < T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        if near.0 < near.1 {
            self.search(q, near.0, near.1, depth + 1, best);
        }
        if far.0 < far.1 && diff * diff <= best.1 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }

    fn offer(&self, q: &[T; 3], idx: usize, k: usize, heap: &mut Vec<(usize, T)>) {
        let d = dist_sq(&self.points[idx], q);
        let key_lt = |a: (T, usize), b: (T, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
        if heap.len() == k {
            let worst = heap[k - 1];
            if !key_lt((d, idx), (worst.1, worst.0)) {
                return;
            }
            heap.pop();
        }
        let pos = heap
            .iter()
            .position(|&(i, dd)| key_lt((d, idx), (dd, i)))
            .unwrap_or(heap.len());
        heap.insert(pos, (idx, d));
    }

    fn search_k(
        &self,
        q: &[T; 3],
        lo: usize,
        hi: usize,
        depth: usize,
        k: usize,
        heap: &mut Vec<(usize, T)>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &idx in &self.order[lo..hi] {
                self.offer(q, idx, k, heap);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = depth % 3;
        let pivot = self.order[mid];
        self.offer(q, pivot, k, heap);
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff < T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        if near.0 < near.1 {
            self.search_k(q, near.0, near.1, depth + 1, k, heap);
        }
        let bound = if heap.len() < k {
            T::infinity()
        } else {
            heap[k - 1].1
        };
        if far.0 < far.1 && diff * diff <= bound {
            self.search_k(q, far.0, far.1, depth + 1, k, heap);
        }
    }
}

fn build<T: Real>(points: &[[T; 3]], order: &mut [usize], depth: usize) {
    if order.len() <= LEAF_SIZE {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .partial_cmp(&points[b][axis])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let (left, rest) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut rest[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 5, 9, 100, 777] {
            let pts = random_points(n, &mut rng);
            let tree = KdTree::new(pts.clone());
            for q in random_points(50, &mut rng) {
                assert_eq!(tree.nearest(&q).unwrap(), brute_nearest(&pts, &q));
            }
        }
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let pts = vec![[1.0, 0.0, 0.0]; 40];
        let tree = KdTree::new(pts);
        assert_eq!(tree.nearest(&[0.0, 0.0, 0.0]).unwrap().0, 0);
        let ks = tree.k_nearest(&[0.0, 0.0, 0.0], 3);
        assert_eq!(ks.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn k_nearest_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(300, &mut rng);
        let tree = KdTree::new(pts.clone());
        for q in random_points(20, &mut rng) {
            let mut all: Vec<(usize, f64)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dist_sq(p, &q)))
                .collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(9);
            assert_eq!(tree.k_nearest(&q, 9), all);
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::<f64>::new(vec![]);
        assert!(tree.nearest(&[0.0; 3]).is_none());
    }
}
