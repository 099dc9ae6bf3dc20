use pointcaps::autodiff::{BatchNormConfig, BatchNormState};
use pointcaps::dataio::{
    normalize, parse_cloud, resample, write_cloud_string, Checkpoint, CloudFormat,
};
use pointcaps::decoder::DecoderConfig;
use pointcaps::encoder::EncoderConfig;
use pointcaps::latent::{
    interpolate_part, replace_part, train_linear_classifier, ClassifierConfig,
};
use pointcaps::losses::{chamfer, chamfer_fast, seg_metrics};
use pointcaps::partseg::{mode_filter, segment_points, PartNet, PartNetConfig};
use pointcaps::routing::{route, route_traced, squash};
use pointcaps::spatial::KdTree;
use pointcaps::{
    adam_step, AdamConfig, CapsuleSelection, ModelConfig, ParameterStore, PointCapsNet, PointCloud,
    PrimaryCapsules, RoutingConfig, Tensor,
};
use proptest::prelude::*;
use std::path::Path;

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_points: 32,
            point_dim: 3,
            mlp_widths: vec![3, 8, 8],
            branch_count: 4,
            branch_width: 12,
        },
        routing: RoutingConfig {
            latent_count: 6,
            latent_dim: 5,
            ..RoutingConfig::default()
        },
        decoder: DecoderConfig {
            replicas: 4,
            mlp_widths: vec![8, 3],
            ..DecoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(), min..=max).prop_map(PointCloud::new)
}

fn labeled_cloud(n: usize, parts: usize) -> impl Strategy<Value = PointCloud> {
    (
        prop::collection::vec(point(), n),
        prop::collection::vec(0..parts, n),
    )
        .prop_map(|(p, l)| PointCloud::with_labels(p, l).unwrap())
}

fn brute(x: &PointCloud, y: &PointCloud) -> f64 {
    let one = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.len() as f64
    };
    one(&x.points, &y.points) + one(&y.points, &x.points)
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adam_with_zero_gradients_keeps_values(values in prop::collection::vec(-3.0f64..3.0, 1..20), steps in 1usize..5) {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        for _ in 0..steps {
            adam_step(&mut store, &AdamConfig::default()).unwrap();
        }
        prop_assert_eq!(store.value("w").unwrap().data(), &values[..]);
    }

    #[test]
    fn batchnorm_train_output_is_standardized(rows in 2usize..12, channels in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * channels).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(vec![rows, channels], data).unwrap();
        let cfg = BatchNormConfig::default();
        let y = BatchNormState::new(channels, cfg).apply(&x).unwrap();
        for c in 0..channels {
            let col: Vec<f64> = (0..rows).map(|r| y.row(r)[c]).collect();
            let xs: Vec<f64> = (0..rows).map(|r| x.row(r)[c]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            let xm = xs.iter().sum::<f64>() / rows as f64;
            let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() <= 1e-10);
            prop_assert!((var - xv / (xv + cfg.epsilon)).abs() <= 1e-9);
        }
    }

    #[test]
    fn encoder_is_permutation_invariant_with_fixed_shape(c in cloud(32, 32), perm in permutation(32), seed in 0u64..50) {
        let cfg = small_model();
        let net = PointCapsNet::<f64>::new(cfg.clone(), seed).unwrap();
        let a = net.encode(&c).unwrap();
        prop_assert_eq!(a.capsules.shape(), &[cfg.routing.latent_count, cfg.routing.latent_dim][..]);
        prop_assert_eq!(net.encode(&c.permuted(&perm)).unwrap(), a);
    }

    #[test]
    fn routing_couplings_norms_and_permutations(data in prop::collection::vec(0.0f64..2.0, 10 * 4), perm in permutation(10), seed in 0u64..50) {
        let cfg = small_model();
        let net = PointCapsNet::<f64>::new(ModelConfig { encoder: EncoderConfig { branch_count: 4, ..cfg.encoder.clone() }, ..cfg.clone() }, seed).unwrap();
        let ppc = PrimaryCapsules { capsules: Tensor::new(vec![10, 4], data.clone()).unwrap() };
        let (latent, state) = route_traced(&ppc, &cfg.routing, &net.store).unwrap();
        for c in &state.coupling_history {
            for i in 0..10 {
                prop_assert!((c.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        prop_assert!(latent.norms().iter().all(|&n| n < 1.0));
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| data[i * 4..(i + 1) * 4].to_vec()).collect();
        let other = PrimaryCapsules { capsules: Tensor::new(vec![10, 4], shuffled).unwrap() };
        prop_assert_eq!(route(&other, &cfg.routing, &net.store).unwrap(), latent);
    }

    #[test]
    fn single_iteration_matches_uniform_oracle(data in prop::collection::vec(-1.0f64..1.0, 4 * 2), seed in 0u64..50) {
        use rand::SeedableRng;
        let cfg = RoutingConfig { latent_count: 3, latent_dim: 2, iterations: 1, ..RoutingConfig::default() };
        let mut store = ParameterStore::<f64>::new();
        pointcaps::routing::register(&cfg, 2, &mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let w = store.value("routing.predict.weight").unwrap().clone();
        let b = store.value("routing.predict.bias").unwrap().clone();
        let ppc = PrimaryCapsules { capsules: Tensor::new(vec![4, 2], data.clone()).unwrap() };
        let out = route(&ppc, &cfg, &store).unwrap();
        for j in 0..3 {
            let mut s = [0.0; 2];
            for i in 0..4 {
                for d in 0..2 {
                    let col = j * 2 + d;
                    let u = data[i * 2] * w.row(0)[col] + data[i * 2 + 1] * w.row(1)[col] + b.data()[col];
                    s[d] += u / 3.0;
                }
            }
            let v = squash(&s);
            for d in 0..2 {
                prop_assert!((out.capsule(j)[d] - v[d]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn decoder_partitions_points_and_is_deterministic(c in cloud(32, 32), seed in 0u64..50, grid_seed in any::<u64>()) {
        let cfg = small_model();
        let net = PointCapsNet::<f64>::new(cfg.clone(), seed).unwrap();
        let grid = net.grid(grid_seed);
        let r = net.reconstruct(&c, &grid).unwrap();
        prop_assert_eq!(r.points.len(), cfg.output_points());
        for (idx, &k) in r.attribution.iter().enumerate() {
            prop_assert_eq!(k, idx / cfg.decoder.replicas);
        }
        prop_assert_eq!(net.reconstruct(&c, &grid).unwrap(), r);
    }

    #[test]
    fn chamfer_properties(x in cloud(1, 48), y in cloud(1, 48)) {
        let v = chamfer(&x, &y).unwrap().value;
        prop_assert!(v >= 0.0);
        prop_assert_eq!(chamfer(&x, &x).unwrap().value, 0.0);
        prop_assert!((v - chamfer(&y, &x).unwrap().value).abs() <= 1e-12);
        let fast = chamfer_fast(&x, &y, &KdTree::new(y.points.clone())).unwrap().value;
        prop_assert!((fast - brute(&x, &y)).abs() <= 1e-9);
        let back = chamfer_fast(&y, &x, &KdTree::new(x.points.clone())).unwrap().value;
        prop_assert!((fast - back).abs() <= 1e-12);
    }

    #[test]
    fn seg_accuracy_is_mean_correctness(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..64)) {
        let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = seg_metrics(&pred, &gt, 4).unwrap();
        let direct = pred.iter().zip(&gt).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
        prop_assert!((m.accuracy - direct).abs() <= 1e-12);
        prop_assert!(m.mean_iou <= 1.0 && m.mean_iou >= 0.0);
    }

    #[test]
    fn mode_filter_keeps_locally_constant_labels(a in prop::collection::vec(point(), 12), b in prop::collection::vec(point(), 12)) {
        let shift = |p: &[f64; 3], dx: f64| [p[0] * 0.1 + dx, p[1] * 0.1, p[2] * 0.1];
        let mut points: Vec<[f64; 3]> = a.iter().map(|p| shift(p, -5.0)).collect();
        points.extend(b.iter().map(|p| shift(p, 5.0)));
        let labels = (0..24).map(|i| usize::from(i >= 12)).collect();
        let c = PointCloud::with_labels(points, labels).unwrap();
        let once = mode_filter(&c, 9).unwrap();
        prop_assert_eq!(&once, &c);
        prop_assert_eq!(mode_filter(&once, 9).unwrap(), once);
    }

    #[test]
    fn segment_labels_come_in_whole_patches(c in cloud(32, 32), seed in 0u64..50) {
        let cfg = small_model();
        let net = PointCapsNet::<f64>::new(cfg.clone(), seed).unwrap();
        let pn = PartNet::new(PartNetConfig { part_count: 3, seed, ..PartNetConfig::default() }, cfg.routing.latent_dim).unwrap();
        let latent = net.encode(&c).unwrap();
        let seg = segment_points(&net, &pn, &latent, &[1.0], &net.grid(0)).unwrap();
        let labels = seg.labels().unwrap();
        for part in 0..3 {
            prop_assert_eq!(labels.iter().filter(|&&l| l == part).count() % cfg.decoder.replicas, 0);
        }
    }

    #[test]
    fn latent_edits_keep_unselected_patches(x in cloud(32, 32), y in cloud(32, 32), t in 0.0f64..=1.0, mask in prop::collection::vec(any::<bool>(), 6)) {
        prop_assume!(mask.iter().any(|&m| m));
        let cfg = small_model();
        let net = PointCapsNet::<f64>::new(cfg.clone(), 3).unwrap();
        let (src, tgt) = (net.encode(&x).unwrap(), net.encode(&y).unwrap());
        let grid = net.grid(9);
        let sel = CapsuleSelection::new((0..6).filter(|&k| mask[k]).collect()).unwrap();
        let base = net.decode(&src, &grid).unwrap();
        prop_assert_eq!(&net.decode(&interpolate_part(&src, &tgt, &sel, 0.0).unwrap(), &grid).unwrap(), &base);
        let mixed = net.decode(&interpolate_part(&src, &tgt, &sel, t).unwrap(), &grid).unwrap();
        let m = cfg.decoder.replicas;
        for k in (0..6).filter(|&k| !mask[k]) {
            prop_assert_eq!(&mixed.points[k * m..(k + 1) * m], &base.points[k * m..(k + 1) * m]);
        }
        let full = net.decode(&interpolate_part(&src, &tgt, &sel, 1.0).unwrap(), &grid).unwrap();
        let target = net.decode(&tgt, &grid).unwrap();
        for &k in &sel.indices {
            prop_assert_eq!(&full.points[k * m..(k + 1) * m], &target.points[k * m..(k + 1) * m]);
        }
        let swapped = replace_part(&src, &tgt, &sel).unwrap();
        prop_assert_eq!(replace_part(&swapped, &src, &sel.swapped()).unwrap(), src);
    }

    #[test]
    fn classifier_loss_never_increases(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..24).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let clf = train_linear_classifier(&xs, &ys, &ClassifierConfig { epochs: 40, ..ClassifierConfig::default() }).unwrap();
        for w in clf.loss_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn normalize_is_idempotent_and_resample_sized(c in cloud(2, 40), n in 1usize..80, seed in any::<u64>()) {
        prop_assume!(c.points.iter().any(|p| p != &c.points[0]));
        let once = normalize(&c).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-12);
            }
        }
        prop_assert_eq!(resample(&c, n, seed).unwrap().len(), n);
    }

    #[test]
    fn formats_round_trip_labels(c in labeled_cloud(20, 5), category in prop::option::of(0usize..10)) {
        let c = match category { Some(k) => c.with_category(k), None => c };
        for format in [CloudFormat::Xyz, CloudFormat::PlyAscii] {
            let back = parse_cloud(&write_cloud_string(&c, format), format, Path::new("mem")).unwrap();
            prop_assert_eq!(&back.labels, &c.labels);
            prop_assert_eq!(back.category, c.category);
            for (a, b) in back.points.iter().zip(&c.points) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-9 * b[k].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..100) {
        let net = PointCapsNet::<f32>::new(small_model(), seed).unwrap();
        let ckpt = pointcaps::trainer::checkpoint_of(&net, 3, seed);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.restore_into(&net.store).unwrap(), net.store);
    }
}
