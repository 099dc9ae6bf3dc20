//! Central finite-difference checks of the reverse pass at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormConfig, Graph, Mode, RunningStats, Var};
use crate::dataio::PointCloud;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::losses::{ChamferDistance, ChamferTarget};
use crate::model::{ModelConfig, PointCapsNet};
use crate::params::ParameterStore;
use crate::routing::{self, RoutingConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &ParameterStore<f64>, &[Var]) -> Result<Var> + 'a;

/// Reduces a non-scalar output to a scalar with fixed random weights so every
/// output coordinate carries a distinct cotangent.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..g.value(out).len())
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

fn evaluate(
    store: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    build: &Build,
    seed: u64,
) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, store, &vars)?;
    let loss = project(&mut g, out, seed)?;
    Ok((g, vars, loss))
}

/// Compares analytic gradients of `build` with respect to `inputs` and every
/// trainable entry of `store` against central differences.
pub fn check(
    name: &str,
    store: ParameterStore<f64>,
    inputs: Vec<Tensor<f64>>,
    build: &Build,
) -> Result<GradCheck> {
    let seed = name
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let (g, vars, loss) = evaluate(&store, &inputs, build, seed)?;
    let grads = g.gradients(loss)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    g.backward(loss, &mut analytic_store)?;
    drop(g);

    let mut max_err: f64 = 0.0;
    let mut coordinates = 0;
    let mut compare = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * STEP);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        max_err = max_err.max(err);
        coordinates += 1;
    };
    let value_at = |store: &ParameterStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, loss) = evaluate(store, inputs, build, seed)?;
        Ok(g.value(loss).data()[0])
    };

    for (k, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zero).clone();
        for i in 0..inputs[k].len() {
            let mut shifted = inputs.clone();
            shifted[k].data_mut()[i] += STEP;
            let plus = value_at(&store, &shifted)?;
            shifted[k].data_mut()[i] -= 2.0 * STEP;
            let minus = value_at(&store, &shifted)?;
            compare(analytic.data()[i], plus, minus);
        }
    }
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for param in names {
        let analytic = analytic_store.grad(&param)?.clone();
        for i in 0..analytic.len() {
            let mut shifted = store.clone();
            let base = shifted.value(&param)?.data()[i];
            shifted.value_mut(&param)?.data_mut()[i] = base + STEP;
            let plus = value_at(&shifted, &inputs)?;
            shifted.value_mut(&param)?.data_mut()[i] = base - STEP;
            let minus = value_at(&shifted, &inputs)?;
            compare(analytic.data()[i], plus, minus);
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        coordinates,
        max_rel_error: max_err,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random() { 1.0 } else { -1.0 } * rng.random_range(0.2..1.5))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
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

/// The 16-point, 4-capsule model used by the end-to-end check.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_points: 16,
            point_dim: 3,
            mlp_widths: vec![3, 6, 8],
            branch_count: 3,
            branch_width: 5,
        },
        routing: RoutingConfig {
            latent_count: 4,
            latent_dim: 4,
            iterations: 3,
            ..RoutingConfig::default()
        },
        decoder: DecoderConfig {
            replicas: 4,
            mlp_widths: vec![6, 3],
            ..DecoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Every differentiable operation, routing unrolled over three iterations,
/// and the full encode, route, decode and Chamfer chain.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ParameterStore::<f64>::new;
    let mut out = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $body:expr) => {
            out.push(check($name, empty(), $inputs, &$body)?)
        };
    }
    let r = &mut rng;
    case!(
        "matmul",
        vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)],
        |g, _, v| g.matmul(v[0], v[1])
    );
    case!(
        "add",
        vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0)],
        |g, _, v| g.add(v[0], v[1])
    );
    case!(
        "mul",
        vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
        |g, _, v| g.mul(v[0], v[1])
    );
    case!("scale", vec![random(r, &[5], -1.0, 1.0)], |g, _, v| g
        .scale(v[0], -2.5));
    case!("relu", vec![away_from_zero(r, &[3, 4])], |g, _, v| g
        .relu(v[0]));
    case!("tanh", vec![random(r, &[3, 4], -2.0, 2.0)], |g, _, v| g
        .tanh(v[0]));
    case!("square", vec![random(r, &[6], -2.0, 2.0)], |g, _, v| g
        .square(v[0]));
    case!("sqrt", vec![random(r, &[6], 0.3, 2.0)], |g, _, v| g
        .sqrt(v[0]));
    case!(
        "softmax",
        vec![random(r, &[2, 3, 4], -2.0, 2.0)],
        |g, _, v| g.softmax(v[0], 1)
    );
    case!(
        "max_axis",
        vec![random(r, &[2, 5, 3], -1.0, 1.0)],
        |g, _, v| g.max_axis(v[0], 1)
    );
    case!(
        "sum_axis",
        vec![random(r, &[2, 3, 4], -1.0, 1.0)],
        |g, _, v| g.sum_axis(v[0], 2)
    );
    case!("mean", vec![random(r, &[3, 3], -1.0, 1.0)], |g, _, v| g
        .mean(v[0]));
    case!(
        "concat",
        vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 2], -1.0, 1.0)],
        |g, _, v| g.concat(&[v[0], v[1]], 1)
    );
    case!("reshape", vec![random(r, &[2, 6], -1.0, 1.0)], |g, _, v| g
        .reshape(v[0], &[3, 4]));
    case!(
        "repeat_rows",
        vec![random(r, &[3, 2], -1.0, 1.0)],
        |g, _, v| g.repeat_rows(v[0], 3)
    );
    case!("squash", vec![random(r, &[4, 3], -1.5, 1.5)], |g, _, v| g
        .squash(v[0]));
    case!(
        "sort_rows",
        vec![random(r, &[2, 5, 3], -1.0, 1.0)],
        |g, _, v| g.sort_rows(v[0])
    );
    case!(
        "route_sum",
        vec![
            random(r, &[2, 3, 4], 0.0, 1.0),
            random(r, &[2, 3, 4, 2], -1.0, 1.0)
        ],
        |g, _, v| g.route_sum(v[0], v[1])
    );
    case!(
        "route_agree",
        vec![
            random(r, &[2, 3, 4, 2], -1.0, 1.0),
            random(r, &[2, 4, 2], -1.0, 1.0)
        ],
        |g, _, v| g.route_agree(v[0], v[1])
    );
    case!(
        "cross_entropy",
        vec![random(r, &[4, 3], -2.0, 2.0)],
        |g, _, v| g.cross_entropy(v[0], &[0, 2, 1, 2])
    );
    for (name, relu, mode) in [
        ("batchnorm/train", false, Mode::Train),
        ("batchnorm/eval", false, Mode::Eval),
        ("batchnorm_relu/train", true, Mode::Train),
    ] {
        let running = RunningStats {
            mean: random(r, &[3], -0.5, 0.5),
            var: random(r, &[3], 0.5, 1.5),
        };
        let inputs = vec![
            random(r, &[6, 3], -2.0, 2.0),
            random(r, &[3], 0.5, 1.5),
            random(r, &[3], -0.5, 0.5),
        ];
        let body = move |g: &mut Graph<f64>, _: &ParameterStore<f64>, v: &[Var]| {
            let cfg = BatchNormConfig::default();
            let (y, _) = if relu {
                g.batchnorm_relu(v[0], v[1], v[2], &running, cfg, mode)?
            } else {
                g.batchnorm(v[0], v[1], v[2], &running, cfg, mode)?
            };
            Ok(y)
        };
        out.push(check(name, empty(), inputs, &body)?);
    }
    for distance in [ChamferDistance::Euclidean, ChamferDistance::Squared] {
        let targets = vec![
            ChamferTarget::new(&cloud(r, 7))?,
            ChamferTarget::new(&cloud(r, 5))?,
        ];
        let body = move |g: &mut Graph<f64>, _: &ParameterStore<f64>, v: &[Var]| {
            let d = g.chamfer(v[0], &targets, distance)?;
            g.mean(d)
        };
        let name = format!("chamfer/{}", distance.as_str());
        out.push(check(
            &name,
            empty(),
            vec![random(r, &[2, 6, 3], -1.0, 1.0)],
            &body,
        )?);
    }

    let rcfg = RoutingConfig {
        latent_count: 3,
        latent_dim: 4,
        iterations: 3,
        ..RoutingConfig::default()
    };
    let mut store = ParameterStore::new();
    routing::register(&rcfg, 2, &mut store, r)?;
    let body = |g: &mut Graph<f64>, s: &ParameterStore<f64>, v: &[Var]| {
        routing::forward(&rcfg, g, s, v[0])
    };
    out.push(check(
        "routing/3-iterations",
        store,
        vec![random(r, &[2, 5, 2], -1.0, 1.0)],
        &body,
    )?);

    let net = PointCapsNet::<f64>::new(miniature_config(), seed)?;
    let clouds = [cloud(r, 16), cloud(r, 16)];
    let targets: Vec<ChamferTarget<f64>> = clouds
        .iter()
        .map(ChamferTarget::new)
        .collect::<Result<_>>()?;
    let grids = [net.grid(seed), net.grid(seed + 1)];
    let body = |g: &mut Graph<f64>, s: &ParameterStore<f64>, _: &[Var]| {
        let m = PointCapsNet {
            config: net.config.clone(),
            store: s.clone(),
        };
        let f = m.forward(
            g,
            &[&clouds[0], &clouds[1]],
            &[&grids[0], &grids[1]],
            Mode::Train,
        )?;
        m.loss(g, f.points, &targets)
    };
    out.push(check(
        "model/encode-route-decode-chamfer",
        net.store.clone(),
        vec![],
        &body,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let body = |g: &mut Graph<f64>, _: &ParameterStore<f64>, v: &[Var]| {
            let value = g.value(v[0]).clone();
            g.record(
                "bad",
                value,
                vec![v[0]],
                Box::new(|ctx| vec![Some(ctx.grad.map(|t| 2.0 * t))]),
            )
        };
        let r = check(
            "bad",
            ParameterStore::new(),
            vec![Tensor::from_f64([3], &[0.5, 1.0, 2.0]).unwrap()],
            &body,
        )
        .unwrap();
        assert!(!r.passed());
    }
}
