//! Dynamic routing of primary capsules into latent capsules, and the
//! shared-MLP/max-pool module used in its place for the ablation.
//!
//! Routing-by-agreement, per shape:
//!
//! ```text
//! u[i, j]  = W_j p_i + c_j          prediction of input capsule i for output j
//! b        = 0
//! repeat:  c = softmax_j(b)
//!          s_j = sum_i c[i, j] u[i, j]
//!          v_j = squash(s_j)
//!          b[i, j] += <u[i, j], v_j>  (not after the last iteration)
//! ```
//!
//! The couplings stay on the tape, so gradients flow through every iteration.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::PrimaryCapsules;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RoutingMode {
    #[default]
    Dynamic,
    ConvAblation,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Dynamic => "dynamic",
            RoutingMode::ConvAblation => "conv-ablation",
        }
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" | "dynamic-routing" => Ok(RoutingMode::Dynamic),
            "conv" | "conv-ablation" => Ok(RoutingMode::ConvAblation),
            other => Err(Error::config(format!("unknown routing mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingConfig {
    pub latent_count: usize,
    pub latent_dim: usize,
    pub iterations: usize,
    pub mode: RoutingMode,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            latent_count: 64,
            latent_dim: 64,
            iterations: 3,
            mode: RoutingMode::Dynamic,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_count == 0 || self.latent_dim == 0 {
            return Err(Error::config("routing latent sizes must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("routing.iterations must be at least 1"));
        }
        Ok(())
    }
}

/// `latent_count x latent_dim` latent code of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCapsules<T> {
    pub capsules: Tensor<T>,
}

impl<T: Real> LatentCapsules<T> {
    pub fn count(&self) -> usize {
        self.capsules.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.capsules.shape()[1]
    }

    pub fn capsule(&self, index: usize) -> &[T] {
        self.capsules.row(index)
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.count())
            .map(|j| {
                self.capsule(j)
                    .iter()
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Routing variables of one shape after the final iteration.
#[derive(Clone, Debug)]
pub struct RoutingState<T> {
    /// `[I, J]` logits used to form the final couplings.
    pub logits: Tensor<T>,
    /// `[I, J]` final couplings.
    pub couplings: Tensor<T>,
    /// `[I, J, D]` prediction vectors.
    pub predictions: Tensor<T>,
    /// `[J, D]` routed capsules.
    pub outputs: Tensor<T>,
    /// Couplings of every iteration, first to last.
    pub coupling_history: Vec<Tensor<T>>,
}

/// Squash of one vector: `s * |s| / (1 + |s|^2)`, zero at zero.
pub fn squash<T: Real>(s: &[T]) -> Vec<T> {
    let mut v = s.to_vec();
    crate::autodiff::squash_in_place(&mut v);
    v
}

pub const PREDICT: &str = "routing.predict";
pub const ABLATION: &str = "ablation.mlp";

/// Registers the parameters used by `cfg.mode` for capsules of dimension `input_dim`.
pub fn register<T: Real>(
    cfg: &RoutingConfig,
    input_dim: usize,
    store: &mut ParameterStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let name = match cfg.mode {
        RoutingMode::Dynamic => PREDICT,
        RoutingMode::ConvAblation => ABLATION,
    };
    // one input_dim -> latent_dim map per output capsule, stored side by side
    let width = cfg.latent_count * cfg.latent_dim;
    let a = (6.0 / (input_dim + cfg.latent_dim) as f64).sqrt();
    let data = (0..input_dim * width)
        .map(|_| T::of(rng.random_range(-a..a)))
        .collect();
    store.insert(
        &format!("{name}.weight"),
        Tensor::new(vec![input_dim, width], data)?,
    )?;
    store.insert(&format!("{name}.bias"), Tensor::zeros(vec![width]))?;
    Ok(())
}

fn per_capsule_map<T: Real>(
    name: &str,
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    ppc: Var,
) -> Result<(Var, [usize; 3])> {
    let shape = g.shape(ppc).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "route",
            format!("primary capsules must be [B, I, K], got {shape:?}"),
        ));
    }
    let (b, i, k) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(ppc, &[b * i, k])?;
    let w = g.param(store, &format!("{name}.weight"))?;
    let bias = g.param(store, &format!("{name}.bias"))?;
    let h = g.matmul(flat, w)?;
    Ok((g.add(h, bias)?, [b, i, k]))
}

fn tag_iteration(iteration: usize, what: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::RoutingNonFinite { iteration, what },
        other => other,
    }
}

fn dynamic_forward<T: Real>(
    cfg: &RoutingConfig,
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    ppc: Var,
    mut trace: Option<&mut Vec<(Var, Var)>>,
) -> Result<(Var, Var)> {
    let ppc = if g.deterministic() {
        g.sort_rows(ppc)?
    } else {
        ppc
    };
    let (u, [b, i, _]) =
        per_capsule_map(PREDICT, g, store, ppc).map_err(tag_iteration(0, "predictions"))?;
    let (j, d) = (cfg.latent_count, cfg.latent_dim);
    let u = g.reshape(u, &[b, i, j, d])?;
    let mut logits = g.constant(Tensor::zeros(vec![b, i, j]));
    let mut v = None;
    for it in 0..cfg.iterations {
        let iteration = it + 1;
        let c = g
            .softmax(logits, 2)
            .map_err(tag_iteration(iteration, "couplings"))?;
        if let Some(t) = trace.as_deref_mut() {
            t.push((logits, c));
        }
        let s = g
            .route_sum(c, u)
            .map_err(tag_iteration(iteration, "weighted sum"))?;
        let out = g.squash(s).map_err(tag_iteration(iteration, "squash"))?;
        v = Some(out);
        if iteration < cfg.iterations {
            let agree = g
                .route_agree(u, out)
                .map_err(tag_iteration(iteration, "agreement"))?;
            logits = g
                .add(logits, agree)
                .map_err(tag_iteration(iteration, "logits"))?;
        }
    }
    Ok((v.expect("iterations >= 1"), u))
}

fn ablation_forward<T: Real>(
    cfg: &RoutingConfig,
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    ppc: Var,
) -> Result<Var> {
    let (h, [b, i, _]) = per_capsule_map(ABLATION, g, store, ppc)?;
    let h = g.relu(h)?;
    let h = g.reshape(h, &[b, i, cfg.latent_count * cfg.latent_dim])?;
    let pooled = g.max_axis(h, 1)?;
    g.reshape(pooled, &[b, cfg.latent_count, cfg.latent_dim])
}

/// Graph forward from primary capsules `[B, I, K]` to latent capsules
/// `[B, latent_count, latent_dim]` using the configured mode.
pub fn forward<T: Real>(
    cfg: &RoutingConfig,
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    ppc: Var,
) -> Result<Var> {
    cfg.validate()?;
    match cfg.mode {
        RoutingMode::Dynamic => Ok(dynamic_forward(cfg, g, store, ppc, None)?.0),
        RoutingMode::ConvAblation => ablation_forward(cfg, g, store, ppc),
    }
}

fn single<T: Real>(ppc: &PrimaryCapsules<T>) -> Result<Tensor<T>> {
    let s = ppc.capsules.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "route",
            format!("primary capsules must be [I, K], got {s:?}"),
        ));
    }
    ppc.capsules.clone().reshape(vec![1, s[0], s[1]])
}

fn require_mode(cfg: &RoutingConfig, mode: RoutingMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::config(format!(
            "routing mode is {}, expected {}",
            cfg.mode.as_str(),
            mode.as_str()
        )));
    }
    cfg.validate()
}

/// Dynamic routing of one shape's primary capsules.
pub fn route<T: Real>(
    ppc: &PrimaryCapsules<T>,
    cfg: &RoutingConfig,
    store: &ParameterStore<T>,
) -> Result<LatentCapsules<T>> {
    Ok(route_traced(ppc, cfg, store)?.0)
}

/// [`route`] that also returns the routing variables of every iteration.
pub fn route_traced<T: Real>(
    ppc: &PrimaryCapsules<T>,
    cfg: &RoutingConfig,
    store: &ParameterStore<T>,
) -> Result<(LatentCapsules<T>, RoutingState<T>)> {
    require_mode(cfg, RoutingMode::Dynamic)?;
    let mut g = Graph::new();
    let x = g.constant(single(ppc)?);
    let mut trace = Vec::new();
    let (v, u) = dynamic_forward(cfg, &mut g, store, x, Some(&mut trace))?;
    let (i, j, d) = (ppc.capsules.shape()[0], cfg.latent_count, cfg.latent_dim);
    let outputs = g.value(v).clone().reshape(vec![j, d])?;
    // rows of the trace follow the canonical capsule order; map them back
    let order = if g.deterministic() {
        crate::autodiff::sorted_row_order(ppc.capsules.data(), ppc.capsules.shape()[1])
    } else {
        (0..i).collect()
    };
    let unsort = |t: &Tensor<T>, shape: Vec<usize>| -> Result<Tensor<T>> {
        let width = t.len() / i;
        let mut data = vec![T::zero(); t.len()];
        for (pos, &orig) in order.iter().enumerate() {
            data[orig * width..(orig + 1) * width]
                .copy_from_slice(&t.data()[pos * width..(pos + 1) * width]);
        }
        Tensor::new(shape, data)
    };
    let &(logits, couplings) = trace.last().expect("at least one iteration");
    let state = RoutingState {
        logits: unsort(g.value(logits), vec![i, j])?,
        couplings: unsort(g.value(couplings), vec![i, j])?,
        predictions: unsort(g.value(u), vec![i, j, d])?,
        outputs: outputs.clone(),
        coupling_history: trace
            .iter()
            .map(|&(_, c)| unsort(g.value(c), vec![i, j]))
            .collect::<Result<_>>()?,
    };
    Ok((LatentCapsules { capsules: outputs }, state))
}

/// The ablation module: per output capsule, a shared MLP over the primary
/// capsules followed by max-pooling.
pub fn conv_ablation<T: Real>(
    ppc: &PrimaryCapsules<T>,
    cfg: &RoutingConfig,
    store: &ParameterStore<T>,
) -> Result<LatentCapsules<T>> {
    require_mode(cfg, RoutingMode::ConvAblation)?;
    let mut g = Graph::new();
    let x = g.constant(single(ppc)?);
    let v = ablation_forward(cfg, &mut g, store, x)?;
    Ok(LatentCapsules {
        capsules: g
            .value(v)
            .clone()
            .reshape(vec![cfg.latent_count, cfg.latent_dim])?,
    })
}
