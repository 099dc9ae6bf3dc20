//! Batch normalization over the last (channel) axis.
//!
//! Train mode normalizes with the population variance of the current batch
//! and reports updated running statistics; eval mode uses the running
//! statistics only.

use super::{Graph, RunningUpdate, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }
}

/// Self-contained batchnorm layer for use outside a graph.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
    pub config: BatchNormConfig,
    pub mode: Mode,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, config: BatchNormConfig) -> Self {
        Self {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running: RunningStats::new(channels),
            config,
            mode: Mode::Train,
        }
    }

    /// Normalizes `x` (`[..., channels]`), updating running stats in train mode.
    pub fn apply(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(self.gamma.clone());
        let beta = g.constant(self.beta.clone());
        let (y, update) = g.batchnorm(xv, gamma, beta, &self.running, self.config, self.mode)?;
        if let Some(stats) = update {
            self.running = stats;
        }
        Ok(g.value(y).clone())
    }
}

/// Per-channel population mean and variance, accumulated in f64.
fn channel_stats<T: Real>(x: &[T], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / channels;
    let mut mean = vec![0.0f64; channels];
    for row in x.chunks(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0f64; channels];
    for row in x.chunks(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (mean, var)
}

impl<T: Real> Graph<T> {
    /// Batch normalization of `x` over its last axis.
    ///
    /// Returns the output and, in train mode, the updated running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        config: BatchNormConfig,
        mode: Mode,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        self.batchnorm_impl(x, gamma, beta, running, config, mode, false)
    }

    /// [`Graph::batchnorm`] followed by ReLU, as one node.
    pub fn batchnorm_relu(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        config: BatchNormConfig,
        mode: Mode,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        self.batchnorm_impl(x, gamma, beta, running, config, mode, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        config: BatchNormConfig,
        mode: Mode,
        relu: bool,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let channels = *shape.last().unwrap();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{what} {:?} for input {shape:?}", self.shape(v)),
                ));
            }
        }
        if running.mean.shape() != [channels] || running.var.shape() != [channels] {
            return Err(Error::shape(
                "batchnorm",
                format!("running stats for {channels} channels"),
            ));
        }
        let rows = self.value(x).len() / channels;
        let eps = config.epsilon;

        let (mean, var, update) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::BatchTooSmall(rows));
                }
                let (mean, var) = channel_stats(self.value(x).data(), channels);
                let mom = config.momentum;
                let blend = |old: &Tensor<T>, new: &[f64]| {
                    let data = old
                        .data()
                        .iter()
                        .zip(new)
                        .map(|(&o, &n)| T::of((1.0 - mom) * o.as_f64() + mom * n))
                        .collect();
                    Tensor::new(vec![channels], data).unwrap()
                };
                let update = RunningStats {
                    mean: blend(&running.mean, &mean),
                    var: blend(&running.var, &var),
                };
                (mean, var, Some(update))
            }
            Mode::Eval => {
                let mean = running.mean.data().iter().map(|v| v.as_f64()).collect();
                let var = running.var.data().iter().map(|v| v.as_f64()).collect();
                (mean, var, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean: Vec<T> = mean.into_iter().map(T::of).collect();

        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(channels) {
            for c in 0..channels {
                let y = (row[c] - mean[c]) * inv_std[c] * gm[c] + bt[c];
                out.push(if relu && y < T::zero() { T::zero() } else { y });
            }
        }
        let out = Tensor::new(shape, out)?;

        let train = mode == Mode::Train;
        let y = self.record(
            if relu { "batchnorm_relu" } else { "batchnorm" },
            out,
            vec![x, gamma, beta],
            Box::new(move |ctx| {
                let (x, gm, y) = (
                    ctx.inputs[0].data(),
                    ctx.inputs[1].data(),
                    ctx.output.data(),
                );
                let g = ctx.grad.data();
                let xr: Vec<&[T]> = x.chunks(channels).collect();
                let yr: Vec<&[T]> = y.chunks(channels).collect();
                let gr: Vec<&[T]> = g.chunks(channels).collect();
                // upstream gradient with the ReLU mask folded in
                let masked = |gv: T, yv: T| {
                    if !relu || yv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                };
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for ((xrow, yrow), grow) in xr.iter().zip(&yr).zip(&gr) {
                    for c in 0..channels {
                        let gv = masked(grow[c], yrow[c]);
                        dbeta[c] += gv;
                        dgamma[c] += gv * (xrow[c] - mean[c]) * inv_std[c];
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    // dx = inv_std / R * (R * dxh - sum(dxh) - xh * sum(dxh * xh)), dxh = g * gamma
                    let r = T::of(rows as f64);
                    let a: Vec<T> = (0..channels).map(|c| inv_std[c] * gm[c]).collect();
                    let (b, k): (Vec<T>, Vec<T>) = if train {
                        (0..channels)
                            .map(|c| {
                                (
                                    inv_std[c] / r * dbeta[c] * gm[c],
                                    inv_std[c] * inv_std[c] / r * dgamma[c] * gm[c],
                                )
                            })
                            .unzip()
                    } else {
                        (vec![T::zero(); channels], vec![T::zero(); channels])
                    };
                    for (((drow, xrow), yrow), grow) in
                        dx.chunks_mut(channels).zip(&xr).zip(&yr).zip(&gr)
                    {
                        for c in 0..channels {
                            drow[c] =
                                a[c] * masked(grow[c], yrow[c]) - b[c] - (xrow[c] - mean[c]) * k[c];
                        }
                    }
                    Tensor::new(ctx.inputs[0].shape().to_vec(), dx).unwrap()
                });
                vec![
                    dx,
                    ctx.needs[1].then(|| Tensor::new(vec![channels], dgamma.clone()).unwrap()),
                    ctx.needs[2].then(|| Tensor::new(vec![channels], dbeta.clone()).unwrap()),
                ]
            }),
        )?;
        Ok((y, update))
    }

    /// Batchnorm whose affine parameters and running statistics live in the
    /// store under `prefix`. Train-mode statistic updates are queued on the
    /// graph; see [`Graph::take_running_updates`].
    pub fn batchnorm_layer(
        &mut self,
        store: &crate::params::ParameterStore<T>,
        prefix: &str,
        x: Var,
        config: BatchNormConfig,
        mode: Mode,
    ) -> Result<Var> {
        self.store_batchnorm(store, prefix, x, config, mode, false)
    }

    /// [`Graph::batchnorm_layer`] followed by ReLU.
    pub fn batchnorm_relu_layer(
        &mut self,
        store: &crate::params::ParameterStore<T>,
        prefix: &str,
        x: Var,
        config: BatchNormConfig,
        mode: Mode,
    ) -> Result<Var> {
        self.store_batchnorm(store, prefix, x, config, mode, true)
    }

    fn store_batchnorm(
        &mut self,
        store: &crate::params::ParameterStore<T>,
        prefix: &str,
        x: Var,
        config: BatchNormConfig,
        mode: Mode,
        relu: bool,
    ) -> Result<Var> {
        let gamma = self.param(store, &format!("{prefix}.gamma"))?;
        let beta = self.param(store, &format!("{prefix}.beta"))?;
        let running = RunningStats {
            mean: store.value(&format!("{prefix}.running_mean"))?.clone(),
            var: store.value(&format!("{prefix}.running_var"))?.clone(),
        };
        let (y, update) = self.batchnorm_impl(x, gamma, beta, &running, config, mode, relu)?;
        if let Some(stats) = update {
            self.push_running_update(RunningUpdate {
                prefix: prefix.to_string(),
                stats,
            });
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_identity_configuration() {
        let mut bn = BatchNormState::<f64>::new(2, BatchNormConfig::default());
        bn.mode = Mode::Eval;
        let x = Tensor::from_f64([3, 2], &[0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap();
        let y = bn.apply(&x).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-15);
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn train_mode_two_rows() {
        let mut bn = BatchNormState::<f64>::new(
            1,
            BatchNormConfig {
                momentum: 0.1,
                epsilon: 1e-12,
            },
        );
        let x = Tensor::from_f64([2, 1], &[1.0, 3.0]).unwrap();
        let y = bn.apply(&x).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
        // running stats moved 10% toward (mean 2, var 1)
        assert!((bn.running.mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((bn.running.var.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn beta_shifts_output() {
        let mut bn = BatchNormState::<f64>::new(1, BatchNormConfig::default());
        let x = Tensor::from_f64([2, 1], &[1.0, 3.0]).unwrap();
        let base = bn.apply(&x).unwrap();
        bn.beta = Tensor::from_f64([1], &[5.0]).unwrap();
        let shifted = bn.apply(&x).unwrap();
        for (a, b) in shifted.data().iter().zip(base.data()) {
            assert!((a - b - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_train_fails() {
        let mut bn = BatchNormState::<f64>::new(3, BatchNormConfig::default());
        let x = Tensor::from_f64([1, 3], &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(bn.apply(&x), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn train_output_is_standardized() {
        let mut bn = BatchNormState::<f64>::new(3, BatchNormConfig::default());
        let vals: Vec<f64> = (0..60)
            .map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.3 + (i % 3) as f64)
            .collect();
        let x = Tensor::from_f64([20, 3], &vals).unwrap();
        let y = bn.apply(&x).unwrap();
        let (mean, var) = channel_stats(y.data(), 3);
        for c in 0..3 {
            assert!(mean[c].abs() <= 1e-10);
            let (_, raw_var) = channel_stats(x.data(), 3);
            let expected = raw_var[c] / (raw_var[c] + 1e-5);
            assert!((var[c] - expected).abs() < 1e-12);
            assert!((var[c] - 1.0).abs() < 1e-4);
        }
    }
}
