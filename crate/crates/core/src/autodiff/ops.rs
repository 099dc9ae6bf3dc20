use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Stable lexicographic order of the `cols`-wide rows of `data`.
pub(crate) fn sorted_row_order<T: Real>(data: &[T], cols: usize) -> Vec<usize> {
    let row = |i: usize| &data[i * cols..(i + 1) * cols];
    let mut idx: Vec<usize> = (0..data.len() / cols).collect();
    idx.sort_by(|&p, &q| {
        row(p)
            .iter()
            .zip(row(q))
            .map(|(a, b)| a.as_f64().total_cmp(&b.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

impl<T: Real> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = self.value(a).matmul(self.value(b))?;
        self.record(
            "matmul",
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let ga = ctx.needs[0].then(|| {
                    let mut out = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, w, true, &mut out, false);
                    Tensor::new(vec![m, k], out).unwrap()
                });
                let gb = ctx.needs[1].then(|| {
                    let mut out = vec![T::zero(); k * n];
                    gemm(k, m, n, x, true, g, false, &mut out, false);
                    Tensor::new(vec![k, n], out).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape, in
    /// which case it is broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let chunk = self.value(b).len();
        let mut value = self.value(a).clone();
        for block in value.data_mut().chunks_mut(chunk) {
            for (x, &y) in block.iter_mut().zip(self.value(b).data()) {
                *x += y;
            }
        }
        self.record(
            "add",
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let ga = ctx.needs[0].then(|| ctx.grad.clone());
                let gb = ctx.needs[1].then(|| {
                    let mut acc = vec![T::zero(); chunk];
                    for block in ctx.grad.data().chunks(chunk) {
                        for (s, &g) in acc.iter_mut().zip(block) {
                            *s += g;
                        }
                    }
                    Tensor::new(sb.clone(), acc).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record(
            "mul",
            value,
            vec![a, b],
            Box::new(|ctx| {
                let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                vec![
                    ctx.needs[0].then(|| zip_map(g, y, |g, y| g * y)),
                    ctx.needs[1].then(|| zip_map(g, x, |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = T::of(factor);
        let value = self.value(x).map(|v| v * c);
        self.record(
            "scale",
            value,
            vec![x],
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * c))]),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(
            "relu",
            value,
            vec![x],
            Box::new(|ctx| {
                vec![Some(zip_map(ctx.grad, ctx.inputs[0], |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.record(
            "tanh",
            value,
            vec![x],
            Box::new(|ctx| {
                vec![Some(zip_map(ctx.grad, ctx.output, |g, y| {
                    g * (T::one() - y * y)
                }))]
            }),
        )
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        let two = T::of(2.0);
        self.record(
            "square",
            value,
            vec![x],
            Box::new(move |ctx| vec![Some(zip_map(ctx.grad, ctx.inputs[0], |g, x| two * g * x))]),
        )
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.sqrt());
        let two = T::of(2.0);
        self.record(
            "sqrt",
            value,
            vec![x],
            Box::new(move |ctx| {
                vec![Some(zip_map(ctx.grad, ctx.output, |g, y| {
                    if y > T::zero() {
                        g / (two * y)
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.record(
            "softmax",
            value,
            vec![x],
            Box::new(move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), dx).unwrap())]
            }),
        )
    }

    /// Maximum along `axis`, which is removed from the shape. The gradient goes
    /// to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("max_axis", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            let base = o * len * inner;
            let (res, idx) = (
                &mut out[o * inner..(o + 1) * inner],
                &mut arg[o * inner..(o + 1) * inner],
            );
            res.copy_from_slice(&src[base..base + inner]);
            for a in 1..len {
                let row = &src[base + a * inner..base + (a + 1) * inner];
                for i in 0..inner {
                    if row[i] > res[i] {
                        res[i] = row[i];
                        idx[i] = a;
                    }
                }
            }
        }
        let value = Tensor::new(drop_axis(&shape, axis), out)?;
        self.record(
            "max_axis",
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let a = arg[o * inner + i];
                        dx[(o * len + a) * inner + i] = g[o * inner + i];
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (s, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        let value = Tensor::new(drop_axis(&shape, axis), out)?;
        self.record(
            "sum_axis",
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        dx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            value,
            vec![x],
            Box::new(move |ctx| vec![Some(Tensor::full(shape.clone(), ctx.grad.data()[0]))]),
        )
    }

    /// Mean over every element, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = T::of(self.value(x).len() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.record(
            "mean",
            value,
            vec![x],
            Box::new(move |ctx| vec![Some(Tensor::full(shape.clone(), ctx.grad.data()[0] / n))]),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::shape("concat", "no inputs"))?,
            )
            .to_vec();
        check_axis("concat", &first, axis)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{first:?} vs {s:?} along axis {axis}"),
                ));
            }
            widths.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape.clone(), out)?;
        self.record(
            "concat",
            value,
            parts.to_vec(),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (k, &w) in widths.iter().enumerate() {
                    if ctx.needs[k] {
                        let mut part = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&g[start..start + w * inner]);
                        }
                        let mut s = shape.clone();
                        s[axis] = w;
                        res.push(Some(Tensor::new(s, part).unwrap()));
                    } else {
                        res.push(None);
                    }
                    offset += w;
                }
                res
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.record(
            "reshape",
            value,
            vec![x],
            Box::new(move |ctx| vec![Some(ctx.grad.clone().reshape(old.clone()).unwrap())]),
        )
    }

    /// Repeats each leading-axis row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::shape("repeat_rows", "zero repetitions"));
        }
        let shape = self.shape(x).to_vec();
        let (rows, cols) = self.value(x).rows_cols();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape[0] = rows * times;
        let value = Tensor::new(new_shape, out)?;
        self.record(
            "repeat_rows",
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for t in 0..times {
                        let src = &g[(r * times + t) * cols..(r * times + t + 1) * cols];
                        for (d, &v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    /// Capsule squash over the last axis: `v = s * |s| / (1 + |s|^2)`.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        let value = {
            let mut out = self.value(x).clone();
            for v in out.data_mut().chunks_mut(dim) {
                squash_in_place(v);
            }
            out
        };
        self.record(
            "squash",
            value,
            vec![x],
            Box::new(move |ctx| {
                let (s, g) = (ctx.inputs[0].data(), ctx.grad.data());
                let mut dx = vec![T::zero(); s.len()];
                for ((sv, gv), dv) in s.chunks(dim).zip(g.chunks(dim)).zip(dx.chunks_mut(dim)) {
                    let n2: T = sv.iter().map(|&a| a * a).sum();
                    if n2 == T::zero() {
                        continue;
                    }
                    let n = n2.sqrt();
                    let denom = T::one() + n2;
                    let f = n / denom;
                    // f'(n) / n
                    let fp = (T::one() - n2) / (denom * denom * n);
                    let gs: T = sv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
                    for ((d, &a), &b) in dv.iter_mut().zip(sv).zip(gv) {
                        *d = f * b + fp * gs * a;
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    /// Sorts the rows of every batch item of `x` (`[B, R, C]`) lexicographically,
    /// so later reductions over rows see the same order for any permutation of
    /// the input. Equal rows keep their relative order.
    pub fn sort_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(
                "sort_rows",
                format!("expected [B, R, C], got {shape:?}"),
            ));
        }
        let (b, r, c) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let mut order = Vec::with_capacity(b * r);
        let mut out = Vec::with_capacity(src.len());
        for bb in 0..b {
            let item = &src[bb * r * c..(bb + 1) * r * c];
            let idx = sorted_row_order(item, c);
            for &i in &idx {
                out.extend_from_slice(&item[i * c..(i + 1) * c]);
            }
            order.extend(idx.into_iter().map(|i| bb * r + i));
        }
        let value = Tensor::new(shape.clone(), out)?;
        self.record(
            "sort_rows",
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); g.len()];
                for (dst, &srow) in order.iter().enumerate() {
                    dx[srow * c..(srow + 1) * c].copy_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    /// Coupling-weighted prediction sum of dynamic routing.
    ///
    /// `couplings` is `[B, I, J]`, `predictions` is `[B, I, J, D]`; the result
    /// `s[b, j, :] = sum_i c[b, i, j] * u[b, i, j, :]` has shape `[B, J, D]`.
    pub fn route_sum(&mut self, couplings: Var, predictions: Var) -> Result<Var> {
        let (sc, su) = (
            self.shape(couplings).to_vec(),
            self.shape(predictions).to_vec(),
        );
        if sc.len() != 3 || su.len() != 4 || su[..3] != sc[..] {
            return Err(Error::shape("route_sum", format!("{sc:?} with {su:?}")));
        }
        let (b, ni, nj, nd) = (su[0], su[1], su[2], su[3]);
        let (c, u) = (self.value(couplings).data(), self.value(predictions).data());
        let mut out = vec![T::zero(); b * nj * nd];
        for bb in 0..b {
            let s = &mut out[bb * nj * nd..(bb + 1) * nj * nd];
            for i in 0..ni {
                for j in 0..nj {
                    let cij = c[(bb * ni + i) * nj + j];
                    let row = &u[((bb * ni + i) * nj + j) * nd..((bb * ni + i) * nj + j + 1) * nd];
                    for (acc, &uv) in s[j * nd..(j + 1) * nd].iter_mut().zip(row) {
                        *acc += cij * uv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, nj, nd], out)?;
        self.record(
            "route_sum",
            value,
            vec![couplings, predictions],
            Box::new(move |ctx| {
                let (c, u, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gc = ctx.needs[0].then(|| vec![T::zero(); c.len()]);
                let mut gu = ctx.needs[1].then(|| vec![T::zero(); u.len()]);
                for bb in 0..b {
                    for i in 0..ni {
                        for j in 0..nj {
                            let ci = (bb * ni + i) * nj + j;
                            let urow = &u[ci * nd..(ci + 1) * nd];
                            let grow = &g[(bb * nj + j) * nd..(bb * nj + j + 1) * nd];
                            if let Some(gc) = gc.as_mut() {
                                gc[ci] = urow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            }
                            if let Some(gu) = gu.as_mut() {
                                for (d, &gv) in gu[ci * nd..(ci + 1) * nd].iter_mut().zip(grow) {
                                    *d = c[ci] * gv;
                                }
                            }
                        }
                    }
                }
                vec![
                    gc.map(|v| Tensor::new(vec![b, ni, nj], v).unwrap()),
                    gu.map(|v| Tensor::new(vec![b, ni, nj, nd], v).unwrap()),
                ]
            }),
        )
    }

    /// Routing agreement `a[b, i, j] = <u[b, i, j, :], v[b, j, :]>`.
    pub fn route_agree(&mut self, predictions: Var, outputs: Var) -> Result<Var> {
        let (su, sv) = (
            self.shape(predictions).to_vec(),
            self.shape(outputs).to_vec(),
        );
        if su.len() != 4 || sv.len() != 3 || su[0] != sv[0] || su[2..] != sv[1..] {
            return Err(Error::shape("route_agree", format!("{su:?} with {sv:?}")));
        }
        let (b, ni, nj, nd) = (su[0], su[1], su[2], su[3]);
        let (u, v) = (self.value(predictions).data(), self.value(outputs).data());
        let mut out = vec![T::zero(); b * ni * nj];
        for bb in 0..b {
            for i in 0..ni {
                for j in 0..nj {
                    let ci = (bb * ni + i) * nj + j;
                    let vrow = &v[(bb * nj + j) * nd..(bb * nj + j + 1) * nd];
                    out[ci] = u[ci * nd..(ci + 1) * nd]
                        .iter()
                        .zip(vrow)
                        .map(|(&a, &b)| a * b)
                        .sum();
                }
            }
        }
        let value = Tensor::new(vec![b, ni, nj], out)?;
        self.record(
            "route_agree",
            value,
            vec![predictions, outputs],
            Box::new(move |ctx| {
                let (u, v, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gu = ctx.needs[0].then(|| vec![T::zero(); u.len()]);
                let mut gv = ctx.needs[1].then(|| vec![T::zero(); v.len()]);
                for bb in 0..b {
                    for i in 0..ni {
                        for j in 0..nj {
                            let ci = (bb * ni + i) * nj + j;
                            let vo = (bb * nj + j) * nd;
                            if let Some(gu) = gu.as_mut() {
                                for (d, &vv) in
                                    gu[ci * nd..(ci + 1) * nd].iter_mut().zip(&v[vo..vo + nd])
                                {
                                    *d = g[ci] * vv;
                                }
                            }
                            if let Some(gv) = gv.as_mut() {
                                for (d, &uv) in
                                    gv[vo..vo + nd].iter_mut().zip(&u[ci * nd..(ci + 1) * nd])
                                {
                                    *d += g[ci] * uv;
                                }
                            }
                        }
                    }
                }
                vec![
                    gu.map(|x| Tensor::new(vec![b, ni, nj, nd], x).unwrap()),
                    gv.map(|x| Tensor::new(vec![b, nj, nd], x).unwrap()),
                ]
            }),
        )
    }

    /// Mean softmax cross entropy of `logits` rows `[R, P]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{shape:?} with {} labels", labels.len()),
            ));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: bad,
                len: classes,
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp() / total;
            }
            loss += total.ln() + max - row[labels[r]];
        }
        let n = T::of(rows as f64);
        let labels = labels.to_vec();
        self.record(
            "cross_entropy",
            Tensor::scalar(loss / n),
            vec![logits],
            Box::new(move |ctx| {
                let scale = ctx.grad.data()[0] / n;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * classes + l] -= T::one();
                }
                dx.iter_mut().for_each(|d| *d *= scale);
                vec![Some(Tensor::new(vec![rows, classes], dx).unwrap())]
            }),
        )
    }
}

/// Squash of a single vector; the zero vector maps to zero.
pub fn squash_in_place<T: Real>(v: &mut [T]) {
    let n2: T = v.iter().map(|&a| a * a).sum();
    if n2 == T::zero() {
        return;
    }
    let f = n2.sqrt() / (T::one() + n2);
    v.iter_mut().for_each(|a| *a *= f);
}
