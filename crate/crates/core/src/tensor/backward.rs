//! Reverse pass over a recorded [`Tape`].

use crate::error::{Error, Result};

use super::kernels;
use super::param::ParamStore;
use super::tape::{permute_tensor, Op, Tape, Var, GELU_C, GELU_CUBIC};
use super::{Element, Tensor};

impl<T: Element> Tape<T> {
    /// Propagate d(loss)/d(node) to every node and accumulate parameter
    /// gradients into `params`. Parameters not reached keep their previous
    /// gradient (or none).
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::config("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dout, &mut grads, params)?;
            grads[i] = Some(dout);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("non-finite gradient at tape node {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        dout: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut ParamStore<T>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if params.get(*id).value.shape() != node.value.shape() {
                    return Err(Error::State(format!(
                        "parameter {} changed shape since the forward pass",
                        params.get(*id).name
                    )));
                }
                params.accumulate_grad(*id, dout);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dout,
                    b.is_some(),
                );
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, db);
                }
            }
            Op::Matmul { a, b, pairs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for (o, &(ia, ib)) in pairs.iter().enumerate() {
                    let g = &dout[o * m * n..(o + 1) * m * n];
                    // dA += dOut · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        n as isize,
                        1,
                        &bv[ib * k * n..(ib + 1) * k * n],
                        1,
                        n as isize,
                        T::one(),
                        &mut da[ia * m * k..(ia + 1) * m * k],
                        k as isize,
                        1,
                    );
                    // dB += Aᵀ · dOut
                    T::gemm(
                        k,
                        m,
                        n,
                        &av[ia * m * k..(ia + 1) * m * k],
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        &mut db[ib * k * n..(ib + 1) * k * n],
                        n as isize,
                        1,
                    );
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::TransposeLast2 { x } => {
                let rank = node.value.shape().len();
                let mut perm: Vec<usize> = (0..rank).collect();
                perm.swap(rank - 2, rank - 1);
                let g = Tensor::new(node.value.shape(), dout.to_vec())?;
                self.acc(grads, *x, permute_tensor(&g, &perm)?.into_data());
            }
            Op::Softmax { x } => {
                let row = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); dout.len()];
                for ((y, g), d) in out.chunks(row).zip(dout.chunks(row)).zip(dx.chunks_mut(row)) {
                    let dot = y.iter().zip(g).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..row {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = node.value.shape();
                let (batch, c) = (s[0], s[1]);
                let plane: usize = s[2..].iter().product();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for j in off..off + plane {
                            dgamma[ch] = dgamma[ch] + dout[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + dout[j];
                        }
                    }
                }
                let mut dx = vec![T::zero(); dout.len()];
                let n = T::of((batch * plane) as f64);
                for ch in 0..c {
                    let k = gv[ch] * inv_std[ch];
                    for b in 0..batch {
                        let off = (b * c + ch) * plane;
                        for j in off..off + plane {
                            dx[j] = if *train {
                                k * (dout[j] - (dbeta[ch] + xhat[j] * dgamma[ch]) / n)
                            } else {
                                k * dout[j]
                            };
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::AvgPool { x, fh, fw } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h / fh, w / fw);
                let inv = T::of(1.0 / (fh * fw) as f64);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for p in 0..xs[0] * xs[1] {
                    for iy in 0..h {
                        for ix in 0..w {
                            dx[(p * h + iy) * w + ix] = dout[(p * ho + iy / fh) * wo + ix / fw] * inv;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::NearestUp { x, fh, fw } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h * fh, w * fw);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for p in 0..xs[0] * xs[1] {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let d = &mut dx[(p * h + oy / fh) * w + ox / fw];
                            *d = *d + dout[(p * ho + oy) * wo + ox];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, dout.to_vec());
                let period = self.value(*b).numel();
                let mut db = vec![T::zero(); period];
                for chunk in dout.chunks(period) {
                    for (d, &g) in db.iter_mut().zip(chunk) {
                        *d = *d + g;
                    }
                }
                self.acc(grads, *b, db);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, dout.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                self.acc(grads, *b, dout.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::ScaleChannels { x, s } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let plane: usize = xs[2..].iter().product();
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                let mut ds = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                for j in 0..xv.len() {
                    let ch = j / plane % c;
                    dx[j] = dout[j] * sv[ch];
                    ds[ch] = ds[ch] + dout[j] * xv[j];
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *s, ds);
            }
            Op::Gelu { x } => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_CUBIC));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&v, &g)| {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        g * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Reshape { x } => self.acc(grads, *x, dout.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let g = Tensor::new(node.value.shape(), dout.to_vec())?;
                self.acc(grads, *x, permute_tensor(&g, &inverse)?.into_data());
            }
            Op::Narrow { x, dim, start } => {
                let xs = self.shape(*x);
                let len = node.value.shape()[*dim];
                let outer: usize = xs[..*dim].iter().product();
                let inner: usize = xs[dim + 1..].iter().product();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    dx[(o * xs[*dim] + start) * inner..][..len * inner]
                        .copy_from_slice(&dout[o * len * inner..][..len * inner]);
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat { xs, dim } => {
                let s = node.value.shape();
                let outer: usize = s[..*dim].iter().product();
                let inner: usize = s[dim + 1..].iter().product();
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*dim];
                    let mut dv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        dv.extend_from_slice(&dout[(o * s[*dim] + offset) * inner..][..len * inner]);
                    }
                    offset += len;
                    self.acc(grads, v, dv);
                }
            }
            Op::MeanSpatial { x } => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let inv = T::of(1.0 / plane as f64);
                let dx = (0..self.value(*x).numel()).map(|j| dout[j / plane] * inv).collect();
                self.acc(grads, *x, dx);
            }
            Op::SampleScale { x, factors } => {
                let per = dout.len() / factors.len();
                let dx = dout.iter().enumerate().map(|(j, &g)| g * factors[j / per]).collect();
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = dout[0] / T::of(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    dx[b * k + l] = dx[b * k + l] - scale;
                }
                self.acc(grads, *logits, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![dout[0]; n]);
            }
            Op::Scale { x, c } => {
                self.acc(grads, *x, dout.iter().map(|&g| g * *c).collect());
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }
}
