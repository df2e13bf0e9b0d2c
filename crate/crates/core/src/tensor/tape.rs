use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore, StatsId, StatsStore};
use super::{strides, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

/// `sqrt(2 / pi)` as used by the tanh GELU approximation.
pub(crate) const GELU_C: f64 = 0.7978845608;
pub(crate) const GELU_CUBIC: f64 = 0.044715;

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Matmul {
        a: Var,
        b: Var,
        /// (lhs batch index, rhs batch index) for every output batch entry.
        pairs: Vec<(usize, usize)>,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2 {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    AvgPool {
        x: Var,
        fh: usize,
        fw: usize,
    },
    NearestUp {
        x: Var,
        fh: usize,
        fw: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        dim: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        dim: usize,
    },
    MeanSpatial {
        x: Var,
    },
    SampleScale {
        x: Var,
        factors: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

pub(crate) struct StatUpdate<T> {
    pub(crate) id: StatsId,
    pub(crate) mean: Vec<T>,
    pub(crate) var: Vec<T>,
}

/// Ordered record of executed ops, replayed in reverse by [`Tape::backward`].
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) grads: Vec<Option<Vec<T>>>,
    pending_stats: Vec<StatUpdate<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    momentum: f64,
    eps: f64,
}

impl<T: Element> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// Tape whose stochastic ops (drop path) draw from a stream seeded by `seed`.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            pending_stats: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite output from {} (shape {:?})",
                op_name(&op),
                value.shape()
            )));
        }
        let needs_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients are not tracked through it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, &[])
    }

    /// Leaf whose gradient is retained (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        let v = self.push(value, Op::Leaf, &[])?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::config(format!("conv2d expects 4-d input and weight, got {xs:?} and {ws:?}")));
        }
        if groups == 0 || stride == 0 {
            return Err(Error::config("conv2d stride and groups must be positive"));
        }
        let (cin, cout) = (xs[1], ws[0]);
        if cin % groups != 0 || cout % groups != 0 || ws[1] * groups != cin {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input {xs:?}, weight {ws:?}, groups {groups}"
            )));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(Error::config(format!("conv2d kernel {ws:?} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::config(format!("conv2d bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: cin,
            height: xs[2],
            width: xs[3],
            out_channels: cout,
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
            groups,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = [geom.batch, cout, geom.out_height(), geom.out_width()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Matrix product over the last two dims, broadcasting leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::config("matmul operands need at least two dims"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::config(format!("matmul inner dims differ: {sa:?} x {sb:?}")));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::config(format!("matmul batch dims not broadcastable: {sa:?} x {sb:?}")));
            }
            batch.push(x.max(y));
        }
        let total: usize = batch.iter().product();
        let (sta, stb) = (strides(&pa), strides(&pb));
        let bstr = strides(&batch);
        let mut pairs = Vec::with_capacity(total);
        for flat in 0..total {
            let (mut ia, mut ib) = (0, 0);
            for d in 0..rank {
                let i = flat / bstr[d] % batch[d];
                if pa[d] != 1 {
                    ia += i * sta[d];
                }
                if pb[d] != 1 {
                    ib += i * stb[d];
                }
            }
            pairs.push((ia, ib));
        }
        let mut out = vec![T::zero(); total * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for (o, &(ia, ib)) in pairs.iter().enumerate() {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[ia * m * k..(ia + 1) * m * k],
                    k as isize,
                    1,
                    &db[ib * k * n..(ib + 1) * k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[o * m * n..(o + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        self.push(Tensor::new(&shape, out)?, Op::Matmul { a, b, pairs, m, k, n }, &[a, b])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::config("transpose needs at least two dims"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        let value = permute_tensor(self.value(x), &perm)?;
        self.push(value, Op::TransposeLast2 { x }, &[x])
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let row = *t.shape().last().unwrap();
        let out = kernels::softmax_rows(t.data(), row);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x }, &[x])
    }

    /// Batch normalization over every dim except the channel dim 1.
    ///
    /// In train mode the batch statistics are queued and applied to `stats`
    /// by [`Tape::commit_stats`]; eval mode reads the running values.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &StatsStore<T>,
        stats_id: StatsId,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::config(format!("batch_norm expects [B, C, ...], got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::config(format!(
                "batch_norm parameters {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let running = stats.get(stats_id);
        if running.mean.len() != c {
            return Err(Error::config(format!(
                "running statistics {} hold {} channels, input has {c}",
                running.name,
                running.mean.len()
            )));
        }
        let batch = xs[0];
        let plane: usize = xs[2..].iter().product();
        let count = batch * plane;
        let train = self.mode == Mode::Train;
        if train && count < 2 {
            return Err(Error::config(format!(
                "batch_norm in train mode needs at least 2 values per channel, got {count}"
            )));
        }
        let eps = T::of(self.eps);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let n = T::of(count as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..batch {
                    for &v in &xv[(b * c + ch) * plane..][..plane] {
                        s = s + v;
                    }
                }
                let mu = s / n;
                let mut q = T::zero();
                for b in 0..batch {
                    for &v in &xv[(b * c + ch) * plane..][..plane] {
                        q = q + (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = q / n;
            }
        } else {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        if train {
            let unbias = T::of(count as f64 / (count as f64 - 1.0));
            self.pending_stats.push(StatUpdate {
                id: stats_id,
                mean,
                var: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        self.push(
            Tensor::new(&xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    /// Fold queued train-mode batch statistics into the running buffers.
    pub fn commit_stats(&mut self, stats: &mut StatsStore<T>) {
        let m = T::of(self.momentum);
        for up in self.pending_stats.drain(..) {
            let rs = stats.get_mut(up.id);
            for (r, &v) in rs.mean.iter_mut().zip(&up.mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, &v) in rs.var.iter_mut().zip(&up.var) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }

    /// Non-overlapping average pooling with an `fh x fw` window.
    pub fn avg_pool(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || fh == 0 || fw == 0 || s[2] % fh != 0 || s[3] % fw != 0 {
            return Err(Error::config(format!("avg_pool {fh}x{fw} does not tile {s:?}")));
        }
        let (ho, wo) = (s[2] / fh, s[3] / fw);
        let xv = self.value(x).data();
        let inv = T::of(1.0 / (fh * fw) as f64);
        let mut out = vec![T::zero(); s[0] * s[1] * ho * wo];
        for p in 0..s[0] * s[1] {
            let src = &xv[p * s[2] * s[3]..][..s[2] * s[3]];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..fh {
                        for dx in 0..fw {
                            acc = acc + src[(oy * fh + dy) * s[3] + ox * fw + dx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        self.push(
            Tensor::new(&[s[0], s[1], ho, wo], out)?,
            Op::AvgPool { x, fh, fw },
            &[x],
        )
    }

    /// Nearest-neighbour upsampling: every pixel becomes an `fh x fw` block.
    pub fn nearest_up(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || fh == 0 || fw == 0 {
            return Err(Error::config(format!("nearest_up {fh}x{fw} invalid for {s:?}")));
        }
        let (ho, wo) = (s[2] * fh, s[3] * fw);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * ho * wo];
        for p in 0..s[0] * s[1] {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(p * ho + oy) * wo + ox] = xv[(p * s[2] + oy / fh) * s[3] + ox / fw];
                }
            }
        }
        self.push(
            Tensor::new(&[s[0], s[1], ho, wo], out)?,
            Op::NearestUp { x, fh, fw },
            &[x],
        )
    }

    /// `a + b` where `b`'s shape equals `a`'s or is a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::config(format!("add: {sb:?} does not broadcast onto {sa:?}")));
        }
        let bv = self.value(b).data();
        let period = bv.len();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % period])
            .collect();
        self.push(Tensor::new(&sa, out)?, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::config(format!("mul: shapes {sa:?} and {:?} differ", self.shape(b))));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(Tensor::new(&sa, out)?, Op::Mul { a, b }, &[a, b])
    }

    /// Multiply channel `c` (dim 1) of `x` by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(s) != [xs[1]] {
            return Err(Error::config(format!(
                "scale_channels: vector {:?} does not match channels of {xs:?}",
                self.shape(s)
            )));
        }
        let plane: usize = xs[2..].iter().product();
        let c = xs[1];
        let sv = self.value(s).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / plane % c])
            .collect();
        self.push(Tensor::new(&xs, out)?, Op::ScaleChannels { x, s }, &[x, s])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, k) = (T::of(GELU_C), T::of(GELU_CUBIC));
        let half = T::of(0.5);
        let t = self.value(x);
        let out: Vec<T> = t
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<T> = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Relu { x }, &[x])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Identity => Ok(x),
            Activation::Relu => self.relu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = permute_tensor(self.value(x), perm)?;
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Entries `start..start+len` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if dim >= s.len() || len == 0 || start + len > s[dim] {
            return Err(Error::config(format!("narrow({dim}, {start}, {len}) out of range for {s:?}")));
        }
        if start == 0 && len == s[dim] {
            return Ok(x);
        }
        let outer: usize = s[..dim].iter().product();
        let inner: usize = s[dim + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * s[dim] + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[dim] = len;
        self.push(Tensor::new(&shape, out)?, Op::Narrow { x, dim, start }, &[x])
    }

    /// Leading block `extents` of `x` (the weight slicing of switchable layers).
    pub fn prefix(&mut self, x: Var, extents: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if extents.len() != s.len() {
            return Err(Error::config(format!("prefix {extents:?} rank differs from {s:?}")));
        }
        let mut v = x;
        for (d, &e) in extents.iter().enumerate() {
            v = self.narrow(v, d, 0, e)?;
        }
        Ok(v)
    }

    pub fn concat(&mut self, xs: &[Var], dim: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if dim >= first.len() {
            return Err(Error::config("concat dim out of range"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != dim && e != first[d])
            {
                return Err(Error::config(format!("concat: {s:?} incompatible with {first:?}")));
            }
            total += s[dim];
        }
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[dim];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = first;
        shape[dim] = total;
        self.push(Tensor::new(&shape, out)?, Op::Concat { xs: xs.to_vec(), dim }, xs)
    }

    /// Global average over spatial dims: `[B, C, H, W] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::config(format!("mean_spatial expects 4-d input, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let inv = T::of(1.0 / plane as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        self.push(Tensor::new(&[s[0], s[1]], out)?, Op::MeanSpatial { x }, &[x])
    }

    /// Multiply sample `b` (dim 0) of `x` by the constant `factors[b]`.
    pub fn sample_scale(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if factors.len() != s[0] {
            return Err(Error::config("sample_scale needs one factor per sample"));
        }
        let per = self.value(x).numel() / s[0];
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / per])
            .collect();
        self.push(Tensor::new(&s, out)?, Op::SampleScale { x, factors }, &[x])
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::config(format!(
                "cross_entropy expects [B, K] logits with B labels, got {s:?} and {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::config(format!("label {bad} outside {} classes", s[1])));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), s[1]);
        let mut loss = T::zero();
        for (b, &l) in labels.iter().enumerate() {
            loss = loss - probs[b * s[1] + l].max(T::min_positive_value()).ln();
        }
        loss = loss / T::of(s[0] as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let t = self.value(x);
        let out: Vec<T> = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Scale { x, c }, &[x])
    }

    /// Stochastic depth: each sample keeps the branch with probability `keep`
    /// (scaled by `1 / keep`) or zeroes it. Identity outside train mode.
    pub fn drop_path(&mut self, branch: Var, keep: f64) -> Result<Var> {
        if self.mode != Mode::Train || keep >= 1.0 {
            return Ok(branch);
        }
        if keep <= 0.0 {
            return Err(Error::config("drop path keep probability must be positive"));
        }
        let batch = self.shape(branch)[0];
        let factors: Vec<T> = (0..batch)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    T::of(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect();
        self.sample_scale(branch, factors)
    }
}

pub(crate) fn permute_tensor<T: Element>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = t.shape();
    let mut seen = vec![false; s.len()];
    if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::config(format!("invalid permutation {perm:?} for {s:?}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let src_strides = strides(s);
    let gather: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel = t.numel();
    let data = t.data();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; s.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            off += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::Matmul { .. } => "matmul",
        Op::TransposeLast2 { .. } => "transpose",
        Op::Softmax { .. } => "softmax",
        Op::BatchNorm { .. } => "batch_norm",
        Op::AvgPool { .. } => "avg_pool",
        Op::NearestUp { .. } => "nearest_up",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::Gelu { .. } => "gelu",
        Op::Relu { .. } => "relu",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::MeanSpatial { .. } => "mean_spatial",
        Op::SampleScale { .. } => "sample_scale",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum { .. } => "sum",
        Op::Scale { .. } => "scale",
    }
}
