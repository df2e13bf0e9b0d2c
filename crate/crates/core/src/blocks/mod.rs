//! Hybrid convolution/attention building blocks.
//!
//! Every block comes in two forms. A *definition* (`*Def`) owns parameter
//! handles allocated at maximal extents together with one normalization set
//! per output width it may run at. [`resolve`](FfnDef::resolve)-ing a
//! definition at concrete widths yields a *resolved* block whose weights are
//! leading-slice views ([`Slice`]) of the shared tensors; only resolved blocks
//! have a forward pass. A fixed-size layer is simply a definition whose only
//! width choice is its size.

mod attention;
mod downsample;
mod ffn;
mod stem;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, ParamId, StatsId, Tape, Tensor, Var, Weights};

pub use attention::{attention_core, AttnTrace, Mhsa, MhsaDef, MhsaGeometry};
pub use downsample::{DualPathDown, DualPathDownDef, PlainDown, PlainDownDef};
pub use ffn::{Ffn, FfnDef};
pub use stem::{Head, HeadDef, Stem, StemDef};

/// Std of the truncated normal used for pointwise projections.
pub const PROJ_INIT_STD: f64 = 0.02;

/// Leading block `extents` of a stored parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub id: ParamId,
    pub extents: Vec<usize>,
}

impl Slice {
    pub fn load<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>) -> Result<Var> {
        let v = tape.param(&w.params, self.id)?;
        tape.prefix(v, &self.extents)
    }

    pub fn numel(&self) -> usize {
        self.extents.iter().product()
    }
}

/// Affine parameters and running statistics of one normalization set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl Norm {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        let g = tape.param(&w.params, self.gamma)?;
        let b = tape.param(&w.params, self.beta)?;
        tape.batch_norm(x, g, b, &w.stats, self.stats)
    }
}

/// Rewrites every parameter and statistics handle of a resolved block.
///
/// Used to materialize a resolved block into a fresh [`Weights`] holding
/// exact-size copies.
pub trait Remap: Sized {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self>;
}

pub trait Mapper {
    fn slice(&mut self, s: &Slice) -> Result<Slice>;
    fn norm(&mut self, n: &Norm) -> Result<Norm>;
}

/// Copies every visited slice and norm set out of `src` into `dst`.
pub struct Materializer<'a, T: Element> {
    pub src: &'a Weights<T>,
    pub dst: Weights<T>,
}

impl<'a, T: Element> Materializer<'a, T> {
    pub fn new(src: &'a Weights<T>) -> Self {
        Materializer {
            src,
            dst: Weights::new(),
        }
    }
}

impl<T: Element> Mapper for Materializer<'_, T> {
    fn slice(&mut self, s: &Slice) -> Result<Slice> {
        let p = self.src.params.get(s.id);
        let value = p.value.prefix(&s.extents)?;
        let id = self.dst.params.add(p.name.clone(), value)?;
        Ok(Slice {
            id,
            extents: s.extents.clone(),
        })
    }

    fn norm(&mut self, n: &Norm) -> Result<Norm> {
        let g = self.src.params.get(n.gamma);
        let b = self.src.params.get(n.beta);
        let rs = self.src.stats.get(n.stats);
        let gamma = self.dst.params.add(g.name.clone(), g.value.clone())?;
        let beta = self.dst.params.add(b.name.clone(), b.value.clone())?;
        let stats = self.dst.stats.add(rs.name.clone(), rs.mean.len())?;
        let dst = self.dst.stats.get_mut(stats);
        dst.mean.copy_from_slice(&rs.mean);
        dst.var.copy_from_slice(&rs.var);
        Ok(Norm { gamma, beta, stats })
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    FanIn,
    /// Normal with the given std, truncated at two standard deviations.
    TruncNormal(f64),
    Const(f64),
    Identity,
}

/// Allocates named parameters and statistics with seeded initialization.
pub struct Builder<'a, T: Element> {
    pub weights: &'a mut Weights<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(weights: &'a mut Weights<T>, seed: u64) -> Self {
        Builder {
            weights,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; numel],
            Init::Identity => {
                if shape.len() != 2 || shape[0] != shape[1] {
                    return Err(Error::config(format!("identity init needs a square shape, got {shape:?}")));
                }
                let n = shape[0];
                (0..numel).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
            }
            Init::FanIn => {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("positive std");
                (0..numel).map(|_| normal.sample(&mut self.rng)).collect()
            }
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                (0..numel)
                    .map(|_| loop {
                        let z: f64 = normal.sample(&mut self.rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        self.weights.params.add(name, Tensor::from_f64(shape, &data)?)
    }

    /// One normalization set over `channels` channels.
    pub fn norm(&mut self, name: &str, channels: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.param(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?,
            beta: self.param(&format!("{name}.beta"), &[channels], Init::Const(0.0))?,
            stats: self.weights.stats.add(format!("{name}.stats"), channels)?,
        })
    }

    /// Allocate a convolution at maximal extents with one norm set per entry
    /// of `norm_widths` (none when empty).
    pub fn conv(&mut self, name: &str, spec: ConvSpec, norm_widths: &[usize]) -> Result<ConvDef> {
        let cin_per_group = if spec.depthwise { 1 } else { spec.in_max };
        let shape = [spec.out_max, cin_per_group, spec.kernel, spec.kernel];
        let init = if spec.kernel == 1 {
            Init::TruncNormal(PROJ_INIT_STD)
        } else {
            Init::FanIn
        };
        let weight = self.param(&format!("{name}.weight"), &shape, init)?;
        let bias = if spec.bias {
            Some(self.param(&format!("{name}.bias"), &[spec.out_max], Init::Const(0.0))?)
        } else {
            None
        };
        let mut norms = BTreeMap::new();
        for &c in norm_widths {
            if c == 0 || c > spec.out_max {
                return Err(Error::config(format!("{name}: norm width {c} outside 1..={}", spec.out_max)));
            }
            if !norms.contains_key(&c) {
                norms.insert(c, self.norm(&format!("{name}.norm{c}"), c)?);
            }
        }
        Ok(ConvDef { spec, weight, bias, norms })
    }
}

/// Static description of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_max: usize,
    pub out_max: usize,
    pub kernel: usize,
    pub stride: usize,
    pub depthwise: bool,
    pub bias: bool,
    pub act: Activation,
}

impl ConvSpec {
    pub fn pointwise(in_max: usize, out_max: usize, act: Activation) -> Self {
        ConvSpec {
            in_max,
            out_max,
            kernel: 1,
            stride: 1,
            depthwise: false,
            bias: true,
            act,
        }
    }

    pub fn dense3(in_max: usize, out_max: usize, stride: usize, act: Activation) -> Self {
        ConvSpec {
            in_max,
            out_max,
            kernel: 3,
            stride,
            depthwise: false,
            bias: true,
            act,
        }
    }

    pub fn depthwise3(channels: usize, stride: usize, act: Activation) -> Self {
        ConvSpec {
            in_max: channels,
            out_max: channels,
            kernel: 3,
            stride,
            depthwise: true,
            bias: true,
            act,
        }
    }
}

/// Switchable convolution: shared weight plus per-output-width norm sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDef {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub norms: BTreeMap<usize, Norm>,
}

impl ConvDef {
    /// Resolve at `cout` output and `cin` input channels (equal for depthwise).
    pub fn resolve(&self, cin: usize, cout: usize) -> Result<ConvNorm> {
        let s = &self.spec;
        if cin == 0 || cout == 0 || cin > s.in_max || cout > s.out_max || (s.depthwise && cin != cout) {
            return Err(Error::config(format!(
                "conv resolved at {cin}->{cout} outside its {}->{} extents",
                s.in_max, s.out_max
            )));
        }
        let norm = if self.norms.is_empty() {
            None
        } else {
            Some(*self.norms.get(&cout).ok_or_else(|| {
                Error::config(format!(
                    "width {cout} is not a choice of this layer (choices {:?})",
                    self.norms.keys().collect::<Vec<_>>()
                ))
            })?)
        };
        let (cin_per_group, groups) = if s.depthwise { (1, cout) } else { (cin, 1) };
        Ok(ConvNorm {
            weight: Slice {
                id: self.weight,
                extents: vec![cout, cin_per_group, s.kernel, s.kernel],
            },
            bias: self.bias.map(|id| Slice { id, extents: vec![cout] }),
            norm,
            stride: s.stride,
            padding: s.kernel / 2,
            groups,
            act: s.act,
        })
    }

    pub fn norm_widths(&self) -> Vec<usize> {
        self.norms.keys().copied().collect()
    }
}

/// Convolution, optional normalization, activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNorm {
    pub weight: Slice,
    pub bias: Option<Slice>,
    pub norm: Option<Norm>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub act: Activation,
}

impl ConvNorm {
    pub fn out_channels(&self) -> usize {
        self.weight.extents[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.extents[1] * self.groups
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        let wv = self.weight.load(tape, w)?;
        let bv = match &self.bias {
            Some(b) => Some(b.load(tape, w)?),
            None => None,
        };
        let mut y = tape.conv2d(x, wv, bv, self.stride, self.padding, self.groups)?;
        if let Some(n) = &self.norm {
            y = n.forward(tape, w, y)?;
        }
        tape.activation(y, self.act)
    }

    /// Learnable scalars read by this layer, norm included.
    pub fn param_count(&self) -> usize {
        let norm = if self.norm.is_some() { 2 * self.out_channels() } else { 0 };
        self.weight.numel() + self.bias.as_ref().map_or(0, Slice::numel) + norm
    }
}

impl Remap for ConvNorm {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(ConvNorm {
            weight: m.slice(&self.weight)?,
            bias: self.bias.as_ref().map(|b| m.slice(b)).transpose()?,
            norm: self.norm.as_ref().map(|n| m.norm(n)).transpose()?,
            ..self.clone()
        })
    }
}

/// `x + drop_path(scale * branch)` with per-channel layer scale.
pub fn residual<T: Element>(
    tape: &mut Tape<T>,
    w: &Weights<T>,
    x: Var,
    branch: Var,
    scale: &Slice,
    keep: f64,
) -> Result<Var> {
    let s = scale.load(tape, w)?;
    let scaled = tape.scale_channels(branch, s)?;
    let kept = tape.drop_path(scaled, keep)?;
    tape.add(x, kept)
}

pub(crate) fn check_channels(what: &str, got: &[usize], expected: usize) -> Result<()> {
    if got.len() != 4 || got[1] != expected {
        return Err(Error::config(format!("{what} expects [B, {expected}, H, W], got {got:?}")));
    }
    Ok(())
}
