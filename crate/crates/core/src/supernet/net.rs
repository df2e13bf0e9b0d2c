use std::fmt;

use crate::blocks::{
    Builder, DualPathDown, DualPathDownDef, Ffn, FfnDef, Head, HeadDef, Mapper, Materializer, Mhsa, MhsaDef,
    MhsaGeometry, PlainDown, PlainDownDef, Remap, Stem, StemDef,
};
use crate::error::{Error, Result};
use crate::tensor::{Element, Mode, Tape, Tensor, Var, Weights};

use super::space::{is_attention_stage, SearchSpace, SubnetConfig, STAGES};

/// Block family used to key latency entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    Stem,
    PlainDown,
    DualPathDown,
    Ffn,
    Mhsa,
    StrideAttn,
    Head,
}

impl BlockKind {
    pub const ALL: [BlockKind; 7] = [
        BlockKind::Stem,
        BlockKind::PlainDown,
        BlockKind::DualPathDown,
        BlockKind::Ffn,
        BlockKind::Mhsa,
        BlockKind::StrideAttn,
        BlockKind::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Stem => "stem",
            BlockKind::PlainDown => "plain_down",
            BlockKind::DualPathDown => "dual_path_down",
            BlockKind::Ffn => "ffn",
            BlockKind::Mhsa => "mhsa",
            BlockKind::StrideAttn => "stride_attn",
            BlockKind::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Shape descriptor of one executed block.
///
/// `stage` is 0 for the stem, 1..=4 for blocks of (or entering) a stage and 5
/// for the head. `resolution` is the input side length. `expansion` is the
/// FFN ratio, the input width of a downsample, the pooling stride of an
/// attention block, the class count of the head and 0 for the stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub kind: BlockKind,
    pub stage: usize,
    pub resolution: usize,
    pub width: usize,
    pub expansion: usize,
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(stage={}, res={}, width={}, expansion={})",
            self.kind.name(),
            self.stage,
            self.resolution,
            self.width,
            self.expansion
        )
    }
}

/// A resolved block of an executable network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Stem(Stem),
    PlainDown(PlainDown),
    DualPathDown(DualPathDown),
    Mhsa(Mhsa),
    Ffn(Ffn),
    Head(Head),
}

impl Layer {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        match self {
            Layer::Stem(l) => l.forward(tape, w, x),
            Layer::PlainDown(l) => l.forward(tape, w, x),
            Layer::DualPathDown(l) => l.forward(tape, w, x),
            Layer::Mhsa(l) => l.forward(tape, w, x),
            Layer::Ffn(l) => l.forward(tape, w, x),
            Layer::Head(l) => l.forward(tape, w, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Stem(l) => l.param_count(),
            Layer::PlainDown(l) => l.param_count(),
            Layer::DualPathDown(l) => l.param_count(),
            Layer::Mhsa(l) => l.param_count(),
            Layer::Ffn(l) => l.param_count(),
            Layer::Head(l) => l.param_count(),
        }
    }
}

impl Remap for Layer {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(match self {
            Layer::Stem(l) => Layer::Stem(l.remap(m)?),
            Layer::PlainDown(l) => Layer::PlainDown(l.remap(m)?),
            Layer::DualPathDown(l) => Layer::DualPathDown(l.remap(m)?),
            Layer::Mhsa(l) => Layer::Mhsa(l.remap(m)?),
            Layer::Ffn(l) => Layer::Ffn(l.remap(m)?),
            Layer::Head(l) => Layer::Head(l.remap(m)?),
        })
    }
}

/// One layer of a network together with its descriptor and input shape
/// (batch 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Placed {
    pub key: BlockKey,
    /// Index of the residual sub-block within the maximal network.
    pub residual: Option<usize>,
    pub input: [usize; 4],
    pub layer: Layer,
}

/// A resolved chain of layers ending in classifier logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Placed>,
}

impl Network {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, p| p.layer.forward(tape, w, h))
    }

    /// Eval-mode logits.
    pub fn logits<T: Element>(&self, w: &Weights<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(Mode::Eval);
        let xv = tape.input(x.clone())?;
        let out = self.forward(&mut tape, w, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Learnable scalars read by the network.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|p| p.layer.param_count()).sum()
    }

    pub fn keys(&self) -> Vec<BlockKey> {
        self.layers.iter().map(|p| p.key).collect()
    }
}

impl Remap for Network {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(Network {
            layers: self
                .layers
                .iter()
                .map(|p| {
                    Ok(Placed {
                        layer: p.layer.remap(m)?,
                        ..p.clone()
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DownDef {
    Plain(PlainDownDef),
    DualPath(DualPathDownDef),
}

/// Block `i` of a stage: an optional attention sub-block followed by an FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDef {
    pub mhsa: Option<MhsaDef>,
    pub ffn: FfnDef,
}

/// Weight-shared elastic network.
#[derive(Debug, Clone)]
pub struct Supernet<T: Element = f32> {
    pub space: SearchSpace,
    pub stem: StemDef,
    /// Module entering stage `j + 1`.
    pub downs: Vec<DownDef>,
    pub stages: Vec<Vec<BlockDef>>,
    pub head: HeadDef,
    pub weights: Weights<T>,
}

impl<T: Element> Supernet<T> {
    pub fn build(space: &SearchSpace, seed: u64) -> Result<Self> {
        space.validate()?;
        let mut weights = Weights::new();
        let mut b = Builder::new(&mut weights, seed);
        let stem = StemDef::build(&mut b, "stem", &space.widths[0])?;
        let mut downs = Vec::with_capacity(STAGES - 1);
        let mut stages = Vec::with_capacity(STAGES);
        for j in 0..STAGES {
            if j > 0 {
                let name = format!("down{}", j + 1);
                let (cin, cout) = (&space.widths[j - 1], &space.widths[j]);
                let res = space.stage_resolution(j - 1);
                downs.push(if space.dual_path_into(j) {
                    DownDef::DualPath(DualPathDownDef::build(
                        &mut b,
                        &name,
                        cin,
                        cout,
                        space.heads[j],
                        space.key_dim,
                        res,
                        res,
                    )?)
                } else {
                    DownDef::Plain(PlainDownDef::build(&mut b, &name, cin, cout)?)
                });
            }
            let res = space.stage_resolution(j);
            let mut blocks = Vec::with_capacity(space.depths[j]);
            for i in 0..space.depths[j] {
                let name = format!("s{}.b{i}", j + 1);
                let mhsa = if is_attention_stage(j) {
                    let geom = MhsaGeometry::new(space.heads[j], space.key_dim, res, res).with_stride(space.attn_stride[j]);
                    Some(MhsaDef::build(
                        &mut b,
                        &format!("{name}.mhsa"),
                        &space.widths[j],
                        geom,
                        space.layer_scale,
                    )?)
                } else {
                    None
                };
                let ffn = FfnDef::build(
                    &mut b,
                    &format!("{name}.ffn"),
                    &space.widths[j],
                    &space.expansions,
                    space.layer_scale,
                )?;
                blocks.push(BlockDef { mhsa, ffn });
            }
            stages.push(blocks);
        }
        let head = HeadDef::build(&mut b, "head", &space.widths[STAGES - 1], space.classes)?;
        Ok(Supernet {
            space: space.clone(),
            stem,
            downs,
            stages,
            head,
            weights,
        })
    }

    /// Resolve the executable network of `cfg`.
    pub fn resolve(&self, cfg: &SubnetConfig, drop_path_rate: f64) -> Result<Network> {
        cfg.validate(&self.space)?;
        if !(0.0..1.0).contains(&drop_path_rate) {
            return Err(Error::config(format!("drop path rate {drop_path_rate} outside [0, 1)")));
        }
        let s = &self.space;
        let mut layers = Vec::new();
        let r0 = s.resolution;
        layers.push(Placed {
            key: BlockKey {
                kind: BlockKind::Stem,
                stage: 0,
                resolution: r0,
                width: cfg.widths[0],
                expansion: 0,
            },
            residual: None,
            input: [1, 3, r0, r0],
            layer: Layer::Stem(self.stem.resolve(cfg.widths[0])?),
        });
        let mut k = 0;
        for j in 0..STAGES {
            let c = cfg.widths[j];
            let res = s.stage_resolution(j);
            if j > 0 {
                let (cin, rin) = (cfg.widths[j - 1], s.stage_resolution(j - 1));
                let (kind, layer) = match &self.downs[j - 1] {
                    DownDef::Plain(d) => (BlockKind::PlainDown, Layer::PlainDown(d.resolve(cin, c)?)),
                    DownDef::DualPath(d) => (BlockKind::DualPathDown, Layer::DualPathDown(d.resolve(cin, c)?)),
                };
                layers.push(Placed {
                    key: BlockKey {
                        kind,
                        stage: j + 1,
                        resolution: rin,
                        width: c,
                        expansion: cin,
                    },
                    residual: None,
                    input: [1, cin, rin, rin],
                    layer,
                });
            }
            for (i, block) in self.stages[j].iter().enumerate() {
                if let Some(def) = &block.mhsa {
                    if i < cfg.depths[j] && cfg.mhsa[j][i] {
                        let mut m = def.resolve(c)?;
                        m.keep = s.keep_prob(k, drop_path_rate);
                        let stride = def.geom.stride;
                        layers.push(Placed {
                            key: BlockKey {
                                kind: if stride > 1 { BlockKind::StrideAttn } else { BlockKind::Mhsa },
                                stage: j + 1,
                                resolution: res,
                                width: c,
                                expansion: stride,
                            },
                            residual: Some(k),
                            input: [1, c, res, res],
                            layer: Layer::Mhsa(m),
                        });
                    }
                    k += 1;
                }
                if i < cfg.depths[j] {
                    let e = cfg.expansions[j][i];
                    let mut f = block.ffn.resolve(c, e)?;
                    f.keep = s.keep_prob(k, drop_path_rate);
                    layers.push(Placed {
                        key: BlockKey {
                            kind: BlockKind::Ffn,
                            stage: j + 1,
                            resolution: res,
                            width: c,
                            expansion: e,
                        },
                        residual: Some(k),
                        input: [1, c, res, res],
                        layer: Layer::Ffn(f),
                    });
                }
                k += 1;
            }
        }
        let c = cfg.widths[STAGES - 1];
        let res = s.stage_resolution(STAGES - 1);
        layers.push(Placed {
            key: BlockKey {
                kind: BlockKind::Head,
                stage: STAGES + 1,
                resolution: res,
                width: c,
                expansion: s.classes,
            },
            residual: None,
            input: [1, c, res, res],
            layer: Layer::Head(self.head.resolve(c)?),
        });
        Ok(Network { layers })
    }

    /// Record the forward pass of `cfg` on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, cfg: &SubnetConfig, x: Var, drop_path_rate: f64) -> Result<Var> {
        self.resolve(cfg, drop_path_rate)?.forward(tape, &self.weights, x)
    }

    /// Eval-mode logits of `cfg`.
    pub fn logits(&self, cfg: &SubnetConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.resolve(cfg, 0.0)?.logits(&self.weights, x)
    }

    /// Copy the weights and normalization state used by `cfg` into a
    /// standalone network.
    pub fn extract(&self, cfg: &SubnetConfig) -> Result<Subnet<T>> {
        let plan = self.resolve(cfg, 0.0)?;
        let mut m = Materializer::new(&self.weights);
        let network = plan.remap(&mut m)?;
        Ok(Subnet {
            space: self.space.clone(),
            cfg: cfg.clone(),
            network,
            weights: m.dst,
        })
    }

    /// Every block of the supernet resolved at every width and expansion
    /// choice it supports, each with its input shape.
    pub fn variants(&self) -> Result<Vec<Placed>> {
        let s = &self.space;
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        let mut push = |out: &mut Vec<Placed>, cfg: &SubnetConfig| -> Result<()> {
            for p in self.resolve(cfg, 0.0)?.layers {
                if seen.insert(p.key) {
                    out.push(p);
                }
            }
            Ok(())
        };
        // Varying one stage width, its predecessor and the expansion of every
        // block away from the max config reaches every key.
        for j in 0..STAGES {
            for &c in &s.widths[j] {
                let prev: Vec<usize> = if j > 0 { s.widths[j - 1].clone() } else { vec![s.widths[0][0]] };
                for &cp in &prev {
                    for &e in &s.expansions {
                        let mut cfg = s.max_config();
                        cfg.widths[j] = c;
                        if j > 0 {
                            cfg.widths[j - 1] = cp;
                        }
                        for es in cfg.expansions.iter_mut() {
                            es.iter_mut().for_each(|x| *x = e);
                        }
                        push(&mut out, &cfg)?;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Standalone network materialized from a supernet.
#[derive(Debug, Clone)]
pub struct Subnet<T: Element = f32> {
    pub space: SearchSpace,
    pub cfg: SubnetConfig,
    pub network: Network,
    pub weights: Weights<T>,
}

impl<T: Element> Subnet<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.network.forward(tape, &self.weights, x)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.network.logits(&self.weights, x)
    }

    /// Set the drop-path keep probabilities of the residual sub-blocks as
    /// they would be in the supernet at `rate`.
    pub fn set_drop_path(&mut self, rate: f64) {
        for p in &mut self.network.layers {
            let Some(k) = p.residual else { continue };
            let keep = self.space.keep_prob(k, rate);
            match &mut p.layer {
                Layer::Mhsa(m) => m.keep = keep,
                Layer::Ffn(f) => f.keep = keep,
                _ => {}
            }
        }
    }
}
