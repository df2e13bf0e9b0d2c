use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, ParamId, Tape, Var, Weights};

use super::{check_channels, Builder, ConvDef, ConvNorm, ConvSpec, Init, Mapper, Remap, Slice, PROJ_INIT_STD};

/// Two stride-2 3x3 convolutions taking RGB input to `C1` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StemDef {
    pub conv1: ConvDef,
    pub conv2: ConvDef,
    pub widths: Vec<usize>,
}

impl StemDef {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, widths: &[usize]) -> Result<Self> {
        let c = *widths
            .iter()
            .max()
            .ok_or_else(|| Error::config("stem: empty width choices"))?;
        Ok(StemDef {
            conv1: b.conv(&format!("{name}.conv1"), ConvSpec::dense3(3, c, 2, Activation::Gelu), widths)?,
            conv2: b.conv(&format!("{name}.conv2"), ConvSpec::dense3(c, c, 2, Activation::Gelu), widths)?,
            widths: widths.to_vec(),
        })
    }

    pub fn resolve(&self, c: usize) -> Result<Stem> {
        if !self.widths.contains(&c) {
            return Err(Error::config(format!("stem width {c} not among choices {:?}", self.widths)));
        }
        Ok(Stem {
            conv1: self.conv1.resolve(3, c)?,
            conv2: self.conv2.resolve(c, c)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
}

impl Stem {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        check_channels("stem", &s, 3)?;
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::config(format!("stem needs extents divisible by 4, got {s:?}")));
        }
        let y = self.conv1.forward(tape, w, x)?;
        self.conv2.forward(tape, w, y)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }
}

impl Remap for Stem {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(Stem {
            conv1: self.conv1.remap(m)?,
            conv2: self.conv2.remap(m)?,
        })
    }
}

/// Global average pooling followed by a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDef {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
    pub widths: Vec<usize>,
}

impl HeadDef {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, widths: &[usize], classes: usize) -> Result<Self> {
        let c = *widths
            .iter()
            .max()
            .ok_or_else(|| Error::config("head: empty width choices"))?;
        if classes < 2 {
            return Err(Error::config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        Ok(HeadDef {
            weight: b.param(&format!("{name}.weight"), &[classes, c, 1, 1], Init::TruncNormal(PROJ_INIT_STD))?,
            bias: b.param(&format!("{name}.bias"), &[classes], Init::Const(0.0))?,
            classes,
            widths: widths.to_vec(),
        })
    }

    pub fn resolve(&self, c: usize) -> Result<Head> {
        if !self.widths.contains(&c) {
            return Err(Error::config(format!("head width {c} not among choices {:?}", self.widths)));
        }
        Ok(Head {
            weight: Slice {
                id: self.weight,
                extents: vec![self.classes, c, 1, 1],
            },
            bias: Slice {
                id: self.bias,
                extents: vec![self.classes],
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Slice,
    pub bias: Slice,
}

impl Head {
    pub fn classes(&self) -> usize {
        self.weight.extents[0]
    }

    /// `[B, C, H, W]` features to `[B, K]` logits.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        check_channels("head", tape.shape(x), self.weight.extents[1])?;
        let b = tape.shape(x)[0];
        let c = tape.shape(x)[1];
        let pooled = tape.mean_spatial(x)?;
        let pooled = tape.reshape(pooled, &[b, c, 1, 1])?;
        let wv = self.weight.load(tape, w)?;
        let bv = self.bias.load(tape, w)?;
        let logits = tape.conv2d(pooled, wv, Some(bv), 1, 0, 1)?;
        tape.reshape(logits, &[b, self.classes()])
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

impl Remap for Head {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(Head {
            weight: m.slice(&self.weight)?,
            bias: m.slice(&self.bias)?,
        })
    }
}
