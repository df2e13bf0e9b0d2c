use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, Tape, Var, Weights};

use super::{check_channels, residual, Builder, ConvDef, ConvNorm, ConvSpec, Init, Mapper, Remap, Slice};

/// Switchable feed-forward block with an embedded depthwise convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnDef {
    pub expand: ConvDef,
    pub dw: ConvDef,
    pub project: ConvDef,
    pub scale: crate::tensor::ParamId,
    pub widths: Vec<usize>,
    pub expansions: Vec<usize>,
}

impl FfnDef {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        widths: &[usize],
        expansions: &[usize],
        layer_scale: f64,
    ) -> Result<Self> {
        let (c_max, e_max) = match (widths.iter().max(), expansions.iter().max()) {
            (Some(&c), Some(&e)) => (c, e),
            _ => return Err(Error::config(format!("{name}: empty width or expansion choices"))),
        };
        let mut hidden: Vec<usize> = widths.iter().flat_map(|c| expansions.iter().map(move |e| c * e)).collect();
        hidden.sort_unstable();
        hidden.dedup();
        let h_max = c_max * e_max;
        Ok(FfnDef {
            expand: b.conv(&format!("{name}.expand"), ConvSpec::pointwise(c_max, h_max, Activation::Gelu), &hidden)?,
            dw: b.conv(&format!("{name}.dw"), ConvSpec::depthwise3(h_max, 1, Activation::Gelu), &hidden)?,
            project: b.conv(
                &format!("{name}.project"),
                ConvSpec::pointwise(h_max, c_max, Activation::Identity),
                widths,
            )?,
            scale: b.param(&format!("{name}.scale"), &[c_max], Init::Const(layer_scale))?,
            widths: widths.to_vec(),
            expansions: expansions.to_vec(),
        })
    }

    pub fn resolve(&self, c: usize, e: usize) -> Result<Ffn> {
        if !self.widths.contains(&c) || !self.expansions.contains(&e) {
            return Err(Error::config(format!(
                "ffn width {c} / expansion {e} not among choices {:?} / {:?}",
                self.widths, self.expansions
            )));
        }
        let h = c * e;
        Ok(Ffn {
            expand: self.expand.resolve(c, h)?,
            dw: self.dw.resolve(h, h)?,
            project: self.project.resolve(h, c)?,
            scale: Slice {
                id: self.scale,
                extents: vec![c],
            },
            keep: 1.0,
        })
    }
}

/// `x + S * project(dw(expand(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub expand: ConvNorm,
    pub dw: ConvNorm,
    pub project: ConvNorm,
    pub scale: Slice,
    /// Drop-path keep probability of the residual branch.
    pub keep: f64,
}

impl Ffn {
    pub fn channels(&self) -> usize {
        self.project.out_channels()
    }

    pub fn hidden(&self) -> usize {
        self.expand.out_channels()
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        check_channels("ffn", tape.shape(x), self.channels())?;
        let h = self.expand.forward(tape, w, x)?;
        let h = self.dw.forward(tape, w, h)?;
        let h = self.project.forward(tape, w, h)?;
        residual(tape, w, x, h, &self.scale, self.keep)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.dw.param_count() + self.project.param_count() + self.scale.numel()
    }
}

impl Remap for Ffn {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(Ffn {
            expand: self.expand.remap(m)?,
            dw: self.dw.remap(m)?,
            project: self.project.remap(m)?,
            scale: m.slice(&self.scale)?,
            keep: self.keep,
        })
    }
}
