use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, ParamId, Tape, Var, Weights};

use super::attention::{attention_core, from_tokens, to_tokens, to_tokens_t, AttnTrace};
use super::{check_channels, Builder, ConvDef, ConvNorm, ConvSpec, Init, Mapper, Norm, Remap, Slice, PROJ_INIT_STD};

fn check_even(what: &str, shape: &[usize]) -> Result<()> {
    if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(Error::config(format!("{what} needs even spatial extents, got {shape:?}")));
    }
    Ok(())
}

fn max_of(name: &str, xs: &[usize]) -> Result<usize> {
    xs.iter()
        .copied()
        .max()
        .ok_or_else(|| Error::config(format!("{name}: empty width choices")))
}

fn check_choice(what: &str, c: usize, choices: &[usize]) -> Result<()> {
    if !choices.contains(&c) {
        return Err(Error::config(format!("{what} width {c} not among choices {choices:?}")));
    }
    Ok(())
}

/// Strided 3x3 convolution with normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainDownDef {
    pub conv: ConvDef,
    pub in_widths: Vec<usize>,
    pub out_widths: Vec<usize>,
}

impl PlainDownDef {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, in_widths: &[usize], out_widths: &[usize]) -> Result<Self> {
        let spec = ConvSpec::dense3(max_of(name, in_widths)?, max_of(name, out_widths)?, 2, Activation::Identity);
        Ok(PlainDownDef {
            conv: b.conv(&format!("{name}.conv"), spec, out_widths)?,
            in_widths: in_widths.to_vec(),
            out_widths: out_widths.to_vec(),
        })
    }

    pub fn resolve(&self, cin: usize, cout: usize) -> Result<PlainDown> {
        check_choice("downsample input", cin, &self.in_widths)?;
        check_choice("downsample output", cout, &self.out_widths)?;
        Ok(PlainDown {
            conv: self.conv.resolve(cin, cout)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlainDown {
    pub conv: ConvNorm,
}

impl PlainDown {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        check_channels("downsample", tape.shape(x), self.conv.in_channels())?;
        check_even("downsample", tape.shape(x))?;
        self.conv.forward(tape, w, x)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

impl Remap for PlainDown {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(PlainDown {
            conv: self.conv.remap(m)?,
        })
    }
}

/// Resolution-halving block: a strided convolution plus an attention path
/// whose queries come from pooled and depthwise-strided features while keys
/// and values stay at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPathDownDef {
    pub heads: usize,
    pub key_dim: usize,
    pub height: usize,
    pub width: usize,
    pub q_dw: ConvDef,
    pub q_proj_pool: ParamId,
    pub q_proj_dw: ParamId,
    pub q_bias: ParamId,
    pub q_norm: Norm,
    pub kv: ConvDef,
    pub bias: ParamId,
    pub proj: ConvDef,
    pub conv: ConvDef,
    pub in_widths: Vec<usize>,
    pub out_widths: Vec<usize>,
}

impl DualPathDownDef {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_widths: &[usize],
        out_widths: &[usize],
        heads: usize,
        key_dim: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height % 2 != 0 || width % 2 != 0 || heads == 0 || key_dim == 0 {
            return Err(Error::config(format!(
                "{name}: dual-path downsampling needs even extents and positive heads, got {height}x{width}, h={heads}, d={key_dim}"
            )));
        }
        let (cin, cout) = (max_of(name, in_widths)?, max_of(name, out_widths)?);
        let hd = heads * key_dim;
        let n = height * width;
        Ok(DualPathDownDef {
            heads,
            key_dim,
            height,
            width,
            q_dw: b.conv(&format!("{name}.q_dw"), ConvSpec::depthwise3(cin, 2, Activation::Identity), in_widths)?,
            q_proj_pool: b.param(&format!("{name}.q_proj_pool"), &[hd, cin, 1, 1], Init::TruncNormal(PROJ_INIT_STD))?,
            q_proj_dw: b.param(&format!("{name}.q_proj_dw"), &[hd, cin, 1, 1], Init::TruncNormal(PROJ_INIT_STD))?,
            q_bias: b.param(&format!("{name}.q_bias"), &[hd], Init::Const(0.0))?,
            q_norm: b.norm(&format!("{name}.q_norm"), hd)?,
            kv: b.conv(
                &format!("{name}.kv"),
                ConvSpec::pointwise(cin, 2 * hd, Activation::Identity),
                &[2 * hd],
            )?,
            bias: b.param(&format!("{name}.attn_bias"), &[heads, n / 4, n], Init::Const(0.0))?,
            proj: b.conv(
                &format!("{name}.proj"),
                ConvSpec::pointwise(hd, cout, Activation::Identity),
                out_widths,
            )?,
            conv: b.conv(&format!("{name}.conv"), ConvSpec::dense3(cin, cout, 2, Activation::Identity), out_widths)?,
            in_widths: in_widths.to_vec(),
            out_widths: out_widths.to_vec(),
        })
    }

    pub fn resolve(&self, cin: usize, cout: usize) -> Result<DualPathDown> {
        check_choice("dual-path input", cin, &self.in_widths)?;
        check_choice("dual-path output", cout, &self.out_widths)?;
        let hd = self.heads * self.key_dim;
        let n = self.height * self.width;
        Ok(DualPathDown {
            heads: self.heads,
            key_dim: self.key_dim,
            height: self.height,
            width: self.width,
            q_dw: self.q_dw.resolve(cin, cin)?,
            q_proj_pool: Slice {
                id: self.q_proj_pool,
                extents: vec![hd, cin, 1, 1],
            },
            q_proj_dw: Slice {
                id: self.q_proj_dw,
                extents: vec![hd, cin, 1, 1],
            },
            q_bias: Slice {
                id: self.q_bias,
                extents: vec![hd],
            },
            q_norm: self.q_norm,
            kv: self.kv.resolve(cin, 2 * hd)?,
            bias: Slice {
                id: self.bias,
                extents: vec![self.heads, n / 4, n],
            },
            proj: self.proj.resolve(hd, cout)?,
            conv: self.conv.resolve(cin, cout)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualPathDown {
    pub heads: usize,
    pub key_dim: usize,
    pub height: usize,
    pub width: usize,
    pub q_dw: ConvNorm,
    pub q_proj_pool: Slice,
    pub q_proj_dw: Slice,
    pub q_bias: Slice,
    pub q_norm: Norm,
    pub kv: ConvNorm,
    pub bias: Slice,
    pub proj: ConvNorm,
    pub conv: ConvNorm,
}

impl DualPathDown {
    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    /// Strided convolution path alone.
    pub fn conv_path<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        self.conv.forward(tape, w, x)
    }

    /// Attention path alone, with its trace.
    pub fn attention_path<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<(Var, AttnTrace)> {
        let (h2, w2) = (self.height / 2, self.width / 2);
        let pooled = tape.avg_pool(x, 2, 2)?;
        let local = self.q_dw.forward(tape, w, x)?;
        let q_in = tape.concat(&[pooled, local], 1)?;
        let wp = self.q_proj_pool.load(tape, w)?;
        let wd = self.q_proj_dw.load(tape, w)?;
        let wq = tape.concat(&[wp, wd], 1)?;
        let bq = self.q_bias.load(tape, w)?;
        let q = tape.conv2d(q_in, wq, Some(bq), 1, 0, 1)?;
        let q = self.q_norm.forward(tape, w, q)?;

        let hd = self.heads * self.key_dim;
        let kv = self.kv.forward(tape, w, x)?;
        let k = tape.narrow(kv, 1, 0, hd)?;
        let v = tape.narrow(kv, 1, hd, hd)?;

        let q = to_tokens(tape, q, self.heads)?;
        let k_t = to_tokens_t(tape, k, self.heads)?;
        let v = to_tokens(tape, v, self.heads)?;
        let bias = self.bias.load(tape, w)?;
        let trace = attention_core(tape, q, k_t, v, bias, None, None)?;
        let out = from_tokens(tape, trace.tokens, h2, w2)?;
        let out = tape.gelu(out)?;
        Ok((self.proj.forward(tape, w, out)?, trace))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        check_channels("dual-path downsample", tape.shape(x), self.in_channels())?;
        check_even("dual-path downsample", tape.shape(x))?;
        if tape.shape(x)[2..] != [self.height, self.width] {
            return Err(Error::config(format!(
                "dual-path attention bias is tied to {}x{} inputs, got {:?}",
                self.height,
                self.width,
                tape.shape(x)
            )));
        }
        let conv = self.conv_path(tape, w, x)?;
        let (attn, _) = self.attention_path(tape, w, x)?;
        tape.add(conv, attn)
    }

    pub fn param_count(&self) -> usize {
        let hd = self.heads * self.key_dim;
        self.q_dw.param_count()
            + self.q_proj_pool.numel()
            + self.q_proj_dw.numel()
            + self.q_bias.numel()
            + 2 * hd
            + self.kv.param_count()
            + self.bias.numel()
            + self.proj.param_count()
            + self.conv.param_count()
    }
}

impl Remap for DualPathDown {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(DualPathDown {
            q_dw: self.q_dw.remap(m)?,
            q_proj_pool: m.slice(&self.q_proj_pool)?,
            q_proj_dw: m.slice(&self.q_proj_dw)?,
            q_bias: m.slice(&self.q_bias)?,
            q_norm: m.norm(&self.q_norm)?,
            kv: self.kv.remap(m)?,
            bias: m.slice(&self.bias)?,
            proj: self.proj.remap(m)?,
            conv: self.conv.remap(m)?,
            ..self.clone()
        })
    }
}
