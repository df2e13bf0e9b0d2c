use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, ParamId, Tape, Var, Weights};

use super::{check_channels, residual, Builder, ConvDef, ConvNorm, ConvSpec, Init, Mapper, Remap, Slice};

/// Static attention shape: heads, per-head dim, input resolution, token
/// pooling before the projections (`stride`) and key/value pooling after
/// them (`kv_pool`, rows x cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MhsaGeometry {
    pub heads: usize,
    pub key_dim: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub kv_pool: (usize, usize),
}

impl MhsaGeometry {
    pub fn new(heads: usize, key_dim: usize, height: usize, width: usize) -> Self {
        MhsaGeometry {
            heads,
            key_dim,
            height,
            width,
            stride: 1,
            kv_pool: (1, 1),
        }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        MhsaGeometry { stride, ..self }
    }

    pub fn with_kv_pool(self, rows: usize, cols: usize) -> Self {
        MhsaGeometry {
            kv_pool: (rows, cols),
            ..self
        }
    }

    /// `heads * key_dim`.
    pub fn inner(&self) -> usize {
        self.heads * self.key_dim
    }

    /// Spatial extents the attention core runs at.
    pub fn query_grid(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    pub fn key_grid(&self) -> (usize, usize) {
        let (h, w) = self.query_grid();
        (h / self.kv_pool.0, w / self.kv_pool.1)
    }

    pub fn query_tokens(&self) -> usize {
        let (h, w) = self.query_grid();
        h * w
    }

    pub fn key_tokens(&self) -> usize {
        let (h, w) = self.key_grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let (s, (ph, pw)) = (self.stride, self.kv_pool);
        if self.heads == 0 || self.key_dim == 0 || s == 0 || ph == 0 || pw == 0 {
            return Err(Error::config(format!("degenerate attention geometry {self:?}")));
        }
        if self.height % s != 0 || self.width % s != 0 || self.height < s || self.width < s {
            return Err(Error::config(format!(
                "attention stride {s} does not divide resolution {}x{}",
                self.height, self.width
            )));
        }
        let (qh, qw) = self.query_grid();
        if qh % ph != 0 || qw % pw != 0 {
            return Err(Error::config(format!(
                "key/value pooling {ph}x{pw} does not divide the {qh}x{qw} token grid"
            )));
        }
        Ok(())
    }
}

/// Switchable multi-head self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaDef {
    pub geom: MhsaGeometry,
    pub qkv: ConvDef,
    pub v_local: ConvDef,
    pub bias: ParamId,
    pub mix_pre: ParamId,
    pub mix_post: ParamId,
    pub proj: ConvDef,
    pub scale: ParamId,
    pub widths: Vec<usize>,
}

impl MhsaDef {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        widths: &[usize],
        geom: MhsaGeometry,
        layer_scale: f64,
    ) -> Result<Self> {
        geom.validate()?;
        let c_max = *widths
            .iter()
            .max()
            .ok_or_else(|| Error::config(format!("{name}: empty width choices")))?;
        let (h, hd) = (geom.heads, geom.inner());
        Ok(MhsaDef {
            geom,
            qkv: b.conv(
                &format!("{name}.qkv"),
                ConvSpec::pointwise(c_max, 3 * hd, Activation::Identity),
                &[3 * hd],
            )?,
            v_local: b.conv(&format!("{name}.v_local"), ConvSpec::depthwise3(hd, 1, Activation::Identity), &[])?,
            bias: b.param(
                &format!("{name}.attn_bias"),
                &[h, geom.query_tokens(), geom.key_tokens()],
                Init::Const(0.0),
            )?,
            mix_pre: b.param(&format!("{name}.mix_pre"), &[h, h], Init::Identity)?,
            mix_post: b.param(&format!("{name}.mix_post"), &[h, h], Init::Identity)?,
            proj: b.conv(
                &format!("{name}.proj"),
                ConvSpec::pointwise(hd, c_max, Activation::Identity),
                widths,
            )?,
            scale: b.param(&format!("{name}.scale"), &[c_max], Init::Const(layer_scale))?,
            widths: widths.to_vec(),
        })
    }

    pub fn resolve(&self, c: usize) -> Result<Mhsa> {
        if !self.widths.contains(&c) {
            return Err(Error::config(format!("mhsa width {c} not among choices {:?}", self.widths)));
        }
        let g = self.geom;
        let (h, hd) = (g.heads, g.inner());
        Ok(Mhsa {
            geom: g,
            qkv: self.qkv.resolve(c, 3 * hd)?,
            v_local: self.v_local.resolve(hd, hd)?,
            bias: Slice {
                id: self.bias,
                extents: vec![h, g.query_tokens(), g.key_tokens()],
            },
            mix_pre: Slice {
                id: self.mix_pre,
                extents: vec![h, h],
            },
            mix_post: Slice {
                id: self.mix_post,
                extents: vec![h, h],
            },
            proj: self.proj.resolve(hd, c)?,
            scale: Slice {
                id: self.scale,
                extents: vec![c],
            },
            keep: 1.0,
        })
    }
}

/// Intermediate values of one attention evaluation, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttnTrace {
    /// `[B, h, Nq, d]`
    pub q: Var,
    /// `[B, h, d, Nk]`
    pub k_t: Var,
    /// `[B, h, Nk, d]`
    pub v: Var,
    /// Softmax output before post-mixing, `[B, h, Nq, Nk]`.
    pub probs: Var,
    /// Attention-weighted values, `[B, h, Nq, d]`.
    pub tokens: Var,
}

/// `mix_post(softmax(mix_pre(q k^T / sqrt(d) + bias))) v`.
///
/// The mixers act across the head dim and are skipped when `None`.
pub fn attention_core<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k_t: Var,
    v: Var,
    bias: Var,
    mix_pre: Option<Var>,
    mix_post: Option<Var>,
) -> Result<AttnTrace> {
    let d = tape.shape(q)[3];
    let logits = tape.matmul(q, k_t)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let mut logits = tape.add(logits, bias)?;
    if let Some(m) = mix_pre {
        logits = mix_heads(tape, logits, m)?;
    }
    let probs = tape.softmax_lastdim(logits)?;
    let mut attn = probs;
    if let Some(m) = mix_post {
        attn = mix_heads(tape, attn, m)?;
    }
    let tokens = tape.matmul(attn, v)?;
    Ok(AttnTrace {
        q,
        k_t,
        v,
        probs,
        tokens,
    })
}

/// `out[b, i] = sum_j l[i, j] * x[b, j]` over the head dim of `[B, h, M, N]`.
fn mix_heads<T: Element>(tape: &mut Tape<T>, x: Var, l: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let mixed = tape.matmul(l, flat)?;
    tape.reshape(mixed, &s)
}

/// `[B, h*d, H, W]` channel map to `[B, h, H*W, d]` tokens.
pub(crate) fn to_tokens<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let t = to_tokens_t(tape, x, heads)?;
    tape.permute(t, &[0, 1, 3, 2])
}

/// `[B, h*d, H, W]` channel map to `[B, h, d, H*W]`.
pub(crate) fn to_tokens_t<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    tape.reshape(x, &[s[0], heads, s[1] / heads, s[2] * s[3]])
}

/// `[B, h, N, d]` tokens back to a `[B, h*d, H, W]` channel map.
pub(crate) fn from_tokens<T: Element>(tape: &mut Tape<T>, t: Var, height: usize, width: usize) -> Result<Var> {
    let s = tape.shape(t).to_vec();
    let p = tape.permute(t, &[0, 1, 3, 2])?;
    tape.reshape(p, &[s[0], s[1] * s[3], height, width])
}

/// Resolved attention block:
/// `x + S * proj(gelu(up(attn(pool(x)))))` with local value injection.
#[derive(Debug, Clone, PartialEq)]
pub struct Mhsa {
    pub geom: MhsaGeometry,
    pub qkv: ConvNorm,
    pub v_local: ConvNorm,
    pub bias: Slice,
    pub mix_pre: Slice,
    pub mix_post: Slice,
    pub proj: ConvNorm,
    pub scale: Slice,
    pub keep: f64,
}

impl Mhsa {
    pub fn channels(&self) -> usize {
        self.proj.out_channels()
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, w, x)?.0)
    }

    pub fn forward_traced<T: Element>(&self, tape: &mut Tape<T>, w: &Weights<T>, x: Var) -> Result<(Var, AttnTrace)> {
        let g = self.geom;
        check_channels("mhsa", tape.shape(x), self.channels())?;
        if tape.shape(x)[2..] != [g.height, g.width] {
            return Err(Error::config(format!(
                "mhsa attention bias is tied to {}x{} tokens, input is {:?}",
                g.height,
                g.width,
                tape.shape(x)
            )));
        }
        let hd = g.inner();
        let pooled = if g.stride > 1 {
            tape.avg_pool(x, g.stride, g.stride)?
        } else {
            x
        };
        let qkv = self.qkv.forward(tape, w, pooled)?;
        let q = tape.narrow(qkv, 1, 0, hd)?;
        let mut k = tape.narrow(qkv, 1, hd, hd)?;
        let mut v = tape.narrow(qkv, 1, 2 * hd, hd)?;
        if g.kv_pool != (1, 1) {
            k = tape.avg_pool(k, g.kv_pool.0, g.kv_pool.1)?;
            v = tape.avg_pool(v, g.kv_pool.0, g.kv_pool.1)?;
        }
        let local = self.v_local.forward(tape, w, v)?;
        let v = tape.add(v, local)?;

        let q = to_tokens(tape, q, g.heads)?;
        let k_t = to_tokens_t(tape, k, g.heads)?;
        let v = to_tokens(tape, v, g.heads)?;
        let bias = self.bias.load(tape, w)?;
        let pre = self.mix_pre.load(tape, w)?;
        let post = self.mix_post.load(tape, w)?;
        let trace = attention_core(tape, q, k_t, v, bias, Some(pre), Some(post))?;

        let (qh, qw) = g.query_grid();
        let mut out = from_tokens(tape, trace.tokens, qh, qw)?;
        if g.stride > 1 {
            out = tape.nearest_up(out, g.stride, g.stride)?;
        }
        let out = tape.gelu(out)?;
        let out = self.proj.forward(tape, w, out)?;
        let y = residual(tape, w, x, out, &self.scale, self.keep)?;
        Ok((y, trace))
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count()
            + self.v_local.param_count()
            + self.bias.numel()
            + self.mix_pre.numel()
            + self.mix_post.numel()
            + self.proj.param_count()
            + self.scale.numel()
    }
}

impl Remap for Mhsa {
    fn remap(&self, m: &mut dyn Mapper) -> Result<Self> {
        Ok(Mhsa {
            geom: self.geom,
            qkv: self.qkv.remap(m)?,
            v_local: self.v_local.remap(m)?,
            bias: m.slice(&self.bias)?,
            mix_pre: m.slice(&self.mix_pre)?,
            mix_post: m.slice(&self.mix_post)?,
            proj: self.proj.remap(m)?,
            scale: m.slice(&self.scale)?,
            keep: self.keep,
        })
    }
}
