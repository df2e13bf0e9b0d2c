use std::collections::BTreeSet;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::supernet::{is_attention_stage, BlockKey, BlockKind, SearchSpace, SubnetConfig, STAGES};

/// Multiply-accumulates of one forward pass (batch 1), by source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Macs {
    /// Convolutions, pointwise projections and the classifier.
    pub conv: u64,
    /// Query-key products and attention-weighted values.
    pub attention: u64,
    /// Head-mixing matmuls before and after the softmax.
    pub talking_head: u64,
}

impl Macs {
    pub fn total(&self) -> u64 {
        self.conv + self.attention + self.talking_head
    }
}

impl Add for Macs {
    type Output = Macs;

    fn add(self, o: Macs) -> Macs {
        Macs {
            conv: self.conv + o.conv,
            attention: self.attention + o.attention,
            talking_head: self.talking_head + o.talking_head,
        }
    }
}

impl AddAssign for Macs {
    fn add_assign(&mut self, o: Macs) {
        *self = *self + o;
    }
}

/// Parameters of a convolution with bias, plus its norm when `norm` is set.
fn conv_params(cin: u64, cout: u64, k: u64, depthwise: bool, norm: bool) -> u64 {
    let w = if depthwise { cout * k * k } else { cout * cin * k * k };
    w + cout + if norm { 2 * cout } else { 0 }
}

fn conv_macs(cin: u64, cout: u64, k: u64, depthwise: bool, out_pixels: u64) -> u64 {
    let per_pixel = if depthwise { cout * k * k } else { cout * cin * k * k };
    per_pixel * out_pixels
}

/// Descriptors of the blocks executed by `cfg`, in execution order.
pub fn block_keys(space: &SearchSpace, cfg: &SubnetConfig) -> Result<Vec<BlockKey>> {
    cfg.validate(space)?;
    let mut keys = vec![BlockKey {
        kind: BlockKind::Stem,
        stage: 0,
        resolution: space.resolution,
        width: cfg.widths[0],
        expansion: 0,
    }];
    for j in 0..STAGES {
        let res = space.stage_resolution(j);
        if j > 0 {
            keys.push(BlockKey {
                kind: if space.dual_path_into(j) {
                    BlockKind::DualPathDown
                } else {
                    BlockKind::PlainDown
                },
                stage: j + 1,
                resolution: space.stage_resolution(j - 1),
                width: cfg.widths[j],
                expansion: cfg.widths[j - 1],
            });
        }
        for i in 0..cfg.depths[j] {
            if cfg.mhsa[j][i] {
                keys.push(attention_key(space, j, cfg.widths[j]));
            }
            keys.push(BlockKey {
                kind: BlockKind::Ffn,
                stage: j + 1,
                resolution: res,
                width: cfg.widths[j],
                expansion: cfg.expansions[j][i],
            });
        }
    }
    keys.push(BlockKey {
        kind: BlockKind::Head,
        stage: STAGES + 1,
        resolution: space.stage_resolution(STAGES - 1),
        width: cfg.widths[STAGES - 1],
        expansion: space.classes,
    });
    Ok(keys)
}

fn attention_key(space: &SearchSpace, j: usize, width: usize) -> BlockKey {
    let stride = space.attn_stride[j];
    BlockKey {
        kind: if stride > 1 { BlockKind::StrideAttn } else { BlockKind::Mhsa },
        stage: j + 1,
        resolution: space.stage_resolution(j),
        width,
        expansion: stride,
    }
}

/// Every descriptor some configuration of `space` executes.
pub fn reachable_keys(space: &SearchSpace) -> BTreeSet<BlockKey> {
    let mut out = BTreeSet::new();
    let any = space.max_config();
    for &c in &space.widths[0] {
        let mut cfg = any.clone();
        cfg.widths[0] = c;
        out.insert(block_keys(space, &cfg).expect("max config is valid")[0]);
    }
    for j in 0..STAGES {
        let res = space.stage_resolution(j);
        for &c in &space.widths[j] {
            if j > 0 {
                for &cin in &space.widths[j - 1] {
                    out.insert(BlockKey {
                        kind: if space.dual_path_into(j) {
                            BlockKind::DualPathDown
                        } else {
                            BlockKind::PlainDown
                        },
                        stage: j + 1,
                        resolution: space.stage_resolution(j - 1),
                        width: c,
                        expansion: cin,
                    });
                }
            }
            if is_attention_stage(j) {
                out.insert(attention_key(space, j, c));
            }
            for &e in &space.expansions {
                out.insert(BlockKey {
                    kind: BlockKind::Ffn,
                    stage: j + 1,
                    resolution: res,
                    width: c,
                    expansion: e,
                });
            }
        }
    }
    for &c in &space.widths[STAGES - 1] {
        out.insert(BlockKey {
            kind: BlockKind::Head,
            stage: STAGES + 1,
            resolution: space.stage_resolution(STAGES - 1),
            width: c,
            expansion: space.classes,
        });
    }
    out
}

fn heads(space: &SearchSpace, key: &BlockKey) -> Result<(u64, u64)> {
    if key.stage == 0 || key.stage > STAGES {
        return Err(Error::config(format!("{key} is not an attention descriptor")));
    }
    Ok((space.heads[key.stage - 1] as u64, space.key_dim as u64))
}

/// Learnable parameters of one block.
pub fn block_params(space: &SearchSpace, key: &BlockKey) -> Result<u64> {
    let c = key.width as u64;
    let r = key.resolution as u64;
    Ok(match key.kind {
        BlockKind::Stem => conv_params(3, c, 3, false, true) + conv_params(c, c, 3, false, true),
        BlockKind::PlainDown => conv_params(key.expansion as u64, c, 3, false, true),
        BlockKind::DualPathDown => {
            let cin = key.expansion as u64;
            let (h, d) = heads(space, key)?;
            let hd = h * d;
            let n = r * r;
            conv_params(cin, cin, 3, true, true)
                + (2 * cin * hd + hd + 2 * hd)
                + conv_params(cin, 2 * hd, 1, false, true)
                + h * (n / 4) * n
                + conv_params(hd, c, 1, false, true)
                + conv_params(cin, c, 3, false, true)
        }
        BlockKind::Mhsa | BlockKind::StrideAttn => {
            let (h, d) = heads(space, key)?;
            let hd = h * d;
            let s = key.expansion as u64;
            let n = (r / s) * (r / s);
            conv_params(c, 3 * hd, 1, false, true)
                + conv_params(hd, hd, 3, true, false)
                + h * n * n
                + 2 * h * h
                + conv_params(hd, c, 1, false, true)
                + c
        }
        BlockKind::Ffn => {
            let hidden = c * key.expansion as u64;
            conv_params(c, hidden, 1, false, true)
                + conv_params(hidden, hidden, 3, true, true)
                + conv_params(hidden, c, 1, false, true)
                + c
        }
        BlockKind::Head => {
            let k = key.expansion as u64;
            k * c + k
        }
    })
}

/// Multiply-accumulates of one block at batch 1.
pub fn block_macs(space: &SearchSpace, key: &BlockKey) -> Result<Macs> {
    let c = key.width as u64;
    let r = key.resolution as u64;
    Ok(match key.kind {
        BlockKind::Stem => Macs {
            conv: conv_macs(3, c, 3, false, (r / 2) * (r / 2)) + conv_macs(c, c, 3, false, (r / 4) * (r / 4)),
            ..Macs::default()
        },
        BlockKind::PlainDown => Macs {
            conv: conv_macs(key.expansion as u64, c, 3, false, (r / 2) * (r / 2)),
            ..Macs::default()
        },
        BlockKind::DualPathDown => {
            let cin = key.expansion as u64;
            let (h, d) = heads(space, key)?;
            let hd = h * d;
            let (n, nq) = (r * r, (r / 2) * (r / 2));
            Macs {
                conv: conv_macs(cin, cin, 3, true, nq)
                    + conv_macs(2 * cin, hd, 1, false, nq)
                    + conv_macs(cin, 2 * hd, 1, false, n)
                    + conv_macs(hd, c, 1, false, nq)
                    + conv_macs(cin, c, 3, false, nq),
                attention: 2 * h * nq * n * d,
                talking_head: 0,
            }
        }
        BlockKind::Mhsa | BlockKind::StrideAttn => {
            let (h, d) = heads(space, key)?;
            let hd = h * d;
            let s = key.expansion as u64;
            let n = (r / s) * (r / s);
            Macs {
                conv: conv_macs(c, 3 * hd, 1, false, n)
                    + conv_macs(hd, hd, 3, true, n)
                    + conv_macs(hd, c, 1, false, r * r),
                attention: 2 * h * n * n * d,
                talking_head: 2 * h * h * n * n,
            }
        }
        BlockKind::Ffn => {
            let hidden = c * key.expansion as u64;
            let n = r * r;
            Macs {
                conv: conv_macs(c, hidden, 1, false, n)
                    + conv_macs(hidden, hidden, 3, true, n)
                    + conv_macs(hidden, c, 1, false, n),
                ..Macs::default()
            }
        }
        BlockKind::Head => Macs {
            conv: c * key.expansion as u64,
            ..Macs::default()
        },
    })
}

/// Learnable parameters of the network `cfg` selects.
pub fn count_params(space: &SearchSpace, cfg: &SubnetConfig) -> Result<u64> {
    block_keys(space, cfg)?
        .iter()
        .map(|k| block_params(space, k))
        .sum()
}

/// Multiply-accumulates of one forward pass of `cfg` at batch 1.
pub fn count_macs(space: &SearchSpace, cfg: &SubnetConfig) -> Result<Macs> {
    let mut total = Macs::default();
    for k in block_keys(space, cfg)? {
        total += block_macs(space, &k)?;
    }
    Ok(total)
}
