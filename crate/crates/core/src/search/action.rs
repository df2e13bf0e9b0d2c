use std::fmt;

use crate::error::{Error, Result};
use crate::supernet::{SearchSpace, SubnetConfig, STAGES};

/// Which part of a block a [`Action::SlimBlock`] removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlimPart {
    /// The whole block (attention and FFN). Only the last block of a stage
    /// can be removed, since depth keeps a prefix of the blocks.
    Whole,
    /// Only the attention sub-block.
    MhsaOnly,
}

/// One single-step slimming of a configuration. Stages and blocks are
/// 0-based; text forms use 1-based stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    SlimBlock { stage: usize, block: usize, part: SlimPart },
    ShrinkWidth { stage: usize },
    ShrinkExpansion { stage: usize, block: usize },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Action::SlimBlock { stage, block, part } => {
                let p = match part {
                    SlimPart::Whole => "whole",
                    SlimPart::MhsaOnly => "mhsa",
                };
                write!(f, "slim_block:s{}:b{block}:{p}", stage + 1)
            }
            Action::ShrinkWidth { stage } => write!(f, "shrink_width:s{}", stage + 1),
            Action::ShrinkExpansion { stage, block } => write!(f, "shrink_expansion:s{}:b{block}", stage + 1),
        }
    }
}

impl std::str::FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::format(format!("unknown action '{s}'"));
        let parts: Vec<&str> = s.split(':').collect();
        let stage = |p: &str| -> Result<usize> {
            let n: usize = p.strip_prefix('s').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
            if n == 0 || n > STAGES {
                return Err(bad());
            }
            Ok(n - 1)
        };
        let block = |p: &str| -> Result<usize> { p.strip_prefix('b').and_then(|n| n.parse().ok()).ok_or_else(bad) };
        match parts.as_slice() {
            ["slim_block", s, b, p] => Ok(Action::SlimBlock {
                stage: stage(s)?,
                block: block(b)?,
                part: match *p {
                    "whole" => SlimPart::Whole,
                    "mhsa" => SlimPart::MhsaOnly,
                    _ => return Err(bad()),
                },
            }),
            ["shrink_width", s] => Ok(Action::ShrinkWidth { stage: stage(s)? }),
            ["shrink_expansion", s, b] => Ok(Action::ShrinkExpansion {
                stage: stage(s)?,
                block: block(b)?,
            }),
            _ => Err(bad()),
        }
    }
}

fn next_lower(choices: &[usize], current: usize) -> Option<usize> {
    let pos = choices.iter().position(|&c| c == current)?;
    pos.checked_sub(1).map(|p| choices[p])
}

/// Every applicable single-step slimming of `cfg`, in a fixed order: per
/// stage, removal of the last block, attention removals, the width step,
/// then expansion steps.
pub fn enumerate_actions(space: &SearchSpace, cfg: &SubnetConfig) -> Vec<Action> {
    let mut out = Vec::new();
    for j in 0..STAGES {
        let n = cfg.depths[j];
        if n > 1 {
            out.push(Action::SlimBlock {
                stage: j,
                block: n - 1,
                part: SlimPart::Whole,
            });
        }
        for i in 0..n {
            if cfg.mhsa[j][i] {
                out.push(Action::SlimBlock {
                    stage: j,
                    block: i,
                    part: SlimPart::MhsaOnly,
                });
            }
        }
        if next_lower(&space.widths[j], cfg.widths[j]).is_some() {
            out.push(Action::ShrinkWidth { stage: j });
        }
        for i in 0..n {
            if next_lower(&space.expansions, cfg.expansions[j][i]).is_some() {
                out.push(Action::ShrinkExpansion { stage: j, block: i });
            }
        }
    }
    out
}

/// Apply `action` to `cfg`; inapplicable actions are a config error.
pub fn apply(space: &SearchSpace, cfg: &SubnetConfig, action: Action) -> Result<SubnetConfig> {
    let inapplicable = || Error::config(format!("action {action} does not apply to {cfg}"));
    let mut out = cfg.clone();
    match action {
        Action::SlimBlock { stage, block, part } => {
            let n = *cfg.depths.get(stage).ok_or_else(inapplicable)?;
            match part {
                SlimPart::Whole => {
                    if n <= 1 || block != n - 1 {
                        return Err(inapplicable());
                    }
                    out.depths[stage] -= 1;
                    out.expansions[stage].pop();
                    out.mhsa[stage].pop();
                }
                SlimPart::MhsaOnly => {
                    if block >= n || !cfg.mhsa[stage][block] {
                        return Err(inapplicable());
                    }
                    out.mhsa[stage][block] = false;
                }
            }
        }
        Action::ShrinkWidth { stage } => {
            let w = cfg.widths.get(stage).ok_or_else(inapplicable)?;
            out.widths[stage] = next_lower(&space.widths[stage], *w).ok_or_else(inapplicable)?;
        }
        Action::ShrinkExpansion { stage, block } => {
            let e = cfg
                .expansions
                .get(stage)
                .and_then(|s| s.get(block))
                .ok_or_else(inapplicable)?;
            out.expansions[stage][block] = next_lower(&space.expansions, *e).ok_or_else(inapplicable)?;
        }
    }
    out.validate(space)?;
    Ok(out)
}
