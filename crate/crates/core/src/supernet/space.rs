use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Number of stages in the hierarchy.
pub const STAGES: usize = 4;

/// Spatial reduction of each stage relative to the input.
pub const STAGE_REDUCTION: [usize; STAGES] = [4, 8, 16, 32];

/// Stages (0-based) whose blocks pair an attention sub-block with the FFN.
pub fn is_attention_stage(j: usize) -> bool {
    j >= 2
}

/// Elastic search space of the supernet.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    /// Maximum blocks per stage.
    pub depths: [usize; STAGES],
    /// Ascending width choices per stage.
    pub widths: [Vec<usize>; STAGES],
    /// Ascending FFN expansion ratio choices, shared by every block.
    pub expansions: Vec<usize>,
    /// Attention heads per stage (read for attention stages and for the
    /// dual-path module entering a stage).
    pub heads: [usize; STAGES],
    pub key_dim: usize,
    /// Token pooling factor of the attention blocks in each stage.
    pub attn_stride: [usize; STAGES],
    /// Use dual-path downsampling into stage 3 as well as stage 4.
    pub dual_path_stage3: bool,
    /// Square input resolution.
    pub resolution: usize,
    pub classes: usize,
    /// Every width must be a multiple of this.
    pub granularity: usize,
    /// Initial value of every layer-scale entry.
    pub layer_scale: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            depths: [2, 2, 3, 3],
            widths: [vec![16, 24], vec![32, 48], vec![64, 96], vec![96, 128]],
            expansions: vec![2, 3, 4],
            heads: [1, 1, 2, 4],
            key_dim: 8,
            attn_stride: [1, 1, 1, 1],
            dual_path_stage3: false,
            resolution: 32,
            classes: 10,
            granularity: 8,
            layer_scale: 0.1,
        }
    }
}

fn ascending(name: &str, xs: &[usize]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::config(format!("{name}: empty choice set")));
    }
    if xs[0] == 0 || xs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("{name}: choices {xs:?} must be positive and strictly ascending")));
    }
    Ok(())
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for j in 0..STAGES {
            if self.depths[j] == 0 {
                return Err(Error::config(format!("stage {} has zero maximum depth", j + 1)));
            }
            ascending(&format!("stage {} widths", j + 1), &self.widths[j])?;
            if self.granularity == 0 {
                return Err(Error::config("width granularity must be positive"));
            }
            if let Some(w) = self.widths[j].iter().find(|&&w| w % self.granularity != 0) {
                return Err(Error::config(format!(
                    "stage {} width {w} is not a multiple of {}",
                    j + 1,
                    self.granularity
                )));
            }
            let s = self.attn_stride[j];
            let res = self.stage_resolution(j);
            if s == 0 || res % s != 0 {
                return Err(Error::config(format!(
                    "stage {} attention stride {s} does not divide resolution {res}",
                    j + 1
                )));
            }
        }
        ascending("expansions", &self.expansions)?;
        if self.resolution == 0 || self.resolution % STAGE_REDUCTION[STAGES - 1] != 0 {
            return Err(Error::config(format!(
                "input resolution {} must be a positive multiple of {}",
                self.resolution,
                STAGE_REDUCTION[STAGES - 1]
            )));
        }
        if self.key_dim == 0 || (0..STAGES).any(|j| self.needs_heads(j) && self.heads[j] == 0) {
            return Err(Error::config("attention stages need positive heads and key_dim"));
        }
        if self.classes < 2 {
            return Err(Error::config("at least 2 classes are required"));
        }
        if !(self.layer_scale.is_finite()) {
            return Err(Error::config("layer_scale must be finite"));
        }
        Ok(())
    }

    fn needs_heads(&self, j: usize) -> bool {
        is_attention_stage(j) || self.dual_path_into(j)
    }

    /// Spatial side length of stage `j`.
    pub fn stage_resolution(&self, j: usize) -> usize {
        self.resolution / STAGE_REDUCTION[j]
    }

    /// Whether the module entering stage `j` (`j >= 1`) is dual-path.
    pub fn dual_path_into(&self, j: usize) -> bool {
        j == 3 || (j == 2 && self.dual_path_stage3)
    }

    /// Number of residual sub-blocks in the maximal network.
    pub fn residual_count(&self) -> usize {
        (0..STAGES)
            .map(|j| self.depths[j] * (1 + is_attention_stage(j) as usize))
            .sum()
    }

    /// Keep probability of residual sub-block `k` (counted over the maximal
    /// network) under a linear drop-path schedule peaking at `rate`.
    pub fn keep_prob(&self, k: usize, rate: f64) -> f64 {
        let total = self.residual_count();
        if total <= 1 {
            return 1.0 - rate;
        }
        1.0 - rate * k as f64 / (total - 1) as f64
    }

    pub fn max_config(&self) -> SubnetConfig {
        let depths = self.depths;
        SubnetConfig {
            depths,
            widths: std::array::from_fn(|j| *self.widths[j].last().unwrap()),
            expansions: (0..STAGES).map(|j| vec![*self.expansions.last().unwrap(); depths[j]]).collect(),
            mhsa: (0..STAGES).map(|j| vec![is_attention_stage(j); depths[j]]).collect(),
        }
    }

    pub fn min_config(&self) -> SubnetConfig {
        SubnetConfig {
            depths: [1; STAGES],
            widths: std::array::from_fn(|j| self.widths[j][0]),
            expansions: vec![vec![self.expansions[0]]; STAGES],
            mhsa: vec![vec![false]; STAGES],
        }
    }

    /// Independent uniform draw of every field.
    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> SubnetConfig {
        let mut depths = [0; STAGES];
        let mut widths = [0; STAGES];
        let mut expansions = Vec::with_capacity(STAGES);
        let mut mhsa = Vec::with_capacity(STAGES);
        for j in 0..STAGES {
            depths[j] = rng.random_range(1..=self.depths[j]);
            widths[j] = self.widths[j][rng.random_range(0..self.widths[j].len())];
            expansions.push(
                (0..depths[j])
                    .map(|_| self.expansions[rng.random_range(0..self.expansions.len())])
                    .collect(),
            );
            mhsa.push((0..depths[j]).map(|_| is_attention_stage(j) && rng.random_bool(0.5)).collect());
        }
        SubnetConfig {
            depths,
            widths,
            expansions,
            mhsa,
        }
    }

    /// Every valid configuration, in a fixed order. Fails when the space
    /// holds more than `limit` configurations.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<SubnetConfig>> {
        let total = self.size();
        if total > limit as f64 {
            return Err(Error::config(format!(
                "search space holds {total:.0} configurations, more than the limit {limit}"
            )));
        }
        // Per-stage option lists: (depth, width, expansions, mhsa flags).
        let mut per_stage: Vec<Vec<(usize, usize, Vec<usize>, Vec<bool>)>> = Vec::with_capacity(STAGES);
        for j in 0..STAGES {
            let mut opts = Vec::new();
            for n in 1..=self.depths[j] {
                for &w in &self.widths[j] {
                    for es in product(&self.expansions, n) {
                        let flag_opts: Vec<Vec<bool>> = if is_attention_stage(j) {
                            product(&[false, true], n)
                        } else {
                            vec![vec![false; n]]
                        };
                        for flags in flag_opts {
                            opts.push((n, w, es.clone(), flags));
                        }
                    }
                }
            }
            per_stage.push(opts);
        }
        let mut out = Vec::with_capacity(total as usize);
        let mut idx = [0usize; STAGES];
        loop {
            let pick: Vec<_> = (0..STAGES).map(|j| &per_stage[j][idx[j]]).collect();
            out.push(SubnetConfig {
                depths: std::array::from_fn(|j| pick[j].0),
                widths: std::array::from_fn(|j| pick[j].1),
                expansions: pick.iter().map(|p| p.2.clone()).collect(),
                mhsa: pick.iter().map(|p| p.3.clone()).collect(),
            });
            let mut d = STAGES;
            loop {
                if d == 0 {
                    return Ok(out);
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < per_stage[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }

    /// Number of valid configurations.
    pub fn size(&self) -> f64 {
        (0..STAGES)
            .map(|j| {
                let per_block = self.expansions.len() as f64 * if is_attention_stage(j) { 2.0 } else { 1.0 };
                let depth_sum: f64 = (1..=self.depths[j]).map(|n| per_block.powi(n as i32)).sum();
                depth_sum * self.widths[j].len() as f64
            })
            .product()
    }

    /// Key/value pairs that fully describe the space.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("depths".to_string(), list(&self.depths)),
            ("expansions".to_string(), list(&self.expansions)),
            ("heads".to_string(), list(&self.heads)),
            ("key_dim".to_string(), self.key_dim.to_string()),
            ("attn_stride".to_string(), list(&self.attn_stride)),
            ("dual_path_stage3".to_string(), self.dual_path_stage3.to_string()),
            ("resolution".to_string(), self.resolution.to_string()),
            ("classes".to_string(), self.classes.to_string()),
            ("granularity".to_string(), self.granularity.to_string()),
            ("layer_scale".to_string(), format!("{:?}", self.layer_scale)),
        ];
        for j in 0..STAGES {
            out.push((format!("widths{}", j + 1), list(&self.widths[j])));
        }
        out
    }

    /// Inverse of [`to_pairs`](Self::to_pairs); keys not given keep their
    /// default values, unknown keys are rejected.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut s = SearchSpace::default();
        for (k, v) in pairs {
            match k.as_str() {
                "depths" => s.depths = parse_array(k, v)?,
                "expansions" => s.expansions = parse_list(k, v)?,
                "heads" => s.heads = parse_array(k, v)?,
                "key_dim" => s.key_dim = parse_one(k, v)?,
                "attn_stride" => s.attn_stride = parse_array(k, v)?,
                "dual_path_stage3" => s.dual_path_stage3 = parse_one(k, v)?,
                "resolution" => s.resolution = parse_one(k, v)?,
                "classes" => s.classes = parse_one(k, v)?,
                "granularity" => s.granularity = parse_one(k, v)?,
                "layer_scale" => s.layer_scale = parse_one(k, v)?,
                "widths1" | "widths2" | "widths3" | "widths4" => {
                    let j: usize = k[6..].parse().expect("digit suffix");
                    s.widths[j - 1] = parse_list(k, v)?;
                }
                _ => return Err(Error::config(format!("unknown search space key '{k}'"))),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

fn product<X: Clone>(choices: &[X], n: usize) -> Vec<Vec<X>> {
    let mut out: Vec<Vec<X>> = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                choices.iter().map(move |c| {
                    let mut p = prefix.clone();
                    p.push(c.clone());
                    p
                })
            })
            .collect();
    }
    out
}

fn parse_one<X: std::str::FromStr>(key: &str, v: &str) -> Result<X> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{v}' for '{key}'")))
}

pub(crate) fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_one(key, x)).collect()
}

fn parse_array(key: &str, v: &str) -> Result<[usize; STAGES]> {
    let xs = parse_list(key, v)?;
    xs.try_into()
        .map_err(|_| Error::config(format!("'{key}' needs exactly {STAGES} values, got '{v}'")))
}

/// One candidate architecture.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubnetConfig {
    pub depths: [usize; STAGES],
    pub widths: [usize; STAGES],
    /// Expansion ratio of every surviving block, per stage.
    pub expansions: Vec<Vec<usize>>,
    /// Whether each surviving block runs its attention sub-block, per stage.
    pub mhsa: Vec<Vec<bool>>,
}

impl SubnetConfig {
    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.expansions.len() != STAGES || self.mhsa.len() != STAGES {
            return Err(Error::config(format!("config must describe {STAGES} stages")));
        }
        for j in 0..STAGES {
            let n = self.depths[j];
            if n == 0 || n > space.depths[j] {
                return Err(Error::config(format!(
                    "stage {} depth {n} outside 1..={}",
                    j + 1,
                    space.depths[j]
                )));
            }
            if !space.widths[j].contains(&self.widths[j]) {
                return Err(Error::config(format!(
                    "stage {} width {} not among {:?}",
                    j + 1,
                    self.widths[j],
                    space.widths[j]
                )));
            }
            if self.expansions[j].len() != n || self.mhsa[j].len() != n {
                return Err(Error::config(format!(
                    "stage {} lists {} expansions and {} attention flags for depth {n}",
                    j + 1,
                    self.expansions[j].len(),
                    self.mhsa[j].len()
                )));
            }
            if let Some(e) = self.expansions[j].iter().find(|e| !space.expansions.contains(e)) {
                return Err(Error::config(format!("stage {} expansion {e} not among {:?}", j + 1, space.expansions)));
            }
            if !is_attention_stage(j) && self.mhsa[j].iter().any(|&m| m) {
                return Err(Error::config(format!("stage {} cannot hold attention", j + 1)));
            }
        }
        Ok(())
    }

    /// Total surviving blocks.
    pub fn blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Compact single-line form, e.g. `d=2,2,3,3 w=16,32,64,96 e=4.4/4.4/4.4.4/4.4.4 a=00/00/111/111`.
    pub fn encode(&self) -> String {
        let list = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let es = self
            .expansions
            .iter()
            .map(|s| s.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("."))
            .collect::<Vec<_>>()
            .join("/");
        let ms = self
            .mhsa
            .iter()
            .map(|s| s.iter().map(|&m| if m { '1' } else { '0' }).collect::<String>())
            .collect::<Vec<_>>()
            .join("/");
        format!("d={} w={} e={es} a={ms}", list(&self.depths), list(&self.widths))
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("malformed subnet config '{s}'"));
        let mut fields = BTreeMap::new();
        for part in s.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        let depths = parse_array("d", get("d")?)?;
        let widths = parse_array("w", get("w")?)?;
        let expansions: Vec<Vec<usize>> = get("e")?
            .split('/')
            .map(|st| st.split('.').map(|e| e.parse().map_err(|_| bad())).collect())
            .collect::<Result<_>>()?;
        let mhsa: Vec<Vec<bool>> = get("a")?
            .split('/')
            .map(|st| {
                st.chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(bad()),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(SubnetConfig {
            depths,
            widths,
            expansions,
            mhsa,
        })
    }
}

impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}
