//! Named-tensor checkpoint archive.
//!
//! A checkpoint is a text manifest followed by raw little-endian buffers:
//!
//! ```text
//! effnas-checkpoint 1
//! meta <key> <value>
//! tensor <role> <name> <dtype> <d0>x<d1>x... <byte offset>
//! step <name> <optimizer step>
//! data <total bytes>
//! <buffers>
//! ```
//!
//! `role` is one of `param`, `m1`, `m2` (optimizer moments), `mean` or `var`
//! (normalization statistics). Offsets are relative to the first byte after
//! the `data` line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor, Weights};

use super::net::{Subnet, Supernet};
use super::space::{SearchSpace, SubnetConfig};

const MAGIC: &str = "effnas-checkpoint 1";

/// Decoded checkpoint: metadata pairs plus tensors.
#[derive(Debug, Clone)]
pub struct Archive<T> {
    pub meta: BTreeMap<String, String>,
    pub weights: Weights<T>,
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Serialize `weights` and `meta`; optimizer moments are written when
/// `optimizer` is set.
pub fn save_archive<T: Element>(
    path: &Path,
    meta: &BTreeMap<String, String>,
    weights: &Weights<T>,
    optimizer: bool,
) -> Result<()> {
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::format(format!("metadata key '{k}' or its value is not a single token/line")));
        }
        head.push_str(&format!("meta {k} {v}\n"));
    }
    let mut data = Vec::new();
    let dtype = T::DTYPE.name();
    let mut push = |head: &mut String, role: &str, name: &str, shape: &[usize], values: &[T]| {
        head.push_str(&format!("tensor {role} {name} {dtype} {} {}\n", dims(shape), data.len()));
        for &v in values {
            v.write_le(&mut data);
        }
    };
    for (_, p) in weights.params.iter() {
        push(&mut head, "param", &p.name, p.value.shape(), p.value.data());
        if optimizer {
            push(&mut head, "m1", &p.name, p.first_moment.shape(), p.first_moment.data());
            push(&mut head, "m2", &p.name, p.second_moment.shape(), p.second_moment.data());
        }
    }
    for (_, s) in weights.stats.iter() {
        push(&mut head, "mean", &s.name, &[s.mean.len()], &s.mean);
        push(&mut head, "var", &s.name, &[s.var.len()], &s.var);
    }
    if optimizer {
        for (_, p) in weights.params.iter() {
            head.push_str(&format!("step {} {}\n", p.name, p.step));
        }
    }
    head.push_str(&format!("data {}\n", data.len()));
    let mut bytes = head.into_bytes();
    bytes.extend_from_slice(&data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_archive<T: Element>(path: &Path) -> Result<Archive<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_archive(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Entry {
    role: String,
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_archive<T: Element>(bytes: &[u8]) -> Result<Archive<T>> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("truncated manifest"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("manifest is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic line)"));
    }
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    let mut steps = BTreeMap::new();
    let total = loop {
        let line = next_line()?;
        let mut it = line.splitn(2, ' ');
        let tag = it.next().unwrap_or("");
        let rest = it.next().unwrap_or("");
        match tag {
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 {
                    return Err(Error::format(format!("malformed tensor line '{line}'")));
                }
                let dtype = DType::parse(f[2]).ok_or_else(|| Error::format(format!("unknown dtype in '{line}'")))?;
                let shape = f[3]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::format(format!("bad shape in '{line}'")))?;
                let offset = f[4]
                    .parse()
                    .map_err(|_| Error::format(format!("bad offset in '{line}'")))?;
                entries.push(Entry {
                    role: f[0].to_string(),
                    name: f[1].to_string(),
                    dtype,
                    shape,
                    offset,
                });
            }
            "step" => {
                let (name, n) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::format(format!("malformed step line '{line}'")))?;
                let n: u64 = n.parse().map_err(|_| Error::format(format!("bad step in '{line}'")))?;
                steps.insert(name.to_string(), n);
            }
            "data" => {
                break rest
                    .parse::<usize>()
                    .map_err(|_| Error::format(format!("bad data line '{line}'")))?;
            }
            _ => return Err(Error::format(format!("unexpected manifest line '{line}'"))),
        }
    };
    let data = &bytes[pos..];
    if data.len() != total {
        return Err(Error::format(format!(
            "data section holds {} bytes, manifest declares {total}",
            data.len()
        )));
    }

    let mut weights = Weights::new();
    let mut means = BTreeMap::new();
    for e in entries {
        if e.dtype != T::DTYPE {
            return Err(Error::format(format!(
                "tensor {} is {}, expected {}",
                e.name,
                e.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let n: usize = e.shape.iter().product();
        let size = e.dtype.size();
        let end = e.offset + n * size;
        if end > data.len() {
            return Err(Error::format(format!("tensor {} runs past the data section", e.name)));
        }
        let values: Vec<T> = data[e.offset..end].chunks_exact(size).map(T::read_le).collect();
        let tensor = Tensor::new(&e.shape, values)?;
        let find = |w: &Weights<T>| {
            w.params
                .id(&e.name)
                .ok_or_else(|| Error::format(format!("moment for unknown tensor {}", e.name)))
        };
        match e.role.as_str() {
            "param" => {
                weights.params.add(e.name.clone(), tensor).map_err(|_| {
                    Error::format(format!("duplicate tensor {}", e.name))
                })?;
            }
            "m1" | "m2" => {
                let id = find(&weights)?;
                let p = weights.params.get_mut(id);
                if p.value.shape() != tensor.shape() {
                    return Err(Error::format(format!("moment shape mismatch for tensor {}", e.name)));
                }
                if e.role == "m1" {
                    p.first_moment = tensor;
                } else {
                    p.second_moment = tensor;
                }
            }
            "mean" => {
                means.insert(e.name.clone(), tensor.into_data());
            }
            "var" => {
                let mean = means
                    .remove(&e.name)
                    .ok_or_else(|| Error::format(format!("variance without mean for {}", e.name)))?;
                if mean.len() != tensor.numel() {
                    return Err(Error::format(format!("statistics length mismatch for {}", e.name)));
                }
                let id = weights
                    .stats
                    .add(e.name.clone(), mean.len())
                    .map_err(|_| Error::format(format!("duplicate statistics {}", e.name)))?;
                let s = weights.stats.get_mut(id);
                s.mean = mean;
                s.var = tensor.into_data();
            }
            other => return Err(Error::format(format!("unknown tensor role '{other}'"))),
        }
    }
    if let Some(name) = means.keys().next() {
        return Err(Error::format(format!("mean without variance for {name}")));
    }
    for (name, n) in steps {
        let id = weights
            .params
            .id(&name)
            .ok_or_else(|| Error::format(format!("step for unknown tensor {name}")))?;
        weights.params.get_mut(id).step = n;
    }
    Ok(Archive { meta, weights })
}

/// Overwrite every tensor of `dst` with the same-named tensor of `src`.
///
/// Both sets of names must match exactly, as must every shape.
pub fn assign<T: Element>(dst: &mut Weights<T>, src: &Weights<T>) -> Result<()> {
    if dst.params.len() != src.params.len() || dst.stats.len() != src.stats.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} tensors and {} statistics, model expects {} and {}",
            src.params.len(),
            src.stats.len(),
            dst.params.len(),
            dst.stats.len()
        )));
    }
    for (_, p) in src.params.iter() {
        let id = dst
            .params
            .id(&p.name)
            .ok_or_else(|| Error::format(format!("checkpoint tensor {} is not part of the model", p.name)))?;
        let d = dst.params.get_mut(id);
        if d.value.shape() != p.value.shape() {
            return Err(Error::format(format!(
                "tensor {} has shape {:?} in the checkpoint, model expects {:?}",
                p.name,
                p.value.shape(),
                d.value.shape()
            )));
        }
        d.value = p.value.clone();
        d.first_moment = p.first_moment.clone();
        d.second_moment = p.second_moment.clone();
        d.step = p.step;
        d.grad = None;
    }
    for (_, s) in src.stats.iter() {
        let id = dst
            .stats
            .id(&s.name)
            .ok_or_else(|| Error::format(format!("checkpoint statistics {} are not part of the model", s.name)))?;
        let d = dst.stats.get_mut(id);
        if d.mean.len() != s.mean.len() {
            return Err(Error::format(format!("statistics {} have the wrong length", s.name)));
        }
        d.mean.clone_from(&s.mean);
        d.var.clone_from(&s.var);
    }
    Ok(())
}

fn space_meta(space: &SearchSpace) -> BTreeMap<String, String> {
    space
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (format!("space.{k}"), v))
        .collect()
}

fn space_from_meta(meta: &BTreeMap<String, String>) -> Result<SearchSpace> {
    let pairs: BTreeMap<String, String> = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("space.").map(|k| (k.to_string(), v.clone())))
        .collect();
    if pairs.is_empty() {
        return Err(Error::format("checkpoint does not record a search space"));
    }
    SearchSpace::from_pairs(&pairs).map_err(|e| Error::format(format!("recorded search space is invalid: {e}")))
}

fn check_space(expected: &SearchSpace, meta: &BTreeMap<String, String>) -> Result<()> {
    let found = space_from_meta(meta)?;
    if &found != expected {
        return Err(Error::format(format!(
            "checkpoint was written for a different search space ({:?} vs {:?})",
            found.to_pairs(),
            expected.to_pairs()
        )));
    }
    Ok(())
}

impl<T: Element> Supernet<T> {
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>, optimizer: bool) -> Result<()> {
        let mut meta = space_meta(&self.space);
        meta.insert("kind".into(), "supernet".into());
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        save_archive(path, &meta, &self.weights, optimizer)
    }

    /// Rebuild a supernet from the space recorded in a checkpoint.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let archive = load_archive::<T>(path)?;
        let space = space_from_meta(&archive.meta)?;
        let mut net = Supernet::build(&space, 0)?;
        assign(&mut net.weights, &archive.weights)?;
        Ok((net, archive.meta))
    }

    /// Load a checkpoint into this supernet, which must share its space.
    pub fn load_into(&mut self, path: &Path) -> Result<BTreeMap<String, String>> {
        let archive = load_archive::<T>(path)?;
        check_space(&self.space, &archive.meta)?;
        assign(&mut self.weights, &archive.weights)?;
        Ok(archive.meta)
    }
}

impl<T: Element> Subnet<T> {
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>, optimizer: bool) -> Result<()> {
        let mut meta = space_meta(&self.space);
        meta.insert("kind".into(), "subnet".into());
        meta.insert("subnet".into(), self.cfg.encode());
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        save_archive(path, &meta, &self.weights, optimizer)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let archive = load_archive::<T>(path)?;
        let space = space_from_meta(&archive.meta)?;
        let cfg = archive
            .meta
            .get("subnet")
            .ok_or_else(|| Error::format(format!("{} does not hold a subnet", path.display())))?;
        let cfg = SubnetConfig::decode(cfg).map_err(|e| Error::format(e.to_string()))?;
        let mut sub = Supernet::<T>::build(&space, 0)?.extract(&cfg)?;
        assign(&mut sub.weights, &archive.weights)?;
        Ok((sub, archive.meta))
    }
}
