//! Image classification datasets.
//!
//! Two sources are supported:
//!
//! * `synthetic:seed=S,k=K,n=N,h=H` generates `N` images of `K` classes at
//!   `H`×`H` pixels. Every class has its own mean colour, an oriented
//!   grating and a blob position; samples add random grating phase, blob
//!   jitter and pixel noise.
//! * `dir:PATH` reads one subdirectory per class (sorted by name, giving
//!   class ids 0, 1, ...) of raw raster files (sorted by name).
//!
//! Raster files start with the ASCII line `P-RAW <w> <h>\n`, followed by
//! exactly `w*h*3` little-endian IEEE-754 float32 values in [0, 1], stored
//! row-major with the three channel values of each pixel adjacent
//! (`((y*w)+x)*3 + c`). All files of a directory source must be square and
//! share one size. Values are normalized as `(v - 0.5) / 0.25`.
//!
//! Samples are shuffled once with the source seed (0 for directories) and
//! split 80/10/5/5 into train, val, search_val and test.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
const RAW_MAGIC: &str = "P-RAW";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { seed: u64, classes: usize, n: usize, size: usize },
    Directory(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic {
                seed,
                classes,
                n,
                size,
            } => write!(f, "synthetic:seed={seed},k={classes},n={n},h={size}"),
            DataSource::Directory(p) => write!(f, "dir:{}", p.display()),
        }
    }
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("dir:") {
            return Ok(DataSource::Directory(PathBuf::from(path)));
        }
        let Some(args) = s.strip_prefix("synthetic") else {
            return Err(Error::config(format!("unknown data source '{s}'; expected synthetic:... or dir:PATH")));
        };
        let (mut seed, mut classes, mut n, mut size) = (7u64, 10usize, 2000usize, 32usize);
        let args = args.strip_prefix(':').unwrap_or(args);
        for kv in args.split(',').filter(|x| !x.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad synthetic option '{kv}'")))?;
            let num = |v: &str| -> Result<u64> {
                v.parse()
                    .map_err(|_| Error::config(format!("bad value '{v}' for synthetic option '{k}'")))
            };
            match k {
                "seed" => seed = num(v)?,
                "k" => classes = num(v)? as usize,
                "n" => n = num(v)? as usize,
                "h" => size = num(v)? as usize,
                _ => return Err(Error::config(format!("unknown synthetic option '{k}'"))),
            }
        }
        Ok(DataSource::Synthetic {
            seed,
            classes,
            n,
            size,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    SearchVal,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::SearchVal, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::SearchVal => "search_val",
            Split::Test => "test",
        }
    }
}

/// Split sizes for `n` samples: 80/10/5/5, remainder to test.
pub fn split_sizes(n: usize) -> [usize; 4] {
    let train = n * 80 / 100;
    let val = n * 10 / 100;
    let search = n * 5 / 100;
    [train, val, search, n - train - val - search]
}

/// Images of one split, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> Result<Subset> {
        let s = self.images.shape();
        let per: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Ok(Subset {
            images: Tensor::new(&[idx.len(), s[1], s[2], s[3]], data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, 3, H, W]`, normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Sample indices of train, val, search_val and test.
    pub splits: [Vec<usize>; 4],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn subset(&self, split: Split) -> Result<Subset> {
        let all = Subset {
            images: self.images.clone(),
            labels: self.labels.clone(),
        };
        let k = Split::ALL.iter().position(|&s| s == split).expect("known split");
        all.gather(&self.splits[k])
    }
}

fn assign_splits(n: usize, seed: u64) -> [Vec<usize>; 4] {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911));
    let sizes = split_sizes(n);
    let mut out: [Vec<usize>; 4] = Default::default();
    let mut start = 0;
    for (k, &len) in sizes.iter().enumerate() {
        out[k] = order[start..start + len].to_vec();
        start += len;
    }
    out
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic {
            seed,
            classes,
            n,
            size,
        } => synthetic(*seed, *classes, *n, *size),
        DataSource::Directory(p) => load_directory(p),
    }
}

/// Class-conditional images: colour shift, grating and blob, plus noise.
pub fn synthetic(seed: u64, classes: usize, n: usize, size: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    if n == 0 || size < 4 {
        return Err(Error::config(format!("synthetic data needs n > 0 and h >= 4, got n={n}, h={size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    struct Class {
        colour: [f64; CHANNELS],
        freq: (f64, f64),
        blob: (f64, f64),
    }
    let protos: Vec<Class> = (0..classes)
        .map(|c| {
            let angle = std::f64::consts::PI * c as f64 / classes as f64;
            let cycles = 1.5 + 1.5 * (c % 3) as f64;
            let w = 2.0 * std::f64::consts::PI * cycles / size as f64;
            Class {
                colour: [0; CHANNELS].map(|_| 0.12 * unit.sample(&mut rng)),
                freq: (w * angle.cos(), w * angle.sin()),
                blob: (
                    rng.random_range(0.2..0.8) * size as f64,
                    rng.random_range(0.2..0.8) * size as f64,
                ),
            }
        })
        .collect();
    let plane = size * size;
    let mut data = Vec::with_capacity(n * CHANNELS * plane);
    let mut labels = Vec::with_capacity(n);
    let sigma = size as f64 / 6.0;
    for i in 0..n {
        let y = i % classes;
        let p = &protos[y];
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let (bx, by) = (
            p.blob.0 + rng.random_range(-2.0..2.0),
            p.blob.1 + rng.random_range(-2.0..2.0),
        );
        for c in 0..CHANNELS {
            let grating_gain = [0.3, 0.15, -0.15][c];
            for r in 0..size {
                for col in 0..size {
                    let (xf, yf) = (col as f64, r as f64);
                    let grating = (p.freq.0 * xf + p.freq.1 * yf + phase).sin();
                    let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                    let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                    let v = p.colour[c] + grating_gain * grating + 0.35 * blob + 1.1 * unit.sample(&mut rng);
                    data.push(v as f32);
                }
            }
        }
        labels.push(y);
    }
    Ok(Dataset {
        images: Tensor::new(&[n, CHANNELS, size, size], data)?,
        labels,
        classes,
        splits: assign_splits(n, seed),
    })
}

/// Encode an image given as `[3, h, w]` planes with values in [0, 1].
pub fn encode_raw(w: usize, h: usize, planes: &[f32]) -> Result<Vec<u8>> {
    if planes.len() != CHANNELS * w * h {
        return Err(Error::config(format!("raster of {w}x{h} needs {} values, got {}", CHANNELS * w * h, planes.len())));
    }
    let mut out = format!("{RAW_MAGIC} {w} {h}\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out.extend_from_slice(&planes[(c * h + y) * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decode a raster file into `[3, h, w]` planes with values in [0, 1].
pub fn decode_raw(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |msg: String| Error::data(path, msg);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (w, h) = match fields.as_slice() {
        [m, w, h] if *m == RAW_MAGIC => (
            w.parse::<usize>().map_err(|_| bad(format!("bad width '{w}'")))?,
            h.parse::<usize>().map_err(|_| bad(format!("bad height '{h}'")))?,
        ),
        _ => return Err(bad(format!("expected '{RAW_MAGIC} <w> <h>', got '{header}'"))),
    };
    let body = &bytes[nl + 1..];
    let want = w * h * CHANNELS * 4;
    if body.len() != want {
        return Err(bad(format!("expected {want} bytes of pixel data, got {}", body.len())));
    }
    let mut planes = vec![0f32; CHANNELS * w * h];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !(0.0..=1.0).contains(&v) {
            return Err(bad(format!("pixel value {v} outside [0, 1]")));
        }
        let (pix, c) = (k / CHANNELS, k % CHANNELS);
        planes[c * w * h + pix] = v;
    }
    Ok((w, h, planes))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

pub fn load_directory(root: &Path) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::data(root, format!("need at least 2 class subdirectories, found {}", class_dirs.len())));
    }
    let mut size = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (y, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::data(dir, "class directory has no images"));
        }
        for f in files {
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let (w, h, planes) = decode_raw(&f, &bytes)?;
            if w != h {
                return Err(Error::data(&f, format!("image is {w}x{h}; only square images are supported")));
            }
            match size {
                None => size = Some(w),
                Some(s) if s != w => {
                    return Err(Error::data(&f, format!("image is {w}x{h} but earlier images are {s}x{s}")));
                }
                _ => {}
            }
            data.extend(planes.iter().map(|v| (v - 0.5) / 0.25));
            labels.push(y);
        }
    }
    let size = size.expect("at least one image");
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new(&[n, CHANNELS, size, size], data)?,
        labels,
        classes: class_dirs.len(),
        splits: assign_splits(n, 0),
    })
}

/// Random horizontal flip and a per-channel brightness offset, applied in
/// place to a `[b, 3, h, w]` batch.
pub fn augment<R: Rng + ?Sized>(images: &mut Tensor<f32>, noise_std: f64, rng: &mut R) {
    let s = images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let normal = Normal::new(0.0f64, noise_std.max(0.0)).expect("finite std");
    for img in images.data_mut().chunks_mut(c * h * w) {
        let flip = rng.random_bool(0.5);
        for plane in img.chunks_mut(h * w) {
            let offset = normal.sample(rng) as f32;
            for row in plane.chunks_mut(w) {
                if flip {
                    row.reverse();
                }
                row.iter_mut().for_each(|v| *v += offset);
            }
        }
    }
}
