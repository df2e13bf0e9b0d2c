//! Slicing and extraction equivalence checks for supernets.

use std::collections::{BTreeSet, HashMap};

use effnas::blocks::{Mapper, Materializer, Norm, Remap, Slice};
use effnas::supernet::{sample_subnet, Layer, SampleKind, SearchSpace, Supernet};
use effnas::tensor::{Mode, ParamId, StatsId, Tape, Tensor, Weights};

use super::{randn_t, rng, scramble};

pub fn scrambled(space: &SearchSpace, seed: u64) -> Supernet<f32> {
    let mut net = Supernet::build(space, seed).unwrap();
    scramble(&mut net.weights, seed);
    net
}
const POISON: f32 = 4096.0;

/// Records the slices and norm sets a layer reads, without copying.
#[derive(Default)]
pub struct Reads {
    pub slices: HashMap<ParamId, Vec<usize>>,
    pub norms: Vec<Norm>,
}

impl Mapper for Reads {
    fn slice(&mut self, s: &Slice) -> effnas::Result<Slice> {
        assert!(self.slices.insert(s.id, s.extents.clone()).is_none(), "parameter read twice");
        Ok(s.clone())
    }

    fn norm(&mut self, n: &Norm) -> effnas::Result<Norm> {
        self.norms.push(*n);
        Ok(*n)
    }
}

/// Copy of `w` where every element a layer does not read holds a large
/// sentinel, so any stray read changes the output.
pub fn poison(w: &Weights<f32>, reads: &Reads) -> Weights<f32> {
    let mut out = w.clone();
    let mut keep: HashMap<ParamId, Option<Vec<usize>>> = HashMap::new();
    for (id, ext) in &reads.slices {
        keep.insert(*id, Some(ext.clone()));
    }
    let mut keep_stats: BTreeSet<StatsId> = BTreeSet::new();
    for n in &reads.norms {
        keep.insert(n.gamma, None);
        keep.insert(n.beta, None);
        keep_stats.insert(n.stats);
    }
    let ids: Vec<ParamId> = out.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let value = out.params.value_mut(id);
        let shape = value.shape().to_vec();
        let strides = effnas::tensor::strides(&shape);
        for (flat, v) in value.data_mut().iter_mut().enumerate() {
            let inside = match keep.get(&id) {
                None => false,
                Some(None) => true,
                Some(Some(ext)) => (0..shape.len()).all(|d| (flat / strides[d]) % shape[d] < ext[d]),
            };
            if !inside {
                *v = POISON;
            }
        }
    }
    let sids: Vec<StatsId> = out.stats.iter().map(|(id, _)| id).collect();
    for id in sids {
        if !keep_stats.contains(&id) {
            let s = out.stats.get_mut(id);
            s.mean.iter_mut().for_each(|m| *m = POISON);
            s.var.iter_mut().for_each(|v| *v = POISON);
        }
    }
    out
}

pub fn run_layer(layer: &Layer, w: &Weights<f32>, x: &Tensor<f32>, mode: Mode) -> Tensor<f32> {
    let mut tape = Tape::new(mode);
    let xv = tape.input(x.clone()).unwrap();
    let y = layer.forward(&mut tape, w, xv).unwrap_or_else(|e| panic!("{e}"));
    tape.value(y).clone()
}

pub fn batch_input(shape: [usize; 4], batch: usize, seed: u64) -> Tensor<f32> {
    let mut s = shape;
    s[0] = batch;
    randn_t(&mut rng(seed), &s)
}


/// Run every block variant shared, physically copied and against poisoned
/// weights in both modes; returns a description of each mismatch.
pub fn variant_mismatches(net: &Supernet<f32>) -> Vec<String> {
    let mut bad = Vec::new();
    for (k, p) in net.variants().unwrap().iter().enumerate() {
        let mut m = Materializer::new(&net.weights);
        let standalone = p.layer.remap(&mut m).unwrap();
        let copy = m.dst;
        let mut reads = Reads::default();
        p.layer.remap(&mut reads).unwrap();
        let poisoned = poison(&net.weights, &reads);
        let x = batch_input(p.input, 3, k as u64);
        for mode in [Mode::Eval, Mode::Train] {
            let shared = run_layer(&p.layer, &net.weights, &x, mode);
            if !shared.is_finite() {
                bad.push(format!("{} {mode:?}: non-finite output", p.key));
            }
            if !shared.bitwise_eq(&run_layer(&standalone, &copy, &x, mode)) {
                bad.push(format!("{} {mode:?}: shared vs copied", p.key));
            }
            if !shared.bitwise_eq(&run_layer(&p.layer, &poisoned, &x, mode)) {
                bad.push(format!("{} {mode:?}: reads outside its slice", p.key));
            }
        }
    }
    bad
}

/// Compare supernet and extracted-subnet eval logits for `n` random configs.
pub fn extract_mismatches(net: &Supernet<f32>, n: u64) -> Vec<String> {
    let res = net.space.resolution;
    let mut bad = Vec::new();
    for seed in 0..n {
        let cfg = sample_subnet(&net.space, SampleKind::Random, seed);
        let sub = net.extract(&cfg).unwrap();
        let x = batch_input([1, 3, res, res], 2, 100 + seed);
        let a = net.logits(&cfg, &x).unwrap();
        if !a.is_finite() || !a.bitwise_eq(&sub.logits(&x).unwrap()) {
            bad.push(format!("logits differ for {cfg}"));
        }
        if sub.weights.params.numel() != sub.network.param_count() {
            bad.push(format!("parameter count differs for {cfg}"));
        }
    }
    bad
}
