//! Shared helpers for integration tests: finite-difference gradient oracles,
//! weight scrambling and a synthetic accuracy oracle.

#![allow(dead_code)]

pub mod grad;
pub mod slicing;
use effnas::tensor::{Mode, ParamStore, Tape, Tensor, Var, Weights};
use effnas::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

/// Norm-wise relative error `|a - b| / max(|a| + |b|, 1e-4)`.
///
/// The floor keeps gradients that are identically zero (a bias feeding a
/// batch-statistics normalization) from dividing roundoff by roundoff.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-4)
}

/// Scalar `sum(out * r)` for a fixed random projection `r`, which exercises
/// every output element with distinct weights.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = randn(&mut rng(seed ^ 0x5eed), &shape);
    let r = tape.input(r)?;
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

/// Compare analytic input gradients of `f` with central differences.
///
/// Returns the worst relative error over all inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], mode: Mode, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, seed).unwrap();
    tape.backward(loss, &mut ParamStore::new()).unwrap();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new(mode);
        let vs: Vec<Var> = ins.iter().map(|x| t.input(x.clone()).unwrap()).collect();
        let o = f(&mut t, &vs).unwrap();
        let l = project(&mut t, o, seed).unwrap();
        t.value(l).data()[0]
    };

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut work = inputs.to_vec();
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Compare analytic parameter and input gradients of a block forward with
/// central differences. Returns `(worst_param_err, input_err)`.
pub fn check_params<F>(weights: &Weights<f64>, x: &Tensor<f64>, mode: Mode, seed: u64, f: F) -> (f64, f64)
where
    F: Fn(&mut Tape<f64>, &Weights<f64>, Var) -> Result<Var>,
{
    let mut w = weights.clone();
    w.params.zero_grad();
    let mut tape = Tape::new(mode);
    let xv = tape.leaf(x.clone()).unwrap();
    let out = f(&mut tape, &w, xv).unwrap();
    let loss = project(&mut tape, out, seed).unwrap();
    tape.backward(loss, &mut w.params).unwrap();
    let x_grad = tape.grad(xv).unwrap().to_vec();

    let eval = |w: &Weights<f64>, x: &Tensor<f64>| -> f64 {
        let mut t = Tape::new(mode);
        let xv = t.input(x.clone()).unwrap();
        let o = f(&mut t, w, xv).unwrap();
        let l = project(&mut t, o, seed).unwrap();
        t.value(l).data()[0]
    };

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = w.params.iter().map(|(id, _)| id).collect();
    let mut probe = weights.clone();
    for id in ids {
        let analytic = w.params.get(id).grad_or_zero().into_data();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = probe.params.value(id).data()[i];
            probe.params.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe, x);
            probe.params.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe, x);
            probe.params.value_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err.is_finite());
        worst = worst.max(err);
    }

    let mut xs = x.clone();
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        xs.data_mut()[i] = orig + FD_STEP;
        let up = eval(weights, &xs);
        xs.data_mut()[i] = orig - FD_STEP;
        let down = eval(weights, &xs);
        xs.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    (worst, rel_err(&x_grad, &numeric))
}

/// Replace every parameter and running statistic with seeded noise so that
/// constant initializations cannot mask a wrong slice or norm set.
pub fn scramble<T: effnas::tensor::Element>(w: &mut Weights<T>, seed: u64) {
    let mut r = rng(seed ^ 0x5c4a);
    for p in w.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = T::of(r.random::<f64>() - 0.5);
        }
    }
    let ids: Vec<_> = w.stats.iter().map(|(id, _)| id).collect();
    for id in ids {
        let s = w.stats.get_mut(id);
        for m in s.mean.iter_mut() {
            *m = T::of(r.random::<f64>() - 0.5);
        }
        for v in s.var.iter_mut() {
            *v = T::of(0.5 + r.random::<f64>());
        }
    }
}

pub fn randn_t<T: effnas::tensor::Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    randn(rng, shape).cast()
}

/// Toy search space of 384 configurations touching every action kind:
/// a depth and a width choice in stage 2, attention toggles in stages 3
/// and 4, and two expansion ratios everywhere.
pub fn small_space() -> effnas::supernet::SearchSpace {
    effnas::supernet::SearchSpace {
        depths: [1, 2, 1, 1],
        widths: [vec![16], vec![16, 24], vec![32], vec![48]],
        expansions: vec![2, 4],
        heads: [1, 1, 2, 2],
        ..Default::default()
    }
}

/// Capacity score strictly increasing in every depth, width, expansion and
/// attention choice, with later stages weighted more.
pub fn capacity(space: &effnas::supernet::SearchSpace, cfg: &effnas::supernet::SubnetConfig) -> f64 {
    const STAGE_WEIGHT: [f64; 4] = [1.0, 1.2, 1.5, 1.8];
    let emax = *space.expansions.last().unwrap() as f64;
    (0..4)
        .map(|j| {
            let width = cfg.widths[j] as f64 / *space.widths[j].last().unwrap() as f64;
            let blocks: f64 = (0..cfg.depths[j])
                .map(|i| cfg.expansions[j][i] as f64 / emax + if cfg.mhsa[j][i] { 0.5 } else { 0.0 })
                .sum();
            STAGE_WEIGHT[j] * width * blocks
        })
        .sum()
}

/// Saturating accuracy in (0.3, 0.9) driven by [`capacity`].
pub fn capacity_oracle(
    space: &effnas::supernet::SearchSpace,
) -> impl FnMut(&effnas::supernet::SubnetConfig) -> Result<f64> + '_ {
    let scale = capacity(space, &space.max_config()) / 2.0;
    move |cfg| Ok(0.9 - 0.6 * (-capacity(space, cfg) / scale).exp())
}

/// Cost model with an analytic table at `ms_per_gmac` and default scoring.
pub fn analytic_cost(space: &effnas::supernet::SearchSpace, ms_per_gmac: f64) -> effnas::search::CostModel {
    let table = effnas::cost::build_latency_table(space, effnas::cost::Device::Analytic { ms_per_gmac }).unwrap();
    effnas::search::CostModel::new(space.clone(), table, effnas::cost::MesConfig::default()).unwrap()
}
