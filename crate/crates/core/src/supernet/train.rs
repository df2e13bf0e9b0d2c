use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AdamW, Element, Mode, Tape, Tensor};

use super::net::Supernet;
use super::space::SubnetConfig;

/// Which subnet of the search space to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Min,
    Max,
    Random,
}

/// Draw a configuration; `seed` only matters for [`SampleKind::Random`].
pub fn sample_subnet(space: &super::SearchSpace, kind: SampleKind, seed: u64) -> SubnetConfig {
    match kind {
        SampleKind::Min => space.min_config(),
        SampleKind::Max => space.max_config(),
        SampleKind::Random => space.random_config(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
}

/// Losses of the four subnets trained in one sandwich step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichLosses {
    pub min: f64,
    pub rand1: f64,
    pub rand2: f64,
    pub max: f64,
}

impl SandwichLosses {
    pub fn as_array(&self) -> [f64; 4] {
        [self.min, self.rand1, self.rand2, self.max]
    }
}

/// Train-mode loss of `cfg` on a batch; gradients are accumulated into the
/// supernet and normalization statistics updated.
pub fn accumulate_loss<T: Element>(
    net: &mut Supernet<T>,
    cfg: &SubnetConfig,
    images: &Tensor<T>,
    labels: &[usize],
    drop_path_rate: f64,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::with_seed(Mode::Train, seed);
    let x = tape.input(images.clone())?;
    let logits = net.forward(&mut tape, cfg, x, drop_path_rate)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {value} for subnet {cfg}")));
    }
    tape.backward(loss, &mut net.weights.params)?;
    tape.commit_stats(&mut net.weights.stats);
    Ok(value)
}

/// One sandwich iteration: min, two random and max subnets each run a
/// forward/backward pass into the shared gradients, then a single optimizer
/// step is taken.
pub fn sandwich_train_step<T: Element>(
    net: &mut Supernet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    opt: &AdamW,
    lr: f64,
    drop_path_rate: f64,
    seed: u64,
) -> Result<SandwichLosses> {
    let space = net.space.clone();
    let cfgs = [
        sample_subnet(&space, SampleKind::Min, 0),
        sample_subnet(&space, SampleKind::Random, seed.wrapping_mul(2).wrapping_add(1)),
        sample_subnet(&space, SampleKind::Random, seed.wrapping_mul(2).wrapping_add(2)),
        sample_subnet(&space, SampleKind::Max, 0),
    ];
    net.weights.params.zero_grad();
    let mut losses = [0.0; 4];
    for (k, cfg) in cfgs.iter().enumerate() {
        let tape_seed = seed.wrapping_mul(4).wrapping_add(k as u64);
        losses[k] = accumulate_loss(net, cfg, images, labels, drop_path_rate, tape_seed)?;
    }
    opt.step(&mut net.weights.params, lr)?;
    net.weights.params.zero_grad();
    Ok(SandwichLosses {
        min: losses[0],
        rand1: losses[1],
        rand2: losses[2],
        max: losses[3],
    })
}
