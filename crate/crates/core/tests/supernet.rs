mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::slicing::{batch_input, extract_mismatches, poison, scrambled, variant_mismatches, Reads};
use common::{randn_t, rng};
use effnas::blocks::{residual, Remap, Slice};
use effnas::supernet::{
    accumulate_loss, sample_subnet, sandwich_train_step, Layer, SampleKind, SearchSpace, Subnet, SubnetConfig,
    Supernet, STAGES,
};
use effnas::tensor::{AdamW, Mode, Tape, Tensor, Weights};
use effnas::Error;
use proptest::prelude::*;

fn toy() -> SearchSpace {
    SearchSpace::default()
}

#[test]
fn slicing_matches_physical_copy_for_every_layer_and_width() {
    for dual3 in [false, true] {
        let space = SearchSpace {
            dual_path_stage3: dual3,
            attn_stride: [1, 1, 2, 1],
            ..toy()
        };
        let net = scrambled(&space, 3);
        let bad = variant_mismatches(&net);
        assert!(bad.is_empty(), "{bad:?}");
        // Every block was exercised at every width of its stage.
        let mut widths_seen: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for p in net.variants().unwrap() {
            widths_seen
                .entry(format!("{:?}{}", p.key.kind, p.key.stage))
                .or_default()
                .insert(p.key.width);
        }
        for (name, ws) in widths_seen {
            let stage: usize = name.chars().last().unwrap().to_digit(10).unwrap() as usize;
            let expected = match stage {
                0 => space.widths[0].len(),
                5 => space.widths[STAGES - 1].len(),
                s => space.widths[s - 1].len(),
            };
            assert_eq!(ws.len(), expected, "{name}");
        }
    }
}

#[test]
fn width_choice_outside_set_is_config_error() {
    let net = Supernet::<f32>::build(&toy(), 0).unwrap();
    let ffn = &net.stages[0][0].ffn;
    assert!(matches!(ffn.resolve(20, 2), Err(Error::Config(_))));
    assert!(matches!(ffn.expand.resolve(16, 40), Err(Error::Config(_))));
    let mut cfg = toy().max_config();
    cfg.widths[1] = 40;
    assert!(matches!(net.resolve(&cfg, 0.0), Err(Error::Config(_))));
}

#[test]
fn every_switchable_layer_has_one_norm_set_per_width_choice() {
    let space = toy();
    let net = Supernet::<f32>::build(&space, 0).unwrap();
    assert_eq!(net.stem.conv1.norms.len(), space.widths[0].len());
    assert_eq!(net.stem.conv2.norms.len(), space.widths[0].len());
    for j in 0..STAGES {
        for b in &net.stages[j] {
            assert_eq!(b.ffn.project.norms.len(), space.widths[j].len());
            let hidden: BTreeSet<usize> = space.widths[j]
                .iter()
                .flat_map(|c| space.expansions.iter().map(move |e| c * e))
                .collect();
            assert_eq!(b.ffn.expand.norm_widths(), hidden.iter().copied().collect::<Vec<_>>());
            if let Some(m) = &b.mhsa {
                assert_eq!(m.proj.norms.len(), space.widths[j].len());
            }
        }
    }
}

#[test]
fn builds_are_deterministic_per_seed() {
    let a = Supernet::<f32>::build(&toy(), 11).unwrap();
    let b = Supernet::<f32>::build(&toy(), 11).unwrap();
    let c = Supernet::<f32>::build(&toy(), 12).unwrap();
    let mut differs = false;
    for ((_, pa), ((_, pb), (_, pc))) in a.weights.params.iter().zip(b.weights.params.iter().zip(c.weights.params.iter())) {
        assert_eq!(pa.name, pb.name);
        assert!(pa.value.bitwise_eq(&pb.value), "{}", pa.name);
        differs |= !pa.value.bitwise_eq(&pc.value);
    }
    assert!(differs);
}

#[test]
fn max_config_equals_extracted_network() {
    let space = toy();
    let net = scrambled(&space, 5);
    let cfg = sample_subnet(&space, SampleKind::Max, 0);
    let x = batch_input([1, 3, 32, 32], 4, 9);
    let sub = net.extract(&cfg).unwrap();
    assert!(net.logits(&cfg, &x).unwrap().bitwise_eq(&sub.logits(&x).unwrap()));
    // At max config every slice is the whole tensor, so the copy is the
    // supernet itself minus the unused norm sets.
    for (_, p) in sub.weights.params.iter() {
        let id = net.weights.params.id(&p.name).unwrap();
        assert!(net.weights.params.value(id).bitwise_eq(&p.value), "{}", p.name);
    }
}

#[test]
fn extract_matches_supernet_eval_on_random_configs() {
    let space = SearchSpace {
        dual_path_stage3: true,
        ..toy()
    };
    let net = scrambled(&space, 6);
    let bad = extract_mismatches(&net, 20);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn eval_forward_is_a_pure_function() {
    let space = toy();
    let net = scrambled(&space, 8);
    let cfg = sample_subnet(&space, SampleKind::Random, 4);
    let x = batch_input([1, 3, 32, 32], 2, 1);
    let a = net.logits(&cfg, &x).unwrap();
    let b = net.logits(&cfg, &x).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn training_one_width_leaves_other_norm_sets_untouched() {
    let space = toy();
    let mut net = Supernet::<f32>::build(&space, 2).unwrap();
    let before = net.weights.clone();
    let cfg = space.min_config();
    let x = batch_input([1, 3, 32, 32], 4, 2);
    accumulate_loss(&mut net, &cfg, &x, &[0, 1, 2, 3], 0.0, 0).unwrap();
    AdamW::default().step(&mut net.weights.params, 1e-2).unwrap();

    let c_max = *space.widths[0].last().unwrap();
    let c_min = space.widths[0][0];
    let other = net.stem.conv1.norms[&c_max];
    let used = net.stem.conv1.norms[&c_min];
    for id in [other.gamma, other.beta] {
        assert!(net.weights.params.value(id).bitwise_eq(before.params.value(id)));
    }
    assert_eq!(net.weights.stats.get(other.stats), before.stats.get(other.stats));
    assert_ne!(net.weights.stats.get(used.stats), before.stats.get(used.stats));
    assert!(!net.weights.params.value(used.gamma).bitwise_eq(before.params.value(used.gamma)));
}

#[test]
fn drop_path_is_unbiased() {
    let n = 10_000;
    let (c, keep) = (6, 0.8);
    let mut r = rng(77);
    let x1: Tensor<f64> = randn_t(&mut r, &[1, c, 1, 1]);
    let b1: Tensor<f64> = randn_t(&mut r, &[1, c, 1, 1]);
    let tile = |t: &Tensor<f64>| Tensor::new(&[n, c, 1, 1], t.data().repeat(n)).unwrap();

    let mut w = Weights::<f64>::new();
    let sid = w.params.add("scale", Tensor::full(&[c], 0.7)).unwrap();
    let scale = Slice {
        id: sid,
        extents: vec![c],
    };
    let mut tape = Tape::with_seed(Mode::Train, 5);
    let xv = tape.input(tile(&x1)).unwrap();
    let bv = tape.input(tile(&b1)).unwrap();
    let y = residual(&mut tape, &w, xv, bv, &scale, keep).unwrap();
    let y = tape.value(y);

    let sd_factor = ((1.0 - keep) / keep).sqrt() / (n as f64).sqrt();
    for ch in 0..c {
        let expected = x1.data()[ch] + 0.7 * b1.data()[ch];
        let mean = (0..n).map(|s| y.data()[s * c + ch]).sum::<f64>() / n as f64;
        let sigma = (0.7 * b1.data()[ch]).abs() * sd_factor;
        assert!((mean - expected).abs() <= 3.0 * sigma, "channel {ch}: {mean} vs {expected} (sigma {sigma})");
        // Each sample is either the input or the rescaled branch.
        for s in 0..n {
            let v = y.data()[s * c + ch];
            let dropped = x1.data()[ch];
            let kept = x1.data()[ch] + 0.7 * b1.data()[ch] / keep;
            assert!((v - dropped).abs() < 1e-12 || (v - kept).abs() < 1e-12);
        }
    }
}

#[test]
fn drop_path_schedule_is_linear_over_the_maximal_network() {
    let space = toy();
    let net = Supernet::<f32>::build(&space, 0).unwrap();
    let plan = net.resolve(&space.max_config(), 0.1).unwrap();
    let keeps: Vec<f64> = plan
        .layers
        .iter()
        .filter_map(|p| match &p.layer {
            Layer::Mhsa(m) => Some(m.keep),
            Layer::Ffn(f) => Some(f.keep),
            _ => None,
        })
        .collect();
    assert_eq!(keeps.len(), space.residual_count());
    assert_eq!(keeps[0], 1.0);
    assert!((keeps.last().unwrap() - 0.9).abs() < 1e-12);
    let step = keeps[0] - keeps[1];
    for w in keeps.windows(2) {
        assert!((w[0] - w[1] - step).abs() < 1e-12);
    }
    // A subnet keeps the probabilities of its blocks' positions in the
    // maximal network.
    let mut sub = net.extract(&space.min_config()).unwrap();
    sub.set_drop_path(0.1);
    let resolved = net.resolve(&space.min_config(), 0.1).unwrap();
    for (a, b) in sub.network.layers.iter().zip(&resolved.layers) {
        assert_eq!(a.residual, b.residual);
        if let (Layer::Ffn(x), Layer::Ffn(y)) = (&a.layer, &b.layer) {
            assert_eq!(x.keep, y.keep);
        }
    }
}

#[test]
fn drop_path_is_off_in_eval_and_at_zero_rate() {
    let space = toy();
    let net = scrambled(&space, 1);
    let cfg = space.max_config();
    let x = batch_input([1, 3, 32, 32], 2, 4);
    let plain = net.logits(&cfg, &x).unwrap();
    let mut tape = Tape::with_seed(Mode::Eval, 9);
    let xv = tape.input(x.clone()).unwrap();
    let y = net.forward(&mut tape, &cfg, xv, 0.5).unwrap();
    assert!(tape.value(y).bitwise_eq(&plain));
}

#[test]
fn skipped_blocks_do_not_affect_the_output() {
    let space = toy();
    let net = scrambled(&space, 13);
    let mut cfg = space.max_config();
    cfg.depths[2] = 1;
    cfg.expansions[2].truncate(1);
    cfg.mhsa[2].truncate(1);
    cfg.mhsa[3][1] = false;
    let plan = net.resolve(&cfg, 0.0).unwrap();
    let x = batch_input([1, 3, 32, 32], 2, 5);
    let reference = net.logits(&cfg, &x).unwrap();
    let mut reads = Reads::default();
    plan.remap(&mut reads).unwrap();
    let poisoned = poison(&net.weights, &reads);
    assert!(plan.logits(&poisoned, &x).unwrap().bitwise_eq(&reference));
}

#[test]
fn min_and_max_samples() {
    let space = toy();
    let max = sample_subnet(&space, SampleKind::Max, 0);
    assert_eq!(max.depths, space.depths);
    assert_eq!(max.widths, [24, 48, 96, 128]);
    assert!(max.expansions.iter().flatten().all(|&e| e == 4));
    assert!(max.mhsa[2].iter().chain(&max.mhsa[3]).all(|&m| m));
    assert!(max.mhsa[0].iter().chain(&max.mhsa[1]).all(|&m| !m));
    let min = sample_subnet(&space, SampleKind::Min, 0);
    assert_eq!(min.depths, [1; 4]);
    assert_eq!(min.widths, [16, 32, 64, 96]);
    assert!(min.expansions.iter().flatten().all(|&e| e == 2));
    assert!(min.mhsa.iter().flatten().all(|&m| !m));
    max.validate(&space).unwrap();
    min.validate(&space).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn random_samples_are_valid(seed in any::<u64>()) {
        let space = toy();
        let cfg = sample_subnet(&space, SampleKind::Random, seed);
        prop_assert!(cfg.validate(&space).is_ok());
        prop_assert_eq!(SubnetConfig::decode(&cfg.encode()).unwrap(), cfg);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let space = toy();
    let net = Supernet::<f32>::build(&space, 0).unwrap();
    let mut cfg = space.max_config();
    cfg.depths[0] = 0;
    assert!(matches!(net.resolve(&cfg, 0.0), Err(Error::Config(_))));
    let mut cfg = space.max_config();
    cfg.mhsa[0][0] = true;
    assert!(matches!(net.extract(&cfg), Err(Error::Config(_))));
    let mut cfg = space.max_config();
    cfg.expansions[1][0] = 5;
    assert!(matches!(net.resolve(&cfg, 0.0), Err(Error::Config(_))));
    let mut cfg = space.max_config();
    cfg.depths[3] = 4;
    assert!(matches!(net.resolve(&cfg, 0.0), Err(Error::Config(_))));
}

#[test]
fn invalid_spaces_are_rejected() {
    let bad = [
        SearchSpace {
            widths: [vec![], vec![32], vec![64], vec![96]],
            ..toy()
        },
        SearchSpace {
            widths: [vec![24, 16], vec![32], vec![64], vec![96]],
            ..toy()
        },
        SearchSpace {
            widths: [vec![12], vec![32], vec![64], vec![96]],
            ..toy()
        },
        SearchSpace {
            expansions: vec![],
            ..toy()
        },
        SearchSpace {
            resolution: 48,
            ..toy()
        },
        SearchSpace {
            attn_stride: [1, 1, 3, 1],
            ..toy()
        },
    ];
    for s in bad {
        assert!(matches!(Supernet::<f32>::build(&s, 0), Err(Error::Config(_))), "{s:?}");
    }
}

#[test]
fn enumeration_matches_closed_form_size() {
    let space = SearchSpace {
        depths: [1, 1, 2, 1],
        widths: [vec![8, 16], vec![16], vec![16, 24], vec![32]],
        expansions: vec![2, 3],
        ..toy()
    };
    let all = space.enumerate(10_000).unwrap();
    assert_eq!(all.len() as f64, space.size());
    let unique: BTreeSet<_> = all.iter().collect();
    assert_eq!(unique.len(), all.len());
    assert!(all.iter().all(|c| c.validate(&space).is_ok()));
    assert!(matches!(toy().enumerate(1000), Err(Error::Config(_))));
}

#[test]
fn variants_cover_every_reachable_block() {
    let space = SearchSpace {
        depths: [1, 1, 2, 1],
        widths: [vec![8, 16], vec![16, 24], vec![16, 24], vec![32, 40]],
        expansions: vec![2, 3],
        dual_path_stage3: true,
        ..toy()
    };
    let net = Supernet::<f32>::build(&space, 0).unwrap();
    let have: BTreeSet<_> = net.variants().unwrap().iter().map(|p| p.key).collect();
    let mut reachable = BTreeSet::new();
    for cfg in space.enumerate(100_000).unwrap() {
        reachable.extend(net.resolve(&cfg, 0.0).unwrap().keys());
    }
    assert_eq!(have, reachable);
}

#[test]
fn sandwich_step_reports_four_finite_losses_and_updates_shared_weights() {
    let space = toy();
    let mut net = Supernet::<f32>::build(&space, 0).unwrap();
    let before = net.weights.clone();
    let x = batch_input([1, 3, 32, 32], 8, 3);
    let labels: Vec<usize> = (0..8).map(|i| i % space.classes).collect();
    let losses = sandwich_train_step(&mut net, &x, &labels, &AdamW::default(), 1e-3, 0.1, 0).unwrap();
    assert!(losses.as_array().iter().all(|l| l.is_finite() && *l > 0.0));
    let id = net.weights.params.id("s4.b2.ffn.expand.weight").unwrap();
    assert!(!net.weights.params.value(id).bitwise_eq(before.params.value(id)));
    assert!(net.weights.params.iter().all(|(_, p)| p.grad.is_none()));
}

#[test]
fn sandwich_steps_are_reproducible() {
    let space = toy();
    let x = batch_input([1, 3, 32, 32], 4, 3);
    let labels = [0, 1, 2, 3];
    let run = || {
        let mut net = Supernet::<f32>::build(&space, 0).unwrap();
        let mut out = Vec::new();
        for step in 0..2 {
            out.push(sandwich_train_step(&mut net, &x, &labels, &AdamW::default(), 1e-3, 0.1, step).unwrap());
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn supernet_checkpoint_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let space = SearchSpace {
        dual_path_stage3: true,
        ..toy()
    };
    let mut net = scrambled(&space, 21);
    let x = batch_input([1, 3, 32, 32], 4, 3);
    sandwich_train_step(&mut net, &x, &[0, 1, 2, 3], &AdamW::default(), 1e-3, 0.0, 0).unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("step".to_string(), "1".to_string());
    net.save(&path, &meta, true).unwrap();
    let (loaded, got_meta) = Supernet::<f32>::load(&path).unwrap();
    assert_eq!(got_meta["step"], "1");
    assert_eq!(loaded.space, space);
    for ((_, a), (_, b)) in net.weights.params.iter().zip(loaded.weights.params.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
        assert!(a.first_moment.bitwise_eq(&b.first_moment), "{}", a.name);
        assert!(a.second_moment.bitwise_eq(&b.second_moment), "{}", a.name);
        assert_eq!(a.step, b.step);
    }
    for ((_, a), (_, b)) in net.weights.stats.iter().zip(loaded.weights.stats.iter()) {
        assert_eq!(a.mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.var.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.var.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    for seed in 0..10 {
        let cfg = sample_subnet(&space, SampleKind::Random, seed);
        let x = batch_input([1, 3, 32, 32], 1, 50 + seed);
        assert!(net.logits(&cfg, &x).unwrap().bitwise_eq(&loaded.logits(&cfg, &x).unwrap()));
    }
}

#[test]
fn checkpoint_for_another_space_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    Supernet::<f32>::build(&toy(), 0).unwrap().save(&path, &BTreeMap::new(), false).unwrap();
    let other = SearchSpace {
        classes: 5,
        ..toy()
    };
    let mut net = Supernet::<f32>::build(&other, 0).unwrap();
    assert!(matches!(net.load_into(&path), Err(Error::Format(_))));
    // Wrong dtype, truncated file and garbage are format errors too.
    assert!(matches!(Supernet::<f64>::load(&path), Err(Error::Format(_))));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Supernet::<f32>::load(&path), Err(Error::Format(_))));
    std::fs::write(&path, b"hello\n").unwrap();
    assert!(matches!(Supernet::<f32>::load(&path), Err(Error::Format(_))));
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub.ckpt");
    let space = toy();
    let net = scrambled(&space, 2);
    let sub = net.extract(&space.min_config()).unwrap();
    sub.save(&path, &BTreeMap::new(), false).unwrap();
    let (loaded, _) = Subnet::<f32>::load(&path).unwrap();
    let x = batch_input([1, 3, 32, 32], 2, 8);
    assert!(sub.logits(&x).unwrap().bitwise_eq(&loaded.logits(&x).unwrap()));

    let mut other = net.extract(&space.max_config()).unwrap();
    let err = effnas::supernet::assign(&mut other.weights, &sub.weights).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    let mut same_count = net.extract(&space.min_config()).unwrap();
    let id = same_count.weights.params.id("stem.conv1.weight").unwrap();
    same_count.weights.params.get_mut(id).value = Tensor::zeros(&[1, 1, 1, 1]);
    let err = effnas::supernet::assign(&mut same_count.weights, &sub.weights).unwrap_err();
    assert!(err.to_string().contains("stem.conv1.weight"), "{err}");
}
