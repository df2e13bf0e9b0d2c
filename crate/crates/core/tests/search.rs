mod common;

use common::{analytic_cost, capacity_oracle, randn_t, rng, small_space};
use effnas::search::{
    apply, best_meeting, brute_force_pareto, dominates, enumerate_actions, evaluate_accuracy, evaluate_all,
    pareto_front, random_search, rank, replay, run_search, score_frontier, Action, CachedOracle, CostModel,
    Metrics, Partition, Point, Report, ScoredAction, SearchObjective, SearchOutcome, SlimPart,
};
use effnas::supernet::{SearchSpace, SubnetConfig, Supernet};
use effnas::tensor::Tensor;
use effnas::{Error, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn enum_space() -> SearchSpace {
    SearchSpace {
        depths: [2, 1, 2, 1],
        widths: [vec![8, 16], vec![16, 24], vec![24, 32], vec![32, 40]],
        expansions: vec![2, 4],
        heads: [1, 1, 1, 1],
        ..Default::default()
    }
}

fn idx(choices: &[usize], v: usize) -> i64 {
    choices.iter().position(|&c| c == v).unwrap() as i64
}

/// Number of unit capacity decrements separating `child` from `parent`, or
/// None if `child` is not a reduction of `parent`.
fn reduction_distance(space: &SearchSpace, parent: &SubnetConfig, child: &SubnetConfig) -> Option<i64> {
    let mut d = 0;
    for j in 0..4 {
        let (dp, dc) = (parent.depths[j], child.depths[j]);
        let wd = idx(&space.widths[j], parent.widths[j]) - idx(&space.widths[j], child.widths[j]);
        if dc > dp || wd < 0 {
            return None;
        }
        d += (dp - dc) as i64 + wd;
        for i in 0..dc {
            let ed = idx(&space.expansions, parent.expansions[j][i]) - idx(&space.expansions, child.expansions[j][i]);
            let md = parent.mhsa[j][i] as i64 - child.mhsa[j][i] as i64;
            if ed < 0 || md < 0 {
                return None;
            }
            d += ed + md;
        }
    }
    Some(d)
}

#[test]
fn min_config_has_no_actions() {
    for space in [SearchSpace::default(), small_space(), enum_space()] {
        assert!(enumerate_actions(&space, &space.min_config()).is_empty());
    }
}

#[test]
fn max_config_action_count() {
    let space = SearchSpace::default();
    let actions = enumerate_actions(&space, &space.max_config());
    // Last-block removal per stage, attention toggles on the 3+3 blocks of
    // stages 3 and 4, one width step per stage, one expansion step per block.
    assert_eq!(actions.len(), 4 + 6 + 4 + 10);
    let count = |f: fn(&Action) -> bool| actions.iter().filter(|a| f(a)).count();
    assert_eq!(count(|a| matches!(a, Action::SlimBlock { part: SlimPart::Whole, .. })), 4);
    assert_eq!(count(|a| matches!(a, Action::SlimBlock { part: SlimPart::MhsaOnly, .. })), 6);
    assert_eq!(count(|a| matches!(a, Action::ShrinkWidth { .. })), 4);
    assert_eq!(count(|a| matches!(a, Action::ShrinkExpansion { .. })), 10);
}

#[test]
fn actions_match_direct_enumeration_of_one_step_reductions() {
    let space = enum_space();
    let all = space.enumerate(1_000_000).unwrap();
    let mut r = rng(11);
    let mut states = vec![space.max_config(), space.min_config()];
    states.extend((0..8).map(|_| space.random_config(&mut r)));
    for cfg in &states {
        let mut expected: Vec<&SubnetConfig> = all
            .iter()
            .filter(|c| reduction_distance(&space, cfg, c) == Some(1))
            .collect();
        expected.sort();
        let mut got: Vec<SubnetConfig> = enumerate_actions(&space, cfg)
            .into_iter()
            .map(|a| apply(&space, cfg, a).unwrap())
            .collect();
        got.sort();
        assert_eq!(got.iter().collect::<Vec<_>>(), expected, "state {cfg}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn applied_actions_yield_valid_distinct_configs(seed in any::<u64>()) {
        let space = SearchSpace::default();
        let cfg = space.random_config(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen = std::collections::BTreeSet::new();
        for a in enumerate_actions(&space, &cfg) {
            let next = apply(&space, &cfg, a).unwrap();
            prop_assert!(next.validate(&space).is_ok());
            prop_assert!(next != cfg);
            prop_assert!(seen.insert(next));
        }
    }

    #[test]
    fn actions_round_trip_through_text(seed in any::<u64>()) {
        let space = SearchSpace::default();
        let cfg = space.random_config(&mut ChaCha8Rng::seed_from_u64(seed));
        for a in enumerate_actions(&space, &cfg) {
            prop_assert_eq!(a.to_string().parse::<Action>().unwrap(), a);
        }
    }
}

#[test]
fn inapplicable_actions_are_rejected() {
    let space = SearchSpace::default();
    let min = space.min_config();
    let max = space.max_config();
    let cases = [
        (&min, Action::ShrinkWidth { stage: 0 }),
        (&min, Action::ShrinkExpansion { stage: 1, block: 0 }),
        (
            &min,
            Action::SlimBlock {
                stage: 2,
                block: 0,
                part: SlimPart::MhsaOnly,
            },
        ),
        (
            &max,
            Action::SlimBlock {
                stage: 2,
                block: 0,
                part: SlimPart::Whole,
            },
        ),
        (&max, Action::ShrinkExpansion { stage: 0, block: 5 }),
    ];
    for (cfg, a) in cases {
        assert!(matches!(apply(&space, cfg, a), Err(Error::Config(_))), "{a}");
    }
    assert!("shrink_width:s5".parse::<Action>().is_err());
    assert!("grow:s1".parse::<Action>().is_err());
}

fn scored(dacc: f64, dmes: f64, index: usize) -> ScoredAction {
    let space = small_space();
    let cfg = space.min_config();
    ScoredAction {
        action: Action::ShrinkWidth { stage: 0 },
        index,
        dacc,
        dmes,
        ratio: dacc / dmes,
        after: Point {
            config: cfg,
            accuracy: 0.5,
            metrics: Metrics {
                params: 1,
                latency_ms: 1.0,
                mes: 1.0,
            },
        },
    }
}

fn best_of(mut xs: Vec<ScoredAction>) -> usize {
    xs.sort_by(rank);
    xs[0].index
}

#[test]
fn ranking_sign_and_tie_rules() {
    // Unchanged accuracy beats any positive ratio.
    assert_eq!(best_of(vec![scored(0.5, 10.0, 0), scored(0.0, 0.1, 1)]), 1);
    // Improving accuracy beats unchanged accuracy, and the most negative
    // ratio wins among improvements.
    assert_eq!(best_of(vec![scored(0.0, 5.0, 0), scored(-0.1, 5.0, 1)]), 1);
    assert_eq!(best_of(vec![scored(-1.0, 10.0, 0), scored(-1.0, 2.0, 1)]), 1);
    // Equal ratios: larger MES gain, then enumeration order.
    assert_eq!(best_of(vec![scored(1.0, 2.0, 0), scored(2.0, 4.0, 1)]), 1);
    assert_eq!(best_of(vec![scored(0.0, 3.0, 0), scored(0.0, 7.0, 1)]), 1);
    assert_eq!(best_of(vec![scored(1.0, 2.0, 1), scored(1.0, 2.0, 0)]), 0);
}

#[test]
fn two_action_state_picks_hand_computed_argmin() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    // Min config except stage-1 and stage-2 expansions at 4: exactly two
    // frontier actions.
    let mut state = space.min_config();
    state.expansions[0][0] = 4;
    state.expansions[1][0] = 4;
    let actions = enumerate_actions(&space, &state);
    assert_eq!(
        actions,
        vec![
            Action::ShrinkExpansion { stage: 0, block: 0 },
            Action::ShrinkExpansion { stage: 1, block: 0 }
        ]
    );
    let a = apply(&space, &state, actions[0]).unwrap();
    let b = apply(&space, &state, actions[1]).unwrap();
    let (mes_s, mes_a, mes_b) = (
        cost.metrics(&state).unwrap().mes,
        cost.metrics(&a).unwrap().mes,
        cost.metrics(&b).unwrap().mes,
    );
    let table = [(state.clone(), 0.80), (a.clone(), 0.78), (b.clone(), 0.77)];
    let mut oracle = |c: &SubnetConfig| -> Result<f64> { Ok(table.iter().find(|(t, _)| t == c).unwrap().1) };
    let current = effnas::search::Point {
        config: state.clone(),
        accuracy: 0.80,
        metrics: cost.metrics(&state).unwrap(),
    };
    let frontier = score_frontier(&mut oracle, &cost, &current, &mut Vec::new()).unwrap();
    let ratio_a = 2.0 / (mes_a - mes_s);
    let ratio_b = 3.0 / (mes_b - mes_s);
    let expected = if ratio_a <= ratio_b { actions[0] } else { actions[1] };
    assert_eq!(frontier[0].action, expected);
    let fa = frontier.iter().find(|s| s.action == actions[0]).unwrap();
    assert!((fa.dacc - 2.0).abs() < 1e-9);
    assert!((fa.ratio - ratio_a).abs() < 1e-9 * ratio_a.abs());

    // Reversing which child loses less flips the choice when it should.
    let table2 = [(state.clone(), 0.80), (a, 0.70), (b, 0.79)];
    let mut oracle2 = |c: &SubnetConfig| -> Result<f64> { Ok(table2.iter().find(|(t, _)| t == c).unwrap().1) };
    let frontier2 = score_frontier(&mut oracle2, &cost, &current, &mut Vec::new()).unwrap();
    let expected2 = if 10.0 / (mes_a - mes_s) <= 1.0 / (mes_b - mes_s) {
        actions[0]
    } else {
        actions[1]
    };
    assert_eq!(frontier2[0].action, expected2);
}

fn midpoint_objective(cost: &CostModel) -> SearchObjective {
    let space = &cost.space;
    let hi = cost.metrics(&space.min_config()).unwrap().mes;
    let lo = cost.metrics(&space.max_config()).unwrap().mes;
    SearchObjective::MesAtLeast((hi * lo).sqrt())
}

#[test]
fn objective_met_by_max_config_returns_it() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    let max_mes = cost.metrics(&space.max_config()).unwrap().mes;
    let mut oracle = capacity_oracle(&space);
    let out = run_search(&mut oracle, &cost, SearchObjective::MesAtLeast(max_mes)).unwrap();
    assert_eq!(out.end.config, space.max_config());
    assert!(out.history.is_empty());
}

/// Check every step of `out` against an independent re-scoring of its
/// frontier.
fn assert_greedy_and_monotone(
    cost: &CostModel,
    oracle: &mut impl FnMut(&SubnetConfig) -> Result<f64>,
    out: &SearchOutcome,
) {
    let space = &cost.space;
    let mut cfg = space.max_config();
    let mut prev = cost.metrics(&cfg).unwrap();
    for step in &out.history {
        let acc = oracle(&cfg).unwrap();
        let mut cands = Vec::new();
        for a in enumerate_actions(space, &cfg) {
            let next = apply(space, &cfg, a).unwrap();
            let m = cost.metrics(&next).unwrap();
            let dmes = m.mes - prev.mes;
            if dmes > 0.0 {
                cands.push((a, 100.0 * (acc - oracle(&next).unwrap()), dmes));
            }
        }
        let chosen = cands.iter().find(|c| c.0 == step.action).expect("applied action was a candidate");
        for other in &cands {
            let better = if (other.1 < 0.0) != (chosen.1 < 0.0) {
                other.1 < 0.0
            } else {
                other.1 / other.2 < chosen.1 / chosen.2
            };
            assert!(!better, "{} beats applied {}", other.0, step.action);
        }
        cfg = apply(space, &cfg, step.action).unwrap();
        let m = cost.metrics(&cfg).unwrap();
        assert!(m.mes > prev.mes);
        assert!(m.params <= prev.params);
        assert!(m.latency_ms <= prev.latency_ms);
        assert_eq!((m.params, m.latency_ms, m.mes), (step.params, step.latency_ms, step.mes));
        prev = m;
    }
    assert_eq!(cfg, out.end.config);
}

#[test]
fn greedy_steps_are_optimal_monotone_and_replayable() {
    for (space, k) in [(small_space(), 1.0), (SearchSpace::default(), 0.25)] {
        let cost = analytic_cost(&space, k);
        let objective = midpoint_objective(&cost);
        let mut oracle = capacity_oracle(&space);
        let mut cached = CachedOracle::new(capacity_oracle(&space));
        let out = run_search(&mut cached, &cost, objective).unwrap();
        assert!(!out.history.is_empty());
        assert!(objective.is_met(&out.end.metrics));
        assert_greedy_and_monotone(&cost, &mut oracle, &out);
        assert_eq!(replay(&space, out.history.iter().map(|s| &s.action)).unwrap(), out.end.config);
        // Stops as soon as the objective holds.
        let before = out.history.len() - 1;
        let prev_mes = if before == 0 { out.start.metrics.mes } else { out.history[before - 1].mes };
        assert!(!objective.is_met(&Metrics {
            mes: prev_mes,
            ..out.end.metrics
        }));
        assert!(out.anomalies.is_empty());
    }
}

#[test]
fn constant_oracle_takes_largest_mes_gain() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    let objective = midpoint_objective(&cost);
    let mut oracle = |_: &SubnetConfig| -> Result<f64> { Ok(0.5) };
    let out = run_search(&mut oracle, &cost, objective).unwrap();
    let mut cfg = space.max_config();
    for step in &out.history {
        let best = enumerate_actions(&space, &cfg)
            .into_iter()
            .map(|a| cost.metrics(&apply(&space, &cfg, a).unwrap()).unwrap().mes)
            .fold(f64::NEG_INFINITY, f64::max);
        cfg = apply(&space, &cfg, step.action).unwrap();
        assert_eq!(cost.metrics(&cfg).unwrap().mes, best);
        assert_eq!(step.dacc, 0.0);
    }
}

#[test]
fn cache_avoids_repeat_evaluations() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    let mut cached = CachedOracle::new(capacity_oracle(&space));
    let out = run_search(&mut cached, &cost, midpoint_objective(&cost)).unwrap();
    let evals = cached.evaluations;
    let again = run_search(&mut cached, &cost, midpoint_objective(&cost)).unwrap();
    assert_eq!(out, again);
    assert_eq!(cached.evaluations, evals);
}

#[test]
fn unreachable_objective_carries_min_config() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    let mut oracle = capacity_oracle(&space);
    match run_search(&mut oracle, &cost, SearchObjective::ParamsAtMost(10.0)) {
        Err(Error::UnreachableObjective { best, .. }) => {
            assert_eq!(best.end.config, space.min_config());
            assert!(!best.history.is_empty());
        }
        other => panic!("expected unreachable objective, got {other:?}"),
    }
    assert_eq!(
        Error::UnreachableObjective {
            message: String::new(),
            best: Box::new(run_search(&mut oracle, &cost, SearchObjective::ParamsAtMost(1e12)).unwrap()),
        }
        .exit_code(),
        4
    );
}

#[test]
fn objectives_parse_and_validate() {
    assert_eq!("mes>=120".parse::<SearchObjective>().unwrap(), SearchObjective::MesAtLeast(120.0));
    assert_eq!("mes≥1.5".parse::<SearchObjective>().unwrap(), SearchObjective::MesAtLeast(1.5));
    assert_eq!("params<=2e6".parse::<SearchObjective>().unwrap(), SearchObjective::ParamsAtMost(2e6));
    assert_eq!("latency≤0.7".parse::<SearchObjective>().unwrap(), SearchObjective::LatencyAtMost(0.7));
    for bad in ["mes>=0", "params<=-3", "latency<=x", "acc>=0.5", "mes<=3"] {
        assert!(matches!(bad.parse::<SearchObjective>(), Err(Error::Config(_))), "{bad}");
    }
    let o = SearchObjective::LatencyAtMost(0.125);
    assert_eq!(o.to_string().parse::<SearchObjective>().unwrap(), o);
}

fn pt(acc: f64, mes: f64) -> Point {
    Point {
        config: small_space().min_config(),
        accuracy: acc,
        metrics: Metrics {
            params: 1,
            latency_ms: 1.0,
            mes,
        },
    }
}

#[test]
fn pareto_front_of_hand_points() {
    let pts = vec![
        pt(0.9, 10.0),
        pt(0.8, 20.0),
        pt(0.8, 15.0),
        pt(0.7, 20.0),
        pt(0.6, 30.0),
        pt(0.6, 30.0),
        pt(0.5, 25.0),
    ];
    let front: Vec<(f64, f64)> = pareto_front(&pts).iter().map(|p| (p.accuracy, p.metrics.mes)).collect();
    assert_eq!(front, vec![(0.9, 10.0), (0.8, 20.0), (0.6, 30.0), (0.6, 30.0)]);
}

#[test]
fn brute_force_front_is_exactly_the_non_dominated_set() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    let mut oracle = capacity_oracle(&space);
    let all = evaluate_all(&mut oracle, &cost).unwrap();
    assert_eq!(all.len(), 384);
    let front = brute_force_pareto(&mut oracle, &cost).unwrap();
    assert!(!front.is_empty());
    for p in &all {
        let dominated = all.iter().any(|q| dominates(q, p));
        let in_front = front.iter().any(|f| f.config == p.config);
        assert_eq!(in_front, !dominated, "{}", p.config);
    }
}

#[test]
fn brute_force_rejects_large_spaces() {
    let space = SearchSpace::default();
    let cost = analytic_cost(&space, 1.0);
    let mut oracle = capacity_oracle(&space);
    assert!(matches!(brute_force_pareto(&mut oracle, &cost), Err(Error::Config(_))));
}

#[test]
fn greedy_is_close_to_brute_force_on_the_toy_space() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    let objective = midpoint_objective(&cost);
    let mut oracle = capacity_oracle(&space);
    let all = evaluate_all(&mut oracle, &cost).unwrap();
    let best = best_meeting(&all, &objective).unwrap();
    let out = run_search(&mut oracle, &cost, objective).unwrap();
    assert!(out.end.accuracy <= best.accuracy);
    assert!(100.0 * (best.accuracy - out.end.accuracy) <= 1.0);
}

#[test]
fn random_search_budget_one_returns_first_accepted_draw() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    let objective = midpoint_objective(&cost);
    let mut oracle = capacity_oracle(&space);
    let got = random_search(&mut oracle, &cost, objective, 1, 5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let first = loop {
        let c = space.random_config(&mut r);
        if objective.is_met(&cost.metrics(&c).unwrap()) {
            break c;
        }
    };
    assert_eq!(got.config, first);
    let a = random_search(&mut oracle, &cost, objective, 10, 9).unwrap();
    let b = random_search(&mut oracle, &cost, objective, 10, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_search_errors() {
    let space = small_space();
    let cost = analytic_cost(&space, 1.0);
    let mut oracle = capacity_oracle(&space);
    let obj = midpoint_objective(&cost);
    assert!(matches!(random_search(&mut oracle, &cost, obj, 0, 1), Err(Error::Config(_))));
    assert!(matches!(
        random_search(&mut oracle, &cost, SearchObjective::ParamsAtMost(10.0), 3, 1),
        Err(Error::UnreachableObjective { .. })
    ));
}

#[test]
fn report_round_trips_and_detects_tampering() {
    let space = small_space();
    let cost = analytic_cost(&space, 0.3);
    let objective = midpoint_objective(&cost);
    let mut oracle = capacity_oracle(&space);
    let outcome = run_search(&mut oracle, &cost, objective).unwrap();
    let report = Report {
        space: space.clone(),
        objective,
        mes: cost.mes.clone(),
        outcome,
    };
    let text = report.to_text().unwrap();
    let parsed = Report::parse(&text).unwrap();
    assert_eq!(parsed, report);
    assert_eq!(parsed.to_text().unwrap(), text);

    let csv = report.trajectory_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,mes,params,latency_ms,accuracy");
    assert_eq!(lines.len(), report.outcome.history.len() + 2);

    let tampered = text.replace(
        &format!("config = {}", report.outcome.end.config.encode()),
        &format!("config = {}", space.max_config().encode()),
    );
    assert!(matches!(Report::parse(&tampered), Err(Error::Format(_))));
    assert!(matches!(Report::parse("[space]\n"), Err(Error::Format(_))));
}

#[test]
fn accuracy_is_deterministic_and_rejects_empty_partitions() {
    let space = SearchSpace::default();
    let net = Supernet::<f32>::build(&space, 3).unwrap();
    let mut r = rng(4);
    let images: Tensor<f32> = randn_t(&mut r, &[40, 3, 32, 32]);
    let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
    let part = Partition::new(&images, &labels).unwrap();
    let cfg = space.random_config(&mut r);
    let a = evaluate_accuracy(&net, &cfg, &part, 16).unwrap();
    let b = evaluate_accuracy(&net, &cfg, &part, 7).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));
    let empty = Tensor::<f32>::zeros(&[0, 3, 32, 32]);
    assert!(matches!(Partition::new(&empty, &[]), Err(Error::Config(_))));
}

#[test]
fn untrained_supernet_is_at_chance() {
    let space = SearchSpace::default();
    let net = Supernet::<f32>::build(&space, 8).unwrap();
    let n = 1000;
    let k = space.classes;
    let mut r = rng(21);
    let images: Tensor<f32> = randn_t(&mut r, &[n, 3, 32, 32]);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let part = Partition::new(&images, &labels).unwrap();
    let p = 1.0 / k as f64;
    // Two-sided 99% normal interval of a Binomial(n, p) proportion.
    let half = 2.5758 * (p * (1.0 - p) / n as f64).sqrt();
    for cfg in [space.max_config(), space.min_config()] {
        let acc = evaluate_accuracy(&net, &cfg, &part, 100).unwrap();
        assert!((acc - p).abs() <= half, "accuracy {acc} outside {p}±{half}");
    }
}
