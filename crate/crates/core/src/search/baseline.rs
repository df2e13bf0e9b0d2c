use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::engine::{point, AccuracyOracle, CostModel, Point, SearchObjective, SearchOutcome};

/// Largest space [`brute_force_pareto`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 100_000;

/// Accuracy and cost of every configuration of the space.
pub fn evaluate_all<O: AccuracyOracle>(oracle: &mut O, cost: &CostModel) -> Result<Vec<Point>> {
    cost.space
        .enumerate(BRUTE_FORCE_LIMIT)?
        .into_iter()
        .map(|cfg| point(oracle, cost, cfg))
        .collect()
}

/// `a` is at least as good as `b` in accuracy and MES, and better in one.
pub fn dominates(a: &Point, b: &Point) -> bool {
    let (aa, am) = (a.accuracy, a.metrics.mes);
    let (ba, bm) = (b.accuracy, b.metrics.mes);
    aa >= ba && am >= bm && (aa > ba || am > bm)
}

/// Points no other point dominates, by descending accuracy.
pub fn pareto_front(points: &[Point]) -> Vec<Point> {
    let mut order: Vec<&Point> = points.iter().collect();
    order.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then(b.metrics.mes.total_cmp(&a.metrics.mes))
    });
    let mut out = Vec::new();
    // Best MES among strictly more accurate points.
    let mut above = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let acc = order[i].accuracy;
        let mut j = i;
        while j < order.len() && order[j].accuracy == acc {
            j += 1;
        }
        let group_best = order[i].metrics.mes;
        for p in &order[i..j] {
            if p.metrics.mes > above && p.metrics.mes == group_best {
                out.push((*p).clone());
            }
        }
        above = above.max(group_best);
        i = j;
    }
    out
}

/// Exhaustive non-dominated set under (accuracy up, MES up).
pub fn brute_force_pareto<O: AccuracyOracle>(oracle: &mut O, cost: &CostModel) -> Result<Vec<Point>> {
    Ok(pareto_front(&evaluate_all(oracle, cost)?))
}

/// Most accurate point meeting `objective`; the first one on ties.
pub fn best_meeting<'a>(points: &'a [Point], objective: &SearchObjective) -> Option<&'a Point> {
    points
        .iter()
        .filter(|p| objective.is_met(&p.metrics))
        .fold(None, |best: Option<&Point>, p| match best {
            Some(b) if b.accuracy.total_cmp(&p.accuracy) != Ordering::Less => Some(b),
            _ => Some(p),
        })
}

/// Draw uniform random configs until `budget` of them meet `objective`
/// and return the most accurate (first on ties). Gives up after
/// `100 * budget` draws; if nothing met the objective by then the error
/// carries the highest-MES draw.
pub fn random_search<O: AccuracyOracle>(
    oracle: &mut O,
    cost: &CostModel,
    objective: SearchObjective,
    budget: usize,
    seed: u64,
) -> Result<Point> {
    objective.validate()?;
    if budget == 0 {
        return Err(Error::config("random search budget must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted: Option<Point> = None;
    let mut count = 0;
    let mut best_mes: Option<Point> = None;
    for _ in 0..budget.saturating_mul(100) {
        let cfg = cost.space.random_config(&mut rng);
        let metrics = cost.metrics(&cfg)?;
        if !objective.is_met(&metrics) {
            if best_mes.as_ref().is_none_or(|b| metrics.mes > b.metrics.mes) {
                best_mes = Some(Point {
                    config: cfg,
                    accuracy: f64::NAN,
                    metrics,
                });
            }
            continue;
        }
        let p = point(oracle, cost, cfg)?;
        if accepted.as_ref().is_none_or(|b| p.accuracy > b.accuracy) {
            accepted = Some(p);
        }
        count += 1;
        if count == budget {
            break;
        }
    }
    if let Some(p) = accepted {
        return Ok(p);
    }
    let mut best = best_mes.expect("at least one draw");
    best.accuracy = oracle.accuracy(&best.config)?;
    Err(Error::UnreachableObjective {
        message: format!("no random draw met {objective} within {} draws", budget.saturating_mul(100)),
        best: Box::new(SearchOutcome {
            start: best.clone(),
            end: best,
            history: Vec::new(),
            anomalies: Vec::new(),
        }),
    })
}
