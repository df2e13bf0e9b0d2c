use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use crate::cost::{count_params, LatencyTable, MesConfig};
use crate::error::{Error, Result};
use crate::supernet::{SearchSpace, Subnet, SubnetConfig, Supernet};
use crate::tensor::{Element, Tensor};

use super::action::{apply, enumerate_actions, Action};

/// Stopping condition of the greedy search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchObjective {
    MesAtLeast(f64),
    ParamsAtMost(f64),
    LatencyAtMost(f64),
}

impl SearchObjective {
    pub fn value(&self) -> f64 {
        match *self {
            SearchObjective::MesAtLeast(v) | SearchObjective::ParamsAtMost(v) | SearchObjective::LatencyAtMost(v) => v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.value();
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::config(format!("objective value must be positive, got {v}")));
        }
        Ok(())
    }

    pub fn is_met(&self, m: &Metrics) -> bool {
        match *self {
            SearchObjective::MesAtLeast(v) => m.mes >= v,
            SearchObjective::ParamsAtMost(v) => m.params as f64 <= v,
            SearchObjective::LatencyAtMost(v) => m.latency_ms <= v,
        }
    }
}

impl fmt::Display for SearchObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SearchObjective::MesAtLeast(v) => write!(f, "mes>={v:?}"),
            SearchObjective::ParamsAtMost(v) => write!(f, "params<={v:?}"),
            SearchObjective::LatencyAtMost(v) => write!(f, "latency<={v:?}"),
        }
    }
}

impl std::str::FromStr for SearchObjective {
    type Err = Error;

    /// Accepts `mes>=v`, `params<=p`, `latency<=t`, also with `≥`/`≤`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('≥', ">=").replace('≤', "<=");
        let parse = |v: &str| -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid objective value '{v}'")))
        };
        let obj = if let Some(v) = s.strip_prefix("mes>=") {
            SearchObjective::MesAtLeast(parse(v)?)
        } else if let Some(v) = s.strip_prefix("params<=") {
            SearchObjective::ParamsAtMost(parse(v)?)
        } else if let Some(v) = s.strip_prefix("latency<=") {
            SearchObjective::LatencyAtMost(parse(v)?)
        } else {
            return Err(Error::config(format!(
                "unknown objective '{s}'; expected mes>=v, params<=p or latency<=t"
            )));
        };
        obj.validate()?;
        Ok(obj)
    }
}

/// Size, predicted latency and efficiency score of one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub params: u64,
    pub latency_ms: f64,
    pub mes: f64,
}

/// Closed-form parameter count plus table latency, combined into MES.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub space: SearchSpace,
    pub table: LatencyTable,
    pub mes: MesConfig,
}

impl CostModel {
    pub fn new(space: SearchSpace, table: LatencyTable, mes: MesConfig) -> Result<Self> {
        space.validate()?;
        table.check_coverage(&space)?;
        mes.validate()?;
        Ok(CostModel { space, table, mes })
    }

    pub fn metrics(&self, cfg: &SubnetConfig) -> Result<Metrics> {
        let params = count_params(&self.space, cfg)?;
        let latency_ms = self.table.predict(&self.space, cfg)?;
        let mes = self.mes.score(params as f64, latency_ms)?;
        Ok(Metrics {
            params,
            latency_ms,
            mes,
        })
    }
}

/// Top-1 accuracy of a configuration, as a fraction in [0, 1].
pub trait AccuracyOracle {
    fn accuracy(&mut self, cfg: &SubnetConfig) -> Result<f64>;
}

impl<F: FnMut(&SubnetConfig) -> Result<f64>> AccuracyOracle for F {
    fn accuracy(&mut self, cfg: &SubnetConfig) -> Result<f64> {
        self(cfg)
    }
}

/// Memoizes an oracle by configuration.
#[derive(Debug, Clone)]
pub struct CachedOracle<O> {
    pub inner: O,
    cache: HashMap<SubnetConfig, f64>,
    /// Calls that reached the inner oracle.
    pub evaluations: usize,
}

impl<O: AccuracyOracle> CachedOracle<O> {
    pub fn new(inner: O) -> Self {
        CachedOracle {
            inner,
            cache: HashMap::new(),
            evaluations: 0,
        }
    }
}

impl<O: AccuracyOracle> AccuracyOracle for CachedOracle<O> {
    fn accuracy(&mut self, cfg: &SubnetConfig) -> Result<f64> {
        if let Some(&a) = self.cache.get(cfg) {
            return Ok(a);
        }
        let a = self.inner.accuracy(cfg)?;
        self.evaluations += 1;
        self.cache.insert(cfg.clone(), a);
        Ok(a)
    }
}

/// Labelled images evaluated in a fixed order.
#[derive(Debug, Clone, Copy)]
pub struct Partition<'a, T> {
    pub images: &'a Tensor<T>,
    pub labels: &'a [usize],
}

impl<'a, T: Element> Partition<'a, T> {
    pub fn new(images: &'a Tensor<T>, labels: &'a [usize]) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 || n != labels.len() {
            return Err(Error::config(format!(
                "partition images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::config("empty evaluation partition"));
        }
        Ok(Partition { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images `start..end` as their own tensor.
    pub fn batch(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        Tensor::new(&[end - start, s[1], s[2], s[3]], self.images.data()[start * per..end * per].to_vec())
    }
}

/// Fraction of rows whose largest logit (first on ties) is the label.
pub fn top1_hits<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for c in 1..k {
                if row[c].as_f64() > row[best].as_f64() {
                    best = c;
                }
            }
            best == y
        })
        .count()
}

fn eval_batched<T: Element>(
    part: &Partition<'_, T>,
    batch: usize,
    mut logits: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<f64> {
    if part.is_empty() {
        return Err(Error::config("empty evaluation partition"));
    }
    let batch = batch.max(1);
    let mut hits = 0;
    let mut start = 0;
    while start < part.len() {
        let end = (start + batch).min(part.len());
        let out = logits(&part.batch(start, end)?)?;
        hits += top1_hits(&out, &part.labels[start..end]);
        start = end;
    }
    Ok(hits as f64 / part.len() as f64)
}

/// Eval-mode top-1 accuracy of `cfg` executed inside the supernet.
pub fn evaluate_accuracy<T: Element>(
    net: &Supernet<T>,
    cfg: &SubnetConfig,
    part: &Partition<'_, T>,
    batch: usize,
) -> Result<f64> {
    let plan = net.resolve(cfg, 0.0)?;
    eval_batched(part, batch, |x| plan.logits(&net.weights, x))
}

/// Eval-mode top-1 accuracy of a standalone network.
pub fn evaluate_subnet<T: Element>(net: &Subnet<T>, part: &Partition<'_, T>, batch: usize) -> Result<f64> {
    eval_batched(part, batch, |x| net.logits(x))
}

/// Accuracy oracle backed by supernet evaluation on a fixed partition.
#[derive(Debug, Clone, Copy)]
pub struct SupernetOracle<'a, T: Element> {
    pub net: &'a Supernet<T>,
    pub partition: Partition<'a, T>,
    pub batch: usize,
}

impl<T: Element> AccuracyOracle for SupernetOracle<'_, T> {
    fn accuracy(&mut self, cfg: &SubnetConfig) -> Result<f64> {
        evaluate_accuracy(self.net, cfg, &self.partition, self.batch)
    }
}

/// A configuration with its accuracy and cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub config: SubnetConfig,
    pub accuracy: f64,
    pub metrics: Metrics,
}

pub(crate) fn point<O: AccuracyOracle>(oracle: &mut O, cost: &CostModel, cfg: SubnetConfig) -> Result<Point> {
    let accuracy = oracle.accuracy(&cfg)?;
    let metrics = cost.metrics(&cfg)?;
    Ok(Point {
        config: cfg,
        accuracy,
        metrics,
    })
}

/// One frontier action evaluated against the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredAction {
    pub action: Action,
    /// Position in the enumeration order, the last tie breaker.
    pub index: usize,
    /// Accuracy drop in percentage points; negative when accuracy improves.
    pub dacc: f64,
    /// MES gain; slimming must make this positive.
    pub dmes: f64,
    pub ratio: f64,
    pub after: Point,
}

impl ScoredAction {
    pub fn is_admissible(&self) -> bool {
        self.dmes > 0.0
    }
}

/// Total order of admissible actions, best first: accuracy-improving
/// actions before all others, then ascending ratio, then larger MES gain,
/// then enumeration order.
pub fn rank(a: &ScoredAction, b: &ScoredAction) -> Ordering {
    let class = |s: &ScoredAction| s.dacc >= 0.0;
    class(a)
        .cmp(&class(b))
        .then(a.ratio.total_cmp(&b.ratio))
        .then(b.dmes.total_cmp(&a.dmes))
        .then(a.index.cmp(&b.index))
}

pub fn score_action<O: AccuracyOracle>(
    oracle: &mut O,
    cost: &CostModel,
    current: &Point,
    action: Action,
    index: usize,
) -> Result<ScoredAction> {
    let cfg = apply(&cost.space, &current.config, action)?;
    let after = point(oracle, cost, cfg)?;
    let dacc = 100.0 * (current.accuracy - after.accuracy);
    let dmes = after.metrics.mes - current.metrics.mes;
    Ok(ScoredAction {
        action,
        index,
        dacc,
        dmes,
        ratio: dacc / dmes,
        after,
    })
}

/// One applied action of a search trajectory, with the state it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub action: Action,
    pub dacc: f64,
    pub dmes: f64,
    pub ratio: f64,
    pub params: u64,
    pub latency_ms: f64,
    pub mes: f64,
    pub accuracy: f64,
}

/// Start point, end point and full history of a search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub start: Point,
    pub end: Point,
    pub history: Vec<Step>,
    /// Actions discarded because they did not raise MES.
    pub anomalies: Vec<String>,
}

/// Score every frontier action of `current`, dropping (and describing in
/// `anomalies`) those that do not raise MES. Sorted best first.
pub fn score_frontier<O: AccuracyOracle>(
    oracle: &mut O,
    cost: &CostModel,
    current: &Point,
    anomalies: &mut Vec<String>,
) -> Result<Vec<ScoredAction>> {
    let mut scored = Vec::new();
    for (index, action) in enumerate_actions(&cost.space, &current.config).into_iter().enumerate() {
        let s = score_action(oracle, cost, current, action, index)?;
        if s.is_admissible() {
            scored.push(s);
        } else {
            anomalies.push(format!(
                "{action} from {} changes MES by {:?}; discarded",
                current.config.encode(),
                s.dmes
            ));
        }
    }
    scored.sort_by(rank);
    Ok(scored)
}

/// Greedy slimming from the max config until `objective` first holds.
pub fn run_search<O: AccuracyOracle>(
    oracle: &mut O,
    cost: &CostModel,
    objective: SearchObjective,
) -> Result<SearchOutcome> {
    objective.validate()?;
    let start = point(oracle, cost, cost.space.max_config())?;
    let mut out = SearchOutcome {
        start: start.clone(),
        end: start,
        history: Vec::new(),
        anomalies: Vec::new(),
    };
    while !objective.is_met(&out.end.metrics) {
        let frontier = score_frontier(oracle, cost, &out.end, &mut out.anomalies)?;
        let Some(best) = frontier.into_iter().next() else {
            return Err(Error::UnreachableObjective {
                message: format!(
                    "{objective} not met after {} steps; stopped at {} (mes {:?}, params {}, latency {:?} ms)",
                    out.history.len(),
                    out.end.config.encode(),
                    out.end.metrics.mes,
                    out.end.metrics.params,
                    out.end.metrics.latency_ms
                ),
                best: Box::new(out),
            });
        };
        out.history.push(Step {
            action: best.action,
            dacc: best.dacc,
            dmes: best.dmes,
            ratio: best.ratio,
            params: best.after.metrics.params,
            latency_ms: best.after.metrics.latency_ms,
            mes: best.after.metrics.mes,
            accuracy: best.after.accuracy,
        });
        out.end = best.after;
    }
    Ok(out)
}

/// Apply a recorded action sequence to the max config.
pub fn replay<'a>(space: &SearchSpace, actions: impl IntoIterator<Item = &'a Action>) -> Result<SubnetConfig> {
    let mut cfg = space.max_config();
    for a in actions {
        cfg = apply(space, &cfg, *a)?;
    }
    Ok(cfg)
}
