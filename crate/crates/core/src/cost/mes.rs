use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Name of the model-size metric (learnable parameter count).
pub const SIZE: &str = "size";
/// Name of the latency metric (milliseconds).
pub const LATENCY: &str = "latency";

/// One efficiency metric with its unit and importance exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpec {
    pub name: String,
    pub unit: f64,
    pub alpha: f64,
}

impl MetricSpec {
    pub fn new(name: impl Into<String>, unit: f64, alpha: f64) -> Self {
        MetricSpec {
            name: name.into(),
            unit,
            alpha,
        }
    }
}

/// Base score and metric list of the efficiency score.
#[derive(Debug, Clone, PartialEq)]
pub struct MesConfig {
    pub score: f64,
    pub metrics: Vec<MetricSpec>,
}

impl Default for MesConfig {
    fn default() -> Self {
        MesConfig {
            score: 100.0,
            metrics: vec![MetricSpec::new(SIZE, 3e6, 0.5), MetricSpec::new(LATENCY, 1.0, 1.0)],
        }
    }
}

impl MesConfig {
    pub fn new(score: f64, metrics: Vec<MetricSpec>) -> Result<Self> {
        let cfg = MesConfig { score, metrics };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default units with the given size and latency exponents.
    pub fn with_alphas(alpha_size: f64, alpha_latency: f64) -> Result<Self> {
        let mut cfg = MesConfig::default();
        cfg.metrics[0].alpha = alpha_size;
        cfg.metrics[1].alpha = alpha_latency;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.score.is_finite() && self.score > 0.0) {
            return Err(Error::config(format!("base score must be positive, got {}", self.score)));
        }
        for (i, m) in self.metrics.iter().enumerate() {
            if !(m.alpha > 0.0 && m.alpha <= 1.0) {
                return Err(Error::config(format!("metric {}: exponent {} outside (0, 1]", m.name, m.alpha)));
            }
            if !(m.unit.is_finite() && m.unit > 0.0) {
                return Err(Error::config(format!("metric {}: unit must be positive, got {}", m.name, m.unit)));
            }
            if self.metrics[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::config(format!("metric {} listed twice", m.name)));
            }
        }
        Ok(())
    }

    /// Score of a model with `params` learnable parameters and `latency_ms`.
    pub fn score(&self, params: f64, latency_ms: f64) -> Result<f64> {
        compute_mes(self, &[(SIZE, params), (LATENCY, latency_ms)])
    }
}

/// `score * prod_i (M_i / U_i)^(-alpha_i)` over every configured metric.
pub fn compute_mes(cfg: &MesConfig, measurements: &[(&str, f64)]) -> Result<f64> {
    cfg.validate()?;
    let values: BTreeMap<&str, f64> = measurements.iter().copied().collect();
    let mut mes = cfg.score;
    for m in &cfg.metrics {
        let v = *values
            .get(m.name.as_str())
            .ok_or_else(|| Error::config(format!("no measurement for metric {}", m.name)))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::config(format!("metric {} must be positive, got {v}", m.name)));
        }
        mes *= (v / m.unit).powf(-m.alpha);
    }
    Ok(mes)
}
