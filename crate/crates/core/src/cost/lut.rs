use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::supernet::{BlockKey, BlockKind, Placed, SearchSpace, SubnetConfig, Supernet};
use crate::tensor::{Mode, Tape, Tensor};

use super::count::{block_keys, block_macs, reachable_keys};

/// Where a latency entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    MeasuredHost,
    /// Measured, but the median was not clearly above the timer resolution.
    MeasuredHostWarning,
    AnalyticMacs,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::MeasuredHost => "measured_host",
            Provenance::MeasuredHostWarning => "measured_host:bench_warning",
            Provenance::AnalyticMacs => "analytic_macs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Provenance::MeasuredHost, Provenance::MeasuredHostWarning, Provenance::AnalyticMacs]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyEntry {
    pub latency_ms: f64,
    pub provenance: Provenance,
}

/// How table entries are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Device {
    /// `latency = MACs * ms_per_gmac / 1e9`.
    Analytic { ms_per_gmac: f64 },
    /// Wall-clock median of `reps` single-threaded batch-1 forward passes
    /// after `warmup` discarded ones.
    Host { reps: usize, warmup: usize },
}

/// Per-block latency lookup table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyTable {
    pub entries: BTreeMap<BlockKey, LatencyEntry>,
}

const HEADER: [&str; 7] = ["kind", "stage", "resolution", "width", "expansion", "latency_ms", "provenance"];

impl LatencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: BlockKey, entry: LatencyEntry) -> Result<()> {
        if !(entry.latency_ms.is_finite() && entry.latency_ms > 0.0) {
            return Err(Error::config(format!("latency of {key} must be positive, got {}", entry.latency_ms)));
        }
        if self.entries.insert(key, entry).is_some() {
            return Err(Error::config(format!("duplicate latency entry {key}")));
        }
        Ok(())
    }

    pub fn get(&self, key: &BlockKey) -> Result<f64> {
        self.entries
            .get(key)
            .map(|e| e.latency_ms)
            .ok_or_else(|| Error::config(format!("latency table has no entry for {key}")))
    }

    /// Sum of the entries of every block `cfg` executes.
    pub fn predict(&self, space: &SearchSpace, cfg: &SubnetConfig) -> Result<f64> {
        block_keys(space, cfg)?.iter().map(|k| self.get(k)).sum()
    }

    /// Reachable descriptors of `space` the table lacks.
    pub fn missing(&self, space: &SearchSpace) -> Vec<BlockKey> {
        reachable_keys(space)
            .into_iter()
            .filter(|k| !self.entries.contains_key(k))
            .collect()
    }

    /// Fails with every absent descriptor listed unless the table covers
    /// `space`.
    pub fn check_coverage(&self, space: &SearchSpace) -> Result<()> {
        let missing = self.missing(space);
        if missing.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = missing.iter().map(|k| k.to_string()).collect();
        Err(Error::config(format!("latency table lacks {} entries: {}", missing.len(), list.join(", "))))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for (k, e) in &self.entries {
            w.write_record([
                k.kind.name().to_string(),
                k.stage.to_string(),
                k.resolution.to_string(),
                k.width.to_string(),
                k.expansion.to_string(),
                format!("{:?}", e.latency_ms),
                e.provenance.name().to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::format(format!("latency table header: {e}")))?;
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::format(format!(
                "latency table header must be '{}', got '{}'",
                HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut table = LatencyTable::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::format(format!("latency table line {line}: {e}")))?;
            let bad = |what: &str| Error::format(format!("latency table line {line}: bad {what}"));
            let num = |idx: usize, what: &str| rec[idx].trim().parse::<usize>().map_err(|_| bad(what));
            let key = BlockKey {
                kind: BlockKind::parse(rec[0].trim()).ok_or_else(|| bad("kind"))?,
                stage: num(1, "stage")?,
                resolution: num(2, "resolution")?,
                width: num(3, "width")?,
                expansion: num(4, "expansion")?,
            };
            let latency_ms: f64 = rec[5].trim().parse().map_err(|_| bad("latency"))?;
            let provenance = Provenance::parse(rec[6].trim()).ok_or_else(|| bad("provenance"))?;
            if table.entries.contains_key(&key) {
                return Err(Error::format(format!("latency table line {line}: duplicate entry {key}")));
            }
            table
                .insert(key, LatencyEntry { latency_ms, provenance })
                .map_err(|e| Error::format(format!("latency table line {line}: {e}")))?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Latency table covering every reachable block of `space`.
pub fn build_latency_table(space: &SearchSpace, device: Device) -> Result<LatencyTable> {
    let mut table = LatencyTable::new();
    match device {
        Device::Analytic { ms_per_gmac } => {
            if !(ms_per_gmac.is_finite() && ms_per_gmac > 0.0) {
                return Err(Error::config(format!("ms per GMAC must be positive, got {ms_per_gmac}")));
            }
            let per_mac = ms_per_gmac / 1e9;
            for key in reachable_keys(space) {
                let macs = block_macs(space, &key)?.total();
                table.insert(
                    key,
                    LatencyEntry {
                        latency_ms: macs as f64 * per_mac,
                        provenance: Provenance::AnalyticMacs,
                    },
                )?;
            }
        }
        Device::Host { reps, warmup } => {
            if reps < 3 {
                return Err(Error::config(format!("at least 3 timed repetitions are required, got {reps}")));
            }
            let net = Supernet::<f32>::build(space, 0)?;
            let resolution = timer_resolution();
            for placed in net.variants()? {
                let median = time_block(&net, &placed, reps, warmup)?;
                let provenance = if median <= resolution * 10 {
                    Provenance::MeasuredHostWarning
                } else {
                    Provenance::MeasuredHost
                };
                let ms = (median.as_secs_f64() * 1e3).max(1e-6);
                table.insert(placed.key, LatencyEntry { latency_ms: ms, provenance })?;
            }
        }
    }
    table.check_coverage(space)?;
    Ok(table)
}

/// Smallest observable nonzero step of the monotonic clock.
fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median of `f`'s wall-clock time over `reps` runs after `warmup` runs.
pub fn median_time<F: FnMut() -> Result<()>>(reps: usize, warmup: usize, mut f: F) -> Result<Duration> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed());
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

fn time_block(net: &Supernet<f32>, placed: &Placed, reps: usize, warmup: usize) -> Result<Duration> {
    let n: usize = placed.input.iter().product();
    let x = Tensor::new(&placed.input, (0..n).map(|i| ((i % 13) as f32 - 6.0) / 6.0).collect())?;
    median_time(reps, warmup, || {
        let mut tape = Tape::new(Mode::Eval);
        let xv = tape.input(x.clone())?;
        let y = placed.layer.forward(&mut tape, &net.weights, xv)?;
        std::hint::black_box(tape.value(y));
        Ok(())
    })
}
