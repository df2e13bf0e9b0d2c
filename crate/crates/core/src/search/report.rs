use std::collections::BTreeMap;
use std::path::Path;

use crate::cost::{MesConfig, MetricSpec, LATENCY, SIZE};
use crate::error::{Error, Result};
use crate::harness::config::{write_section, Document};
use crate::supernet::{SearchSpace, SubnetConfig};

use super::engine::{replay, Metrics, Point, SearchObjective, SearchOutcome, Step};

const STEP_HEADER: [&str; 9] = [
    "step",
    "action",
    "dacc",
    "dmes",
    "ratio",
    "params",
    "predicted_latency_ms",
    "mes",
    "accuracy",
];

/// Everything needed to reproduce a search: the space, the scoring setup and
/// the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub space: SearchSpace,
    pub objective: SearchObjective,
    pub mes: MesConfig,
    pub outcome: SearchOutcome,
}

fn metric<'a>(mes: &'a MesConfig, name: &str) -> Result<&'a MetricSpec> {
    mes.metrics
        .iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::config(format!("score config lacks metric '{name}'")))
}

impl Report {
    pub fn to_text(&self) -> Result<String> {
        let size = metric(&self.mes, SIZE)?;
        let lat = metric(&self.mes, LATENCY)?;
        let mut out = String::from("# effnas search report\n");
        write_section(&mut out, "space", &self.space.to_pairs());
        let f = |x: f64| format!("{x:?}");
        write_section(
            &mut out,
            "search",
            &[
                ("objective".to_string(), self.objective.to_string()),
                ("score".to_string(), f(self.mes.score)),
                ("size_unit".to_string(), f(size.unit)),
                ("alpha_size".to_string(), f(size.alpha)),
                ("latency_unit".to_string(), f(lat.unit)),
                ("alpha_latency".to_string(), f(lat.alpha)),
            ],
        );

        out.push_str("[steps]\n");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(STEP_HEADER).expect("in-memory write");
        let s = &self.outcome.start;
        w.write_record([
            "0".to_string(),
            "start".to_string(),
            String::new(),
            String::new(),
            String::new(),
            s.metrics.params.to_string(),
            f(s.metrics.latency_ms),
            f(s.metrics.mes),
            f(s.accuracy),
        ])
        .expect("in-memory write");
        for (i, st) in self.outcome.history.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                st.action.to_string(),
                f(st.dacc),
                f(st.dmes),
                f(st.ratio),
                st.params.to_string(),
                f(st.latency_ms),
                f(st.mes),
                f(st.accuracy),
            ])
            .expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv"));

        let e = &self.outcome.end;
        write_section(
            &mut out,
            "subnet",
            &[
                ("config".to_string(), e.config.encode()),
                ("accuracy".to_string(), f(e.accuracy)),
                ("params".to_string(), e.metrics.params.to_string()),
                ("predicted_latency_ms".to_string(), f(e.metrics.latency_ms)),
                ("mes".to_string(), f(e.metrics.mes)),
            ],
        );
        if !self.outcome.anomalies.is_empty() {
            out.push_str("[anomalies]\n");
            for a in &self.outcome.anomalies {
                out.push_str(a);
                out.push('\n');
            }
        }
        Ok(out)
    }

    /// Parse a report and check that its history replays to its final
    /// config.
    pub fn parse(text: &str) -> Result<Self> {
        let doc = Document::parse(text)?;
        for s in ["space", "search", "steps", "subnet"] {
            if !doc.has_section(s) {
                return Err(Error::format(format!("search report lacks section [{s}]")));
            }
        }
        let space = SearchSpace::from_pairs(&doc.pairs("space")?).map_err(|e| Error::format(e.to_string()))?;
        let search = doc.pairs("search")?;
        let get = |m: &BTreeMap<String, String>, sec: &str, k: &str| -> Result<String> {
            m.get(k)
                .cloned()
                .ok_or_else(|| Error::format(format!("[{sec}] lacks '{k}'")))
        };
        let num = |m: &BTreeMap<String, String>, sec: &str, k: &str| -> Result<f64> {
            let v = get(m, sec, k)?;
            v.parse()
                .map_err(|_| Error::format(format!("[{sec}] '{k}': invalid number '{v}'")))
        };
        let objective: SearchObjective = get(&search, "search", "objective")?
            .parse()
            .map_err(|e: Error| Error::format(e.to_string()))?;
        let mes = MesConfig::new(
            num(&search, "search", "score")?,
            vec![
                MetricSpec::new(SIZE, num(&search, "search", "size_unit")?, num(&search, "search", "alpha_size")?),
                MetricSpec::new(
                    LATENCY,
                    num(&search, "search", "latency_unit")?,
                    num(&search, "search", "alpha_latency")?,
                ),
            ],
        )
        .map_err(|e| Error::format(e.to_string()))?;

        let steps = doc.rows("steps").join("\n");
        let mut rd = csv::ReaderBuilder::new().from_reader(steps.as_bytes());
        let header = rd.headers().map_err(|e| Error::format(format!("[steps]: {e}")))?;
        if header.iter().ne(STEP_HEADER) {
            return Err(Error::format(format!("[steps]: unexpected header {:?}", header)));
        }
        let mut start: Option<Point> = None;
        let mut history = Vec::new();
        for (n, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(format!("[steps]: {e}")))?;
            let bad = |what: &str| Error::format(format!("[steps] row {}: invalid {what}", n + 1));
            let fnum = |i: usize, what: &str| -> Result<f64> { rec[i].parse().map_err(|_| bad(what)) };
            if rec[0].parse::<usize>().ok() != Some(n) {
                return Err(bad("step number"));
            }
            let params: u64 = rec[5].parse().map_err(|_| bad("params"))?;
            let latency_ms = fnum(6, "latency")?;
            let mes_v = fnum(7, "mes")?;
            let accuracy = fnum(8, "accuracy")?;
            if n == 0 {
                if &rec[1] != "start" {
                    return Err(bad("start row"));
                }
                start = Some(Point {
                    config: space.max_config(),
                    accuracy,
                    metrics: Metrics {
                        params,
                        latency_ms,
                        mes: mes_v,
                    },
                });
                continue;
            }
            history.push(Step {
                action: rec[1].parse()?,
                dacc: fnum(2, "dacc")?,
                dmes: fnum(3, "dmes")?,
                ratio: fnum(4, "ratio")?,
                params,
                latency_ms,
                mes: mes_v,
                accuracy,
            });
        }
        let start = start.ok_or_else(|| Error::format("[steps] has no start row"))?;

        let sub = doc.pairs("subnet")?;
        let config = SubnetConfig::decode(&get(&sub, "subnet", "config")?).map_err(|e| Error::format(e.to_string()))?;
        let replayed = replay(&space, history.iter().map(|s| &s.action)).map_err(|e| Error::format(e.to_string()))?;
        if replayed != config {
            return Err(Error::format(format!(
                "history replays to {} but the report names {}",
                replayed.encode(),
                config.encode()
            )));
        }
        let end = Point {
            config,
            accuracy: num(&sub, "subnet", "accuracy")?,
            metrics: Metrics {
                params: get(&sub, "subnet", "params")?
                    .parse()
                    .map_err(|_| Error::format("[subnet] invalid params"))?,
                latency_ms: num(&sub, "subnet", "predicted_latency_ms")?,
                mes: num(&sub, "subnet", "mes")?,
            },
        };
        Ok(Report {
            space,
            objective,
            mes,
            outcome: SearchOutcome {
                start,
                end,
                history,
                anomalies: doc.rows("anomalies").to_vec(),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Report::parse(&text)
    }

    /// Per-step `step,mes,params,latency_ms,accuracy` table, starting with
    /// the max config.
    pub fn trajectory_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "mes", "params", "latency_ms", "accuracy"])
            .expect("in-memory write");
        let s = &self.outcome.start;
        let rows = std::iter::once((s.metrics.mes, s.metrics.params, s.metrics.latency_ms, s.accuracy)).chain(
            self.outcome
                .history
                .iter()
                .map(|st| (st.mes, st.params, st.latency_ms, st.accuracy)),
        );
        for (i, (mes, params, lat, acc)) in rows.enumerate() {
            w.write_record([
                i.to_string(),
                format!("{mes:?}"),
                params.to_string(),
                format!("{lat:?}"),
                format!("{acc:?}"),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}
