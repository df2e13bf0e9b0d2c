//! Command line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::cost::{build_latency_table, Device, LatencyTable, MesConfig};
use crate::error::{Error, Result};
use crate::search::{
    evaluate_accuracy, evaluate_subnet, run_search, CachedOracle, CostModel, Partition, Report, SearchObjective,
    SupernetOracle,
};
use crate::supernet::{load_archive, SearchSpace, Subnet, SubnetConfig, Supernet};

use super::config::Document;
use super::data::{load_dataset, DataSource, Dataset, Split};
use super::train::{train_classifier, EpochLog, SubnetTrainer, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "effnas", version, about = "Supernet training, latency tables and greedy subnet search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Training overrides shared by the training subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate per 1024 samples of batch.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub drop_path: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, mut c: TrainConfig) -> Result<TrainConfig> {
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.steps {
            c.max_steps = v;
            c.epochs = c.epochs.max(1);
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr_per_1024 = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.drop_path {
            c.drop_path_rate = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Host,
    Analytic,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sandwich-train a supernet and keep the best-validation checkpoint.
    TrainSupernet {
        /// Config file with a [space] and optional [train] section.
        #[arg(long)]
        space: PathBuf,
        /// `synthetic:seed=S,k=K,n=N,h=H` or `dir:PATH`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Build a per-block latency table.
    Bench {
        #[arg(long)]
        space: PathBuf,
        #[arg(long, value_enum)]
        mode: BenchMode,
        #[arg(long)]
        out: PathBuf,
        /// Analytic mode: milliseconds per 10^9 multiply-accumulates.
        #[arg(long, default_value_t = 1.0)]
        ms_per_gmac: f64,
        /// Host mode: timed repetitions per block.
        #[arg(long, default_value_t = 15)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Greedy search from the max config of a pretrained supernet.
    Search {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        /// `mes>=v`, `params<=p` or `latency<=t` (milliseconds).
        #[arg(long)]
        objective: String,
        #[arg(long, default_value_t = 0.5)]
        alpha_size: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha_latency: f64,
        #[arg(long)]
        report: PathBuf,
        /// Data source; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value_t = 200)]
        eval_batch: usize,
    },
    /// Train a subnet from scratch.
    TrainSubnet {
        /// Config file with [space] and [subnet] sections (a search report
        /// qualifies) and an optional [train] section.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "subnet.ckpt")]
        out: PathBuf,
        /// Subnet checkpoint whose predictions are distilled as extra labels.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Top-1 accuracy of a checkpoint on the val and test splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 200)]
        eval_batch: usize,
    },
    /// Per-step MES, size, latency and accuracy of a search report as CSV.
    Report {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` and run; returns the process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_space_file(path: &Path) -> Result<(SearchSpace, TrainConfig, Document)> {
    let doc = Document::load(path)?;
    if !doc.has_section("space") {
        return Err(Error::config(format!("{} has no [space] section", path.display())));
    }
    let space = SearchSpace::from_pairs(&doc.pairs("space")?)?;
    let train = TrainConfig::from_pairs(&doc.pairs("train")?)?;
    Ok((space, train, doc))
}

fn load_data(src: &str, space: &SearchSpace) -> Result<Dataset> {
    let source: DataSource = src.parse()?;
    let data = load_dataset(&source)?;
    if data.classes != space.classes || data.image_size() != space.resolution {
        return Err(Error::config(format!(
            "data {src} has {} classes at {}px but the space expects {} classes at {}px",
            data.classes,
            data.image_size(),
            space.classes,
            space.resolution
        )));
    }
    Ok(data)
}

fn print_epoch(e: &EpochLog) {
    println!(
        "epoch {} steps {} loss {:.4} val_acc {:.4} lr {:.3e}",
        e.epoch, e.steps, e.train_loss, e.val_accuracy, e.lr
    );
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainSupernet {
            space,
            data,
            out,
            train,
        } => {
            let (space, tc, _) = load_space_file(&space)?;
            let tc = train.apply(tc)?;
            let dataset = load_data(&data, &space)?;
            let mut net = Supernet::<f32>::build(&space, tc.seed)?;
            let mut meta = BTreeMap::new();
            meta.insert("data".to_string(), data.clone());
            let log = train_classifier(&mut net, &dataset, &tc, Some((&out, &meta)), print_epoch)?;
            if let (Some(first), Some(last)) = (log.step_losses.first(), log.step_losses.last()) {
                println!("sandwich losses (min, rand, rand, max): first {first:.4?} last {last:.4?}");
            }
            println!(
                "best val_acc {:.4} at epoch {}; wrote {}",
                log.best_val_accuracy,
                log.best_epoch,
                out.display()
            );
            Ok(())
        }
        Command::Bench {
            space,
            mode,
            out,
            ms_per_gmac,
            reps,
            warmup,
        } => {
            let (space, _, _) = load_space_file(&space)?;
            let device = match mode {
                BenchMode::Analytic => Device::Analytic { ms_per_gmac },
                BenchMode::Host => Device::Host { reps, warmup },
            };
            let table = build_latency_table(&space, device)?;
            table.save(&out)?;
            println!("wrote {} entries to {}", table.entries.len(), out.display());
            Ok(())
        }
        Command::Search {
            ckpt,
            lut,
            objective,
            alpha_size,
            alpha_latency,
            report,
            data,
            eval_batch,
        } => {
            let objective: SearchObjective = objective.parse()?;
            let (net, meta) = Supernet::<f32>::load(&ckpt)?;
            let src = match data.or_else(|| meta.get("data").cloned()) {
                Some(s) => s,
                None => return Err(Error::config("no --data given and the checkpoint records none")),
            };
            let dataset = load_data(&src, &net.space)?;
            let part = dataset.subset(Split::SearchVal)?;
            let partition = Partition::new(&part.images, &part.labels)?;
            let mes = MesConfig::with_alphas(alpha_size, alpha_latency)?;
            let cost = CostModel::new(net.space.clone(), LatencyTable::load(&lut)?, mes.clone())?;
            let mut oracle = CachedOracle::new(SupernetOracle {
                net: &net,
                partition,
                batch: eval_batch,
            });
            let (outcome, failure) = match run_search(&mut oracle, &cost, objective) {
                Ok(o) => (o, None),
                Err(Error::UnreachableObjective { message, best }) => (*best.clone(), Some((message, best))),
                Err(e) => return Err(e),
            };
            for (i, s) in outcome.history.iter().enumerate() {
                println!(
                    "step {} {} dacc {:.3} dmes {:.4} ratio {:.4} params {} latency_ms {:.5} mes {:.3} acc {:.4}",
                    i + 1,
                    s.action,
                    s.dacc,
                    s.dmes,
                    s.ratio,
                    s.params,
                    s.latency_ms,
                    s.mes,
                    s.accuracy
                );
            }
            for a in &outcome.anomalies {
                eprintln!("anomaly: {a}");
            }
            let rep = Report {
                space: net.space.clone(),
                objective,
                mes,
                outcome,
            };
            rep.save(&report)?;
            println!(
                "{} evaluations; final {} (mes {:.3}, acc {:.4}); wrote {}",
                oracle.evaluations,
                rep.outcome.end.config.encode(),
                rep.outcome.end.metrics.mes,
                rep.outcome.end.accuracy,
                report.display()
            );
            match failure {
                Some((message, best)) => Err(Error::UnreachableObjective { message, best }),
                None => Ok(()),
            }
        }
        Command::TrainSubnet {
            config,
            data,
            out,
            teacher,
            train,
        } => {
            let (space, tc, doc) = load_space_file(&config)?;
            let tc = train.apply(tc)?;
            let sub = doc.pairs("subnet")?;
            let cfg = sub
                .get("config")
                .ok_or_else(|| Error::config(format!("{} has no [subnet] config", config.display())))?;
            let cfg = SubnetConfig::decode(cfg)?;
            let dataset = load_data(&data, &space)?;
            let teacher = teacher.map(|p| Subnet::<f32>::load(&p).map(|(t, _)| t)).transpose()?;
            let net = Supernet::<f32>::build(&space, tc.seed)?.extract(&cfg)?;
            println!("training {} ({} parameters)", cfg.encode(), net.network.param_count());
            let mut trainer = SubnetTrainer::new(net);
            trainer.teacher = teacher.as_ref();
            let mut meta = BTreeMap::new();
            meta.insert("data".to_string(), data.clone());
            let log = train_classifier(&mut trainer, &dataset, &tc, Some((&out, &meta)), print_epoch)?;
            println!(
                "best val_acc {:.4} at epoch {}; wrote {}",
                log.best_val_accuracy,
                log.best_epoch,
                out.display()
            );
            Ok(())
        }
        Command::Eval { ckpt, data, eval_batch } => {
            let archive_kind = load_archive::<f32>(&ckpt)?.meta.get("kind").cloned().unwrap_or_default();
            let splits = [Split::Val, Split::Test];
            match archive_kind.as_str() {
                "subnet" => {
                    let (net, _) = Subnet::<f32>::load(&ckpt)?;
                    let dataset = load_data(&data, &net.space)?;
                    for split in splits {
                        let s = dataset.subset(split)?;
                        let acc = evaluate_subnet(&net, &Partition::new(&s.images, &s.labels)?, eval_batch)?;
                        println!("{} accuracy {acc:.4} ({} samples)", split.name(), s.len());
                    }
                }
                "supernet" => {
                    let (net, _) = Supernet::<f32>::load(&ckpt)?;
                    let dataset = load_data(&data, &net.space)?;
                    for split in splits {
                        let s = dataset.subset(split)?;
                        let part = Partition::new(&s.images, &s.labels)?;
                        for (name, cfg) in [("min", net.space.min_config()), ("max", net.space.max_config())] {
                            let acc = evaluate_accuracy(&net, &cfg, &part, eval_batch)?;
                            println!("{} {name} accuracy {acc:.4} ({} samples)", split.name(), s.len());
                        }
                    }
                }
                other => return Err(Error::format(format!("{}: unknown checkpoint kind '{other}'", ckpt.display()))),
            }
            Ok(())
        }
        Command::Report { history, out } => {
            let rep = Report::load(&history)?;
            std::fs::write(&out, rep.trajectory_csv()).map_err(|e| Error::io(&out, e))?;
            println!("wrote {} rows to {}", rep.outcome.history.len() + 1, out.display());
            Ok(())
        }
    }
}
