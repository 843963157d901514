//! Multi-seed experiments, ablation grids and result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::train::{train_one, EpochRecord, Prepared, TrainOutcome};
use crate::eval::{aggregate, Aggregate, MeanStd, MetricsReport};
use crate::{Error, Result};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "FAIRMIB_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    /// Relative to the experiment directory.
    pub checkpoint: Option<PathBuf>,
    pub curve: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    /// Effective configuration (variant already applied).
    pub config: RunConfig,
    pub runs: Vec<SeedRun>,
    pub aggregate: Aggregate,
    pub wall_clock_secs: f64,
}

impl ExperimentRecord {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.runs.iter().filter_map(|r| r.report.clone()).collect()
    }

    pub fn recompute_aggregate(&self) -> Option<Aggregate> {
        aggregate(&self.reports())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("record.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes `record.json` and `metrics.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("record.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("metrics.csv");
        fs::write(&path, self.metrics_csv()).map_err(|e| Error::io(&path, e))
    }

    /// Per-seed metrics followed by mean and std rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("seed,status,acc,f1,auc,dp_diff,eo_diff\n");
        for run in &self.runs {
            match &run.report {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "{},ok,{},{},{},{},{}",
                        run.seed, r.acc, r.f1, r.auc, r.dp_diff, r.eo_diff
                    );
                }
                None => {
                    let _ = writeln!(out, "{},failed,,,,,", run.seed);
                }
            }
        }
        let a = &self.aggregate;
        let cols = [a.acc, a.f1, a.auc, a.dp_diff, a.eo_diff];
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            let vals: Vec<String> = cols
                .iter()
                .map(|m| if pick == 0 { m.mean } else { m.std }.to_string())
                .collect();
            let _ = writeln!(out, "{label},{},{}", a.runs, vals.join(","));
        }
        out
    }
}

fn worker_count(jobs: usize) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, jobs.max(1))
}

fn run_seeds(config: &RunConfig, data: &Prepared) -> Vec<Result<TrainOutcome>> {
    let seeds = &config.seeds;
    let workers = worker_count(seeds.len());
    if workers == 1 {
        return seeds.iter().map(|&s| train_one(config, data, s)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TrainOutcome>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= seeds.len() {
                    break;
                }
                let outcome = train_one(config, data, seeds[k]);
                slots.lock().expect("no worker panics while holding the lock")[k] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|s| s.expect("every seed ran"))
        .collect()
}

fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,task,kl_feat,kl_struct,kl_diff,con,total,val_loss\n");
    for r in curve {
        let t = &r.train;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, t.task, t.kl_feat, t.kl_struct, t.kl_diff, t.con, t.total, r.val_loss
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads the data, trains every seed and, when `out` is given, persists the
/// record, checkpoints and loss curves there.
pub fn run_experiment(config: &RunConfig, out: Option<&Path>) -> Result<ExperimentRecord> {
    let data = Prepared::new(config)?;
    run_prepared(config, &data, out)
}

pub fn run_prepared(config: &RunConfig, data: &Prepared, out: Option<&Path>) -> Result<ExperimentRecord> {
    config.validate()?;
    let start = Instant::now();
    let outcomes = run_seeds(config, data);
    if let Some(dir) = out {
        for sub in ["checkpoints", "curves"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }

    let mut runs = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for (&seed, outcome) in config.seeds.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                let mut checkpoint = None;
                if let Some(dir) = out {
                    let rel = PathBuf::from("checkpoints").join(format!("seed_{seed}.bin"));
                    o.model.save(&dir.join(&rel), seed)?;
                    checkpoint = Some(rel);
                    write_curve(&dir.join("curves").join(format!("seed_{seed}.csv")), &o.fit.curve)?;
                }
                runs.push(SeedRun {
                    seed,
                    report: Some(o.report),
                    error: None,
                    best_epoch: Some(o.fit.best_epoch),
                    epochs_run: Some(o.fit.epochs_run),
                    checkpoint,
                    curve: o.fit.curve,
                });
            }
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                runs.push(SeedRun {
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                    best_epoch: None,
                    epochs_run: None,
                    checkpoint: None,
                    curve: Vec::new(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let reports: Vec<MetricsReport> = runs.iter().filter_map(|r| r.report.clone()).collect();
    let Some(aggregate) = aggregate(&reports) else {
        return Err(first_error.expect("no reports implies a failure"));
    };
    let record = ExperimentRecord {
        config: config.effective(),
        runs,
        aggregate,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        record.save(dir)?;
    }
    Ok(record)
}

/// One experiment per variant on shared data. With `out`, each variant is
/// written to `out/<variant>/` and the comparison table to `out/report.*`.
pub fn run_ablation_grid(
    base: &RunConfig,
    variants: &[Variant],
    out: Option<&Path>,
) -> Result<Vec<(Variant, ExperimentRecord)>> {
    if variants.is_empty() {
        return Err(Error::Validation("no variants requested".into()));
    }
    let data = Prepared::new(base)?;
    let mut records = Vec::with_capacity(variants.len());
    for &v in variants {
        let config = base.with_variant(v);
        let dir = out.map(|d| d.join(v.name()));
        log::info!("running variant {v}");
        records.push((v, run_prepared(&config, &data, dir.as_deref())?));
    }
    if let Some(dir) = out {
        ReportTable::from_records(&records).write(dir)?;
    }
    Ok(records)
}

/// One row of a comparison table, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub runs: usize,
    pub auc: MeanStd,
    pub f1: MeanStd,
    pub acc: MeanStd,
    pub dp: MeanStd,
    pub eo: MeanStd,
}

impl ReportRow {
    pub fn from_aggregate(name: &str, a: &Aggregate) -> Self {
        let pp = |m: MeanStd| MeanStd {
            mean: 100.0 * m.mean,
            std: 100.0 * m.std,
        };
        Self {
            name: name.to_string(),
            runs: a.runs,
            auc: pp(a.auc),
            f1: pp(a.f1),
            acc: pp(a.acc),
            dp: pp(a.dp_diff),
            eo: pp(a.eo_diff),
        }
    }

    fn cells(&self) -> [MeanStd; 5] {
        [self.auc, self.f1, self.acc, self.dp, self.eo]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

const HEADERS: [&str; 5] = ["AUC", "F1", "ACC", "DP", "EO"];

impl ReportTable {
    pub fn from_records(records: &[(Variant, ExperimentRecord)]) -> Self {
        Self {
            rows: records
                .iter()
                .map(|(v, r)| ReportRow::from_aggregate(v.name(), &r.aggregate))
                .collect(),
        }
    }

    /// Reads `dir/record.json`, or every `dir/*/record.json` when the former
    /// is absent. Known variants come first in canonical order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Validation(format!("{} is not a directory", dir.display())));
        }
        if dir.join("record.json").is_file() {
            let r = ExperimentRecord::load(dir)?;
            let name = r.config.variant.name();
            return Ok(Self {
                rows: vec![ReportRow::from_aggregate(name, &r.aggregate)],
            });
        }
        let mut found = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.join("record.json").is_file() {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                found.push((name, ExperimentRecord::load(&path)?));
            }
        }
        if found.is_empty() {
            return Err(Error::Validation(format!(
                "no experiment records under {}",
                dir.display()
            )));
        }
        let rank = |name: &str| Variant::ALL.iter().position(|v| v.name() == name).unwrap_or(usize::MAX);
        found.sort_by(|a, b| rank(&a.0).cmp(&rank(&b.0)).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            rows: found
                .iter()
                .map(|(name, r)| ReportRow::from_aggregate(name, &r.aggregate))
                .collect(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,runs");
        for h in HEADERS {
            let _ = write!(out, ",{h}_mean,{h}_std");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.name, row.runs);
            for c in row.cells() {
                let _ = write!(out, ",{:.2},{:.2}", c.mean, c.std);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "| Method | {} |\n|---|{}\n",
            HEADERS.join(" | "),
            "---|".repeat(HEADERS.len())
        );
        for row in &self.rows {
            let cells: Vec<String> = row
                .cells()
                .iter()
                .map(|c| format!("{:.2} ± {:.2}", c.mean, c.std))
                .collect();
            let _ = writeln!(out, "| {} | {} |", row.name, cells.join(" | "));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("report.csv", self.to_csv()), ("report.md", self.to_markdown())] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
