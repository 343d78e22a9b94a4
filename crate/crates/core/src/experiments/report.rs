use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::driver::{LoopOutcome, Record};
use crate::error::{Error, Result};
use crate::outer::ConstraintSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub l1: f64,
    pub zeros: usize,
}

impl LambdaSummary {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len().max(1) as f64;
        LambdaSummary {
            min: x.iter().copied().fold(f64::INFINITY, f64::min),
            max: x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: x.iter().sum::<f64>() / n,
            l1: x.iter().map(|v| v.abs()).sum(),
            zeros: x.iter().filter(|v| **v == 0.0).count(),
        }
    }
}

/// One hyper-iteration (or real-time emission) of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub run: String,
    pub seed: u64,
    pub iteration: usize,
    pub t: usize,
    pub response: f64,
    pub grad_norm: f64,
    pub lambda_summary: LambdaSummary,
    /// Hyperparameters after the iteration's update.
    pub lambda: Vec<f64>,
    pub elapsed: f64,
    /// Bytes held by the hypergradient engine (trajectory tape or tangents).
    pub memory_bytes: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub run: String,
    pub seed: u64,
    pub constraints: ConstraintSet,
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    pub fn from_records(run: &str, seed: u64, constraints: &ConstraintSet, records: &[Record], memory_bytes: usize) -> Self {
        let rows = records
            .iter()
            .map(|r| TraceRow {
                run: run.to_string(),
                seed,
                iteration: r.iteration,
                t: r.t,
                response: r.response,
                grad_norm: r.grad_norm,
                lambda_summary: LambdaSummary::of(&r.lambda),
                lambda: r.lambda.clone(),
                elapsed: r.elapsed,
                memory_bytes,
                metrics: r.monitor.map(|m| BTreeMap::from([("monitor".to_string(), m)])).unwrap_or_default(),
            })
            .collect();
        RunTrace {
            run: run.to_string(),
            seed,
            constraints: constraints.clone(),
            rows,
        }
    }

    pub fn from_outcome(run: &str, seed: u64, constraints: &ConstraintSet, out: &LoopOutcome, memory_bytes: usize) -> Self {
        RunTrace::from_records(run, seed, constraints, &out.records, memory_bytes)
    }
}

/// A numeric table written as its own CSV file. Columns ending in `_s` hold
/// wall-clock seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Complete,
    Aborted { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub status: Status,
    pub traces: Vec<RunTrace>,
    /// Final metrics. Per-seed values are keyed `name@seed`; `name` alone is the
    /// mean over seeds and `name.std` the sample standard deviation.
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock measurements, kept apart because they never reproduce exactly.
    pub timings: BTreeMap<String, f64>,
    pub tables: BTreeMap<String, Table>,
}

impl RunReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunReport {
            config: config.clone(),
            seeds: config.seeds(),
            status: Status::Complete,
            traces: vec![],
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
            tables: BTreeMap::new(),
        }
    }

    pub fn metric(&mut self, name: &str, seed: u64, value: f64) {
        self.metrics.insert(format!("{name}@{seed}"), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn per_seed(&self, name: &str) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| self.metrics.get(&format!("{name}@{s}")).copied()).collect()
    }

    /// Adds mean and standard deviation over seeds for every per-seed metric.
    pub fn summarize(&mut self) {
        let names: BTreeSet<String> = self.metrics.keys().filter_map(|k| k.split_once('@').map(|(n, _)| n.to_string())).collect();
        for name in names {
            let v = self.per_seed(&name);
            if v.is_empty() {
                continue;
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            self.metrics.insert(name.clone(), mean);
            self.metrics.insert(format!("{name}.std"), var.sqrt());
        }
    }

    pub fn table(&mut self, name: &str, columns: &[&str]) -> &mut Table {
        self.tables.entry(name.to_string()).or_insert_with(|| Table::new(columns))
    }

    /// The report with every wall-clock quantity zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.timings.clear();
        for tr in &mut r.traces {
            for row in &mut tr.rows {
                row.elapsed = 0.0;
            }
        }
        for t in r.tables.values_mut() {
            let timed: Vec<usize> = t.columns.iter().enumerate().filter(|(_, c)| c.ends_with("_s")).map(|(i, _)| i).collect();
            for row in &mut t.rows {
                for &i in &timed {
                    row[i].clear();
                }
            }
        }
        r
    }

    /// Every recorded hyperparameter vector lies in its run's constraint set.
    pub fn check_snapshots(&self, tol: f64) -> Result<()> {
        for tr in &self.traces {
            if let Some(row) = tr.rows.iter().find(|r| !tr.constraints.contains(&r.lambda, tol)) {
                return Err(Error::Precondition(format!("run {} iteration {} recorded infeasible hyperparameters", tr.run, row.iteration)));
            }
        }
        Ok(())
    }

    /// Writes `config.toml`, `summary.jsonl`, `records.jsonl`, `curves.csv` and one
    /// CSV per table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.check_snapshots(1e-9)?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.config.to_toml_string())?;

        let summary = serde_json::json!({
            "experiment": self.config.experiment,
            "seeds": self.seeds,
            "status": self.status,
            "metrics": self.metrics,
            "timings": self.timings,
            "config": self.config,
        });
        fs::write(dir.join("summary.jsonl"), format!("{summary}\n"))?;

        let mut rec = BufWriter::new(fs::File::create(dir.join("records.jsonl"))?);
        for row in self.traces.iter().flat_map(|t| &t.rows) {
            serde_json::to_writer(&mut rec, row).map_err(std::io::Error::from)?;
            rec.write_all(b"\n")?;
        }
        rec.flush()?;

        let keys: BTreeSet<&String> = self.traces.iter().flat_map(|t| &t.rows).flat_map(|r| r.metrics.keys()).collect();
        let mut w = csv::Writer::from_path(dir.join("curves.csv")).map_err(csv_err)?;
        let mut header: Vec<String> = ["run", "seed", "iteration", "t", "response", "grad_norm", "lambda_min", "lambda_max", "lambda_mean", "lambda_l1", "lambda_zeros", "elapsed", "memory_bytes"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(keys.iter().map(|k| k.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for r in self.traces.iter().flat_map(|t| &t.rows) {
            let s = &r.lambda_summary;
            let mut line = vec![
                r.run.clone(),
                r.seed.to_string(),
                r.iteration.to_string(),
                r.t.to_string(),
                r.response.to_string(),
                r.grad_norm.to_string(),
                s.min.to_string(),
                s.max.to_string(),
                s.mean.to_string(),
                s.l1.to_string(),
                s.zeros.to_string(),
                r.elapsed.to_string(),
                r.memory_bytes.to_string(),
            ];
            line.extend(keys.iter().map(|k| r.metrics.get(*k).map_or(String::new(), |v| v.to_string())));
            w.write_record(&line).map_err(csv_err)?;
        }
        w.flush()?;

        for (name, t) in &self.tables {
            let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv"))).map_err(csv_err)?;
            w.write_record(&t.columns).map_err(csv_err)?;
            for row in &t.rows {
                w.write_record(row).map_err(csv_err)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// An experiment that stopped early, with everything recorded up to the failure.
#[derive(Debug)]
pub struct ExperimentFailure {
    pub error: Error,
    pub partial: Box<RunReport>,
}

impl ExperimentFailure {
    pub fn new(error: Error, mut partial: RunReport) -> Self {
        partial.status = Status::Aborted { error: error.to_string() };
        partial.summarize();
        ExperimentFailure {
            error,
            partial: Box::new(partial),
        }
    }
}

impl From<ExperimentFailure> for Error {
    fn from(f: ExperimentFailure) -> Self {
        f.error
    }
}

pub type Outcome = std::result::Result<RunReport, ExperimentFailure>;
