//! The desk-scale experiments behind the command line: data hyper-cleaning,
//! learning task interactions, real-time optimization on a stream, the engine
//! complexity benchmark and the oracle self-check. Each runner takes an
//! [`ExperimentConfig`] and returns a [`RunReport`].

use std::sync::Arc;

use crate::data::{balanced_subset, gaussian_blobs, ingest_csv, ingest_idx, BlobSpec, Dataset, Split};
use crate::driver::{Aborted, LoopOutcome, StopRule};
use crate::dynamics::{Binding, Dynamics, UpdateMap};
use crate::error::{Error, Result};
use crate::objectives::{ExampleWeights, MinibatchSchedule, WeightedSoftmax};

pub mod bench;
pub mod check;
pub mod clean;
pub mod config;
pub mod mtl;
pub mod report;
pub mod rtho;

pub use config::{DataSource, ExperimentConfig, Kind};
pub use report::{ExperimentFailure, Outcome, RunReport, RunTrace, Status, Table, TraceRow};

/// Runs the experiment named by `cfg.experiment`.
pub fn run(cfg: &ExperimentConfig) -> Outcome {
    match cfg.experiment {
        Kind::Clean => clean::run_hyperclean(cfg),
        Kind::Mtl => mtl::run_mtl(cfg),
        Kind::Rtho => rtho::run_rtho(cfg),
        Kind::Randsearch => rtho::run_randsearch(cfg),
        Kind::Bench => bench::run_bench(cfg),
        Kind::Check => check::run_check(cfg),
    }
}

/// Shared runner skeleton: a failing body still hands back what it recorded.
pub(crate) fn guarded(cfg: &ExperimentConfig, body: impl FnOnce(&mut RunReport) -> Result<()>) -> Outcome {
    let mut report = RunReport::new(cfg);
    if let Err(e) = cfg.validate() {
        return Err(ExperimentFailure::new(e, report));
    }
    match body(&mut report) {
        Ok(()) => {
            report.summarize();
            Ok(report)
        }
        Err(e) => Err(ExperimentFailure::new(e, report)),
    }
}

/// Splits a loop result into whatever was recorded and the error, if any.
pub(crate) fn settle(res: std::result::Result<LoopOutcome, Aborted>) -> (LoopOutcome, Option<Error>) {
    match res {
        Ok(out) => (out, None),
        Err(a) => (*a.partial, Some(a.error)),
    }
}

pub(crate) fn stop_rules(cfg: &ExperimentConfig) -> Vec<StopRule> {
    let mut rules = vec![StopRule::MaxHyperIters { n: cfg.hyper_iters }];
    if cfg.patience > 0 {
        rules.push(StopRule::ValidationEarlyStop { patience: cfg.patience });
    }
    if cfg.wall_clock_minutes > 0.0 {
        rules.push(StopRule::WallClock { minutes: cfg.wall_clock_minutes });
    }
    rules
}

pub(crate) fn schedule(n: usize, batch_size: usize, seed: u64) -> MinibatchSchedule {
    if batch_size == 0 || batch_size >= n {
        MinibatchSchedule::full(n)
    } else {
        MinibatchSchedule::new(n, batch_size, seed)
    }
}

pub(crate) fn blob_spec(cfg: &ExperimentConfig) -> BlobSpec {
    BlobSpec {
        classes: cfg.classes,
        dim: cfg.dim,
        separation: cfg.separation,
        noise: cfg.noise,
    }
}

/// A class-balanced pool of `n_total` labelled examples from the configured source.
pub fn load_pool(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let missing = |k: &str| Error::Config(format!("{k} is required for this data source"));
    let all = match cfg.dataset {
        DataSource::Blobs => return gaussian_blobs(&blob_spec(cfg), cfg.n_total, seed, 0),
        DataSource::Tasks => return Err(Error::Config("generated tasks carry no class labels".into())),
        DataSource::Idx => {
            let images = cfg.train_images.as_deref().ok_or_else(|| missing("train_images"))?;
            let labels = cfg.train_labels.as_deref().ok_or_else(|| missing("train_labels"))?;
            let mut ds = ingest_idx(images, labels)?;
            if let (Some(ti), Some(tl)) = (&cfg.test_images, &cfg.test_labels) {
                ds = ds.concat(&ingest_idx(ti, tl)?, Split::Unsplit)?;
            }
            ds
        }
        DataSource::Csv => ingest_csv(cfg.data_csv.as_deref().ok_or_else(|| missing("data_csv"))?)?,
    };
    if all.len() < cfg.n_total {
        return Err(Error::Config(format!("n_total = {} exceeds the {} examples available", cfg.n_total, all.len())));
    }
    balanced_subset(&all, cfg.n_total, seed)
}

/// Plain (unit-weight) softmax regression trained by gradient descent from zero.
pub fn train_softmax(data: &Dataset, steps: usize, lr: f64, batch_size: usize, seed: u64) -> Result<Vec<f64>> {
    let n = data.len();
    let obj = WeightedSoftmax::new(Arc::new(data.clone()), ExampleWeights::Unit, schedule(n, batch_size, seed))?;
    let d = Dynamics::gd(obj, Binding::Fixed(lr));
    let mut s = vec![0.0; d.state_dim()];
    for t in 1..=steps {
        s = d.step(&s, &[], t)?;
    }
    Ok(s)
}
