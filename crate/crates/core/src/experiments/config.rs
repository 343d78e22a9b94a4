use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::driver::Engine;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Clean,
    Mtl,
    Rtho,
    Bench,
    Randsearch,
    Check,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kind::Clean => "clean",
            Kind::Mtl => "mtl",
            Kind::Rtho => "rtho",
            Kind::Bench => "bench",
            Kind::Randsearch => "randsearch",
            Kind::Check => "check",
        };
        f.write_str(s)
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "clean" => Kind::Clean,
            "mtl" => Kind::Mtl,
            "rtho" => Kind::Rtho,
            "bench" => Kind::Bench,
            "randsearch" => Kind::Randsearch,
            "check" => Kind::Check,
            other => return Err(Error::Config(format!("unknown experiment {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Gaussian class blobs.
    Blobs,
    /// Related binary tasks from [`crate::data::TaskGenerator`].
    Tasks,
    Idx,
    Csv,
}

/// Every knob of every experiment, as one flat table of keys. Values not given
/// in a file take the defaults of the experiment kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Kind,
    pub seed: u64,
    /// Independent repetitions; repetition `r` uses seed `seed + r`.
    pub repeats: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub engine: Engine,

    pub dataset: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_csv: Option<PathBuf>,
    /// Size of the balanced pool drawn before splitting (ingested data and blobs).
    pub n_total: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Test-set size for generated tasks; blobs and files use the rest of the pool.
    pub n_test: usize,
    pub corruption: f64,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,

    pub inner_steps: usize,
    pub inner_lr: f64,
    pub momentum: f64,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    /// Steps of the final retraining runs (cleaning).
    pub final_steps: usize,

    pub hyper_iters: usize,
    pub hyper_lr: f64,
    pub delta: usize,
    pub radius: f64,
    /// Early-stopping patience in records; 0 disables.
    pub patience: usize,
    /// Wall-clock limit in minutes; 0 disables.
    pub wall_clock_minutes: f64,

    pub tasks: usize,
    pub clusters: usize,
    pub cluster_spread: f64,
    pub task_spread: f64,
    pub label_noise: f64,
    pub rho0: f64,
    pub rho_grid: Vec<f64>,

    pub null_teacher: bool,
    pub eta0: f64,
    pub mu0: f64,
    /// Validation examples drawn per real-time emission; 0 uses the full set.
    pub val_subset: usize,
    pub compare_rs: bool,
    /// Inner-step budget of the real-time versus random-search comparison.
    pub budget_steps: usize,
    pub rs_trial_steps: usize,
    pub eta_mean: f64,
    pub rho_max: f64,

    pub bench_m: Vec<usize>,
    pub bench_t: Vec<usize>,
    pub bench_steps: usize,
    pub bench_reps: usize,
}

impl ExperimentConfig {
    pub fn defaults(kind: Kind) -> Self {
        let mut c = ExperimentConfig {
            experiment: kind,
            seed: 0,
            repeats: 1,
            out: None,
            engine: Engine::Reverse,
            dataset: DataSource::Blobs,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            data_csv: None,
            n_total: 2400,
            n_train: 200,
            n_val: 200,
            n_test: 2000,
            corruption: 0.5,
            classes: 2,
            dim: 20,
            separation: 4.0,
            noise: 1.0,
            inner_steps: 1000,
            inner_lr: 0.1,
            momentum: 0.9,
            batch_size: 0,
            final_steps: 1000,
            hyper_iters: 100,
            hyper_lr: 0.02,
            delta: 200,
            radius: 100.0,
            patience: 0,
            wall_clock_minutes: 0.0,
            tasks: 8,
            clusters: 2,
            cluster_spread: 0.5,
            task_spread: 0.3,
            label_noise: 0.5,
            rho0: 0.01,
            rho_grid: vec![0.0, 0.001, 0.003, 0.01, 0.03, 0.1, 0.3],
            null_teacher: true,
            eta0: 0.075,
            mu0: 0.5,
            val_subset: 0,
            compare_rs: false,
            budget_steps: 20_000,
            rs_trial_steps: 1000,
            eta_mean: 0.1,
            rho_max: 0.01,
            bench_m: vec![1, 10, 25, 50, 100],
            bench_t: vec![100, 500, 1000, 2000],
            bench_steps: 20,
            bench_reps: 5,
        };
        match kind {
            Kind::Clean | Kind::Check => {}
            Kind::Mtl => {
                c.dataset = DataSource::Tasks;
                c.repeats = 5;
                c.n_train = 40;
                c.n_val = 40;
                c.inner_steps = 200;
                c.inner_lr = 0.5;
                c.hyper_iters = 60;
                c.hyper_lr = 0.01;
                c.radius = 1.0;
            }
            Kind::Rtho | Kind::Randsearch => {
                c.classes = 3;
                c.dim = 30;
                c.n_train = 1000;
                c.n_val = 200;
                c.n_test = 2000;
                c.batch_size = 20;
                c.delta = 50;
                c.hyper_iters = 100;
                c.hyper_lr = 0.005;
                c.separation = 1.5;
            }
            Kind::Bench => {
                c.classes = 5;
                c.dim = 20;
                c.n_train = 400;
            }
        }
        c
    }

    /// Reads a flat key-value file on top of the defaults for `kind`. An
    /// `experiment` key in the file must agree with `kind`.
    pub fn from_toml_str(text: &str, kind: Kind) -> Result<Self> {
        let cfg = ExperimentConfig::parse(text, kind)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`ExperimentConfig::from_toml_str`] without the final [`ExperimentConfig::validate`],
    /// for callers that adjust fields first.
    pub fn parse(text: &str, kind: Kind) -> Result<Self> {
        let given: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some((k, _)) = given.iter().find(|(_, v)| v.is_table() || v.as_array().is_some_and(|a| a.iter().any(|x| x.is_table()))) {
            return Err(Error::Config(format!("key {k:?}: nested tables are not allowed")));
        }
        if let Some(v) = given.get("experiment") {
            let named: Kind = v.as_str().ok_or_else(|| Error::Config("experiment must be a string".into()))?.parse()?;
            if named != kind {
                return Err(Error::Config(format!("config is for {named}, not {kind}")));
            }
        }
        let mut table = toml::Table::try_from(ExperimentConfig::defaults(kind)).map_err(|e| Error::Config(e.to_string()))?;
        table.extend(given);
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path, kind: Kind) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_toml_str(&text, kind).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config values are plain scalars and arrays")
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        for (name, v) in [
            ("inner_lr", self.inner_lr),
            ("hyper_lr", self.hyper_lr),
            ("separation", self.separation),
            ("noise", self.noise),
            ("radius", self.radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return bad(format!("corruption must lie in [0,1], got {}", self.corruption));
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.mu0) {
            return bad("momentum values must lie in [0,1]".into());
        }
        if self.delta == 0 {
            return bad("delta must be at least 1".into());
        }
        if self.wall_clock_minutes < 0.0 || self.eta0 < 0.0 || self.rho0 < 0.0 || self.eta_mean <= 0.0 || self.rho_max < 0.0 {
            return bad("negative wall clock, initial hyperparameter or prior scale".into());
        }
        match self.dataset {
            DataSource::Idx if self.train_images.is_none() || self.train_labels.is_none() => {
                return bad("dataset = \"idx\" needs train_images and train_labels".into());
            }
            DataSource::Idx if self.test_images.is_some() != self.test_labels.is_some() => {
                return bad("test_images and test_labels must be given together".into());
            }
            DataSource::Csv if self.data_csv.is_none() => return bad("dataset = \"csv\" needs data_csv".into()),
            _ => {}
        }
        match self.experiment {
            Kind::Clean => {
                if self.dataset == DataSource::Tasks {
                    return bad("cleaning needs class labels; use blobs, idx or csv".into());
                }
                if self.n_train + self.n_val >= self.n_total {
                    return bad(format!("n_train + n_val = {} leaves no test examples out of n_total = {}", self.n_train + self.n_val, self.n_total));
                }
                if self.classes < 2 {
                    return bad("cleaning needs at least 2 classes".into());
                }
            }
            Kind::Mtl => {
                if self.tasks < 2 {
                    return bad(format!("multitask learning needs K >= 2 tasks, got {}", self.tasks));
                }
                if self.clusters == 0 || self.rho_grid.is_empty() || self.rho_grid.iter().any(|r| *r < 0.0) {
                    return bad("clusters must be positive and rho_grid a nonempty list of nonnegative values".into());
                }
                if !(self.cluster_spread.is_finite() && self.cluster_spread >= 0.0 && self.task_spread.is_finite() && self.task_spread >= 0.0) {
                    return bad("cluster_spread and task_spread must be nonnegative".into());
                }
            }
            Kind::Rtho | Kind::Randsearch => {
                if self.classes < 2 || self.n_train == 0 || self.n_val == 0 {
                    return bad("the stream task needs at least 2 classes and nonempty splits".into());
                }
                if self.rs_trial_steps == 0 || self.budget_steps < self.rs_trial_steps {
                    return bad("budget_steps must cover at least one random-search trial".into());
                }
            }
            Kind::Bench => {
                if self.bench_m.is_empty() || self.bench_t.is_empty() || self.bench_reps == 0 || self.bench_steps == 0 {
                    return bad("benchmark grids, steps and repetitions must be nonempty".into());
                }
                if !self.bench_m.contains(&10) || !self.bench_m.contains(&100) {
                    return bad("bench_m must contain 10 and 100 for the scaling ratios".into());
                }
            }
            Kind::Check => {}
        }
        Ok(())
    }
}
