//! `hyperdyn`: runs one experiment per invocation and writes its report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperdyn::driver::Engine;
use hyperdyn::experiments::{self, ExperimentConfig, Kind, RunReport};
use hyperdyn::Error;

#[derive(Parser, Debug)]
#[command(name = "hyperdyn", version, about = "Forward and reverse hypergradients of training dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Data hyper-cleaning with per-example weights
    Clean,
    /// Learned task interactions against single-task and naive coupling
    Mtl,
    /// Real-time optimization of learning rate, momentum and ridge weight
    Rtho,
    /// Engine time and memory as hyperparameters and horizon grow
    Bench,
    /// Engine agreement, finite differences and closed-form checks
    Check,
    /// Random search over the real-time task's hyperparameters
    Randsearch,
}

impl Command {
    fn kind(self) -> Kind {
        match self {
            Command::Clean => Kind::Clean,
            Command::Mtl => Kind::Mtl,
            Command::Rtho => Kind::Rtho,
            Command::Bench => Kind::Bench,
            Command::Check => Kind::Check,
            Command::Randsearch => Kind::Randsearch,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum EngineArg {
    Forward,
    Reverse,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat key-value config file applied over the experiment's defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs/<experiment>]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    engine: Option<EngineArg>,
    /// Hyper-batch size for real-time runs
    #[arg(long, global = true)]
    delta: Option<usize>,
    /// L1 radius (cleaning) or interaction-sum bound (multitask)
    #[arg(long, global = true)]
    radius: Option<f64>,
    #[arg(long, global = true)]
    inner_steps: Option<usize>,
    #[arg(long, global = true)]
    hyper_iters: Option<usize>,
    #[arg(long, global = true)]
    hyper_lr: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = self.engine {
            cfg.engine = match v {
                EngineArg::Forward => Engine::Forward,
                EngineArg::Reverse => Engine::Reverse,
            };
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.radius {
            cfg.radius = v;
        }
        if let Some(v) = self.inner_steps {
            cfg.inner_steps = v;
        }
        if let Some(v) = self.hyper_iters {
            cfg.hyper_iters = v;
        }
        if let Some(v) = self.hyper_lr {
            cfg.hyper_lr = v;
        }
    }
}

/// 2 for bad configuration, 3 for numerical divergence, 4 for I/O and data errors.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::NonFinite { .. } | Error::Replay { .. } => 3,
        Error::Io(_) | Error::Data { .. } => 4,
        _ => 2,
    }
}

fn load_config(kind: Kind, o: &Overrides) -> hyperdyn::Result<ExperimentConfig> {
    let text = match &o.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::parse(&text, kind).map_err(|e| match (e, &o.config) {
        (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
        (e, _) => e,
    })?;
    o.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.as_ref().map_or_else(|| Path::new("runs").join(cfg.experiment.to_string()), PathBuf::from)
}

fn print_summary(report: &RunReport) {
    let means: std::collections::BTreeMap<&String, &f64> = report.metrics.iter().filter(|(k, _)| !k.contains('@')).collect();
    let line = serde_json::json!({
        "experiment": report.config.experiment,
        "status": report.status,
        "metrics": means,
    });
    println!("{line}");
}

fn run(cli: &Cli) -> u8 {
    let kind = cli.command.kind();
    let cfg = match load_config(kind, &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e}");
            return exit_code(&e);
        }
    };
    let dir = out_dir(&cfg);
    log::info!("running {kind} with seeds {:?}, writing to {}", cfg.seeds(), dir.display());
    let (report, failure) = match experiments::run(&cfg) {
        Ok(r) => (r, None),
        Err(f) => (*f.partial, Some(f.error)),
    };
    if let Err(e) = report.write(&dir) {
        log::error!("writing {}: {e}", dir.display());
        return 4;
    }
    print_summary(&report);
    if let Some(e) = failure {
        log::error!("{e}");
        return exit_code(&e);
    }
    if kind == Kind::Check && report.get("checks_failed").is_some_and(|n| n > 0.0) {
        log::error!("{} oracle checks failed", report.get("checks_failed").unwrap_or_default());
        return 1;
    }
    0
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    ExitCode::from(run(&cli))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_root_cause() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFinite { what: "state", step: 3 }.at_iteration(2)), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
        assert_eq!(exit_code(&Error::Data { path: "a".into(), reason: "b".into() }), 4);
    }

    #[test]
    fn flags_override_file_values() {
        let cli = Cli::parse_from(["hyperdyn", "rtho", "--delta", "7", "--hyper-lr", "0.5", "--engine", "forward"]);
        let cfg = load_config(cli.command.kind(), &cli.overrides).unwrap();
        assert_eq!((cfg.delta, cfg.hyper_lr, cfg.engine), (7, 0.5, Engine::Forward));
        assert_eq!(out_dir(&cfg), Path::new("runs/rtho"));
    }
}
