//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Hyper-cleaning runs on MNIST when `HYPERDYN_MNIST_DIR` points at a directory
//! holding the four standard IDX files; otherwise it runs on synthetic blobs.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hyperdyn::experiments::check::{chain_agreement, engine_agreement, fd_agreement, frozen_start_identity, quadratic_closed_form, CheckResult};
use hyperdyn::experiments::{run, DataSource, ExperimentConfig, Kind, RunReport};
use hyperdyn::hypergrad::{forward_hg, reverse_hg};
use hyperdyn::instances::engine_matrix;
use hyperdyn::numerics::rng_stream;
use hyperdyn::outer::Constraint;
use hyperdyn::par::Execution;
use rand::Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict { passed, detail: detail.into() }
    }
}

fn checks(results: &[CheckResult]) -> Verdict {
    let passed = results.iter().all(CheckResult::passed);
    let detail = results.iter().map(|r| format!("{} worst {:.2e} (tol {:.0e}, {} cases)", r.name, r.worst, r.tolerance, r.cases)).collect::<Vec<_>>().join("; ");
    Verdict::new(passed, detail)
}

fn experiment(kind: Kind, text: &str) -> RunReport {
    let cfg = ExperimentConfig::from_toml_str(text, kind).expect("acceptance configs are valid");
    match run(&cfg) {
        Ok(r) => r,
        Err(f) => panic!("{kind} failed: {}", f.error),
    }
}

fn engine_equivalence() -> Verdict {
    let start = Instant::now();
    let matrix = engine_matrix(0);
    let r = engine_agreement(&matrix).unwrap();
    let mut abs_worst = 0.0f64;
    for i in &matrix {
        let fw = forward_hg(&i.dynamics, &i.validation, &i.s0, &i.lambda, i.steps).unwrap();
        let rv = reverse_hg(&i.dynamics, &i.validation, &i.s0, &i.lambda, i.steps).unwrap();
        for (a, b) in fw.gradient.iter().zip(&rv.gradient) {
            if a.abs().max(b.abs()) < 1e-12 {
                abs_worst = abs_worst.max((a - b).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let v = checks(std::slice::from_ref(&r));
    Verdict::new(
        v.passed && r.cases >= 36 && abs_worst <= 1e-12 && elapsed < Duration::from_secs(30),
        format!("{}; near-zero abs worst {abs_worst:.1e}; {:.1}s", v.detail, elapsed.as_secs_f64()),
    )
}

fn oracle_agreement() -> Verdict {
    let matrix = engine_matrix(0);
    checks(&[fd_agreement(&matrix, Execution::Parallel).unwrap(), chain_agreement(&matrix).unwrap()])
}

fn closed_form() -> Verdict {
    use hyperdyn::dynamics::{Binding, Dynamics};
    use hyperdyn::objectives::{QuadraticToy, ValidationError};
    let d = Dynamics::gd(QuadraticToy::isotropic(1), Binding::Learned);
    let e = ValidationError::quadratic(vec![0.0]);
    let fw = forward_hg(&d, &e, &[1.0], &[0.5], 2).unwrap().gradient[0];
    let rv = reverse_hg(&d, &e, &[1.0], &[0.5], 2).unwrap().gradient[0];
    let anchor = (fw + 0.25).abs().max((rv + 0.25).abs());
    let general = quadratic_closed_form().unwrap();
    let v = checks(&[general]);
    Verdict::new(v.passed && anchor <= 1e-12, format!("anchor error {anchor:.1e}; {}", v.detail))
}

fn first_update() -> Verdict {
    let r = frozen_start_identity(0).unwrap();
    let v = checks(std::slice::from_ref(&r));
    Verdict::new(v.passed && r.cases >= 10, v.detail)
}

fn mnist_dir() -> Option<String> {
    let dir = std::env::var("HYPERDYN_MNIST_DIR").ok()?;
    let files = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
    files.iter().all(|f| Path::new(&dir).join(f).exists()).then_some(dir)
}

fn hyper_cleaning() -> (Verdict, String, Kind) {
    let start = Instant::now();
    if let Some(dir) = mnist_dir() {
        let text = format!(
            "dataset = \"idx\"\ntrain_images = \"{dir}/train-images-idx3-ubyte\"\ntrain_labels = \"{dir}/train-labels-idx1-ubyte\"\n\
             test_images = \"{dir}/t10k-images-idx3-ubyte\"\ntest_labels = \"{dir}/t10k-labels-idx1-ubyte\"\n\
             classes = 10\nn_total = 20000\nn_train = 5000\nn_val = 5000\ncorruption = 0.5\nradius = 1000.0\n"
        );
        let r = experiment(Kind::Clean, &text);
        let (acc, f1, base, oracle) = (r.get("dh.test_acc").unwrap(), r.get("dh.f1").unwrap(), r.get("baseline.test_acc").unwrap(), r.get("oracle.test_acc").unwrap());
        let secs = start.elapsed().as_secs_f64();
        let passed = (89.0..=91.0).contains(&acc) && f1 >= 0.85 && (86.7..=88.7).contains(&base) && (89.5..=91.5).contains(&oracle) && secs <= 3600.0;
        let detail = format!("MNIST: DH {acc:.2} F1 {f1:.4} baseline {base:.2} oracle {oracle:.2}; {secs:.0}s");
        return (Verdict::new(passed, detail), text, Kind::Clean);
    }
    let text = "repeats = 5\n".to_string();
    let r = experiment(Kind::Clean, &text);
    assert_eq!(r.config.dataset, DataSource::Blobs);
    let (acc, f1, base, oracle) = (r.get("dh.test_acc").unwrap(), r.get("dh.f1").unwrap(), r.get("baseline.test_acc").unwrap(), r.get("oracle.test_acc").unwrap());
    let passed = f1 >= 0.9 && acc >= base + 1.5;
    let detail = format!(
        "synthetic blobs (MNIST unavailable), 5 seeds: DH {acc:.2} F1 {f1:.4} baseline {base:.2} oracle {oracle:.2}; {:.0}s",
        start.elapsed().as_secs_f64()
    );
    (Verdict::new(passed, detail), text, Kind::Clean)
}

fn mtl_ordering() -> (Verdict, String, Kind) {
    let text = String::new();
    let r = experiment(Kind::Mtl, &text);
    assert_eq!(r.seeds.len(), 5);
    let acc = |m: &str| r.get(&format!("{m}.test_acc")).unwrap();
    let (stl, nmtl, hmtl, hmtl_s) = (acc("stl"), acc("nmtl"), acc("hmtl"), acc("hmtl_s"));
    let radius = r.config.radius;
    let feasible = ["hmtl", "hmtl_s"].iter().all(|m| {
        r.per_seed(&format!("{m}.c_asym")).iter().all(|&a| a == 0.0) && r.per_seed(&format!("{m}.c_min")).iter().all(|&c| c >= 0.0)
    }) && r.per_seed("hmtl_s.c_sum").iter().all(|&s| s <= radius + 1e-9);
    let passed = stl <= nmtl && nmtl <= hmtl_s && hmtl_s - stl >= 1.0 && feasible;
    let detail = format!("STL {stl:.2} NMTL {nmtl:.2} HMTL {hmtl:.2} HMTL-S {hmtl_s:.2}; C symmetric, nonnegative, HMTL-S sum <= {radius}: {feasible}");
    (Verdict::new(passed, detail), text, Kind::Mtl)
}

fn complexity() -> (Verdict, String, Kind) {
    let start = Instant::now();
    let text = String::new();
    let r = experiment(Kind::Bench, &text);
    let f = r.timings["forward.ratio_100_10"];
    let b = r.timings["reverse.ratio_100_10"];
    let exact = r.get("tape_exact") == Some(1.0);
    let secs = start.elapsed().as_secs_f64();
    let passed = (5.0..=20.0).contains(&f) && (0.5..=2.5).contains(&b) && exact && secs <= 600.0;
    (Verdict::new(passed, format!("forward m100/m10 {f:.2}, reverse {b:.2}, tape T+1 at every T: {exact}; {secs:.1}s")), text, Kind::Bench)
}

fn feasible_point(c: &Constraint, n: usize, r: &mut impl Rng) -> Vec<f64> {
    match *c {
        Constraint::BoxL1 { lo, hi, radius } => {
            let mut z: Vec<f64> = (0..n).map(|_| r.random_range(lo..=hi)).collect();
            let s: f64 = z.iter().sum();
            if s > radius {
                let scale = r.random_range(0.0..=1.0) * radius / s;
                z.iter_mut().for_each(|v| *v *= scale);
            }
            z
        }
        Constraint::MtlCone { k, radius } => {
            let mut z = vec![0.0; k * k];
            for j in 0..k {
                for l in j..k {
                    let v = r.random_range(0.0..1.0);
                    z[j * k + l] = v;
                    z[l * k + j] = v;
                }
            }
            if let Some(radius) = radius {
                let s: f64 = z.iter().sum();
                let scale = r.random_range(0.0..=1.0) * radius / s;
                z.iter_mut().for_each(|v| *v *= scale);
            }
            z
        }
        Constraint::NonNeg => (0..n).map(|_| r.random_range(0.0..3.0)).collect(),
        Constraint::UnitInterval => (0..n).map(|_| r.random_range(0.0..=1.0)).collect(),
        Constraint::Box { lo, hi } => (0..n).map(|_| r.random_range(lo..=hi)).collect(),
        Constraint::None => (0..n).map(|_| r.random_range(-3.0..3.0)).collect(),
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn projections() -> Verdict {
    let hand = hyperdyn::experiments::check::projection_cases().unwrap();
    let sets = [
        (Constraint::BoxL1 { lo: 0.0, hi: 1.0, radius: 2.0 }, 6),
        (Constraint::BoxL1 { lo: 0.0, hi: 0.8, radius: 0.5 }, 4),
        (Constraint::MtlCone { k: 3, radius: None }, 9),
        (Constraint::MtlCone { k: 3, radius: Some(1.0) }, 9),
        (Constraint::NonNeg, 5),
        (Constraint::UnitInterval, 5),
    ];
    let mut rng = rng_stream(0, 0xACC);
    let (mut idempotent, mut optimal, mut feasible) = (true, true, true);
    let mut worst_gap = 0.0f64;
    for (c, n) in &sets {
        for _ in 0..20 {
            let x: Vec<f64> = (0..*n).map(|_| rng.random_range(-2.0..3.0)).collect();
            let mut p = x.clone();
            c.project(&mut p).unwrap();
            feasible &= c.contains(&p, 1e-12);
            let mut pp = p.clone();
            c.project(&mut pp).unwrap();
            idempotent &= pp == p;
            let dp = dist2(&x, &p);
            for _ in 0..1000 {
                let z = feasible_point(c, *n, &mut rng);
                assert!(c.contains(&z, 1e-9), "{c:?} sampler left the set");
                let gap = dp - dist2(&x, &z);
                worst_gap = worst_gap.max(gap);
                optimal &= gap <= 1e-12;
            }
        }
    }
    let passed = hand.passed() && idempotent && optimal && feasible;
    Verdict::new(
        passed,
        format!(
            "hand cases worst {:.1e}; idempotent {idempotent}; feasible {feasible}; no feasible point closer (worst excess {worst_gap:.1e})",
            hand.worst
        ),
    )
}

fn rtho_vs_rs() -> (Verdict, String, Kind) {
    let text = "compare_rs = true\nrepeats = 5\n".to_string();
    let r = experiment(Kind::Rtho, &text);
    let wins = r.per_seed("rtho_not_worse").iter().filter(|&&w| w == 1.0).count();
    let ours: Vec<String> = r.per_seed("rtho_nt.val_error").iter().map(|v| format!("{v:.3}")).collect();
    let rs: Vec<String> = r.per_seed("rs.val_error").iter().map(|v| format!("{v:.3}")).collect();
    (Verdict::new(wins >= 4, format!("RTHO-NT not worse in {wins}/5 seeds; val error RTHO-NT {ours:?} vs RS {rs:?}")), text, Kind::Rtho)
}

fn determinism(runs: &[(String, Kind, RunReport)]) -> Verdict {
    let mut same = Vec::new();
    for (text, kind, first) in runs {
        let again = experiment(*kind, text);
        same.push((kind.to_string(), again.without_timings() == first.without_timings()));
    }
    let passed = same.iter().all(|(_, s)| *s);
    Verdict::new(passed, same.iter().map(|(k, s)| format!("{k}: {}", if *s { "identical" } else { "DIFFERS" })).collect::<Vec<_>>().join(", "))
}

fn main() -> ExitCode {
    let mut verdicts: Vec<(usize, &str, Verdict)> = vec![
        (1, "engine equivalence", engine_equivalence()),
        (2, "oracle agreement", oracle_agreement()),
        (3, "closed-form quadratic", closed_form()),
        (4, "frozen-start identity", first_update()),
    ];

    let mut replay = Vec::new();
    for (n, name, f) in [
        (5, "hyper-cleaning", hyper_cleaning as fn() -> (Verdict, String, Kind)),
        (6, "multitask ordering", mtl_ordering),
        (7, "complexity trends", complexity),
    ] {
        let (v, text, kind) = f();
        verdicts.push((n, name, v));
        replay.push((text, kind));
    }
    verdicts.push((8, "projections", projections()));
    let (v, text, kind) = rtho_vs_rs();
    verdicts.push((9, "real-time vs random search", v));
    replay.push((text, kind));

    replay.push((String::new(), Kind::Check));
    let firsts: Vec<(String, Kind, RunReport)> = replay
        .into_iter()
        .filter(|(_, k)| *k != Kind::Bench)
        .map(|(text, kind)| {
            let r = experiment(kind, &text);
            (text, kind, r)
        })
        .collect();
    let bench_small = "bench_m = [10, 100]\nbench_t = [10, 20]\nbench_reps = 1\n".to_string();
    let mut firsts = firsts;
    firsts.push((bench_small.clone(), Kind::Bench, experiment(Kind::Bench, &bench_small)));
    verdicts.push((10, "determinism", determinism(&firsts)));

    let mut failed = 0;
    for (n, name, v) in &verdicts {
        println!("criterion {n:>2} {name}: {} ({})", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
