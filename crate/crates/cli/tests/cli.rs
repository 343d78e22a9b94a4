use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hyperdyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperdyn")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("summary.jsonl")).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

const SMALL_CLEAN: &str = "n_total = 300\nn_train = 60\nn_val = 60\ninner_steps = 50\nfinal_steps = 50\nhyper_iters = 4\nradius = 30.0\n";

#[test]
fn check_runs_clean() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("check");
    let o = hyperdyn(&["check", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["metrics"]["checks_failed"], 0.0);
    assert!(out.join("checks.csv").exists());
    assert_eq!(summary(&out)["status"]["status"], "complete");
}

#[test]
fn unknown_config_key_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "hyper_lrr = 0.1\n").unwrap();
    let o = hyperdyn(&["clean", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn bad_flag_values_are_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = hyperdyn(&["rtho", "--delta", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = hyperdyn(&["mtl", "--config", "/dev/null", "--hyper-lr", "-1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_config_file_is_exit_4() {
    let o = hyperdyn(&["clean", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn divergence_is_exit_3_with_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("{SMALL_CLEAN}inner_lr = 40.0\n")).unwrap();
    let out = dir.path().join("o");
    let o = hyperdyn(&["clean", "--config", cfg.to_str().unwrap(), "--inner-steps", "3000", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["status"]["status"], "aborted");
    assert!(s["status"]["error"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn clean_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL_CLEAN).unwrap();
    let out = dir.path().join("o");
    let o = hyperdyn(&["clean", "--config", cfg.to_str().unwrap(), "--seed", "3", "--hyper-iters", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("seed = 3") && written.contains("hyper_iters = 5"));
    assert_eq!(fs::read_to_string(out.join("records.jsonl")).unwrap().lines().count(), 5);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.lines().next().unwrap().starts_with("run,seed,iteration,t,response"));
    assert_eq!(curves.lines().count(), 6);

    let again = dir.path().join("again");
    let o = hyperdyn(&["clean", "--config", out.join("config.toml").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(summary(&out)["metrics"], summary(&again)["metrics"]);
}

fn write_idx(dir: &Path, n: usize) -> (String, String) {
    let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
    let mut img = Vec::new();
    for v in [0x0803u32, n as u32, 2, 2] {
        img.extend(v.to_be_bytes());
    }
    let mut lab = Vec::new();
    for v in [0x0801u32, n as u32] {
        lab.extend(v.to_be_bytes());
    }
    for i in 0..n {
        let class = (i % 10) as u8;
        let jitter = (i * 37 % 11) as u8;
        img.extend([class * 20 + jitter, 255 - class * 20, jitter * 3, class * 7]);
        lab.push(class);
    }
    fs::write(&images, img).unwrap();
    fs::write(&labels, lab).unwrap();
    (images.display().to_string(), labels.display().to_string())
}

#[test]
fn idx_files_feed_cleaning() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_idx(dir.path(), 400);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("{SMALL_CLEAN}dataset = \"idx\"\ntrain_images = \"{images}\"\ntrain_labels = \"{labels}\"\nclasses = 10\n")).unwrap();
    let out = dir.path().join("o");
    let o = hyperdyn(&["clean", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary(&out)["metrics"]["corrupted"], 30.0);

    fs::write(&labels, [0u8, 0, 8, 1, 0, 0, 1, 144, 3]).unwrap();
    let o = hyperdyn(&["clean", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn csv_files_feed_cleaning() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let mut text = String::from("label,x,y\n");
    for i in 0..400 {
        let c = i % 2;
        text.push_str(&format!("{c},{},{}\n", c as f64 * 3.0 + (i % 7) as f64 * 0.1, (i % 5) as f64 * 0.2));
    }
    fs::write(&data, text).unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("{SMALL_CLEAN}dataset = \"csv\"\ndata_csv = \"{}\"\n", data.display())).unwrap();
    let o = hyperdyn(&["clean", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn forward_engine_is_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL_CLEAN).unwrap();
    let runs: Vec<serde_json::Value> = ["forward", "reverse"]
        .iter()
        .map(|engine| {
            let out = dir.path().join(engine);
            let o = hyperdyn(&["clean", "--config", cfg.to_str().unwrap(), "--engine", engine, "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            summary(&out)["metrics"]["dh.kept"].clone()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
