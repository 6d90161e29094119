use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = ["--set", "pairs_per_modality=300", "--set", "train_count=200", "--set", "image_count=3"];

fn pemd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pemd")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn gen_small(dir: &Path, seed: &str) {
    let mut args = vec!["gen-data", "--seed", seed, "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    let out = pemd(&args);
    assert_eq!(code(&out), 0, "{}", text(&out));
}

fn train_small(data: &Path, out_dir: &Path, method: &str) -> Output {
    pemd(&[
        "train", "--method", method, "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "1",
        "--set", "iterations=4", "--set", "batch_size=8", "--set", "probe_size=16", "--set", "probe_every=2",
    ])
}

#[test]
fn help_lists_every_config_key_with_its_default() {
    let out = pemd(&["--help"]);
    assert_eq!(code(&out), 0);
    let help = text(&out);
    for (key, default, _) in pemd::config::KEYS {
        assert!(help.contains(key), "{key} missing from help");
        if !default.is_empty() {
            assert!(help.contains(default), "default of {key} missing");
        }
    }
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&pemd(&["frobnicate"])), 1);
    assert_eq!(code(&pemd(&["train", "--method", "magic", "--out", d])), 1);
    let out = pemd(&["gen-data", "--seed", "0", "--out", d, "--set", "bach_size=3"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("unknown key"), "{}", text(&out));
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "lambda = -2\n").unwrap();
    assert_eq!(code(&pemd(&["gen-data", "--seed", "0", "--out", d, "--config", cfg.to_str().unwrap()])), 1);
    let out = pemd(&["eval", "--model", "missing.pmdl", "--data", d, "--out", "x.csv"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("missing.pmdl"));
    assert_eq!(code(&pemd(&["report", "--runs", d, "--out-csv", "a.csv", "--out-svg", "a.svg"])), 1);
}

#[test]
fn corrupted_dataset_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data, "0");
    let file = data.join("domain_a_train.pemd");
    let mut bytes = fs::read(&file).unwrap();
    bytes[0] = b'Q';
    fs::write(&file, bytes).unwrap();
    let out = train_small(&data, &dir.path().join("run"), "none");
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("domain_a_train.pemd") && text(&out).contains("magic"), "{}", text(&out));
}

#[test]
fn gen_data_is_byte_deterministic_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen_small(&a, "3");
    gen_small(&b, "3");
    for name in pemd::synth::DATASET_FILES.iter().chain(&["config.txt"]) {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let config = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(config.contains("data_seed = 3") && config.contains("pairs_per_modality = 300"));
}

#[test]
fn train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data, "0");
    let runs = dir.path().join("runs");
    for method in ["none", "pemd16+swd"] {
        let run = runs.join(method);
        let out = train_small(&data, &run, method);
        assert_eq!(code(&out), 0, "{}", text(&out));
        for f in ["model.pmdl", "history.csv", "config.txt", "run.log"] {
            assert!(run.join(f).exists(), "{f}");
        }
        let history = fs::read_to_string(run.join("history.csv")).unwrap();
        assert_eq!(history.lines().next().unwrap(), pemd::mcd::HISTORY_HEADER);
        assert_eq!(history.lines().count(), 5);
        let config = fs::read_to_string(run.join("config.txt")).unwrap();
        assert!(config.starts_with(&format!("# method: {method}\n")));
        assert!(!config.contains("wall"));

        let eval = run.join("eval.csv");
        let out = pemd(&["eval", "--model", run.join("model.pmdl").to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", eval.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", text(&out));
        let csv = fs::read_to_string(&eval).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(1).unwrap().starts_with(&format!("{method},1,AA,")));
    }
    let (csv, svg) = (dir.path().join("all.csv"), dir.path().join("all.svg"));
    let out = pemd(&["report", "--runs", runs.to_str().unwrap(), "--out-csv", csv.to_str().unwrap(), "--out-svg", svg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 11);
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("class=\"bar\"").count(), 2);
}

#[test]
fn failing_metric_floor_exits_with_two_and_grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("bench.csv");
    let out = pemd(&["bench-metrics", "--pairs", "100", "--seed", "1", "--out", out_file.to_str().unwrap()]);
    let table = fs::read_to_string(&out_file).unwrap();
    assert!(table.starts_with("metric,pearson,spearman\n"));
    let pemd16: f64 = table.lines().find(|l| l.starts_with("pemd16,")).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(code(&out), if pemd16 >= 0.98 { 0 } else { 2 }, "{}", text(&out));
    assert_eq!(code(&pemd(&["bench-metrics", "--pairs", "10", "--out", out_file.to_str().unwrap()])), 1);

    let out = pemd(&["grad-check", "--points", "5", "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    assert!(text(&out).contains("cross_entropy"));
}

#[test]
fn supervised_baseline_learns_the_source_task() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = pemd(&["gen-data", "--seed", "0", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let run = dir.path().join("none");
    let out = pemd(&[
        "train", "--method", "none", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--seed", "0",
        "--set", "batch_size=32", "--set", "learning_rate=0.01", "--set", "probe_every=100",
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let eval = run.join("eval.csv");
    let out = pemd(&["eval", "--model", run.join("model.pmdl").to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", eval.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(eval).unwrap();
    let aa: f64 = csv.lines().find(|l| l.contains(",AA,")).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(aa > 0.24, "AA accuracy {aa}");
}
