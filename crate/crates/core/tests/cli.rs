use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gsina");

fn gsina(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn gsina")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_data(dir: &Path, seed: &str) {
    let out = dir.to_str().unwrap();
    let o = gsina(&[
        "gen-data", "--n-train", "40", "--n-val", "20", "--n-test", "20", "--base-min", "4", "--base-max", "8", "--seed",
        seed, "--out", out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_data(a.path(), "7");
    small_data(b.path(), "7");
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "metadata.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&gsina(&["gen-data", "--bias", "1.5"])), 2);
    assert_eq!(code(&gsina(&["train", "--r", "0"])), 2);
    assert_eq!(code(&gsina(&["train", "--tau", "-1"])), 2);
    assert_eq!(code(&gsina(&["no-such-command"])), 2);
    assert_eq!(code(&gsina(&["--help"])), 0);
}

#[test]
fn missing_files_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let ck = d.path().join("none.ckpt");
    let data = d.path().join("none.jsonl");
    let o = gsina(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = gsina(&["train", "--data", d.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn converge_reports_contraction() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("c.csv");
    let o = gsina(&["converge", "--tau", "1", "--trials", "100", "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["all_contracting"], true);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 101);
    assert_eq!(code(&gsina(&["converge", "--iters", "2"])), 5);
}

#[test]
fn gradcheck_passes_and_fails_where_expected() {
    let o = gsina(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(code(&gsina(&["gradcheck", "--m", "1"])), 0);
    assert_eq!(code(&gsina(&["gradcheck", "--tol", "1e-12"])), 5);
}

#[test]
fn train_eval_and_dump() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    small_data(&data, "3");
    let run = d.path().join("run");
    let args = [
        "train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--epochs", "3", "--patience", "3",
        "--batch-size", "16",
    ];
    let o = gsina(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["model.ckpt", "history.json", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&read(&run.join("metrics.json"))).unwrap();
    assert_eq!(metrics["loss_curve"].as_array().unwrap().len(), 3);

    let ck = run.join("model.ckpt");
    let test = data.join("test.jsonl");
    let o = gsina(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", test.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["num_examples"], 20);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let attn = d.path().join("attn");
    let o = gsina(&["attn-dump", "--checkpoint", ck.to_str().unwrap(), "--data", test.to_str().unwrap(), "--out", attn.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dump: serde_json::Value = serde_json::from_slice(&read(&attn.join("attention.json"))).unwrap();
    let first = &dump[0];
    let m = first["edges"].as_array().unwrap().len();
    assert_eq!(first["edge_attn"].as_array().unwrap().len(), m);
    assert_eq!(first["trace"].as_array().unwrap().len(), 10);
    assert!(first["node_attn"].is_array());
    let hist = std::fs::read_to_string(attn.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("bin_left,count_background,count_explanation"));
}

#[test]
fn ratio_one_announces_erm() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    small_data(&data, "4");
    let run = d.path().join("run");
    let o = gsina(&[
        "train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--r", "1.0", "--epochs", "1",
        "--patience", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("ERM-degenerate mode"));
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("gen.conf");
    std::fs::write(&cfg, "# small set\nn-train = 30\nn-val = 10\nn-test = 10\nbase-min = 4\nbase-max = 6\nbias = 0.5\n").unwrap();
    let out = d.path().join("a");
    let o = gsina(&["--config", cfg.to_str().unwrap(), "gen-data", "--out", out.to_str().unwrap(), "--n-test", "12"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let count = |f: &str| std::fs::read_to_string(out.join(f)).unwrap().lines().count();
    assert_eq!((count("train.jsonl"), count("val.jsonl"), count("test.jsonl")), (30, 10, 12));

    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(code(&gsina(&["--config", cfg.to_str().unwrap(), "gen-data"])), 2);
}
