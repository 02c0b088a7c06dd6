use std::path::Path;
use std::process::{Command, Output};

use quantdistill::store::{save_model, StorageMode};
use quantdistill::EmbeddingNet;

fn quantdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantdistill"))
        .args(args)
        .env_remove("QUANTDISTILL_SEED")
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.txt");
    std::fs::write(
        &path,
        format!(
            "n_identities = 10\nteacher_iterations = 50\niterations = 20\nn_pairs = 100\nsmooth_window = 5\ncalib_batches = 2\nbits = 8\noutput_dir = {}\n",
            dir.display()
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn single_identity_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.txt");
    std::fs::write(&cfg, "n_identities = 1\n").unwrap();
    let cfg = p(&cfg);
    let out = quantdistill(&["pretrain", "--config", cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_identities"));
}

#[test]
fn missing_files_and_corrupt_models() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantdistill(&["pretrain", "--config", p(&dir.path().join("absent.txt"))]);
    assert_eq!(out.status.code(), Some(4));

    let cfg = small_config(dir.path());
    let bogus = dir.path().join("bogus.qfmd");
    std::fs::write(&bogus, b"not a model at all").unwrap();
    assert_eq!(quantdistill(&["eval", "--config", &cfg, p(&bogus)]).status.code(), Some(3));
    assert_eq!(
        quantdistill(&["distill", "--config", &cfg, "--teacher", p(&bogus)]).status.code(),
        Some(3)
    );
    assert_eq!(
        quantdistill(&["distill", "--config", &cfg, "--teacher", p(&bogus), "--bits", "5"]).status.code(),
        Some(2)
    );
}

#[test]
fn pretrain_distill_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(quantdistill(&["pretrain", "--config", &cfg]).status.success());
    let teacher = dir.path().join("teacher.qfmd");
    for f in ["teacher.qfmd", "teacher_loss.csv", "teacher_report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let out = quantdistill(&["distill", "--config", &cfg, "--teacher", p(&teacher), "--bits", "6,8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["student_w6a6.qfmd", "loss_w8a8.csv", "size_w6a6.json", "distill_summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("distill_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["students"].as_array().unwrap().len(), 2);

    let w8 = dir.path().join("student_w8a8.qfmd");
    let w6 = dir.path().join("student_w6a6.qfmd");
    let out = quantdistill(&["eval", "--config", &cfg, p(&teacher), p(&w8), p(&w6), p(&w8)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    let ratio = report["rows"][1]["ratio"].as_f64().unwrap();
    assert!(ratio > 0.25 && ratio < 1.0, "{ratio}");
    let csv = std::fs::read_to_string(dir.path().join("ranges.csv")).unwrap();
    assert!(csv.starts_with("depth,lo,hi,source\n"));

    // one model is a degenerate comparison, not an error
    std::fs::remove_file(dir.path().join("ranges.csv")).unwrap();
    assert!(quantdistill(&["eval", "--config", &cfg, p(&teacher)]).status.success());
    assert!(!dir.path().join("ranges.csv").exists());

    let other = dir.path().join("other.qfmd");
    save_model(&EmbeddingNet::mlp(&[64, 8, 4], 1).unwrap(), &other, StorageMode::Fp32).unwrap();
    assert_eq!(quantdistill(&["eval", "--config", &cfg, p(&teacher), p(&other)]).status.code(), Some(6));
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_quantdistill"))
        .args(["pretrain", "--config", &cfg])
        .env("QUANTDISTILL_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
