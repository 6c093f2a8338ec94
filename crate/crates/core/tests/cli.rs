//! End-to-end runs of the `rfm-edit` binary on a small configuration.

use std::fs;
use std::path::Path;
use std::process::Command;

use rfm_edit::metrics::MetricReport;
use rfm_edit::tensor::{read_tensor, write_tensor};
use rfm_edit::train::RunConfig;
use rfm_edit::Tensor;

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut c = RunConfig::default();
    c.data.train_size = 32;
    c.data.val_size = 8;
    c.data.test_size = 12;
    c.train.epochs = 1;
    c.train.batch_size = 8;
    c.train.validation_subset_size = 4;
    c.train.validation_steps = 3;
    c.eval.subset_size = 12;
    c.eval.classifier.steps = 120;
    let path = dir.join("run.toml");
    fs::write(&path, c.to_toml().unwrap()).unwrap();
    path
}

fn rfm(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_rfm-edit"))
        .arg("--workdir")
        .arg(dir)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn gen_data_is_reproducible_for_a_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        small_config(d.path());
        rfm(d.path(), &["--seed", "7", "gen-data"]);
    }
    let manifest = |d: &Path| fs::read(d.join("data/manifest.json")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
}

#[test]
fn oracle_eval_scores_perfect_alignment() {
    let d = tempfile::tempdir().unwrap();
    small_config(d.path());
    rfm(d.path(), &["gen-data"]);
    let out = d.path().join("reports/oracle.json");
    rfm(
        d.path(),
        &["eval", "--oracle", "--out", "reports/oracle.json"],
    );
    let report: MetricReport = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report.clap_mean, 1.0);
    assert_eq!(report.n, 12);
    assert!(report.kl.abs() < 1e-9 && report.fd.abs() < 1e-6);
}

#[test]
fn edit_keeps_input_dimensions_and_writes_heatmap() {
    let d = tempfile::tempdir().unwrap();
    small_config(d.path());
    rfm(d.path(), &["gen-data"]);
    rfm(d.path(), &["train"]);
    let x = rfm_edit::rng::standard_normal(&[64, 16], &mut rfm_edit::rng::stream(3, &[]));
    let input = d.path().join("in.bin");
    write_tensor(&mut fs::File::create(&input).unwrap(), &x).unwrap();
    let out = d.path().join("out.bin");
    rfm(
        d.path(),
        &[
            "edit",
            "--in",
            input.to_str().unwrap(),
            "--instr",
            "replace dog with siren",
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "4",
            "--heatmap",
            d.path().join("attn").to_str().unwrap(),
        ],
    );
    let y: Tensor = read_tensor(&mut fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert!(d.path().join("attn.pgm").exists() && d.path().join("attn.csv").exists());

    let bad = Command::new(env!("CARGO_BIN_EXE_rfm-edit"))
        .args([
            "--workdir",
            d.path().to_str().unwrap(),
            "--config",
            d.path().join("run.toml").to_str().unwrap(),
        ])
        .args([
            "edit",
            "--in",
            input.to_str().unwrap(),
            "--instr",
            "summon dragon",
            "--out",
        ])
        .arg(d.path().join("x.bin"))
        .env("NO_COLOR", "1")
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(!String::from_utf8_lossy(&bad.stderr).is_empty());
}
