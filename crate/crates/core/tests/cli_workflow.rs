use std::path::Path;

use nfcsi::cli::{main_with_args, run};
use nfcsi::dataset::load_bundle;
use nfcsi::evaluation::EvalReport;
use nfcsi::model::{Autoencoder, Checkpoint};
use nfcsi::training::{validation_metrics, TrainHistory};

const SMALL: [&str; 6] = ["--n-train", "20", "--n-val", "10", "--n-test", "10"];

fn nfcsi(args: &[&str]) -> nfcsi::Result<String> {
    let mut out = Vec::new();
    run(std::iter::once("nfcsi").chain(args.iter().copied()), &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn out_args<'a>(root: &'a Path, args: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--out", root.to_str().unwrap()];
    v.extend_from_slice(args);
    v
}

fn gen_data(root: &Path, seed: &str) {
    let mut args = out_args(root, &["gen-data", "--seed", seed]);
    args.extend_from_slice(&SMALL);
    nfcsi(&args).unwrap();
}

fn train(root: &Path, epochs: &str, extra: &[&str]) -> String {
    let mut args = out_args(root, &["train", "--architecture", "csinet", "--cr", "32", "--epochs", epochs, "--seed", "5"]);
    args.extend_from_slice(extra);
    args.push("train.batch_size=8");
    nfcsi(&args).unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for root in [a.path(), b.path()] {
        gen_data(root, "21");
        train(root, "2", &[]);
    }
    for rel in [
        "data/dataset.nfcs",
        "data/dataset.manifest.json",
        "checkpoints/csinet-cr32/final.ck",
        "checkpoints/csinet-cr32/best.ck",
        "checkpoints/csinet-cr32/history.csv",
        "gen-data.config.toml",
        "train.config.toml",
    ] {
        assert_eq!(read(a.path().join(rel)), read(b.path().join(rel)), "{rel}");
    }

    let c = tempfile::tempdir().unwrap();
    gen_data(c.path(), "22");
    assert_ne!(read(a.path().join("data/dataset.nfcs")), read(c.path().join("data/dataset.nfcs")));
}

#[test]
fn echoed_config_reproduces_the_dataset() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_data(a.path(), "31");
    let echo = a.path().join("gen-data.config.toml");
    nfcsi(&out_args(b.path(), &["--config", echo.to_str().unwrap(), "gen-data"])).unwrap();
    assert_eq!(read(a.path().join("data/dataset.nfcs")), read(b.path().join("data/dataset.nfcs")));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_data(a.path(), "41");
    gen_data(b.path(), "41");
    train(a.path(), "3", &[]);
    train(b.path(), "1", &[]);
    train(b.path(), "3", &["--resume"]);

    let dir = "checkpoints/csinet-cr32";
    let history = TrainHistory::from_csv(&String::from_utf8(read(b.path().join(dir).join("history.csv"))).unwrap()).unwrap();
    let epochs: Vec<usize> = history.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    assert_eq!(read(a.path().join(dir).join("history.csv")), read(b.path().join(dir).join("history.csv")));
    assert_eq!(read(a.path().join(dir).join("final.ck")), read(b.path().join(dir).join("final.ck")));
}

#[test]
fn eval_plot_and_compare_produce_consistent_outputs() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    gen_data(root, "51");
    train(root, "3", &[]);

    let final_ck = root.join("checkpoints/csinet-cr32/final.ck");
    let text = nfcsi(&out_args(root, &["eval", "--checkpoint", final_ck.to_str().unwrap(), "eval.split=val"])).unwrap();
    assert!(text.contains("NMSE"), "{text}");
    let report = EvalReport::from_json(&String::from_utf8(read(root.join("reports/csinet-cr32.json"))).unwrap()).unwrap();
    assert_eq!((report.split.as_str(), report.samples, report.cr), ("val", 10, 32));

    // The checkpoint reproduces the validation NMSE recorded at its epoch.
    let history = TrainHistory::from_csv(&String::from_utf8(read(root.join("checkpoints/csinet-cr32/history.csv"))).unwrap()).unwrap();
    let last = history.records.last().unwrap();
    assert!((report.nmse_db - last.val_nmse_db).abs() < 1e-6, "{} vs {}", report.nmse_db, last.val_nmse_db);
    let bundle = load_bundle(&root.join("data/dataset.nfcs")).unwrap();
    let model: Autoencoder<f32> = Checkpoint::load(&final_ck).unwrap().to_model().unwrap();
    let (db, _) = validation_metrics(&model, &bundle.val).unwrap();
    assert!((db - last.val_nmse_db).abs() < 1e-6);

    for metric in ["train_loss", "val_nmse_db", "val_rho"] {
        let csv = String::from_utf8(read(root.join(format!("plots/csinet-cr32-{metric}.csv")))).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3, "{metric}");
    }
    assert!(nfcsi(&out_args(root, &["plot", "--architecture", "csinet", "--cr", "32"])).is_err());
    let text = nfcsi(&out_args(root, &["plot", "--architecture", "csinet", "--cr", "32", "--force"])).unwrap();
    assert_eq!(text.matches("(3 rows)").count(), 3, "{text}");

    let report_path = root.join("reports/csinet-cr32.json");
    let table = nfcsi(&out_args(root, &["eval", "--compare", report_path.to_str().unwrap()])).unwrap();
    assert!(table.contains("csinet") && table.contains("32"), "{table}");
    assert!(root.join("reports/comparison.txt").exists());
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let root = tempfile::tempdir().unwrap();
    gen_data(root.path(), "61");
    let mut again = out_args(root.path(), &["gen-data", "--seed", "61"]);
    again.extend_from_slice(&SMALL);
    assert!(nfcsi(&again).is_err());
    again.push("--force");
    nfcsi(&again).unwrap();
}

#[test]
fn audit_prints_the_difference_law() {
    let root = tempfile::tempdir().unwrap();
    let text = nfcsi(&out_args(root.path(), &["audit"])).unwrap();
    for line in ["total(cr16) - total(cr32) = 262208", "total(cr32) - total(cr64) = 131104"] {
        assert_eq!(text.matches(line).count(), 2, "{text}");
    }
    let single = nfcsi(&out_args(root.path(), &["audit", "--cr", "16", "--architecture", "extendnlnet"])).unwrap();
    assert!(single.contains("2LK+K+L = 2·2048·128+128+2048 = 526464"), "{single}");
    assert!(root.path().join("reports/audit.json").exists());
}

#[test]
fn usage_errors_and_missing_inputs() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path().to_str().unwrap();
    assert_eq!(main_with_args(["nfcsi", "--out", r, "audit", "--cr="]), 2);
    assert_eq!(main_with_args(["nfcsi", "--out", r, "frobnicate"]), 2);
    assert_eq!(main_with_args(["nfcsi", "--out", r, "train", "--cr", "16,32"]), 1);
    assert_eq!(main_with_args(["nfcsi", "--out", r, "train", "--epochs", "1"]), 1);
    assert_eq!(main_with_args(["nfcsi", "--out", r, "gen-data", "data.r_range.hi=9000"]), 1);
    assert_eq!(main_with_args(["nfcsi", "--out", r, "audit", "--cr", "16", "--architecture", "csinet"]), 0);
    assert!(nfcsi(&["--out", r, "eval"]).is_err());
}
