//! End-to-end runs of the `mate` binary on a tiny model and dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mate::checkpoint;
use mate::config::ExperimentConfig;
use mate::manifest::Manifest;
use mate::report::{accuracy_from_rows, read_samples, Summary};
use mate::svg::is_well_formed;
use mate_core::nn::ModelParams;

const TINY: &[&str] = &[
    "--set",
    "model.group_count=8",
    "--set",
    "model.group_size=8",
    "--set",
    "model.input_points=64",
];

fn mate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mate")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = mate(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) {
    ok(&[
        "dataset", "--out", p(dir), "--train-per-class", "3", "--val-per-class", "1", "--test-per-class", "2", "--points", "64",
        "--test-points", "700", "--seed", "5",
    ]);
}

fn tiny_checkpoint(data: &Path, out: &Path, epochs: &str) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--epochs", epochs, "--batch-size", "8"];
    args.extend_from_slice(TINY);
    ok(&args);
}

fn assert_run_dir(dir: &Path) {
    let v = fs::read_to_string(dir.join("VERSION")).unwrap();
    assert!(v.starts_with("mate "));
    ExperimentConfig::load(&dir.join("resolved.conf")).unwrap();
    assert!(!dir.join(".mate.lock").exists());
}

#[test]
fn dataset_counts_and_hash_are_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let ha = ok(&["dataset", "--out", p(&a), "--per-class", "100", "--seed", "7"]);
    let hb = ok(&["dataset", "--out", p(&b), "--per-class", "100", "--seed", "7"]);
    assert_eq!(ha, hb);
    let m = Manifest::load(&a).unwrap();
    let count = |s: &str| m.entries.iter().filter(|e| e.split == s).count();
    assert_eq!((count("train"), count("val"), count("test")), (800, 200, 200));
    assert!(m.entries.iter().all(|e| e.label < 8));
    assert_eq!(fs::read_dir(a.join("train")).unwrap().count(), 800);
    assert_run_dir(&a);
    let hc = ok(&["dataset", "--out", p(&t.path().join("c")), "--per-class", "100", "--seed", "8"]);
    assert_ne!(ha, hc);
}

#[test]
fn usage_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&mate(&["dataset", "--per-class", "4"])), 2);
    assert_eq!(code(&mate(&["frobnicate"])), 2);
    let conf = t.path().join("x.conf");
    fs::write(&conf, "seed = 1\nmodel.colour = red\n").unwrap();
    let o = mate(&["dataset", "--out", p(&t.path().join("d")), "--config", p(&conf)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.colour") && err.lines().count() == 1, "{err}");
    assert_eq!(code(&mate(&["dataset", "--out", p(&t.path().join("e")), "--set", "bogus=1"])), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    let o = mate(&["train", "--data", p(&t.path().join("missing")), "--out", p(&t.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
    // A held lock refuses a second writer.
    let d = t.path().join("locked");
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join(".mate.lock"), "1").unwrap();
    assert_eq!(code(&mate(&["dataset", "--out", p(&d), "--per-class", "4"])), 1);
}

#[test]
fn zero_epoch_training_writes_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    tiny_dataset(&data);
    let out = t.path().join("ckpt");
    tiny_checkpoint(&data, &out, "0");
    assert_run_dir(&out);
    let resolved = ExperimentConfig::load(&out.join("resolved.conf")).unwrap();
    let init = ModelParams::new(resolved.model_config()).unwrap();
    assert_eq!(fs::read(out.join(checkpoint::FILE_NAME)).unwrap(), checkpoint::encode(&init));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.trim(), "epoch,ce_loss,recon_loss,total_loss,train_acc,val_acc,lr");
}

#[test]
fn corrupt_all_compose_and_describe() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    tiny_dataset(&data);

    let all = t.path().join("all");
    ok(&["corrupt", "--data", p(&data), "--out", p(&all), "--kind", "all", "--seed", "1"]);
    let subdirs = fs::read_dir(&all).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(subdirs, 15);
    let g = Manifest::load(&all.join("gaussian")).unwrap();
    assert_eq!(g.entries.len(), 16);
    assert!(g.entries.iter().all(|e| e.corruption.as_deref() == Some("gaussian")));

    let (c1, c2) = (t.path().join("c1"), t.path().join("c2"));
    for c in [&c1, &c2] {
        ok(&["corrupt", "--data", p(&data), "--out", p(c), "--compose", "random2", "--seed", "3"]);
    }
    let m = Manifest::load(&c1).unwrap();
    for e in &m.entries {
        let tag = e.corruption.as_deref().unwrap();
        let parts: Vec<&str> = tag.split('+').collect();
        assert_eq!(parts.len(), 2, "{tag}");
        assert_ne!(parts[0], parts[1]);
        assert_eq!(fs::read(c1.join(&e.path)).unwrap(), fs::read(c2.join(&e.path)).unwrap());
    }
    assert_eq!(fs::read(c1.join("manifest.json")).unwrap(), fs::read(c2.join("manifest.json")).unwrap());

    let json: serde_json::Value = serde_json::from_str(&ok(&["corrupt", "--describe"])).unwrap();
    let kinds = json.as_array().unwrap();
    assert_eq!(kinds.len(), 15);
    assert!(kinds.iter().all(|k| k["name"].is_string() && k["parameters"].is_object()));

    assert_eq!(code(&mate(&["corrupt", "--data", p(&data), "--out", p(&t.path().join("x")), "--kind", "smoke"])), 2);
}

#[test]
fn ttt_ablate_and_report() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    tiny_dataset(&data);
    let ckpt_dir = t.path().join("ckpt");
    tiny_checkpoint(&data, &ckpt_dir, "1");
    let ckpt = ckpt_dir.join(checkpoint::FILE_NAME);
    let stream = t.path().join("stream");
    ok(&["corrupt", "--data", p(&data), "--out", p(&stream), "--kind", "gaussian", "--seed", "2"]);

    let run = |name: &str, extra: &[&str]| {
        let out = t.path().join(name);
        let mut args = vec!["ttt", "--checkpoint", p(&ckpt), "--data", p(&stream), "--out", p(&out), "--batch", "4"];
        args.extend_from_slice(extra);
        ok(&args);
        assert_run_dir(&out);
        out
    };
    let src = run("src", &["--mode", "source_only"]);
    let s = Summary::read(&src.join("summary.json")).unwrap();
    assert_eq!((s.samples, s.adapted), (16, 0));
    assert!(s.fps > 0.0);

    let online = run("online", &["--mode", "online", "--stride", "3"]);
    let s = Summary::read(&online.join("summary.json")).unwrap();
    assert_eq!(s.adapted, 16usize.div_ceil(3));
    let rows = read_samples(&online.join("samples.csv")).unwrap();
    assert!(rows.iter().all(|r| r.losses.len() == usize::from(r.adapted)));

    let standard = run("standard", &["--mode", "standard", "--steps", "3", "--limit", "4"]);
    let s = Summary::read(&standard.join("summary.json")).unwrap();
    assert_eq!((s.samples, s.adapted, s.mean_loss_per_step.len()), (4, 4, 3));
    let resolved = fs::read_to_string(standard.join("resolved.conf")).unwrap();
    assert!(resolved.contains("ttt.lr = 0.00005") && resolved.contains("ttt.steps = 3"), "{resolved}");

    let abl = t.path().join("abl");
    ok(&[
        "ablate", "--axis", "stride", "--grid", "1,8", "--checkpoint", p(&ckpt), "--data", p(&stream), "--out", p(&abl), "--batch", "4",
    ]);
    let csv = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(abl.join("stride-8").join("samples.csv").is_file());

    let rep = t.path().join("report");
    let out = ok(&["report", p(&src), p(&online), p(&standard), p(&abl), "--out", p(&rep)]);
    assert_eq!(out.lines().count(), 6);
    for svg in ["accuracy_vs_stride.svg", "accuracy_vs_mask_ratio.svg", "loss_vs_step.svg"] {
        assert!(is_well_formed(&fs::read_to_string(rep.join(svg)).unwrap()), "{svg}");
    }
    // Summary accuracy agrees with an independent pass over the raw rows.
    let mut r = csv::Reader::from_path(rep.join("summary.csv")).unwrap();
    let header = r.headers().unwrap().clone();
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let rows = read_samples(&Path::new(&rec[col("run")]).join("samples.csv")).unwrap();
        let hits = rows.iter().filter(|r| r.pred == r.label).count() as f64 / rows.len() as f64;
        assert_eq!(rec[col("accuracy")].parse::<f64>().unwrap(), hits);
        assert_eq!(rec[col("mean_accuracy")].parse::<f64>().unwrap(), accuracy_from_rows(&rows).1);
    }

    let empty = t.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = mate(&["report", p(&empty), "--out", p(&t.path().join("r2"))]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no runs"));
}
