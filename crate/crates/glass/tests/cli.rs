use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glass::files::{list_dirs, list_files, sha256_hex};
use glass::glft;
use glass::imageio::load_image;
use glass::report::Report;
use glass_core::featpipe::toy_extract;

const QUICK: [&str; 4] = ["--set", "model.epochs=3", "--set", "data.image_size=32"];

fn glass(args: &[&str]) -> Output {
    glass_env(args, &[])
}

fn glass_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_glass"));
    cmd.args(args).env_remove("GLASS_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Hash of every file below `dir` with its relative path.
fn tree_hash(dir: &Path) -> String {
    fn walk(base: &Path, dir: &Path, acc: &mut String) {
        for f in list_files(dir, &["png", "bmp", "txt", "json", "csv"]).unwrap() {
            acc.push_str(&format!("{} {}\n", f.strip_prefix(base).unwrap().display(), sha256_hex(&std::fs::read(&f).unwrap())));
        }
        for d in list_dirs(dir).unwrap() {
            walk(base, &d, acc);
        }
    }
    let mut acc = String::new();
    walk(dir, dir, &mut acc);
    sha256_hex(acc.as_bytes())
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(glass(&["synth-data", "--out", s(&data), "--size", "32", "--train", "6", "--test-good", "4", "--test-defect", "4"]));
    data
}

#[test]
fn run_is_reproducible_and_leaves_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let before = tree_hash(&data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["run", "--data", s(&data), "--out", s(out)];
        args.extend(QUICK);
        ok(glass(&args));
    }
    let ja = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ja, std::fs::read(b.join("report.json")).unwrap());
    let report = Report::read(&a.join("report.json")).unwrap();
    assert_eq!(report.schema, "glass.report/1");
    assert_eq!(report.categories.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["blobs", "stripes"]);
    assert!(report.categories.iter().all(|c| c.n_test_normal == 4 && c.n_test_anomalous == 4));
    for name in ["config.txt", "inputs.sha256", "blobs_histogram.csv", "stripes_histogram.png", "blobs/model.glck"] {
        assert!(a.join(name).is_file(), "{name}");
    }

    let ck = a.join("blobs/model.glck");
    let pred = tmp.path().join("pred");
    ok(glass(&["infer", "--checkpoint", s(&ck), "--input", s(&data.join("blobs")), "--out", s(&pred)]));
    let csv = std::fs::read_to_string(pred.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(pred.join("scores/good/000.png").is_file());
    let ev = tmp.path().join("eval.json");
    let blobs = data.join("blobs");
    let mut args = vec!["evaluate", "--pred", s(&pred), "--gt", s(&blobs), "--out", s(&ev)];
    args.extend(QUICK);
    ok(glass(&args));
    let eval = Report::read(&ev).unwrap();
    assert!((eval.mean.image_auroc - report.categories[0].scores.image_auroc).abs() < 1e-12);
    assert!((eval.mean.pixel_auroc - report.categories[0].scores.pixel_auroc).abs() < 1e-4);

    ok(glass(&["ingest", "--data", s(&data)]));
    ok(glass(&["choose-hypothesis", "--data", s(&data), "--size", "32", "--out", s(&tmp.path().join("ch"))]));
    let synth_out = tmp.path().join("sl");
    ok(glass(&["synth-las", "--input-dir", s(&data.join("blobs/train/good")), "--count", "2", "--out", s(&synth_out)]));
    assert_eq!(std::fs::read_to_string(synth_out.join("manifest.csv")).unwrap().lines().count(), 13);
    let weak = tmp.path().join("ws");
    ok(glass(&["gen-weak-set", "--input-dir", s(&data.join("stripes/train/good")), "--count", "3", "--out", s(&weak)]));
    assert_eq!(std::fs::read_to_string(weak.join("manifest.csv")).unwrap().lines().count(), 13);
    assert_eq!(tree_hash(&data), before);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(glass(&[]).status.code(), Some(2));
    assert_eq!(glass(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(glass(&["run", "--data", out, "--out", out, "--set", "nope.key=1"]).status.code(), Some(2));
    assert_eq!(glass(&["run", "--data", out, "--out", out, "--ablation", "gn+xx"]).status.code(), Some(2));
    assert_eq!(glass(&["run", "--data", s(&tmp.path().join("missing")), "--out", out]).status.code(), Some(3));
    assert_eq!(glass(&["infer", "--checkpoint", s(&tmp.path().join("none.glck")), "--input", out, "--out", out]).status.code(), Some(3));
    assert_eq!(glass(&["--help"]).status.code(), Some(0));
}

fn echo_value(dir: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(dir.join("config.txt")).unwrap();
    text.lines().find_map(|l| l.strip_prefix(&format!("{key} = "))).unwrap().to_string()
}

#[test]
fn ablation_and_seed_precedence_reach_the_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(glass(&["synth-data", "--out", s(&data), "--size", "32", "--train", "4", "--test-good", "2", "--test-defect", "2", "--patterns", "blobs"]));
    let cfg = tmp.path().join("base.cfg");
    std::fs::write(&cfg, "# quick\nmodel.epochs = 1\ndata.image_size = 32\nseed = 3\n").unwrap();

    let gn = tmp.path().join("gn");
    ok(glass(&["train", "--config", s(&cfg), "--ablation", "gn", "--data", s(&data), "--out", s(&gn)]));
    let dir = gn.join("blobs");
    assert_eq!(echo_value(&dir, "model.branches"), "normal,gas");
    assert_eq!(echo_value(&dir, "gas.ascent"), "false");
    assert_eq!(echo_value(&dir, "gas.projection"), "false");
    assert_eq!(echo_value(&dir, "seed"), "3");

    let env_seed = tmp.path().join("env");
    ok(glass_env(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&env_seed)], &[("GLASS_SEED", "11")]));
    assert_eq!(echo_value(&env_seed.join("blobs"), "seed"), "11");
    let flag_seed = tmp.path().join("flag");
    ok(glass_env(&["train", "--config", s(&cfg), "--seed", "12", "--data", s(&data), "--out", s(&flag_seed)], &[("GLASS_SEED", "11")]));
    assert_eq!(echo_value(&flag_seed.join("blobs"), "seed"), "12");
}

#[test]
fn training_from_feature_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(glass(&["synth-data", "--out", s(&data), "--size", "32", "--train", "4", "--test-good", "2", "--test-defect", "2", "--patterns", "stripes"]));
    let fd = tmp.path().join("features");
    let cat = data.join("stripes");
    for split in ["train/good", "test/good", "test/defect"] {
        for img in list_files(&cat.join(split), &["png"]).unwrap() {
            let feats = toy_extract(&load_image(&img).unwrap()).unwrap();
            let path = fd.join("stripes").join(split).join(img.file_stem().unwrap()).with_extension("glft");
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            glft::write(&path, &glft::from_features(&feats).unwrap()).unwrap();
        }
    }
    let out = tmp.path().join("out");
    let mut args = vec!["train", "--data", s(&data), "--features-dir", s(&fd), "--out", s(&out)];
    args.extend(QUICK);
    ok(glass(&args));
    let ck = out.join("stripes/model.glck");
    assert!(ck.is_file());
    let pred = tmp.path().join("pred");
    ok(glass(&["infer", "--checkpoint", s(&ck), "--input", s(&cat), "--features-dir", s(&fd.join("stripes/test")), "--out", s(&pred)]));
    assert_eq!(std::fs::read_to_string(pred.join("scores.csv")).unwrap().lines().count(), 5);

    std::fs::remove_file(fd.join("stripes/train/good/000.glft")).unwrap();
    let out2 = tmp.path().join("out2");
    let mut args = vec!["train", "--data", s(&data), "--features-dir", s(&fd), "--out", s(&out2)];
    args.extend(QUICK);
    assert_eq!(glass(&args).status.code(), Some(3));
}
