use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_histovit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn synth_writes_three_class_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--per-class", "10", "--seed", "1", "--out", "d"]);
    let mut total = 0;
    for class in ["lung_aca", "lung_scc", "lung_n"] {
        let n = std::fs::read_dir(tmp.path().join("d").join(class)).unwrap().count();
        assert_eq!(n, 10);
        total += n;
    }
    assert_eq!(total, 30);
    ok(tmp.path(), &["synth", "--per-class", "10", "--seed", "1", "--out", "e"]);
    let a = std::fs::read(tmp.path().join("d/lung_n/synth_00004.ppm")).unwrap();
    let b = std::fs::read(tmp.path().join("e/lung_n/synth_00004.ppm")).unwrap();
    assert_eq!(a, b);

    std::fs::write(tmp.path().join("blocker"), "").unwrap();
    let out = run(tmp.path(), &["synth", "--per-class", "1", "--out", "blocker/sub"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn split_is_reproducible_and_reports_missing_class() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(p, &["synth", "--per-class", "10", "--out", "d"]);
    ok(p, &["split", "--data", "d", "--seed", "4", "--out", "a.csv"]);
    ok(p, &["split", "--data", "d", "--seed", "4", "--out", "b.csv"]);
    let a = std::fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(p.join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 31);
    assert_eq!(a.lines().filter(|l| l.ends_with(",train")).count(), 18);

    std::fs::remove_dir_all(p.join("d/lung_scc")).unwrap();
    let out = run(p, &["split", "--data", "d", "--out", "c.csv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lung_scc"));
}

#[test]
fn train_eval_roc_explain_on_desk_data() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(p, &["synth", "--per-class", "100", "--seed", "0", "--out", "d"]);
    ok(p, &["split", "--data", "d", "--seed", "0", "--out", "m.csv"]);
    let data = ["--data", "d", "--manifest", "m.csv"];
    let train = [&["train", "--seed", "0", "--epochs", "5", "--out", "c.ckpt", "--log", "log.csv"][..], &data].concat();
    ok(p, &train);
    let log = std::fs::read_to_string(p.join("log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let final_val: f64 = rows[4].split(',').nth(2).unwrap().parse().unwrap();
    assert!(final_val >= 0.99, "{log}");

    ok(p, &[&["eval", "--ckpt", "c.ckpt", "--split", "test", "--out", "e.json"][..], &data].concat());
    let js: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("e.json")).unwrap()).unwrap();
    assert_eq!(js["accuracy"], 1.0);

    let stdout = ok(p, &[&["roc", "--ckpt", "c.ckpt", "--out", "r.csv"][..], &data].concat());
    assert_eq!(stdout.matches("auc=1.00000000").count(), 3, "{stdout}");
    let roc = std::fs::read_to_string(p.join("r.csv")).unwrap();
    assert!(roc.starts_with("class,threshold,fpr,tpr\n"));

    let zs = ok(p, &[&["zeroshot", "--seed", "0", "--out", "z.json"][..], &data].concat());
    assert!(zs.starts_with("test accuracy="));

    let image = "d/lung_scc/synth_00002.ppm";
    ok(p, &["explain", "--ckpt", "c.ckpt", "--image", image, "--class", "1", "--out", "o1.ppm"]);
    ok(p, &["explain", "--ckpt", "c.ckpt", "--image", image, "--class", "1", "--out", "o2.ppm"]);
    assert_eq!(std::fs::read(p.join("o1.ppm")).unwrap(), std::fs::read(p.join("o2.ppm")).unwrap());
    assert_eq!(std::fs::read(p.join("o1.csv")).unwrap(), std::fs::read(p.join("o2.csv")).unwrap());

    let out = run(p, &["explain", "--ckpt", "c.ckpt", "--image", image, "--class", "7", "--out", "x.ppm"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("class 7 is invalid"));
}

#[test]
fn zero_learning_rate_keeps_accuracies_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(p, &["synth", "--per-class", "10", "--out", "d"]);
    ok(p, &["split", "--data", "d", "--out", "m.csv"]);
    ok(
        p,
        &["train", "--data", "d", "--manifest", "m.csv", "--lr", "0", "--epochs", "3", "--out", "c", "--log", "l.csv"],
    );
    let log = std::fs::read_to_string(p.join("l.csv")).unwrap();
    let accs: Vec<String> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(accs.len(), 3);
    assert!(accs.iter().all(|a| a == &accs[0]));
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(p, &["synth", "--per-class", "5", "--out", "d"]);
    ok(p, &["split", "--data", "d", "--out", "m.csv"]);
    let data = ["--data", "d", "--manifest", "m.csv"];

    std::fs::write(p.join("bad.ckpt"), b"NOTACKPT and more").unwrap();
    let out = run(p, &[&["eval", "--ckpt", "bad.ckpt", "--out", "x.json"][..], &data].concat());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad magic"));

    std::fs::write(p.join("typo.cfg"), "learning_rate=0.1\n").unwrap();
    let out = run(p, &[&["train", "--config", "typo.cfg", "--out", "c", "--log", "l"][..], &data].concat());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"));

    std::fs::write(p.join("wild.cfg"), "optimizer=sgd\nmomentum=0\nlr=1e300\n").unwrap();
    let out = run(p, &[&["train", "--config", "wild.cfg", "--out", "c", "--log", "l"][..], &data].concat());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));

    let out = run(p, &["eval", "--ckpt", "missing.ckpt", "--data", "d", "--manifest", "m.csv", "--out", "x"]);
    assert_eq!(code(&out), 2);
    let out = run(p, &["train", "--data", "d"]);
    assert_eq!(code(&out), 2);
    let out = run(p, &["frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_sets_model_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(p, &["synth", "--per-class", "6", "--size", "48", "--out", "d"]);
    ok(p, &["split", "--data", "d", "--out", "m.csv"]);
    std::fs::write(p.join("run.cfg"), "# small model\nembed_dim=16\ndepth=1\nepochs=4\n").unwrap();
    let data = ["--data", "d", "--manifest", "m.csv"];
    ok(p, &[&["train", "--config", "run.cfg", "--epochs", "2", "--out", "c", "--log", "l.csv"][..], &data].concat());
    assert_eq!(std::fs::read_to_string(p.join("l.csv")).unwrap().lines().count(), 3);
    let (params, cfg) = histovit::checkpoint::load_checkpoint(&p.join("c")).unwrap();
    assert_eq!((cfg.embed_dim, cfg.depth, cfg.image_size), (16, 1, 32));
    assert_eq!(params.blocks.len(), 1);
}
