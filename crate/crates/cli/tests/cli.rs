use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tfilm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfilm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"{"kind":"multisine","length":1024,"sampleRate":8000,"components":[{"freq":300,"amp":0.5},{"freq":1900,"amp":0.2}]}"#;

const TINY: [&str; 10] = [
    "--set",
    "model.blocks=2",
    "--set",
    "model.patchLength=256",
    "--set",
    "model.channelCap=8",
    "--set",
    "model.blocksPerTfilm=4",
    "--set",
    "train.epochs=2",
];

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&tfilm(&["nonsense"])), 1);
    assert_eq!(code(&tfilm(&["gradcheck", "--module", "everything"])), 1);
    assert_eq!(code(&tfilm(&["--help"])), 0);
}

#[test]
fn gradcheck_tfilm_passes() {
    let o = tfilm(&["gradcheck", "--module", "tfilm"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert!(out.contains("PASS") && !out.contains("FAIL"));
}

#[test]
fn synth_and_degrade() {
    let dir = tempfile::tempdir().unwrap();
    let sig = dir.path().join("a.f32");
    let o = tfilm(&["synth", "--spec", SPEC, "--seed", "3", "--out", s(&sig)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("a.f32.json").exists());
    assert!(dir.path().join("a.f32.run.json").exists());

    // r = 1 keeps the sample payload byte for byte.
    let same = dir.path().join("same.f32");
    assert_eq!(code(&tfilm(&["degrade", "--in", s(&sig), "-r", "1", "--out", s(&same)])), 0);
    assert_eq!(fs::read(&sig).unwrap(), fs::read(&same).unwrap());

    let low = dir.path().join("low.f32");
    assert_eq!(code(&tfilm(&["degrade", "--in", s(&sig), "-r", "4", "--out", s(&low)])), 0);
    assert_eq!(fs::read(&low).unwrap().len(), 20 + 256 * 4);
    let up = dir.path().join("up.wav");
    assert_eq!(
        code(&tfilm(&["degrade", "--in", s(&sig), "-r", "4", "--upscale", "--out", s(&up)])),
        0
    );
    assert!(up.exists());
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.f32");
    fs::write(&bad, b"NOPE0000000000000000").unwrap();
    let out = dir.path().join("o.f32");
    assert_eq!(code(&tfilm(&["degrade", "--in", s(&bad), "-r", "2", "--out", s(&out)])), 2);
    let missing = dir.path().join("missing.tflm");
    let o = tfilm(&["eval", "--ckpt", s(&missing), "--data", s(dir.path()), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

fn corpus(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let p = dir.join(format!("s{i}.f32"));
        let o = tfilm(&["synth", "--spec", SPEC, "--seed", &i.to_string(), "--out", s(&p)]);
        assert_eq!(code(&o), 0);
    }
}

#[test]
fn train_eval_and_rerun_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 2);

    let run1 = dir.path().join("run1");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run1), "--seed", "4"];
    args.extend(TINY);
    let o = tfilm(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "train_run.json", "model.tflm", "checkpoints/best.tflm", "checkpoints/epoch-002.tflm"] {
        assert!(run1.join(f).exists(), "{f}");
    }

    // The emitted config alone reproduces the run.
    let run2 = dir.path().join("run2");
    let cfg = run1.join("config.json");
    let o = tfilm(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run2)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(run1.join("model.tflm")).unwrap(), fs::read(run2.join("model.tflm")).unwrap());
    let losses = |d: &Path| {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(d.join("train_run.json")).unwrap()).unwrap();
        v["epochs"].as_array().unwrap().iter().map(|e| e["trainLoss"].clone()).collect::<Vec<_>>()
    };
    assert_eq!(losses(&run1), losses(&run2));

    let report = dir.path().join("report.csv");
    let ckpt = run1.join("model.tflm");
    let o = tfilm(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--metrics", "snr,lsd,l2", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("Spline,2,") && rows[2].starts_with("Full,2,"));

    let low = dir.path().join("low.f32");
    let src = data.join("s0.f32");
    assert_eq!(code(&tfilm(&["degrade", "--in", s(&src), "-r", "2", "--out", s(&low)])), 0);
    let up = dir.path().join("up.f32");
    let o = tfilm(&["upsample", "--ckpt", s(&ckpt), "--in", s(&low), "-r", "2", "--out", s(&up)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&up).unwrap().len(), 20 + 1024 * 4);
}

#[test]
fn eval_of_identity_checkpoint_matches_spline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 2);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run)];
    args.extend(TINY);
    args.extend(["--set", "train.epochs=0"]);
    assert_eq!(code(&tfilm(&args)), 0);
    let report = dir.path().join("r.csv");
    let ckpt = run.join("model.tflm");
    let o = tfilm(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let cols = |line: &str| line.split(',').skip(1).map(str::to_owned).collect::<Vec<_>>();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(cols(lines[1]), cols(lines[2]), "{csv}");
}

#[test]
fn impute_csv_series() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let walk = r#"{"kind":"randomWalk","length":512,"start":5,"stepStd":0.1}"#;
    for i in 0..2 {
        let p = data.join(format!("w{i}.csv"));
        assert_eq!(code(&tfilm(&["synth", "--spec", walk, "--seed", &i.to_string(), "--out", s(&p)])), 0);
    }
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run)];
    args.extend(TINY);
    args.extend(["--set", r#"task={"kind":"imputation","rate":0.2}"#]);
    let o = tfilm(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("filled.csv");
    let ckpt = run.join("model.tflm");
    let series = data.join("w0.csv");
    let o = tfilm(&["impute", "--ckpt", s(&ckpt), "--in", s(&series), "--rate", "0.2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 513);
    let o = tfilm(&["impute", "--ckpt", s(&ckpt), "--in", s(&series), "--rate", "1.5", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tfilm(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--set", "model.bogus=1"]);
    assert_eq!(code(&o), 1);
}
