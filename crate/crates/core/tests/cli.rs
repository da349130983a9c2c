use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grfu::model::{load_checkpoint, save_checkpoint, CellKind, Checkpoint, Head, ModelParams, ModelSpec};
use grfu::synthdata::load_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn grfu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grfu"))
        .args(args)
        .env("GRFU_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "task = classify\nsequences = 6\nlength = 12\nwindows = 1:4-7:noise_replace\n";
const MODEL: &str = "model = lgrf\nencoding_dim = 4\nhidden_dim = 6\nwindow = 5\nbatch = 4\nlr = 0.01\n";

/// Generates a small train and test set; returns their paths.
fn datasets(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write(dir, "data.cfg", SMALL);
    let train = dir.join("train.grfd");
    let test = dir.join("test.grfd");
    assert!(grfu(&["gen", "--config", s(&cfg), "--dataset", s(&train)]).status.success());
    let test_cfg = write(dir, "test.cfg", &SMALL.replace("sequences = 6", "sequences = 4\nfirst_sequence = 1000"));
    assert!(grfu(&["gen", "--config", s(&test_cfg), "--dataset", s(&test)]).status.success());
    (train, test)
}

fn train_config(dir: &Path, extra: &str) -> PathBuf {
    let (train, test) = datasets(dir);
    write(
        dir,
        "train.cfg",
        &format!("{MODEL}dataset = {}\ntest_dataset = {}\n{extra}", s(&train), s(&test)),
    )
}

#[test]
fn gen_is_deterministic_and_reports_histogram() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "a.cfg", SMALL);
    let a = dir.path().join("a.grfd");
    let b = dir.path().join("b.grfd");
    let out = grfu(&["gen", "--config", s(&cfg), "--dataset", s(&a), "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    grfu(&["gen", "--config", s(&cfg), "--dataset", s(&b), "--seed", "4"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let data = load_dataset(&a).unwrap();
    let mut counts = vec![0usize; data.spec.classes];
    for seq in &data.sequences {
        for &c in seq.classes().unwrap() {
            counts[c] += 1;
        }
    }
    let expected: Vec<String> = counts.iter().enumerate().map(|(c, n)| format!("{c}:{n}")).collect();
    let line = stdout(&out);
    assert!(line.contains("sequences 6 frames 72"), "{line}");
    assert!(line.trim_end().ends_with(&format!("classes {}", expected.join(" "))), "{line}");

    let out = grfu(&["gen", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`task`"), "{}", stderr(&out));
}

#[test]
fn bad_usage_exits_with_two() {
    assert_eq!(grfu(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(grfu(&["gen", "--seed", "x"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "task = classify\nepochz = 3\n");
    let out = grfu(&["gen", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epochz"));
    assert_eq!(grfu(&["eval", "--config", s(&cfg)]).status.code(), Some(2));
}

fn metrics(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("metrics.csv")).unwrap()
}

#[test]
fn training_writes_deterministic_metrics_and_checkpoints() {
    let dir = TempDir::new().unwrap();
    let cfg = train_config(dir.path(), "epochs = 2\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = grfu(&["train", "--config", s(&cfg), "--out", s(out), "--seed", "3"]);
        assert!(run.status.success(), "{}", stderr(&run));
    }
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(
        std::fs::read(a.join("checkpoint.grfu")).unwrap(),
        std::fs::read(b.join("checkpoint.grfu")).unwrap()
    );
    let text = metrics(&a);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,split,loss,metric,1,2,3,4,5");
    assert_eq!(lines.len(), 2 * 2 + 1);
    assert!(lines[1].starts_with("1,train,") && lines[2].starts_with("1,test,"));

    // evaluating the train split reproduces the last logged train metric
    let train_set = dir.path().join("train.grfd");
    let ckpt = a.join("checkpoint.grfu");
    let eval_dir = dir.path().join("eval");
    let out = grfu(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&train_set), "--out", s(&eval_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let logged: Vec<f64> = lines[3].split(',').skip(2).take(2).map(|v| v.parse().unwrap()).collect();
    let eval = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    let row: Vec<f64> = eval.lines().nth(1).unwrap().split(',').skip(2).take(2).map(|v| v.parse().unwrap()).collect();
    assert!((row[0] - logged[0]).abs() <= 1e-12 && (row[1] - logged[1]).abs() <= 1e-12);
}

#[test]
fn zero_epochs_writes_initialisation() {
    let dir = TempDir::new().unwrap();
    let cfg = train_config(dir.path(), "epochs = 0\n");
    let out = dir.path().join("run");
    assert!(grfu(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "5"]).status.success());
    assert_eq!(metrics(&out).lines().count(), 1);
    let ckpt = load_checkpoint(out.join("checkpoint.grfu")).unwrap();
    let init = ModelParams::init(&ckpt.spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(ckpt.params, init);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let full = train_config(dir.path(), "epochs = 3\n");
    let first = write(
        dir.path(),
        "first.cfg",
        &std::fs::read_to_string(&full).unwrap().replace("epochs = 3", "epochs = 1"),
    );
    let (a, b) = (dir.path().join("full"), dir.path().join("split"));
    assert!(grfu(&["train", "--config", s(&full), "--out", s(&a)]).status.success());
    assert!(grfu(&["train", "--config", s(&first), "--out", s(&b)]).status.success());
    let ckpt = b.join("checkpoint.grfu");
    let resumed = grfu(&["train", "--config", s(&full), "--out", s(&b), "--checkpoint", s(&ckpt)]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    let (ma, mb) = (metrics(&a), metrics(&b));
    assert_eq!(ma.lines().count(), mb.lines().count());
    for (x, y) in ma.lines().zip(mb.lines()).skip(1) {
        let lx: f64 = x.split(',').nth(2).unwrap().parse().unwrap();
        let ly: f64 = y.split(',').nth(2).unwrap().parse().unwrap();
        assert!((lx - ly).abs() <= 1e-10, "{x} vs {y}");
    }
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let cfg = train_config(dir.path(), "epochs = 3\nclip = none\n");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("lr = 0.01", "lr = 1e300");
    let cfg = write(dir.path(), "nan.cfg", &text);
    let out = grfu(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("epoch") && err.contains("batch"), "{err}");
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = TempDir::new().unwrap();
    let cfg = train_config(dir.path(), "epochs = 0\n");
    let run = dir.path().join("run");
    assert!(grfu(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let other = write(dir.path(), "reg.cfg", "task = regress\nsequences = 2\nlength = 10\nwindows = none\n");
    let reg = dir.path().join("reg.grfd");
    assert!(grfu(&["gen", "--config", s(&other), "--dataset", s(&reg)]).status.success());
    let ckpt = run.join("checkpoint.grfu");
    let out = grfu(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&reg), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sensor dims"), "{}", stderr(&out));
}

fn gates_csv(dir: &Path) -> Vec<(i64, i64, usize, f64)> {
    std::fs::read_to_string(dir.join("gates.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn gates_export_rows_on_the_simplex() {
    let dir = TempDir::new().unwrap();
    let cfg = train_config(dir.path(), "epochs = 1\n");
    let run = dir.path().join("run");
    assert!(grfu(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let test = dir.path().join("test.grfd");
    let ckpt = run.join("checkpoint.grfu");
    let out = grfu(&["gates", "--checkpoint", s(&ckpt), "--dataset", s(&test), "--out", s(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("sensor 1 pooled"));

    let rows = gates_csv(&run);
    assert_eq!(rows.len(), 4 * 12 * 2 + 2);
    for pair in rows.chunks(2) {
        assert_eq!((pair[0].0, pair[0].1), (pair[1].0, pair[1].1));
        assert!((pair[0].3 + pair[1].3 - 1.0).abs() <= 1e-9);
    }
    assert_eq!(rows[rows.len() - 2].1, -1);
}

#[test]
fn zero_gate_weights_split_evenly() {
    let dir = TempDir::new().unwrap();
    let (_, test) = datasets(dir.path());
    let mut spec = ModelSpec::new(CellKind::Egrf, vec![8, 16], Head::Classifier { classes: 6 });
    spec.d_e = 4;
    spec.d_h = 5;
    let mut params = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    params.visit_mut(&mut |name, t| {
        if name.starts_with("gate") {
            *t = t.map(|_| 0.0);
        }
    });
    let ckpt = dir.path().join("zero.grfu");
    save_checkpoint(&Checkpoint::new(spec, params), &ckpt).unwrap();
    let out = grfu(&["gates", "--checkpoint", s(&ckpt), "--dataset", s(&test), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", stderr(&out));
    for row in gates_csv(dir.path()) {
        assert_eq!(row.3, 0.5);
    }
}

#[test]
fn gates_refuse_ungated_models() {
    let dir = TempDir::new().unwrap();
    let cfg = train_config(dir.path(), "epochs = 0\n");
    let cfg_text = std::fs::read_to_string(&cfg).unwrap().replace("model = lgrf", "model = early_add");
    let cfg = write(dir.path(), "add.cfg", &cfg_text);
    let run = dir.path().join("run");
    assert!(grfu(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let ckpt = run.join("checkpoint.grfu");
    let test = dir.path().join("test.grfd");
    let out = grfu(&["gates", "--checkpoint", s(&ckpt), "--dataset", s(&test), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model has no fusion gates"));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let dir = TempDir::new().unwrap();
    let single = write(
        dir.path(),
        "single.cfg",
        "task = classify\nmodel = lstm_single_sensor\nsensor_dims = 3\nviews = full\nlags = 0\nwindows = none\n",
    );
    let out = grfu(&["gradcheck", "--config", s(&single)]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("pass"));

    let three = "task = regress\nmodel = lgrf\nsensor_dims = 6,3,4\nresidual = product_complement\nwindows = none\n";
    let cfg = write(dir.path(), "three.cfg", three);
    let out = grfu(&["gradcheck", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));

    let broken = write(dir.path(), "broken.cfg", &format!("{three}gradcheck_fault = sigmoid_scale\n"));
    let out = grfu(&["gradcheck", "--config", s(&broken)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}
