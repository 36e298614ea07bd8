use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn data(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(rel)
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayes-impute"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// Trains on the smoke data into `dir/train` and returns the checkpoint.
fn train_smoke(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = p(&dir.join("train"));
    let (conf, smoke) = (data("smoke.conf"), data("smoke"));
    let mut args = vec!["train", "--config", &conf, "--data", &smoke, "--out", &out];
    args.extend(extra);
    ok(&args);
    dir.join("train/model.ckpt")
}

fn field(json: &str, key: &str) -> serde_json::Value {
    serde_json::from_str::<serde_json::Value>(json).unwrap()[key].clone()
}

#[test]
fn synth_shapes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--n", "10", "--t", "8", "--m", "3", "--seed", "4", "--out", &p(out)]);
    }
    assert_eq!(rows(&a.join("values.csv")), 80);
    assert_eq!(rows(&a.join("labels.csv")), 10);
    assert_eq!(rows(&a.join("ground_truth.csv")), 80);
    for f in ["values.csv", "labels.csv", "ground_truth.csv", "config.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(read(&a.join("config.txt")).contains("n = 10\n"));
}

#[test]
fn synth_default_row_count() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", &p(dir.path())]);
    assert_eq!(rows(&dir.path().join("values.csv")), 600 * 24);
}

#[test]
fn refuses_non_empty_out_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    ok(&["synth", "--n", "5", "--out", &out]);
    let again = run(&["synth", "--n", "5", "--out", &out]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).starts_with("error[usage]:"));
    ok(&["synth", "--n", "5", "--out", &out, "--force"]);
}

#[test]
fn config_precedence_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "n = 12\nt = 5 # short\nm = 2\n").unwrap();
    let out = dir.path().join("o");
    ok(&["synth", "--config", &p(&conf), "--t", "4", "--out", &p(&out)]);
    assert_eq!(rows(&out.join("values.csv")), 12 * 4);
    let echoed = read(&out.join("config.txt"));
    assert!(echoed.contains("n = 12\n") && echoed.contains("t = 4\n"));

    std::fs::write(&conf, "widgets = 3\n").unwrap();
    let bad = run(&["synth", "--config", &p(&conf), "--out", &p(&dir.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error[config]:"));

    let flag = run(&["synth", "--widgets", "3", "--out", &p(&dir.path().join("y"))]);
    assert_eq!(flag.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&flag.stderr).starts_with("error[usage]:"));
}

#[test]
fn smoke_train_eval_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let ckpt = train_smoke(dir.path(), &[]);
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert_eq!(rows(&dir.path().join("train/epoch_log.csv")), 20);

    let (smoke, ck, conf) = (data("smoke"), p(&ckpt), data("smoke.conf"));
    let first = ok(&["eval", "--config", &conf, "--data", &smoke, "--checkpoint", &ck]);
    let second = ok(&["eval", "--config", &conf, "--data", &smoke, "--checkpoint", &ck]);
    assert_eq!(first.stdout, second.stdout);
    let json = String::from_utf8(first.stdout).unwrap();
    for key in ["mae", "mre", "auroc", "auprc", "n_eval_cells", "n_test_samples"] {
        assert!(!field(&json, key).is_null(), "{key}");
    }
    let baselines = field(&json, "baselines");
    assert_eq!(baselines[0]["method"], "zero");
    assert!((baselines[0]["mre"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let out = dir.path().join("analysis");
    ok(&["analyze", "--config", &conf, "--data", &smoke, "--checkpoint", &ck, "--out", &p(&out)]);
    let reliability = read(&out.join("fig_reliability.csv"));
    let full: f64 = reliability
        .lines()
        .find(|l| l.starts_with("100,"))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((full - field(&json, "mae").as_f64().unwrap()).abs() <= 1e-12);
    assert!(rows(&out.join("fig_per_feature.csv")) <= 3);
    let counted: usize = read(&out.join("fig_distribution.csv"))
        .lines()
        .filter(|l| l.starts_with("bin,"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counted, 20);
}

#[test]
fn eval_writes_metrics_file_when_out_given() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_smoke(dir.path(), &["--epochs", "2"]);
    let out = dir.path().join("eval");
    let shown = ok(&["eval", "--data", &data("smoke"), "--checkpoint", &p(&ckpt), "--mc-samples", "5", "--out", &p(&out)]);
    assert_eq!(read(&out.join("metrics.json")).as_bytes(), shown.stdout.as_slice());
}

#[test]
fn zero_epochs_keeps_initialization_and_deterministic_switch() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_smoke(&dir.path().join("a"), &["--epochs", "0"]);
    let b = train_smoke(&dir.path().join("b"), &["--epochs", "0"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ck = bayes_impute::checkpoint::Checkpoint::load(&a).unwrap();
    let init = bayes_impute::model::init_posterior::<f64>(
        &ck.model,
        bayes_impute::pipeline::derive_seed(7, bayes_impute::pipeline::stream::INIT),
    )
    .unwrap();
    assert_eq!(ck.posterior, init);
    assert_eq!(ck.meta.epochs_run, 0);

    let det = train_smoke(&dir.path().join("c"), &["--deterministic", "--epochs", "2"]);
    assert!(bayes_impute::checkpoint::Checkpoint::load(&det).unwrap().model.deterministic);
}

#[test]
fn impute_completes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_smoke(dir.path(), &["--epochs", "3"]);
    let smoke = data("smoke");
    let out = dir.path().join("imp");
    ok(&["impute", "--data", &smoke, "--checkpoint", &p(&ckpt), "--mc-samples", "8", "--out", &p(&out)]);
    let input = read(&Path::new(&smoke).join("values.csv"));
    let output = read(&out.join("imputed.csv"));
    assert_eq!(input.lines().count(), output.lines().count());
    for (i, o) in input.lines().zip(output.lines()).skip(1) {
        for (a, b) in i.split(',').zip(o.split(',')) {
            assert!(!b.is_empty());
            if !a.is_empty() {
                assert_eq!(a, b);
            }
        }
    }
    assert!(out.join("imputed_variance.csv").exists());

    let single = dir.path().join("single");
    let res = ok(&["impute", "--data", &smoke, "--checkpoint", &p(&ckpt), "--mc-samples", "1", "--out", &p(&single)]);
    assert!(!single.join("imputed_variance.csv").exists());
    assert!(String::from_utf8_lossy(&res.stderr).contains("note:"));
}

#[test]
fn failure_categories_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["train", "--data", &p(&dir.path().join("nowhere")), "--out", &p(&dir.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error[io]:"));

    let bad_data = dir.path().join("bad");
    std::fs::create_dir(&bad_data).unwrap();
    std::fs::write(bad_data.join("values.csv"), "sample_id,hour,a\ns1,0,abc\n").unwrap();
    std::fs::write(bad_data.join("labels.csv"), "sample_id,label\ns1,1\n").unwrap();
    let parse = run(&["train", "--data", &p(&bad_data), "--out", &p(&dir.path().join("o2"))]);
    assert_eq!(parse.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&parse.stderr).starts_with("error[parse]:"));

    let huge = run(&[
        "train", "--config", &data("smoke.conf"), "--data", &data("smoke"),
        "--learning-rate", "1e300", "--grad-clip", "none", "--epochs", "3",
        "--out", &p(&dir.path().join("o3")),
    ]);
    assert_eq!(huge.status.code(), Some(4), "{}", String::from_utf8_lossy(&huge.stderr));
    assert!(String::from_utf8_lossy(&huge.stderr).starts_with("error[numeric]:"));

    let corrupt = dir.path().join("c.ckpt");
    std::fs::write(&corrupt, "not a checkpoint").unwrap();
    let ck = run(&["eval", "--data", &data("smoke"), "--checkpoint", &p(&corrupt)]);
    assert_eq!(ck.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&ck.stderr).starts_with("error[checkpoint]:"));
}

#[test]
fn analyze_without_hidden_cells_explains() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_smoke(dir.path(), &["--epochs", "1", "--mar-rate", "0"]);
    let out = run(&["analyze", "--data", &data("smoke"), "--checkpoint", &p(&ckpt), "--out", &p(&dir.path().join("a"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[data]:") && err.contains("mar_rate"), "{err}");
    assert_eq!(err.lines().count(), 1);
}
