//! End-to-end checks of the `binclamp` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use binclamp::codes::PackedCodeMatrix;
use binclamp::data::{generate_synthetic, SyntheticSpec};
use binclamp::trainer::{extract_codes, SavedModel};
use tempfile::TempDir;

const CONFIG: &str = r#"
method = "abc"
bits = 12
seed = 3

[loss]
reg_weight = 0.01

[schedule.lr]
initial = 0.01

[training]
batch_size = 20
epochs = 6
eval_every = 2

[data]
source = "synthetic"
classes = 4
per_class = 25
dim = 16
sigma = 0.3
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_binclamp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train_into(cfg: &Path, out: &Path) -> Output {
    run(&["train", s(cfg), "--out", s(out), "--quiet"])
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = run(&["train", s(&cfg), "--out", s(&a)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("final map"));
    assert!(train_into(&cfg, &b).status.success());

    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,iteration,r,alpha,lr,loss,map\n"));
    assert_eq!(metrics.lines().count(), 7);
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("model.json")).unwrap(),
        fs::read(b.join("model.json")).unwrap()
    );

    // The echoed configuration spells out every default and reproduces the run.
    let echo = fs::read_to_string(a.join("config.toml")).unwrap();
    for key in [
        "margin = 24.0",
        "momentum = 0.9",
        "weight_decay = 0.004",
        "floor = 0.002",
        "batch_size = 20",
    ] {
        assert!(echo.contains(key), "{key} missing from\n{echo}");
    }
    let c = tmp.path().join("c");
    assert!(train_into(&a.join("config.toml"), &c).status.success());
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(c.join("metrics.csv")).unwrap()
    );
}

#[test]
fn flags_override_the_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("o");
    let r = run(&[
        "train",
        s(&cfg),
        "--out",
        s(&out),
        "--bits",
        "8",
        "--method",
        "scaled-tanh",
        "--seed",
        "9",
        "--quiet",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("method = \"scaled-tanh\""));
    assert!(echo.contains("bits = 8"));
    assert!(echo.contains("seed = 9"));
}

#[test]
fn seed_sweep_runs_in_parallel() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("epochs = 6", "epochs = 2"));
    let out = tmp.path().join("sweep");
    let r = run(&[
        "train",
        s(&cfg),
        "--out",
        s(&out),
        "--seeds",
        "3",
        "--jobs",
        "3",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for seed in 3..6 {
        assert!(out.join(format!("seed-{seed}/metrics.csv")).exists());
    }
    let a = fs::read(out.join("seed-3/metrics.csv")).unwrap();
    let b = fs::read(out.join("seed-4/metrics.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn invalid_configs_exit_with_validation_code() {
    let tmp = TempDir::new().unwrap();
    let no_bn =
        format!("{CONFIG}\n[model]\nlayers = [{{ kind = \"linear\" }}, {{ kind = \"abc\" }}]\n");
    let cfg = write_config(tmp.path(), &no_bn);
    let r = train_into(&cfg, &tmp.path().join("x"));
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("batchnorm"));

    let cfg = write_config(
        tmp.path(),
        &CONFIG
            .replace("bits = 12", "bits = 0")
            .replace("batch_size = 20", "batch_size = 7"),
    );
    let r = train_into(&cfg, &tmp.path().join("x"));
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(
        err.contains("bits") && err.contains("training.batch_size"),
        "{err}"
    );
}

#[test]
fn divergence_and_io_failures_have_their_own_codes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &CONFIG.replace("initial = 0.01", "initial = 1e30"),
    );
    let r = train_into(&cfg, &tmp.path().join("x"));
    assert_eq!(r.status.code(), Some(3));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("iteration") && err.contains("r = "), "{err}");

    let r = train_into(&tmp.path().join("missing.toml"), &tmp.path().join("x"));
    assert_eq!(r.status.code(), Some(4));
}

#[test]
fn extract_matches_in_process_codes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let run_dir = tmp.path().join("run");
    assert!(train_into(&cfg, &run_dir).status.success());

    let (_, data) = generate_synthetic(&SyntheticSpec::new(4, 125, 16, 0.3, 99)).unwrap();
    assert_eq!(data.len(), 100);
    let features = tmp.path().join("feat.bnf");
    data.save(&features).unwrap();
    let model = run_dir.join("model.json");
    let c1 = tmp.path().join("c1.bnc");
    let c2 = tmp.path().join("c2.bnc");
    for out in [&c1, &c2] {
        let r = run(&[
            "extract",
            "--model",
            s(&model),
            "--features",
            s(&features),
            "--out",
            s(out),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let bytes = fs::read(&c1).unwrap();
    assert_eq!(bytes, fs::read(&c2).unwrap());
    let codes = PackedCodeMatrix::from_bytes(&bytes).unwrap();
    assert_eq!((codes.len(), codes.bits()), (100, 12));

    let saved = SavedModel::load(&model).unwrap();
    assert_eq!(
        codes,
        extract_codes(&saved.network, saved.method, &data).unwrap()
    );

    let from_config = tmp.path().join("c3.bnc");
    let r = run(&[
        "extract",
        "--model",
        s(&model),
        "--config",
        s(&cfg),
        "--split",
        "test",
        "--out",
        s(&from_config),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        PackedCodeMatrix::from_bytes(&fs::read(&from_config).unwrap())
            .unwrap()
            .len(),
        20
    );

    let tanh_cfg = write_config(
        tmp.path(),
        &CONFIG.replace("method = \"abc\"", "method = \"scaled-tanh\""),
    );
    let r = run(&[
        "extract",
        "--model",
        s(&model),
        "--config",
        s(&tanh_cfg),
        "--out",
        s(&from_config),
    ]);
    assert!(!r.status.success());
}

#[test]
fn eval_reproduces_fixture_values() {
    let tmp = TempDir::new().unwrap();
    let report = tmp.path().join("report.csv");
    let r = run(&[
        "eval",
        "--db",
        s(&fixture("micro_db.bnc")),
        "--queries",
        s(&fixture("micro_query.bnc")),
        "--method",
        "abc",
        "--out",
        s(&report),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(
        text,
        "bits,method,map,precision_at_500\n4,abc,0.833333,0.400000\n"
    );
    assert_eq!(String::from_utf8_lossy(&r.stdout), text);

    let multi = |mode: &str| {
        let r = run(&[
            "eval",
            "--db",
            s(&fixture("multi_db.bnc")),
            "--queries",
            s(&fixture("multi_query.bnc")),
            "--mode",
            mode,
        ]);
        assert!(r.status.success());
        String::from_utf8(r.stdout).unwrap()
    };
    assert!(multi("single-label").contains(",0.333333,"));
    assert!(multi("multi-label").contains(",0.583333,"));

    let r = run(&[
        "eval",
        "--db",
        s(&fixture("micro_db.bnc")),
        "--queries",
        s(&fixture("multi_query.bnc")),
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("bit"));
}

#[test]
fn separated_codes_score_one() {
    let tmp = TempDir::new().unwrap();
    let rows: Vec<[bool; 4]> = (0..12)
        .map(|i| [i % 2 == 0, i % 2 == 0, i % 2 == 1, i % 2 == 1])
        .collect();
    let labels = (0..12).map(|i| binclamp::LabelSet::single(i % 2)).collect();
    let codes = PackedCodeMatrix::from_bits(&rows)
        .unwrap()
        .with_labels(labels)
        .unwrap();
    let path = tmp.path().join("sep.bnc");
    fs::write(&path, codes.to_bytes()).unwrap();
    let r = run(&[
        "eval",
        "--db",
        s(&path),
        "--queries",
        s(&path),
        "--exclude-self",
    ]);
    assert!(String::from_utf8_lossy(&r.stdout).contains(",1.000000,"));
}

#[test]
fn curves_merge_runs_by_epoch() {
    let tmp = TempDir::new().unwrap();
    let header = "epoch,iteration,r,alpha,lr,loss,map\n";
    let abc = tmp.path().join("abc.csv");
    let tanh = tmp.path().join("tanh.csv");
    fs::write(
        &abc,
        format!("{header}1,10,1,1,0.01,0.5,\n2,20,0.95,1,0.01,0.4,0.8\n3,30,0.9,1,0.01,0.3,0.9\n"),
    )
    .unwrap();
    fs::write(&tanh, format!("{header}2,20,1,1.5,0.01,0.6,0.7\n")).unwrap();

    let r = run(&["curves", s(&abc)]);
    assert!(r.status.success());
    assert_eq!(
        String::from_utf8_lossy(&r.stdout),
        "epoch,abc\n1,\n2,0.8\n3,0.9\n"
    );

    let merged = tmp.path().join("merged.csv");
    let r = run(&["curves", s(&abc), s(&tanh), "--out", s(&merged)]);
    assert!(r.status.success());
    assert_eq!(
        fs::read_to_string(&merged).unwrap(),
        "epoch,abc,tanh\n1,,\n2,0.8,0.7\n3,0.9,\n"
    );

    let r = run(&["curves", s(&abc), s(&tanh), "--column", "loss"]);
    assert_eq!(
        String::from_utf8_lossy(&r.stdout),
        "epoch,abc,tanh\n1,0.5,\n2,0.4,0.6\n3,0.3,\n"
    );

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, format!("{header}1,10,1,1,0.01,0.5,\n2,20,1,1\n")).unwrap();
    let r = run(&["curves", s(&abc), s(&bad)]);
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));
}
