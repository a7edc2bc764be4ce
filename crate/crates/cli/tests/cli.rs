use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use dve::composite::{make_scurve, train_toy_mlp, Activation, TrainConfig};
use dve::dataio;
use dve::pipeline::FittedEnsemble;

const BIN: &str = env!("CARGO_BIN_EXE_dve");

fn dve(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DVE_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dve(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Small trained model plus training and query inputs on disk.
struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let (x, y) = make_scurve(240, 0.1, 11);
        let net = train_toy_mlp(&x, &y, &TrainConfig::new(&[3, 2], Activation::Selu, 30, 0.05, 11)).unwrap().model;
        dataio::save_model(&net, root.join("model")).unwrap();
        let train: Vec<usize> = (0..200).collect();
        let test: Vec<usize> = (200..240).collect();
        dataio::write_matrix(&x.select_rows(&train), root.join("x.csv")).unwrap();
        dataio::write_vector(&y[..200], root.join("y.dveb")).unwrap();
        dataio::write_matrix(&x.select_rows(&test), root.join("xq.dveb")).unwrap();
        dataio::write_vector(&y[200..], root.join("yq.csv")).unwrap();
        Fixture { _tmp: tmp, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn fit(&self, out: &str, extra: &[&str]) -> Output {
        let (model, x, y, out) = (self.path("model"), self.path("x.csv"), self.path("y.dveb"), self.path(out));
        let mut args = vec!["fit", "--model", p(&model), "--x", p(&x), "--y", p(&y), "--out", p(&out), "--steps", "40", "--m", "8"];
        args.extend_from_slice(extra);
        dve(&args)
    }
}

#[test]
fn help_output_matches_snapshots() {
    let snapshots = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    for sub in ["", "extract", "fit", "predict", "eval", "explain", "demo-scurve"] {
        let mut args: Vec<&str> = if sub.is_empty() { vec![] } else { vec![sub] };
        args.push("--help");
        let text = ok(&args);
        let file = snapshots.join(format!("help_{}.txt", if sub.is_empty() { "dve" } else { sub }));
        if update {
            fs::create_dir_all(&snapshots).unwrap();
            fs::write(&file, &text).unwrap();
        }
        assert_eq!(text, fs::read_to_string(&file).unwrap(), "help for '{sub}' drifted from {}", file.display());
        // every flag carries a description
        for line in text.lines().filter(|l| l.trim_start().starts_with('-')) {
            let parts: Vec<&str> = line.trim().split("  ").filter(|s| !s.trim().is_empty()).collect();
            assert!(parts.len() >= 2, "undocumented flag in '{sub}': {line}");
        }
    }
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(code(&dve(&["--help"])), 0);
    assert_eq!(code(&dve(&["--version"])), 0);
    assert_eq!(code(&dve(&[])), 1);
    assert_eq!(code(&dve(&["fit", "--bogus"])), 1);
    assert_eq!(code(&dve(&["fit", "--out", "x", "--scheme", "median"])), 1);
    assert_eq!(code(&f.fit("c", &["--m", "0"])), 1);
    assert_eq!(code(&f.fit("c", &["--temperature", "-1"])), 1);
    assert_eq!(code(&f.fit("c", &["--n-list", "4"])), 1);
    assert_eq!(code(&f.fit("c", &["--backend", "ivf", "--n-list", "5", "--n-probe", "9"])), 1);
    assert_eq!(code(&f.fit("c", &["--threads", "0"])), 1);

    let cfg = f.path("bad.toml");
    fs::write(&cfg, "m = 8\nwidth = 3\n").unwrap();
    let out = f.fit("c", &["--config", p(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));

    let missing = f.path("absent");
    let out = dve(&["predict", "--checkpoint", p(&missing), "--embeddings", p(&missing)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn eval_of_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.csv");
    let truth = dir.path().join("t.csv");
    fs::write(&preds, "mean,var,epistemic,aleatoric\n1.5,0.25,0.05,0.2\n-2.0,0.25,0.0,0.25\n3.0,0.25,0.1,0.15\n").unwrap();
    fs::write(&truth, "1.5\n-2.0\n3.0\n").unwrap();
    let out = ok(&["eval", "--predictions", p(&preds), "--truth", p(&truth)]);
    assert!(out.contains("\"rmse\": 0.0"), "{out}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let expected = 0.5 * (2.0 * std::f64::consts::PI * 0.25f64).ln();
    assert!((v["nll"].as_f64().unwrap() - expected).abs() < 1e-12);

    fs::write(&truth, "1.5\n-2.0\n").unwrap();
    assert_eq!(code(&dve(&["eval", "--predictions", p(&preds), "--truth", p(&truth)])), 2);
}

#[test]
fn fit_predict_round_trip() {
    let f = Fixture::new();
    let t = Instant::now();
    assert!(code(&f.fit("ckpt", &[])) == 0);
    let fit_time = t.elapsed();

    let ckpt = f.path("ckpt");
    let before = dir_bytes(&ckpt);
    let (model, xq) = (f.path("model"), f.path("xq.dveb"));
    let t = Instant::now();
    let a = ok(&["predict", "--checkpoint", p(&ckpt), "--model", p(&model), "--x", p(&xq)]);
    let predict_time = t.elapsed();
    let b = ok(&["predict", "--checkpoint", p(&ckpt), "--model", p(&model), "--x", p(&xq), "--threads", "3"]);
    assert_eq!(a, b);
    // prediction reads the stored sets and leaves the checkpoint untouched
    assert_eq!(dir_bytes(&ckpt), before);
    assert!(predict_time < fit_time, "predict {predict_time:?} vs fit {fit_time:?}");

    let mut lines = a.lines();
    assert_eq!(lines.next(), Some("mean,var,epistemic,aleatoric"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 40);
    for r in &rows {
        assert!(r[1] > 0.0 && r[2] >= 0.0 && r[3] >= 0.0);
        assert!((r[2] + r[3] - r[1]).abs() <= 4.0 * f64::EPSILON * r[1]);
    }

    // the same predictions through an export directory
    let (yq, exp) = (f.path("yq.csv"), f.path("queries"));
    ok(&["extract", "--model", p(&model), "--x", p(&xq), "--y", p(&yq), "--out", p(&exp), "--split", "test"]);
    let c = ok(&["predict", "--checkpoint", p(&ckpt), "--embeddings", p(&exp)]);
    assert_eq!(a, c);

    let preds = f.path("preds.csv");
    ok(&["predict", "--checkpoint", p(&ckpt), "--embeddings", p(&exp), "--out", p(&preds)]);
    let raw: serde_json::Value = serde_json::from_str(&ok(&["eval", "--predictions", p(&preds), "--truth", p(&yq)])).unwrap();
    let std: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--predictions", p(&preds), "--truth", p(&yq), "--checkpoint", p(&ckpt)])).unwrap();
    let sd = FittedEnsemble::load(&ckpt).unwrap().scaling.sd;
    assert!((raw["rmse"].as_f64().unwrap() / sd - std["rmse"].as_f64().unwrap()).abs() < 1e-12);
    assert!(raw["rmse"].as_f64().unwrap() < 0.5);
}

#[test]
fn fit_is_deterministic_across_routes_and_threads() {
    let f = Fixture::new();
    assert_eq!(code(&f.fit("a", &["--threads", "1"])), 0);
    let out = Command::new(BIN)
        .args(["fit", "--model", p(&f.path("model")), "--x", p(&f.path("x.csv")), "--y", p(&f.path("y.dveb"))])
        .args(["--out", p(&f.path("b")), "--steps", "40", "--m", "8"])
        .env("DVE_THREADS", "4")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(dir_bytes(&f.path("a")), dir_bytes(&f.path("b")));

    let (model, x, y, exp, c) = (f.path("model"), f.path("x.csv"), f.path("y.dveb"), f.path("train"), f.path("c"));
    ok(&["extract", "--model", p(&model), "--x", p(&x), "--y", p(&y), "--out", p(&exp)]);
    ok(&["fit", "--embeddings", p(&exp), "--out", p(&c), "--steps", "40", "--m", "8"]);
    assert_eq!(dir_bytes(&f.path("a")), dir_bytes(&c));

    // IVF is seeded too
    assert_eq!(code(&f.fit("i1", &["--backend", "ivf", "--n-list", "10", "--n-probe", "3", "--seed", "5"])), 0);
    assert_eq!(code(&f.fit("i2", &["--backend", "ivf", "--n-list", "10", "--n-probe", "3", "--seed", "5", "--threads", "2"])), 0);
    assert_eq!(dir_bytes(&f.path("i1")), dir_bytes(&f.path("i2")));
}

#[test]
fn config_file_sits_under_flags() {
    let f = Fixture::new();
    let cfg = f.path("fit.toml");
    fs::write(&cfg, "m = 5\nseed = 3\nscheme = \"wasserstein\"\nspace = \"f-space\"\nsoftmax = true\ntemperature = 2.5\n").unwrap();
    assert_eq!(code(&f.fit("c", &["--config", p(&cfg), "--temperature", "0.5"])), 0);
    let fe = FittedEnsemble::load(f.path("c")).unwrap();
    // the fixture passes --m 8 explicitly, which beats the file
    assert_eq!(fe.m, 8);
    assert_eq!(fe.optimizer.seed, 3);
    assert_eq!(fe.config.scheme, dve::WeightScheme::Wasserstein);
    assert_eq!(fe.config.space, dve::CombineSpace::FSpace);
    assert!(fe.config.use_softmax);
    assert_eq!(fe.config.temperature, 0.5);
}

#[test]
fn explain_reports_every_layer() {
    let f = Fixture::new();
    assert_eq!(code(&f.fit("ckpt", &[])), 0);
    let (ckpt, model, xq) = (f.path("ckpt"), f.path("model"), f.path("xq.dveb"));
    let out = ok(&["explain", "--checkpoint", p(&ckpt), "--model", p(&model), "--x", p(&xq), "--row", "3"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    for l in layers {
        assert_eq!(l["neighbors"].as_array().unwrap().len(), 8);
    }
    let csv = ok(&["predict", "--checkpoint", p(&ckpt), "--model", p(&model), "--x", p(&xq)]);
    let row: Vec<f64> = csv.lines().nth(4).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!((v["mean"].as_f64().unwrap() - row[0]).abs() < 1e-12);
    assert!((v["variance"].as_f64().unwrap() - row[1]).abs() < 1e-12);
    assert_eq!(code(&dve(&["explain", "--checkpoint", p(&ckpt), "--model", p(&model), "--x", p(&xq), "--row", "40"])), 1);
}

#[test]
fn predictions_refuse_a_different_model() {
    let f = Fixture::new();
    assert_eq!(code(&f.fit("ckpt", &[])), 0);
    let (x, y) = make_scurve(50, 0.1, 1);
    let other = train_toy_mlp(&x, &y, &TrainConfig::new(&[3, 2], Activation::Selu, 5, 0.05, 99)).unwrap().model;
    dataio::save_model(&other, f.path("other")).unwrap();
    let out = dve(&["predict", "--checkpoint", p(&f.path("ckpt")), "--model", p(&f.path("other")), "--x", p(&f.path("xq.dveb"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fitted on model"));
}

#[test]
fn demo_scurve_seed_7() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["demo-scurve", "--seed", "7", "--out", p(dir.path())]);
    let grab = |key: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(key)).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    let (net, dve_mse) = (grab("network test MSE"), grab("DVE test MSE"));
    println!("network {net} DVE {dve_mse}");
    assert!(dve_mse < net, "{out}");
    assert!(dir.path().join("model/model.json").is_file());
    assert!(dir.path().join("checkpoint/meta.json").is_file());
    assert_eq!(out, ok(&["demo-scurve", "--seed", "7"]));
}
