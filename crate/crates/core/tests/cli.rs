use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spatboost::cli::FitArtifact;
use spatboost::data::DataTable;
use spatboost::family::SpatialErrorStructure;
use spatboost::manifest::{sha256_file, RunManifest};
use spatboost::simstudy::prediction_metrics;
use spatboost::weights::WeightMatrix;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatboost"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_weights(p: &Path) -> WeightMatrix {
    WeightMatrix::read_csv(fs::File::open(p).unwrap()).unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_reader(fs::File::open(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL_SCENARIO: &str = "name = \"small\"\nn = 150\nn_test = 150\nq = 10\nk = 3\nm_max = 200\nfolds = 5\n";

fn emit_small(dir: &Path, lambda: &str) {
    fs::write(dir.join("small.toml"), SMALL_SCENARIO).unwrap();
    let o = run(
        dir,
        &["simulate", "--scenario", "small.toml", "--nsim", "1", "--lambda", lambda, "--variants", "ds-ds", "--emit-data", "data", "--out", "sim"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn weights_circular_construction() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["weights", "--mode", "circular", "--n", "400", "--k", "5", "--normalize", "--out", "w"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("rows 400"));
    let w = read_weights(&dir.path().join("w/weights.csv"));
    assert_eq!(w.nnz(), 4000);
    assert!(w.triplets().all(|(_, _, v)| v == 0.1));
    let m = manifest(&dir.path().join("w"));
    assert_eq!(m.command, "weights");
    assert_eq!(m.outputs["weights.csv"], sha256_file(&dir.path().join("w/weights.csv")).unwrap());
}

#[test]
fn weights_knn_and_invalid_topology() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pts.csv"), "id,x,y\na,0,0\nb,1,0\nc,3,0\n").unwrap();
    let o = run(dir.path(), &["weights", "--mode", "knn", "--coords", "pts.csv", "--k", "1", "--out", "w"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let w = read_weights(&dir.path().join("w/weights.csv"));
    assert_eq!(w.nnz(), 3);
    assert_eq!(w.get(2, 1), 1.0);

    let o = run(dir.path(), &["weights", "--mode", "circular", "--n", "4", "--k", "2", "--out", "bad"]);
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["weights", "--mode", "knn", "--k", "1", "--out", "bad"]);
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["weights", "--mode", "square", "--k", "1", "--out", "bad"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fit_selects_informative_columns_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    emit_small(d, "0.8");
    let o = run(
        d,
        &["fit", "--data", "data/train.csv", "--response", "y", "--weights", "data/train_weights.csv", "--variant", "ds-ds", "--lags", "--mmax", "300", "--out", "fit"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let art: FitArtifact = serde_json::from_reader(fs::File::open(d.join("fit/fit.json")).unwrap()).unwrap();
    for name in ["X1", "X2", "W.X1", "W.X2"] {
        assert!(art.fit.selected.iter().any(|s| s == name), "{name} not in {:?}", art.fit.selected);
    }

    // coefficients CSV applied to the training design reproduces fitted values
    let coef = DataTableLike::read(&d.join("fit/coefficients.csv"));
    let train = DataTable::from_path(&d.join("data/train.csv")).unwrap();
    let w = read_weights(&d.join("data/train_weights.csv"));
    let mut eta = vec![coef.get("(intercept)"); train.n_rows()];
    for name in &art.covariates {
        let x = train.require(name).unwrap();
        let wx = w.lag(x).unwrap();
        let (b, bw) = (coef.get(name), coef.get(&format!("W.{name}")));
        for i in 0..eta.len() {
            eta[i] += b * x[i] + bw * wx[i];
        }
    }
    for (a, b) in eta.iter().zip(&art.fitted_values) {
        assert!((a - b).abs() < 1e-10);
    }

    // predicting the training file reproduces the stored fitted values
    let o = run(d, &["predict", "--model", "fit/fit.json", "--data", "data/train.csv", "--weights", "data/train_weights.csv", "--out", "p_train"]);
    assert_eq!(code(&o), 0);
    let p = DataTable::from_path(&d.join("p_train/predictions.csv")).unwrap();
    assert_eq!(p.require("eta").unwrap(), art.fitted_values.as_slice());

    // printed RMSEP agrees with the library metric on the test set
    let o = run(d, &["predict", "--model", "fit/fit.json", "--data", "data/test.csv", "--weights", "data/test_weights.csv", "--out", "p_test"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    let printed: f64 = stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    let test = DataTable::from_path(&d.join("data/test.csv")).unwrap();
    let eta = DataTable::from_path(&d.join("p_test/predictions.csv")).unwrap();
    let s = SpatialErrorStructure::new(
        art.fit.lambda_hat,
        art.fit.sigma2_hat,
        std::sync::Arc::new(read_weights(&d.join("data/test_weights.csv"))),
    )
    .unwrap();
    let m = prediction_metrics(test.require("y").unwrap(), eta.require("eta").unwrap(), &s).unwrap();
    assert_eq!(printed, m.rmsep);

    // lag model without weights
    let o = run(d, &["predict", "--model", "fit/fit.json", "--data", "data/test.csv", "--out", "p_bad"]);
    assert_eq!(code(&o), 2);

    let mf = manifest(&d.join("fit"));
    assert_eq!(mf.inputs["data/train.csv"], sha256_file(&d.join("data/train.csv")).unwrap());
    assert_eq!(mf.outputs["fit.json"], sha256_file(&d.join("fit/fit.json")).unwrap());
}

struct DataTableLike(Vec<(String, f64)>);

impl DataTableLike {
    fn read(p: &Path) -> Self {
        let mut r = csv::Reader::from_path(p).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["name", "estimate"]);
        DataTableLike(
            r.records()
                .map(|rec| {
                    let rec = rec.unwrap();
                    (rec[0].to_string(), rec[1].parse().unwrap())
                })
                .collect(),
        )
    }

    fn get(&self, name: &str) -> f64 {
        self.0.iter().find(|(n, _)| n == name).unwrap().1
    }
}

#[test]
fn standardized_fit_roundtrips_through_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    emit_small(d, "0.3");
    let o = run(
        d,
        &["fit", "--data", "data/train.csv", "--response", "y", "--weights", "data/train_weights.csv", "--variant", "gb-gb", "--lags", "--standardize", "--mmax", "200", "--folds", "5", "--out", "fit"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let art: FitArtifact = serde_json::from_reader(fs::File::open(d.join("fit/fit.json")).unwrap()).unwrap();
    assert_eq!(art.standardization.as_ref().unwrap().len(), 10);
    let o = run(d, &["predict", "--model", "fit/fit.json", "--data", "data/train.csv", "--weights", "data/train_weights.csv", "--out", "p"]);
    assert_eq!(code(&o), 0);
    let p = DataTable::from_path(&d.join("p/predictions.csv")).unwrap();
    for (a, b) in p.require("eta").unwrap().iter().zip(&art.fitted_values) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn fit_error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 10 rows, 12 covariates: least squares is not identified
    let mut text = String::from("y");
    for j in 0..12 {
        text.push_str(&format!(",x{j}"));
    }
    text.push('\n');
    for i in 0..10 {
        text.push_str(&format!("{}", (i as f64 * 1.3).sin()));
        for j in 0..12 {
            text.push_str(&format!(",{}", ((i * 12 + j) as f64 * 0.77).cos()));
        }
        text.push('\n');
    }
    fs::write(d.join("wide.csv"), text).unwrap();
    assert_eq!(code(&run(d, &["weights", "--mode", "circular", "--n", "10", "--k", "1", "--normalize", "--out", "w"])), 0);
    let o = run(d, &["fit", "--data", "wide.csv", "--response", "y", "--weights", "w/weights.csv", "--variant", "fgls", "--out", "f"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("rank deficient"));

    fs::write(d.join("na.csv"), "y,x\n1,2\n3,NA\n").unwrap();
    let o = run(d, &["fit", "--data", "na.csv", "--response", "y", "--weights", "w/weights.csv", "--out", "f"]);
    assert_eq!(code(&o), 2);

    let o = run(d, &["fit", "--data", "wide.csv", "--response", "nope", "--weights", "w/weights.csv", "--out", "f"]);
    assert_eq!(code(&o), 2);
    let o = run(d, &["fit", "--data", "wide.csv", "--response", "y", "--weights", "w/weights.csv", "--variant", "qml", "--out", "f"]);
    assert_eq!(code(&o), 2);

    // constant response: moment system not identified
    let mut text = String::from("y,x\n");
    for i in 0..10 {
        text.push_str(&format!("2,{}\n", i));
    }
    fs::write(d.join("const.csv"), text).unwrap();
    let o = run(d, &["fit", "--data", "const.csv", "--response", "y", "--weights", "w/weights.csv", "--folds", "3", "--out", "f"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn simulate_single_replication_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL_SCENARIO).unwrap();
    let o = run(d, &["simulate", "--scenario", "small.toml", "--nsim", "1", "--lambda", "0", "--q", "20", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(d.join("s/metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 5);
    let m = manifest(&d.join("s"));
    assert_eq!(m.outputs["metrics.csv"], sha256_file(&d.join("s/metrics.csv")).unwrap());
    assert!(m.inputs.contains_key("small.toml"));
}

#[test]
fn simulate_accepts_negative_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL_SCENARIO).unwrap();
    let o = run(d, &["simulate", "--scenario", "small.toml", "--nsim", "1", "--lambda", "-0.8", "--variants", "ds-ds", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(d.join("s/metrics.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().contains(",-0.8,"), "{text}");
}

#[test]
fn simulate_high_dimension_skips_least_squares_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL_SCENARIO).unwrap();
    let o = run(d, &["simulate", "--scenario", "small.toml", "--nsim", "1", "--q", "200", "--mmax", "30", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("skipped LS-GB") && stderr.contains("skipped FGLS"));
    let text = fs::read_to_string(d.join("s/metrics.csv")).unwrap();
    let variants: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, vec!["GB-GB", "DS-GB", "DS-DS"]);
}

#[test]
fn simulate_neighbourhood_sweep_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL_SCENARIO).unwrap();
    let args = ["simulate", "--scenario", "small.toml", "--nsim", "1", "--k", "1,2,3,5,10,20", "--variants", "ds-ds", "--mmax", "50"];
    let o = run(d, &[&args[..], &["--out", "a"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    let scenarios: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(scenarios, vec!["small-k1", "small-k2", "small-k3", "small-k5", "small-k10", "small-k20"]);

    let o = run(d, &[&args[..], &["--out", "b"]].concat());
    assert_eq!(code(&o), 0);
    assert_eq!(manifest(&d.join("a")).outputs, manifest(&d.join("b")).outputs);
}

#[test]
fn simulate_rejects_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["simulate", "--lambda", "1.5", "--out", "s"])), 2);
    assert_eq!(code(&run(d, &["simulate", "--q", "7", "--out", "s"])), 2);
    fs::write(d.join("bad.toml"), "unknown_key = 3\n").unwrap();
    assert_eq!(code(&run(d, &["simulate", "--scenario", "bad.toml", "--out", "s"])), 2);
}
