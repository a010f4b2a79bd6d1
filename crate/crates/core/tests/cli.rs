use std::path::Path;
use std::process::{Command, Output};

use catenary::model::{random_model, OdeMatrix, PositiveRange};
use catenary::simulator::spectral_solve;
use catenary::{CatenaryModel, Matrix};
use serde_json::Value;

fn catenary(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catenary"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn read_json(p: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn max_rate_error(truth: &CatenaryModel, id: &Value) -> f64 {
    let m = &id["matrix"];
    let n = truth.n();
    let mut worst = ((id["k1e"].as_f64().unwrap() - truth.k1e()) / truth.k1e()).abs();
    for i in 0..n - 1 {
        let fwd = m[i + 1][i].as_f64().unwrap();
        let bwd = m[i][i + 1].as_f64().unwrap();
        worst = worst.max(((fwd - truth.forward()[i]) / truth.forward()[i]).abs());
        worst = worst.max(((bwd - truth.backward()[i]) / truth.backward()[i]).abs());
    }
    worst
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.json"), path(dir.path(), "b.json"));
    for p in [&a, &b] {
        let out = catenary(&["generate", "--n", "4", "--seed", "7", "--out", p]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = path(dir.path(), "c.json");
    catenary(&["generate", "--n", "4", "--seed", "8", "--out", &c]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn generate_rejects_two_compartments() {
    let out = catenary(&["generate", "--n", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n >= 3"));
}

#[test]
fn generated_model_identifies_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (model, id) = (path(dir.path(), "m.json"), path(dir.path(), "id.json"));
    catenary(&["generate", "--n", "6", "--seed", "3", "--out", &model]);
    let out = catenary(&["identify", "--input", &model, "--out", &id, "--quiet"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let truth = CatenaryModel::from_json(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let id = read_json(&id);
    for key in [
        "matrix",
        "B",
        "k1e",
        "condition_report",
        "max_eq22_residual",
    ] {
        assert!(id.get(key).is_some(), "missing {key}");
    }
    assert!(max_rate_error(&truth, &id) < 1e-8);
}

#[test]
fn full_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| path(dir.path(), n);
    catenary(&[
        "generate",
        "--n",
        "4",
        "--seed",
        "11",
        "--out",
        &p("m.json"),
    ]);
    let sim = catenary(&[
        "simulate",
        "--model",
        &p("m.json"),
        "--include-zero",
        "--out",
        &p("d.csv"),
    ]);
    assert!(sim.status.success());
    let csv = std::fs::read_to_string(p("d.csv")).unwrap();
    assert!(csv.starts_with("t,x1\n0,"));
    assert_eq!(csv.lines().count(), 1 + 16 + 1);

    let fit = catenary(&[
        "fit",
        "--data",
        &p("d.csv"),
        "--order",
        "4",
        "--out",
        &p("f.json"),
        "--quiet",
    ]);
    assert!(
        fit.status.success(),
        "{}",
        String::from_utf8_lossy(&fit.stderr)
    );
    assert_eq!(read_json(&p("f.json"))["converged"], Value::Bool(true));

    let id = catenary(&[
        "identify",
        "--input",
        &p("f.json"),
        "--out",
        &p("id.json"),
        "--quiet",
    ]);
    assert!(id.status.success());
    let truth = CatenaryModel::from_json(&std::fs::read_to_string(p("m.json")).unwrap()).unwrap();
    assert!(max_rate_error(&truth, &read_json(&p("id.json"))) < 1e-4);
}

#[test]
fn simulate_and_fit_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| path(dir.path(), n);
    catenary(&["generate", "--n", "3", "--seed", "5", "--out", &p("m.json")]);
    for name in ["a", "b"] {
        let csv = format!("{name}.csv");
        let json = format!("{name}.json");
        catenary(&[
            "--seed",
            "9",
            "simulate",
            "--model",
            &p("m.json"),
            "--noise",
            "0.01",
            "--include-zero",
            "--out",
            &p(&csv),
        ]);
        catenary(&[
            "--seed",
            "4",
            "fit",
            "--data",
            &p(&csv),
            "--order",
            "3",
            "--out",
            &p(&json),
            "--quiet",
        ]);
    }
    assert_eq!(
        std::fs::read(p("a.csv")).unwrap(),
        std::fs::read(p("b.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(p("a.json")).unwrap(),
        std::fs::read(p("b.json")).unwrap()
    );
}

#[test]
fn fit_rejects_too_few_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| path(dir.path(), n);
    catenary(&["generate", "--n", "4", "--out", &p("m.json")]);
    catenary(&[
        "simulate",
        "--model",
        &p("m.json"),
        "--count",
        "5",
        "--include-zero",
        "--out",
        &p("d.csv"),
    ]);
    let out = catenary(&["fit", "--data", &p("d.csv"), "--order", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_without_dose_or_origin_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| path(dir.path(), n);
    catenary(&["generate", "--n", "3", "--out", &p("m.json")]);
    catenary(&["simulate", "--model", &p("m.json"), "--out", &p("d.csv")]);
    let out = catenary(&["fit", "--data", &p("d.csv"), "--order", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let model = CatenaryModel::from_json(&std::fs::read_to_string(p("m.json")).unwrap()).unwrap();
    let dose = model.dose().to_string();
    let out = catenary(&[
        "fit",
        "--data",
        &p("d.csv"),
        "--order",
        "3",
        "--dose",
        &dose,
        "--quiet",
    ]);
    assert!(out.status.success());
}

#[test]
fn identify_breakdown_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let input = path(dir.path(), "s.json");
    let model: CatenaryModel = random_model(
        5,
        2,
        PositiveRange::new(0.1, 2.0).unwrap(),
        PositiveRange::new(0.5, 2.0).unwrap(),
    )
    .unwrap();
    let mut rows = model.ode_matrix().entries().to_rows();
    rows[2][3] = 0.0;
    let m = OdeMatrix::from_entries(Matrix::from_rows(&rows).unwrap()).unwrap();
    let s = spectral_solve(&m, model.dose()).unwrap();
    std::fs::write(&input, s.to_json().unwrap()).unwrap();
    let out = catenary(&["identify", "--input", &input]);
    assert_eq!(out.status.code(), Some(4));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("breakdown"));
}

#[test]
fn identify_dose_scaling_leaves_rates() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| path(dir.path(), n);
    catenary(&[
        "generate",
        "--n",
        "5",
        "--seed",
        "21",
        "--out",
        &p("m.json"),
    ]);
    catenary(&["identify", "--input", &p("m.json"), "--out", &p("a.json")]);
    catenary(&[
        "identify",
        "--input",
        &p("m.json"),
        "--dose",
        "4.0",
        "--out",
        &p("b.json"),
    ]);
    let (a, b) = (read_json(&p("a.json")), read_json(&p("b.json")));
    assert_eq!(b["a"].as_f64(), Some(4.0));
    let flat = |v: &Value| -> Vec<f64> {
        v["matrix"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()))
            .collect()
    };
    for (x, y) in flat(&a).iter().zip(flat(&b)) {
        assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()), "{x} vs {y}");
    }
    let out = catenary(&["identify", "--input", &p("m.json"), "--dose", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn roundtrip_exact_spectral_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let report = path(dir.path(), "r.json");
    let out = catenary(&[
        "roundtrip",
        "--n",
        "3..6",
        "--replicates",
        "20",
        "--exact-spectral",
        "--out",
        &report,
        "--quiet",
    ]);
    assert!(out.status.success());
    let r = read_json(&report);
    assert_eq!(r["runs"].as_array().unwrap().len(), 20);
    assert!(r["max_relative_error"].as_f64().unwrap() < 1e-8);
}

#[test]
fn roundtrip_with_fitting_meets_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let report = path(dir.path(), "r.json");
    let out = catenary(&[
        "roundtrip",
        "--n",
        "3..6",
        "--replicates",
        "20",
        "--out",
        &report,
        "--quiet",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = read_json(&report);
    assert!(r["max_relative_error"].as_f64().unwrap() < 1e-4);
    let seeds: Vec<u64> = r["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, (0..20).collect::<Vec<_>>());
}

#[test]
fn roundtrip_with_noise_flags_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let report = path(dir.path(), "r.json");
    let out = catenary(&[
        "roundtrip",
        "--n",
        "3..4",
        "--replicates",
        "6",
        "--noise",
        "0.01",
        "--out",
        &report,
    ]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stderr);
    assert!(table.contains("max_rel_err"));
    let r = read_json(&report);
    assert!(r["flagged_runs"].as_u64().unwrap() > 0);
}

#[test]
fn roundtrip_reports_tolerance_failures() {
    let out = catenary(&[
        "roundtrip",
        "--n",
        "3",
        "--replicates",
        "2",
        "--exact-spectral",
        "--tolerance",
        "1e-30",
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
