use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::Command;

use selfdistill::experiment::cmd_ingest;
use selfdistill::gram::{GramModel, SuperclassMap};

fn write_features(path: &Path, rows: &[(Vec<f64>, i64)]) {
    let mut s = String::new();
    let dim = rows[0].0.len();
    let header: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
    writeln!(s, "{},label", header.join(",")).unwrap();
    for (r, l) in rows {
        let cells: Vec<String> = r.iter().map(|x| format!("{x:.17e}")).collect();
        writeln!(s, "{},{l}", cells.join(",")).unwrap();
    }
    fs::write(path, s).unwrap();
}

fn embedded_rows(model: &GramModel, label_names: &[i64]) -> Vec<(Vec<f64>, i64)> {
    let fm = model.embed_features().unwrap();
    // Interleave samples so the input is not already sorted by class.
    let mut rows: Vec<(Vec<f64>, i64)> = fm
        .rows()
        .row_iter()
        .zip(fm.labels())
        .map(|(r, &l)| (r.iter().copied().collect(), label_names[l]))
        .collect();
    rows.sort_by_key(|(r, _)| (r.iter().map(|x| (x * 1e6) as i64).sum::<i64>()).rem_euclid(97));
    rows
}

#[test]
fn recovers_case_iii_correlations() {
    let tmp = tempfile::tempdir().unwrap();
    let model = GramModel::case_iii(4, 25, 0.4, 0.1);
    let features = tmp.path().join("features.csv");
    write_features(&features, &embedded_rows(&model, &[30, 10, 40, 20]));
    let (report, written) = cmd_ingest(&features, None, tmp.path()).unwrap();
    assert_eq!(written, vec![tmp.path().join("ingest.json")]);
    assert_eq!(report.samples, 100);
    assert!((report.samples_per_class - 25.0).abs() < 1e-12);
    let c = report.fitted.c.unwrap();
    let d = report.fitted.d.unwrap();
    assert!((c - 0.4).abs() < 0.02, "c = {c}");
    assert!((d - 0.1).abs() < 0.02, "d = {d}");
    assert!(report.fitted.e.is_none());
    let labels: Vec<i64> = report.classes.iter().map(|c| c.label).collect();
    assert_eq!(labels, vec![10, 20, 30, 40]);
    assert!(report.suggested_lambda.iter().all(|s| s.lambda.is_some_and(|l| l > 0.0)));
}

#[test]
fn superclass_file_orders_classes_and_splits_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let model = GramModel::case_v(10, 0.5, 0.2, 0.05, SuperclassMap::from_sizes(&[2, 2]).unwrap());
    let features = tmp.path().join("features.csv");
    // Canonical classes 0,1 (superclass A) and 2,3 (superclass B) under
    // arbitrary label ids.
    write_features(&features, &embedded_rows(&model, &[5, 1, 7, 3]));
    let supers = tmp.path().join("superclasses.csv");
    fs::write(&supers, "class,superclass\n1,9\n3,4\n5,9\n7,4\n").unwrap();
    let (report, _) = cmd_ingest(&features, Some(&supers), tmp.path()).unwrap();
    assert_eq!(report.superclasses, 2);
    let order: Vec<(i64, i64)> = report.classes.iter().map(|c| (c.superclass, c.label)).collect();
    assert_eq!(order, vec![(4, 3), (4, 7), (9, 1), (9, 5)]);
    assert!((report.fitted.c.unwrap() - 0.5).abs() < 1e-9);
    assert!((report.fitted.d.unwrap() - 0.2).abs() < 1e-9);
    assert!((report.fitted.e.unwrap() - 0.05).abs() < 1e-9);
}

#[test]
fn orthonormal_single_samples_have_no_class_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let rows: Vec<(Vec<f64>, i64)> = (0..3)
        .map(|i| ((0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect(), i as i64))
        .collect();
    let features = tmp.path().join("features.csv");
    write_features(&features, &rows);
    let (report, _) = cmd_ingest(&features, None, tmp.path()).unwrap();
    assert!(report.fitted.c.is_none());
    assert_eq!(report.fitted.d, Some(0.0));
    assert!(report.suggested_lambda.iter().all(|s| s.lambda.is_none()));
}

#[test]
fn malformed_rows_report_their_line() {
    let tmp = tempfile::tempdir().unwrap();
    let features = tmp.path().join("features.csv");
    fs::write(&features, "a,b,label\n1,0,0\n0,1,1\n0,x,1\n").unwrap();
    let err = cmd_ingest(&features, None, tmp.path()).unwrap_err().to_string();
    assert!(err.contains('4'), "{err}");

    fs::write(&features, "1,0,0\n0.5,0.5,1\n").unwrap();
    let err = cmd_ingest(&features, None, tmp.path()).unwrap_err().to_string();
    assert!(err.contains("norm"), "{err}");
}

#[test]
fn nearly_unit_rows_are_renormalised() {
    let tmp = tempfile::tempdir().unwrap();
    let features = tmp.path().join("features.csv");
    fs::write(&features, "1.005,0,0\n1,0,0\n0,0.995,1\n0,1,1\n").unwrap();
    let (report, _) = cmd_ingest(&features, None, tmp.path()).unwrap();
    assert_eq!(report.renormalized_rows, 2);
    assert!((report.fitted.c.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn cli_ingest_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let model = GramModel::case_iii(3, 4, 0.3, 0.1);
    let features = tmp.path().join("features.csv");
    write_features(&features, &embedded_rows(&model, &[0, 1, 2]));
    let out = tmp.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_selfdistill"))
        .args(["ingest", "--features", features.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ingest.json")).unwrap()).unwrap();
    assert_eq!(v["samples"], 12);
}
