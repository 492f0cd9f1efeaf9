use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use stimplan_core::fieldmodel::{import_unit_fields, Backend, FieldSolverSpec};
use stimplan_core::pipeline::{
    compute_unit_fields, generate_phantom, run_case, write_case_bundle, CaseFile, PhantomSpec, RunOptions,
    SweepTable,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stimplan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small() -> PhantomSpec {
    PhantomSpec {
        target_points: 250,
        constraint_points: 250,
        streamline_count: 4,
        streamline_points: 15,
        ..PhantomSpec::default()
    }
}

fn bundle(dir: &Path, spec: &PhantomSpec) -> PathBuf {
    write_case_bundle(&generate_phantom(spec), &dir.join("case")).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn optimize_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let case_path = bundle(tmp.path(), &small());
    let out = tmp.path().join("report.json");
    ok(&["optimize", s(&case_path), "--out", s(&out)]);
    let report = read(&out);
    assert_eq!(report["schema_version"], "1");

    let mut case = CaseFile::load(&case_path).unwrap();
    case.sweep = false;
    let direct = run_case(&case, &RunOptions::default()).unwrap();
    assert_eq!(report["body"], serde_json::to_value(&direct).unwrap());
    assert_eq!(report["body"]["ranked"].as_array().unwrap().len(), 31);

    // Same report on stdout.
    let stdout: Value = serde_json::from_slice(&ok(&["optimize", s(&case_path)]).stdout).unwrap();
    assert_eq!(stdout["body"], report["body"]);
}

#[test]
fn flags_override_the_case() {
    let tmp = tempfile::tempdir().unwrap();
    let case_path = bundle(tmp.path(), &small());
    let out = ok(&[
        "optimize",
        s(&case_path),
        "--gamma",
        "20",
        "--scheme",
        "nonlinear",
        "--no-spill",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let mut case = CaseFile::load(&case_path).unwrap();
    case.sweep = false;
    case.optimization.gamma = 20.0;
    case.optimization.scheme = stimplan_core::optimizer::Scheme::Nonlinear;
    case.optimization.compute_spill = false;
    let direct = run_case(&case, &RunOptions::default()).unwrap();
    assert_eq!(v["body"], serde_json::to_value(&direct).unwrap());
}

#[test]
fn sweep_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let case_path = bundle(tmp.path(), &small());
    let (out, table, counts) = (tmp.path().join("s.json"), tmp.path().join("t.csv"), tmp.path().join("c.csv"));
    ok(&[
        "sweep",
        s(&case_path),
        "--gamma-grid",
        "0,10,30",
        "--out",
        s(&out),
        "--table",
        s(&table),
        "--counts",
        s(&counts),
    ]);
    let mut case = CaseFile::load(&case_path).unwrap();
    case.sweep = true;
    case.optimization.gamma_grid = vec![0.0, 10.0, 30.0];
    let direct = run_case(&case, &RunOptions::default()).unwrap();
    assert_eq!(read(&out)["body"], serde_json::to_value(&direct).unwrap());
    let expected = SweepTable::new(direct.sweep.as_ref().unwrap());

    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[..3], ["gamma", "rank", "configuration"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), expected.rows.len());
    assert_eq!(rows.len(), 3 * 31);
    for (r, e) in rows.iter().zip(&expected.rows) {
        assert_eq!(r[1].parse::<usize>().unwrap(), e.rank);
        assert_eq!(&r[2], e.configuration);
        assert_eq!(r[3].parse::<f64>().unwrap(), e.lambda_opt);
    }
    let counts: Vec<(String, usize)> = csv::Reader::from_path(&counts)
        .unwrap()
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    assert_eq!(counts, expected.contact_counts);
    assert!(counts.iter().map(|c| c.1).sum::<usize>() >= 3);
}

#[test]
fn invalid_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let case_path = bundle(tmp.path(), &small());
    let out = run(&["optimize", s(&case_path), "--gamma", "150"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimization.gamma"));
    assert!(out.stdout.is_empty());

    let out = run(&["optimize", s(&tmp.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::remove_file(tmp.path().join("case/target_core.pts")).unwrap();
    let out = run(&["optimize", s(&case_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target_core"));
}

#[test]
fn solver_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut case = generate_phantom(&small());
    case.field = FieldSolverSpec {
        backend: Backend::FiniteDifference,
        domain_box: 30.0,
        grid_spacing: 1.0,
        max_iterations: 2,
        ..FieldSolverSpec::default()
    };
    let path = write_case_bundle(&case, tmp.path()).unwrap();
    let report = tmp.path().join("r.json");
    let out = run(&["optimize", s(&path), "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("converge"));
    assert!(!report.exists());
}

#[test]
fn phantom_round_trips_into_optimize() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ph");
    ok(&["phantom", "--seed", "4", "--target-points", "250", "--constraint-points", "250", "--dir", s(&dir)]);
    let expected = generate_phantom(&PhantomSpec {
        seed: 4,
        target_points: 250,
        constraint_points: 250,
        ..PhantomSpec::default()
    });
    let loaded = CaseFile::load(&dir.join("case.json")).unwrap();
    assert_eq!(loaded.case_id, expected.case_id);

    let inline = tmp.path().join("inline.json");
    ok(&["phantom", "--seed", "4", "--target-points", "250", "--constraint-points", "250", "--out", s(&inline)]);
    assert_eq!(read(&inline), serde_json::to_value(&expected).unwrap());

    let a: Value = serde_json::from_slice(&ok(&["optimize", s(&dir.join("case.json"))]).stdout).unwrap();
    let b: Value = serde_json::from_slice(&ok(&["optimize", s(&inline)]).stdout).unwrap();
    assert_eq!(a["body"]["ranked"], b["body"]["ranked"]);
    assert_eq!(a["body"]["ranked"][0]["config"]["labels"], json!(["3A"]));

    let out = run(&["phantom", "--target-points", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target_points"));
}

#[test]
fn replay_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let case_path = bundle(tmp.path(), &small());

    let v: Value = serde_json::from_slice(
        &ok(&["replay", s(&case_path), "--contacts", "2A,2B,2C", "--amplitude", "2.5"]).stdout,
    )
    .unwrap();
    let r = &v["replays"][0];
    assert_eq!(r["status"], "evaluated");
    assert_eq!(r["contacts"], json!(["2A", "2B", "2C"]));
    let pt = r["coverage"]["p_act_t"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&pt));

    // A lower amplitude on the same contacts cannot cover more.
    let lower: Value = serde_json::from_slice(
        &ok(&["replay", s(&case_path), "--contacts", "2A,2B,2C", "--amplitude", "1.0"]).stdout,
    )
    .unwrap();
    assert!(lower["replays"][0]["coverage"]["p_act_t"].as_f64().unwrap() <= pt);

    let v: Value = serde_json::from_slice(&ok(&["replay", s(&case_path), "--reference"]).stdout).unwrap();
    let replays = v["replays"].as_array().unwrap();
    // Ten patients, two hemispheres, one hemisphere not implanted.
    assert_eq!(replays.len(), 20);
    assert_eq!(replays.iter().filter(|r| r["status"] == "skipped").count(), 1);
    assert_eq!(replays.iter().filter(|r| r["status"] == "evaluated").count(), 19);

    let out = run(&["replay", s(&case_path)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["replay", s(&case_path), "--contacts", "5Z", "--amplitude", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cohort_summarizes_and_isolates_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_case_bundle(&generate_phantom(&small()), &tmp.path().join("a")).unwrap();
    let b = write_case_bundle(&generate_phantom(&PhantomSpec { seed: 2, ..small() }), &tmp.path().join("b")).unwrap();
    let cohort = tmp.path().join("cohort.json");
    std::fs::write(
        &cohort,
        json!({ "cohort_id": "trial", "cases": ["a/case.json", "b/case.json", "nowhere.json"] }).to_string(),
    )
    .unwrap();
    let out = tmp.path().join("out.json");
    ok(&["cohort", s(&cohort), "--workers", "2", "--out", s(&out)]);
    let v = read(&out);
    let report = &v["cohort"];
    assert_eq!(report["cohort_id"], "trial");
    assert_eq!(report["summary"]["cases"], 3);
    assert_eq!(report["summary"]["failed"], json!([2]));
    assert_eq!(report["cases"][2]["status"], "failed");
    for (i, path) in [a, b].iter().enumerate() {
        let direct = run_case(&CaseFile::load(path).unwrap(), &RunOptions::default()).unwrap();
        assert_eq!(report["cases"][i]["report"], serde_json::to_value(&direct).unwrap());
    }
    let predicted = report["summary"]["predicted"].as_array().unwrap();
    assert!(!predicted.is_empty());
    for c in predicted {
        assert_eq!(c["target"]["n"], 2, "{c}");
    }
}

#[test]
fn fields_export_reimports() {
    let tmp = tempfile::tempdir().unwrap();
    let case_path = bundle(tmp.path(), &small());
    let out = tmp.path().join("fields.bin");
    ok(&["fields", s(&case_path), "--out", s(&out)]);
    let case = CaseFile::load(&case_path).unwrap();
    let direct = compute_unit_fields(&case, &RunOptions::default()).unwrap();
    let imported = import_unit_fields(&out, Some(&direct.header.registry_hash)).unwrap();
    assert_eq!(imported, direct);

    // The imported backend reproduces the analytic ranking.
    let report: Value = serde_json::from_slice(
        &ok(&["optimize", s(&case_path), "--backend", "imported", "--field-path", s(&out), "--no-spill"]).stdout,
    )
    .unwrap();
    let analytic: Value =
        serde_json::from_slice(&ok(&["optimize", s(&case_path), "--no-spill"]).stdout).unwrap();
    let labels = |v: &Value| -> Vec<Value> {
        v["body"]["ranked"].as_array().unwrap().iter().map(|r| r["config"]["labels"].clone()).collect()
    };
    assert_eq!(labels(&report), labels(&analytic));
}

#[test]
fn serve_refuses_remote_bind_without_opt_in() {
    let out = run(&["serve", "--bind", "0.0.0.0:0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("allow_remote"));
}

#[test]
fn serve_answers_on_loopback() {
    use std::io::{Read, Write};
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let bind = format!("127.0.0.1:{port}");
    let mut child = bin().args(["serve", "--bind", &bind]).spawn().unwrap();
    let mut text = String::new();
    for _ in 0..100 {
        if let Ok(mut stream) = std::net::TcpStream::connect(&bind) {
            stream
                .write_all(b"GET /leads HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n")
                .unwrap();
            stream.read_to_string(&mut text).unwrap();
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(text.starts_with("HTTP/1.1 200"), "{text}");
    assert!(text.contains("abbott_infinity_directional"));
}
