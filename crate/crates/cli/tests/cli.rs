use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "seed": 3,
  "parameters": "truth",
  "synthetic": { "seed": 3, "n_cities": 14, "n_countries": 4, "quarters": 2, "tolerance": 1e9 },
  "fixed_cost": { "profit_draws": 4, "max_points": 20000 },
  "counterfactual": { "profit_draws": 4, "seeds": 2 }
}"#;

fn skyquil(out: &Path, args: &[&str]) -> Output {
    let config = out.join("config.json");
    if !config.exists() {
        fs::create_dir_all(out).unwrap();
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_skyquil"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("SKYQUIL_THREADS", "2")
        .output()
        .unwrap()
}

/// Runs with CSV tables and returns the printed summary.
fn ok(out: &Path, args: &[&str]) -> Value {
    let o = skyquil(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let (first, rest) = stdout.split_once('\n').unwrap();
    assert!(first.contains("wrote"), "{first}");
    serde_json::from_str(rest).unwrap()
}

fn error(o: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {stderr}"))
}

fn pipeline(out: &Path) {
    ok(out, &["generate"]);
    ok(out, &["fixedcost"]);
    ok(out, &["rationalize"]);
    ok(out, &["simulate", "--scenario", "base"]);
    ok(out, &["simulate", "--scenario", "high"]);
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn smoke_pipeline_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());

    let base = ok(a.path(), &["report", "welfare", "--scenario", "base"]);
    assert_eq!(base["cs_change_pct"]["total"], 0.0);
    assert_eq!(base["mean"]["total"]["welfare_gain"], 0.0);
    let runs = fs::read_to_string(a.path().join("simulate/base/runs.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(runs.as_bytes());
    let col = rdr.headers().unwrap().iter().position(|h| h == "changes").unwrap();
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| &r[col] == "0"));

    for sub in ["data", "fixedcost", "rationalize", "simulate/base", "simulate/high"] {
        let (fa, fb) = (csv_files(&a.path().join(sub)), csv_files(&b.path().join(sub)));
        assert!(!fa.is_empty(), "{sub}");
        assert!(fa == fb, "{sub} differs between re-runs");
    }
    let high = ok(a.path(), &["report", "welfare", "--scenario", "high"]);
    assert!(high["identity_max_residual"].as_f64().unwrap() < 1e-9);
    for kind in ["heatmap", "binscatter", "airline-breakdown"] {
        ok(a.path(), &["report", kind]);
    }
    let m = ok(a.path(), &["merge", "--partners", "AL00,AL01", "--seeds", "1", "--ordering", "random"]);
    assert_eq!(m["runs"]["count"], 1);
}

#[test]
fn json_format_writes_json_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = skyquil(dir.path(), &["--format", "json", "generate"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["command"], "generate");
    assert!(dir.path().join("data/moments.json").exists());
    let o = skyquil(dir.path(), &["--format", "json", "merge", "--partners", "AL00,AL02", "--screen-only"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let guppi = dir.path().join("merge/AL00-AL02/base/guppi.json");
    let rows: Vec<Value> = serde_json::from_slice(&fs::read(guppi).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r["diversion"].as_f64().unwrap() >= 0.0));
}

#[test]
fn errors_are_json_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let o = skyquil(dir.path(), &["simulate", "--scenario", "extreme"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error(&o)["error"]["kind"], "usage");

    let o = skyquil(dir.path(), &["estimate"]);
    assert_eq!(o.status.code(), Some(1));
    let e = error(&o);
    assert_eq!(e["error"]["kind"], "domain");
    assert!(e["error"]["message"].as_str().unwrap().contains("skyquil generate"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"counterfactual": {"quarter": 9}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_skyquil"))
        .args(["--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let e = error(&o);
    assert_eq!(e["error"]["exit_code"], 2);
    assert!(e["error"]["message"].as_str().unwrap().contains("counterfactual.quarter"));

    ok(dir.path(), &["generate"]);
    let o = skyquil(dir.path(), &["merge", "--partners", "AL00,ZZ", "--screen-only"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error(&o)["error"]["kind"], "unknown_id");

    let o = skyquil(dir.path(), &["merge", "--partners", "AL00", "--screen-only"]);
    assert_eq!(o.status.code(), Some(2));

    // Products must reference known airports.
    let products = dir.path().join("data/products.csv");
    let text = fs::read_to_string(&products).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == "airport_b").unwrap();
    let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
    cells[col] = "NOWHERE".into();
    lines[1] = cells.join(",");
    fs::write(&products, lines.join("\n") + "\n").unwrap();
    let o = skyquil(dir.path(), &["estimate"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = error(&o)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("products.csv line 2") && msg.contains("NOWHERE"), "{msg}");
}
