use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptlab")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn without_timing(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("elapsed_s");
    v
}

const DATA: &str = r#"[
  {"X": [0.1, 0.6], "Y": [0.3, 0.55], "d": 1, "L": 2},
  {"X": [0.4, 0.9], "Y": [0.45, 0.7], "d": 1, "L": 2},
  {"X": [0.8, 0.2], "Y": [0.65, 0.35], "d": 1, "L": 2},
  {"X": [0.55, 0.35], "Y": [0.5, 0.42], "d": 1, "L": 2}
]"#;

#[test]
fn boltz_check_passes_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let args = ["boltz-check", "--vectors", "60", "--instances", "60", "--separation-suites", "12", "--seed", "4"];
    for out in [&a, &b] {
        let o = run(&[&args[..], &["--out", out.to_str().unwrap()]].concat());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ra, rb) = (read_json(&a), read_json(&b));
    assert_eq!(ra["schema_version"], 1);
    assert_eq!(ra["pass"], true);
    assert!(ra["report"]["tallies"].as_array().unwrap().iter().all(|t| t["failed"] == 0));
    assert_eq!(without_timing(ra), without_timing(rb));
}

#[test]
fn boltz_check_flags_a_gamma_below_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["boltz-check", "--vectors", "0", "--instances", "0", "--separation-suites", "3", "--check-gamma", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(read_json(&out)["report"]["precondition_violations"].as_array().unwrap().len(), 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"vectors": 5, "instances": 7, "separation_suites": 0, "seed": 9}"#).unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["boltz-check", "--config", cfg.to_str().unwrap(), "--instances", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let c = &read_json(&out)["config"];
    assert_eq!((c["vectors"].as_u64(), c["instances"].as_u64(), c["seed"].as_u64()), (Some(5), Some(3), Some(9)));
    fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(code(&run(&["boltz-check", "--config", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["boltz-check", "--config", "/nonexistent/cfg.json"])), 2);
}

#[test]
fn contextual_suite_and_head_file() {
    let dir = tempfile::tempdir().unwrap();
    let (out, head) = (dir.path().join("r.json"), dir.path().join("head.json"));
    let o = run(&["contextual", "--suites", "6", "--out", out.to_str().unwrap(), "--head-out", head.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out);
    assert_eq!(r["report"]["passed"], 6);
    let h = promptlab::attention::ContextualHead::from_json(&fs::read_to_string(&head).unwrap()).unwrap();
    assert!(h.certificate.max_logit <= 8.0 + 1e-9);
}

#[test]
fn contextual_unscaled_profile_notes_sub_precision_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["contextual", "--suites", "4", "--profile", "paper", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out);
    assert_eq!(r["config"]["profile"]["kind"], "paper_faithful");
    assert!(r["report"]["cases"].as_array().unwrap().iter().all(|c| c["gap_status"] == "sub_precision"));
}

#[test]
fn contextual_input_files() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    fs::write(&good, r#"[{"rows":2,"cols":2,"data":[1.0,0.0,0.0,1.5]},{"rows":2,"cols":2,"data":[0.0,-1.2,-1.0,0.0]}]"#).unwrap();
    let out = dir.path().join("r.json");
    assert_eq!(code(&run(&["contextual", "--input", good.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    assert_eq!(read_json(&out)["report"]["pass"], true);

    let dup = dir.path().join("dup.json");
    fs::write(&dup, r#"[{"rows":1,"cols":2,"data":[1.0,1.0]}]"#).unwrap();
    let o = run(&["contextual", "--input", dup.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("repeats token"));
}

#[test]
fn memorize_both_families() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.json");
    fs::write(&data, DATA).unwrap();
    for family in ["a", "b"] {
        let (out, net) = (dir.path().join(format!("r{family}.json")), dir.path().join(format!("n{family}.json")));
        let o = run(&["memorize", "--data", data.to_str().unwrap(), "--family", family, "--out", out.to_str().unwrap(), "--net-out", net.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let r = read_json(&out)["report"].clone();
        assert!(r["max_error"].as_f64().unwrap() <= 1.0);
        assert_eq!(r["delta"], 0.25);
        let lp = r["prompt_len"].as_u64().unwrap();
        assert!(lp >= 32);
        let entries = r["table_entries"].as_u64().unwrap();
        let net = promptlab::transformer_builder::TransformerNet::from_json(&fs::read_to_string(&net).unwrap()).unwrap();
        if family == "a" {
            // one quantizer layer per (row, column, level), one gate per table entry
            assert_eq!(r["pre_layers"].as_u64().unwrap(), (lp + 2) * 4);
            assert_eq!(r["depth"].as_u64().unwrap(), (lp + 2) * 4 + entries);
            assert_eq!(r["width"], 4);
        } else {
            assert_eq!(r["depth"], 2);
            let step = 2 * ((lp + 2) * 4 - 1);
            assert_eq!(r["width"].as_u64().unwrap(), step.max(3 * entries));
        }
        assert_eq!(net.depth() as u64, r["depth"].as_u64().unwrap());
    }
}

#[test]
fn memorize_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"[{"X":[0.1],"Y":[0.3],"d":1,"L":1},{"X":[0.1],"Y":[0.4],"d":1,"L":1}]"#).unwrap();
    assert_eq!(code(&run(&["memorize", "--data", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["memorize"])), 2);
    let data = dir.path().join("data.json");
    fs::write(&data, DATA).unwrap();
    assert_eq!(code(&run(&["memorize", "--data", data.to_str().unwrap(), "--eps", "-1"])), 2);
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn apti_bench_csv_has_every_cell_and_replays() {
    let args = ["apti-bench", "--n", "32,64", "--b", "0.25,0.5", "--d", "4", "--reps", "1", "--seed", "3"];
    let a = run(&args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let rows = csv_rows(&String::from_utf8(a.stdout).unwrap());
    assert_eq!(rows[0].join(","), "n,d,B,method,g,m,wall_time_s,max_err,certified");
    assert_eq!(rows.len(), 1 + 2 * 2 * 2);
    let b = run(&args);
    let again = csv_rows(&String::from_utf8(b.stdout).unwrap());
    let strip = |r: &Vec<Vec<String>>| -> Vec<Vec<String>> {
        r.iter().map(|row| row.iter().enumerate().filter(|(i, _)| *i != 6).map(|(_, c)| c.clone()).collect()).collect()
    };
    assert_eq!(strip(&rows), strip(&again));
}

#[test]
fn apti_bench_exact_only_and_jsonl() {
    let o = run(&["apti-bench", "--n", "32", "--reps", "1", "--exact-only"]);
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&String::from_utf8(o.stdout).unwrap());
    assert!(rows[1..].iter().all(|r| r[3] == "exact" && r[7].is_empty() && r[8] == "true"));

    let dir = tempfile::tempdir().unwrap();
    let (jl, out) = (dir.path().join("r.jsonl"), dir.path().join("s.json"));
    let o = run(&["apti-bench", "--n", "32", "--d", "4", "--reps", "1", "--jsonl", jl.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    let lines: Vec<Value> = fs::read_to_string(&jl).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(read_json(&out)["report"]["uncertified"], 0);
}

#[test]
fn phase_diagram_reports_crossover_context() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    let csv = dir.path().join("r.csv");
    let o = run(&["phase-diagram", "--n", "64", "--d", "4", "--reps", "1", "--csv", csv.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&out);
    assert_eq!(s["command"], "phase-diagram");
    let phase = &s["report"]["phase"][0];
    assert_eq!(phase["rows"].as_array().unwrap().len(), 6);
    assert_eq!(phase["m_nondecreasing"], true);
    assert!((phase["sqrt_log_n"].as_f64().unwrap() - 64f64.ln().sqrt()).abs() < 1e-12);
    assert_eq!(csv_rows(&fs::read_to_string(&csv).unwrap()).len(), 1 + 12);
}
