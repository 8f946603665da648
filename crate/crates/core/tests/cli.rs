mod common;

use std::process::Command;

use common::fixture;

fn dvqa(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dvqa"))
        .arg("--config")
        .arg(fixture("engine.toml"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn ask_prints_corrected_count() {
    let script = fixture("recount_script.json");
    let q = "How many damaged buildings are in this image?";
    let out = dvqa(&["--script", script.to_str().unwrap(), "ask", "--image", "recount.png", "--question", q]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().next(), Some("Count(6)"));
    assert!(stdout.contains("6. A house in the lower left"));

    let out = dvqa(&["--script", script.to_str().unwrap(), "--no-selection", "ask", "--image", "recount.png", "--question", q]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().next(), Some("Count(8)"));
}

#[test]
fn eval_writes_report_directory() {
    let out_dir = tempfile::tempdir().unwrap();
    let out = dvqa(&["eval", "--data", fixture("eval10.jsonl").to_str().unwrap(), "--out", out_dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = std::fs::read_dir(out_dir.path()).unwrap().flatten().collect();
    assert_eq!(runs.len(), 1);
    let run = runs[0].path();
    for f in ["report.json", "report.csv", "report.txt", "manifest.json", "verdicts.jsonl", "transcript.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["correct"], 8);
    assert_eq!(report["overall"]["total"], 10);
    let csv = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("Overall"));
}

#[test]
fn ablate_emits_one_report_per_pool_size() {
    let out_dir = tempfile::tempdir().unwrap();
    let out = dvqa(&["ablate", "--preset", "pool-sweep", "--data", fixture("eval20.jsonl").to_str().unwrap(), "--out", out_dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ab = std::fs::read_dir(out_dir.path()).unwrap().flatten().next().unwrap().path();
    let cells = std::fs::read_dir(ab.join("cells")).unwrap().count();
    assert_eq!(cells, 5);
    assert!(ab.join("ablation.json").is_file());
}

#[test]
fn ablate_accepts_a_plan_file() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    std::fs::write(&plan, r#"{"seed": 4, "axes": {"mode": ["icl"], "cot": [true, false], "selection_stage": [true], "pool_limit": [3, "unlimited"]}}"#).unwrap();
    let out = dvqa(&["ablate", "--plan", plan.to_str().unwrap(), "--data", fixture("eval10.jsonl").to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ab = std::fs::read_dir(dir.path().join("o")).unwrap().flatten().next().unwrap().path();
    assert_eq!(std::fs::read_dir(ab.join("cells")).unwrap().count(), 4);
}

#[test]
fn ingest_summarises_the_store() {
    let out = dvqa(&["ingest"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["records"], 74);
    assert_eq!(v["dim"], 8);
    assert_eq!(v["query_images"], 21);
}

#[test]
fn errors_exit_nonzero_with_a_structured_message() {
    let out = dvqa(&["ask", "--image", "q01.png", "--question", "How deep is the water?"]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "registry");

    let out = Command::new(env!("CARGO_BIN_EXE_dvqa")).args(["--config", "/nonexistent.toml", "ingest"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "config");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, [0u8; 7]).unwrap();
    let out = dvqa(&["ingest", "--manifest", fixture("support.json").to_str().unwrap(), "--vectors", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "store");
}
