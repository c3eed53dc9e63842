use std::path::Path;
use std::process::{Command, Output};

use edgellm::dump::LogitsReport;
use edgellm::events::read_csv;

fn edgellm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgellm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pack_compile_run_report() {
    let d = tempfile::tempdir().unwrap();
    let w = d.path().join("w.elwp");
    let p = d.path().join("p.elpg");
    let l = d.path().join("l.json");
    let e = d.path().join("e.csv");
    let sm = d.path().join("s.json");

    let out = stdout(&edgellm(&["pack", "--config", "toy", "--random-seed", "3", "-o", s(&w)]));
    assert!(out.contains("block total"));
    let out = stdout(&edgellm(&["compile", "--config", "toy", "--weights", s(&w), "-o", s(&p), "--verify-patch", "1..8"]));
    assert!(out.contains("identical to recompile"));
    let out = stdout(&edgellm(&[
        "run", "--program", s(&p), "--weights", s(&w), "--token", "5", "--logits", s(&l), "--events", s(&e),
        "--summary", s(&sm),
    ]));
    assert!(out.contains("validator: logits identical"));

    let rep: LogitsReport = serde_json::from_reader(std::fs::File::open(&l).unwrap()).unwrap();
    assert_eq!(rep.logits.len(), 256);
    assert_eq!(rep.argmax, edgellm::dump::argmax(&rep.bits.iter().map(|&b| edgellm_core::fp16::Fp16Bits(b)).collect::<Vec<_>>()));
    let recs = read_csv(std::fs::File::open(&e).unwrap()).unwrap();
    assert_eq!(recs.iter().filter(|r| r.run == 1).count(), recs.iter().filter(|r| r.run == 0).count());
    assert!(recs.iter().all(|r| r.end_ns >= r.start_ns));
    let summary: serde_json::Value = serde_json::from_reader(std::fs::File::open(&sm).unwrap()).unwrap();
    assert_eq!(summary["verified"], true);

    let out = stdout(&edgellm(&["report", "--events", s(&e)]));
    assert!(out.contains("run 1 (decode at token 5)"));
    let prefill = stdout(&edgellm(&["run", "--program", s(&p), "--weights", s(&w), "--token", "5", "--phase", "prefill"]));
    assert!(prefill.contains("prefill"));
}

#[test]
fn failures_exit_nonzero() {
    let o = edgellm(&["pack", "--config", "/does/not/exist.json"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let d = tempfile::tempdir().unwrap();
    let w = d.path().join("w.elwp");
    let p = d.path().join("p.elpg");
    stdout(&edgellm(&["pack", "--config", "toy", "--strategy", "dense", "-o", s(&w)]));
    let o = edgellm(&["compile", "--config", "toy", "--weights", s(&w)]);
    assert!(!o.status.success(), "weights of another strategy must be rejected");
    stdout(&edgellm(&["compile", "--config", "toy", "--strategy", "dense", "-o", s(&p)]));
    assert!(!edgellm(&["run", "--program", s(&p), "--weights", s(&w), "--token", "65"]).status.success());
    assert!(!edgellm(&["compile", "--config", "toy", "--verify-patch", "1..65"]).status.success());
}

#[test]
fn perf_reports() {
    let out = stdout(&edgellm(&["perf", "--config", "glm6b", "--reference"]));
    assert!(out.contains("51.42 token/s"), "{out}");
    let out = stdout(&edgellm(&["perf", "--config", "glm6b", "--reference", "--memory", "ddr"]));
    assert!(out.contains("14.11 token/s"));
    let json = stdout(&edgellm(&["perf", "--config", "glm6b", "--strategy", "3", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let tps = v["table"]["token_per_s"].as_f64().unwrap();
    assert!((70.0..100.0).contains(&tps));
    let out = stdout(&edgellm(&["perf", "--config", "glm6b", "--sweep-token", "1..1024"]));
    assert!(out.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count() > 10);
}

#[test]
fn arith_sweep_is_deterministic_across_thread_counts() {
    let run = |threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_edgellm"))
            .args(["arith-sweep", "--trials", "3000", "--seed", "5", "--json"])
            .env("EDGELLM_THREADS", threads)
            .output()
            .unwrap();
        stdout(&o)
    };
    let a = run("1");
    assert_eq!(a, run("3"));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 6);
    assert!(!edgellm(&["arith-sweep", "--variant", "nope"]).status.success());
}
