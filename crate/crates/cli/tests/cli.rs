use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bumpdecide")).args(args).output().expect("binary runs")
}

fn smoke() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml").to_str().unwrap().to_string()
}

fn workdir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn default_simulate_writes_322_bins() {
    let d = workdir("cli-default");
    let out = bin(&["simulate", "--seed", "1", "--output", d.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = json(&d.join("spectrum.json"));
    assert_eq!(doc["counts"].as_array().unwrap().len(), 322);
    assert_eq!(doc["meta"]["command"], "simulate");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let d = workdir("cli-badcfg");
    let cfg = d.join("bad.toml");
    std::fs::write(&cfg, "[smc]\nparticles = 10\n").unwrap();
    let out = bin(&["simulate", "--config", cfg.to_str().unwrap(), "--output", d.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_fails_cleanly() {
    let d = workdir("cli-missing");
    let p = d.join("nope.json");
    let out = bin(&["calibrate", "--posterior", p.to_str().unwrap(), "--output", d.join("c.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn domain_error_exit_code() {
    let d = workdir("cli-domain");
    let cfg = d.join("neg.toml");
    std::fs::write(&cfg, "[scenario]\nexpected_background = -5.0\n").unwrap();
    let out = bin(&["simulate", "--config", cfg.to_str().unwrap(), "--output", d.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_on_events_and_trace() {
    let d = workdir("cli-events");
    let cfg = smoke();
    let ds = d.to_str().unwrap();
    assert!(bin(&["simulate", "--config", &cfg, "--seed", "4", "--output", ds]).status.success());
    // expand the binned counts into an event list at bin centres
    let spec = json(&d.join("spectrum.json"));
    let edges: Vec<f64> = spec["edges"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mut text = String::from("# masses\n");
    for (i, c) in spec["counts"].as_array().unwrap().iter().enumerate() {
        for _ in 0..c.as_u64().unwrap() {
            text.push_str(&format!("{}\n", 0.5 * (edges[i] + edges[i + 1])));
        }
    }
    std::fs::write(d.join("events.txt"), text).unwrap();
    let p = |f: &str| d.join(f).to_str().unwrap().to_string();
    let out = bin(&[
        "fit", "--config", &cfg, "--seed", "4", "--events", &p("events.txt"), "--template", &p("template.json"),
        "--output", &p("posterior.json"), "--trace", &p("trace.jsonl"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let post = json(&d.join("posterior.json"));
    assert_eq!(post["counts"], spec["counts"]);
    let lines = std::fs::read_to_string(d.join("trace.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), post["trace"].as_array().unwrap().len());
    for l in lines.lines() {
        let r: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(r["tau"].is_number());
    }
}
