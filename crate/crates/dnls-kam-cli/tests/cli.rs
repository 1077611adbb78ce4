use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dnls-kam"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).arg("--out").arg(out).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stderr)))
}

const SMALL: &str = r#"
schema_version = 1
[sites]
j = [-1, 2]
[truncation]
j_max = 2
[grid]
lo = [0.01, 0.01]
hi = [0.02, 0.02]
counts = [2, 2]
"#;

#[test]
fn admissible_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["admissible"], &configs().join("desk.toml"), d.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&o)["admissible"], true);

    let o = run(&["admissible"], &configs().join("counterexample.toml"), d.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o)["reason"], "divisibility");
    assert!(d.path().join("admissible.json").exists());

    let one = write(d.path(), "one.toml", &SMALL.replace("j = [-1, 2]", "j = [2]"));
    let o = run(&["admissible"], &one, d.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n = 1"));
}

#[test]
fn config_errors_are_reported() {
    let d = tempfile::tempdir().unwrap();
    let bad_quintic = SMALL.to_string() + "[model]\nquintic = [{ m = 0, a = 2, b = 1, re = 1.0 }]\n";
    let p = write(d.path(), "q.toml", &bad_quintic);
    let o = run(&["normal-form"], &p, d.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.quintic[0]"));

    let p = write(d.path(), "u.toml", &SMALL.replace("[grid]", "[grid]\nspacing = 1"));
    assert_eq!(run(&["admissible"], &p, d.path()).status.code(), Some(3));

    let o = bin().arg("admissible").output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn assumptions_with_bypass_show_the_zero_divisor() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["assumptions"], &configs().join("counterexample.toml"), d.path());
    let v = json(&o);
    assert_eq!(v["admissible"], false);
    assert_eq!(v["audit"]["m3_estimate"].as_f64(), Some(0.0));
    let w = &v["audit"]["witnesses"][0];
    assert_eq!(w["assumption"], "C");
    assert_eq!(w["value"].as_f64(), Some(0.0));

    // without the bypass the command refuses
    let text = fs::read_to_string(configs().join("counterexample.toml")).unwrap();
    let p = write(d.path(), "c.toml", &text.replace("allow_inadmissible = true", ""));
    assert_eq!(run(&["assumptions"], &p, d.path()).status.code(), Some(3));

    let p = write(d.path(), "k.toml", &(SMALL.to_string() + "[enumeration]\nk_max = 0\n"));
    let o = run(&["assumptions"], &p, d.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty range"));
}

#[test]
fn normal_form_without_q1_is_the_identity() {
    let d = tempfile::tempdir().unwrap();
    // modes ±1 only: every quartic term is normal
    let p = write(d.path(), "s.toml", &SMALL.replace("j = [-1, 2]", "j = [-1, 1]").replace("j_max = 2", "j_max = 1"));
    let o = run(&["normal-form"], &p, d.path());
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o);
    assert_eq!(v["identity"], true);
    assert_eq!(v["delta1_residual"].as_f64(), Some(0.0));
    let q1 = v["pieces"].as_array().unwrap().iter().find(|p| p["name"] == "q1").unwrap();
    assert_eq!(q1["terms"], 0);
    for f in ["lambda", "b", "f4", "h_nf"] {
        assert!(d.path().join("normal_form").join(format!("{f}.txt")).exists());
    }
}

#[test]
fn kam_zero_steps_is_the_trivial_embedding() {
    let d = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("desk.toml")).unwrap();
    let p = write(d.path(), "z.toml", &text.replace("max_steps = 4", "max_steps = 0"));
    let o = run(&["kam", "--workers", "1"], &p, d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["steps"], 0);
    assert_eq!(v["excluded_points"], 0);
    assert_eq!(fs::read(d.path().join("steps.jsonl")).unwrap(), b"");
    let torus: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("torus.json")).unwrap()).unwrap();
    for p in torus.as_array().unwrap() {
        assert_eq!(p["active"], true);
        assert!(p["generators"].as_array().unwrap().is_empty());
    }

    // a required gate that fails stops the run
    let p = write(d.path(), "g.toml", &text.replace("max_steps = 4", "max_steps = 0\nrequire_gate = true").replace("c = 1e-148", "c = 1e100"));
    let o = run(&["kam"], &p, d.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("smallness gate"));
}

#[test]
fn measure_reports_and_rejects_empty_sweeps() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["measure"], &configs().join("counterexample.toml"), d.path());
    let v = json(&o);
    assert_eq!(v["full_exclusion"], true);
    assert_eq!(v["identically_zero"], 1);
    let zones = fs::read_to_string(d.path().join("zones.csv")).unwrap();
    assert!(zones.starts_with("alpha,family,k,l,threshold"));
    assert!(zones.contains("4 -4,-3:-1 3:1") || zones.contains("-4 4,-3:1 3:-1"), "{zones}");

    let o = run(&["measure", "--alpha-sweep", "1e-9,2e-9,4e-9"], &configs().join("counterexample.toml"), d.path());
    assert_eq!(json(&o)["sweep"].as_array().unwrap().len(), 3);

    let p = write(d.path(), "e.toml", SMALL);
    let o = run(&["measure"], &p, d.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep is empty"));
}

#[test]
fn verify_bounds_honours_seed() {
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "v.toml", &(SMALL.to_string() + "[verify]\nsamples = 20\n"));
    let a = run(&["verify-bounds", "--seed", "5"], &p, d.path());
    let b = run(&["verify-bounds", "--seed", "5"], &p, d.path());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json(&a)["seed"], 5);
    assert_eq!(json(&a)["samples_per_lemma"], 20);
}
