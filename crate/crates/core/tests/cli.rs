//! End-to-end runs of the `rsoc` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rsoc::harness::RunManifest;

const EXAMPLE_ONE: &str = r#"
[scenario]
source = "builtin:example1"

[grid]
steps = 50

[mc]
paths = 400

[control]
kind = "constant"
value = [1.0]

[outputs]
directory = "out"
"#;

fn rsoc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsoc"))
        .args(args)
        .current_dir(dir)
        .env_remove("RSOC_SEED")
        .env_remove("RSOC_CONFIG")
        .env_remove("RSOC_PATHS")
        .env_remove("RSOC_STEPS")
        .env_remove("RSOC_OUT")
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn stat(csv: &str, t: &str, name: &str, gamma: &str) -> f64 {
    csv.lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[0] == t && f[1] == name && f[3] == gamma)
        .unwrap_or_else(|| panic!("no {name} at t={t}, gamma={gamma}"))[2]
        .parse()
        .unwrap()
}

#[test]
fn missing_seed_is_a_config_error_naming_the_key() {
    let dir = setup(EXAMPLE_ONE);
    let out = rsoc(dir.path(), &["simulate", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mc.seed"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn simulate_quiet_regime_reaches_one() {
    let dir = setup(EXAMPLE_ONE);
    let out = rsoc(dir.path(), &["simulate", "--config", "run.toml", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/stats.csv")).unwrap();
    assert!(csv.starts_with("t,stat,value,gamma,label\n"));
    assert!((stat(&csv, "1", "mean[0]", "2") - 1.0).abs() < 1e-12);
    assert_eq!(stat(&csv, "0", "mean[0]", "1"), 0.0);
}

#[test]
fn zero_control_gives_zero_statistics() {
    let dir = setup(&EXAMPLE_ONE.replace("kind = \"constant\"\nvalue = [1.0]", "kind = \"zero\""));
    let out = rsoc(dir.path(), &["simulate", "--config", "run.toml", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/stats.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("0")));
}

#[test]
fn inadmissible_control_rejected_before_simulation() {
    let dir = setup(&EXAMPLE_ONE.replace("[1.0]", "[2.0]"));
    for cmd in ["simulate", "certify"] {
        let out = rsoc(dir.path(), &[cmd, "--config", "run.toml", "--seed", "1"]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("admissibility"));
        assert!(!dir.path().join("out/stats.csv").exists());
    }
}

#[test]
fn flags_override_the_environment_which_overrides_the_file() {
    let dir = setup(&EXAMPLE_ONE.replace("paths = 400", "paths = 400\nseed = 1"));
    let run = |env_seed: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_rsoc"));
        c.args(["simulate", "--config", "run.toml"]).current_dir(dir.path()).env_remove("RSOC_SEED");
        if let Some(s) = env_seed {
            c.env("RSOC_SEED", s);
        }
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        assert!(c.status().unwrap().success());
        RunManifest::load(&dir.path().join("out/manifest.json")).unwrap().config.mc.seed
    };
    assert_eq!(run(None, None), Some(1));
    assert_eq!(run(Some("2"), None), Some(2));
    assert_eq!(run(Some("2"), Some("3")), Some(3));
}

#[test]
fn certify_reruns_are_byte_identical() {
    let dir = setup(&EXAMPLE_ONE.replace("[1.0]", "[0.0]").replace("paths = 400", "paths = 2000"));
    let run = |out: &str| {
        let o = rsoc(dir.path(), &["certify", "--config", "run.toml", "--seed", "5", "--out", out]);
        assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
        RunManifest::load(&dir.path().join(out).join("manifest.json")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert!(a.outputs.iter().any(|f| f.ends_with(".csv")));
    for f in &a.outputs {
        if f == "config.toml" {
            continue;
        }
        let (x, y) = (fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    // the output directory is part of the configuration, so only the hash differs
    assert_ne!(a.config_hash, b.config_hash);
    assert_eq!((&a.seeds, &a.tolerances, &a.verdicts), (&b.seeds, &b.tolerances, &b.verdicts));
    assert_eq!(a.verdicts.get("certify").map(String::as_str), Some("violated"));

    // the manifest is itself a valid configuration
    let again = rsoc(dir.path(), &["certify", "--config", "a/manifest.json", "--out", "c"]);
    assert_eq!(again.status.code(), Some(1));
    let c = RunManifest::load(&dir.path().join("c/manifest.json")).unwrap();
    assert_eq!(c.seeds, a.seeds);
    let report = |d: &str| fs::read(dir.path().join(d).join("certify.json")).unwrap();
    assert!(report("a") == report("c"));
}

#[test]
fn help_lists_every_subcommand() {
    let out = rsoc(Path::new("."), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["simulate", "adjoint", "robust", "certify", "reproduce", "selftest"] {
        assert!(text.contains(cmd), "{cmd} missing from --help");
    }
    for flag in ["--config", "--seed", "--paths", "--steps", "--threads", "--out"] {
        assert!(text.contains(flag), "{flag} missing from --help");
    }
}

#[test]
fn unknown_config_key_is_rejected_with_its_name() {
    let dir = setup(&EXAMPLE_ONE.replace("steps = 50", "steps = 50\nstepz = 3"));
    let out = rsoc(dir.path(), &["simulate", "--config", "run.toml", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}
