use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
schema_version = 1
experiment = "clustering-vs-snr"
master_seed = 21
snr_min = 0.05
snr_max = 20.0
snr_points = 4
n_list = [5000]
trials = 2
"#;

fn mismix(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mismix"));
    cmd.args(args).arg("--quiet").env_remove("MISMIX_WORKERS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn run_ok(dir: &Path, out: &str, extra: &[&str], envs: &[(&str, &str)]) -> Vec<u8> {
    let cfg = dir.join("cfg.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out_dir = dir.join(out);
    let mut args = vec!["clustering-vs-snr", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = mismix(&args, envs);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::read(out_dir.join("results.csv")).unwrap()
}

#[test]
fn output_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_ok(dir.path(), "a", &["--workers", "1"], &[]);
    let b = run_ok(dir.path(), "b", &["--workers", "3"], &[]);
    let c = run_ok(dir.path(), "c", &[], &[("MISMIX_WORKERS", "2")]);
    assert_eq!(a, b);
    assert_eq!(a, c);
    for f in ["results.csv", "manifest.json", "theory.csv"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_ok(dir.path(), "a", &[], &[]);
    let b = run_ok(dir.path(), "b", &["--seed", "22"], &[]);
    let c = run_ok(dir.path(), "c", &["--seed", "21"], &[]);
    assert_ne!(a, b);
    assert_eq!(a, c);
    let manifest = fs::read_to_string(dir.path().join("b/manifest.json")).unwrap();
    assert!(manifest.contains("\"master_seed\": 22"));
}

#[test]
fn resume_and_manifest_replay_reproduce_results() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_ok(dir.path(), "run", &[], &[]);
    let resumed = run_ok(dir.path(), "run", &["--resume"], &[]);
    assert_eq!(first, resumed);

    let manifest = dir.path().join("run/manifest.json");
    let replay = dir.path().join("replay");
    let o = mismix(
        &["clustering-vs-snr", "--config", manifest.to_str().unwrap(), "--out", replay.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(replay.join("results.csv")).unwrap(), first);
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("x");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let wrong = mismix(&["phase-diagram", "--config", cfg, "--out", out], &[]);
    assert!(!wrong.status.success());
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("clustering-vs-snr"));

    let unknown = mismix(&["heat-map", "--config", cfg, "--out", out], &[]);
    assert!(!unknown.status.success());

    let zero = mismix(&["clustering-vs-snr", "--config", cfg, "--out", out, "--workers", "0"], &[]);
    assert!(!zero.status.success());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, CONFIG.replace("schema_version = 1", "schema_version = 9")).unwrap();
    let o = mismix(&["clustering-vs-snr", "--config", bad.to_str().unwrap(), "--out", out], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema_version"));
}

#[test]
fn shipped_recipes_parse() {
    let recipes = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes");
    let mut seen = 0;
    for entry in fs::read_dir(recipes).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = fs::read_to_string(&path).unwrap();
            let spec = mismix_core::SweepSpec::from_toml_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            spec.base_means().unwrap();
            assert!(text.lines().any(|l| l.starts_with("# mismix ")), "{} lacks its invocation line", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
