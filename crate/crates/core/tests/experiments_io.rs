use std::fs;

use mismix_core::experiments::{
    aggregate_and_write, run_sweep, run_to_dir, write_results_csv, Experiment, RunOptions, SweepGrid, SweepSpec,
};

fn clustering_spec() -> SweepSpec {
    SweepSpec::from_toml_str(
        r#"
schema_version = 1
experiment = "clustering-vs-snr"
master_seed = 99
snr_min = 0.1
snr_max = 10.0
snr_points = 5
n_list = [2000]
trials = 3
"#,
    )
    .unwrap()
}

fn phase_spec() -> SweepSpec {
    SweepSpec::from_toml_str(
        r#"
schema_version = 1
experiment = "phase-diagram"
master_seed = 4
snr_min = 0.1
snr_max = 10.0
snr_points = 3
rho_sq_min = 0.5
rho_sq_max = 4.0
rho_sq_points = 3
"#,
    )
    .unwrap()
}

fn csv_bytes(grid: &SweepGrid) -> Vec<u8> {
    let mut buf = Vec::new();
    write_results_csv(grid, &mut buf).unwrap();
    buf
}

#[test]
fn reruns_and_worker_counts_give_identical_csv() {
    for spec in [clustering_spec(), phase_spec()] {
        let one = run_sweep(&spec, &RunOptions { workers: Some(1), ..Default::default() }).unwrap();
        let again = run_sweep(&spec, &RunOptions { workers: Some(1), ..Default::default() }).unwrap();
        let many = run_sweep(&spec, &RunOptions { workers: Some(4), ..Default::default() }).unwrap();
        assert_eq!(csv_bytes(&one), csv_bytes(&again));
        assert_eq!(csv_bytes(&one), csv_bytes(&many));
    }
}

#[test]
fn rows_are_in_grid_order_with_expected_columns() {
    let grid = run_sweep(&phase_spec(), &RunOptions::default()).unwrap();
    let text = String::from_utf8(csv_bytes(&grid)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "snr,rho_sq,metric,value,std_error,n_trials,seed,status");
    let keys: Vec<(f64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    assert!(keys.windows(2).all(|w| w[0] <= w[1]));
    for c in &grid.cells {
        let mse = c.metrics.iter().find(|m| m.name == "mse").unwrap();
        let db = c.metrics.iter().find(|m| m.name == "mse_db").unwrap();
        assert!(mse.value >= 0.0);
        assert_eq!(db.value, 10.0 * mse.value.max(1e-300).log10());
    }
}

#[test]
fn resume_recomputes_only_missing_cells() {
    let spec = clustering_spec();
    let full_dir = tempfile::tempdir().unwrap();
    run_to_dir(&spec, full_dir.path(), &RunOptions::default()).unwrap();
    let reference = fs::read(full_dir.path().join("results.csv")).unwrap();

    let dir = tempfile::tempdir().unwrap();
    run_to_dir(&spec, dir.path(), &RunOptions::default()).unwrap();
    let ckpt = dir.path().join("cells.jsonl");
    let text = fs::read_to_string(&ckpt).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Header, two finished cells, and a torn third line.
    let torn = format!("{}\n{}\n{}\n{}", lines[0], lines[1], lines[2], &lines[3][..lines[3].len() / 2]);
    fs::write(&ckpt, torn).unwrap();
    fs::remove_file(dir.path().join("results.csv")).unwrap();

    run_to_dir(&spec, dir.path(), &RunOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(fs::read(dir.path().join("results.csv")).unwrap(), reference);
    let after = fs::read_to_string(&ckpt).unwrap();
    let cells: Vec<&str> = after.lines().skip(1).collect();
    assert_eq!(cells.len(), 5);
    assert!(cells.iter().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    // The two surviving cells were kept verbatim, not recomputed.
    assert_eq!(&cells[..2], &lines[1..3]);
}

#[test]
fn resume_refuses_checkpoint_of_another_spec() {
    let dir = tempfile::tempdir().unwrap();
    run_to_dir(&clustering_spec(), dir.path(), &RunOptions::default()).unwrap();
    let mut other = clustering_spec();
    other.master_seed += 1;
    let err = run_to_dir(&other, dir.path(), &RunOptions { resume: true, ..Default::default() });
    assert!(err.is_err());
}

#[test]
fn empty_grid_writes_header_and_manifest() {
    let spec = clustering_spec();
    let axes = spec.axes().unwrap();
    let grid = SweepGrid { experiment: Experiment::ClusteringVsSnr, axes, cells: Vec::new() };
    let dir = tempfile::tempdir().unwrap();
    let manifest = aggregate_and_write(&grid, &spec, dir.path(), 0.0, None).unwrap();
    assert_eq!(
        fs::read_to_string(dir.path().join("results.csv")).unwrap(),
        "snr,metric,value,std_error,n_trials,seed,status\n"
    );
    assert_eq!(manifest.cells, 0);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn manifest_replays_the_same_results() {
    let spec = phase_spec();
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = run_to_dir(&spec, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(manifest.spec, spec);
    let replayed = SweepSpec::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(replayed, spec);
    let dir2 = tempfile::tempdir().unwrap();
    run_to_dir(&replayed, dir2.path(), &RunOptions::default()).unwrap();
    assert_eq!(
        fs::read(dir.path().join("results.csv")).unwrap(),
        fs::read(dir2.path().join("results.csv")).unwrap()
    );
    assert!(dir.path().join("theory.csv").exists());
    assert!(dir.path().join("plot.py").exists());
}

#[test]
fn degenerate_axis_is_rejected() {
    let spec = SweepSpec::from_toml_str(
        r#"
schema_version = 1
experiment = "mse-vs-sigma"
master_seed = 2
dim = 4
sigma_sq_min = 1e-3
sigma_sq_max = 1e-3
sigma_sq_points = 2
sigma_sq_scale = "linear"
n_list = [1000, 10000]
trials = 10
"#,
    );
    // min == max is rejected; the sigma axis needs two distinct points.
    assert!(spec.is_err());
}
