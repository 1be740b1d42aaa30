use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mimodab"))
}

fn write_config(dir: &Path, value: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn small_rate_cdf() -> serde_json::Value {
    serde_json::json!({
        "experiment": "rate_cdf",
        "antennas": 8,
        "users": 2,
        "scenario": {"rho_tot_dbm": 43},
        "sweep": [-15, 25],
        "optimizer": {"n_inits": 3, "iterations": 5},
        "n_realizations": 4,
        "master_seed": 5
    })
}

#[test]
fn gradcheck_passes() {
    let out = bin().args(["gradcheck", "--b", "8", "--u", "2", "--seed", "3"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let value: f64 = stdout.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value < 1e-4);
}

#[test]
fn outputs_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), small_rate_cdf());
    for threads in ["1", "3"] {
        let out = bin()
            .arg("rate-cdf")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join(threads))
            .args(["--threads", threads])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["results.csv", "aggregates.csv", "cdf.csv"] {
        let a = fs::read(tmp.path().join("1").join(name)).unwrap();
        let b = fs::read(tmp.path().join("3").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
    // The manifests differ only in the output directory.
    let manifest = |dir: &str| {
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(tmp.path().join(dir).join("manifest.json")).unwrap()).unwrap();
        v["config"].as_object_mut().unwrap().remove("output");
        v
    };
    assert_eq!(manifest("1"), manifest("3"));
    let results = fs::read_to_string(tmp.path().join("1/results.csv")).unwrap();
    assert!(results.starts_with("realization,precoder,metric,param,value,status\n"));
    // 4 realizations x 3 precoders x 2 SNR points.
    assert_eq!(results.lines().count(), 1 + 24);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), small_rate_cdf());
    let run = |seed: &str, dir: &str| {
        let out = bin()
            .arg("rate-cdf")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join(dir))
            .args(["--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success());
        fs::read_to_string(tmp.path().join(dir).join("results.csv")).unwrap()
    };
    assert_ne!(run("1", "a"), run("2", "b"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("b/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 2);
    assert_eq!(manifest["config"]["antennas"], 8);
}

#[test]
fn mismatched_experiment_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), small_rate_cdf());
    let out = bin().arg("pattern").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rate_cdf"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value = small_rate_cdf();
    value["n_realisations"] = serde_json::json!(3);
    let cfg = write_config(tmp.path(), value);
    let out = bin().arg("rate-cdf").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pattern_writes_plot_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        serde_json::json!({
            "experiment": "pattern",
            "antennas": 10,
            "users": 1,
            "pa": {"kind": "table_one"},
            "scenario": {"rho_tot_dbm": 43},
            "channel": {"model": "line_of_sight", "angles_deg": [100]}
        }),
    );
    let out = bin()
        .arg("pattern")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("p"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = fs::read_to_string(tmp.path().join("p/pattern_zero_dist.csv")).unwrap();
    assert!(csv.starts_with("angle_deg,rho_lin_dbm,rho_dist_dbm\n"));
    assert_eq!(csv.lines().count(), 1 + 360);
}
