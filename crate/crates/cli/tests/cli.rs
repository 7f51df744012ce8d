use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const FAST: &str = "[optimizer]\niters = 40\nrestarts = 2\n";

fn qrp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrp"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_csv(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header = rd.headers().unwrap().clone();
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            header.iter().map(String::from).zip(r.iter().map(String::from)).collect()
        })
        .collect()
}

fn num(row: &std::collections::HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("{key} = {:?}", row[key]))
}

#[test]
fn optimize_is_reproducible_and_tagged() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("D = 2\nseed = 11\n{FAST}"));
    for out in ["a", "b"] {
        let o = qrp(tmp.path(), &["optimize", "--config", &cfg, "--out", out, "--threads", "1"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(tmp.path().join("a/displacements_D2.json")).unwrap();
    let b = fs::read(tmp.path().join("b/displacements_D2.json")).unwrap();
    assert_eq!(a, b);
    let json: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(json["alphas"].as_array().unwrap().len(), 3);
    assert_eq!(json["provenance"]["seed"], 11);
    assert_eq!(json["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    let traj = read_csv(&tmp.path().join("a/kappa_trajectory_D2.csv"));
    assert!(num(&traj[traj.len() - 1], "kappa") <= num(&traj[0], "kappa"));

    let o = qrp(tmp.path(), &["optimize", "--config", &cfg, "--out", "c", "--seed", "12"]);
    assert!(o.status.success());
    assert_ne!(fs::read(tmp.path().join("c/displacements_D2.json")).unwrap(), a);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        ("shots = 100\n", "D"),
        ("D = 2\nshotz = 1\n", "shotz"),
        ("D = 12\n", "D"),
        ("D = 2\ndisplacements = \"missing.json\"\n", "displacements"),
    ];
    for (body, needle) in cases {
        let cfg = write_config(tmp.path(), body);
        let o = qrp(tmp.path(), &["learn", "--config", &cfg, "--out", "x"]);
        assert_eq!(o.status.code(), Some(2), "{body}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{body}: {err}");
    }
    let o = qrp(tmp.path(), &["learn"]);
    assert_eq!(o.status.code(), Some(2));
    let o = qrp(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn noiseless_learning_recovers_the_idealised_map() {
    let tmp = TempDir::new().unwrap();
    let body = format!(
        "D = [2, 3]\nnu = {{ fixed = 0.0 }}\n{FAST}[noise]\ndecoherence = false\nfinite_pulses = false\n\
         readout_error = false\nshot_noise = false\nstate_preparation = false\n"
    );
    let cfg = write_config(tmp.path(), &body);
    let o = qrp(tmp.path(), &["learn", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&tmp.path().join("o/map_mse.csv"));
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(num(r, "mse") < 1e-10);
    }
}

#[test]
fn noisy_learning_trend_and_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("D = [2, 3, 4]\nsimulated_band = true\nbootstrap_resamples = 100\n{FAST}"),
    );
    let o = qrp(tmp.path(), &["learn", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&tmp.path().join("o/map_mse.csv"));
    assert_eq!(rows.len(), 3);
    let mse: Vec<f64> = rows.iter().map(|r| num(r, "mse")).collect();
    assert!(mse.windows(2).all(|w| w[1] > w[0]), "{mse:?}");
    assert!(rows.iter().all(|r| num(r, "stderr") > 0.0));
    let scatter = read_csv(&tmp.path().join("o/beta_scatter_D3.csv"));
    assert_eq!(scatter.len(), 8 * 9);
    for label in ["nominal", "chi+_ho+", "chi-_ho-"] {
        assert!(tmp.path().join(format!("o/beta_S_D4_{label}.json")).exists());
    }
}

const SMALL_KITTEN: &str = "D = 3\nbootstrap_resamples = 100\n[mcmc]\nn_samples = 128\nthinning = 8\n";

#[test]
fn reconstruct_table_shape() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL_KITTEN}{FAST}"));
    let o = qrp(tmp.path(), &["reconstruct", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&tmp.path().join("o/fidelity.csv"));
    assert_eq!(rows.len(), 12);
    for r in &rows {
        let f = num(r, "fidelity");
        assert!((0.0..=1.0 + 1e-12).contains(&f));
        assert!(num(r, "stderr") >= 0.0);
        if r["map"] == "simulated" {
            assert!(num(r, "band_min") <= num(r, "band_max"));
        } else {
            assert!(r["band_min"].is_empty());
        }
    }
    let dump: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("o/density_matrices_D3.json")).unwrap()).unwrap();
    assert_eq!(dump["states"].as_array().unwrap().len(), 4);
    assert_eq!(dump["states"][0]["learnt"]["re"].as_array().unwrap().len(), 3);
}

#[test]
fn observable_errors_sorted_by_amplitude() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL_KITTEN}{FAST}"));
    let o = qrp(tmp.path(), &["observable-errors", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&tmp.path().join("o/observable_errors_D3.csv"));
    assert_eq!(rows.len(), 4 * 8);
    for chunk in rows.chunks(8) {
        assert!(chunk.iter().all(|r| r["state"] == chunk[0]["state"]));
        let abs: Vec<f64> = chunk.iter().map(|r| num(r, "alpha_abs")).collect();
        assert!(abs.windows(2).all(|w| w[0] <= w[1]));
    }
    let summary = read_csv(&tmp.path().join("o/observable_errors_summary.csv"));
    assert_eq!(summary.len(), 4);
    let (si, sl): (f64, f64) = summary.iter().fold((0.0, 0.0), |(a, b), r| {
        (a + num(r, "mean_sq_err_idealised"), b + num(r, "mean_sq_err_learnt"))
    });
    assert!(sl < si);
}

#[test]
fn degenerate_displacements_are_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("flat.json"),
        r#"{"D": 2, "alphas": [[0.5, 0.0], [0.5, 0.0], [0.5, 0.0]]}"#,
    )
    .unwrap();
    let cfg = write_config(
        tmp.path(),
        "D = 2\ndisplacements = \"flat.json\"\nbootstrap_resamples = 100\n[mcmc]\nn_samples = 64\nthinning = 4\n",
    );
    let o = qrp(tmp.path(), &["reconstruct", "--config", &cfg, "--out", "o"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
