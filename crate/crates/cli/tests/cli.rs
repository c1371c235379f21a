use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qap_cli::report::{parse_summary, summary_json, SUMMARY_FILE};
use qap_cli::run::config_hash;
use qap_cli::{run_config, RunConfig};
use tempfile::TempDir;

fn qap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qap"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_file(scenario: &str, config: &Path, out: &Path) -> Output {
    qap(&[
        scenario,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

const FREE_STATIONARY: &str = r#"{
  "params": { "mass": 1.0, "hbar": 1.0, "dimension": 1 },
  "grid": { "duration": 1.0, "slices": 16 },
  "scenario": { "stationary": { "x0": [0.0], "x_t": [1.0] } }
}"#;

const HARMONIC_CAUSTIC: &str = r#"{
  "params": { "mass": 1.0, "hbar": 1.0, "dimension": 1 },
  "grid": { "duration": 1.0, "slices": 16 },
  "steps": 256,
  "scenario": {
    "classical-limit": {
      "system": { "harmonic": { "omega": 3.141592653589793 } },
      "hbar_list": [1.0, 0.5],
      "x0": 0.0,
      "x_t": 1.0
    }
  }
}"#;

const COHERENT_RESIDUALS: &str = r#"{
  "params": { "mass": 1.0, "hbar": 1.0, "dimension": 1 },
  "potential": [{ "start": 0.0, "field": { "c2": [1.0] } }],
  "grid": { "duration": 1.0, "slices": 8 },
  "steps": 1024,
  "scenario": {
    "correspondence": {
      "initial": { "rho": { "c1": [1.0], "c2": [-1.0] } },
      "n_list": [8, 16, 32],
      "samples": 30,
      "lo": -2.0,
      "hi": 2.0
    }
  },
  "seed": 42
}"#;

const HARMONIC_SWEEP: &str = r#"{
  "params": { "mass": 1.0, "hbar": 1.0, "dimension": 1 },
  "grid": { "duration": 1.0, "slices": 16 },
  "steps": 512,
  "scenario": {
    "classical-limit": {
      "system": { "harmonic": { "omega": 1.0 } },
      "hbar_list": [1.0, 0.5, 0.25],
      "x0": 0.0,
      "x_t": 1.0
    }
  }
}"#;

#[test]
fn free_stationary_gives_one_half() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", FREE_STATIONARY);
    let out = run_file("stationary", &cfg, &tmp.path().join("out"));
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary =
        parse_summary(&fs::read_to_string(tmp.path().join("out").join(SUMMARY_FILE)).unwrap())
            .unwrap();
    assert_eq!(summary.scenario, "stationary");
    assert!((summary.headline["lambda0"] - 0.5).abs() < 1e-9);
    assert_eq!(summary.counters["converged"], 1);
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let tmp = TempDir::new().unwrap();
    let text = FREE_STATIONARY.replace(r#""hbar": 1.0,"#, r#""hbar": 1.0, "hbar_tilde": 0.1,"#);
    let cfg = write_config(tmp.path(), "c.json", &text);
    let out = run_file("stationary", &cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hbar_tilde"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_nested_key_is_rejected() {
    let text = FREE_STATIONARY.replace(r#""x_t": [1.0]"#, r#""x_t": [1.0], "guesses": 3"#);
    let err = RunConfig::from_json(&text).unwrap_err();
    assert!(err.to_string().contains("guesses"));
}

#[test]
fn scenario_must_match_the_command() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", FREE_STATIONARY);
    let out = run_file("probe", &cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stationary"));
}

#[test]
fn invalid_values_exit_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &FREE_STATIONARY.replace(r#""mass": 1.0"#, r#""mass": -1.0"#),
    );
    assert_eq!(
        run_file("stationary", &cfg, &tmp.path().join("out"))
            .status
            .code(),
        Some(2)
    );
    let mut no_seed: serde_json::Value = serde_json::from_str(COHERENT_RESIDUALS).unwrap();
    no_seed.as_object_mut().unwrap().remove("seed");
    let cfg = write_config(tmp.path(), "d.json", &no_seed.to_string());
    let out = run_file("correspondence", &cfg, &tmp.path().join("out"));
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn caustic_reference_exits_three_with_a_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", HARMONIC_CAUSTIC);
    let out = run_file("classical-limit", &cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(3));
    let summary =
        parse_summary(&fs::read_to_string(tmp.path().join("out").join(SUMMARY_FILE)).unwrap())
            .unwrap();
    assert_eq!(summary.exit_code, 3);
    assert!(
        summary.warnings.iter().any(|w| w.contains("caustic")),
        "{:?}",
        summary.warnings
    );
}

#[test]
fn seeded_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", COHERENT_RESIDUALS);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run_file("correspondence", &cfg, &a).status.code(), Some(0));
    let threads = qap(&[
        "correspondence",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(threads.status.code(), Some(0));
    for file in [SUMMARY_FILE, "residuals.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let other_seed = tmp.path().join("c");
    qap(&[
        "correspondence",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        other_seed.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_ne!(
        fs::read(a.join("residuals.csv")).unwrap(),
        fs::read(other_seed.join("residuals.csv")).unwrap()
    );
}

#[test]
fn artifacts_carry_checksums() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", COHERENT_RESIDUALS);
    let out = tmp.path().join("out");
    run_file("correspondence", &cfg, &out);
    let summary = parse_summary(&fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.artifacts.len(), 1);
    for a in &summary.artifacts {
        let bytes = fs::read(out.join(&a.file)).unwrap();
        assert_eq!(qap_cli::report::sha256_hex(&bytes), a.sha256);
    }
    let csv = fs::read_to_string(out.join("residuals.csv")).unwrap();
    assert!(csv.starts_with("N,max_residual,mean_residual\n"));
    assert!(!csv.contains('\r'));
}

#[test]
fn sweep_csv_header() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", HARMONIC_SWEEP);
    let out = tmp.path().join("out");
    assert_eq!(
        run_file("classical-limit", &cfg, &out).status.code(),
        Some(0)
    );
    let csv = fs::read_to_string(out.join("classical_limit.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("hbar,lambda0,I_cl,rel_error,grad_norm,converged")
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn summary_round_trip() {
    let tmp = TempDir::new().unwrap();
    let mut config = RunConfig::from_json(HARMONIC_SWEEP).unwrap();
    config.output_dir = Some(tmp.path().to_path_buf());
    let outcome = run_config(&config).unwrap();
    let text = fs::read_to_string(&outcome.summary_path).unwrap();
    let parsed = parse_summary(&text).unwrap();
    assert_eq!(parsed, outcome.summary);
    assert_eq!(summary_json(&parsed), text);
}

#[test]
fn config_hash_tracks_semantic_fields_only() {
    let base = RunConfig::from_json(FREE_STATIONARY).unwrap();
    let mut moved = base.clone();
    moved.output_dir = Some("elsewhere".into());
    assert_eq!(config_hash(&base), config_hash(&moved));
    let reformatted = RunConfig::from_json(&FREE_STATIONARY.replace('\n', " ")).unwrap();
    assert_eq!(config_hash(&base), config_hash(&reformatted));
    let defaults_spelled_out = FREE_STATIONARY.replace(r#""grid""#, r#""steps": 4096, "grid""#);
    assert_eq!(
        config_hash(&base),
        config_hash(&RunConfig::from_json(&defaults_spelled_out).unwrap())
    );
    let mut changed = base.clone();
    changed.params.hbar = 0.5;
    assert_ne!(config_hash(&base), config_hash(&changed));
    let mut seeded = base;
    seeded.seed = Some(1);
    assert_ne!(config_hash(&seeded), config_hash(&moved));
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config = RunConfig::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
        config
            .validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert_eq!(seen, 7);
}
