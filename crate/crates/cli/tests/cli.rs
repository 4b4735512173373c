use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anchorsense"));
    c.env_remove("ANCHORSENSE_SEED");
    c
}

fn scene(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenes").join(format!("{name}.json"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn association_examples_exit_zero() {
    for n in ["1", "2"] {
        let out = bin().args(["example", n]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
        assert!(stdout(&out).contains("PASS"));
    }
}

#[test]
fn unknown_example_is_usage_error() {
    let out = bin().args(["example", "7"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_arguments_are_usage_errors() {
    assert_eq!(bin().arg("montecarlo").output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
}

#[test]
fn associate_reports_ghosts_of_symmetric_scene() {
    let out = bin().arg("associate").arg("--scene").arg(scene("example1")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("feasible solutions: 2"));
    assert_eq!(text.matches("ghost at").count(), 2);

    let pruned = bin()
        .arg("associate")
        .arg("--scene")
        .arg(scene("example2"))
        .arg("--pruned")
        .output()
        .unwrap();
    assert_eq!(pruned.status.code(), Some(0));
    assert!(stdout(&pruned).contains("feasible solutions: 1"));
}

#[test]
fn missing_scene_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("associate")
        .arg("--scene")
        .arg(dir.path().join("absent.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_scene_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"radio\": ").unwrap();
    let out = bin().arg("associate").arg("--scene").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn montecarlo_writes_csv_and_seed_override_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.json");
    std::fs::write(
        &config,
        r#"{"kind": "networked", "seed": 1, "trials": 40, "noise_mode": "fast",
            "bandwidths": [1e8, 4e8], "target_counts": [2]}"#,
    )
    .unwrap();
    let run = |out: &Path, seed: Option<&str>| {
        let mut c = bin();
        c.arg("montecarlo").arg("--config").arg(&config).arg("--out").arg(out);
        if let Some(s) = seed {
            c.env("ANCHORSENSE_SEED", s);
        }
        let o = c.output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out).unwrap()
    };
    let a = run(&dir.path().join("a.csv"), Some("99"));
    let b = run(&dir.path().join("b.csv"), Some("99"));
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "sweep,det_err_prob,ghost_rate,mean_runtime_s");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("bw=100000000;k=2,"));
}

#[test]
fn invalid_seed_variable_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.json");
    std::fs::write(&config, r#"{"kind": "ue_selection", "seed": 1, "trials": 5, "erroneous_counts": [1]}"#).unwrap();
    let out = bin()
        .arg("montecarlo")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("o.csv"))
        .env("ANCHORSENSE_SEED", "-3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.json");
    std::fs::write(&config, r#"{"kind": "networked", "seed": 1, "trials": 5, "bandwidths": [], "target_counts": [2]}"#)
        .unwrap();
    let out = bin()
        .arg("montecarlo")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("o.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ue_select_removes_erroneous_reports() {
    let out = bin()
        .arg("ue-select")
        .arg("--scene")
        .arg(scene("ue_select"))
        .args(["--trials", "20"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("erroneous UEs: [\"ue6\", \"ue7\", \"ue8\"]"));
    assert!(text.contains("erroneous fully removed 1.000"), "{text}");
}

#[test]
fn ris_music_dumps_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("spectrum.csv");
    let out = bin()
        .arg("ris-music")
        .arg("--scene")
        .arg(scene("example4"))
        .arg("--spectrum-out")
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).matches("AOA ").count(), 4);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("angle_deg,normalized_power"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (a, p) = l.split_once(',').unwrap();
            (a.parse().unwrap(), p.parse().unwrap())
        })
        .collect();
    assert!(rows.len() > 1000);
    assert!(rows.iter().all(|(a, p)| (-90.0..=90.0).contains(a) && (0.0..=1.0).contains(p)));
    let peak = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    assert!((peak - 1.0).abs() < 1e-12);
}

#[test]
fn ris_music_without_surface_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("ris-music")
        .arg("--scene")
        .arg(scene("example1"))
        .arg("--spectrum-out")
        .arg(dir.path().join("s.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
