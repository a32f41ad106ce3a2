use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_phonon-kinetics"));
    c.env_remove("PHONON_KINETICS_OUT").env_remove("PHONON_KINETICS_THREADS");
    c
}

fn run(scenario: &str, config: &Value, dir: &Path) -> (i32, PathBuf, String) {
    let cfg = dir.join(format!("{scenario}.json"));
    std::fs::write(&cfg, serde_json::to_vec(config).unwrap()).unwrap();
    let out = dir.join(format!("{scenario}-out"));
    let o = bin().arg(scenario).arg("--config").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    (o.status.code().unwrap_or(-1), out, String::from_utf8_lossy(&o.stderr).into_owned())
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect()).collect();
    (header, rows)
}

// Gap 10 against a band top near 10.6: no three-phonon process conserves energy.
fn nn_relax() -> Value {
    json!({
        "model": { "kind": "nearest_neighbor", "omega0": 10.0 },
        "n": 6,
        "gamma": 1.0,
        "time": { "t_end": 1.0, "dt": 0.05, "log_every": 4 },
        "relax": { "initial": { "kind": "perturbed", "beta": 1.0, "amplitude": 0.5 } },
        "seed": 9
    })
}

#[test]
fn relax_without_triples_keeps_every_occupation() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, out, err) = run("relax", &nn_relax(), tmp.path());
    assert_eq!(code, 0, "{err}");
    let (header, rows) = read_csv(&out.join("occupations.csv"));
    assert!(header.len() > 1);
    assert!(rows.len() > 2);
    for r in &rows {
        assert_eq!(r[1..], rows[0][1..]);
    }
}

#[test]
fn classical_conductivity_scales_as_inverse_temperature() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "model": { "kind": "next_nearest_paper", "omega0": 1.0 },
        "n": 6,
        "gamma": 1.0,
        "temperatures": [5.0, 10.0]
    });
    let (code, out, err) = run("conductivity", &cfg, tmp.path());
    assert_eq!(code, 0, "{err}");
    let (header, rows) = read_csv(&out.join("conductivity.csv"));
    assert_eq!(header[0], "T");
    assert_eq!(header[1], "kappa11");
    let a = rows[0][0] * rows[0][1];
    let b = rows[1][0] * rows[1][1];
    assert!(((a - b) / a).abs() < 0.01, "{a} {b}");
}

#[test]
fn malformed_configs_exit_2_and_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut neg = nn_relax();
    neg["n"] = json!(-4);
    let mut unknown = nn_relax();
    unknown["colour"] = json!("blue");
    let mut unknown_model = nn_relax();
    unknown_model["model"]["omega1"] = json!(2.0);
    let mut missing = nn_relax();
    missing.as_object_mut().unwrap().remove("time");
    let mut foreign = nn_relax();
    foreign["slab"] = json!({ "walls": [1.0, 2.0], "cells": 4, "length": 1.0 });
    for cfg in [neg, unknown, unknown_model, missing, foreign] {
        let (code, out, _) = run("relax", &cfg, tmp.path());
        assert_eq!(code, 2, "{cfg}");
        assert!(!out.exists());
    }
    let o = bin().arg("relax").arg("--config").arg(tmp.path().join("absent.json")).arg("--out").arg(tmp.path().join("x")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn unreachable_current_modes_refuse_with_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "model": { "kind": "nearest_neighbor", "omega0": 10.0 },
        "n": 6,
        "gamma": 1.0,
        "temperatures": [1.0]
    });
    let (code, out, err) = run("conductivity", &cfg, tmp.path());
    assert_eq!(code, 4, "{err}");
    assert!(!out.exists());
}

#[test]
fn runaway_raw_evolution_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "model": { "kind": "next_nearest_paper", "omega0": 1.0 },
        "n": 6,
        "gamma": 50.0,
        "time": { "t_end": 20.0, "dt": 2.0 },
        "relax": { "scheme": "raw", "initial": { "kind": "perturbed", "beta": 0.2, "amplitude": 0.9 } }
    });
    let (code, out, err) = run("relax", &cfg, tmp.path());
    assert_eq!(code, 3, "{err}");
    assert!(!out.exists());
}

#[test]
fn manifest_lists_every_file_and_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, out, err) = run("relax", &nn_relax(), tmp.path());
    assert_eq!(code, 0, "{err}");
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let listed: Vec<String> =
        manifest["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap().to_string()).collect();
    let mut on_disk: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    for name in &listed {
        if let Some(stem) = name.strip_suffix(".csv") {
            assert!(listed.contains(&format!("{stem}.gp")), "{name} lacks a plot stub");
            let text = std::fs::read_to_string(out.join(name)).unwrap();
            assert!(!text.contains('\r'));
            assert!(text.lines().next().unwrap().chars().next().unwrap().is_alphabetic());
        }
    }
    let first = std::fs::read(out.join("manifest.json")).unwrap();
    let (code, out2, _) = run("relax", &nn_relax(), tmp.path());
    assert_eq!(code, 0);
    assert_eq!(out, out2);
    assert_eq!(std::fs::read(out2.join("manifest.json")).unwrap(), first);
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("r.json");
    std::fs::write(&cfg, serde_json::to_vec(&nn_relax()).unwrap()).unwrap();
    let out = tmp.path().join("o");
    let o = bin().args(["relax", "--seed", "42", "--threads", "1", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], json!(42));
    assert_eq!(manifest["threads"], json!(1));
}

#[test]
fn shipped_example_configs_run() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let tmp = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        let scenario = p.file_stem().unwrap().to_str().unwrap().to_string();
        let out = tmp.path().join(&scenario);
        let o = bin().arg(&scenario).arg("--config").arg(&p).arg("--out").arg(&out).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
        assert!(out.join("summary.json").is_file());
        // the config names its scenario, so a different one is refused
        let other = if scenario == "md" { "relax" } else { "md" };
        let o = bin().arg(other).arg("--config").arg(&p).arg("--out").arg(tmp.path().join("never")).output().unwrap();
        assert_eq!(o.status.code(), Some(2));
        seen += 1;
    }
    assert_eq!(seen, 8);
    assert!(!tmp.path().join("never").exists());
}
