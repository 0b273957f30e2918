//! The `linearizer` binary end to end: exit codes, messages and artifacts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use linearizer::distill::train::tiny_config;

fn linearizer(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linearizer"))
        .args(args)
        .env("LINEARIZER_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn tiny_config_file(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, tiny_config().to_toml_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let out = linearizer(&["--help"], tmp.path());
    assert!(out.status.success());
    let help = text(&out.stdout);
    for cmd in ["gradcheck", "distill", "bench", "ablate"] {
        assert!(help.contains(cmd), "{help}");
    }
}

#[test]
fn gradcheck_passes_by_default_and_fails_at_zero_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = linearizer(&["gradcheck", "--seeds", "2"], tmp.path());
    assert_eq!(ok.status.code(), Some(0), "{}", text(&ok.stderr));
    let table = text(&ok.stdout);
    assert!(table.contains("mamba2_scan") && table.contains("distillation_objective"), "{table}");

    let bad = linearizer(&["gradcheck", "--seeds", "1", "--tolerance", "0"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    let err = text(&bad.stderr);
    assert!(err.contains("failed checks:") && err.contains("matmul"), "{err}");
}

#[test]
fn distill_zero_steps_uses_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(tmp.path());
    let out = linearizer(&["distill", "--config", &cfg, "--steps", "0"], tmp.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let dir = tmp.path().join("distill");
    assert_eq!(
        fs::read_to_string(dir.join("metrics.csv")).unwrap(),
        "step,loss,l_act,l_mask,lr,alignment\n"
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "distill");
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["settings"]["config"]["steps"], 0);
    // Every default is materialized.
    assert_eq!(manifest["settings"]["config"]["mask_ratio"], 0.75);
    assert!(dir.join("student.json").is_file());
}

#[test]
fn distill_names_bad_keys_and_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let out = linearizer(&["distill", "--set", "lamda=2", "--set", "mask_ratio=0.5"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("lamda"), "{}", text(&out.stderr));

    let out = linearizer(&["distill", "--data", "/no/such/images"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("/no/such/images"));
}

#[test]
fn bench_rejects_short_sweeps_and_writes_two_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = linearizer(&["bench", "--lengths", "64,128,256"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("at least 4"));
    let out = linearizer(&["bench", "--reps", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("at least 11"));

    let dir = tmp.path().join("b");
    let out = linearizer(
        &["bench", "--d", "4", "--lengths", "8,16,32,64", "--json", "--out", dir.to_str().unwrap()],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let summary = text(&out.stdout);
    assert!(summary.contains("attention exponent") && summary.contains("mamba2 exponent"), "{summary}");
    let points = fs::read_to_string(dir.join("bench_points.csv")).unwrap();
    assert_eq!(points.lines().count(), 1 + 8);
    assert!(points.starts_with("mixer,L,d,median_s,iqr_s,transient_bytes\n"));
    let ratios = fs::read_to_string(dir.join("bench_ratios.csv")).unwrap();
    assert_eq!(ratios.lines().count(), 1 + 4);
    assert_eq!(fs::read_to_string(dir.join("bench_points.jsonl")).unwrap().lines().count(), 8);
}

#[test]
fn ablate_rejects_unknown_axes_and_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let out = linearizer(&["ablate", "--axis", "depth"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("depth"));

    let cfg = tiny_config_file(tmp.path());
    let out = linearizer(&["ablate", "--axis", "components", "--config", &cfg, "--steps", "3", "--seed", "4"], tmp.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("ablate").join("ablation_components.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,cell,seed,initial_alignment,final_alignment,final_loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("components,mask_only,4,"));
    assert!(lines[3].starts_with("components,both,4,"));
}
