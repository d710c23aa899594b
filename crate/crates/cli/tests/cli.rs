use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tofu_cli::config::{Cell, TrainSettings};
use tofu_cli::output::records_from_csv;
use tofu_cli::plots::{encoder_projection, projection_probe_accuracy};
use tofu_core::numerics::{rng_from_seed, Activation, ModelParams};
use tofu_core::source::{learn_unstable_representation, run_source_phase, TripletConfig};
use tofu_core::synthgen::{binary_bundle, Environment, EnvironmentSpec, Role};

fn tofu(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tofu"))
        .args(args)
        .env("TOFU_OUT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn validate_accepts_minimal_and_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "suite = \"binary_pairwise\"\n").unwrap();
    let out = tofu(&["validate", "--config", good.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "suite = \"binary_pairwise\"\nseeds = []\n[grid]\nlearning_rte = [0.1]\n").unwrap();
    let out = tofu(&["validate", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rte"), "{err}");
    assert!(err.contains("seeds must be nonempty"), "{err}");
}

#[test]
fn generated_files_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = tofu(&["gen", "--seed", "3", "--dir", "data", "token_a"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let base = dir.path().join("data/token_a");
    let spec: EnvironmentSpec =
        serde_json::from_str(&std::fs::read_to_string(base.join("test.spec.json")).unwrap()).unwrap();
    let text = std::fs::read_to_string(base.join("test.ndjson")).unwrap();
    let env = Environment::from_ndjson(spec, Role::Test, &text).unwrap();
    assert_eq!(&env, binary_bundle("token_a", 3).unwrap().env(Role::Test).unwrap());
    assert!(dir.path().join("data/manifest.json").exists());
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn small_run_persists_consistent_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        r#"suite = "binary_pairwise"
transfers = [{ sources = ["token_a"], target = "token_b" }]
methods = ["erm", "tofu", "oracle"]
seeds = [0]
n_c = [2, 4]
output_dir = "run"
[grid]
learning_rate = [1e-3, 1e-4]
dropout = [0.1]
weight_decay = [0.0]
[train]
max_steps = 300
[triplet]
max_steps = 300
"#,
    )
    .unwrap();
    let out = tofu(&["run", "--config", cfg.to_str().unwrap(), "--jobs", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    for name in ["results.csv", "results.json", "grid.csv", "config.toml", "controls.csv"] {
        assert!(files.contains_key(name), "{name} missing from manifest");
    }
    for (name, hash) in files {
        let bytes = std::fs::read(run.join(name)).unwrap();
        assert_eq!(hash.as_str().unwrap(), sha_hex(&bytes), "{name}");
    }
    assert!(files.keys().any(|k| k.starts_with("models/tofu__")));
    assert!(files.keys().any(|k| k.starts_with("clusters/tofu__")));
    assert!(files.keys().any(|k| k.starts_with("plots/") && k.ends_with(".svg")));
    assert!(!files.contains_key("timings.csv"));

    let csv = std::fs::read_to_string(run.join("results.csv")).unwrap();
    let selected = records_from_csv(&csv).unwrap();
    assert_eq!(tofu_cli::output::records_to_csv(&selected).unwrap(), csv);
    // erm + oracle + tofu at two cluster counts
    assert_eq!(selected.len(), 4);

    // every selected cell is the validation argmax of its persisted grid
    let grid = records_from_csv(&std::fs::read_to_string(run.join("grid.csv")).unwrap()).unwrap();
    let mut best: BTreeMap<_, (usize, f64)> = BTreeMap::new();
    for r in grid.iter().map(|r| &r.record) {
        if let Some(v) = r.val_criterion {
            let e = best.entry(r.selection_key()).or_insert((r.cell.index, v));
            if v > e.1 || (v == e.1 && r.cell.index < e.0) {
                *e = (r.cell.index, v);
            }
        }
    }
    for r in selected.iter().map(|r| &r.record) {
        assert_eq!(r.cell.index, best[&r.selection_key()].0, "{}", r.file_stem());
    }

    let before = std::fs::read(run.join("plots/nc_ablation.svg")).unwrap();
    std::fs::remove_dir_all(run.join("plots")).unwrap();
    let out = tofu(&["plots", "--dir", run.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(run.join("plots/nc_ablation.svg")).unwrap(), before);
}

#[test]
fn trained_encoder_projection_separates_hidden_values() {
    let cell = Cell {
        index: 0,
        learning_rate: 1e-4,
        dropout: 0.1,
        weight_decay: 0.0,
    };
    let train = TrainSettings::default().for_cell(&cell);
    let b = binary_bundle("token_a", 0).unwrap();
    let envs: Vec<_> = [Role::Train1, Role::Train2]
        .into_iter()
        .map(|r| (r, b.env(r).unwrap().view()))
        .collect();
    let phase = run_source_phase("token_a", &envs, &train, 1).unwrap();
    let fit = learn_unstable_representation(&[phase.as_task()], &TripletConfig::default(), 2).unwrap();

    let (pts, z, _) = encoder_projection(&fit.f_z, "token_b", 0).unwrap();
    let trained = projection_probe_accuracy(pts.view(), &z, 0).unwrap();
    assert!(trained >= 0.9, "trained probe {trained}");

    let untrained_f_z = ModelParams::new(&[fit.f_z.input_dim(), 64, 16], Activation::Relu, &mut rng_from_seed(7)).unwrap();
    let (pts, z, _) = encoder_projection(&untrained_f_z, "token_b", 0).unwrap();
    let untrained = projection_probe_accuracy(pts.view(), &z, 0).unwrap();
    // the one-hot unstable block is the widest input direction, so even a
    // random map keeps part of it in the top two components (about 0.6-0.9)
    assert!(untrained < trained, "untrained probe {untrained} vs trained {trained}");
}
