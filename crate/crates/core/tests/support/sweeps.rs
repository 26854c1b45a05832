//! Sweep harness shape and per-cell reproducibility on a tiny budget.

use mda_core::routing::{MdaModel, Stack};
use mda_core::store::{load_bundle, ParameterBundle};
use mda_core::synth::{DEFAULT_GLOBAL_SEED, VS_LIKE, YT_LIKE};
use mda_core::train::{rerun_cell, sweep, sweep_cells, CellManifest, CorpusSpec, SweepAxis, SweepConfig, TrainConfig};
use mda_core::ModelConfig;

fn backbone() -> MdaModel {
    let cfg = ModelConfig::desk();
    let params = cfg.init_backbone();
    MdaModel::new(cfg, YT_LIKE, params).unwrap()
}

fn config(axis: SweepAxis) -> SweepConfig {
    let corpus = |split: &str, count| CorpusSpec {
        split: split.into(),
        domain: VS_LIKE.into(),
        count,
        global_seed: DEFAULT_GLOBAL_SEED,
    };
    SweepConfig {
        axis,
        train: TrainConfig { steps: 2, batch_size: 2, warmup_steps: 1, ..TrainConfig::default() },
        train_corpus: corpus("train", 4),
        test_corpus: corpus("test", 3),
        bottlenecks: vec![8, 16, 32],
        eval_decoder: Stack::NonCausal,
        plan_seed: 21,
        jobs: 2,
    }
}

pub fn cell_counts_per_axis() {
    let cfg = ModelConfig::desk();
    let count = |axis| sweep_cells(axis, &cfg, VS_LIKE, &[8, 16, 32], 0).unwrap().len();
    assert_eq!(count(SweepAxis::PerModule), 8);
    assert_eq!(count(SweepAxis::AdapterGrid), 12);
    assert_eq!(count(SweepAxis::PerBlock), cfg.encoder.causal_blocks + cfg.encoder.noncausal_blocks);
    assert_eq!(count(SweepAxis::Recipe), 3);
    assert_eq!(count(SweepAxis::Decoder), 3);
    assert!(sweep_cells(SweepAxis::AdapterGrid, &cfg, VS_LIKE, &[8, 16], 0).is_err());
}

/// Runs the sweep, writes it out and re-runs every cell from the manifest
/// on disk, comparing bundles byte for byte.
fn sweep_round_trip(axis: SweepAxis, rows: &[&str], columns: &[&str]) {
    let model = backbone();
    let table = sweep(&model, &config(axis)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    table.write(dir.path()).unwrap();

    let text = std::fs::read_to_string(dir.path().join("table.txt")).unwrap();
    let header = text.lines().nth(1).unwrap();
    for c in columns {
        assert!(header.contains(c), "column {c} missing from {header}");
    }
    for r in rows {
        assert!(text.lines().any(|l| l.starts_with(r)), "row {r} missing from\n{text}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("table.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), rows.len() * columns.len());

    for cell in &table.cells {
        assert!(cell.error.is_none(), "{}: {:?}", cell.manifest.cell.name, cell.error);
        let cell_dir = dir.path().join("cells").join(&cell.manifest.cell.name);
        let manifest: CellManifest =
            serde_json::from_str(&std::fs::read_to_string(cell_dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest, cell.manifest);
        let curve = std::fs::read_to_string(cell_dir.join("curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), 1 + manifest.train.steps);
        let recorded = load_bundle(&cell_dir.join("domain.mdab"), model.config()).unwrap();

        let rerun = rerun_cell(&model, &manifest).unwrap();
        let bundle: &ParameterBundle = rerun.bundle.as_ref().unwrap();
        assert_eq!(bundle.to_bytes(), recorded.to_bytes(), "{} is not reproducible", manifest.cell.name);
        assert_eq!(rerun.report, cell.report);
        assert_eq!(rerun.curve, cell.curve);
    }
}

pub fn per_module_table() {
    sweep_round_trip(SweepAxis::PerModule, &["ffn_start", "mhsa", "conv", "ffn_end"], &["NC", "C+NC"]);
}

pub fn adapter_grid_table() {
    let rows =
        ["sequential b=8", "sequential b=16", "sequential b=32", "parallel b=8", "parallel b=16", "parallel b=32"];
    sweep_round_trip(SweepAxis::AdapterGrid, &rows, &["NC", "C+NC"]);
}

pub fn rerun_rejects_a_different_backbone() {
    let model = backbone();
    let table = sweep(&model, &SweepConfig { axis: SweepAxis::Recipe, ..config(SweepAxis::Recipe) }).unwrap();
    let mut cfg = ModelConfig::desk();
    cfg.init_seed += 1;
    let other = MdaModel::new(cfg.clone(), YT_LIKE, cfg.init_backbone()).unwrap();
    let manifest = &table.cells[0].manifest;
    let mut same_config = manifest.clone();
    same_config.model = cfg;
    assert!(rerun_cell(&other, manifest).is_err());
    assert!(rerun_cell(&other, &same_config).is_err());
}
