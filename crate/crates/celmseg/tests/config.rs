use std::path::Path;

use celmseg::config::PipelineConfig;
use celmseg::error::AppError;
use celmseg_core::datagen::SplitSpec;

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json");

#[test]
fn shipped_desk_file_matches_the_builtin() {
    let cfg = PipelineConfig::load(Path::new(DESK)).unwrap();
    assert_eq!(cfg, PipelineConfig::desk());
}

#[test]
fn partial_sections_fill_from_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"seed": 5, "multi": {"samples": 50}}"#).unwrap();
    let cfg = PipelineConfig::load(&p).unwrap();
    let desk = PipelineConfig::desk();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.single, desk.single);
    assert_eq!(cfg.multi.samples, 50);
    assert!(cfg.multi.boulder_radius.is_none());
    assert!(matches!(cfg.multi.split, SplitSpec::Fractions { .. }));
    assert_eq!(cfg.unet, desk.unet);
}

#[test]
fn invalid_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    for bad in [
        r#"{"image_size": 64}"#,
        r#"{"sweep": {"c_grid": [0.0]}}"#,
        r#"{"sweep": {"c_grid": []}}"#,
        r#"{"unet": {"decoder_depths": []}}"#,
        r#"{"encoder": {"training": {"learning_rate": -1, "batch_size": 8, "epochs": 1}}}"#,
        r#"{"single": {"samples": 10, "split": {"kind": "counts", "train": 8, "val": 1, "test1": 1, "test2": 1}}}"#,
    ] {
        std::fs::write(&p, bad).unwrap();
        match PipelineConfig::load(&p) {
            Err(e @ AppError::Usage(_)) => assert_eq!(e.exit_code(), 1),
            other => panic!("{} should be rejected, got {:?}", bad, other.map(|_| ())),
        }
    }
    assert!(matches!(PipelineConfig::load(&dir.path().join("absent.json")), Err(AppError::Usage(_))));
}

#[test]
fn stage_seeds_are_distinct() {
    let cfg = PipelineConfig::desk();
    let names = ["datagen.single", "datagen.multi", "split.single", "split.multi", "sweep", "head", "step2", "unet", "step3", "step4"];
    let mut seeds: Vec<u64> = names.iter().map(|n| cfg.stage_seed(n)).collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), names.len());
}
