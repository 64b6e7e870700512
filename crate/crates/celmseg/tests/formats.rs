use std::fs;

use celmseg::checkpoint::{self, Checkpoint, ModelKind};
use celmseg::dataset_io::{quantized, read_dataset, read_manifest, write_dataset, MANIFEST};
use celmseg::error::AppError;
use celmseg::eval;
use celmseg::pgm;
use celmseg::report::{self, EvalRow, SUMMARY_MEAN, SUMMARY_STD};
use celmseg_core::datagen::{generate_single, postprocess, Dataset, NoiseConfig, SceneConfig};
use celmseg_core::encoder::{build_encoder, ArchSpec, InputShape};
use celmseg_core::init::InitScheme;
use celmseg_core::metrics::{summarize, EvalRecord};
use celmseg_core::ops::{Activation, Pooling};
use celmseg_core::unet::build_unet;

fn dataset(n: usize, seed: u64) -> Dataset {
    let raw = generate_single(&SceneConfig::single_boulder(20, seed), n).unwrap();
    let samples = raw.samples.iter().enumerate().map(|(i, s)| postprocess(s, 16, &NoiseConfig::default(), i as u64).unwrap()).collect();
    Dataset::new(samples)
}

fn spec() -> ArchSpec {
    ArchSpec { pooling: Pooling::Max, d0: 2, n_cells: 2, activation: Activation::Elu, init: InitScheme::Orthogonal, fc_neurons: 8, run_index: 0 }
}

#[test]
fn pgm_round_trip_and_comments() {
    let data: Vec<u8> = (0..12u8).map(|v| v * 20).collect();
    let bytes = pgm::encode(4, 3, &data);
    assert_eq!(pgm::decode(&bytes).unwrap(), pgm::Pgm { width: 4, height: 3, data: data.clone() });

    let mut commented = b"P5\n# made by hand\n4 3\n255\n".to_vec();
    commented.extend_from_slice(&data);
    assert_eq!(pgm::decode(&commented).unwrap().data, data);

    assert!(pgm::decode(b"P2\n1 1\n255\n0").is_err());
    assert!(pgm::decode(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn dataset_round_trip_is_lossless_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(6, 3);
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, quantized(&ds));
    // masks go through untouched
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.mask_shadowed, b.mask_shadowed);
        assert_eq!(a.cob, b.cob);
    }
    // and a second pass is exact
    let dir2 = tempfile::tempdir().unwrap();
    write_dataset(&back, dir2.path()).unwrap();
    assert_eq!(read_dataset(dir2.path()).unwrap(), back);
}

#[test]
fn hand_built_fixture_reads_back_metadata() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    pgm::write(&dir.path().join("images/a.pgm"), 2, 2, &[0, 51, 102, 255]).unwrap();
    pgm::write(&dir.path().join("masks/a.pgm"), 2, 2, &[0, 0, 255, 0]).unwrap();
    pgm::write(&dir.path().join("images/b.pgm"), 2, 2, &[10, 10, 10, 10]).unwrap();
    pgm::write(&dir.path().join("masks/b.pgm"), 2, 2, &[0, 0, 0, 0]).unwrap();
    let manifest = r#"{
  "schema_version": 1,
  "samples": [
    {"id": "a", "files": {"image": "images/a.pgm", "mask": "masks/a.pgm"}, "cob": {"u": 0.5, "v": 1.5},
     "metadata": {"seed": 7, "phase_angle_deg": 30.0, "boulder_count": 1}},
    {"id": "b", "files": {"image": "images/b.pgm", "mask": "masks/b.pgm"}}
  ]
}"#;
    fs::write(dir.path().join(MANIFEST), manifest).unwrap();
    let ds = read_dataset(dir.path()).unwrap();
    assert_eq!(ds.len(), 2);
    let a = &ds.samples[0];
    assert_eq!(a.image.pixels, vec![0.0, 0.2, 0.4, 1.0]);
    assert_eq!(a.mask_shadowed.labels, vec![0, 0, 1, 0]);
    assert_eq!((a.cob.unwrap().u, a.cob.unwrap().v), (0.5, 1.5));
    assert_eq!((a.meta.seed, a.meta.phase_angle_deg, a.meta.boulder_count), (7, 30.0, 1));
    assert!(ds.samples[1].cob.is_none());
}

#[test]
fn malformed_manifest_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(MANIFEST), "{\n  \"schema_version\": 1,\n  \"samples\": [,]\n}\n").unwrap();
    match read_manifest(dir.path()) {
        Err(AppError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {:?}", other),
    }
    fs::write(dir.path().join(MANIFEST), "{\"schema_version\": 9, \"samples\": []}").unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(AppError::Format { .. })));
}

#[test]
fn missing_sample_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dataset(3, 4), dir.path()).unwrap();
    let victim = dir.path().join(&read_manifest(dir.path()).unwrap().samples[1].files.mask);
    fs::remove_file(&victim).unwrap();
    match read_dataset(dir.path()) {
        Err(AppError::MissingFile(p)) => assert_eq!(p, victim),
        other => panic!("expected a missing-file error, got {:?}", other),
    }
    assert!(matches!(read_dataset(&dir.path().join("nowhere")), Err(AppError::MissingFile(_))));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let enc = build_encoder(&spec(), InputShape::gray(16), 5).unwrap().with_regression_head(6);
    let ck = checkpoint::from_encoder(&enc, serde_json::json!({"note": "x"}));
    let path = dir.path().join("enc.ckpt");
    let sum = ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.checksum(), sum);
    assert_eq!(back.encode(), fs::read(&path).unwrap());
    let enc2 = checkpoint::to_encoder(&back, &path).unwrap();
    for ((_, a), (_, b)) in enc.params.iter().zip(enc2.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.frozen, b.frozen);
        let bits = |t: &celmseg_core::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let probe = dataset(4, 6);
    let refs: Vec<_> = probe.samples.iter().collect();
    let x = celmseg_core::datagen::image_batch(&refs).unwrap();
    let mut g1 = celmseg_core::autodiff::Graph::new();
    let mut g2 = celmseg_core::autodiff::Graph::new();
    let (i1, i2) = (g1.input(x.clone()), g2.input(x));
    let y1 = enc.forward_regression(&mut g1, i1, None).unwrap();
    let y2 = enc2.forward_regression(&mut g2, i2, None).unwrap();
    assert_eq!(g1.value(y1).data(), g2.value(y2).data());
}

#[test]
fn unet_checkpoint_keeps_frozen_flags() {
    let dir = tempfile::tempdir().unwrap();
    let enc = build_encoder(&spec(), InputShape::gray(16), 5).unwrap();
    let unet = build_unet(&enc, &[4], Activation::Elu, 2).unwrap();
    let path = dir.path().join("u.ckpt");
    checkpoint::from_unet(&unet, serde_json::Value::Null).save(&path).unwrap();
    let back = checkpoint::to_unet(&Checkpoint::load(&path).unwrap(), &path).unwrap();
    assert_eq!(back.parameter_count(), unet.parameter_count());
    assert_eq!(back.trainable_parameter_count(), unet.trainable_parameter_count());
    assert_eq!(back.params, unet.params);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let enc = build_encoder(&spec(), InputShape::gray(16), 5).unwrap();
    let path = dir.path().join("enc.ckpt");
    checkpoint::from_encoder(&enc, serde_json::Value::Null).save(&path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&path, &bytes).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{}", err);
    assert_eq!(err.exit_code(), 2);

    fs::write(&path, &bytes[..40]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn wrong_kind_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let enc = build_encoder(&spec(), InputShape::gray(16), 5).unwrap();
    let path = dir.path().join("enc.ckpt");
    let ck = checkpoint::from_encoder(&enc, serde_json::Value::Null);
    assert_eq!(ck.kind, ModelKind::Cnn);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert!(checkpoint::to_unet(&back, &path).is_err());
    assert!(checkpoint::to_celm(&back, &path).is_err());
}

#[test]
fn eval_summary_rows_recompute_from_sample_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = (0..5).map(|i| format!("s{}", i)).collect();
    let recs = vec![
        EvalRecord::new("miou", ids.clone(), vec![0.9, 0.8, 0.75, 1.0, 0.6]),
        EvalRecord::new("accuracy", ids, vec![0.99, 0.98, 0.97, 1.0, 0.95]),
    ];
    let path = dir.path().join("eval.csv");
    report::write_eval(&recs, &path).unwrap();
    let header = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "sample_id,metric,value");
    let rows = report::read_eval(&path).unwrap();
    assert_eq!(rows.len(), 2 * (5 + 2));
    for metric in ["miou", "accuracy"] {
        let of = |f: &dyn Fn(&EvalRow) -> bool| rows.iter().filter(|r| r.metric == metric && f(r)).map(|r| r.value).collect::<Vec<_>>();
        let values = of(&|r| !r.sample_id.starts_with('#'));
        let s = summarize(&values);
        assert_eq!(of(&|r| r.sample_id == SUMMARY_MEAN), vec![s.mean]);
        assert_eq!(of(&|r| r.sample_id == SUMMARY_STD), vec![s.std]);
    }
    // values survive the text round trip exactly
    assert_eq!(rows[1].value, 0.8);
}

#[test]
fn dumping_three_triplets_writes_nine_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(5, 8);
    let preds: Vec<Vec<u8>> = ds.samples.iter().map(|s| s.mask_shadowed.labels.clone()).collect();
    let files = eval::dump_masks(&ds.samples, &preds, 3, &dir.path().join("masks")).unwrap();
    assert_eq!(files.len(), 9);
    assert_eq!(fs::read_dir(dir.path().join("masks")).unwrap().count(), 9);
    for f in &files {
        let p = pgm::read(f).unwrap();
        assert_eq!((p.width, p.height), (16, 16));
    }
}

#[test]
fn empty_sweep_exports_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plot.csv");
    report::export_parallel_plot(&celmseg_core::archsearch::SweepReport::assemble(Vec::new()), &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "P,d0,n,A,K_d,C,run_index,val_error,quality_band\n");
}
