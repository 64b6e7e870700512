use celmseg_core::archsearch::{enumerate_grid, run_sweep, GridConfig, QualityBand};
use celmseg_core::datagen::{generate_single, Mask, SceneConfig};
use celmseg_core::encoder::InputShape;
use celmseg_core::exec::{NoClock, Sequential};
use celmseg_core::init::InitScheme;
use celmseg_core::metrics::{accuracy, miou, summarize};
use celmseg_core::ops::{concat_channels, pool2d, split_channels, upsample_nearest, Activation, Pooling};
use celmseg_core::rng::derive_seed;
use celmseg_core::train::compute_class_weights;
use celmseg_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
}

proptest! {
    #[test]
    fn mean_pool_preserves_the_mean(x in tensor([2, 4, 6, 3])) {
        let (p, _) = pool2d(&x, Pooling::Mean).unwrap();
        prop_assert!((p.sum() * 4.0 - x.sum()).abs() < 1e-9);
    }

    #[test]
    fn max_pool_dominates_mean_pool(x in tensor([1, 4, 4, 2])) {
        let (a, _) = pool2d(&x, Pooling::Max).unwrap();
        let (b, _) = pool2d(&x, Pooling::Mean).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(m, e)| m >= e));
    }

    #[test]
    fn upsample_then_mean_pool_is_identity(x in tensor([1, 3, 2, 2])) {
        let u = upsample_nearest(&x, 2).unwrap();
        let (p, _) = pool2d(&u, Pooling::Mean).unwrap();
        prop_assert!(p.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn concat_split_round_trip(a in tensor([2, 3, 3, 1]), b in tensor([2, 3, 3, 4])) {
        let c = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&c, &[1, 4]).unwrap();
        prop_assert_eq!(&parts[0], &a);
        prop_assert_eq!(&parts[1], &b);
    }

    #[test]
    fn segmentation_metrics_are_bounded(p in prop::collection::vec(0u8..2, 64), t in prop::collection::vec(0u8..2, 64)) {
        let m = miou(&p, &t, 2).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(m, miou(&t, &p, 2).unwrap());
        prop_assert_eq!(miou(&t, &t, 2).unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&accuracy(&p, &t).unwrap()));
    }

    #[test]
    fn class_weights_sum_to_one(labels in prop::collection::vec(0u8..2, 1..200)) {
        let m = Mask::new(labels.len(), 1, labels).unwrap();
        let w = compute_class_weights(&[&m]).unwrap();
        prop_assert!((w.w[0] + w.w[1] - 1.0).abs() < 1e-12);
        prop_assert!(w.w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn summary_matches_recomputation(v in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let s = summarize(&v);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        prop_assert!((s.mean - mean).abs() < 1e-12);
        prop_assert!((s.std - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn seeds_depend_on_every_input(root in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(derive_seed(root, "a", i), derive_seed(root, "a", i));
        prop_assert_ne!(derive_seed(root, "a", i), derive_seed(root, "b", i));
        prop_assert_ne!(derive_seed(root, "a", i), derive_seed(root, "a", i + 1));
    }
}

#[test]
fn small_sweep_reports_every_row_with_bands() {
    let ds = generate_single(&SceneConfig::single_boulder(16, 1), 40).unwrap().samples;
    let grid = GridConfig {
        pooling: Pooling::ALL.to_vec(),
        depth_cells: vec![(4, vec![3])],
        activations: vec![Activation::Elu, Activation::Relu],
        inits: vec![InitScheme::Orthogonal],
        runs: 2,
        fc_neurons: 16,
    };
    let specs = enumerate_grid(&grid).unwrap();
    let c_grid = [0.1, 1.0, 10.0];
    let report = run_sweep(&specs, InputShape::gray(16), &ds[..30], &ds[30..], &c_grid, 5, &Sequential, &NoClock);
    assert_eq!(report.rows.len(), specs.len() * c_grid.len());
    assert!(report.rows.iter().all(|r| r.is_ok() && r.quality_band.is_some()));
    let excellent = report.rows.iter().filter(|r| r.quality_band == Some(QualityBand::Excellent)).count();
    assert_eq!(excellent, report.rows.len() / 4);
    let best = report.best().unwrap();
    assert_eq!(best.quality_band, Some(QualityBand::Excellent));
    let ranking = report.ranking();
    assert_eq!(ranking.len(), specs.len() / 2);
    assert_eq!(ranking[0].best_error, best.val_error_mean);
    let again = run_sweep(&specs, InputShape::gray(16), &ds[..30], &ds[30..], &c_grid, 5, &Sequential, &NoClock);
    assert_eq!(report, again);
}

#[test]
fn spatially_infeasible_spec_fails_without_aborting() {
    let ds = generate_single(&SceneConfig::single_boulder(16, 1), 10).unwrap().samples;
    let grid = GridConfig {
        pooling: vec![Pooling::Max],
        depth_cells: vec![(4, vec![3, 5])],
        activations: vec![Activation::Elu],
        inits: vec![InitScheme::Uniform],
        runs: 1,
        fc_neurons: 4,
    };
    let specs = enumerate_grid(&grid).unwrap();
    let report = run_sweep(&specs, InputShape::gray(16), &ds[..6], &ds[6..], &[1.0], 0, &Sequential, &NoClock);
    assert_eq!(report.rows.len(), 2);
    let failed: Vec<_> = report.rows.iter().filter(|r| !r.is_ok()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].spec.n_cells, 5);
    assert_eq!(failed[0].quality_band, Some(QualityBand::Low));
}
