use std::fs;

use celmseg::error::AppError;
use celmseg::exec::RayonRunner;
use celmseg::report;
use celmseg::sweep::{read_journal, run_resumable, SweepProgress};
use celmseg_core::archsearch::{enumerate_grid, GridConfig};
use celmseg_core::datagen::{generate_single, postprocess, NoiseConfig, Sample, SceneConfig};
use celmseg_core::encoder::{ArchSpec, InputShape};
use celmseg_core::exec::NoClock;
use celmseg_core::init::InitScheme;
use celmseg_core::ops::{Activation, Pooling};

fn samples(n: usize) -> Vec<Sample> {
    let raw = generate_single(&SceneConfig::single_boulder(20, 9), n).unwrap();
    raw.samples.iter().enumerate().map(|(i, s)| postprocess(s, 16, &NoiseConfig::default(), i as u64).unwrap()).collect()
}

fn grid() -> Vec<ArchSpec> {
    enumerate_grid(&GridConfig {
        pooling: vec![Pooling::Max, Pooling::Mean],
        depth_cells: vec![(2, vec![2])],
        activations: vec![Activation::Elu],
        inits: vec![InitScheme::Orthogonal, InitScheme::Uniform],
        runs: 1,
        fc_neurons: 8,
    })
    .unwrap()
}

const C_GRID: [f64; 3] = [0.1, 1.0, 10.0];

#[test]
fn torn_journal_resumes_to_the_same_report() {
    let data = samples(40);
    let (train, val) = data.split_at(30);
    let grid = grid();
    assert_eq!(grid.len(), 4);
    let runner = RayonRunner::new(2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("sweep.jsonl");
    let run = || run_resumable(&grid, InputShape::gray(16), train, val, &C_GRID, 5, &runner, &NoClock, &journal).unwrap();

    let (full, p) = run();
    assert_eq!(p, SweepProgress { resumed: 0, trained: 4 });
    assert_eq!(full.rows.len(), grid.len() * C_GRID.len());

    // keep two entries plus half of a third, as if killed mid-write
    let text = fs::read_to_string(&journal).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let torn = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
    fs::write(&journal, torn).unwrap();

    let (resumed, p) = run();
    assert_eq!(p, SweepProgress { resumed: 2, trained: 2 });
    assert_eq!(resumed.rows, full.rows);
    assert_eq!(fs::read_to_string(&journal).unwrap().lines().count(), 4);

    // nothing left to do
    let (again, p) = run();
    assert_eq!(p, SweepProgress { resumed: 4, trained: 0 });
    assert_eq!(again.rows, full.rows);
    assert_eq!(read_journal(&journal).unwrap().rows, full.rows);

    let plot = dir.path().join("plot.csv");
    report::export_parallel_plot(&read_journal(&journal).unwrap(), &plot).unwrap();
    assert_eq!(fs::read_to_string(&plot).unwrap().lines().count(), 1 + grid.len() * C_GRID.len());
}

#[test]
fn damage_before_the_last_line_is_an_error() {
    let data = samples(30);
    let (train, val) = data.split_at(20);
    let grid = grid();
    let runner = RayonRunner::new(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("sweep.jsonl");
    run_resumable(&grid[..2], InputShape::gray(16), train, val, &C_GRID, 5, &runner, &NoClock, &journal).unwrap();
    let text = fs::read_to_string(&journal).unwrap();
    fs::write(&journal, format!("{{broken\n{}", text)).unwrap();
    match run_resumable(&grid, InputShape::gray(16), train, val, &C_GRID, 5, &runner, &NoClock, &journal) {
        Err(AppError::Parse { line, .. }) => assert_eq!(line, 1),
        Err(e) => panic!("expected a parse error, got {}", e),
        Ok(_) => panic!("expected a parse error"),
    }
}

#[test]
fn journal_from_another_grid_is_refused() {
    let data = samples(30);
    let (train, val) = data.split_at(20);
    let grid = grid();
    let runner = RayonRunner::new(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("sweep.jsonl");
    run_resumable(&grid, InputShape::gray(16), train, val, &C_GRID, 5, &runner, &NoClock, &journal).unwrap();
    let mut other = grid.clone();
    other.reverse();
    let err = run_resumable(&other, InputShape::gray(16), train, val, &C_GRID, 5, &runner, &NoClock, &journal).err().unwrap();
    assert!(matches!(err, AppError::Format { .. }), "{}", err);
}
