use celmseg_core::celm::{ridge_objective, solve_ridge, solve_ridge_with, Branch, HiddenMatrix, TargetMatrix};
use celmseg_core::linalg::Matrix;
use celmseg_core::rng::rng_from_seed;
use nalgebra::DMatrix;
use rand::Rng;

fn oracle(h: &Matrix, t: &Matrix, c: f64) -> DMatrix<f64> {
    let hn = DMatrix::from_row_slice(h.rows(), h.cols(), h.data());
    let tn = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let a = DMatrix::<f64>::identity(h.cols(), h.cols()) / c + hn.transpose() * &hn;
    a.lu().solve(&(hn.transpose() * tn)).expect("oracle system is regular")
}

fn max_diff(a: &Matrix, b: &DMatrix<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            m = m.max((a.get(i, j) - b[(i, j)]).abs());
        }
    }
    m
}

#[test]
fn both_branches_agree_with_normal_equations() {
    let mut rng = rng_from_seed(2024);
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let l = rng.random_range(1..=50);
        let c = 10f64.powf(rng.random_range(-3.0..=3.0));
        let h = Matrix::from_fn(n, l, |_, _| rng.random_range(-1.0..1.0));
        let t = Matrix::from_fn(n, 2, |_, _| rng.random_range(-0.5..0.5));
        let (hm, tm) = (HiddenMatrix(h.clone()), TargetMatrix(t.clone()));
        let a = solve_ridge_with(&hm, &tm, c, Branch::Samples).unwrap();
        let b = solve_ridge_with(&hm, &tm, c, Branch::Features).unwrap();
        let o = oracle(&h, &t, c);
        assert!(a.beta.max_abs_diff(&b.beta) < 1e-9, "n={} l={} c={}", n, l, c);
        assert!(max_diff(&a.beta, &o) < 1e-9);
        assert!(max_diff(&b.beta, &o) < 1e-9);
        let auto = solve_ridge(&hm, &tm, c).unwrap();
        assert_eq!(auto.branch, if n <= l { Branch::Samples } else { Branch::Features });
    }
}

#[test]
fn solution_minimizes_the_objective() {
    let mut rng = rng_from_seed(7);
    let h = HiddenMatrix(Matrix::from_fn(20, 8, |_, _| rng.random_range(-1.0..1.0)));
    let t = TargetMatrix(Matrix::from_fn(20, 2, |_, _| rng.random_range(-1.0..1.0)));
    let s = solve_ridge(&h, &t, 2.0).unwrap();
    let best = ridge_objective(&h, &t, &s.beta, 2.0).unwrap();
    for k in 0..16 {
        let mut p = s.beta.clone();
        let (i, j) = (k % 8, k % 2);
        p.set(i, j, p.get(i, j) + 1e-3);
        assert!(ridge_objective(&h, &t, &p, 2.0).unwrap() > best);
    }
}

#[test]
fn invalid_regularization_is_rejected() {
    let h = HiddenMatrix(Matrix::identity(2));
    let t = TargetMatrix(Matrix::identity(2));
    for c in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(solve_ridge(&h, &t, c).is_err());
    }
}
