//! Kernel initializers: uniform(-1, 1), normal(0, 1) and orthogonal.

use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::linalg::{thin_q, Matrix};
use crate::math;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Uniform,
    Normal,
    Orthogonal,
}

impl InitScheme {
    pub const ALL: [InitScheme; 3] = [InitScheme::Uniform, InitScheme::Normal, InitScheme::Orthogonal];

    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Uniform => "uniform",
            InitScheme::Normal => "normal",
            InitScheme::Orthogonal => "orthogonal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelInit {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl KernelInit {
    pub fn new(scheme: InitScheme, seed: u64) -> Self {
        Self { scheme, seed }
    }
}

/// Initialize a kernel of the given shape. The trailing axis is the fan-out;
/// the orthogonal scheme reshapes the tensor to `(prod(shape[..-1]), shape[-1])`
/// and fills it with an orthonormal-column (tall) or orthonormal-row (wide)
/// matrix obtained from the QR factorization of a Gaussian matrix.
pub fn init_kernel(shape: &[usize], init: KernelInit) -> Result<Tensor> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(dim_err!("invalid kernel shape {:?}", shape));
    }
    let n: usize = shape.iter().product();
    let mut rng = rng_from_seed(init.seed);
    let data: Vec<f64> = match init.scheme {
        InitScheme::Uniform => (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        InitScheme::Normal => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        InitScheme::Orthogonal => {
            let cols = *shape.last().unwrap();
            let rows = n / cols;
            let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
            let g = Matrix::from_fn(tall_r, tall_c, |_, _| StandardNormal.sample(&mut rng));
            let q = thin_q(&g)?;
            if rows >= cols { q.into_data() } else { q.transpose().into_data() }
        }
    };
    Tensor::new(shape.to_vec(), data)
}

/// Bias vector for a layer with the given fan-in: uniform in
/// `±1/sqrt(fan_in)` regardless of the kernel scheme.
pub fn init_bias(len: usize, fan_in: usize, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(&[len], |_| rng.random_range(-bound..=bound))
}

/// Glorot-uniform kernel: `±sqrt(6 / (fan_in + fan_out))`, where the fan-out
/// is the trailing axis and the fan-in is the product of the others.
pub fn glorot_uniform(shape: &[usize], seed: u64) -> Result<Tensor> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(dim_err!("invalid kernel shape {:?}", shape));
    }
    let fan_out = *shape.last().unwrap();
    let fan_in: usize = shape.iter().product::<usize>() / fan_out;
    let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let mut rng = rng_from_seed(seed);
    Ok(Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(t: &Tensor, wide: bool) -> Matrix {
        let cols = *t.shape().last().unwrap();
        let m = Matrix::new(t.len() / cols, cols, t.data().to_vec()).unwrap();
        if wide { m.matmul_t(&m).unwrap() } else { m.t_matmul(&m).unwrap() }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        for scheme in InitScheme::ALL {
            let a = init_kernel(&[3, 3, 2, 4], KernelInit::new(scheme, 11)).unwrap();
            let b = init_kernel(&[3, 3, 2, 4], KernelInit::new(scheme, 11)).unwrap();
            assert_eq!(a.data(), b.data());
            let c = init_kernel(&[3, 3, 2, 4], KernelInit::new(scheme, 12)).unwrap();
            assert_ne!(a.data(), c.data());
        }
    }

    #[test]
    fn uniform_stays_in_range() {
        let t = init_kernel(&[3, 3, 16, 32], KernelInit::new(InitScheme::Uniform, 3)).unwrap();
        assert!(t.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn orthogonal_square_tall_and_wide() {
        // 9x9: 3x3 kernel, one input channel, nine outputs
        let sq = init_kernel(&[3, 3, 1, 9], KernelInit::new(InitScheme::Orthogonal, 5)).unwrap();
        assert!(gram(&sq, false).max_abs_diff(&Matrix::identity(9)) < 1e-10);
        let tall = init_kernel(&[3, 3, 4, 8], KernelInit::new(InitScheme::Orthogonal, 5)).unwrap();
        assert!(gram(&tall, false).max_abs_diff(&Matrix::identity(8)) < 1e-10);
        let wide = init_kernel(&[3, 3, 1, 16], KernelInit::new(InitScheme::Orthogonal, 5)).unwrap();
        assert!(gram(&wide, true).max_abs_diff(&Matrix::identity(9)) < 1e-10);
    }
}
