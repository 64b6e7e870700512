use celmseg_core::autodiff::{check_gradients, Graph};
use celmseg_core::encoder::{build_encoder, ArchSpec, InputShape};
use celmseg_core::init::InitScheme;
use celmseg_core::ops::{Activation, Pooling};
use celmseg_core::params::ParamStore;
use celmseg_core::rng::rng_from_seed;
use celmseg_core::unet::build_unet;
use celmseg_core::Tensor;
use rand::Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn spec(n_cells: usize, activation: Activation, pooling: Pooling) -> ArchSpec {
    ArchSpec { pooling, d0: 2, n_cells, activation, init: InitScheme::Normal, fc_neurons: 6, run_index: 0 }
}

#[test]
fn encoder_with_dense_head_matches_finite_differences() {
    for (act, pool) in [(Activation::Elu, Pooling::Mean), (Activation::Tanh, Pooling::Max), (Activation::Sigmoid, Pooling::Mean)] {
        let mut enc = build_encoder(&spec(2, act, pool), InputShape::gray(8), 3).unwrap().with_regression_head(4);
        // tame the normal(0, 1) kernels so activations stay in their informative range
        let ids: Vec<_> = enc.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let v = enc.params.value(id).scale(0.3);
            *enc.params.value_mut(id) = v;
        }
        let x = random(&[3, 8, 8, 1], 7, 1.0);
        let t = random(&[3, 2], 8, 0.5);
        let loss = |p: &ParamStore, g: &mut Graph| {
            let mut e = enc.clone();
            e.params = p.clone();
            let xi = g.input(x.clone());
            let y = e.forward_regression(g, xi, None)?;
            g.mse(y, &t)
        };
        let r = check_gradients(&enc.params, loss, 50, 1e-5, 11).unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}: {:?}", act, r);
    }
}

#[test]
fn two_stage_unet_matches_finite_differences() {
    let enc = build_encoder(&spec(3, Activation::Elu, Pooling::Max), InputShape::gray(8), 5).unwrap();
    let unet = build_unet(&enc, &[4, 3], Activation::Elu, 6).unwrap();
    let x = random(&[2, 8, 8, 1], 9, 1.0);
    let mut rng = rng_from_seed(10);
    let targets: Vec<u8> = (0..2 * 64).map(|_| rng.random_range(0..2u8)).collect();
    let loss = |p: &ParamStore, g: &mut Graph| {
        let mut u = unet.clone();
        u.params = p.clone();
        let xi = g.input(x.clone());
        let y = u.forward(g, xi, None)?;
        g.wscce_with_denominator(y, &targets, &[0.3, 0.7], targets.len() as f64)
    };
    let r = check_gradients(&unet.params, loss, 50, 1e-5, 12).unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r);
}

#[test]
fn every_decoder_tensor_receives_gradient() {
    let enc = build_encoder(&spec(3, Activation::Elu, Pooling::Max), InputShape::gray(8), 5).unwrap();
    let unet = build_unet(&enc, &[4, 3], Activation::Elu, 6).unwrap();
    let mut g = Graph::new();
    let x = g.input(random(&[2, 8, 8, 1], 9, 1.0));
    let y = unet.forward(&mut g, x, None).unwrap();
    let targets = vec![1u8; 128];
    let l = g.wscce_with_denominator(y, &targets, &[0.5, 0.5], 128.0).unwrap();
    let grads = g.backward(l).unwrap();
    for (id, p) in unet.params.iter() {
        if p.frozen {
            assert!(!grads.contains_key(&id), "{} is frozen but got a gradient", p.name);
        } else {
            let gr = &grads[&id];
            assert!(gr.data().iter().any(|&v| v != 0.0), "{} has an all-zero gradient", p.name);
        }
    }
}

#[test]
fn dilated_conv_and_dense_primitives() {
    let mut store = ParamStore::new();
    let k = store.add("k", random(&[3, 3, 2, 3], 1, 0.5), false);
    let b = store.add("b", random(&[3], 2, 0.5), false);
    let w = store.add("w", random(&[5 * 5 * 3, 4], 3, 0.2), false);
    let x = random(&[2, 5, 5, 2], 4, 1.0);
    let t = random(&[2, 4], 5, 1.0);
    for rate in 1..=3 {
        let loss = |p: &ParamStore, g: &mut Graph| {
            let xi = g.input(x.clone());
            let kk = g.param(p, k);
            let bb = g.param(p, b);
            let c = g.conv2d(xi, kk, Some(bb), rate)?;
            let a = g.activation(c, Activation::Tanh);
            let f = g.flatten(a)?;
            let ww = g.param(p, w);
            let d = g.dense(f, ww, None)?;
            g.mse(d, &t)
        };
        let r = check_gradients(&store, loss, 40, 1e-5, rate as u64).unwrap();
        assert!(r.max_rel_error < 1e-5, "rate {}: {:?}", rate, r);
    }
}
