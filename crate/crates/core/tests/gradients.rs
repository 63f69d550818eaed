//! Finite-difference checks for every layer over random shapes.

use rand::seq::SliceRandom;
use rand::Rng;
use statenet_core::gradcheck::{
    check_layer, check_model_input, check_softmax_xent, CheckOptions, GradReport, REL_FLOOR_F32,
};
use statenet_core::layers::{Conv2d, Dense, Dropout, Flatten, Layer, LayerOp, MaxPool2d, Relu};
use statenet_core::model::{build, ModelSpec};
use statenet_core::rng::{stream, Domain, StreamRng};
use statenet_core::tensor::{Scalar, Tensor};

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-2;
const SHAPES: u64 = 20;

fn opts(seed: u64) -> CheckOptions {
    CheckOptions {
        eps: EPS,
        seed,
        ..CheckOptions::default()
    }
}

fn rng(case: u64) -> StreamRng {
    stream(case, Domain::Synthetic, &[0x67])
}

fn uniform<T: Scalar>(shape: &[usize], r: &mut StreamRng) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| T::of(r.gen_range(-1.0..1.0))).collect()).unwrap()
}

/// Values at least 0.05 away from zero, so a probe of size EPS never crosses the kink.
fn off_kink(shape: &[usize], r: &mut StreamRng) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let v = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.01 apart, so no pooling window has a near tie.
fn distinct(shape: &[usize], r: &mut StreamRng) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..len).map(|i| i as f64 * 0.01 - 0.5).collect();
    data.shuffle(r);
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn image_shape(r: &mut StreamRng) -> Vec<usize> {
    vec![r.gen_range(1..3), r.gen_range(2..8), r.gen_range(2..8), r.gen_range(1..4)]
}

fn assert_ok(what: &str, case: u64, report: &GradReport) {
    assert!(report.checked > 0);
    assert!(
        report.max_rel_error < TOL,
        "{what} case {case}: max relative error {} at {}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn conv2d() {
    for case in 0..SHAPES {
        let mut r = rng(case);
        let shape = image_shape(&mut r);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let cout = r.gen_range(1..5);
        let mut layer = Layer::<f64>::new("conv", LayerOp::Conv2d(Conv2d::new(k, shape[3], cout).unwrap()));
        layer.init(&mut r);
        let x = uniform(&shape, &mut r);
        assert_ok("conv2d", case, &check_layer(&layer, &x, &opts(case)).unwrap());
    }
}

#[test]
fn dense() {
    for case in 0..SHAPES {
        let mut r = rng(case);
        let (n, i, o) = (r.gen_range(1..5), r.gen_range(1..20), r.gen_range(1..12));
        let mut layer = Layer::<f64>::new("dense", LayerOp::Dense(Dense::new(i, o).unwrap()));
        layer.init(&mut r);
        let x = uniform(&[n, i], &mut r);
        assert_ok("dense", case, &check_layer(&layer, &x, &opts(case)).unwrap());
    }
}

#[test]
fn max_pool() {
    for case in 0..SHAPES {
        let mut r = rng(case);
        let shape = image_shape(&mut r);
        let layer = Layer::<f64>::new("pool", LayerOp::MaxPool2d(MaxPool2d::new()));
        let x = distinct(&shape, &mut r);
        assert_ok("max_pool", case, &check_layer(&layer, &x, &opts(case)).unwrap());
    }
}

#[test]
fn relu() {
    for case in 0..SHAPES {
        let mut r = rng(case);
        let shape = image_shape(&mut r);
        let layer = Layer::<f64>::new("relu", LayerOp::Relu(Relu::new()));
        let x = off_kink(&shape, &mut r);
        assert_ok("relu", case, &check_layer(&layer, &x, &opts(case)).unwrap());
    }
}

#[test]
fn flatten() {
    for case in 0..SHAPES {
        let mut r = rng(case);
        let shape = image_shape(&mut r);
        let layer = Layer::<f64>::new("flatten", LayerOp::Flatten(Flatten::new()));
        let x = uniform(&shape, &mut r);
        assert_ok("flatten", case, &check_layer(&layer, &x, &opts(case)).unwrap());
    }
}

#[test]
fn dropout() {
    for case in 0..SHAPES {
        let mut r = rng(case);
        let shape = image_shape(&mut r);
        let rate = r.gen_range(0.0..0.8) as f32;
        let layer = Layer::<f64>::new("drop", LayerOp::Dropout(Dropout::new(rate).unwrap()));
        let x = uniform(&shape, &mut r);
        assert_ok("dropout", case, &check_layer(&layer, &x, &opts(case)).unwrap());
    }
}

#[test]
fn softmax_cross_entropy() {
    for case in 0..SHAPES {
        let mut r = rng(case);
        let (n, k) = (r.gen_range(1..6), r.gen_range(2..12));
        let logits = uniform::<f64>(&[n, k], &mut r).map(|v| v * 4.0);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        assert_ok("softmax_xent", case, &check_softmax_xent(&logits, &labels, &opts(case)).unwrap());
    }
}

#[test]
fn whole_model_input_gradient() {
    let mut spec = ModelSpec::new(16, 1);
    spec.frozen_blocks.clear();
    let model = build::<f64>(&spec, 5).unwrap();
    let mut r = rng(99);
    let x = uniform::<f64>(&[2, 16, 16, 3], &mut r);
    // a smaller probe keeps the many ReLUs of the full stack on one side of their kinks
    let report = check_model_input(&model, &x, &[3, 8], &CheckOptions { eps: 1e-5, seed: 1, max_coords: 60, ..CheckOptions::default() }).unwrap();
    assert_ok("model", 0, &report);
}

#[test]
fn production_precision_conv_and_dense() {
    let f32_opts = |seed| CheckOptions {
        floor: REL_FLOOR_F32,
        max_coords: 200,
        ..opts(seed)
    };
    for case in 0..SHAPES {
        let mut r = rng(case + 1000);
        let shape = image_shape(&mut r);
        let mut conv = Layer::<f32>::new("conv", LayerOp::Conv2d(Conv2d::new(3, shape[3], 2).unwrap()));
        conv.init(&mut r);
        let x = uniform::<f32>(&shape, &mut r);
        assert_ok("conv2d f32", case, &check_layer(&conv, &x, &f32_opts(case)).unwrap());

        let mut dense = Layer::<f32>::new("dense", LayerOp::Dense(Dense::new(8, 4).unwrap()));
        dense.init(&mut r);
        let x = uniform::<f32>(&[3, 8], &mut r);
        assert_ok("dense f32", case, &check_layer(&dense, &x, &f32_opts(case)).unwrap());
    }
}
