//! Finite-difference check of every layer kind's backward pass, run in `f64`.
//!
//! Each case draws random inputs and parameters from a seed, takes the scalar
//! loss `sum(y * r)` for a random projection `r` (the cross-entropy itself for
//! `softmax_xent`), and compares every analytic gradient with central
//! differences.

use serde::Serialize;

use crate::error::Result;
use crate::nn::functional::{
    batchnorm_backward, batchnorm_forward_train, fc_backward, fc_forward, relu_backward,
    relu_forward, softmax_xent_backward, softmax_xent_forward,
};
use crate::nn::layer::{LayerKind, BATCHNORM_EPSILON};
use crate::ops::{
    conv2d_backward, conv2d_forward, finite_difference_grad, lrn_backward, lrn_forward,
    max_relative_error, maxpool_backward, maxpool_forward, ConvParams, LrnParams, Padding,
};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
pub const DEFAULT_SEEDS: u64 = 10;

pub const KINDS: [LayerKind; 7] = [
    LayerKind::Conv,
    LayerKind::BatchNorm,
    LayerKind::Relu,
    LayerKind::MaxPool,
    LayerKind::Lrn,
    LayerKind::Fc,
    LayerKind::SoftmaxXent,
];

#[derive(Debug, Clone, Serialize)]
pub struct KindResult {
    pub kind: &'static str,
    pub seeds: u64,
    pub max_relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<KindResult>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_case(rng: &mut SeededRng) -> Result<f64> {
    let groups = 1 + rng.below(2) as usize;
    let c = 2 * groups;
    let f = 2 * groups;
    let k = [1, 2, 3][rng.below(3) as usize];
    let stride = 1 + rng.below(2) as usize;
    let padding = [Padding::Same, Padding::Valid, Padding::Explicit(1)][rng.below(3) as usize];
    let params = ConvParams::new(stride, padding).with_groups(groups);
    let x = random(&[5, 6, c], rng);
    let w = random(&[k, k, c / groups, f], rng);
    let b = random(&[f], rng);
    let y = conv2d_forward(&x, &w, &b, &params)?;
    let r = random(y.shape(), rng);
    let (dx, dw, db) = conv2d_backward(&x, &w, &r, &params)?;
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&conv2d_forward(x, w, b, &params).unwrap(), &r)
    };
    let nx = finite_difference_grad(|t| loss(t, &w, &b), &x, STEP);
    let nw = finite_difference_grad(|t| loss(&x, t, &b), &w, STEP);
    let nb = finite_difference_grad(|t| loss(&x, &w, t), &b, STEP);
    Ok(max_relative_error(&dx, &nx)
        .max(max_relative_error(&dw, &nw))
        .max(max_relative_error(&db, &nb)))
}

fn batchnorm_case(rng: &mut SeededRng) -> Result<f64> {
    let x = random(&[3, 2, 2, 3], rng);
    let gamma = Tensor::from_fn(&[3], |_| rng.uniform(0.5, 1.5));
    let beta = random(&[3], rng);
    let (y, cache) = batchnorm_forward_train(&x, &gamma, &beta, BATCHNORM_EPSILON)?;
    let r = random(y.shape(), rng);
    let g = batchnorm_backward(&cache, &gamma, &r)?;
    let loss = |x: &Tensor<f64>, gm: &Tensor<f64>, bt: &Tensor<f64>| {
        dot(
            &batchnorm_forward_train(x, gm, bt, BATCHNORM_EPSILON)
                .unwrap()
                .0,
            &r,
        )
    };
    let nx = finite_difference_grad(|t| loss(t, &gamma, &beta), &x, STEP);
    let ng = finite_difference_grad(|t| loss(&x, t, &beta), &gamma, STEP);
    let nb = finite_difference_grad(|t| loss(&x, &gamma, t), &beta, STEP);
    Ok(max_relative_error(&g.input, &nx)
        .max(max_relative_error(&g.gamma, &ng))
        .max(max_relative_error(&g.beta, &nb)))
}

fn relu_case(rng: &mut SeededRng) -> Result<f64> {
    // keep clear of the kink at zero
    let x = Tensor::from_fn(&[4, 7], |_| {
        let v = rng.uniform(0.05, 1.0);
        if rng.below(2) == 0 {
            v
        } else {
            -v
        }
    });
    let r = random(x.shape(), rng);
    let dx = relu_backward(&x, &r)?;
    let nx = finite_difference_grad(|t| dot(&relu_forward(t), &r), &x, STEP);
    Ok(max_relative_error(&dx, &nx))
}

fn maxpool_case(rng: &mut SeededRng) -> Result<f64> {
    let (h, w, c) = (6, 6, 2);
    // distinct values spaced well beyond the step so no window has a near-tie
    let perm = rng.permutation(h * w * c);
    let x = Tensor::from_vec(&[h, w, c], perm.iter().map(|&p| p as f64 * 0.01).collect())?;
    let (window, stride) = [(2, 2), (3, 2), (3, 1)][rng.below(3) as usize];
    let pooled = maxpool_forward(&x, window, stride)?;
    let r = random(pooled.output.shape(), rng);
    let dx = maxpool_backward(&pooled.argmax, x.shape(), &r)?;
    let nx = finite_difference_grad(
        |t| dot(&maxpool_forward(t, window, stride).unwrap().output, &r),
        &x,
        STEP,
    );
    Ok(max_relative_error(&dx, &nx))
}

fn lrn_case(rng: &mut SeededRng) -> Result<f64> {
    let params = LrnParams {
        k: rng.uniform(1.0, 2.0),
        n: [3, 5][rng.below(2) as usize],
        alpha: rng.uniform(0.05, 0.5),
        beta: 0.75,
    };
    let x = random(&[2, 3, 7], rng);
    let r = random(x.shape(), rng);
    let dx = lrn_backward(&x, &params, &r)?;
    let nx = finite_difference_grad(|t| dot(&lrn_forward(t, &params).unwrap(), &r), &x, STEP);
    Ok(max_relative_error(&dx, &nx))
}

fn fc_case(rng: &mut SeededRng) -> Result<f64> {
    let x = random(&[3, 6], rng);
    let w = random(&[6, 4], rng);
    let b = random(&[4], rng);
    let y = fc_forward(&x, &w, &b)?;
    let r = random(y.shape(), rng);
    let g = fc_backward(&x, &w, &r)?;
    let loss =
        |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&fc_forward(x, w, b).unwrap(), &r);
    let nx = finite_difference_grad(|t| loss(t, &w, &b), &x, STEP);
    let nw = finite_difference_grad(|t| loss(&x, t, &b), &w, STEP);
    let nb = finite_difference_grad(|t| loss(&x, &w, t), &b, STEP);
    Ok(max_relative_error(&g.input, &nx)
        .max(max_relative_error(&g.weights, &nw))
        .max(max_relative_error(&g.bias, &nb)))
}

fn softmax_xent_case(rng: &mut SeededRng) -> Result<f64> {
    let logits = Tensor::from_fn(&[4, 3], |_| rng.uniform(-3.0, 3.0));
    let labels: Vec<usize> = (0..4).map(|_| rng.below(3) as usize).collect();
    let (_, probs) = softmax_xent_forward(&logits, &labels)?;
    let dx = softmax_xent_backward(&probs, &labels)?;
    let nx = finite_difference_grad(
        |t| softmax_xent_forward(t, &labels).unwrap().0,
        &logits,
        STEP,
    );
    Ok(max_relative_error(&dx, &nx))
}

/// Largest relative error for one layer kind and seed.
pub fn check_kind(kind: LayerKind, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::with_stream(seed, 0x6772_6164);
    match kind {
        LayerKind::Conv => conv_case(&mut rng),
        LayerKind::BatchNorm => batchnorm_case(&mut rng),
        LayerKind::Relu => relu_case(&mut rng),
        LayerKind::MaxPool => maxpool_case(&mut rng),
        LayerKind::Lrn => lrn_case(&mut rng),
        LayerKind::Fc => fc_case(&mut rng),
        LayerKind::SoftmaxXent => softmax_xent_case(&mut rng),
        LayerKind::Flatten => Ok(0.0),
    }
}

/// Runs every kind over seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<GradcheckReport> {
    let mut results = Vec::with_capacity(KINDS.len());
    for kind in KINDS {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let e = check_kind(kind, seed)?;
            worst = if e.is_nan() || worst.is_nan() {
                f64::NAN
            } else {
                worst.max(e)
            };
        }
        results.push(KindResult {
            kind: kind.as_str(),
            seeds,
            max_relative_error: worst,
            pass: worst <= TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        results,
    })
}
