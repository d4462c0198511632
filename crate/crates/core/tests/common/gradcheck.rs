//! Central finite-difference gradient checks in f64.
//!
//! Each instance builds a scalar `L = Σ r ⊙ layer(x)` with a random
//! projection `r`, so the analytic input gradient is the layer backward of
//! `r`. The error of an instance is `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂)`
//! for each gradient it produces.

use fseg::hardening::{rectify, rectify_backward};
use fseg::nn::{conv2d_backward, conv2d_forward, cross_entropy_loss, upsample_nearest, upsample_nearest_backward, Conv2d, GradientTape};
use fseg::rng::SimRng;
use fseg::{ActivationKind, ClassMap, Shape, Tensor};

pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Numeric gradient of `f` w.r.t. every entry of `x`.
fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(x);
            x[i] = orig - FD_STEP;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_tensor(rng: &mut SimRng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform(lo, hi))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_conv(rng: &mut SimRng) -> f64 {
    let n = rng.range_inclusive(1, 2);
    let c = rng.range_inclusive(1, 3);
    let oc = rng.range_inclusive(1, 3);
    let h = rng.range_inclusive(3, 7);
    let w = rng.range_inclusive(3, 7);
    let k = [1, 3, 5][rng.below(3) as usize];
    let stride = rng.range_inclusive(1, 2);
    let x = random_tensor(rng, Shape::new(n, c, h, w), -1.0, 1.0);
    let weight = random_tensor(rng, Shape::new(oc, c, k, k), -1.0, 1.0);
    let bias: Vec<f64> = (0..oc).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let conv = Conv2d::from_parts(weight, bias, stride).unwrap();
    let out_shape = conv.output_shape(x.shape());
    let r = random_tensor(rng, out_shape, -1.0, 1.0);

    let mut tape = GradientTape::new(1);
    tape.record(0, x.clone());
    let (gx, gp) = conv2d_backward(&r, &tape, 0, &conv).unwrap();

    let loss = |x: &Tensor<f64>, conv: &Conv2d<f64>| dot(conv2d_forward(x, conv).unwrap().data(), r.data());
    let mut xd = x.data().to_vec();
    let nx = numeric_grad(&mut xd, |v| loss(&Tensor::new(x.shape(), v.to_vec()).unwrap(), &conv));
    let mut wd = conv.weight.data().to_vec();
    let nw = numeric_grad(&mut wd, |v| {
        let cw = Conv2d::from_parts(Tensor::new(conv.weight.shape(), v.to_vec()).unwrap(), conv.bias.clone(), stride).unwrap();
        loss(&x, &cw)
    });
    let mut bd = conv.bias.clone();
    let nb = numeric_grad(&mut bd, |v| {
        let cb = Conv2d::from_parts(conv.weight.clone(), v.to_vec(), stride).unwrap();
        loss(&x, &cb)
    });
    rel_err(gx.data(), &nx)
        .max(rel_err(gp.weight.data(), &nw))
        .max(rel_err(&gp.bias, &nb))
}

pub fn check_upsample(rng: &mut SimRng) -> f64 {
    let shape = Shape::new(rng.range_inclusive(1, 2), rng.range_inclusive(1, 3), rng.range_inclusive(1, 5), rng.range_inclusive(1, 5));
    let factor = rng.range_inclusive(1, 3);
    let x = random_tensor(rng, shape, -1.0, 1.0);
    let out = upsample_nearest(&x, factor).unwrap();
    let r = random_tensor(rng, out.shape(), -1.0, 1.0);
    let g = upsample_nearest_backward(&r, factor).unwrap();
    let mut xd = x.data().to_vec();
    let n = numeric_grad(&mut xd, |v| dot(upsample_nearest(&Tensor::new(shape, v.to_vec()).unwrap(), factor).unwrap().data(), r.data()));
    rel_err(g.data(), &n)
}

/// Inputs are kept at least 0.01 away from the kinks at 0 and 6.
pub fn check_activation(rng: &mut SimRng, kind: ActivationKind) -> f64 {
    let shape = Shape::new(1, rng.range_inclusive(1, 3), rng.range_inclusive(2, 6), rng.range_inclusive(2, 6));
    let x = Tensor::from_fn(shape, |_, _, _, _| loop {
        let v = rng.uniform(-8.0, 8.0);
        if v.abs() > 0.01 && (v - 6.0).abs() > 0.01 {
            break v;
        }
    });
    let r = random_tensor(rng, shape, -1.0, 1.0);
    let g = rectify_backward(&r, &x, kind).unwrap();
    let mut xd = x.data().to_vec();
    let n = numeric_grad(&mut xd, |v| dot(rectify(&Tensor::new(shape, v.to_vec()).unwrap(), kind).data(), r.data()));
    rel_err(g.data(), &n)
}

pub fn check_cross_entropy(rng: &mut SimRng) -> f64 {
    let n = rng.range_inclusive(1, 2);
    let c = rng.range_inclusive(2, 5);
    let (h, w) = (rng.range_inclusive(1, 4), rng.range_inclusive(1, 4));
    let shape = Shape::new(n, c, h, w);
    let logits = random_tensor(rng, shape, -3.0, 3.0);
    let labels: Vec<ClassMap> = (0..n)
        .map(|_| ClassMap::new(h, w, (0..h * w).map(|_| rng.below(c as u64) as u8).collect()).unwrap())
        .collect();
    let (_, g) = cross_entropy_loss(&logits, &labels).unwrap();
    let mut ld = logits.data().to_vec();
    let num = numeric_grad(&mut ld, |v| cross_entropy_loss(&Tensor::new(shape, v.to_vec()).unwrap(), &labels).unwrap().0);
    rel_err(g.data(), &num)
}

/// Runs `instances` random checks for every layer type.
pub fn all_layers(seed: u64, instances: usize) -> Vec<LayerCheck> {
    let mut rng = SimRng::new(seed);
    let mut run = |layer: &'static str, f: &mut dyn FnMut(&mut SimRng) -> f64| LayerCheck {
        layer,
        instances,
        worst_rel_err: (0..instances).map(|_| f(&mut rng)).fold(0.0, f64::max),
    };
    vec![
        run("conv2d", &mut check_conv),
        run("upsample_nearest", &mut check_upsample),
        run("relu", &mut |r| check_activation(r, ActivationKind::Relu)),
        run("relu6", &mut |r| check_activation(r, ActivationKind::Relu6)),
        run("relumax_train", &mut |r| check_activation(r, ActivationKind::ReluMax)),
        run("softmax_cross_entropy", &mut check_cross_entropy),
    ]
}
