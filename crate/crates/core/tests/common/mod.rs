//! Shared fixtures for the integration suites.

use canopy_core::nnet::{FcnModel, FcnSpec, FreezeMask, Tensor4};
use canopy_core::seeding::{derive_seed, label, rng_from};
use canopy_core::training::{masked_mse, masked_mse_with_grad};
use ndarray::Array4;
use rand::Rng;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub masked_grad_nonzero: usize,
    pub probes: usize,
}

/// Finite-difference check of the analytic gradient on one randomly drawn
/// configuration (architecture, weights, input, label mask all follow from
/// `case_seed`). Center differences in f64 on a step ladder: the smallest
/// step wins when a larger one straddles an activation kink, the largest
/// wins when cancellation dominates, so the minimum over the ladder tracks
/// the true agreement.
pub fn gradcheck_fcn(case_seed: u64) -> GradCheckReport {
    let mut rng = rng_from(derive_seed(case_seed, &[label("gradcheck")]));
    let spec = FcnSpec {
        in_channels: rng.gen_range(1..=4),
        hidden_layers: rng.gen_range(1..=3),
        filters: rng.gen_range(2..=6),
        kernel: 3,
        leaky_slope: 0.01,
    };
    let h = rng.gen_range(9..=12);
    let w = rng.gen_range(9..=12);
    let mut model: FcnModel<f64> = FcnModel::build(&spec, rng.gen()).unwrap();
    let x = Array4::from_shape_fn((1, spec.in_channels, h, w), |_| rng.gen_range(-1.5..1.5));
    let mut target = Array4::from_shape_fn((1, 1, h, w), |_| {
        if rng.gen_bool(0.25) {
            f64::NAN
        } else {
            rng.gen_range(0.0..3.0)
        }
    });
    // keep at least one supervised pixel
    target[(0, 0, 0, 0)] = 1.0;

    let pred = model.forward_train(&x).unwrap();
    let (_, _, grad_out) = masked_mse_with_grad(&pred, &target).unwrap();
    let grads = model
        .backward(&grad_out, &FreezeMask::all(model.n_layers()))
        .unwrap();

    let mut masked_grad_nonzero = 0;
    for (g, t) in grad_out.iter().zip(target.iter()) {
        if t.is_nan() && *g != 0.0 {
            masked_grad_nonzero += 1;
        }
    }

    // (flat tensor position, element, analytic gradient); tensor positions
    // follow visit_params_mut order: conv1.w, conv1.b, ..., head.w, head.b
    let mut probes: Vec<(usize, usize, f64)> = Vec::new();
    for (li, pair) in grads.tensor_pairs().iter().enumerate() {
        let (gw, gb) = pair.expect("nothing frozen");
        for _ in 0..2 {
            let i = rng.gen_range(0..gw.len());
            probes.push((2 * li, i, gw[i]));
        }
        let i = rng.gen_range(0..gb.len());
        probes.push((2 * li + 1, i, gb[i]));
    }

    let loss_with_bump = |tensor_pos: usize, elem: usize, delta: f64| -> f64 {
        let mut m: FcnModel<f64> = model.convert();
        let mut pos = 0usize;
        m.visit_params_mut(|_, _, slice| {
            if pos == tensor_pos {
                slice[elem] += delta;
            }
            pos += 1;
        });
        let out = m.forward(&x).unwrap();
        masked_mse(&out, &target).unwrap().0
    };

    let mut max_rel: f64 = 0.0;
    for &(tensor_pos, elem, analytic) in &probes {
        let theta = model.param_tensors()[tensor_pos].1[elem];
        let mut best = f64::INFINITY;
        for scale in [1e-5, 1e-6, 1e-7] {
            let eps = scale * (1.0 + theta.abs());
            let fd = (loss_with_bump(tensor_pos, elem, eps)
                - loss_with_bump(tensor_pos, elem, -eps))
                / (2.0 * eps);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            best = best.min(rel);
        }
        max_rel = max_rel.max(best);
    }

    GradCheckReport {
        max_rel_err: max_rel,
        masked_grad_nonzero,
        probes: probes.len(),
    }
}

/// Loss must be blind to predictions at masked pixels: poisoning them must
/// not move the loss by a single bit.
pub fn masked_pixels_cannot_touch_loss(case_seed: u64) -> bool {
    let mut rng = rng_from(derive_seed(case_seed, &[label("mask-blind")]));
    let h = rng.gen_range(4..=9);
    let w = rng.gen_range(4..=9);
    let pred = Array4::from_shape_fn((1, 1, h, w), |_| rng.gen_range(-2.0..2.0));
    let mut target: Tensor4<f64> = Array4::from_shape_fn((1, 1, h, w), |_| {
        if rng.gen_bool(0.4) {
            f64::NAN
        } else {
            rng.gen_range(0.0..3.0)
        }
    });
    target[(0, 0, 0, 0)] = 1.0;
    let (base, n) = masked_mse(&pred, &target).unwrap();
    let mut poisoned = pred.clone();
    for (p, t) in poisoned.iter_mut().zip(target.iter()) {
        if t.is_nan() {
            *p = 1e30;
        }
    }
    let (after, n2) = masked_mse(&poisoned, &target).unwrap();
    n == n2 && base.to_bits() == after.to_bits()
}
