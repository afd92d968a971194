//! Acceptance gate. One test per shipping criterion; each prints a
//! single PASS/FAIL line with the measured quantity before asserting, so
//! a full run reads as a checklist.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use canopy_core::evaluation::{agb_fit, metrics, site_x};
use canopy_core::forest::{
    fit_forest, fit_tree, pixel_training_set, predict_forest, predict_stack, ForestHyperparams,
    ForestModel, TreeNode, FOREST_VERSION,
};
use canopy_core::geodata::save_site;
use canopy_core::nnet::{build_fcn, FcnSpec, FreezeMask};
use canopy_core::pipeline::experiment::{
    audit_replay, run_experiment, BandSet, Condition, DataBudget, ExperimentConfig, ModelKind,
    ScheduleSource,
};
use canopy_core::pipeline::synth::{generate_synthetic, SyntheticSpec};
use canopy_core::pipeline::{predict_site, predict_tiled, prepared_stack, KeepRegion};
use canopy_core::raster::{
    apply_normalization, clamp_labels, coarsen_percentile, fit_normalization, GeoTransform, Grid,
    Stack,
};
use canopy_core::seeding::{derive_seed, label, rng_from};
use canopy_core::splits::{generate_schedule, validate_schedule, SplitSchedule};
use canopy_core::training::{
    adamw_tensor, grid_search, HyperGrid, PlateauScheduler, PreparedSite, TrainConfig,
};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

fn verdict(criterion: usize, ok: bool, detail: &str) {
    println!(
        "criterion {criterion:02}: {} - {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion:02}: {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_parameter_identities() {
    let wide = FcnSpec::standard(12);
    let narrow = FcnSpec::standard(3);
    let n12 = wide.param_count();
    let n3 = narrow.param_count();

    let model = build_fcn(&wide, 1).unwrap();
    let mask = FreezeMask::train_last(model.n_layers(), 1).unwrap();
    let (total, trainable) = model.param_count(&mask);

    let ok = n12 == 604_417 && n3 == 594_049 && total == 604_417 && trainable == 129;
    verdict(
        1,
        ok,
        &format!("params c=12: {n12}, c=3: {n3}, trainable with last layer unfrozen: {trainable}"),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut leaked = 0usize;
    let mut probes = 0usize;
    for seed in 0..50u64 {
        let report = common::gradcheck_fcn(seed);
        worst = worst.max(report.max_rel_err);
        leaked += report.masked_grad_nonzero;
        probes += report.probes;
        common::masked_pixels_cannot_touch_loss(seed);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst < 1e-6 && leaked == 0 && elapsed < 120.0;
    verdict(
        2,
        ok,
        &format!(
            "50 checks, {probes} probes, max rel err {worst:.2e}, \
             {leaked} masked-pixel gradients nonzero, {elapsed:.0}s"
        ),
    );
}

// ---------------------------------------------------------------- 3

/// Textbook AdamW written as plain scalar expressions, kept deliberately
/// separate from the production kernel.
#[allow(clippy::too_many_arguments)]
fn adamw_oracle(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    wd: f64,
) {
    for i in 0..theta.len() {
        m[i] = 0.9 * m[i] + (1.0 - 0.9) * grad[i];
        v[i] = 0.999 * v[i] + (1.0 - 0.999) * grad[i] * grad[i];
        let m_hat = m[i] * (1.0 / (1.0 - 0.9f64.powi(t as i32)));
        let v_hat = v[i] * (1.0 / (1.0 - 0.999f64.powi(t as i32)));
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + 1e-8) + wd * theta[i]);
    }
}

#[test]
fn criterion_03_optimizer_and_scheduler() {
    let start = Instant::now();
    let mut rng = rng_from(derive_seed(3, &[label("adamw")]));
    let mut worst = 0.0f64;
    for (lr, wd) in [(1e-3, 1e-2), (1e-2, 0.0), (3e-4, 1e-4)] {
        let n = 8;
        let mut theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut m, mut v) = (vec![0.0f64; n], vec![0.0f64; n]);
        let mut theta_o = theta.clone();
        let (mut m_o, mut v_o) = (m.clone(), v.clone());
        for t in 1..=1000u64 {
            let grad: Vec<f64> = (0..n)
                .map(|_| {
                    let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
                    rng.gen_range(-1.0..1.0) * scale
                })
                .collect();
            adamw_tensor(&mut theta, &grad, &mut m, &mut v, t, lr, wd);
            adamw_oracle(&mut theta_o, &grad, &mut m_o, &mut v_o, t, lr, wd);
            for i in 0..n {
                worst = worst.max((theta[i] - theta_o[i]).abs());
            }
        }
    }

    let base = 1e-3f64;
    let mut sched = PlateauScheduler::new(base, 0.1, 10, 0.0);
    sched.observe(1.0);
    sched.observe(0.5);
    let mut early_cut = false;
    for _ in 0..9 {
        early_cut |= sched.observe(0.5) != base;
    }
    let after_tenth = sched.observe(0.5);
    let first_cut_exact = after_tenth == base * 0.1;
    for _ in 0..9 {
        early_cut |= sched.observe(0.5) != base * 0.1;
    }
    let second_cut_exact = sched.observe(0.5) == base * 0.1 * 0.1;
    sched.observe(0.25);
    let reset_on_improvement = sched.lr() == base * 0.1 * 0.1;

    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-12
        && !early_cut
        && first_cut_exact
        && second_cut_exact
        && reset_on_improvement
        && elapsed < 60.0;
    verdict(
        3,
        ok,
        &format!(
            "3000 steps max |theta drift| {worst:.2e}; lr cut {}x0.1 exactly on the 10th \
             bad epoch ({elapsed:.1}s)",
            if first_cut_exact && second_cut_exact && !early_cut {
                "fires "
            } else {
                "MISFIRES "
            }
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_schedules_and_validator() {
    let ids: Vec<String> = (0..24).map(|i| format!("site_{i:02}")).collect();
    let mut bad_schedules = 0usize;
    for seed in 0..100u64 {
        let schedule = generate_schedule(&ids, 4, (12, 6, 6), seed).unwrap();
        let mut ok = validate_schedule(&schedule).is_empty();
        let mut test_seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut val_seen: BTreeMap<&str, usize> = BTreeMap::new();
        for fold in schedule.folds() {
            ok &= fold.train.len() == 12 && fold.val.len() == 6 && fold.test.len() == 6;
            for s in &fold.test {
                *test_seen.entry(s).or_default() += 1;
            }
            for s in &fold.val {
                *val_seen.entry(s).or_default() += 1;
            }
        }
        ok &= ids.iter().all(|id| test_seen.get(id.as_str()) == Some(&1));
        ok &= ids.iter().all(|id| val_seen.get(id.as_str()) == Some(&1));
        if !ok {
            bad_schedules += 1;
        }
    }

    let clean = generate_schedule(&ids, 4, (12, 6, 6), 7).unwrap();
    assert!(validate_schedule(&clean).is_empty());
    let mut detected = 0usize;
    // test block duplicated across folds
    let mut broken = clean.folds().to_vec();
    broken[0].test[0] = broken[1].test[0].clone();
    detected += usize::from(!validate_schedule(&SplitSchedule::from_folds(broken)).is_empty());
    // train/test overlap inside one fold
    let mut broken = clean.folds().to_vec();
    broken[2].train[0] = broken[2].test[0].clone();
    detected += usize::from(!validate_schedule(&SplitSchedule::from_folds(broken)).is_empty());
    // val block short by one site
    let mut broken = clean.folds().to_vec();
    broken[3].val.pop();
    detected += usize::from(!validate_schedule(&SplitSchedule::from_folds(broken)).is_empty());

    let ok = bad_schedules == 0 && detected == 3;
    verdict(
        4,
        ok,
        &format!(
            "100 seeded schedules valid ({bad_schedules} bad), planted violations \
             detected {detected}/3"
        ),
    );
}

// ---------------------------------------------------------------- 5

fn quantile_oracle(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let r = p * (n - 1) as f64;
    let lo = r.floor() as usize;
    if lo >= n - 1 {
        return sorted[n - 1];
    }
    let frac = r - lo as f64;
    (f64::from(sorted[lo]) + frac * (f64::from(sorted[lo + 1]) - f64::from(sorted[lo]))) as f32
}

fn coarsen_oracle(grid: &Grid, factor: usize, p: f64) -> Vec<f32> {
    let (w, h) = (grid.width(), grid.height());
    let (cw, ch) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut out = Vec::with_capacity(cw * ch);
    for by in 0..ch {
        for bx in 0..cw {
            let mut cell = Vec::new();
            for y in by * factor..((by + 1) * factor).min(h) {
                for x in bx * factor..((bx + 1) * factor).min(w) {
                    let v = grid.values()[y * w + x];
                    if !v.is_nan() {
                        cell.push(v);
                    }
                }
            }
            if cell.is_empty() {
                out.push(f32::NAN);
            } else {
                cell.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.push(quantile_oracle(&cell, p));
            }
        }
    }
    out
}

#[test]
fn criterion_05_label_preparation() {
    let mut rng = rng_from(derive_seed(5, &[label("labels")]));
    let mut mismatches = 0usize;
    for case in 0..200 {
        let w = rng.gen_range(1..=20);
        let h = rng.gen_range(1..=20);
        let factor = rng.gen_range(1..=5);
        let p = [0.0, 0.25, 0.5, 0.75, 1.0, rng.gen_range(0.0..=1.0)]
            [rng.gen_range(0..6usize)];
        let mut values: Vec<f32> = (0..w * h)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    f32::NAN
                } else {
                    rng.gen_range(-100.0..100.0)
                }
            })
            .collect();
        if case % 3 == 0 && w > 2 && h > 2 {
            // a fully NaN block must coarsen to NaN, not 0
            for y in 0..factor.min(h) {
                for x in 0..factor.min(w) {
                    values[y * w + x] = f32::NAN;
                }
            }
        }
        let grid = Grid::new(w, h, GeoTransform::north_up(0.0, 0.0, 10.0), values).unwrap();
        let got = coarsen_percentile(&grid, factor, p).unwrap();
        let want = coarsen_oracle(&grid, factor, p);
        let same = got
            .values()
            .iter()
            .zip(&want)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }

    let mut clamp_ok = true;
    for _ in 0..50 {
        let values: Vec<f32> = (0..64)
            .map(|_| {
                if rng.gen_bool(0.15) {
                    f32::NAN
                } else {
                    rng.gen_range(-20.0..80.0)
                }
            })
            .collect();
        let grid = Grid::new(8, 8, GeoTransform::north_up(0.0, 0.0, 10.0), values).unwrap();
        let once = clamp_labels(&grid, 30.0, 0.0).unwrap();
        let twice = clamp_labels(&once, 30.0, 0.0).unwrap();
        clamp_ok &= once
            .values()
            .iter()
            .zip(twice.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        clamp_ok &= once
            .values()
            .iter()
            .all(|v| v.is_nan() || (0.0..=30.0).contains(v));
    }

    let mut stacks = Vec::new();
    for s in 0..3usize {
        let (w, h) = (23, 17);
        let mut grids = Vec::new();
        for b in 0..4usize {
            let values: Vec<f32> = (0..w * h)
                .map(|i| {
                    if (i + s) % 7 == 3 {
                        f32::NAN
                    } else {
                        ((i * 31 + s * 17 + b * 7) % 97) as f32 * (b + 1) as f32 * 0.37 - 12.0
                    }
                })
                .collect();
            grids.push(Grid::new(w, h, GeoTransform::north_up(0.0, 0.0, 10.0), values).unwrap());
        }
        let names = (0..4).map(|b| format!("band_{b}")).collect();
        stacks.push(Stack::new(grids, names).unwrap());
    }
    let refs: Vec<&Stack> = stacks.iter().collect();
    let stats = fit_normalization(&refs).unwrap();
    let mut moments_ok = true;
    for b in 0..4 {
        let mut n = 0usize;
        let (mut sum, mut sum2) = (0.0f64, 0.0f64);
        for stack in &stacks {
            let normed = apply_normalization(stack, &stats).unwrap();
            for &v in normed.band(b).values() {
                if v.is_finite() {
                    n += 1;
                    sum += f64::from(v);
                    sum2 += f64::from(v) * f64::from(v);
                }
            }
        }
        let mean = sum / n as f64;
        let sd = (sum2 / n as f64 - mean * mean).sqrt();
        moments_ok &= mean.abs() < 1e-5 && (sd - 1.0).abs() < 1e-4;
    }

    let ok = mismatches == 0 && clamp_ok && moments_ok;
    verdict(
        5,
        ok,
        &format!(
            "200 coarsen grids bitwise ({mismatches} mismatches), clamp idempotent: \
             {clamp_ok}, normalized moments within (1e-5, 1e-4): {moments_ok}"
        ),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_tiled_inference_matches_whole_raster() {
    let mut rng = rng_from(derive_seed(6, &[label("tiling")]));
    let mut worst = 0.0f32;
    let mut compared = 0usize;
    for case in 0..20u64 {
        let spec = FcnSpec {
            in_channels: rng.gen_range(1..=3),
            hidden_layers: 5,
            filters: rng.gen_range(4..=8),
            kernel: 3,
            leaky_slope: 0.01,
        };
        assert_eq!(spec.receptive_field(), 11);
        let model = build_fcn(&spec, derive_seed(6, &[label("model"), case])).unwrap();
        let h = rng.gen_range(24..=40);
        let w = rng.gen_range(24..=40);
        let x = Array3::from_shape_fn((spec.in_channels, h, w), |_| rng.gen_range(-2.0..2.0f32));
        let full = predict_tiled(&model, &x, h.max(w), KeepRegion::Full).unwrap();
        let tiled = predict_tiled(&model, &x, 14, KeepRegion::Inner(4)).unwrap();
        for r in 5..h - 5 {
            for c in 5..w - 5 {
                worst = worst.max((full[[r, c]] - tiled[[r, c]]).abs());
                compared += 1;
            }
        }
    }
    let ok = worst <= 1e-5 && compared > 0;
    verdict(
        6,
        ok,
        &format!("20 model/input pairs, {compared} interior pixels, max |diff| {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_metric_identities() {
    let g = |vals: &[f32]| {
        Grid::new(
            vals.len(),
            1,
            GeoTransform::north_up(0.0, 0.0, 10.0),
            vals.to_vec(),
        )
        .unwrap()
    };
    let perfect = metrics(&g(&[1.0, 2.0, 3.0]), &g(&[1.0, 2.0, 3.0])).unwrap();
    let flat = metrics(&g(&[2.0, 2.0, 2.0]), &g(&[1.0, 2.0, 3.0])).unwrap();
    let reversed = metrics(&g(&[3.0, 2.0, 1.0]), &g(&[1.0, 2.0, 3.0])).unwrap();

    let hand_ok = perfect.rmse == 0.0
        && perfect.mae == 0.0
        && perfect.r2 == Some(1.0)
        && perfect.bias == 0.0
        && flat.rmse == (2.0f64 / 3.0).sqrt()
        && flat.mae == 2.0 / 3.0
        && flat.r2 == Some(0.0)
        && flat.bias == 0.0
        && reversed.r2 == Some(-3.0);

    let mut rng = rng_from(derive_seed(7, &[label("identity")]));
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = 256usize;
        let labels: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
        let preds: Vec<f32> = labels
            .iter()
            .map(|&y| y + rng.gen_range(-5.0..5.0))
            .collect();
        let rec = metrics(&g(&preds), &g(&labels)).unwrap();
        let errors: Vec<f64> = preds
            .iter()
            .zip(&labels)
            .map(|(p, y)| f64::from(*p) - f64::from(*y))
            .collect();
        let mean = errors.iter().sum::<f64>() / n as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
        worst = worst.max((rec.rmse.powi(2) - (rec.bias.powi(2) + var)).abs());
    }

    let ok = hand_ok && worst <= 1e-9;
    verdict(
        7,
        ok,
        &format!(
            "hand examples exact: {hand_ok} (reversed r2 {:?}), max |rmse^2-bias^2-var| \
             {worst:.2e}",
            reversed.r2
        ),
    );
}

// ---------------------------------------------------------------- 8

/// Exhaustive CART oracle for one feature: every midpoint threshold is
/// scored from scratch at every node.
fn oracle_tree(x: &[f32], y: &[f64], depth_left: usize, min_leaf: usize) -> TreeNode {
    let m = x.len();
    let mean = y.iter().sum::<f64>() / m as f64;
    let sse_of = |idx: &[usize]| {
        let s: f64 = idx.iter().map(|&i| y[i]).sum();
        let s2: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
        (s2 - s * s / idx.len() as f64).max(0.0)
    };
    let all: Vec<usize> = {
        let mut o: Vec<usize> = (0..m).collect();
        o.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap().then(a.cmp(&b)));
        o
    };
    let sse_node = sse_of(&all);
    if depth_left == 0 || m < 2 * min_leaf || sse_node <= 0.0 {
        return TreeNode::Leaf { value: mean };
    }
    let mut best: Option<(f64, f64)> = None; // (sse, threshold)
    for pos in 0..m - 1 {
        let (v, v_next) = (x[all[pos]], x[all[pos + 1]]);
        if !(v_next > v) {
            continue;
        }
        let (n_l, n_r) = (pos + 1, m - pos - 1);
        if n_l < min_leaf || n_r < min_leaf {
            continue;
        }
        let sse = sse_of(&all[..pos + 1]) + sse_of(&all[pos + 1..]);
        if best.is_none_or(|(b, _)| sse < b) {
            best = Some((sse, (f64::from(v) + f64::from(v_next)) / 2.0));
        }
    }
    let Some((sse, threshold)) = best else {
        return TreeNode::Leaf { value: mean };
    };
    if sse >= sse_node {
        return TreeNode::Leaf { value: mean };
    }
    let (mut lx, mut ly, mut rx, mut ry) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &i in &all {
        if f64::from(x[i]) < threshold {
            lx.push(x[i]);
            ly.push(y[i]);
        } else {
            rx.push(x[i]);
            ry.push(y[i]);
        }
    }
    TreeNode::Split {
        feature: 0,
        threshold,
        left: Box::new(oracle_tree(&lx, &ly, depth_left - 1, min_leaf)),
        right: Box::new(oracle_tree(&rx, &ry, depth_left - 1, min_leaf)),
    }
}

#[test]
fn criterion_08_forest_against_oracles() {
    // depth-capped fits on 1-d step data
    let mut rng = rng_from(derive_seed(8, &[label("steps")]));
    let mut tree_ok = true;
    for _ in 0..20 {
        let n = 48usize;
        let levels: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..10.0)).collect();
        let x: Vec<f32> = (0..n).map(|i| i as f32 * 0.5).collect();
        let y: Vec<f32> = (0..n)
            .map(|i| {
                let step = levels[i * 4 / n];
                (step + 0.02 * ((i * 7 % 5) as f64)) as f32
            })
            .collect();
        let xm = Array2::from_shape_vec((n, 1), x.clone()).unwrap();
        let y64: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        for depth in 1..=3 {
            let got = fit_tree(xm.view(), &y, depth, 1).unwrap();
            let want = oracle_tree(&x, &y64, depth, 1);
            tree_ok &= got == want;
        }
    }

    // an unbootstrapped full-depth forest memorizes distinct rows
    let n = 200usize;
    let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-10.0..10.0f32));
    let y: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
    let hp = ForestHyperparams {
        n_trees: 3,
        max_depth: 32,
        min_leaf: 1,
        bootstrap: false,
    };
    let forest = fit_forest(x.view(), &y, &hp, 99).unwrap();
    let pred = predict_forest(&forest, x.view()).unwrap();
    let interpolates = pred
        .iter()
        .zip(&y)
        .all(|(p, t)| p.to_bits() == t.to_bits());

    // the ensemble is the plain mean of its trees
    let hand = ForestModel {
        version: FOREST_VERSION,
        n_features: 1,
        hyperparams: ForestHyperparams {
            n_trees: 3,
            max_depth: 0,
            min_leaf: 1,
            bootstrap: false,
        },
        tree_seeds: vec![0, 1, 2],
        trees: vec![
            TreeNode::Leaf { value: 1.0 },
            TreeNode::Leaf { value: 2.0 },
            TreeNode::Leaf { value: 6.0 },
        ],
    };
    let one = Array2::from_shape_vec((1, 1), vec![0.0f32]).unwrap();
    let mean_ok = predict_forest(&hand, one.view()).unwrap() == vec![3.0];

    let ok = tree_ok && interpolates && mean_ok;
    verdict(
        8,
        ok,
        &format!(
            "60 depth-capped fits match the exhaustive oracle: {tree_ok}, training rows \
             reproduced exactly: {interpolates}, ensemble mean of (1,2,6) = 3: {mean_ok}"
        ),
    );
}

// ---------------------------------------------------------------- 9

const BENCH_SEED: u64 = 20_240_501;

fn pooled_rmse(pairs: &[(Grid, &Grid)]) -> f64 {
    let mut se = 0.0f64;
    let mut n = 0usize;
    for (pred, label) in pairs {
        for (p, l) in pred.values().iter().zip(label.values()) {
            if l.is_finite() {
                se += (f64::from(*p) - f64::from(*l)).powi(2);
                n += 1;
            }
        }
    }
    (se / n as f64).sqrt()
}

/// Trains the tuned-lite FCN and the depth-tuned forest on one fold of
/// the 8-site benchmark and reports both held-out RMSEs.
fn texture_benchmark(texture_strength: f64) -> (f64, f64) {
    let spec = SyntheticSpec {
        n_sites: 8,
        size: 256,
        band_count: 13,
        texture_strength,
        ..SyntheticSpec::default()
    };
    let sites = generate_synthetic(&spec, BENCH_SEED).unwrap();
    let ids: Vec<String> = sites.iter().map(|s| s.id.clone()).collect();
    let schedule = generate_schedule(
        &ids,
        4,
        (4, 2, 2),
        derive_seed(BENCH_SEED, &[label("schedule")]),
    )
    .unwrap();
    let fold = schedule.fold(0).unwrap();
    let by_id = |id: &String| sites.iter().find(|s| &s.id == id).unwrap();
    let train_sites: Vec<_> = fold.train.iter().map(by_id).collect();
    let val_sites: Vec<_> = fold.val.iter().map(by_id).collect();
    let test_sites: Vec<_> = fold.test.iter().map(by_id).collect();
    let stacks: Vec<&Stack> = train_sites.iter().map(|s| &s.imagery).collect();
    let stats = fit_normalization(&stacks).unwrap();

    let tr: Vec<PreparedSite> = train_sites
        .iter()
        .map(|s| PreparedSite::from_rasters(&s.id, &s.imagery, &stats, &s.labels).unwrap())
        .collect();
    let va: Vec<PreparedSite> = val_sites
        .iter()
        .map(|s| PreparedSite::from_rasters(&s.id, &s.imagery, &stats, &s.labels).unwrap())
        .collect();
    let net = FcnSpec {
        in_channels: 13,
        hidden_layers: 5,
        filters: 32,
        kernel: 3,
        leaky_slope: 0.01,
    };
    let base = TrainConfig {
        max_epochs: 40,
        batch_size: 8,
        patch_size: 16,
        instances_per_epoch: 512,
        seed: derive_seed(BENCH_SEED, &[label("fcn")]),
        ..TrainConfig::default()
    };
    let grid = HyperGrid {
        learning_rates: vec![1e-3, 1e-4],
        weight_decays: vec![1e-4],
    };
    let outcome = grid_search(|s| build_fcn(&net, s), &tr, &va, &grid, &base).unwrap();
    let model = outcome.best.checkpoint.to_model().unwrap();
    let fcn_pairs: Vec<(Grid, &Grid)> = test_sites
        .iter()
        .map(|s| {
            (
                predict_site(&model, &s.imagery, &stats, 64, KeepRegion::Full).unwrap(),
                &s.labels,
            )
        })
        .collect();
    let fcn_rmse = pooled_rmse(&fcn_pairs);

    let prepared: Vec<Stack> = sites
        .iter()
        .map(|s| prepared_stack(&s.imagery, &stats).unwrap())
        .collect();
    let by_idx = |ids: &[String]| -> Vec<usize> {
        ids.iter()
            .map(|id| sites.iter().position(|s| &s.id == id).unwrap())
            .collect()
    };
    let tr_pairs: Vec<(&Stack, &Grid)> = by_idx(&fold.train)
        .iter()
        .map(|&i| (&prepared[i], &sites[i].labels))
        .collect();
    let va_pairs: Vec<(&Stack, &Grid)> = by_idx(&fold.val)
        .iter()
        .map(|&i| (&prepared[i], &sites[i].labels))
        .collect();
    let train_px = pixel_training_set(
        &tr_pairs,
        120_000,
        derive_seed(BENCH_SEED, &[label("forest-train")]),
    )
    .unwrap();
    let val_px = pixel_training_set(
        &va_pairs,
        60_000,
        derive_seed(BENCH_SEED, &[label("forest-val")]),
    )
    .unwrap();
    let mut best: Option<(f64, ForestModel)> = None;
    for depth in [8usize, 14] {
        let hp = ForestHyperparams {
            n_trees: 60,
            max_depth: depth,
            min_leaf: 1,
            bootstrap: true,
        };
        let m = fit_forest(
            train_px.x.view(),
            &train_px.y,
            &hp,
            derive_seed(BENCH_SEED, &[label("forest"), depth as u64]),
        )
        .unwrap();
        let pred = predict_forest(&m, val_px.x.view()).unwrap();
        let rmse = (pred
            .iter()
            .zip(&val_px.y)
            .map(|(p, l)| (f64::from(*p) - f64::from(*l)).powi(2))
            .sum::<f64>()
            / val_px.y.len() as f64)
            .sqrt();
        if best.as_ref().is_none_or(|(b, _)| rmse < *b) {
            best = Some((rmse, m));
        }
    }
    let (_, forest_model) = best.unwrap();
    let forest_pairs: Vec<(Grid, &Grid)> = by_idx(&fold.test)
        .iter()
        .map(|&i| {
            (
                predict_stack(&forest_model, &prepared[i]).unwrap(),
                &sites[i].labels,
            )
        })
        .collect();
    (fcn_rmse, pooled_rmse(&forest_pairs))
}

#[test]
fn criterion_09_texture_separates_the_models() {
    let start = Instant::now();
    let (fcn_on, forest_on) = texture_benchmark(1.5);
    let (fcn_off, forest_off) = texture_benchmark(0.0);
    let elapsed = start.elapsed().as_secs_f64();
    let gap_on = (forest_on - fcn_on) / forest_on;
    let gap_off = (forest_off - fcn_off).abs() / forest_off;
    let ok = gap_on >= 0.10 && gap_off < 0.10 && elapsed < 1800.0;
    verdict(
        9,
        ok,
        &format!(
            "texture on: fcn {fcn_on:.3} vs forest {forest_on:.3} ({:+.1}% gap), \
             texture off: fcn {fcn_off:.3} vs forest {forest_off:.3} ({:.1}% gap), {elapsed:.0}s",
            gap_on * 100.0,
            gap_off * 100.0
        ),
    );
}

// --------------------------------------------------------------- 10

#[test]
fn criterion_10_site_budget_direction() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let spec = SyntheticSpec {
        n_sites: 24,
        size: 96,
        band_count: 4,
        ..SyntheticSpec::default()
    };
    for site in generate_synthetic(&spec, derive_seed(10, &[label("world")])).unwrap() {
        save_site(&site, data_dir.join(&site.id)).unwrap();
    }
    let config = ExperimentConfig {
        data_dir,
        out_dir: dir.path().join("out"),
        schedule: ScheduleSource::Generate {
            n_folds: 4,
            sizes: (12, 6, 6),
            seed: 11,
        },
        conditions: vec![
            Condition {
                model: ModelKind::Fcn,
                bands: BandSet::S2All,
            },
            Condition {
                model: ModelKind::Forest,
                bands: BandSet::S2All,
            },
        ],
        budget: Some(DataBudget {
            k: vec![3, 12],
            n_trials: 5,
        }),
        train: TrainConfig {
            max_epochs: 24,
            batch_size: 8,
            patch_size: 16,
            instances_per_epoch: 256,
            seed: 0,
            ..TrainConfig::default()
        },
        forest: ForestHyperparams {
            n_trees: 40,
            max_depth: 12,
            min_leaf: 1,
            bootstrap: true,
        },
        fcn: canopy_core::pipeline::experiment::FcnShape {
            hidden_layers: 5,
            filters: 16,
            kernel: 3,
            leaky_slope: 0.01,
        },
        folds: Some(vec![0]),
        seed: 10,
    };
    let outcome = run_experiment(&config).unwrap();
    assert!(
        outcome.failures.is_empty(),
        "failed runs: {:?}",
        outcome.failures
    );

    let mut means: BTreeMap<(&str, usize), (f64, usize)> = BTreeMap::new();
    let mut subsets: BTreeMap<(usize, usize), Vec<(String, Vec<String>)>> = BTreeMap::new();
    for r in &outcome.results {
        let (Some(k), Some(trial)) = (r.k, r.trial) else {
            continue;
        };
        let e = means.entry((r.model.token(), k)).or_default();
        e.0 += r.metrics.rmse;
        e.1 += 1;
        subsets
            .entry((k, trial))
            .or_default()
            .push((r.run_id.clone(), r.train_sites.clone()));
    }
    let mean = |m: &str, k: usize| {
        let (s, n) = means[&(m, k)];
        s / n as f64
    };
    let shared = subsets
        .values()
        .all(|draws| draws.iter().all(|(_, s)| s == &draws[0].1));
    let trials_each = means.values().all(|&(_, n)| n == 5);
    let fcn_dir = mean("fcn", 3) > mean("fcn", 12);
    let forest_dir = mean("forest", 3) > mean("forest", 12);
    let elapsed = start.elapsed().as_secs_f64();

    let ok = fcn_dir && forest_dir && shared && trials_each && elapsed < 1800.0;
    verdict(
        10,
        ok,
        &format!(
            "fcn rmse k=3 {:.3} > k=12 {:.3}: {fcn_dir}; forest k=3 {:.3} > k=12 {:.3}: \
             {forest_dir}; subsets shared across conditions: {shared}; {elapsed:.0}s",
            mean("fcn", 3),
            mean("fcn", 12),
            mean("forest", 3),
            mean("forest", 12)
        ),
    );
}

// --------------------------------------------------------------- 11

#[test]
fn criterion_11_agb_calibration() {
    let x: Vec<f64> = (0..12).map(|i| 0.5 + 0.75 * f64::from(i)).collect();
    let reference: Vec<f64> = x.iter().map(|v| 3.2 * v + 10.0).collect();
    let fit = agb_fit(&x, &reference).unwrap();
    let linear_ok = (fit.r2 - 1.0).abs() < 1e-12
        && (fit.slope - 3.2).abs() < 1e-9
        && (fit.intercept - 10.0).abs() < 1e-9;

    let mut rng = rng_from(derive_seed(11, &[label("shuffle")]));
    let xs: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..10.0)).collect();
    let mut refs: Vec<f64> = xs.iter().map(|v| 5.0 * v + rng.gen_range(0.0..1.0)).collect();
    let mut worst_shuffled_r2 = 0.0f64;
    for _ in 0..20 {
        refs.shuffle(&mut rng);
        let f = agb_fit(&xs, &refs).unwrap();
        worst_shuffled_r2 = worst_shuffled_r2.max(f.r2.abs());
    }

    let heights = Grid::new(
        2,
        2,
        GeoTransform::north_up(0.0, 0.0, 10.0),
        vec![1.0, 2.0, 0.5, 3.0],
    )
    .unwrap();
    let x_hand = site_x(&heights, 1.5).unwrap();
    let hand_ok = x_hand == 1.25;

    let ok = linear_ok && worst_shuffled_r2 < 0.3 && hand_ok;
    verdict(
        11,
        ok,
        &format!(
            "linear fixture r2 {:.1e} from 1, shuffled |r2| max {worst_shuffled_r2:.3}, \
             X([1,2,0.5,3], cc>1.5) = {x_hand}",
            (fit.r2 - 1.0).abs()
        ),
    );
}

// --------------------------------------------------------------- 12

#[test]
fn criterion_12_reruns_reproduce_stored_metrics() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let spec = SyntheticSpec {
        n_sites: 4,
        size: 64,
        band_count: 3,
        ..SyntheticSpec::default()
    };
    for site in generate_synthetic(&spec, derive_seed(12, &[label("world")])).unwrap() {
        save_site(&site, data_dir.join(&site.id)).unwrap();
    }
    let config = |out: std::path::PathBuf| ExperimentConfig {
        data_dir: data_dir.clone(),
        out_dir: out,
        schedule: ScheduleSource::Generate {
            n_folds: 4,
            sizes: (2, 1, 1),
            seed: 13,
        },
        conditions: vec![
            Condition {
                model: ModelKind::Fcn,
                bands: BandSet::S2All,
            },
            Condition {
                model: ModelKind::Forest,
                bands: BandSet::S2All,
            },
        ],
        budget: None,
        train: TrainConfig {
            max_epochs: 6,
            batch_size: 4,
            patch_size: 16,
            instances_per_epoch: 64,
            seed: 0,
            ..TrainConfig::default()
        },
        forest: ForestHyperparams {
            n_trees: 20,
            max_depth: 10,
            min_leaf: 1,
            bootstrap: true,
        },
        fcn: canopy_core::pipeline::experiment::FcnShape {
            hidden_layers: 5,
            filters: 16,
            kernel: 3,
            leaky_slope: 0.01,
        },
        folds: Some(vec![0, 1]),
        seed: 12,
    };
    let first = run_experiment(&config(dir.path().join("out_a"))).unwrap();
    let second = run_experiment(&config(dir.path().join("out_b"))).unwrap();
    assert!(first.failures.is_empty() && second.failures.is_empty());
    assert_eq!(first.results.len(), second.results.len());

    let mut worst = 0.0f64;
    for (a, b) in first.results.iter().zip(&second.results) {
        assert_eq!(a.run_id, b.run_id);
        worst = worst.max((a.metrics.rmse - b.metrics.rmse).abs());
        worst = worst.max((a.metrics.mae - b.metrics.mae).abs());
        worst = worst.max((a.metrics.bias - b.metrics.bias).abs());
    }

    let mut worst_drift = 0.0f64;
    for r in &first.results {
        let run_dir = dir.path().join("out_a").join("runs").join(&r.run_id);
        worst_drift = worst_drift.max(audit_replay(&run_dir, &data_dir).unwrap());
    }
    let elapsed = start.elapsed().as_secs_f64();

    let ok = worst <= 1e-6 && worst_drift <= 1e-6 && elapsed < 600.0;
    verdict(
        12,
        ok,
        &format!(
            "{} runs rerun: max metric diff {worst:.1e}, checkpoint replay drift \
             {worst_drift:.1e}, {elapsed:.0}s",
            first.results.len()
        ),
    );
}
