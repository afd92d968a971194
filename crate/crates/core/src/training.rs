//! Patch-based training: masked pixelwise MSE, AdamW, plateau scheduling,
//! the epoch loop, and hyperparameter grid search.
//!
//! Everything is seeded and single-threaded, so a (seed, config, data)
//! triple reproduces losses bitwise. Checkpoint selection keeps the epoch
//! with the lowest full-site validation MSE, mirroring deployment rather
//! than the patch distribution.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{
    Checkpoint, CheckpointMeta, FcnModel, FreezeMask, Gradients, NamedTensor, OptimizerBlob,
    Scalar, Tensor4,
};
use crate::pipeline::{predict_tiled, prepare_input, KeepRegion};
use crate::raster::{ChannelStats, Grid, Stack};
use crate::seeding::{derive_seed, label, rng_from};
use rand::Rng as _;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Patches drawn per epoch; held constant across data-budget
    /// conditions so every run sees the same optimization length.
    pub instances_per_epoch: usize,
    pub seed: u64,
    /// None trains every layer.
    pub freeze: Option<FreezeMask>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 200,
            patience: 10,
            lr_factor: 0.1,
            min_lr: 1e-7,
            batch_size: 16,
            patch_size: 64,
            instances_per_epoch: 512,
            seed: 0,
            freeze: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::parameter("learning rate must be positive, decay nonnegative"));
        }
        if self.patience == 0 || !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::parameter("patience must be >= 1 and lr factor in (0, 1)"));
        }
        if !(self.min_lr > 0.0) {
            return Err(Error::parameter("min_lr must be positive"));
        }
        if self.batch_size == 0 || self.instances_per_epoch == 0 {
            return Err(Error::parameter("batch size and instances per epoch must be positive"));
        }
        if self.patch_size == 0 {
            return Err(Error::parameter("patch size must be positive"));
        }
        Ok(())
    }
}

/// The tuned search space: 4 learning rates crossed with 4 decays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> HyperGrid {
        HyperGrid {
            learning_rates: vec![1e-5, 1e-4, 1e-3, 1e-2],
            weight_decays: vec![1e-5, 1e-4, 1e-3, 1e-2],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.weight_decays.is_empty() {
            return Err(Error::parameter("hyperparameter grid is empty"));
        }
        Ok(())
    }

    /// Cells in fixed (lr-major, wd-minor) order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.learning_rates.len() * self.weight_decays.len());
        for &lr in &self.learning_rates {
            for &wd in &self.weight_decays {
                out.push((lr, wd));
            }
        }
        out
    }
}

/// First/second moments per parameter tensor, aligned with
/// [`FcnModel::param_tensors`] order.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn for_model(model: &FcnModel<F>) -> AdamState<F> {
        let sizes: Vec<usize> = model.param_tensors().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    /// Checkpoint form: moments as flat named tensors.
    pub fn to_blob(&self, model: &FcnModel<f32>) -> OptimizerBlob {
        let names: Vec<String> = model
            .param_tensors()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let mut tensors = Vec::with_capacity(2 * names.len());
        for (which, source) in [("m", &self.m), ("v", &self.v)] {
            for (name, data) in names.iter().zip(source.iter()) {
                tensors.push(NamedTensor {
                    name: format!("adam.{which}.{name}"),
                    shape: vec![data.len()],
                    data: data.iter().map(|&x| x.as_f64() as f32).collect(),
                });
            }
        }
        OptimizerBlob {
            t: self.t,
            tensors,
        }
    }
}

/// One AdamW update on a flat tensor. `t` counts steps starting at 1 and
/// drives bias correction; decay is decoupled from the moment estimates.
pub fn adamw_tensor<F: Scalar>(
    theta: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    wd: f64,
) {
    debug_assert!(t >= 1);
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert_eq!(theta.len(), m.len());
    debug_assert_eq!(theta.len(), v.len());
    let b1 = F::from_f64(ADAM_BETA1);
    let b2 = F::from_f64(ADAM_BETA2);
    let one = F::one();
    let bc1 = F::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(t as i32)));
    let bc2 = F::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(t as i32)));
    let eps = F::from_f64(ADAM_EPS);
    let lr = F::from_f64(lr);
    let wd = F::from_f64(wd);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] * bc1;
        let v_hat = v[i] * bc2;
        theta[i] = theta[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
    }
}

/// Applies one optimizer step to every trainable layer; frozen layers
/// (None in `grads`) keep parameters and moments untouched.
pub fn apply_adamw<F: Scalar>(
    model: &mut FcnModel<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    lr: f64,
    wd: f64,
) -> Result<()> {
    if grads.layers.len() != model.n_layers() {
        return Err(Error::shape("gradient count does not match layer count"));
    }
    if state.m.len() != 2 * model.n_layers() {
        return Err(Error::shape("optimizer state does not match model"));
    }
    state.t += 1;
    let t = state.t;
    let pairs = grads.tensor_pairs();
    let (m, v) = (&mut state.m, &mut state.v);
    let mut k = 0;
    model.visit_params_mut(|layer, _, theta| {
        if let Some((gw, gb)) = pairs[layer] {
            let g = if k % 2 == 0 { gw } else { gb };
            adamw_tensor(theta, g, &mut m[k], &mut v[k], t, lr, wd);
        }
        k += 1;
    });
    Ok(())
}

/// Reduce-on-plateau: multiply lr by `factor` after `patience` consecutive
/// epochs without strict improvement, floored at `min_lr`. NaN losses
/// count as non-improving.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> PlateauScheduler {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss; returns the lr for the next
    /// epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        let improved = val_loss.is_finite() && self.best.is_none_or(|b| val_loss < b);
        if improved {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Pixelwise MSE over non-NaN label pixels. Returns (mean loss, count);
/// count 0 means the batch carried no supervision and must be skipped.
pub fn masked_mse<F: Scalar>(pred: &Tensor4<F>, target: &Tensor4<F>) -> Result<(f64, usize)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs label {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mut sse = 0.0f64;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target.iter()) {
        if t.as_f64().is_nan() {
            continue;
        }
        let e = p.as_f64() - t.as_f64();
        sse += e * e;
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, 0));
    }
    Ok((sse / count as f64, count))
}

/// Loss plus dLoss/dPred: 2(pred-label)/count on supervised pixels, zero
/// on masked ones.
pub fn masked_mse_with_grad<F: Scalar>(
    pred: &Tensor4<F>,
    target: &Tensor4<F>,
) -> Result<(f64, usize, Tensor4<F>)> {
    let (loss, count) = masked_mse(pred, target)?;
    let mut grad = Tensor4::<F>::zeros(pred.raw_dim());
    if count > 0 {
        let scale = F::from_f64(2.0 / count as f64);
        for ((g, p), t) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
            if !t.as_f64().is_nan() {
                *g = scale * (*p - *t);
            }
        }
    }
    Ok((loss, count, grad))
}

/// One site ready for the net: normalized channels with NaN imputed to
/// zero, labels still carrying NaN where unsupervised.
#[derive(Debug, Clone)]
pub struct PreparedSite {
    pub id: String,
    pub x: Array3<f32>,
    pub y: Array2<f32>,
}

impl PreparedSite {
    pub fn new(id: impl Into<String>, x: Array3<f32>, y: Array2<f32>) -> Result<PreparedSite> {
        let (_, h, w) = x.dim();
        if y.dim() != (h, w) {
            return Err(Error::shape(format!(
                "labels {:?} do not cover imagery {:?}",
                y.dim(),
                (h, w)
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::parameter("prepared imagery must be finite"));
        }
        Ok(PreparedSite {
            id: id.into(),
            x,
            y,
        })
    }

    pub fn from_rasters(
        id: impl Into<String>,
        imagery: &Stack,
        stats: &ChannelStats,
        labels: &Grid,
    ) -> Result<PreparedSite> {
        if labels.width() != imagery.width() || labels.height() != imagery.height() {
            return Err(Error::shape("labels and imagery differ in size"));
        }
        let x = prepare_input(imagery, stats)?;
        let (h, w) = (labels.height(), labels.width());
        let y = Array2::from_shape_vec((h, w), labels.values().to_vec()).unwrap();
        PreparedSite::new(id, x, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation MSE; the
    /// initialization when no epoch produced a finite validation loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub diverged: bool,
    pub skipped_batches: usize,
}

/// Cumulative patch-position counts so a single uniform draw picks
/// (site, top-left corner) over all admissible positions.
struct PatchIndex {
    cumulative: Vec<u64>,
    cols_per_site: Vec<usize>,
    total: u64,
}

impl PatchIndex {
    fn build(sites: &[PreparedSite], patch: usize) -> PatchIndex {
        let mut cumulative = Vec::with_capacity(sites.len());
        let mut cols_per_site = Vec::with_capacity(sites.len());
        let mut total = 0u64;
        for s in sites {
            let (_, h, w) = s.x.dim();
            let positions = if h >= patch && w >= patch {
                ((h - patch + 1) * (w - patch + 1)) as u64
            } else {
                0
            };
            total += positions;
            cumulative.push(total);
            cols_per_site.push(w.saturating_sub(patch) + 1);
        }
        PatchIndex {
            cumulative,
            cols_per_site,
            total,
        }
    }

    fn locate(&self, draw: u64) -> (usize, usize, usize) {
        let site = self.cumulative.partition_point(|&c| c <= draw);
        let before = if site == 0 { 0 } else { self.cumulative[site - 1] };
        let pos = (draw - before) as usize;
        let cols = self.cols_per_site[site];
        (site, pos / cols, pos % cols)
    }
}

fn masked_sse_2d(pred: &Array2<f32>, target: &Array2<f32>) -> (f64, usize) {
    let mut sse = 0.0;
    let mut count = 0;
    for (p, t) in pred.iter().zip(target.iter()) {
        if t.is_nan() {
            continue;
        }
        let e = f64::from(*p) - f64::from(*t);
        sse += e * e;
        count += 1;
    }
    (sse, count)
}

/// Full-site validation MSE, pooled over sites.
pub fn validation_mse(model: &FcnModel<f32>, sites: &[PreparedSite]) -> Result<f64> {
    let mut sse = 0.0;
    let mut count = 0usize;
    for site in sites {
        let pred = predict_tiled(model, &site.x, 0, KeepRegion::Full)?;
        let (s, c) = masked_sse_2d(&pred, &site.y);
        sse += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::domain("validation sites contain no labeled pixels"));
    }
    Ok(sse / count as f64)
}

pub fn train(
    mut model: FcnModel<f32>,
    train_sites: &[PreparedSite],
    val_sites: &[PreparedSite],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_sites.is_empty() || val_sites.is_empty() {
        return Err(Error::parameter("need at least one training and one validation site"));
    }
    let c_in = model.spec().in_channels;
    for s in train_sites.iter().chain(val_sites) {
        if s.x.dim().0 != c_in {
            return Err(Error::shape(format!(
                "site {} has {} channels, model expects {c_in}",
                s.id,
                s.x.dim().0
            )));
        }
    }
    if config.patch_size < model.spec().receptive_field() {
        return Err(Error::parameter(format!(
            "patch size {} below the receptive field {}",
            config.patch_size,
            model.spec().receptive_field()
        )));
    }
    let mask = match &config.freeze {
        None => FreezeMask::all(model.n_layers()),
        Some(m) => {
            if m.len() != model.n_layers() {
                return Err(Error::parameter(format!(
                    "freeze mask covers {} layers, model has {}",
                    m.len(),
                    model.n_layers()
                )));
            }
            m.clone()
        }
    };
    let patch = config.patch_size;
    let index = PatchIndex::build(train_sites, patch);
    if index.total == 0 {
        return Err(Error::parameter(format!(
            "no training site admits a {patch}x{patch} patch"
        )));
    }
    if val_sites.iter().all(|s| s.y.iter().all(|v| v.is_nan())) {
        return Err(Error::domain("validation sites contain no labeled pixels"));
    }

    let init_checkpoint = Checkpoint::from_model(
        &model,
        None,
        None,
        CheckpointMeta {
            seed: config.seed,
            epoch: 0,
            val_loss: None,
        },
    );
    let mut adam = AdamState::for_model(&model);
    let mut sched = PlateauScheduler::new(
        config.learning_rate,
        config.lr_factor,
        config.patience,
        config.min_lr,
    );
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut diverged = false;
    let mut skipped_batches = 0usize;
    let mut bad_streak = 0usize;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let lr = sched.lr();
        let mut rng = rng_from(derive_seed(config.seed, &[label("epoch"), epoch as u64]));
        let draws: Vec<(usize, usize, usize)> = (0..config.instances_per_epoch)
            .map(|_| index.locate(rng.gen_range(0..index.total)))
            .collect();

        let mut train_sse = 0.0;
        let mut train_count = 0usize;
        for chunk in draws.chunks(config.batch_size) {
            let b = chunk.len();
            let mut x = Array4::<f32>::zeros((b, c_in, patch, patch));
            let mut y = Array4::<f32>::from_elem((b, 1, patch, patch), f32::NAN);
            for (slot, &(site, row, col)) in chunk.iter().enumerate() {
                let s = &train_sites[site];
                x.slice_mut(ndarray::s![slot, .., .., ..]).assign(&s.x.slice(
                    ndarray::s![.., row..row + patch, col..col + patch],
                ));
                y.slice_mut(ndarray::s![slot, 0, .., ..]).assign(&s.y.slice(
                    ndarray::s![row..row + patch, col..col + patch],
                ));
            }
            let pred = model.forward_train(&x)?;
            let (loss, count, grad) = masked_mse_with_grad(&pred, &y)?;
            if count == 0 {
                skipped_batches += 1;
                model.discard_cache();
                continue;
            }
            train_sse += loss * count as f64;
            train_count += count;
            let grads = model.backward(&grad, &mask)?;
            apply_adamw(&mut model, &grads, &mut adam, lr, config.weight_decay)?;
        }
        let train_mse = if train_count > 0 {
            train_sse / train_count as f64
        } else {
            f64::NAN
        };

        let val_mse = validation_mse(&model, val_sites)?;
        let improved = val_mse.is_finite() && best.as_ref().is_none_or(|(b, _)| val_mse < *b);
        if improved {
            let snapshot = Checkpoint::from_model(
                &model,
                None,
                Some(adam.to_blob(&model)),
                CheckpointMeta {
                    seed: config.seed,
                    epoch: epoch as u64,
                    val_loss: Some(val_mse),
                },
            );
            best = Some((val_mse, snapshot));
        }
        sched.observe(val_mse);
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });

        if !train_mse.is_finite() || !val_mse.is_finite() {
            bad_streak += 1;
            if bad_streak >= 3 {
                diverged = true;
                break;
            }
        } else {
            bad_streak = 0;
        }
    }

    Ok(TrainOutcome {
        checkpoint: best.map(|(_, c)| c).unwrap_or(init_checkpoint),
        history,
        diverged,
        skipped_batches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug)]
pub struct GridOutcome {
    pub best: TrainOutcome,
    /// Index into `cells` of the selected run.
    pub best_cell: usize,
    pub cells: Vec<GridCell>,
}

/// Index of the cell with the smallest finite best_val_mse; ties keep the
/// earliest cell, matching grid iteration order.
pub fn argmin_cell(cells: &[GridCell]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, cell) in cells.iter().enumerate() {
        if let Some(v) = cell.best_val_mse {
            if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Trains one run per grid cell with per-cell derived seeds and returns
/// the global best-validation checkpoint plus the per-cell summary.
pub fn grid_search(
    factory: impl Fn(u64) -> Result<FcnModel<f32>>,
    train_sites: &[PreparedSite],
    val_sites: &[PreparedSite],
    grid: &HyperGrid,
    base: &TrainConfig,
) -> Result<GridOutcome> {
    grid.validate()?;
    let mut cells = Vec::new();
    let mut outcomes = Vec::new();
    for (li, &lr) in grid.learning_rates.iter().enumerate() {
        for (wi, &wd) in grid.weight_decays.iter().enumerate() {
            let cell_seed = derive_seed(base.seed, &[label("grid"), li as u64, wi as u64]);
            let config = TrainConfig {
                learning_rate: lr,
                weight_decay: wd,
                seed: cell_seed,
                ..base.clone()
            };
            let model = factory(cell_seed)?;
            let outcome = train(model, train_sites, val_sites, &config)?;
            let best_val = outcome.checkpoint.meta.val_loss;
            cells.push(GridCell {
                learning_rate: lr,
                weight_decay: wd,
                best_epoch: best_val.map(|_| outcome.checkpoint.meta.epoch as usize),
                best_val_mse: best_val,
                diverged: outcome.diverged,
            });
            outcomes.push(outcome);
        }
    }
    let Some(best_cell) = argmin_cell(&cells) else {
        return Err(Error::run("every grid cell diverged before reaching a finite validation loss"));
    };
    let best = outcomes.swap_remove(best_cell);
    Ok(GridOutcome {
        best,
        best_cell,
        cells,
    })
}

/// History CSV: epoch, train_mse, val_mse, lr, seconds.
pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Grid summary CSV: learning_rate, weight_decay, best_epoch,
/// best_val_mse, diverged.
pub fn write_grid_csv(cells: &[GridCell], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for cell in cells {
        w.serialize(cell)?;
    }
    w.flush()?;
    Ok(())
}
