//! Pixelwise random-forest regression.
//!
//! The baseline model: each pixel is predicted from its own channel vector
//! alone, no spatial context. Trees are greedy CART regressors grown on
//! exhaustive midpoint thresholds with every feature considered at every
//! split; randomness enters only through the per-tree bootstrap.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{Grid, Stack};
use crate::seeding::{derive_seed, label, rng_from};

pub const FOREST_VERSION: u32 = 1;

/// Depth grid searched during tuning.
pub const DEPTH_GRID: [usize; 4] = [2, 4, 8, 16];
/// Ensemble-size grid searched during tuning.
pub const TREE_GRID: [usize; 3] = [50, 100, 200];

/// Ingestion cap: at most this many training pixels are kept (uniform
/// seeded subsample) to bound memory at desk scale.
pub const MAX_TRAINING_PIXELS: usize = 500_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        /// Samples with feature value strictly below go left.
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
    },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn traverse(&self, row: impl Fn(usize) -> f32) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if f64::from(row(*feature)) < *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    fn validate(&self, n_features: usize, max_depth: usize) -> Result<()> {
        match self {
            TreeNode::Leaf { value } => {
                if !value.is_finite() {
                    return Err(Error::format("non-finite leaf value"));
                }
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if *feature >= n_features {
                    return Err(Error::format(format!(
                        "split on feature {feature}, model has {n_features}"
                    )));
                }
                if !threshold.is_finite() {
                    return Err(Error::format("non-finite split threshold"));
                }
                if max_depth == 0 {
                    return Err(Error::format("tree deeper than declared max_depth"));
                }
                left.validate(n_features, max_depth - 1)?;
                right.validate(n_features, max_depth - 1)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestHyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Test hook; production forests always bootstrap.
    pub bootstrap: bool,
}

impl Default for ForestHyperparams {
    fn default() -> ForestHyperparams {
        ForestHyperparams {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 1,
            bootstrap: true,
        }
    }
}

impl ForestHyperparams {
    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::parameter("forest needs at least one tree"));
        }
        if self.min_leaf == 0 {
            return Err(Error::parameter("min_leaf must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub n_features: usize,
    pub hyperparams: ForestHyperparams,
    /// Seed used for each tree's bootstrap draw, kept for audit.
    pub tree_seeds: Vec<u64>,
    pub trees: Vec<TreeNode>,
}

impl ForestModel {
    pub fn validate(&self) -> Result<()> {
        if self.version != FOREST_VERSION {
            return Err(Error::format(format!(
                "forest version {} unsupported (expected {FOREST_VERSION})",
                self.version
            )));
        }
        if self.trees.is_empty() || self.trees.len() != self.hyperparams.n_trees {
            return Err(Error::format("tree count does not match hyperparams"));
        }
        for tree in &self.trees {
            tree.validate(self.n_features, self.hyperparams.max_depth)?;
        }
        Ok(())
    }
}

/// Training pixels flattened from rasters; `available` counts valid pixels
/// before the subsample cap so run metadata can record whether it bit.
#[derive(Debug, Clone)]
pub struct PixelSet {
    pub x: Array2<f32>,
    pub y: Vec<f32>,
    pub available: usize,
}

struct Grower<'a> {
    x: ArrayView2<'a, f32>,
    y: &'a [f64],
    min_leaf: usize,
    /// Scratch routing buffer indexed by global row.
    side: Vec<bool>,
}

struct BestSplit {
    sse: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    /// `lists[f]` holds this node's sample rows sorted ascending by
    /// feature f. Stable partition on recursion keeps them sorted, so
    /// presorting happens exactly once.
    fn grow(&mut self, lists: Vec<Vec<u32>>, depth_left: usize) -> TreeNode {
        let m = lists[0].len();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for &g in &lists[0] {
            let t = self.y[g as usize];
            sum += t;
            sum2 += t * t;
        }
        let mean = sum / m as f64;
        let sse_node = (sum2 - sum * sum / m as f64).max(0.0);
        if depth_left == 0 || m < 2 * self.min_leaf || sse_node <= 0.0 {
            return TreeNode::Leaf { value: mean };
        }

        let mut best: Option<BestSplit> = None;
        for (f, list) in lists.iter().enumerate() {
            let mut sum_l = 0.0;
            let mut sum2_l = 0.0;
            for pos in 0..m - 1 {
                let g = list[pos] as usize;
                let t = self.y[g];
                sum_l += t;
                sum2_l += t * t;
                let v = self.x[[g, f]];
                let v_next = self.x[[list[pos + 1] as usize, f]];
                if !(v_next > v) {
                    continue;
                }
                let n_l = pos + 1;
                let n_r = m - n_l;
                if n_l < self.min_leaf || n_r < self.min_leaf {
                    continue;
                }
                let sse_l = (sum2_l - sum_l * sum_l / n_l as f64).max(0.0);
                let sum_r = sum - sum_l;
                let sse_r = (sum2 - sum2_l - sum_r * sum_r / n_r as f64).max(0.0);
                let sse = sse_l + sse_r;
                if best.as_ref().is_none_or(|b| sse < b.sse) {
                    best = Some(BestSplit {
                        sse,
                        feature: f,
                        threshold: (f64::from(v) + f64::from(v_next)) / 2.0,
                    });
                }
            }
        }

        let Some(best) = best else {
            return TreeNode::Leaf { value: mean };
        };
        if best.sse >= sse_node {
            // no candidate strictly reduces weighted variance
            return TreeNode::Leaf { value: mean };
        }

        for &g in &lists[best.feature] {
            self.side[g as usize] = f64::from(self.x[[g as usize, best.feature]]) < best.threshold;
        }
        let mut lefts = Vec::with_capacity(lists.len());
        let mut rights = Vec::with_capacity(lists.len());
        for list in lists {
            let (mut l, mut r) = (Vec::new(), Vec::new());
            for g in list {
                if self.side[g as usize] {
                    l.push(g);
                } else {
                    r.push(g);
                }
            }
            lefts.push(l);
            rights.push(r);
        }
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(self.grow(lefts, depth_left - 1)),
            right: Box::new(self.grow(rights, depth_left - 1)),
        }
    }
}

fn check_training_data(x: &ArrayView2<f32>, y: &[f32]) -> Result<()> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::parameter("empty training data"));
    }
    if y.len() != n {
        return Err(Error::shape(format!(
            "{n} feature rows but {} targets",
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::parameter(
            "features and targets must be finite (filter NaN pixels first)",
        ));
    }
    Ok(())
}

/// Grows one deterministic CART regressor. Exhaustive midpoint thresholds
/// with every feature scored at every split leave nothing to randomize, so
/// there is no seed: all randomness lives in the forest-level bootstrap.
pub fn fit_tree(
    x: ArrayView2<f32>,
    y: &[f32],
    max_depth: usize,
    min_leaf: usize,
) -> Result<TreeNode> {
    check_training_data(&x, y)?;
    if min_leaf == 0 {
        return Err(Error::parameter("min_leaf must be at least 1"));
    }
    let (n, d) = x.dim();
    let y64: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let mut lists = Vec::with_capacity(d);
    for f in 0..d {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| {
            x[[a as usize, f]]
                .partial_cmp(&x[[b as usize, f]])
                .unwrap()
                .then(a.cmp(&b))
        });
        lists.push(order);
    }
    let mut grower = Grower {
        x: x.view(),
        y: &y64,
        min_leaf,
        side: vec![false; n],
    };
    Ok(grower.grow(lists, max_depth))
}

pub fn fit_forest(
    x: ArrayView2<f32>,
    y: &[f32],
    hyperparams: &ForestHyperparams,
    seed: u64,
) -> Result<ForestModel> {
    hyperparams.validate()?;
    check_training_data(&x, y)?;
    let (n, d) = x.dim();
    let mut trees = Vec::with_capacity(hyperparams.n_trees);
    let mut tree_seeds = Vec::with_capacity(hyperparams.n_trees);
    for i in 0..hyperparams.n_trees {
        let tree_seed = derive_seed(seed, &[label("tree"), i as u64]);
        tree_seeds.push(tree_seed);
        let tree = if hyperparams.bootstrap {
            let mut rng = rng_from(tree_seed);
            let mut bx = Array2::<f32>::zeros((n, d));
            let mut by = Vec::with_capacity(n);
            for row in 0..n {
                let pick = rng.gen_range(0..n);
                bx.row_mut(row).assign(&x.row(pick));
                by.push(y[pick]);
            }
            fit_tree(bx.view(), &by, hyperparams.max_depth, hyperparams.min_leaf)?
        } else {
            fit_tree(x, y, hyperparams.max_depth, hyperparams.min_leaf)?
        };
        trees.push(tree);
    }
    Ok(ForestModel {
        version: FOREST_VERSION,
        n_features: d,
        hyperparams: hyperparams.clone(),
        tree_seeds,
        trees,
    })
}

/// Mean of per-tree leaf values, accumulated in f64.
pub fn predict_forest(model: &ForestModel, x: ArrayView2<f32>) -> Result<Vec<f32>> {
    let (n, d) = x.dim();
    if d != model.n_features {
        return Err(Error::shape(format!(
            "{d} features per row, model trained on {}",
            model.n_features
        )));
    }
    let inv = 1.0 / model.trees.len() as f64;
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let mut sum = 0.0;
        for tree in &model.trees {
            sum += tree.traverse(|f| x[[r, f]]);
        }
        out.push((sum * inv) as f32);
    }
    Ok(out)
}

/// Pixelwise prediction over a raster; any NaN channel poisons that pixel.
pub fn predict_stack(model: &ForestModel, imagery: &Stack) -> Result<Grid> {
    if imagery.band_count() != model.n_features {
        return Err(Error::shape(format!(
            "{} bands, model trained on {} features",
            imagery.band_count(),
            model.n_features
        )));
    }
    let (w, h) = (imagery.width(), imagery.height());
    let inv = 1.0 / model.trees.len() as f64;
    let mut values = Vec::with_capacity(w * h);
    let bands: Vec<&[f32]> = imagery.bands().iter().map(|b| b.values()).collect();
    for idx in 0..w * h {
        if bands.iter().any(|b| !b[idx].is_finite()) {
            values.push(f32::NAN);
            continue;
        }
        let mut sum = 0.0;
        for tree in &model.trees {
            sum += tree.traverse(|f| bands[f][idx]);
        }
        values.push((sum * inv) as f32);
    }
    Grid::new(w, h, *imagery.transform(), values)
}

/// Flattens (imagery, labels) pairs into per-pixel rows, dropping pixels
/// with NaN labels or NaN channels, then subsamples uniformly to `cap`.
pub fn pixel_training_set(
    pairs: &[(&Stack, &Grid)],
    cap: usize,
    seed: u64,
) -> Result<PixelSet> {
    if cap == 0 {
        return Err(Error::parameter("pixel cap must be positive"));
    }
    let d = match pairs.first() {
        None => return Err(Error::parameter("no training rasters")),
        Some((stack, _)) => stack.band_count(),
    };
    let mut features: Vec<f32> = Vec::new();
    let mut targets: Vec<f32> = Vec::new();
    for (stack, labels) in pairs {
        if stack.band_count() != d {
            return Err(Error::shape("band count differs across training sites"));
        }
        if stack.width() != labels.width() || stack.height() != labels.height() {
            return Err(Error::shape("imagery and labels differ in size"));
        }
        let bands: Vec<&[f32]> = stack.bands().iter().map(|b| b.values()).collect();
        let label_values = labels.values();
        for idx in 0..label_values.len() {
            if !label_values[idx].is_finite() {
                continue;
            }
            if bands.iter().any(|b| !b[idx].is_finite()) {
                continue;
            }
            for b in &bands {
                features.push(b[idx]);
            }
            targets.push(label_values[idx]);
        }
    }
    let available = targets.len();
    if available == 0 {
        return Err(Error::domain("no valid training pixels"));
    }
    if available <= cap {
        let x = Array2::from_shape_vec((available, d), features).unwrap();
        return Ok(PixelSet {
            x,
            y: targets,
            available,
        });
    }
    // partial Fisher-Yates over row indices, then ascending so row order
    // stays raster order
    let mut rng = rng_from(derive_seed(seed, &[label("pixel-subsample")]));
    let mut idx: Vec<u32> = (0..available as u32).collect();
    for i in 0..cap {
        let j = rng.gen_range(i..available);
        idx.swap(i, j);
    }
    let mut chosen = idx[..cap].to_vec();
    chosen.sort_unstable();
    let mut x = Array2::<f32>::zeros((cap, d));
    let mut y = Vec::with_capacity(cap);
    for (row, &src) in chosen.iter().enumerate() {
        let src = src as usize;
        for f in 0..d {
            x[[row, f]] = features[src * d + f];
        }
        y.push(targets[src]);
    }
    Ok(PixelSet { x, y, available })
}

pub fn save_forest(model: &ForestModel, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, model)?;
    use std::io::Write as _;
    w.flush()?;
    Ok(())
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<ForestModel> {
    let file = File::open(path.as_ref())?;
    let model: ForestModel = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(format!("bad forest file: {e}")))?;
    model.validate()?;
    Ok(model)
}
