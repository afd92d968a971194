//! Map inference, synthetic data, and experiment orchestration.

pub mod experiment;
pub mod report;
pub mod synth;

use ndarray::{Array2, Array3, Axis, s};

use crate::error::{Error, Result};
use crate::nnet::{FcnModel, Scalar};
use crate::raster::{apply_normalization, ChannelStats, Grid, Stack};

pub use experiment::{
    audit_replay, run_experiment, BandSet, Condition, DataBudget, ExperimentConfig,
    ExperimentOutcome, FcnShape, ModelKind, RunFailure, RunResult, ScheduleSource,
};
pub use report::report;
pub use synth::{generate_synthetic, synthetic_band_names, SyntheticSpec};

/// Which part of each inference window lands in the stitched output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepRegion {
    /// Central k-by-k block; stride equals k, so tiles abut exactly.
    Inner(usize),
    /// One whole-raster pass; valid whenever memory allows.
    Full,
}

/// Per-dimension tile: source window [start, start+len), of which
/// [keep_lo, keep_hi) relative to start is written to the output.
struct TileSpan {
    start: usize,
    len: usize,
    keep_lo: usize,
    keep_hi: usize,
}

fn tile_spans(total: usize, window: usize, keep: usize, margin: usize) -> Vec<TileSpan> {
    if total <= window {
        return vec![TileSpan {
            start: 0,
            len: total,
            keep_lo: 0,
            keep_hi: total,
        }];
    }
    let mut spans = Vec::new();
    let mut r0 = 0;
    while r0 < total {
        let start = r0.saturating_sub(margin).min(total - window);
        let hi = (r0 + keep).min(total);
        spans.push(TileSpan {
            start,
            len: window,
            keep_lo: r0 - start,
            keep_hi: hi - start,
        });
        r0 += keep;
    }
    spans
}

/// Runs the model over `x` (channels, height, width) and stitches a full
/// height map. Border pixels closer than the window margin to the raster
/// edge see truncated context; everything at least `margin` pixels in is
/// exact (matches the whole-raster pass to 32-bit noise).
pub fn predict_tiled<F: Scalar>(
    model: &FcnModel<F>,
    x: &Array3<F>,
    window: usize,
    keep: KeepRegion,
) -> Result<Array2<F>> {
    let (_, h, w) = x.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("empty raster"));
    }

    let whole = |input: &Array3<F>| -> Result<Array2<F>> {
        let batch = input.clone().insert_axis(Axis(0));
        let out = model.forward(&batch)?;
        Ok(out.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
    };

    let k = match keep {
        KeepRegion::Full => return whole(x),
        KeepRegion::Inner(k) => k,
    };
    if k == 0 {
        return Err(Error::parameter("keep region must be at least 1 pixel"));
    }
    if window < k {
        return Err(Error::parameter(format!(
            "window {window} smaller than keep region {k}"
        )));
    }
    if window < model.spec().receptive_field() {
        return Err(Error::parameter(format!(
            "window {window} smaller than the receptive field {}",
            model.spec().receptive_field()
        )));
    }
    if h <= window && w <= window {
        return whole(x);
    }

    let margin = (window - k) / 2;
    let rows = tile_spans(h, window.min(h), k, margin);
    let cols = tile_spans(w, window.min(w), k, margin);
    let mut out = Array2::<F>::zeros((h, w));
    for rs in &rows {
        for cs in &cols {
            let tile = x
                .slice(s![.., rs.start..rs.start + rs.len, cs.start..cs.start + cs.len])
                .to_owned()
                .insert_axis(Axis(0));
            let pred = model.forward(&tile)?;
            let kept = pred.slice(s![0, 0, rs.keep_lo..rs.keep_hi, cs.keep_lo..cs.keep_hi]);
            out.slice_mut(s![
                rs.start + rs.keep_lo..rs.start + rs.keep_hi,
                cs.start + cs.keep_lo..cs.start + cs.keep_hi
            ])
            .assign(&kept);
        }
    }
    Ok(out)
}

/// Normalizes a stack with train-derived stats and packs it into the
/// (channels, height, width) tensor the net consumes. NaN pixels become 0
/// after normalization, i.e. the band mean: the net never sees NaN.
pub fn prepare_input(stack: &Stack, stats: &ChannelStats) -> Result<Array3<f32>> {
    let normalized = apply_normalization(stack, stats)?;
    let (c, h, w) = (
        normalized.band_count(),
        normalized.height(),
        normalized.width(),
    );
    let mut x = Array3::<f32>::zeros((c, h, w));
    for (b, band) in normalized.bands().iter().enumerate() {
        let vals = band.values();
        for r in 0..h {
            for col in 0..w {
                let v = vals[r * w + col];
                x[[b, r, col]] = if v.is_finite() { v } else { 0.0 };
            }
        }
    }
    Ok(x)
}

/// Stack variant of [`prepare_input`] for pixelwise models: normalized
/// bands with NaN imputed to the band mean (zero after normalization), so
/// both model families consume identical features.
pub fn prepared_stack(stack: &Stack, stats: &ChannelStats) -> Result<Stack> {
    let normalized = apply_normalization(stack, stats)?;
    let (bands, names) = normalized.into_parts();
    let bands = bands
        .into_iter()
        .map(|mut g| {
            for v in g.values_mut() {
                if !v.is_finite() {
                    *v = 0.0;
                }
            }
            g
        })
        .collect();
    Stack::new(bands, names)
}

/// Deployment path: normalize, run tiled inference, wrap the heights in a
/// grid on the imagery's geometry.
pub fn predict_site(
    model: &FcnModel<f32>,
    imagery: &Stack,
    stats: &ChannelStats,
    window: usize,
    keep: KeepRegion,
) -> Result<Grid> {
    let x = prepare_input(imagery, stats)?;
    let pred = predict_tiled(model, &x, window, keep)?;
    let (h, w) = pred.dim();
    Grid::new(w, h, *imagery.transform(), pred.into_raw_vec_and_offset().0)
}
