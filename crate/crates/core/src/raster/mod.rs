//! Raster data types and the preprocessing transforms applied to them.
//!
//! A [`Grid`] is a single band of 32-bit samples with an affine
//! georeference; a [`Stack`] is an ordered set of bands sharing one
//! geometry. Nodata is IEEE-754 quiet NaN throughout, and NaN payload bits
//! survive file roundtrips. Statistics accumulate in f64 even though
//! storage is f32.

mod io;
mod resample;

pub use io::{read_grid, read_stack, write_grid, write_stack};
pub use resample::{resample, ResampleMethod};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Heights above this are treated as implausible and cleared to nodata.
pub const MAX_CANOPY_HEIGHT_M: f32 = 30.0;

/// Affine georeference mapping pixel space to projected coordinates.
///
/// (col, row) in pixel units (origin at the outer corner of pixel (0,0))
/// maps to x = origin_x + col*pixel_w + row*rot_x and
/// y = origin_y + col*rot_y + row*pixel_h. `pixel_h` is negative for
/// north-up rasters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_w: f64,
    pub pixel_h: f64,
    pub rot_x: f64,
    pub rot_y: f64,
}

impl GeoTransform {
    /// Axis-aligned north-up transform with square pixels of `pixel` meters.
    pub fn north_up(origin_x: f64, origin_y: f64, pixel: f64) -> GeoTransform {
        GeoTransform {
            origin_x,
            origin_y,
            pixel_w: pixel,
            pixel_h: -pixel,
            rot_x: 0.0,
            rot_y: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.origin_x,
            self.origin_y,
            self.pixel_w,
            self.pixel_h,
            self.rot_x,
            self.rot_y,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::parameter("transform has non-finite terms"));
        }
        if self.pixel_w <= 0.0 {
            return Err(Error::parameter(format!(
                "pixel_w must be positive, got {}",
                self.pixel_w
            )));
        }
        if self.pixel_h == 0.0 {
            return Err(Error::parameter("pixel_h must be nonzero"));
        }
        if self.det() == 0.0 {
            return Err(Error::parameter("transform is singular"));
        }
        Ok(())
    }

    pub fn det(&self) -> f64 {
        self.pixel_w * self.pixel_h - self.rot_x * self.rot_y
    }

    /// Pixel-space (col, row) to projected (x, y).
    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_w + row * self.rot_x,
            self.origin_y + col * self.rot_y + row * self.pixel_h,
        )
    }

    /// Projected (x, y) of the center of pixel (col, row).
    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        self.apply(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Projected (x, y) back to pixel-space (col, row). Requires a
    /// non-singular transform (checked by [`GeoTransform::validate`]).
    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        let det = self.det();
        (
            (self.pixel_h * dx - self.rot_x * dy) / det,
            (self.pixel_w * dy - self.rot_y * dx) / det,
        )
    }

    /// Transform of a raster coarsened by an integer factor: pixel terms
    /// grow, the origin corner stays put.
    pub fn scaled(&self, factor: usize) -> GeoTransform {
        let f = factor as f64;
        GeoTransform {
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            pixel_w: self.pixel_w * f,
            pixel_h: self.pixel_h * f,
            rot_x: self.rot_x * f,
            rot_y: self.rot_y * f,
        }
    }

    /// Header layout order: origin_x, pixel_w, rot_x, origin_y, rot_y, pixel_h.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.origin_x,
            self.pixel_w,
            self.rot_x,
            self.origin_y,
            self.rot_y,
            self.pixel_h,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> GeoTransform {
        GeoTransform {
            origin_x: a[0],
            pixel_w: a[1],
            rot_x: a[2],
            origin_y: a[3],
            rot_y: a[4],
            pixel_h: a[5],
        }
    }
}

/// One georeferenced band, row-major f32, NaN = nodata.
#[derive(Debug, Clone)]
pub struct Grid {
    width: usize,
    height: usize,
    transform: GeoTransform,
    values: Vec<f32>,
}

impl Grid {
    pub fn new(
        width: usize,
        height: usize,
        transform: GeoTransform,
        values: Vec<f32>,
    ) -> Result<Grid> {
        transform.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::parameter("grid dimensions must be nonzero"));
        }
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "grid payload holds {} samples, dimensions say {}x{}={}",
                values.len(),
                width,
                height,
                width * height
            )));
        }
        Ok(Grid {
            width,
            height,
            transform,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, transform: GeoTransform, value: f32) -> Result<Grid> {
        Grid::new(width, height, transform, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        debug_assert!(col < self.width && row < self.height);
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        debug_assert!(col < self.width && row < self.height);
        self.values[row * self.width + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    /// Bit-level equality: same shape, same transform, and every sample has
    /// identical bits (so NaN payloads count too).
    pub fn bitwise_eq(&self, other: &Grid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.transform == other.transform
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Multi-band raster: bands share one geometry, names are unique.
#[derive(Debug, Clone)]
pub struct Stack {
    bands: Vec<Grid>,
    names: Vec<String>,
}

impl Stack {
    pub fn new(bands: Vec<Grid>, names: Vec<String>) -> Result<Stack> {
        if bands.is_empty() {
            return Err(Error::parameter("stack needs at least one band"));
        }
        if bands.len() != names.len() {
            return Err(Error::shape(format!(
                "{} bands but {} names",
                bands.len(),
                names.len()
            )));
        }
        let (w, h, t) = (bands[0].width(), bands[0].height(), *bands[0].transform());
        for (i, b) in bands.iter().enumerate() {
            if b.width() != w || b.height() != h || *b.transform() != t {
                return Err(Error::shape(format!(
                    "band {i} geometry differs from band 0"
                )));
            }
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::parameter(format!("duplicate band name {n:?}")));
            }
        }
        Ok(Stack { bands, names })
    }

    pub fn width(&self) -> usize {
        self.bands[0].width()
    }

    pub fn height(&self) -> usize {
        self.bands[0].height()
    }

    pub fn transform(&self) -> &GeoTransform {
        self.bands[0].transform()
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, i: usize) -> &Grid {
        &self.bands[i]
    }

    pub fn bands(&self) -> &[Grid] {
        &self.bands
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn band_by_name(&self, name: &str) -> Option<&Grid> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.bands[i])
    }

    pub fn into_parts(self) -> (Vec<Grid>, Vec<String>) {
        (self.bands, self.names)
    }

    /// New stack holding the given bands, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Stack> {
        let mut bands = Vec::with_capacity(indices.len());
        let mut names = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.bands.len() {
                return Err(Error::parameter(format!(
                    "band index {i} out of range ({} bands)",
                    self.bands.len()
                )));
            }
            bands.push(self.bands[i].clone());
            names.push(self.names[i].clone());
        }
        Stack::new(bands, names)
    }
}

/// Per-band population moments used for channelwise normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn band_count(&self) -> usize {
        self.mean.len()
    }
}

/// Clears implausible heights: values above `max_h` become nodata, values
/// below `min_h` are raised to `min_h`, NaN stays NaN. Idempotent.
pub fn clamp_labels(grid: &Grid, max_h: f32, min_h: f32) -> Result<Grid> {
    if !(max_h > min_h) {
        return Err(Error::parameter(format!(
            "max_h ({max_h}) must exceed min_h ({min_h})"
        )));
    }
    let mut out = grid.clone();
    for v in out.values_mut() {
        if v.is_nan() {
            continue;
        }
        if *v > max_h {
            *v = f32::NAN;
        } else if *v < min_h {
            *v = min_h;
        }
    }
    Ok(out)
}

/// Quantile with the linear-interpolation convention: rank r = p*(n-1) over
/// the sorted values, result interpolates between the two straddling ranks.
/// `sorted` must be non-empty, NaN-free, ascending.
fn interpolated_quantile(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let r = p * (n - 1) as f64;
    let lo = r.floor() as usize;
    let hi = lo.min(n - 2) + 1;
    let frac = r - lo as f64;
    let a = f64::from(sorted[lo]);
    let b = f64::from(sorted[hi]);
    (a + frac * (b - a)) as f32
}

/// Reduces each `factor`x`factor` block to its p-quantile over the non-NaN
/// samples. Blocks overhanging the right/bottom edge behave as if padded
/// with NaN; all-NaN blocks map to NaN. Output pixels are `factor` times
/// coarser.
pub fn coarsen_percentile(grid: &Grid, factor: usize, p: f64) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::parameter("coarsening factor must be at least 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::parameter(format!(
            "quantile fraction {p} outside [0, 1]"
        )));
    }
    let out_w = grid.width().div_ceil(factor);
    let out_h = grid.height().div_ceil(factor);
    let mut out = Vec::with_capacity(out_w * out_h);
    let mut block: Vec<f32> = Vec::with_capacity(factor * factor);
    for by in 0..out_h {
        for bx in 0..out_w {
            block.clear();
            let y_end = ((by + 1) * factor).min(grid.height());
            let x_end = ((bx + 1) * factor).min(grid.width());
            for y in by * factor..y_end {
                for x in bx * factor..x_end {
                    let v = grid.get(x, y);
                    if !v.is_nan() {
                        block.push(v);
                    }
                }
            }
            if block.is_empty() {
                out.push(f32::NAN);
            } else {
                block.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                out.push(interpolated_quantile(&block, p));
            }
        }
    }
    Grid::new(out_w, out_h, grid.transform().scaled(factor), out)
}

/// Population mean and standard deviation per band, pooled over every
/// stack's non-NaN samples. A band with no valid samples anywhere gets
/// mean 0 and std 0.
pub fn fit_normalization(stacks: &[&Stack]) -> Result<ChannelStats> {
    let d = match stacks.first() {
        None => return Err(Error::parameter("no stacks to fit normalization on")),
        Some(s) => s.band_count(),
    };
    let mut n = vec![0u64; d];
    let mut sum = vec![0.0f64; d];
    let mut sum_sq = vec![0.0f64; d];
    for stack in stacks {
        if stack.band_count() != d {
            return Err(Error::shape("band count differs across stacks"));
        }
        for (b, band) in stack.bands().iter().enumerate() {
            for &v in band.values() {
                if v.is_nan() {
                    continue;
                }
                let v = f64::from(v);
                n[b] += 1;
                sum[b] += v;
                sum_sq[b] += v * v;
            }
        }
    }
    let mut mean = Vec::with_capacity(d);
    let mut std = Vec::with_capacity(d);
    for b in 0..d {
        if n[b] == 0 {
            mean.push(0.0);
            std.push(0.0);
        } else {
            let m = sum[b] / n[b] as f64;
            let var = (sum_sq[b] / n[b] as f64 - m * m).max(0.0);
            mean.push(m);
            std.push(var.sqrt());
        }
    }
    Ok(ChannelStats { mean, std })
}

/// Applies fitted moments: band b maps to (x - mean_b) / std_b. Bands with
/// zero std map to all zeros; NaN samples stay NaN.
pub fn apply_normalization(stack: &Stack, stats: &ChannelStats) -> Result<Stack> {
    if stats.band_count() != stack.band_count() || stats.std.len() != stack.band_count() {
        return Err(Error::shape(format!(
            "stats cover {} bands, stack has {}",
            stats.band_count(),
            stack.band_count()
        )));
    }
    let mut bands = Vec::with_capacity(stack.band_count());
    for (i, band) in stack.bands().iter().enumerate() {
        let mut g = band.clone();
        let mean = stats.mean[i];
        let std = stats.std[i];
        for v in g.values_mut() {
            if v.is_nan() {
                continue;
            }
            *v = if std == 0.0 {
                0.0
            } else {
                ((f64::from(*v) - mean) / std) as f32
            };
        }
        bands.push(g);
    }
    Stack::new(bands, stack.names().to_vec())
}
