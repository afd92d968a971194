//! Resampling between georeferences.
//!
//! Output samples are taken at output pixel centers, mapped through both
//! transforms into fractional source pixel coordinates. Interpolating
//! methods poison a sample with NaN if any support sample with nonzero
//! weight is NaN or outside the source raster, so no value is ever
//! invented near nodata or the border. A target identical to the source is
//! returned bitwise as-is.

use serde::{Deserialize, Serialize};

use super::{GeoTransform, Grid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    Nearest,
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for ResampleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<ResampleMethod> {
        match s {
            "nearest" => Ok(ResampleMethod::Nearest),
            "bilinear" => Ok(ResampleMethod::Bilinear),
            "bicubic" => Ok(ResampleMethod::Bicubic),
            other => Err(Error::parameter(format!(
                "unknown resampling method {other:?} (nearest|bilinear|bicubic)"
            ))),
        }
    }
}

/// Keys convolution kernel with a = -0.5, the common "cubic" choice.
/// Zero outside |t| < 2; reproduces samples exactly at integer t.
fn keys_cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t < 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * A
    } else {
        0.0
    }
}

struct SourceView<'a> {
    grid: &'a Grid,
}

impl SourceView<'_> {
    /// Sample at integer source coordinates; None when off the raster.
    #[inline]
    fn at(&self, col: i64, row: i64) -> Option<f32> {
        if col < 0 || row < 0 || col >= self.grid.width() as i64 || row >= self.grid.height() as i64
        {
            None
        } else {
            Some(self.grid.get(col as usize, row as usize))
        }
    }
}

fn sample_nearest(src: &SourceView, fc: f64, fr: f64) -> f32 {
    // round half up, matching the raster convention that a point on the
    // boundary between pixels belongs to the later one
    let col = (fc + 0.5).floor() as i64;
    let row = (fr + 0.5).floor() as i64;
    src.at(col, row).unwrap_or(f32::NAN)
}

fn sample_kernel(src: &SourceView, fc: f64, fr: f64, radius: i64, weight: impl Fn(f64) -> f64) -> f32 {
    let c0 = fc.floor() as i64;
    let r0 = fr.floor() as i64;
    let mut acc = 0.0f64;
    for row in r0 - radius + 1..=r0 + radius {
        let wy = weight(fr - row as f64);
        if wy == 0.0 {
            continue;
        }
        for col in c0 - radius + 1..=c0 + radius {
            let wx = weight(fc - col as f64);
            if wx == 0.0 {
                continue;
            }
            match src.at(col, row) {
                Some(v) if !v.is_nan() => acc += wy * wx * f64::from(v),
                // NaN support sample or off-raster support: poisoned
                _ => return f32::NAN,
            }
        }
    }
    acc as f32
}

fn linear_weight(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.0 - t
    } else {
        0.0
    }
}

/// Resamples `grid` onto the given georeference and shape.
pub fn resample(
    grid: &Grid,
    target: &GeoTransform,
    width: usize,
    height: usize,
    method: ResampleMethod,
) -> Result<Grid> {
    target.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::parameter("target dimensions must be nonzero"));
    }
    if target == grid.transform() && width == grid.width() && height == grid.height() {
        return Ok(grid.clone());
    }

    let src = SourceView { grid };
    let mut values = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let (x, y) = target.pixel_center(col, row);
            let (c, r) = grid.transform().invert(x, y);
            // corner coordinates to sample-center coordinates
            let (fc, fr) = (c - 0.5, r - 0.5);
            let v = match method {
                ResampleMethod::Nearest => sample_nearest(&src, fc, fr),
                ResampleMethod::Bilinear => sample_kernel(&src, fc, fr, 1, linear_weight),
                ResampleMethod::Bicubic => sample_kernel(&src, fc, fr, 2, keys_cubic),
            };
            values.push(v);
        }
    }
    Grid::new(width, height, *target, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(width: usize, height: usize, values: Vec<f32>) -> Grid {
        Grid::new(width, height, GeoTransform::north_up(0.0, 0.0, 1.0), values).unwrap()
    }

    #[test]
    fn identity_is_bitwise_for_all_methods() {
        let g = grid(3, 2, vec![1.0, f32::from_bits(0x7fc0_0042), 3.0, 4.0, 5.0, 6.0]);
        for m in [
            ResampleMethod::Nearest,
            ResampleMethod::Bilinear,
            ResampleMethod::Bicubic,
        ] {
            let out = resample(&g, g.transform(), g.width(), g.height(), m).unwrap();
            assert!(out.bitwise_eq(&g));
        }
    }

    #[test]
    fn bilinear_midpoint() {
        // two samples 0.0 and 2.0; target pixel center lands halfway between
        let g = grid(2, 1, vec![0.0, 2.0]);
        let target = GeoTransform::north_up(0.5, 0.0, 1.0);
        let out = resample(&g, &target, 1, 1, ResampleMethod::Bilinear).unwrap();
        assert_relative_eq!(out.values()[0], 1.0);
    }

    #[test]
    fn bicubic_reproduces_exact_samples() {
        // every target center sits exactly on a source sample, forced down
        // the general path by a shape-changing target
        let shifted = GeoTransform::north_up(0.0, -1.0, 1.0);
        let g2 = Grid::new(4, 2, shifted, vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resample(
            &g2,
            &GeoTransform::north_up(1.0, -1.0, 1.0),
            2,
            1,
            ResampleMethod::Bicubic,
        )
        .unwrap();
        assert_relative_eq!(out.values()[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(out.values()[1], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn out_of_extent_is_nan() {
        let g = grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let target = GeoTransform::north_up(100.0, 100.0, 1.0);
        let out = resample(&g, &target, 2, 2, ResampleMethod::Nearest).unwrap();
        assert!(out.values().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn nan_poisons_interpolation_but_not_nearest() {
        let g = grid(2, 1, vec![0.0, f32::NAN]);
        let target = GeoTransform::north_up(0.5, 0.0, 1.0);
        let bil = resample(&g, &target, 1, 1, ResampleMethod::Bilinear).unwrap();
        assert!(bil.values()[0].is_nan());
        // nearest picks the closer sample; at the exact midpoint it rounds up
        let near = resample(&g, &target, 1, 1, ResampleMethod::Nearest).unwrap();
        assert!(near.values()[0].is_nan());
        let target_left = GeoTransform::north_up(0.4, 0.0, 1.0);
        let near_left = resample(&g, &target_left, 1, 1, ResampleMethod::Nearest).unwrap();
        assert_eq!(near_left.values()[0], 0.0);
    }

    #[test]
    fn zero_weight_neighbors_do_not_poison() {
        // target center lands exactly on the last source sample; the
        // off-raster neighbor to its right has weight 0 and must not matter
        let g = grid(2, 1, vec![1.0, 5.0]);
        let target = GeoTransform::north_up(1.0, 0.0, 1.0);
        let out = resample(&g, &target, 1, 1, ResampleMethod::Bilinear).unwrap();
        assert_relative_eq!(out.values()[0], 5.0);
    }

    #[test]
    fn degenerate_target_is_parameter_error() {
        let g = grid(2, 1, vec![1.0, 2.0]);
        let mut bad = *g.transform();
        bad.pixel_w = -1.0;
        assert!(resample(&g, &bad, 2, 1, ResampleMethod::Nearest).is_err());
    }
}
