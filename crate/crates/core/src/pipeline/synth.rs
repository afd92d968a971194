//! Seeded synthetic sites.
//!
//! Height fields are sums of smooth seeded bumps plus a high-frequency
//! ripple whose amplitude follows its own smooth envelope, clipped to the
//! canopy range; the envelope makes stand roughness vary across the scene.
//! Bands respond to u = H + λ·T, where T is the local height texture
//! (5×5 standard deviation): a pixelwise model looking at one pixel's
//! bands can only recover u, while a model with spatial context can
//! estimate T from the neighborhood and separate H from it. Setting λ = 0
//! removes that advantage, which is the ablation hook the texture
//! experiments flip. Band noise keeps either model from inverting the
//! curves exactly, so the two meet at a common floor when λ = 0.
//!
//! With 13 bands the stack carries standard optical band names; the three
//! visible bands respond through an oscillatory (non-invertible) curve
//! with extra noise so that band-ablation sweeps have a real gradient
//! from rgb up to the full stack.

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::Site;
use crate::raster::{GeoTransform, Grid, Stack, MAX_CANOPY_HEIGHT_M};
use crate::seeding::{derive_seed, label, rng_from};

/// Texture window radius: T is the standard deviation over 5×5 patches.
const TEXTURE_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_sites: usize,
    /// Square site edge, pixels.
    pub size: usize,
    pub band_count: usize,
    /// Smooth bumps per 1000 pixels of site area.
    pub blob_density: f64,
    pub max_height: f64,
    /// Per-band sensor noise, in band units (band responses are O(1)).
    pub noise_sd: f64,
    /// λ: weight of the local-texture confound in every band. Zero makes
    /// every band a pixelwise function of height alone.
    pub texture_strength: f64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            n_sites: 8,
            size: 256,
            band_count: 13,
            blob_density: 1.0,
            max_height: f64::from(MAX_CANOPY_HEIGHT_M),
            noise_sd: 0.18,
            texture_strength: 1.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 {
            return Err(Error::parameter("need at least one site"));
        }
        if self.size < 16 {
            return Err(Error::parameter("site edge must be at least 16 pixels"));
        }
        if self.band_count == 0 {
            return Err(Error::parameter("need at least one band"));
        }
        if !(self.blob_density > 0.0) || !self.blob_density.is_finite() {
            return Err(Error::parameter("blob density must be positive"));
        }
        if !(self.max_height > 0.0) || self.max_height > f64::from(MAX_CANOPY_HEIGHT_M) {
            return Err(Error::parameter(format!(
                "max height must lie in (0, {MAX_CANOPY_HEIGHT_M}]"
            )));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::parameter("noise sd must be finite and nonnegative"));
        }
        if !(self.texture_strength >= 0.0) || !self.texture_strength.is_finite() {
            return Err(Error::parameter(
                "texture strength must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// Band names for a synthetic stack: the standard 13 optical band names
/// when the count matches, generic names otherwise.
pub fn synthetic_band_names(count: usize) -> Vec<String> {
    const S2: [&str; 13] = [
        "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12",
    ];
    if count == 13 {
        S2.iter().map(|s| s.to_string()).collect()
    } else {
        (0..count).map(|i| format!("band_{i:02}")).collect()
    }
}

/// Sum of seeded gaussian bumps.
fn bump_field(
    size: usize,
    n_blobs: usize,
    radius: std::ops::Range<f64>,
    amp: std::ops::Range<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut h = vec![0.0f64; size * size];
    let edge = size as f64;
    for _ in 0..n_blobs {
        let cx = rng.gen_range(0.0..edge);
        let cy = rng.gen_range(0.0..edge);
        let r = rng.gen_range(radius.clone());
        let a = rng.gen_range(amp.clone());
        let inv = 1.0 / (2.0 * r * r);
        for row in 0..size {
            let dy = row as f64 - cy;
            for col in 0..size {
                let dx = col as f64 - cx;
                h[row * size + col] += a * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    h
}

/// Smooth bumps plus envelope-modulated ripple, clipped to
/// [0, max_height]. The ripple gives stands sub-window roughness and the
/// envelope varies that roughness smoothly across the scene, so the local
/// texture statistic has real spread.
fn height_field(size: usize, density: f64, max_height: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let edge = size as f64;
    let n_blobs = ((size * size) as f64 / 1000.0 * density).round().max(1.0) as usize;
    let mut h = bump_field(
        size,
        n_blobs,
        edge / 32.0..edge / 8.0,
        0.15 * max_height..0.55 * max_height,
        rng,
    );

    let n_env = (((size * size) as f64 / 3000.0 * density).round() as usize).max(1);
    let mut envelope = bump_field(size, n_env, edge / 8.0..edge / 3.0, 0.5..1.1, rng);
    for v in &mut envelope {
        *v = v.clamp(0.0, 1.0);
    }

    // three plane waves, wavelengths a few pixels, so roughness lives
    // below the texture window scale
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let wavelength = rng.gen_range(3.0..7.0);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(1.4..2.0);
            let k = std::f64::consts::TAU / wavelength;
            (k * theta.cos(), k * theta.sin(), phase, amp)
        })
        .collect();
    for row in 0..size {
        for col in 0..size {
            let i = row * size + col;
            let mut ripple = 0.0;
            for &(kx, ky, phase, amp) in &waves {
                ripple += amp * (kx * col as f64 + ky * row as f64 + phase).sin();
            }
            h[i] = (h[i] + envelope[i] * ripple).clamp(0.0, max_height);
        }
    }
    h
}

/// Standard deviation of `h` over (2·radius+1)² windows intersected with
/// the grid, via integral images.
fn local_std(h: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let w = size + 1;
    let mut sum = vec![0.0f64; w * w];
    let mut sum_sq = vec![0.0f64; w * w];
    for r in 0..size {
        for c in 0..size {
            let v = h[r * size + c];
            let i = (r + 1) * w + (c + 1);
            sum[i] = v + sum[i - 1] + sum[i - w] - sum[i - w - 1];
            sum_sq[i] = v * v + sum_sq[i - 1] + sum_sq[i - w] - sum_sq[i - w - 1];
        }
    }
    let box_query = |img: &[f64], r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
        img[r1 * w + c1] - img[r0 * w + c1] - img[r1 * w + c0] + img[r0 * w + c0]
    };
    let mut out = vec![0.0f64; size * size];
    for r in 0..size {
        let r0 = r.saturating_sub(radius);
        let r1 = (r + radius + 1).min(size);
        for c in 0..size {
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius + 1).min(size);
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let mean = box_query(&sum, r0, r1, c0, c1) / n;
            let var = (box_query(&sum_sq, r0, r1, c0, c1) / n - mean * mean).max(0.0);
            out[r * size + c] = var.sqrt();
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Curve {
    /// tanh(alpha·(u − center)): smooth, monotone, invertible.
    Sigmoid { alpha: f64, center: f64 },
    /// alpha·u / (1 + alpha·u): monotone, saturating.
    Saturating { alpha: f64 },
    /// sin(alpha·u + phase): oscillatory, not invertible pointwise.
    Oscillatory { alpha: f64, phase: f64 },
}

impl Curve {
    fn eval(self, u: f64) -> f64 {
        match self {
            Curve::Sigmoid { alpha, center } => (alpha * (u - center)).tanh(),
            Curve::Saturating { alpha } => alpha * u / (1.0 + alpha * u),
            Curve::Oscillatory { alpha, phase } => (alpha * u + phase).sin(),
        }
    }
}

struct BandRule {
    curve: Curve,
    noise_mult: f64,
}

/// Per-band response rules, drawn once per generation so every site sees
/// the same sensor. Visible bands (B02/B03/B04) get the oscillatory curve
/// and triple noise, so the rgb subset is a genuinely poor window on the
/// canopy; everything else alternates between the smooth monotone
/// families, which both model classes can invert equally well.
fn band_rules(names: &[String], max_height: f64, rng: &mut ChaCha8Rng) -> Vec<BandRule> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let visible = matches!(name.as_str(), "B02" | "B03" | "B04");
            let curve = if visible {
                Curve::Oscillatory {
                    alpha: rng.gen_range(0.15..0.45),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            } else if i % 2 == 0 {
                Curve::Sigmoid {
                    alpha: rng.gen_range(0.1..0.3),
                    center: rng.gen_range(0.2..0.8) * max_height,
                }
            } else {
                Curve::Saturating {
                    alpha: rng.gen_range(0.05..0.3),
                }
            };
            BandRule {
                curve,
                noise_mult: if visible { 3.0 } else { 1.0 },
            }
        })
        .collect()
}

/// Generates `spec.n_sites` sites, bitwise deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Site>> {
    spec.validate()?;
    let names = synthetic_band_names(spec.band_count);
    let mut rule_rng = rng_from(derive_seed(seed, &[label("synth-bands")]));
    let rules = band_rules(&names, spec.max_height, &mut rule_rng);

    let mut sites = Vec::with_capacity(spec.n_sites);
    for i in 0..spec.n_sites {
        let mut rng = rng_from(derive_seed(seed, &[label("synth-site"), i as u64]));
        let h = height_field(spec.size, spec.blob_density, spec.max_height, &mut rng);
        let texture = local_std(&h, spec.size, TEXTURE_RADIUS);
        let u: Vec<f64> = h
            .iter()
            .zip(&texture)
            .map(|(&hv, &tv)| hv + spec.texture_strength * tv)
            .collect();

        // each site sits on its own 10 m grid, well apart from the rest
        let transform = GeoTransform::north_up(10_000.0 * i as f64, 0.0, 10.0);
        let mut bands = Vec::with_capacity(spec.band_count);
        for rule in &rules {
            let noise = Normal::new(0.0, (spec.noise_sd * rule.noise_mult).max(f64::MIN_POSITIVE))
                .expect("validated sd");
            let values: Vec<f32> = u
                .iter()
                .map(|&uv| {
                    let v = rule.curve.eval(uv)
                        + if spec.noise_sd > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                    v as f32
                })
                .collect();
            bands.push(Grid::new(spec.size, spec.size, transform, values)?);
        }
        let imagery = Stack::new(bands, names.clone())?;
        let labels = Grid::new(
            spec.size,
            spec.size,
            transform,
            h.iter().map(|&v| v as f32).collect(),
        )?;
        let latlon = (-15.0 + 0.05 * i as f64, 25.0 + 0.05 * i as f64);
        let id = format!("synth_{i:03}");
        sites.push(Site::new(id, imagery, labels, Some(latlon))?);
    }
    Ok(sites)
}
