//! Error metrics, stratified reporting, height histograms, and the
//! AGB calibration fit.
//!
//! All accumulation runs in f64 regardless of grid precision. Pixels that
//! are NaN in either grid of a pair are excluded everywhere; a reporting
//! unit with zero valid pixels is an error at the top level and an
//! absent record inside a stratified table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::StrataLayer;
use crate::raster::{resample, Grid, ResampleMethod};

/// Aggregate error summary for one reporting unit.
///
/// `r2` is absent when the unit's labels have zero variance, since the
/// denominator of the definition vanishes there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
    /// Mean signed error, prediction minus label.
    pub bias: f64,
    /// Median signed error.
    pub median_error: f64,
    pub n_pixels: u64,
}

/// Running sums for one reporting unit. Signed errors and labels are
/// retained so the median and the total sum of squares are computed in a
/// second pass rather than by cancellation-prone running formulas.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    errors: Vec<f64>,
    labels: Vec<f64>,
    sum_e: f64,
    sum_e2: f64,
    sum_abs: f64,
    min_label: f64,
    max_label: f64,
}

impl MetricsAccumulator {
    pub fn new() -> MetricsAccumulator {
        MetricsAccumulator {
            min_label: f64::INFINITY,
            max_label: f64::NEG_INFINITY,
            ..MetricsAccumulator::default()
        }
    }

    /// Records one pixel pair; pairs with NaN on either side are dropped.
    #[inline]
    pub fn push(&mut self, pred: f32, label: f32) {
        if pred.is_nan() || label.is_nan() {
            return;
        }
        let p = f64::from(pred);
        let y = f64::from(label);
        let e = p - y;
        self.errors.push(e);
        self.labels.push(y);
        self.sum_e += e;
        self.sum_e2 += e * e;
        self.sum_abs += e.abs();
        self.min_label = self.min_label.min(y);
        self.max_label = self.max_label.max(y);
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.errors.extend_from_slice(&other.errors);
        self.labels.extend_from_slice(&other.labels);
        self.sum_e += other.sum_e;
        self.sum_e2 += other.sum_e2;
        self.sum_abs += other.sum_abs;
        self.min_label = self.min_label.min(other.min_label);
        self.max_label = self.max_label.max(other.max_label);
    }

    pub fn n(&self) -> usize {
        self.errors.len()
    }

    pub fn sum_sq_error(&self) -> f64 {
        self.sum_e2
    }

    /// None when no valid pixel was seen.
    pub fn finalize(&self) -> Option<MetricsRecord> {
        let n = self.errors.len();
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let mean_label = self.labels.iter().sum::<f64>() / nf;
        // exact detection: a constant label column has min == max
        let r2 = if self.min_label == self.max_label {
            None
        } else {
            let ss_tot: f64 = self.labels.iter().map(|y| (y - mean_label).powi(2)).sum();
            Some(1.0 - self.sum_e2 / ss_tot)
        };
        let mut sorted = self.errors.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Some(MetricsRecord {
            rmse: (self.sum_e2 / nf).sqrt(),
            mae: self.sum_abs / nf,
            r2,
            bias: self.sum_e / nf,
            median_error: median,
            n_pixels: n as u64,
        })
    }
}

fn check_aligned(pred: &Grid, label: &Grid) -> Result<()> {
    if pred.width() != label.width() || pred.height() != label.height() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs label {}x{}",
            pred.width(),
            pred.height(),
            label.width(),
            label.height()
        )));
    }
    if pred.transform() != label.transform() {
        return Err(Error::shape(
            "prediction and label grids have different georeferences",
        ));
    }
    Ok(())
}

/// Scores a prediction against an aligned label grid.
pub fn metrics(pred: &Grid, label: &Grid) -> Result<MetricsRecord> {
    check_aligned(pred, label)?;
    let mut acc = MetricsAccumulator::new();
    for (&p, &y) in pred.values().iter().zip(label.values()) {
        acc.push(p, y);
    }
    acc.finalize()
        .ok_or_else(|| Error::domain("no pixel is valid in both grids"))
}

/// One stratum's row in a stratified table. `metrics` is absent when the
/// stratum holds no valid pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRecord {
    pub code: i32,
    pub name: String,
    pub n_pixels: u64,
    pub metrics: Option<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedMetrics {
    /// Over every valid pixel, assigned to a stratum or not.
    pub overall: MetricsRecord,
    /// One record per legend entry, ascending code order.
    pub strata: Vec<StratumRecord>,
}

/// Partitions valid pixels by stratum code and scores each part. Code −1
/// is excluded from the strata but still counts toward `overall`.
pub fn stratified_metrics(
    pred: &Grid,
    label: &Grid,
    strata: &StrataLayer,
) -> Result<StratifiedMetrics> {
    check_aligned(pred, label)?;
    if strata.width() != label.width() || strata.height() != label.height() {
        return Err(Error::shape(format!(
            "strata {}x{} vs label {}x{}",
            strata.width(),
            strata.height(),
            label.width(),
            label.height()
        )));
    }
    if strata.transform() != label.transform() {
        return Err(Error::shape("strata layer georeference differs from label"));
    }
    let mut overall = MetricsAccumulator::new();
    let mut per: BTreeMap<i32, MetricsAccumulator> = strata
        .legend()
        .keys()
        .map(|&c| (c, MetricsAccumulator::new()))
        .collect();
    let codes = strata.codes();
    for (i, (&p, &y)) in pred.values().iter().zip(label.values()).enumerate() {
        if p.is_nan() || y.is_nan() {
            continue;
        }
        overall.push(p, y);
        let code = codes[i];
        if code >= 0 {
            per.get_mut(&code)
                .expect("codes validated against legend")
                .push(p, y);
        }
    }
    let overall = overall
        .finalize()
        .ok_or_else(|| Error::domain("no pixel is valid in both grids"))?;
    let strata = strata
        .legend()
        .iter()
        .map(|(&code, name)| {
            let acc = &per[&code];
            StratumRecord {
                code,
                name: name.clone(),
                n_pixels: acc.n() as u64,
                metrics: acc.finalize(),
            }
        })
        .collect();
    Ok(StratifiedMetrics { overall, strata })
}

/// Scores an external prediction map after aligning it onto the label
/// georeference (nearest-neighbor unless told otherwise). Grids already
/// on the label georeference are scored as-is.
pub fn evaluate_external(
    pred: &Grid,
    label: &Grid,
    method: ResampleMethod,
) -> Result<MetricsRecord> {
    let aligned;
    let scored = if pred.width() == label.width()
        && pred.height() == label.height()
        && pred.transform() == label.transform()
    {
        pred
    } else {
        aligned = resample(pred, label.transform(), label.width(), label.height(), method)?;
        &aligned
    };
    metrics(scored, label).map_err(|e| match e {
        Error::Domain(_) => Error::domain(
            "external map does not overlap the label grid (no valid pixel in common)",
        ),
        other => other,
    })
}

/// Counts per 1 m height bin with centers 0..=30; values are assigned to
/// the nearest center (ties round away from zero) and out-of-range values
/// land in the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    lo: f64,
    width: f64,
    counts: Vec<u64>,
}

impl Histogram {
    /// Bin centers at lo, lo+width, ..., hi; hi − lo must be a whole
    /// number of widths.
    pub fn new(lo: f64, hi: f64, width: f64) -> Result<Histogram> {
        if !(width > 0.0) || !lo.is_finite() || !hi.is_finite() || hi <= lo {
            return Err(Error::parameter("need finite lo < hi and width > 0"));
        }
        let span = (hi - lo) / width;
        let bins = span.round();
        if (span - bins).abs() > 1e-9 {
            return Err(Error::parameter(
                "bin range is not a whole number of bin widths",
            ));
        }
        Ok(Histogram {
            lo,
            width,
            counts: vec![0; bins as usize + 1],
        })
    }

    /// The standard canopy-height layout: 1 m bins over [0, 30].
    pub fn standard() -> Histogram {
        Histogram::new(0.0, 30.0, 1.0).expect("static layout")
    }

    #[inline]
    pub fn push(&mut self, v: f32) {
        if v.is_nan() {
            return;
        }
        // f64::round ties away from zero, the nearest-center rule here
        let idx = ((f64::from(v) - self.lo) / self.width).round();
        let last = self.counts.len() - 1;
        let idx = if idx < 0.0 {
            0
        } else if idx > last as f64 {
            last
        } else {
            idx as usize
        };
        self.counts[idx] += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + self.width * i as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.lo != other.lo || self.width != other.width || self.counts.len() != other.counts.len()
        {
            return Err(Error::parameter("histogram layouts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Histogram of every non-NaN value in the grid, standard layout.
pub fn prediction_histogram(grid: &Grid) -> Histogram {
    let mut h = Histogram::standard();
    for &v in grid.values() {
        h.push(v);
    }
    h
}

/// Standard-layout histograms of prediction and label restricted to the
/// pixels valid in both, so each histogram's mass equals the evaluated
/// pixel count.
pub fn paired_histograms(pred: &Grid, label: &Grid) -> Result<(Histogram, Histogram)> {
    check_aligned(pred, label)?;
    let mut hp = Histogram::standard();
    let mut hl = Histogram::standard();
    for (&p, &y) in pred.values().iter().zip(label.values()) {
        if p.is_nan() || y.is_nan() {
            continue;
        }
        hp.push(p);
        hl.push(y);
    }
    Ok((hp, hl))
}

/// Full stratified evaluation for one reporting unit, ready to serialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub overall: MetricsRecord,
    /// Stratum tables keyed by layer name.
    pub layers: BTreeMap<String, Vec<StratumRecord>>,
    pub per_site: BTreeMap<String, MetricsRecord>,
    pub per_fold: BTreeMap<String, MetricsRecord>,
    pub pred_histogram: Histogram,
    pub label_histogram: Histogram,
}

impl StratifiedReport {
    /// Structural sanity: stratum counts never exceed the overall count
    /// and histogram mass equals the evaluated pixel count.
    pub fn validate(&self) -> Result<()> {
        for (name, records) in &self.layers {
            let assigned: u64 = records.iter().map(|r| r.n_pixels).sum();
            if assigned > self.overall.n_pixels {
                return Err(Error::domain(format!(
                    "layer {name:?} assigns {assigned} pixels but only {} were evaluated",
                    self.overall.n_pixels
                )));
            }
        }
        for (which, h) in [("prediction", &self.pred_histogram), ("label", &self.label_histogram)]
        {
            if h.total() != self.overall.n_pixels {
                return Err(Error::domain(format!(
                    "{which} histogram holds {} values for {} evaluated pixels",
                    h.total(),
                    self.overall.n_pixels
                )));
            }
        }
        Ok(())
    }
}

/// Least-squares line through per-site (X, reference AGB) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgbFit {
    /// Per-site X = mean(CC·H) from the predictions, site order as given.
    pub x: Vec<f64>,
    /// Per-site reference AGB, site order as given.
    pub reference: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// X = mean over valid pixels of CC·H, CC = 1[H > threshold]. Pixels at
/// or below the threshold contribute zero but stay in the denominator.
pub fn site_x(heights: &Grid, cc_threshold: f32) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for &h in heights.values() {
        if h.is_nan() {
            continue;
        }
        n += 1;
        if h > cc_threshold {
            sum += f64::from(h);
        }
    }
    if n == 0 {
        return Err(Error::domain("no valid height pixels"));
    }
    Ok(sum / n as f64)
}

/// Fits reference ≈ slope·x + intercept by least squares. Sites are
/// re-sorted internally before accumulation so the fit is bitwise
/// invariant to input order.
pub fn agb_fit(x: &[f64], reference: &[f64]) -> Result<AgbFit> {
    if x.len() != reference.len() {
        return Err(Error::shape(format!(
            "{} X values vs {} reference values",
            x.len(),
            reference.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::parameter(format!(
            "calibration needs at least 3 sites, got {}",
            x.len()
        )));
    }
    if x.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(Error::parameter("calibration inputs must be finite"));
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(reference.iter().copied()).collect();
    pairs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain(
            "X is constant across sites; the regressor is degenerate",
        ));
    }
    let sxy: f64 = pairs
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = pairs
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = pairs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    // constant reference: residuals are zero, the line is exact
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(AgbFit {
        x: x.to_vec(),
        reference: reference.to_vec(),
        slope,
        intercept,
        r2,
    })
}

/// Calibrates predicted X against reference AGB taken as the same index
/// computed on the reference grids.
pub fn agb_calibrate(sites: &[(&Grid, &Grid)], cc_threshold: f32) -> Result<AgbFit> {
    let mut x = Vec::with_capacity(sites.len());
    let mut reference = Vec::with_capacity(sites.len());
    for (pred, refg) in sites {
        x.push(site_x(pred, cc_threshold)?);
        reference.push(site_x(refg, cc_threshold)?);
    }
    agb_fit(&x, &reference)
}

/// One row of the flat metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatMetric {
    pub unit: String,
    pub stratum: String,
    pub metric: String,
    pub value: String,
}

/// Flattens one record into (unit, stratum, metric, value) rows; an
/// absent r2 becomes an empty value so the row count is stable.
pub fn flatten_metrics(unit: &str, stratum: &str, rec: &MetricsRecord) -> Vec<FlatMetric> {
    let row = |metric: &str, value: String| FlatMetric {
        unit: unit.to_string(),
        stratum: stratum.to_string(),
        metric: metric.to_string(),
        value,
    };
    vec![
        row("rmse", rec.rmse.to_string()),
        row("mae", rec.mae.to_string()),
        row("r2", rec.r2.map(|v| v.to_string()).unwrap_or_default()),
        row("bias", rec.bias.to_string()),
        row("median_error", rec.median_error.to_string()),
        row("n_pixels", rec.n_pixels.to_string()),
    ]
}

pub fn write_flat_csv(path: impl AsRef<Path>, rows: &[FlatMetric]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    series: &'a str,
    center: f64,
    count: u64,
}

/// Writes labeled histograms as (series, center, count) rows.
pub fn write_histogram_csv(
    path: impl AsRef<Path>,
    series: &[(String, &Histogram)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for (name, hist) in series {
        for (i, &count) in hist.counts().iter().enumerate() {
            w.serialize(HistogramRow {
                series: name,
                center: hist.center(i),
                count,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
