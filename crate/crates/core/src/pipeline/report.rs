//! Report generation over a directory of completed runs.
//!
//! Everything here is a pure function of the results directory: rerunning
//! a report over unchanged inputs writes byte-identical files. Rows are
//! sorted by run id, sites by name, strata by code, so no ordering leaks
//! in from the filesystem.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{
    paired_histograms, Histogram, MetricsAccumulator, MetricsRecord,
};
use crate::geodata::{bin_continuous, load_site, Site, DEFAULT_HEIGHT_EDGES};
use crate::raster::read_grid;

use super::experiment::{ExperimentConfig, RunResult};

/// Files a report pass wrote, for display.
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub report_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunRow<'a> {
    run_id: &'a str,
    model: &'a str,
    bands: &'a str,
    fold: usize,
    k: Option<usize>,
    trial: Option<usize>,
    rmse: f64,
    mae: f64,
    r2: Option<f64>,
    bias: f64,
    median_error: f64,
    n_pixels: u64,
    wall_seconds: f64,
}

/// One row per run, sorted by run id.
pub fn write_run_rows(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut w = csv::Writer::from_path(path)?;
    for r in sorted {
        w.serialize(RunRow {
            run_id: &r.run_id,
            model: r.model.token(),
            bands: r.bands.token(),
            fold: r.fold,
            k: r.k,
            trial: r.trial,
            rmse: r.metrics.rmse,
            mae: r.metrics.mae,
            r2: r.metrics.r2,
            bias: r.metrics.bias,
            median_error: r.metrics.median_error,
            n_pixels: r.metrics.n_pixels,
            wall_seconds: r.wall_seconds,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepFoldRow<'a> {
    model: &'a str,
    bands: &'a str,
    k: Option<usize>,
    fold: usize,
    n_runs: usize,
    rmse_mean: f64,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    model: &'a str,
    bands: &'a str,
    k: Option<usize>,
    n_runs: usize,
    /// Mean over folds of the per-fold (trial-averaged) RMSE.
    rmse_fold_mean: f64,
    /// RMSE pooled over every test pixel of the group.
    rmse_pooled: f64,
}

type GroupKey = (&'static str, &'static str, Option<usize>);

/// Writes sweep_folds.csv and sweep.csv under `dir`: condition-level
/// aggregation with both the fold-mean and the pixel-pooled reading of
/// the cross-fold RMSE.
pub fn write_sweep_csvs(dir: &Path, results: &[RunResult]) -> Result<(PathBuf, PathBuf)> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<usize, Vec<&RunResult>>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.model.token(), r.bands.token(), r.k))
            .or_default()
            .entry(r.fold)
            .or_default()
            .push(r);
    }

    let folds_path = dir.join("sweep_folds.csv");
    let mut w = csv::Writer::from_path(&folds_path)?;
    for ((model, bands, k), folds) in &groups {
        for (&fold, runs) in folds {
            let rmse_mean =
                runs.iter().map(|r| r.metrics.rmse).sum::<f64>() / runs.len() as f64;
            w.serialize(SweepFoldRow {
                model,
                bands,
                k: *k,
                fold,
                n_runs: runs.len(),
                rmse_mean,
            })?;
        }
    }
    w.flush()?;

    let sweep_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&sweep_path)?;
    for ((model, bands, k), folds) in &groups {
        let mut n_runs = 0;
        let mut fold_means = Vec::new();
        let mut sse = 0.0f64;
        let mut pixels = 0u64;
        for runs in folds.values() {
            n_runs += runs.len();
            fold_means.push(
                runs.iter().map(|r| r.metrics.rmse).sum::<f64>() / runs.len() as f64,
            );
            for r in runs {
                sse += r.metrics.rmse * r.metrics.rmse * r.metrics.n_pixels as f64;
                pixels += r.metrics.n_pixels;
            }
        }
        w.serialize(SweepRow {
            model,
            bands,
            k: *k,
            n_runs,
            rmse_fold_mean: fold_means.iter().sum::<f64>() / fold_means.len() as f64,
            rmse_pooled: (sse / pixels as f64).sqrt(),
        })?;
    }
    w.flush()?;
    Ok((folds_path, sweep_path))
}

#[derive(Serialize)]
struct PerSiteRow<'a> {
    site: &'a str,
    fold: usize,
    run_id: &'a str,
    model: &'a str,
    bands: &'a str,
    k: Option<usize>,
    trial: Option<usize>,
    rmse: f64,
    mae: f64,
    r2: Option<f64>,
    bias: f64,
    median_error: f64,
    n_pixels: u64,
}

/// Per-site rows; a site appears only under the fold that tests it,
/// which is structural: runs record metrics for their test sites alone.
fn write_per_site_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut w = csv::Writer::from_path(path)?;
    for r in sorted {
        for (site, m) in &r.per_site {
            w.serialize(PerSiteRow {
                site,
                fold: r.fold,
                run_id: &r.run_id,
                model: r.model.token(),
                bands: r.bands.token(),
                k: r.k,
                trial: r.trial,
                rmse: m.rmse,
                mae: m.mae,
                r2: m.r2,
                bias: m.bias,
                median_error: m.median_error,
                n_pixels: m.n_pixels,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct StratumRow<'a> {
    model: &'a str,
    bands: &'a str,
    stratum: i32,
    name: &'a str,
    n_pixels: u64,
    bias: Option<f64>,
    median_error: Option<f64>,
    rmse: Option<f64>,
    mae: Option<f64>,
    r2: Option<f64>,
}

struct LoadedRun {
    dir: PathBuf,
    result: RunResult,
}

fn load_results(results_dir: &Path) -> Result<Vec<LoadedRun>> {
    let runs_dir = results_dir.join("runs");
    let entries = fs::read_dir(&runs_dir).map_err(|_| {
        Error::domain(format!(
            "no run results under {} (missing runs/ directory)",
            results_dir.display()
        ))
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("result.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::domain(format!(
            "no run results under {}",
            results_dir.display()
        )));
    }
    dirs.into_iter()
        .map(|dir| {
            let file = fs::File::open(dir.join("result.json"))?;
            let result: RunResult = serde_json::from_reader(std::io::BufReader::new(file))
                .map_err(|e| {
                    Error::format(format!("bad result.json in {}: {e}", dir.display()))
                })?;
            Ok(LoadedRun { dir, result })
        })
        .collect()
}

/// Pools prediction/label pixels of one condition over height strata.
struct ConditionPool {
    strata: BTreeMap<i32, MetricsAccumulator>,
    legend: BTreeMap<i32, String>,
    pred_hist: Histogram,
    label_hist: Histogram,
}

impl ConditionPool {
    fn new() -> ConditionPool {
        ConditionPool {
            strata: BTreeMap::new(),
            legend: BTreeMap::new(),
            pred_hist: Histogram::standard(),
            label_hist: Histogram::standard(),
        }
    }

    fn absorb(&mut self, pred: &crate::raster::Grid, site: &Site) -> Result<()> {
        let layer = bin_continuous(&site.labels, &DEFAULT_HEIGHT_EDGES)?;
        for (code, name) in layer.legend() {
            self.legend.entry(*code).or_insert_with(|| name.clone());
            self.strata.entry(*code).or_insert_with(MetricsAccumulator::new);
        }
        let codes = layer.codes();
        for (i, (&p, &y)) in pred
            .values()
            .iter()
            .zip(site.labels.values())
            .enumerate()
        {
            if p.is_nan() || y.is_nan() {
                continue;
            }
            if codes[i] >= 0 {
                self.strata
                    .get_mut(&codes[i])
                    .expect("legend inserted above")
                    .push(p, y);
            }
        }
        let (hp, hl) = paired_histograms(pred, &site.labels)?;
        self.pred_hist.merge(&hp)?;
        self.label_hist.merge(&hl)?;
        Ok(())
    }
}

/// Renders every summary file for a results directory into
/// `<results>/report/`. Deterministic: unchanged inputs give
/// byte-identical outputs.
pub fn report(results_dir: &Path) -> Result<ReportPaths> {
    let config = ExperimentConfig::load(results_dir.join("config.json"))?;
    let runs = load_results(results_dir)?;
    let results: Vec<RunResult> = runs.iter().map(|r| r.result.clone()).collect();

    let report_dir = results_dir.join("report");
    fs::create_dir_all(&report_dir)?;
    let mut files = Vec::new();

    let comparison = report_dir.join("model_comparison.csv");
    write_run_rows(&comparison, &results)?;
    files.push(comparison);

    let per_site = report_dir.join("per_site.csv");
    write_per_site_csv(&per_site, &results)?;
    files.push(per_site);

    let (folds_csv, sweep_csv) = write_sweep_csvs(&report_dir, &results)?;
    files.push(folds_csv);
    files.push(sweep_csv);

    // stratified tables and histograms pool the stored predictions of the
    // full-data runs against the sites' label grids
    let mut site_cache: BTreeMap<String, Site> = BTreeMap::new();
    let mut pools: BTreeMap<(&'static str, &'static str), ConditionPool> = BTreeMap::new();
    let mut sorted_runs: Vec<&LoadedRun> = runs.iter().collect();
    sorted_runs.sort_by(|a, b| a.result.run_id.cmp(&b.result.run_id));
    for run in &sorted_runs {
        if run.result.k.is_some() {
            continue;
        }
        let key = (run.result.model.token(), run.result.bands.token());
        let pool = pools.entry(key).or_insert_with(ConditionPool::new);
        for site_id in &run.result.test_sites {
            if !site_cache.contains_key(site_id) {
                site_cache.insert(
                    site_id.clone(),
                    load_site(config.data_dir.join(site_id))?,
                );
            }
            let site = &site_cache[site_id];
            let pred = read_grid(run.dir.join(format!("pred_{site_id}.grd")))?;
            pool.absorb(&pred, site)?;
        }
    }

    let strata_path = report_dir.join("stratified_bias.csv");
    {
        let mut w = csv::Writer::from_path(&strata_path)?;
        for ((model, bands), pool) in &pools {
            for (&code, acc) in &pool.strata {
                let rec: Option<MetricsRecord> = acc.finalize();
                w.serialize(StratumRow {
                    model,
                    bands,
                    stratum: code,
                    name: &pool.legend[&code],
                    n_pixels: acc.n() as u64,
                    bias: rec.as_ref().map(|m| m.bias),
                    median_error: rec.as_ref().map(|m| m.median_error),
                    rmse: rec.as_ref().map(|m| m.rmse),
                    mae: rec.as_ref().map(|m| m.mae),
                    r2: rec.as_ref().and_then(|m| m.r2),
                })?;
            }
        }
        w.flush()?;
    }
    files.push(strata_path);

    let hist_path = report_dir.join("histograms.csv");
    {
        let series: Vec<(String, &Histogram)> = pools
            .iter()
            .flat_map(|((model, bands), pool)| {
                [
                    (format!("{model}_{bands}_pred"), &pool.pred_hist),
                    (format!("{model}_{bands}_label"), &pool.label_hist),
                ]
            })
            .collect();
        crate::evaluation::write_histogram_csv(&hist_path, &series)?;
    }
    files.push(hist_path);

    // re-export the prediction rasters for external viewers
    let pred_dir = report_dir.join("predictions");
    for run in &sorted_runs {
        let dest_dir = pred_dir.join(&run.result.run_id);
        fs::create_dir_all(&dest_dir)?;
        for site_id in &run.result.test_sites {
            let name = format!("pred_{site_id}.grd");
            let dest = dest_dir.join(&name);
            fs::copy(run.dir.join(&name), &dest)?;
            files.push(dest);
        }
    }

    Ok(ReportPaths { report_dir, files })
}
