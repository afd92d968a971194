//! Experiment orchestration: sweeps over model family, band set, and
//! training-data budget, executed fold by fold against a site schedule.
//!
//! Every run writes its own directory under `<out>/runs/<run_id>`:
//! result.json, the fitted model, the normalization stats it consumed,
//! and one prediction raster per test site. Runs are isolated; one
//! failure is recorded and the sweep continues. All cross-run state
//! flows through the output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{metrics, MetricsAccumulator, MetricsRecord};
use crate::forest::{
    fit_forest, load_forest, pixel_training_set, predict_stack, save_forest, ForestHyperparams,
    MAX_TRAINING_PIXELS,
};
use crate::geodata::{load_site, load_sites, location_embedding, Site};
use crate::nnet::{build_fcn, load_checkpoint, save_checkpoint, FcnSpec};
use crate::pipeline::{predict_site, prepared_stack, KeepRegion};
use crate::raster::{fit_normalization, write_grid, ChannelStats, Grid, Stack};
use crate::seeding::{derive_seed, label};
use crate::splits::{generate_schedule, subsample_train_sites, validate_schedule, SplitSchedule};
use crate::training::{train, write_history_csv, PreparedSite, TrainConfig};

/// Inference window used when a raster is too large for one pass.
pub const INFERENCE_WINDOW: usize = 64;
/// Stitched keep region inside each inference window.
pub const INFERENCE_KEEP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fcn,
    Forest,
}

impl ModelKind {
    pub fn token(self) -> &'static str {
        match self {
            ModelKind::Fcn => "fcn",
            ModelKind::Forest => "forest",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ModelKind> {
        match s {
            "fcn" => Ok(ModelKind::Fcn),
            "forest" => Ok(ModelKind::Forest),
            other => Err(Error::parameter(format!(
                "unknown model {other:?} (fcn|forest)"
            ))),
        }
    }
}

/// Which input channels a condition trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandSet {
    /// The three visible bands.
    Rgb,
    /// Visible plus near-infrared.
    RgbNir,
    /// Every band in the stack.
    S2All,
    /// Every band plus three location-embedding channels.
    S2AllLatlon,
}

impl BandSet {
    pub fn token(self) -> &'static str {
        match self {
            BandSet::Rgb => "rgb",
            BandSet::RgbNir => "rgb_nir",
            BandSet::S2All => "s2_all",
            BandSet::S2AllLatlon => "s2_all_latlon",
        }
    }

    pub fn includes_latlon(self) -> bool {
        matches!(self, BandSet::S2AllLatlon)
    }

    /// Resolves to band names that must all exist in the imagery.
    pub fn band_names(self, available: &[String]) -> Result<Vec<String>> {
        let wanted: Vec<String> = match self {
            BandSet::Rgb => ["B04", "B03", "B02"].iter().map(|s| s.to_string()).collect(),
            BandSet::RgbNir => ["B04", "B03", "B02", "B08"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            BandSet::S2All | BandSet::S2AllLatlon => available.to_vec(),
        };
        for name in &wanted {
            if !available.contains(name) {
                return Err(Error::parameter(format!(
                    "band set {:?} needs band {name:?}, imagery has {:?}",
                    self.token(),
                    available
                )));
            }
        }
        Ok(wanted)
    }
}

impl std::str::FromStr for BandSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<BandSet> {
        match s {
            "rgb" => Ok(BandSet::Rgb),
            "rgb_nir" => Ok(BandSet::RgbNir),
            "s2_all" => Ok(BandSet::S2All),
            "s2_all_latlon" => Ok(BandSet::S2AllLatlon),
            other => Err(Error::parameter(format!(
                "unknown band set {other:?} (rgb|rgb_nir|s2_all|s2_all_latlon)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub model: ModelKind,
    pub bands: BandSet,
}

/// Where the site schedule comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScheduleSource {
    /// Build one over the sites found in the data directory.
    Generate {
        n_folds: usize,
        sizes: (usize, usize, usize),
        seed: u64,
    },
    /// Load a previously written schedule file.
    File { path: PathBuf },
}

/// A data-budget sweep: every k gets `n_trials` independent site draws,
/// and each draw is shared across all model conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBudget {
    pub k: Vec<usize>,
    pub n_trials: usize,
}

/// Network shape without the input-channel count, which follows from the
/// band set at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcnShape {
    pub hidden_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for FcnShape {
    fn default() -> FcnShape {
        FcnShape {
            hidden_layers: 5,
            filters: 128,
            kernel: 3,
            leaky_slope: 0.01,
        }
    }
}

impl FcnShape {
    pub fn spec(&self, in_channels: usize) -> FcnSpec {
        FcnSpec {
            in_channels,
            hidden_layers: self.hidden_layers,
            filters: self.filters,
            kernel: self.kernel,
            leaky_slope: self.leaky_slope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Directory of site subdirectories (imagery.grd + labels.grd each).
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub schedule: ScheduleSource,
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub budget: Option<DataBudget>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub forest: ForestHyperparams,
    #[serde(default)]
    pub fcn: FcnShape,
    /// Folds to execute; None runs all of them.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::parameter("no model conditions configured"));
        }
        for (i, a) in self.conditions.iter().enumerate() {
            for b in &self.conditions[i + 1..] {
                if a == b {
                    return Err(Error::parameter(format!(
                        "duplicate condition {}_{}",
                        a.model.token(),
                        a.bands.token()
                    )));
                }
            }
        }
        if let Some(budget) = &self.budget {
            if budget.k.is_empty() || budget.n_trials == 0 {
                return Err(Error::parameter(
                    "data budget needs at least one k and one trial",
                ));
            }
            if budget.k.iter().any(|&k| k == 0) {
                return Err(Error::parameter("budget k must be positive"));
            }
            let mut ks = budget.k.clone();
            ks.sort_unstable();
            ks.dedup();
            if ks.len() != budget.k.len() {
                return Err(Error::parameter("budget k values must be distinct"));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let file = File::open(path.as_ref())?;
        let config = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(format!("bad experiment config: {e}")))?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        use std::io::Write as _;
        w.flush()?;
        Ok(())
    }
}

/// Everything needed to rank, reload, and audit one completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub model: ModelKind,
    pub bands: BandSet,
    pub fold: usize,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub trial: Option<usize>,
    /// Sites actually trained on (the subset, for budget runs), sorted.
    pub train_sites: Vec<String>,
    pub test_sites: Vec<String>,
    /// Pooled over every test pixel of the fold.
    pub metrics: MetricsRecord,
    pub per_site: BTreeMap<String, MetricsRecord>,
    /// Model file name inside the run directory.
    pub model_path: String,
    pub wall_seconds: f64,
    pub base_seed: u64,
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_id: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub out_dir: PathBuf,
}

struct RunPlan {
    run_id: String,
    condition: Condition,
    fold: usize,
    k: Option<usize>,
    trial: Option<usize>,
    train_sites: Vec<String>,
}

fn run_id(condition: &Condition, fold: usize, kt: Option<(usize, usize)>) -> String {
    let base = format!(
        "{}_{}_f{fold}",
        condition.model.token(),
        condition.bands.token()
    );
    match kt {
        None => base,
        Some((k, t)) => format!("{base}_k{k:02}_t{t:02}"),
    }
}

/// Selects the condition's bands from a site's imagery, appending the
/// three location-embedding channels when the set asks for them.
pub fn select_bands(site: &Site, bands: BandSet) -> Result<Stack> {
    let names = bands.band_names(site.imagery.names())?;
    let indices: Vec<usize> = names
        .iter()
        .map(|n| {
            site.imagery
                .names()
                .iter()
                .position(|have| have == n)
                .expect("checked by band_names")
        })
        .collect();
    let selected = site.imagery.select(&indices)?;
    if !bands.includes_latlon() {
        return Ok(selected);
    }
    let (lat, lon) = site.latlon.ok_or_else(|| {
        Error::parameter(format!(
            "site {:?} has no centroid; the latlon band set needs one",
            site.id
        ))
    })?;
    let embedding = location_embedding(lat, lon)?;
    let (mut grids, mut names) = selected.into_parts();
    let (w, h, t) = (site.width(), site.height(), *site.labels.transform());
    for (i, suffix) in ["loc_x", "loc_y", "loc_z"].iter().enumerate() {
        grids.push(Grid::filled(w, h, t, embedding.0[i] as f32)?);
        names.push(suffix.to_string());
    }
    Stack::new(grids, names)
}

fn sites_by_id(sites: Vec<Site>) -> BTreeMap<String, Site> {
    sites.into_iter().map(|s| (s.id.clone(), s)).collect()
}

fn collect<'a>(
    ids: &[String],
    sites: &'a BTreeMap<String, Site>,
) -> Result<Vec<&'a Site>> {
    ids.iter()
        .map(|id| {
            sites
                .get(id)
                .ok_or_else(|| Error::parameter(format!("schedule names unknown site {id:?}")))
        })
        .collect()
}

fn prepare_many(
    sites: &[&Site],
    bands: BandSet,
    stats: &ChannelStats,
) -> Result<Vec<PreparedSite>> {
    sites
        .iter()
        .map(|site| {
            let stack = select_bands(site, bands)?;
            PreparedSite::from_rasters(site.id.clone(), &stack, stats, &site.labels)
        })
        .collect()
}

/// Fits normalization over the training sites' selected bands.
fn fit_stats(train: &[&Site], bands: BandSet) -> Result<ChannelStats> {
    let stacks: Vec<Stack> = train
        .iter()
        .map(|s| select_bands(s, bands))
        .collect::<Result<_>>()?;
    let refs: Vec<&Stack> = stacks.iter().collect();
    fit_normalization(&refs)
}

struct ScoredPredictions {
    pooled: MetricsRecord,
    per_site: BTreeMap<String, MetricsRecord>,
}

fn score_and_store(
    predictions: &[(String, Grid)],
    sites: &BTreeMap<String, Site>,
    run_dir: &Path,
) -> Result<ScoredPredictions> {
    let mut pooled = MetricsAccumulator::new();
    let mut per_site = BTreeMap::new();
    for (id, pred) in predictions {
        let site = &sites[id];
        let record = metrics(pred, &site.labels)?;
        for (&p, &y) in pred.values().iter().zip(site.labels.values()) {
            pooled.push(p, y);
        }
        per_site.insert(id.clone(), record);
        write_grid(pred, run_dir.join(format!("pred_{id}.grd")))?;
    }
    let pooled = pooled
        .finalize()
        .ok_or_else(|| Error::domain("no valid test pixels in the fold"))?;
    Ok(ScoredPredictions { pooled, per_site })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write as _;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(format!("bad json at {}: {e}", path.display())))
}

fn execute_run(
    plan: &RunPlan,
    config: &ExperimentConfig,
    schedule: &SplitSchedule,
    sites: &BTreeMap<String, Site>,
    out_dir: &Path,
) -> Result<RunResult> {
    let started = Instant::now();
    let fold = schedule.fold(plan.fold)?;
    let run_seed = derive_seed(config.seed, &[label("run"), label(&plan.run_id)]);
    let run_dir = out_dir.join("runs").join(&plan.run_id);
    fs::create_dir_all(&run_dir)?;

    let train_sites = collect(&plan.train_sites, sites)?;
    let val_sites = collect(&fold.val, sites)?;
    let test_sites = collect(&fold.test, sites)?;
    let bands = plan.condition.bands;

    let stats = fit_stats(&train_sites, bands)?;
    write_json(&stats, &run_dir.join("stats.json"))?;

    let (model_path, predictions) = match plan.condition.model {
        ModelKind::Fcn => {
            let train_prepared = prepare_many(&train_sites, bands, &stats)?;
            let val_prepared = prepare_many(&val_sites, bands, &stats)?;
            let channels = train_prepared[0].x.dim().0;
            let model = build_fcn(&config.fcn.spec(channels), run_seed)?;
            let mut tc = config.train.clone();
            tc.seed = run_seed;
            let outcome = train(model, &train_prepared, &val_prepared, &tc)?;
            write_history_csv(&outcome.history, run_dir.join("history.csv"))?;
            let mut checkpoint = outcome.checkpoint;
            checkpoint.stats = Some(stats.clone());
            save_checkpoint(&checkpoint, run_dir.join("model.ckp"))?;
            let best = checkpoint.to_model()?;
            let predictions: Vec<(String, Grid)> = test_sites
                .iter()
                .map(|site| {
                    let stack = select_bands(site, bands)?;
                    let pred = predict_site(
                        &best,
                        &stack,
                        &stats,
                        INFERENCE_WINDOW,
                        KeepRegion::Full,
                    )?;
                    Ok((site.id.clone(), pred))
                })
                .collect::<Result<_>>()?;
            ("model.ckp".to_string(), predictions)
        }
        ModelKind::Forest => {
            let train_stacks: Vec<(Stack, &Grid)> = train_sites
                .iter()
                .map(|site| {
                    let stack = prepared_stack(&select_bands(site, bands)?, &stats)?;
                    Ok((stack, &site.labels))
                })
                .collect::<Result<_>>()?;
            let pairs: Vec<(&Stack, &Grid)> =
                train_stacks.iter().map(|(s, g)| (s, *g)).collect();
            let pixels = pixel_training_set(
                &pairs,
                MAX_TRAINING_PIXELS,
                derive_seed(run_seed, &[label("pixel-subsample")]),
            )?;
            let model = fit_forest(pixels.x.view(), &pixels.y, &config.forest, run_seed)?;
            save_forest(&model, run_dir.join("model.json"))?;
            let predictions: Vec<(String, Grid)> = test_sites
                .iter()
                .map(|site| {
                    let stack = prepared_stack(&select_bands(site, bands)?, &stats)?;
                    Ok((site.id.clone(), predict_stack(&model, &stack)?))
                })
                .collect::<Result<_>>()?;
            ("model.json".to_string(), predictions)
        }
    };

    let scored = score_and_store(&predictions, sites, &run_dir)?;
    let result = RunResult {
        run_id: plan.run_id.clone(),
        model: plan.condition.model,
        bands,
        fold: plan.fold,
        k: plan.k,
        trial: plan.trial,
        train_sites: plan.train_sites.clone(),
        test_sites: fold.test.clone(),
        metrics: scored.pooled,
        per_site: scored.per_site,
        model_path,
        wall_seconds: started.elapsed().as_secs_f64(),
        base_seed: config.seed,
        run_seed,
    };
    write_json(&result, &run_dir.join("result.json"))?;
    Ok(result)
}

fn resolve_schedule(config: &ExperimentConfig, site_ids: &[String]) -> Result<SplitSchedule> {
    let schedule = match &config.schedule {
        ScheduleSource::Generate {
            n_folds,
            sizes,
            seed,
        } => generate_schedule(site_ids, *n_folds, *sizes, *seed)?,
        ScheduleSource::File { path } => SplitSchedule::load(path)?,
    };
    let violations = validate_schedule(&schedule);
    if !violations.is_empty() {
        let listed: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::parameter(format!(
            "schedule fails validation: {}",
            listed.join("; ")
        )));
    }
    for id in schedule.site_universe() {
        if !site_ids.contains(&id) {
            return Err(Error::parameter(format!(
                "schedule names site {id:?} that is not in the data directory"
            )));
        }
    }
    Ok(schedule)
}

/// Runs every (fold × condition × trial) cell of the experiment. Failures
/// are recorded per run and the sweep continues; inspect
/// [`ExperimentOutcome::failures`] (the CLI maps any failure to a nonzero
/// exit).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let sites = sites_by_id(load_sites(&config.data_dir)?);
    let site_ids: Vec<String> = sites.keys().cloned().collect();
    let schedule = resolve_schedule(config, &site_ids)?;

    fs::create_dir_all(&config.out_dir)?;
    config.save(config.out_dir.join("config.json"))?;
    schedule.save(config.out_dir.join("schedule.json"))?;

    let folds: Vec<usize> = match &config.folds {
        Some(list) => {
            let mut f = list.clone();
            f.sort_unstable();
            f.dedup();
            for &i in &f {
                schedule.fold(i)?;
            }
            f
        }
        None => (0..schedule.n_folds()).collect(),
    };

    let mut plans: Vec<RunPlan> = Vec::new();
    for &fold in &folds {
        let full_train = {
            let mut t = schedule.fold(fold)?.train.clone();
            t.sort();
            t
        };
        for condition in &config.conditions {
            plans.push(RunPlan {
                run_id: run_id(condition, fold, None),
                condition: *condition,
                fold,
                k: None,
                trial: None,
                train_sites: full_train.clone(),
            });
        }
        if let Some(budget) = &config.budget {
            for &k in &budget.k {
                // one draw per (fold, k, trial), shared by every condition
                let trials =
                    subsample_train_sites(&schedule, fold, k, budget.n_trials, config.seed)?;
                for trial in &trials {
                    for condition in &config.conditions {
                        plans.push(RunPlan {
                            run_id: run_id(condition, fold, Some((k, trial.trial))),
                            condition: *condition,
                            fold,
                            k: Some(k),
                            trial: Some(trial.trial),
                            train_sites: trial.sites.clone(),
                        });
                    }
                }
            }
        }
    }

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for plan in &plans {
        let attempt = catch_unwind(AssertUnwindSafe(|| {
            execute_run(plan, config, &schedule, &sites, &config.out_dir)
        }));
        match attempt {
            Ok(Ok(result)) => results.push(result),
            Ok(Err(e)) => failures.push(RunFailure {
                run_id: plan.run_id.clone(),
                message: e.to_string(),
            }),
            Err(panic) => {
                let message = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic with non-string payload".to_string());
                failures.push(RunFailure {
                    run_id: plan.run_id.clone(),
                    message: format!("panicked: {message}"),
                });
            }
        }
    }

    super::report::write_run_rows(&config.out_dir.join("summary.csv"), &results)?;
    super::report::write_sweep_csvs(&config.out_dir, &results)?;
    if !failures.is_empty() {
        write_json(&failures, &config.out_dir.join("failures.json"))?;
    }
    Ok(ExperimentOutcome {
        results,
        failures,
        out_dir: config.out_dir.clone(),
    })
}

/// Reloads a stored run and re-scores its checkpoint against the stored
/// test sites. Returns the largest absolute difference across rmse, mae,
/// and bias; differences above 1e-6 are an error.
pub fn audit_replay(run_dir: &Path, data_dir: &Path) -> Result<f64> {
    let result: RunResult = read_json(&run_dir.join("result.json"))?;
    let stats: ChannelStats = read_json(&run_dir.join("stats.json"))?;
    let mut pooled = MetricsAccumulator::new();
    let model_file = run_dir.join(&result.model_path);

    enum Loaded {
        Fcn(crate::nnet::FcnModel<f32>),
        Forest(crate::forest::ForestModel),
    }
    let model = match result.model {
        ModelKind::Fcn => Loaded::Fcn(load_checkpoint(&model_file)?.to_model()?),
        ModelKind::Forest => Loaded::Forest(load_forest(&model_file)?),
    };

    for id in &result.test_sites {
        let site = load_site(data_dir.join(id))?;
        let stack = select_bands(&site, result.bands)?;
        let pred = match &model {
            Loaded::Fcn(m) => {
                predict_site(m, &stack, &stats, INFERENCE_WINDOW, KeepRegion::Full)?
            }
            Loaded::Forest(m) => predict_stack(m, &prepared_stack(&stack, &stats)?)?,
        };
        for (&p, &y) in pred.values().iter().zip(site.labels.values()) {
            pooled.push(p, y);
        }
    }
    let replayed = pooled
        .finalize()
        .ok_or_else(|| Error::domain("replay produced no valid pixels"))?;
    if replayed.n_pixels != result.metrics.n_pixels {
        return Err(Error::run(format!(
            "audit of {}: replay covered {} pixels, stored run covered {}",
            result.run_id, replayed.n_pixels, result.metrics.n_pixels
        )));
    }
    let drift = [
        (replayed.rmse - result.metrics.rmse).abs(),
        (replayed.mae - result.metrics.mae).abs(),
        (replayed.bias - result.metrics.bias).abs(),
    ]
    .into_iter()
    .fold(0.0f64, f64::max);
    if drift > 1e-6 {
        return Err(Error::run(format!(
            "audit of {}: stored metrics drift {drift:e} exceeds 1e-6",
            result.run_id
        )));
    }
    Ok(drift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::save_site;
    use crate::pipeline::synth::{generate_synthetic, SyntheticSpec};

    fn tiny_world(dir: &Path, n_sites: usize) -> Vec<String> {
        let spec = SyntheticSpec {
            n_sites,
            size: 32,
            band_count: 3,
            ..SyntheticSpec::default()
        };
        let sites = generate_synthetic(&spec, 7).unwrap();
        for site in &sites {
            save_site(site, dir.join(&site.id)).unwrap();
        }
        sites.iter().map(|s| s.id.clone()).collect()
    }

    fn tiny_config(data_dir: &Path, out_dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            data_dir: data_dir.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            schedule: ScheduleSource::Generate {
                n_folds: 4,
                sizes: (2, 1, 1),
                seed: 5,
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
                learning_rate: 1e-3,
                max_epochs: 2,
                batch_size: 4,
                patch_size: 16,
                instances_per_epoch: 8,
                ..TrainConfig::default()
            },
            forest: ForestHyperparams {
                n_trees: 5,
                max_depth: 4,
                ..ForestHyperparams::default()
            },
            fcn: FcnShape {
                hidden_layers: 1,
                filters: 4,
                kernel: 3,
                leaky_slope: 0.01,
            },
            folds: Some(vec![0]),
            seed: 11,
        }
    }

    #[test]
    fn band_set_resolution() {
        let s2: Vec<String> = crate::pipeline::synth::synthetic_band_names(13);
        assert_eq!(
            BandSet::Rgb.band_names(&s2).unwrap(),
            vec!["B04", "B03", "B02"]
        );
        assert_eq!(BandSet::RgbNir.band_names(&s2).unwrap().len(), 4);
        assert_eq!(BandSet::S2All.band_names(&s2).unwrap().len(), 13);

        let generic = crate::pipeline::synth::synthetic_band_names(3);
        assert!(BandSet::Rgb.band_names(&generic).is_err());
        assert_eq!(BandSet::S2All.band_names(&generic).unwrap().len(), 3);
    }

    #[test]
    fn latlon_band_set_appends_embedding_channels() {
        let spec = SyntheticSpec {
            n_sites: 1,
            size: 32,
            band_count: 3,
            ..SyntheticSpec::default()
        };
        let site = generate_synthetic(&spec, 1).unwrap().remove(0);
        let stack = select_bands(&site, BandSet::S2AllLatlon).unwrap();
        assert_eq!(stack.band_count(), 6);
        assert_eq!(stack.names()[3], "loc_x");
        // embedding bands are constant over the site
        let b = stack.band(3).values();
        assert!(b.iter().all(|&v| v == b[0]));

        let mut no_centroid = site.clone();
        no_centroid.latlon = None;
        assert!(select_bands(&no_centroid, BandSet::S2AllLatlon).is_err());
    }

    #[test]
    fn tiny_experiment_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        tiny_world(&data, 4);
        let out = tmp.path().join("out");
        let config = tiny_config(&data, &out);
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.results.len(), 2);
        assert!(outcome.failures.is_empty());

        for result in &outcome.results {
            assert!(result.metrics.rmse.is_finite());
            assert_eq!(result.per_site.len(), result.test_sites.len());
            let run_dir = out.join("runs").join(&result.run_id);
            assert!(run_dir.join("result.json").exists());
            assert!(run_dir.join("stats.json").exists());
            assert!(run_dir.join(&result.model_path).exists());
            for site in &result.test_sites {
                assert!(run_dir.join(format!("pred_{site}.grd")).exists());
            }
        }
        assert!(out.join("summary.csv").exists());
        assert!(out.join("schedule.json").exists());
        assert!(out.join("config.json").exists());

        // the stored runs replay to their stored metrics
        for result in &outcome.results {
            let drift = audit_replay(&out.join("runs").join(&result.run_id), &data).unwrap();
            assert!(drift <= 1e-6, "drift {drift}");
        }
    }

    #[test]
    fn budget_trials_share_subsets_across_conditions() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        tiny_world(&data, 4);
        let out = tmp.path().join("out");
        let mut config = tiny_config(&data, &out);
        config.budget = Some(DataBudget {
            k: vec![1],
            n_trials: 2,
        });
        let outcome = run_experiment(&config).unwrap();
        assert!(outcome.failures.is_empty());
        // 2 full runs + 2 conditions × 1 k × 2 trials
        assert_eq!(outcome.results.len(), 6);

        for trial in 0..2 {
            let subsets: Vec<&Vec<String>> = outcome
                .results
                .iter()
                .filter(|r| r.k == Some(1) && r.trial == Some(trial))
                .map(|r| &r.train_sites)
                .collect();
            assert_eq!(subsets.len(), 2);
            assert_eq!(subsets[0], subsets[1], "trial {trial} subsets differ");
        }
    }

    #[test]
    fn rerun_reproduces_metrics_bitwise() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        tiny_world(&data, 4);

        let mut first = tiny_config(&data, &tmp.path().join("out_a"));
        first.conditions.truncate(1);
        let mut second = first.clone();
        second.out_dir = tmp.path().join("out_b");

        let a = run_experiment(&first).unwrap();
        let b = run_experiment(&second).unwrap();
        assert_eq!(a.results.len(), b.results.len());
        for (ra, rb) in a.results.iter().zip(&b.results) {
            assert_eq!(ra.run_id, rb.run_id);
            assert_eq!(ra.metrics.rmse.to_bits(), rb.metrics.rmse.to_bits());
            assert_eq!(ra.metrics.bias.to_bits(), rb.metrics.bias.to_bits());
            assert_eq!(ra.run_seed, rb.run_seed);
        }
    }

    #[test]
    fn one_bad_condition_does_not_sink_the_sweep() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        tiny_world(&data, 4); // generic band names: rgb cannot resolve
        let out = tmp.path().join("out");
        let mut config = tiny_config(&data, &out);
        config.conditions.push(Condition {
            model: ModelKind::Forest,
            bands: BandSet::Rgb,
        });
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.results.len(), 2);
        assert_eq!(outcome.failures.len(), 1);
        assert!(outcome.failures[0].run_id.contains("rgb"));
        assert!(out.join("failures.json").exists());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config(Path::new("data"), Path::new("out"));
        let path = tmp.path().join("config.json");
        config.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(config, loaded);

        // partial configs lean on defaults
        let partial = r#"{
            "data_dir": "d",
            "out_dir": "o",
            "schedule": {"source": "generate", "n_folds": 4, "sizes": [2,1,1], "seed": 0},
            "conditions": [{"model": "fcn", "bands": "s2_all"}]
        }"#;
        let sparse: ExperimentConfig = serde_json::from_str(partial).unwrap();
        assert_eq!(sparse.fcn.filters, 128);
        assert_eq!(sparse.train.batch_size, TrainConfig::default().batch_size);
        sparse.validate().unwrap();
    }

    #[test]
    fn duplicate_conditions_are_rejected() {
        let mut config = tiny_config(Path::new("d"), Path::new("o"));
        config.conditions.push(config.conditions[0]);
        assert!(matches!(config.validate(), Err(Error::Parameter(_))));
    }
}
