//! `canopy`: the command line over the canopy-height pipeline.
//!
//! Every subcommand is a thin shell around library calls; all state flows
//! through files. Exit codes: 0 success, 1 usage, 2 bad data or format,
//! 3 run failure.

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use canopy_core::error::{Error, Result};
use canopy_core::evaluation::{
    agb_fit, evaluate_external, site_x, stratified_metrics, MetricsRecord,
};
use canopy_core::forest::{load_forest, predict_stack};
use canopy_core::geodata::{
    bin_continuous, distance_to_nearest, load_site, rasterize, read_strata, write_strata,
    StrataLayer, VectorLayer, DEFAULT_DISTANCE_EDGES, DEFAULT_HEIGHT_EDGES,
};
use canopy_core::nnet::{build_fcn, load_checkpoint, save_checkpoint};
use canopy_core::pipeline::experiment::{
    run_experiment, select_bands, BandSet, Condition, ExperimentConfig, ModelKind, ScheduleSource,
};
use canopy_core::pipeline::report::report;
use canopy_core::pipeline::synth::{generate_synthetic, SyntheticSpec};
use canopy_core::pipeline::{predict_site, prepared_stack, KeepRegion};
use canopy_core::raster::{
    clamp_labels, coarsen_percentile, fit_normalization, read_grid, read_stack, resample,
    write_grid, write_stack, ChannelStats, ResampleMethod, Stack, MAX_CANOPY_HEIGHT_M,
};
use canopy_core::seeding::{derive_seed, label};
use canopy_core::splits::{generate_schedule, validate_schedule, SplitSchedule};
use canopy_core::training::{grid_search, HyperGrid, PreparedSite, TrainConfig};

#[derive(Parser)]
#[command(
    name = "canopy",
    version,
    about = "Train, tune, and evaluate canopy-height models from multi-band rasters"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base seed for every derived random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration file (JSON, the ExperimentConfig fields).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory; each subcommand says which it expects.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker budget. Runs execute one at a time regardless so results
    /// stay bitwise reproducible; larger values are accepted and clamped.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

impl Global {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::parameter("this subcommand needs --out"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Prepare one site directory: clamp and coarsen labels, align imagery.
    Ingest(IngestArgs),
    /// Generate or check a site-stratified split schedule.
    #[command(subcommand)]
    Split(SplitCommand),
    /// Generate a synthetic benchmark world into --out.
    Synth(SynthArgs),
    /// Train one model on one fold and store the run directory.
    Train(TrainArgs),
    /// Grid-search learning rate and weight decay on one fold.
    Tune(TuneArgs),
    /// Predict a height map from a stored model.
    Predict(PredictArgs),
    /// Score a prediction raster against labels.
    Evaluate(EvaluateArgs),
    /// Build a stratification layer from labels or from vector data.
    Strata(StrataArgs),
    /// Calibrate the plot-level biomass regression from height maps.
    Agb(AgbArgs),
    /// Execute every run of an experiment config.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Render summary tables from a completed results directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Label raster (GRD1) to clamp and coarsen.
    #[arg(long)]
    labels: PathBuf,
    /// Imagery stack (GRD1) to resample onto the prepared label grid.
    #[arg(long)]
    imagery: Option<PathBuf>,
    /// Heights above this are treated as sensor artifacts and masked.
    #[arg(long, default_value_t = MAX_CANOPY_HEIGHT_M)]
    max_height: f32,
    #[arg(long, default_value_t = 0.0)]
    min_height: f32,
    /// Block edge for percentile coarsening; 1 keeps the resolution.
    #[arg(long, default_value_t = 1)]
    coarsen: usize,
    #[arg(long, default_value_t = 0.9)]
    percentile: f64,
    /// Resampling for the imagery: nearest, bilinear, or bicubic.
    #[arg(long, default_value = "bicubic")]
    resample: String,
}

#[derive(Subcommand)]
enum SplitCommand {
    /// Build a schedule over the sites in a data directory.
    Gen(SplitGenArgs),
    /// Validate a stored schedule file.
    Check(SplitCheckArgs),
}

#[derive(Args)]
struct SplitGenArgs {
    /// Directory of site subdirectories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    /// train,val,test sizes; computed from the site count when omitted.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    sizes: Option<Vec<usize>>,
}

#[derive(Args)]
struct SplitCheckArgs {
    #[arg(long)]
    schedule: PathBuf,
    /// Also require every scheduled site to exist under this directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n_sites: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 13)]
    bands: usize,
    /// λ: weight of the local-texture confound; 0 disables it.
    #[arg(long)]
    texture: Option<f64>,
    /// Per-band sensor noise, in band units.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_model, default_value = "fcn")]
    model: ModelKind,
    #[arg(long, value_parser = parse_bands, default_value = "s2_all")]
    bands: BandSet,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Schedule file; omitted means generate one from the data directory.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_bands, default_value = "s2_all")]
    bands: BandSet,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    /// Learning-rate grid; defaults to the full four-point grid.
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    /// Weight-decay grid; defaults to the full four-point grid.
    #[arg(long, value_delimiter = ',')]
    wds: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Model file: an FCN checkpoint or a forest JSON.
    #[arg(long)]
    model: PathBuf,
    /// Imagery stack to predict from.
    #[arg(long, conflicts_with = "site")]
    imagery: Option<PathBuf>,
    /// Site directory; band selection applies only in this mode.
    #[arg(long)]
    site: Option<PathBuf>,
    #[arg(long, value_parser = parse_bands, default_value = "s2_all")]
    bands: BandSet,
    /// Normalization stats JSON when the model file carries none.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    window: usize,
    /// Keep region per window: "full" or an inner edge such as 4.
    #[arg(long, default_value = "full")]
    keep: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Strata raster for a per-stratum breakdown.
    #[arg(long)]
    strata: Option<PathBuf>,
    /// Alignment method when the prediction grid differs: nearest,
    /// bilinear, or bicubic.
    #[arg(long, default_value = "nearest")]
    resample: String,
}

#[derive(Args)]
struct StrataArgs {
    /// Height raster to bin with --edges.
    #[arg(long, conflicts_with = "vector")]
    labels: Option<PathBuf>,
    /// Vector layer text file; pixels are binned by distance to it.
    #[arg(long, requires = "like")]
    vector: Option<PathBuf>,
    /// Raster whose georeference the vector mode rasterizes onto.
    #[arg(long)]
    like: Option<PathBuf>,
    /// Bin edges; "inf" is accepted for the last edge.
    #[arg(long, value_delimiter = ',')]
    edges: Option<Vec<f64>>,
}

#[derive(Args)]
struct AgbArgs {
    /// Directory of predicted height rasters, one <site>.grd per site.
    #[arg(long)]
    pred_dir: PathBuf,
    /// CSV with a header and rows of site,agb.
    #[arg(long)]
    reference: PathBuf,
    /// Canopy-cover height threshold in meters.
    #[arg(long, default_value_t = 1.5)]
    threshold: f32,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run every (fold x condition x trial) cell of the config.
    Run,
}

#[derive(Args)]
struct ReportArgs {
    /// Results directory written by `experiment run`.
    #[arg(long)]
    results: PathBuf,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "fcn" => Ok(ModelKind::Fcn),
        "forest" => Ok(ModelKind::Forest),
        other => Err(format!("unknown model {other:?} (fcn, forest)")),
    }
}

fn parse_bands(s: &str) -> std::result::Result<BandSet, String> {
    match s {
        "rgb" => Ok(BandSet::Rgb),
        "rgb_nir" => Ok(BandSet::RgbNir),
        "s2_all" => Ok(BandSet::S2All),
        "s2_all_latlon" => Ok(BandSet::S2AllLatlon),
        other => Err(format!(
            "unknown band set {other:?} (rgb, rgb_nir, s2_all, s2_all_latlon)"
        )),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) => 1,
        Error::Shape(_)
        | Error::Format(_)
        | Error::Truncation(_)
        | Error::Domain(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => 2,
        Error::State(_) | Error::Run(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.exit_code() == 0 => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("canopy: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.jobs == 0 {
        return Err(Error::parameter("--jobs must be at least 1"));
    }
    if cli.global.jobs > 1 {
        eprintln!(
            "note: runs execute one at a time so outputs are bitwise reproducible; \
             --jobs {} is clamped to 1",
            cli.global.jobs
        );
    }
    match &cli.command {
        Command::Ingest(args) => ingest(&cli.global, args),
        Command::Split(SplitCommand::Gen(args)) => split_gen(&cli.global, args),
        Command::Split(SplitCommand::Check(args)) => split_check(args),
        Command::Synth(args) => synth(&cli.global, args),
        Command::Train(args) => train_cmd(&cli.global, args),
        Command::Tune(args) => tune(&cli.global, args),
        Command::Predict(args) => predict(&cli.global, args),
        Command::Evaluate(args) => evaluate(&cli.global, args),
        Command::Strata(args) => strata(&cli.global, args),
        Command::Agb(args) => agb(&cli.global, args),
        Command::Experiment(ExperimentCommand::Run) => experiment_run(&cli.global),
        Command::Report(args) => report_cmd(args),
    }
}

fn ingest(global: &Global, args: &IngestArgs) -> Result<()> {
    let out = global.out()?;
    fs::create_dir_all(out)?;
    let raw = read_grid(&args.labels)?;
    let clamped = clamp_labels(&raw, args.max_height, args.min_height)?;
    let labels = if args.coarsen > 1 {
        coarsen_percentile(&clamped, args.coarsen, args.percentile)?
    } else {
        clamped
    };
    write_grid(&labels, out.join("labels.grd"))?;
    println!(
        "labels: {}x{} at {:.1} m",
        labels.width(),
        labels.height(),
        labels.transform().pixel_w
    );
    if let Some(imagery) = &args.imagery {
        let method: ResampleMethod = args.resample.parse()?;
        let stack = read_stack(imagery)?;
        let mut bands = Vec::with_capacity(stack.band_count());
        for i in 0..stack.band_count() {
            bands.push(resample(
                stack.band(i),
                labels.transform(),
                labels.width(),
                labels.height(),
                method,
            )?);
        }
        let aligned = Stack::new(bands, stack.names().to_vec())?;
        write_stack(&aligned, out.join("imagery.grd"))?;
        println!("imagery: {} bands aligned", aligned.band_count());
    }
    Ok(())
}

/// Site ids are the names of subdirectories holding a labels raster.
fn list_site_ids(data: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(data)? {
        let entry = entry?;
        if entry.path().join("labels.grd").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if ids.is_empty() {
        return Err(Error::domain(format!(
            "no site directories under {}",
            data.display()
        )));
    }
    ids.sort();
    Ok(ids)
}

fn block_sizes(n_sites: usize, folds: usize) -> Result<(usize, usize, usize)> {
    if folds == 0 || n_sites % folds != 0 {
        return Err(Error::parameter(format!(
            "{n_sites} sites cannot be divided into {folds} equal blocks"
        )));
    }
    let block = n_sites / folds;
    Ok((n_sites - 2 * block, block, block))
}

fn split_gen(global: &Global, args: &SplitGenArgs) -> Result<()> {
    let ids = list_site_ids(&args.data)?;
    let sizes = match &args.sizes {
        Some(v) => (v[0], v[1], v[2]),
        None => block_sizes(ids.len(), args.folds)?,
    };
    let schedule = generate_schedule(&ids, args.folds, sizes, global.seed())?;
    let out = global.out()?;
    schedule.save(out)?;
    println!(
        "{} sites -> {} folds (train {}, val {}, test {}) at {}",
        ids.len(),
        schedule.n_folds(),
        sizes.0,
        sizes.1,
        sizes.2,
        out.display()
    );
    Ok(())
}

fn split_check(args: &SplitCheckArgs) -> Result<()> {
    let schedule = SplitSchedule::load(&args.schedule)?;
    let mut violations = validate_schedule(&schedule);
    if let Some(data) = &args.data {
        let ids = list_site_ids(data)?;
        for site in schedule.site_universe() {
            if !ids.contains(&site) {
                violations.push(canopy_core::splits::Violation {
                    fold: None,
                    site: Some(site.clone()),
                    rule: "scheduled site missing from the data directory".into(),
                });
            }
        }
    }
    if violations.is_empty() {
        println!(
            "schedule ok: {} folds over {} sites",
            schedule.n_folds(),
            schedule.site_universe().len()
        );
        return Ok(());
    }
    for v in &violations {
        println!("violation: {v}");
    }
    Err(Error::format(format!(
        "schedule fails {} check(s)",
        violations.len()
    )))
}

fn synth(global: &Global, args: &SynthArgs) -> Result<()> {
    let out = global.out()?;
    let mut spec = SyntheticSpec {
        n_sites: args.n_sites,
        size: args.size,
        band_count: args.bands,
        ..SyntheticSpec::default()
    };
    if let Some(t) = args.texture {
        spec.texture_strength = t;
    }
    if let Some(n) = args.noise {
        spec.noise_sd = n;
    }
    let sites = generate_synthetic(&spec, global.seed())?;
    for site in &sites {
        canopy_core::geodata::save_site(site, out.join(&site.id))?;
    }
    println!(
        "{} sites of {}x{}x{} under {}",
        sites.len(),
        args.bands,
        args.size,
        args.size,
        out.display()
    );
    Ok(())
}

/// Shared assembly for train/tune/experiment: the config file when given,
/// defaults otherwise, with command-line overrides applied on top.
fn base_config(global: &Global, data: Option<&Path>) -> Result<ExperimentConfig> {
    let mut config = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            schedule: ScheduleSource::Generate {
                n_folds: 4,
                sizes: (0, 0, 0),
                seed: 0,
            },
            conditions: vec![Condition {
                model: ModelKind::Fcn,
                bands: BandSet::S2All,
            }],
            budget: None,
            train: TrainConfig::default(),
            forest: Default::default(),
            fcn: Default::default(),
            folds: None,
            seed: 0,
        },
    };
    if let Some(data) = data {
        config.data_dir = data.to_path_buf();
    }
    if config.data_dir.as_os_str().is_empty() {
        return Err(Error::parameter("no data directory: pass --data or a config file"));
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn schedule_source(
    config: &ExperimentConfig,
    file: Option<&Path>,
    folds: usize,
    data: &Path,
) -> Result<ScheduleSource> {
    if let Some(path) = file {
        return Ok(ScheduleSource::File {
            path: path.to_path_buf(),
        });
    }
    if let ScheduleSource::Generate { sizes, .. } = config.schedule {
        if sizes != (0, 0, 0) {
            return Ok(config.schedule.clone());
        }
    } else {
        return Ok(config.schedule.clone());
    }
    let ids = list_site_ids(data)?;
    Ok(ScheduleSource::Generate {
        n_folds: folds,
        sizes: block_sizes(ids.len(), folds)?,
        seed: derive_seed(config.seed, &[label("schedule")]),
    })
}

fn print_results(results: &[canopy_core::pipeline::experiment::RunResult]) {
    for r in results {
        println!(
            "{}: rmse {:.4} mae {:.4} bias {:+.4} r2 {} over {} px ({:.1}s)",
            r.run_id,
            r.metrics.rmse,
            r.metrics.mae,
            r.metrics.bias,
            r.metrics
                .r2
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
            r.metrics.n_pixels,
            r.wall_seconds
        );
    }
}

fn finish_experiment(outcome: canopy_core::pipeline::experiment::ExperimentOutcome) -> Result<()> {
    print_results(&outcome.results);
    if outcome.failures.is_empty() {
        println!("{} run(s) complete in {}", outcome.results.len(), outcome.out_dir.display());
        return Ok(());
    }
    for f in &outcome.failures {
        eprintln!("failed {}: {}", f.run_id, f.message);
    }
    Err(Error::run(format!(
        "{} of {} run(s) failed",
        outcome.failures.len(),
        outcome.failures.len() + outcome.results.len()
    )))
}

fn train_cmd(global: &Global, args: &TrainArgs) -> Result<()> {
    let mut config = base_config(global, args.data.as_deref())?;
    config.out_dir = global.out()?.to_path_buf();
    config.schedule = schedule_source(
        &config,
        args.schedule.as_deref(),
        args.folds,
        &config.data_dir,
    )?;
    config.conditions = vec![Condition {
        model: args.model,
        bands: args.bands,
    }];
    config.budget = None;
    config.folds = Some(vec![args.fold]);
    if let Some(e) = args.epochs {
        config.train.max_epochs = e;
    }
    if let Some(lr) = args.lr {
        config.train.learning_rate = lr;
    }
    if let Some(wd) = args.wd {
        config.train.weight_decay = wd;
    }
    finish_experiment(run_experiment(&config)?)
}

fn tune(global: &Global, args: &TuneArgs) -> Result<()> {
    let out = global.out()?;
    let mut config = base_config(global, args.data.as_deref())?;
    config.schedule = schedule_source(
        &config,
        args.schedule.as_deref(),
        args.folds,
        &config.data_dir,
    )?;
    if let Some(e) = args.epochs {
        config.train.max_epochs = e;
    }
    let sites = canopy_core::geodata::load_sites(&config.data_dir)?;
    let schedule = match &config.schedule {
        ScheduleSource::Generate {
            n_folds,
            sizes,
            seed,
        } => {
            let ids: Vec<String> = sites.iter().map(|s| s.id.clone()).collect();
            generate_schedule(&ids, *n_folds, *sizes, *seed)?
        }
        ScheduleSource::File { path } => SplitSchedule::load(path)?,
    };
    let fold = schedule.fold(args.fold)?;
    let pick = |ids: &[String]| -> Result<Vec<&canopy_core::geodata::Site>> {
        ids.iter()
            .map(|id| {
                sites
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::domain(format!("scheduled site {id:?} not in data")))
            })
            .collect()
    };
    let train_sites = pick(&fold.train)?;
    let val_sites = pick(&fold.val)?;
    let stacks: Vec<Stack> = train_sites
        .iter()
        .map(|s| select_bands(s, args.bands))
        .collect::<Result<_>>()?;
    let refs: Vec<&Stack> = stacks.iter().collect();
    let stats = fit_normalization(&refs)?;
    let prepare = |list: &[&canopy_core::geodata::Site]| -> Result<Vec<PreparedSite>> {
        list.iter()
            .map(|s| {
                let stack = select_bands(s, args.bands)?;
                PreparedSite::from_rasters(s.id.clone(), &stack, &stats, &s.labels)
            })
            .collect()
    };
    let tr = prepare(&train_sites)?;
    let va = prepare(&val_sites)?;

    let mut grid = HyperGrid::default();
    if let Some(lrs) = &args.lrs {
        grid.learning_rates = lrs.clone();
    }
    if let Some(wds) = &args.wds {
        grid.weight_decays = wds.clone();
    }
    let mut base = config.train.clone();
    base.seed = derive_seed(config.seed, &[label("tune"), args.fold as u64]);
    let channels = tr[0].x.dim().0;
    let shape = config.fcn.clone();
    let outcome = grid_search(|s| build_fcn(&shape.spec(channels), s), &tr, &va, &grid, &base)?;

    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("tune.csv"))?;
    w.write_record(["learning_rate", "weight_decay", "best_epoch", "best_val_mse", "diverged"])?;
    for cell in &outcome.cells {
        w.write_record([
            format!("{:e}", cell.learning_rate),
            format!("{:e}", cell.weight_decay),
            cell.best_epoch.map_or(String::new(), |e| e.to_string()),
            cell.best_val_mse.map_or(String::new(), |v| format!("{v}")),
            cell.diverged.to_string(),
        ])?;
    }
    w.flush()?;
    let mut checkpoint = outcome.best.checkpoint;
    checkpoint.stats = Some(stats);
    save_checkpoint(&checkpoint, out.join("model.ckp"))?;
    let best = &outcome.cells[outcome.best_cell];
    println!(
        "best cell: lr {:e} wd {:e} val mse {:.6} at epoch {}",
        best.learning_rate,
        best.weight_decay,
        best.best_val_mse.unwrap_or(f64::NAN),
        best.best_epoch.map_or(-1i64, |e| e as i64),
    );
    Ok(())
}

fn load_stats(path: Option<&Path>) -> Result<Option<ChannelStats>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let stats = serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("bad stats file: {e}")))?;
            Ok(Some(stats))
        }
    }
}

fn predict(global: &Global, args: &PredictArgs) -> Result<()> {
    let out = global.out()?;
    let stack = match (&args.site, &args.imagery) {
        (Some(dir), None) => {
            let site = load_site(dir)?;
            select_bands(&site, args.bands)?
        }
        (None, Some(path)) => read_stack(path)?,
        _ => return Err(Error::parameter("pass exactly one of --site or --imagery")),
    };
    let keep = match args.keep.as_str() {
        "full" => KeepRegion::Full,
        n => KeepRegion::Inner(
            n.parse()
                .map_err(|_| Error::parameter(format!("bad keep region {n:?}")))?,
        ),
    };

    let mut magic = [0u8; 4];
    fs::File::open(&args.model)?.read_exact(&mut magic)?;
    let pred = if &magic == b"CKP1" {
        let checkpoint = load_checkpoint(&args.model)?;
        let stats = match load_stats(args.stats.as_deref())? {
            Some(s) => s,
            None => checkpoint.stats.clone().ok_or_else(|| {
                Error::parameter("checkpoint carries no normalization stats; pass --stats")
            })?,
        };
        let model = checkpoint.to_model()?;
        predict_site(&model, &stack, &stats, args.window, keep)?
    } else {
        let model = load_forest(&args.model)?;
        let stats = load_stats(args.stats.as_deref())?
            .ok_or_else(|| Error::parameter("forest prediction needs --stats"))?;
        predict_stack(&model, &prepared_stack(&stack, &stats)?)?
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_grid(&pred, out)?;
    println!("{}x{} prediction at {}", pred.width(), pred.height(), out.display());
    Ok(())
}

fn evaluate(global: &Global, args: &EvaluateArgs) -> Result<()> {
    let pred = read_grid(&args.pred)?;
    let labels = read_grid(&args.labels)?;
    let print_record = |name: &str, m: &MetricsRecord| {
        println!(
            "{name}: rmse {:.4} mae {:.4} bias {:+.4} median {:+.4} r2 {} n {}",
            m.rmse,
            m.mae,
            m.bias,
            m.median_error,
            m.r2.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            m.n_pixels
        );
    };
    let json = match &args.strata {
        Some(path) => {
            let layer = read_strata(path)?;
            let result = stratified_metrics(&pred, &labels, &layer)?;
            print_record("overall", &result.overall);
            for s in &result.strata {
                match &s.metrics {
                    Some(m) => print_record(&format!("  {}", s.name), m),
                    None => println!("  {}: empty", s.name),
                }
            }
            serde_json::to_string_pretty(&result)?
        }
        None => {
            let method: ResampleMethod = args.resample.parse()?;
            let record = evaluate_external(&pred, &labels, method)?;
            print_record("overall", &record);
            serde_json::to_string_pretty(&record)?
        }
    };
    if let Some(out) = &global.out {
        fs::write(out, json)?;
    }
    Ok(())
}

fn strata(global: &Global, args: &StrataArgs) -> Result<()> {
    let out = global.out()?;
    let layer: StrataLayer = match (&args.labels, &args.vector) {
        (Some(path), None) => {
            let grid = read_grid(path)?;
            let edges = args
                .edges
                .clone()
                .unwrap_or_else(|| DEFAULT_HEIGHT_EDGES.to_vec());
            bin_continuous(&grid, &edges)?
        }
        (None, Some(path)) => {
            let like = read_grid(args.like.as_ref().expect("clap enforces --like"))?;
            let text = fs::read_to_string(path)?;
            let vector = VectorLayer::parse_text(&text)?;
            let mask = rasterize(&vector, like.transform(), like.width(), like.height())?;
            let distance = distance_to_nearest(&mask, like.transform().pixel_w.abs())?;
            let edges = args
                .edges
                .clone()
                .unwrap_or_else(|| DEFAULT_DISTANCE_EDGES.to_vec());
            bin_continuous(&distance, &edges)?
        }
        _ => return Err(Error::parameter("pass exactly one of --labels or --vector")),
    };
    write_strata(&layer, out)?;
    let mut counts: std::collections::BTreeMap<i32, usize> = std::collections::BTreeMap::new();
    for &c in layer.codes() {
        *counts.entry(c).or_default() += 1;
    }
    for (code, name) in layer.legend() {
        println!(
            "{code} {name}: {} px",
            counts.get(code).copied().unwrap_or(0)
        );
    }
    Ok(())
}

fn agb(global: &Global, args: &AgbArgs) -> Result<()> {
    let mut reader = csv::Reader::from_path(&args.reference)?;
    let headers = reader.headers()?.clone();
    let site_col = headers.iter().position(|h| h == "site");
    let agb_col = headers.iter().position(|h| h == "agb");
    let (Some(site_col), Some(agb_col)) = (site_col, agb_col) else {
        return Err(Error::format("reference CSV needs site and agb columns"));
    };
    let mut x = Vec::new();
    let mut reference = Vec::new();
    let mut sites = Vec::new();
    for row in reader.records() {
        let row = row?;
        let site = row
            .get(site_col)
            .ok_or_else(|| Error::format("short reference row"))?;
        let value: f64 = row
            .get(agb_col)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(format!("bad agb value for site {site:?}")))?;
        let grid_path = args.pred_dir.join(format!("{site}.grd"));
        let heights = read_grid(&grid_path)?;
        x.push(site_x(&heights, args.threshold)?);
        reference.push(value);
        sites.push(site.to_string());
    }
    let fit = agb_fit(&x, &reference)?;
    for (site, xi) in sites.iter().zip(&fit.x) {
        println!("{site}: X {xi:.4}");
    }
    println!(
        "agb ~ {:.4} * X + {:.4} (r2 {:.4}, {} sites)",
        fit.slope,
        fit.intercept,
        fit.r2,
        fit.x.len()
    );
    if let Some(out) = &global.out {
        fs::write(out, serde_json::to_string_pretty(&fit)?)?;
    }
    Ok(())
}

fn experiment_run(global: &Global) -> Result<()> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::parameter("experiment run needs --config"))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(out) = &global.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    finish_experiment(run_experiment(&config)?)
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let paths = report(&args.results)?;
    for file in &paths.files {
        println!("{}", file.display());
    }
    println!("report under {}", paths.report_dir.display());
    Ok(())
}
