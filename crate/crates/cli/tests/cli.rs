//! Drives the installed binary end to end, the way a user would: synthetic
//! world on disk, then splits, runs, predictions, and scores, checking both
//! the artifacts and the exit-code contract (0 ok, 1 usage, 2 format, 3 run).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use canopy_core::forest::ForestHyperparams;
use canopy_core::pipeline::experiment::{
    BandSet, Condition, ExperimentConfig, FcnShape, ModelKind, ScheduleSource,
};
use canopy_core::raster::{write_grid, GeoTransform, Grid};
use canopy_core::splits::SplitSchedule;
use canopy_core::training::TrainConfig;

fn canopy(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canopy"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should spawn")
}

fn expect_code(out: &Output, code: i32) -> (String, String) {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        out.status.code(),
        Some(code),
        "exit {:?}, wanted {code}\n--- stdout ---\n{stdout}\n--- stderr ---\n{stderr}",
        out.status.code()
    );
    (stdout, stderr)
}

/// 4 generic-band sites; small enough that every downstream command is quick.
fn synth_world(dir: &Path, seed: &str) -> PathBuf {
    let world = dir.join("world");
    let out = canopy(
        dir,
        &[
            "--seed", seed, "--out", "world", "synth", "--n-sites", "4", "--size", "32",
            "--bands", "3",
        ],
    );
    expect_code(&out, 0);
    for i in 0..4 {
        let site = world.join(format!("synth_{i:03}"));
        assert!(site.join("labels.grd").is_file(), "missing {site:?}");
        assert!(site.join("imagery.grd").is_file());
    }
    world
}

fn tiny_config(world: &Path) -> ExperimentConfig {
    ExperimentConfig {
        data_dir: world.to_path_buf(),
        out_dir: PathBuf::new(),
        schedule: ScheduleSource::Generate {
            n_folds: 4,
            sizes: (2, 1, 1),
            seed: 3,
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
            max_epochs: 2,
            batch_size: 4,
            patch_size: 8,
            instances_per_epoch: 16,
            seed: 0,
            ..TrainConfig::default()
        },
        forest: ForestHyperparams {
            n_trees: 8,
            max_depth: 8,
            min_leaf: 1,
            bootstrap: true,
        },
        fcn: FcnShape {
            hidden_layers: 5,
            filters: 8,
            kernel: 3,
            leaky_slope: 0.01,
        },
        folds: Some(vec![0]),
        seed: 11,
    }
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = canopy(tmp.path(), &["synth"]);
    let (_, stderr) = expect_code(&out, 1);
    assert!(stderr.contains("--out"), "should name the missing flag: {stderr}");

    let out = canopy(tmp.path(), &["--jobs", "0", "--out", "w", "synth"]);
    expect_code(&out, 1);

    let out = canopy(tmp.path(), &["no-such-command"]);
    expect_code(&out, 1);

    let out = canopy(tmp.path(), &["--help"]);
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("canopy"));
}

#[test]
fn schedules_generate_and_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let world = synth_world(tmp.path(), "5");

    let out = canopy(
        tmp.path(),
        &["--seed", "5", "--out", "sched.json", "--jobs", "4", "split", "gen", "--data", "world"],
    );
    let (stdout, stderr) = expect_code(&out, 0);
    assert!(stdout.contains("4 folds"), "{stdout}");
    assert!(stderr.contains("clamped to 1"), "jobs note missing: {stderr}");

    let out = canopy(
        tmp.path(),
        &["split", "check", "--schedule", "sched.json", "--data", "world"],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("schedule ok"), "{stdout}");

    // A planted duplicate must flip the exit code and name the rule.
    let schedule = SplitSchedule::load(tmp.path().join("sched.json")).unwrap();
    let mut folds = schedule.folds().to_vec();
    folds[1].test[0] = folds[0].test[0].clone();
    let broken = SplitSchedule::from_folds(folds);
    broken.save(tmp.path().join("broken.json")).unwrap();
    let out = canopy(tmp.path(), &["split", "check", "--schedule", "broken.json"]);
    let (stdout, _) = expect_code(&out, 2);
    assert!(stdout.contains("violation"), "{stdout}");

    // Scheduled site missing on disk is only caught when --data is given.
    fs::remove_dir_all(world.join("synth_003")).unwrap();
    let out = canopy(
        tmp.path(),
        &["split", "check", "--schedule", "sched.json", "--data", "world"],
    );
    let (stdout, _) = expect_code(&out, 2);
    assert!(stdout.contains("missing"), "{stdout}");

    let out = canopy(tmp.path(), &["split", "check", "--schedule", "absent.json"]);
    expect_code(&out, 2);
}

#[test]
fn experiment_report_predict_evaluate_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let world = synth_world(tmp.path(), "9");
    let config = tiny_config(&world);
    fs::write(
        tmp.path().join("cfg.json"),
        serde_json::to_string_pretty(&config).unwrap(),
    )
    .unwrap();

    let out = canopy(
        tmp.path(),
        &["--config", "cfg.json", "--out", "results", "experiment", "run"],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("2 run(s) complete"), "{stdout}");
    let results = tmp.path().join("results");
    assert!(results.join("summary.csv").is_file());
    assert!(results.join("schedule.json").is_file());
    assert!(results.join("config.json").is_file());

    let out = canopy(tmp.path(), &["report", "--results", "results"]);
    expect_code(&out, 0);

    let runs: Vec<PathBuf> = fs::read_dir(results.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(runs.len(), 2);
    let fcn_run = runs
        .iter()
        .find(|p| p.join("model.ckp").is_file())
        .expect("one run should hold a checkpoint");
    let forest_run = runs
        .iter()
        .find(|p| p.join("model.json").is_file())
        .expect("one run should hold a forest");

    let site = world.join("synth_000");
    let out = canopy(
        tmp.path(),
        &[
            "--out", "pred_fcn.grd", "predict",
            "--model", fcn_run.join("model.ckp").to_str().unwrap(),
            "--site", site.to_str().unwrap(),
            "--stats", fcn_run.join("stats.json").to_str().unwrap(),
        ],
    );
    expect_code(&out, 0);
    let out = canopy(
        tmp.path(),
        &[
            "--out", "pred_rf.grd", "predict",
            "--model", forest_run.join("model.json").to_str().unwrap(),
            "--site", site.to_str().unwrap(),
            "--stats", forest_run.join("stats.json").to_str().unwrap(),
        ],
    );
    expect_code(&out, 0);

    // A forest needs stats from somewhere; without them the call is a usage error.
    let out = canopy(
        tmp.path(),
        &[
            "--out", "x.grd", "predict",
            "--model", forest_run.join("model.json").to_str().unwrap(),
            "--site", site.to_str().unwrap(),
        ],
    );
    expect_code(&out, 1);

    let labels = site.join("labels.grd");
    let out = canopy(
        tmp.path(),
        &[
            "--out", "eval.json", "evaluate",
            "--pred", "pred_fcn.grd",
            "--labels", labels.to_str().unwrap(),
        ],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("overall"), "{stdout}");
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("eval.json")).unwrap()).unwrap();
    assert!(record["rmse"].as_f64().unwrap().is_finite());
    assert!(record["n_pixels"].as_u64().unwrap() > 0);
}

#[test]
fn failed_runs_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let world = synth_world(tmp.path(), "2");
    // Generic band names cannot satisfy an rgb condition, so the run fails
    // after the sweep machinery is already committed to it.
    let mut config = tiny_config(&world);
    config.conditions = vec![Condition {
        model: ModelKind::Forest,
        bands: BandSet::Rgb,
    }];
    fs::write(
        tmp.path().join("cfg.json"),
        serde_json::to_string_pretty(&config).unwrap(),
    )
    .unwrap();
    let out = canopy(
        tmp.path(),
        &["--config", "cfg.json", "--out", "results", "experiment", "run"],
    );
    let (_, stderr) = expect_code(&out, 3);
    assert!(stderr.contains("failed"), "{stderr}");
    assert!(tmp.path().join("results/failures.json").is_file());
}

#[test]
fn tune_writes_grid_and_a_reusable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let world = synth_world(tmp.path(), "5");

    let out = canopy(
        tmp.path(),
        &[
            "--seed", "5", "--out", "tuned", "tune", "--data", "world",
            "--lrs", "1e-3,1e-4", "--wds", "1e-4", "--epochs", "1",
        ],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("best cell"), "{stdout}");
    let csv = fs::read_to_string(tmp.path().join("tuned/tune.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per cell:\n{csv}");

    // The tuned checkpoint carries its normalization, so predict needs no --stats.
    let site = world.join("synth_000");
    let out = canopy(
        tmp.path(),
        &[
            "--out", "pred.grd", "predict",
            "--model", "tuned/model.ckp",
            "--site", site.to_str().unwrap(),
            "--keep", "4",
            "--window", "16",
        ],
    );
    expect_code(&out, 0);

    let out = canopy(
        tmp.path(),
        &[
            "--out", "runs_f", "train", "--data", "world", "--model", "forest",
        ],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("rmse"), "{stdout}");
}

#[test]
fn malformed_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("junk.grd"), b"not a raster at all").unwrap();
    let out = canopy(
        tmp.path(),
        &["evaluate", "--pred", "junk.grd", "--labels", "junk.grd"],
    );
    expect_code(&out, 2);

    fs::write(tmp.path().join("junk.json"), b"{]").unwrap();
    let out = canopy(tmp.path(), &["split", "check", "--schedule", "junk.json"]);
    expect_code(&out, 2);
}

#[test]
fn ingest_prepares_a_site_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let t = GeoTransform::north_up(0.0, 0.0, 10.0);
    let raw: Vec<f32> = (0..64).map(|i| (i % 40) as f32 * 2.0).collect();
    write_grid(
        &Grid::new(8, 8, t, raw).unwrap(),
        tmp.path().join("raw.grd"),
    )
    .unwrap();

    let out = canopy(
        tmp.path(),
        &[
            "--out", "site", "ingest", "--labels", "raw.grd",
            "--coarsen", "2", "--percentile", "0.9",
        ],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("4x4"), "coarsened size: {stdout}");
    assert!(tmp.path().join("site/labels.grd").is_file());

    let out = canopy(
        tmp.path(),
        &[
            "--out", "site2", "ingest", "--labels", "raw.grd", "--resample", "sideways",
        ],
    );
    expect_code(&out, 1);
}

#[test]
fn strata_and_agb_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let t = GeoTransform::north_up(0.0, 0.0, 1.0);
    let heights: Vec<f32> = (0..36).map(|i| i as f32 * 0.9).collect();
    let labels = Grid::new(6, 6, t, heights).unwrap();
    write_grid(&labels, tmp.path().join("labels.grd")).unwrap();

    let out = canopy(
        tmp.path(),
        &["--out", "height.srt", "strata", "--labels", "labels.grd"],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("px"), "{stdout}");

    let out = canopy(
        tmp.path(),
        &[
            "--out", "eval.json", "evaluate", "--pred", "labels.grd",
            "--labels", "labels.grd", "--strata", "height.srt",
        ],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("overall: rmse 0.0000"), "{stdout}");

    fs::write(tmp.path().join("river.txt"), "polyline;river;0,-3 6,-3\n").unwrap();
    let out = canopy(
        tmp.path(),
        &[
            "--out", "dist.srt", "strata", "--vector", "river.txt", "--like", "labels.grd",
            "--edges", "0,2,inf",
        ],
    );
    expect_code(&out, 0);
    assert!(tmp.path().join("dist.srt").is_file());

    // Three sites with flat canopies make the plot regression exact.
    let preds = tmp.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    let mut csv = String::from("site,agb\n");
    for (site, h) in [("a", 2.0f32), ("b", 4.0), ("c", 6.0)] {
        let grid = Grid::new(2, 2, t, vec![h; 4]).unwrap();
        write_grid(&grid, preds.join(format!("{site}.grd"))).unwrap();
        csv.push_str(&format!("{site},{}\n", 10.0 * h + 1.0));
    }
    fs::write(tmp.path().join("ref.csv"), csv).unwrap();

    let out = canopy(
        tmp.path(),
        &[
            "--out", "agb.json", "agb", "--pred-dir", "preds", "--reference", "ref.csv",
        ],
    );
    let (stdout, _) = expect_code(&out, 0);
    assert!(stdout.contains("agb ~"), "{stdout}");
    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("agb.json")).unwrap()).unwrap();
    assert!((fit["slope"].as_f64().unwrap() - 10.0).abs() < 1e-9);
    assert!((fit["intercept"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((fit["r2"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}
