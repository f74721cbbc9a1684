//! `fairlink`: scene/dataset generation, model training, and side-by-side
//! evaluation of association + beamforming methods, all driven by one seed.
//!
//! Every command exits 0 on success; on failure it prints a single JSON
//! object `{"error": "..."}` to stderr and exits nonzero.

mod experiment;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use thiserror::Error;

use fairlink_core::channel::steering_vector;
use fairlink_core::checkpoint::{load_model, save_model, CheckpointError};
use fairlink_core::compare::{
    array_response_heatmap, heatmap_to_csv, interpret_association, pilot_observation,
    run_comparison, train_method, write_pgm, CompareError, Method, MethodBank, ResultsTable,
};
use fairlink_core::dataset::{
    generate_dataset, read_dataset, Dataset, DatasetError, DatasetRecord, KSpec,
};
use fairlink_core::fairness::{exhaustive_association, FairnessError, SolverOptions};
use fairlink_core::gnn::{self, GnnError, GnnModel, ModelKind, SampleData, TrainSchedule};
use fairlink_core::pilot::collect_statistics;
use fairlink_core::scene::{Scene, SceneConfig, SceneError};
use fairlink_core::vision::DetectionNoise;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    BadArgs(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse failed: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
}

#[derive(Parser)]
#[command(name = "fairlink", version, about = "Simulation and optimization workbench \
for camera-assisted multi-AP downlink beamforming")]
struct Cli {
    /// Master seed; every random draw in the command derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize the built-in scene or write its config as JSON.
    Scene(SceneArgs),
    /// Generate a sample-set file (channels, detections, estimates).
    Dataset(DatasetArgs),
    /// Train one learned method on existing sample sets.
    Train(TrainArgs),
    /// Run a whole experiment (datasets, training, comparison) from a config file.
    Benchmark(BenchmarkArgs),
    /// Evaluate methods side by side on an existing sample set.
    Compare(CompareArgs),
    /// Export a beam's array response over (theta, phi) as CSV and PGM.
    Heatmap(HeatmapArgs),
    /// Explain a serving decision against plain nearest-AP assignment.
    Interpret(InterpretArgs),
}

#[derive(Args)]
struct SceneArgs {
    /// Write the scene config (JSON) here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep only the first N access points.
    #[arg(long)]
    aps: Option<usize>,
    /// Antenna rows per AP.
    #[arg(long)]
    rows: Option<usize>,
    /// Antenna columns per AP.
    #[arg(long)]
    cols: Option<usize>,
}

#[derive(Args)]
struct DatasetArgs {
    /// Scene config JSON; omitted = the built-in intersection.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: usize,
    /// Fixed user count per sample.
    #[arg(long)]
    users: Option<usize>,
    /// Varying user count: draw uniformly from lo,hi per sample.
    #[arg(long, value_delimiter = ',')]
    users_range: Option<Vec<usize>>,
    /// Detection pixel noise in px.
    #[arg(long, default_value_t = 2.0)]
    pixel_sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Learned method name, e.g. gnn-pilot or gnn-combined.
    #[arg(long)]
    method: String,
    /// Training sample set.
    #[arg(long)]
    train: PathBuf,
    /// Validation sample set.
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Pilot symbols per user for observation-based inputs.
    #[arg(long, default_value_t = 16)]
    n_u: usize,
    /// Divisor on the published hidden widths (4 = desk scale, 1 = full).
    #[arg(long, default_value_t = 4)]
    width_divisor: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda_ramp_frac: Option<f64>,
    #[arg(long)]
    penalty_start: Option<f64>,
    #[arg(long)]
    penalty_end: Option<f64>,
    /// Trained image extractor checkpoint (combined method only).
    #[arg(long)]
    image_model: Option<PathBuf>,
    /// Trained pilot extractor checkpoint (combined method only).
    #[arg(long)]
    pilot_model: Option<PathBuf>,
    /// Write the per-epoch training report here as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Experiment config JSON; omitted = desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Working directory for datasets, checkpoints, and results.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the config with full published-scale settings.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Test sample set.
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Comma-separated pilot lengths to evaluate at.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    n_u: Vec<usize>,
    /// Checkpoint for a learned method, as method=path; repeatable.
    #[arg(long = "model", value_parser = parse_model_slot)]
    models: Vec<(String, PathBuf)>,
    /// Monte Carlo realizations behind the channel statistics (LMMSE methods).
    #[arg(long, default_value_t = 2000)]
    stats_realizations: usize,
    /// Write the results table CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Steer an ideal beam at theta,phi (radians) instead of using a model.
    #[arg(long, value_delimiter = ',')]
    steer: Option<Vec<f64>>,
    /// Model checkpoint whose decided beam to plot.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sample set the record comes from (model mode).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Record index within the sample set.
    #[arg(long, default_value_t = 0)]
    record: usize,
    /// User whose serving beam to plot.
    #[arg(long, default_value_t = 0)]
    user: usize,
    /// Pilot length for observation-based model inputs.
    #[arg(long, default_value_t = 16)]
    n_u: usize,
    #[arg(long, default_value_t = 91)]
    theta_steps: usize,
    #[arg(long, default_value_t = 181)]
    phi_steps: usize,
    #[arg(long, default_value = "heatmap.csv")]
    out_csv: PathBuf,
    #[arg(long, default_value = "heatmap.pgm")]
    out_pgm: PathBuf,
}

#[derive(Args)]
struct InterpretArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    record: usize,
    /// exhaustive-perfect or any learned method (with --model).
    #[arg(long, default_value = "exhaustive-perfect")]
    method: String,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    n_u: usize,
    /// Write the report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_model_slot(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected method=path, got {s:?}"))?;
    if Method::parse(name).map(|m| m.is_learned()) != Some(true) {
        return Err(format!("{name:?} is not a learned method"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    let outcome = match cli.command {
        Command::Scene(a) => cmd_scene(a),
        Command::Dataset(a) => cmd_dataset(a, seed),
        Command::Train(a) => cmd_train(a, seed),
        Command::Benchmark(a) => cmd_benchmark(a, cli.seed),
        Command::Compare(a) => cmd_compare(a, seed),
        Command::Heatmap(a) => cmd_heatmap(a, seed),
        Command::Interpret(a) => cmd_interpret(a, seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn scene_config(args: &SceneArgs) -> SceneConfig {
    match (args.aps, args.rows, args.cols) {
        (None, None, None) => SceneConfig::urban_intersection(),
        (aps, rows, cols) => SceneConfig::urban_intersection_reduced(
            aps.unwrap_or(4),
            rows.unwrap_or(4),
            cols.unwrap_or(4),
        ),
    }
}

fn load_scene(path: Option<&Path>) -> Result<Scene, CliError> {
    let config = match path {
        Some(p) => serde_json::from_str::<SceneConfig>(&std::fs::read_to_string(p)?)?,
        None => SceneConfig::urban_intersection(),
    };
    Ok(config.build()?)
}

/// A sample set is only meaningful against the scene it was generated in.
fn check_scene_match(scene: &Scene, dataset: &Dataset, what: &str) -> Result<(), CliError> {
    if dataset.header.scene_hash != scene.hash() {
        return Err(CliError::BadArgs(format!(
            "{what} was generated under a different scene (hash {:#x}, scene is {:#x})",
            dataset.header.scene_hash,
            scene.hash()
        )));
    }
    Ok(())
}

fn cmd_scene(args: SceneArgs) -> Result<(), CliError> {
    let config = scene_config(&args);
    let scene = config.build()?;
    println!("scene hash {:#018x}", scene.hash());
    println!(
        "aps {}  array {}x{} ({} antennas)  users up to {}",
        scene.n_aps(),
        scene.array.rows,
        scene.array.cols,
        scene.n_antennas(),
        scene.ue.max_count
    );
    println!(
        "carrier {:.2} GHz  ap power {:.4} W  pilot power {:.5} W  noise {:.3e} W",
        scene.rf.carrier_hz / 1e9,
        scene.rf.ap_power_w,
        scene.rf.pilot_power_w,
        scene.rf.noise_w
    );
    for (i, ap) in scene.aps.iter().enumerate() {
        println!(
            "ap {i}: position ({:.1}, {:.1}, {:.1})  yaw {:.1} deg",
            ap.position.x,
            ap.position.y,
            ap.position.z,
            ap.yaw.to_degrees()
        );
    }
    if let Some(out) = args.out {
        std::fs::write(&out, serde_json::to_string_pretty(&config)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_dataset(args: DatasetArgs, seed: u64) -> Result<(), CliError> {
    let scene = load_scene(args.scene.as_deref())?;
    let k_spec = match (args.users, &args.users_range) {
        (Some(k), None) => KSpec::Fixed(k),
        (None, Some(r)) if r.len() == 2 => KSpec::Range(r[0], r[1]),
        (None, Some(_)) => {
            return Err(CliError::BadArgs("--users-range takes exactly lo,hi".into()))
        }
        _ => {
            return Err(CliError::BadArgs(
                "give exactly one of --users or --users-range".into(),
            ))
        }
    };
    let noise = DetectionNoise { pixel_sigma: args.pixel_sigma, ..DetectionNoise::default() };
    let dataset = generate_dataset(&scene, args.samples, k_spec, &noise, seed, &args.out)?;
    let bytes = std::fs::metadata(&args.out)?.len();
    println!(
        "wrote {}: {} records, k up to {}, {} aps x {} antennas, {} bytes",
        args.out.display(),
        dataset.header.n_records,
        dataset.header.k_max,
        dataset.header.l,
        dataset.header.m,
        bytes
    );
    Ok(())
}

fn learned_method(name: &str) -> Result<Method, CliError> {
    let method = Method::parse(name)
        .ok_or_else(|| CliError::BadArgs(format!("unknown method {name:?}")))?;
    if !method.is_learned() {
        return Err(CliError::BadArgs(format!("{name} is not a learned method")));
    }
    Ok(method)
}

fn schedule_from(args: &TrainArgs, seed: u64) -> TrainSchedule {
    let base = TrainSchedule::default();
    TrainSchedule {
        epochs: args.epochs.unwrap_or(base.epochs),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        learning_rate: args.learning_rate.unwrap_or(base.learning_rate),
        lambda_ramp_frac: args.lambda_ramp_frac.unwrap_or(base.lambda_ramp_frac),
        penalty_start: args.penalty_start.unwrap_or(base.penalty_start),
        penalty_end: args.penalty_end.unwrap_or(base.penalty_end),
        patience: args.patience.unwrap_or(base.patience),
        seed,
    }
}

fn cmd_train(args: TrainArgs, seed: u64) -> Result<(), CliError> {
    let scene = load_scene(args.scene.as_deref())?;
    let method = learned_method(&args.method)?;
    let train_set = read_dataset(&args.train)?;
    let val_set = read_dataset(&args.val)?;
    check_scene_match(&scene, &train_set, "training set")?;
    check_scene_match(&scene, &val_set, "validation set")?;
    let k_max = train_set.header.k_max;
    let varying = train_set.records.iter().any(|r| r.h.k != k_max);
    let extractors = match method {
        Method::GnnCombined => {
            let (img, pil) = match (&args.image_model, &args.pilot_model) {
                (Some(i), Some(p)) => (load_model(i)?, load_model(p)?),
                _ => {
                    return Err(CliError::BadArgs(
                        "gnn-combined needs --image-model and --pilot-model".into(),
                    ))
                }
            };
            Some((img, pil))
        }
        _ => None,
    };
    let schedule = schedule_from(&args, seed);
    let started = std::time::Instant::now();
    let (model, report) = train_method(
        &scene,
        method,
        &train_set.records,
        &val_set.records,
        args.n_u,
        args.width_divisor,
        varying,
        k_max,
        &schedule,
        seed,
        extractors,
    )?;
    save_model(&args.out, &model)?;
    println!(
        "trained {} in {:.1} s: val min-rate {:.4} -> {:.4} (best at epoch {} of {})",
        method.name(),
        started.elapsed().as_secs_f64(),
        report.initial_val,
        report.best_val,
        report.best_epoch,
        report.log.len()
    );
    println!("wrote {}", args.out.display());
    if let Some(path) = args.report {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs, cli_seed: Option<u64>) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => serde_json::from_str::<experiment::ExperimentConfig>(
            &std::fs::read_to_string(p)?,
        )?,
        None => experiment::ExperimentConfig::default(),
    };
    if args.paper_scale {
        config = config.at_paper_scale();
    }
    if let Some(seed) = cli_seed {
        config.seed = seed;
    }
    let table = experiment::run(&config, &args.out_dir)?;
    print!("{}", format_table(&table));
    Ok(())
}

fn bank_from_slots(slots: &[(String, PathBuf)]) -> Result<MethodBank, CliError> {
    let mut bank = MethodBank::default();
    for (name, path) in slots {
        let method = learned_method(name)?;
        let model = load_model(path)?;
        let expected = method.model_kind().expect("learned method");
        if model.kind != expected {
            return Err(CliError::BadArgs(format!(
                "{} expects a {:?} model, {} holds {:?}",
                name,
                expected,
                path.display(),
                model.kind
            )));
        }
        let slot = match method {
            Method::GnnPilot => &mut bank.pilot,
            Method::GnnImage => &mut bank.image,
            Method::GnnCombined => &mut bank.combined,
            Method::GnnDirect => &mut bank.direct,
            Method::GnnPerfectCsi => &mut bank.perfect_csi,
            Method::GnnPerfectLocation => &mut bank.perfect_location,
            _ => unreachable!("classical methods rejected above"),
        };
        *slot = Some(model);
    }
    Ok(bank)
}

fn format_table(table: &ResultsTable) -> String {
    let mut out = format!(
        "{:<22} {:>6} {:>12} {:>12} {:>8} {:>10}\n",
        "method", "n_u", "mean", "std", "samples", "wall [s]"
    );
    for r in &table.rows {
        out.push_str(&format!(
            "{:<22} {:>6} {:>12.6} {:>12.6} {:>8} {:>10.2}\n",
            r.method, r.n_u, r.mean_min_rate, r.std_min_rate, r.samples, r.wall_seconds
        ));
    }
    out
}

fn cmd_compare(args: CompareArgs, seed: u64) -> Result<(), CliError> {
    let scene = load_scene(args.scene.as_deref())?;
    let dataset = read_dataset(&args.dataset)?;
    check_scene_match(&scene, &dataset, "sample set")?;
    let methods = args
        .methods
        .iter()
        .map(|m| {
            Method::parse(m).ok_or_else(|| CliError::BadArgs(format!("unknown method {m:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let bank = bank_from_slots(&args.models)?;
    let needs_stats = methods
        .iter()
        .any(|m| matches!(m, Method::ExhaustiveLmmse | Method::StrongestLmmse));
    let stats = if needs_stats {
        let k = dataset.records.first().map(|r| r.h.k).unwrap_or(0);
        Some(collect_statistics(&scene, k, args.stats_realizations, seed))
    } else {
        None
    };
    let table = run_comparison(
        &scene,
        &dataset,
        stats.as_ref(),
        &bank,
        &methods,
        &args.n_u,
        seed,
        &SolverOptions::default(),
    )?;
    print!("{}", format_table(&table));
    if let Some(out) = args.out {
        std::fs::write(&out, table.to_csv())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

/// Model inputs for one record, chosen by what the model consumes. Models of
/// the pilot family are fed noisy observations here; feed-from-truth
/// variants are a comparison-loop concern, not an inspection one.
fn sample_for_model(
    scene: &Scene,
    model: &GnnModel,
    rec: &DatasetRecord,
    n_u: usize,
    seed: u64,
) -> Result<SampleData, CliError> {
    let pilot = match model.kind {
        ModelKind::Pilot | ModelKind::Combined | ModelKind::Direct => {
            let obs = pilot_observation(scene, rec, n_u, seed)
                .map_err(|e| CliError::BadArgs(e.to_string()))?;
            Some(gnn::pilot_features(&obs, model.pilot_rms))
        }
        ModelKind::Image => None,
    };
    let image = match model.kind {
        ModelKind::Image | ModelKind::Combined | ModelKind::Direct => {
            Some(gnn::image_features(&rec.estimates))
        }
        ModelKind::Pilot => None,
    };
    Ok(SampleData { image, pilot, h: rec.h.clone() })
}

fn cmd_heatmap(args: HeatmapArgs, seed: u64) -> Result<(), CliError> {
    let scene = load_scene(args.scene.as_deref())?;
    let v: Vec<Complex64> = match (&args.steer, &args.model) {
        (Some(dir), None) => {
            if dir.len() != 2 {
                return Err(CliError::BadArgs("--steer takes exactly theta,phi".into()));
            }
            steering_vector(
                dir[0],
                dir[1],
                scene.array.rows,
                scene.array.cols,
                scene.rf.element_spacing,
                scene.rf.wavelength,
            )
        }
        (None, Some(model_path)) => {
            let dataset_path = args.dataset.as_ref().ok_or_else(|| {
                CliError::BadArgs("model mode needs --dataset for the record".into())
            })?;
            let model = load_model(model_path)?;
            let dataset = read_dataset(dataset_path)?;
            check_scene_match(&scene, &dataset, "sample set")?;
            let rec = dataset.records.get(args.record).ok_or_else(|| {
                CliError::BadArgs(format!("record {} out of range", args.record))
            })?;
            if args.user >= rec.h.k {
                return Err(CliError::BadArgs(format!(
                    "user {} out of range (record has {})",
                    args.user, rec.h.k
                )));
            }
            let n_u = if model.n_u > 0 { model.n_u } else { args.n_u };
            let sample = sample_for_model(&scene, &model, rec, n_u, seed)?;
            let budget = vec![scene.rf.ap_power_w; scene.n_aps()];
            let (assoc, decision) = gnn::infer(&model, &sample, &budget, scene.rf.noise_w)?;
            let serving = assoc.serving[args.user];
            println!(
                "record {} user {}: served by ap {} (min rate {:.4})",
                args.record, args.user, serving, decision.min_rate
            );
            decision.beams.at(args.user, serving).to_vec()
        }
        _ => {
            return Err(CliError::BadArgs(
                "give exactly one of --steer theta,phi or --model".into(),
            ))
        }
    };
    let map = array_response_heatmap(
        &v,
        &scene.array,
        scene.rf.element_spacing,
        scene.rf.wavelength,
        args.theta_steps.max(2),
        args.phi_steps.max(2),
    );
    std::fs::write(&args.out_csv, heatmap_to_csv(&map))?;
    write_pgm(&args.out_pgm, &map)?;
    let (ti, pi, peak) = map.peak();
    println!(
        "peak {:.4} at theta {:.3} rad, phi {:.3} rad",
        peak, map.thetas[ti], map.phis[pi]
    );
    println!("wrote {} and {}", args.out_csv.display(), args.out_pgm.display());
    Ok(())
}

fn cmd_interpret(args: InterpretArgs, seed: u64) -> Result<(), CliError> {
    let scene = load_scene(args.scene.as_deref())?;
    let dataset = read_dataset(&args.dataset)?;
    check_scene_match(&scene, &dataset, "sample set")?;
    let rec = dataset
        .records
        .get(args.record)
        .ok_or_else(|| CliError::BadArgs(format!("record {} out of range", args.record)))?;
    let budget = vec![scene.rf.ap_power_w; scene.n_aps()];
    let method = Method::parse(&args.method)
        .ok_or_else(|| CliError::BadArgs(format!("unknown method {:?}", args.method)))?;
    let (assoc, decision) = match method {
        Method::ExhaustivePerfect => {
            exhaustive_association(&rec.h, &budget, scene.rf.noise_w, &SolverOptions::default())?
        }
        m if m.is_learned() => {
            let path = args.model.as_ref().ok_or_else(|| {
                CliError::BadArgs(format!("{} needs --model", m.name()))
            })?;
            let model = load_model(path)?;
            let n_u = if model.n_u > 0 { model.n_u } else { args.n_u };
            let sample = sample_for_model(&scene, &model, rec, n_u, seed)?;
            gnn::infer(&model, &sample, &budget, scene.rf.noise_w)?
        }
        m => {
            return Err(CliError::BadArgs(format!(
                "{} is not supported here; use exhaustive-perfect or a learned method",
                m.name()
            )))
        }
    };
    let report = interpret_association(&scene, &rec.positions, &assoc);
    println!(
        "record {} ({} users): min rate {:.4}, converged {}",
        args.record,
        rec.h.k,
        decision.min_rate,
        decision.converged
    );
    for row in &report.users {
        let mark = if row.flagged { "  <- not nearest" } else { "" };
        println!(
            "user {}: chosen ap {} at {:.2} m, nearest ap {} at {:.2} m, rate {:.4}{}",
            row.user,
            row.chosen,
            row.chosen_distance,
            row.nearest,
            row.nearest_distance,
            decision.rates[row.user],
            mark
        );
    }
    let loads: Vec<String> =
        report.loads.iter().enumerate().map(|(i, n)| format!("ap {i}: {n}")).collect();
    println!("loads: {}", loads.join(", "));
    if let Some(out) = args.out {
        std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
