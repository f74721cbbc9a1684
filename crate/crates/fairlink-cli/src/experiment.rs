//! Whole-experiment orchestration for `fairlink benchmark`: generate the
//! train/val/test splits, train (or reuse) every learned method the config
//! asks for, then evaluate everything on the shared test set.
//!
//! The working directory is resumable: datasets and checkpoints found there
//! are reused when they match the config, so an interrupted run picks up
//! where it stopped instead of retraining.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use fairlink_core::checkpoint::{load_model, save_model};
use fairlink_core::compare::{
    run_comparison, train_method, Method, MethodBank, ResultRow, ResultsTable,
};
use fairlink_core::dataset::{generate_dataset, read_dataset, Dataset, KSpec};
use fairlink_core::fairness::SolverOptions;
use fairlink_core::gnn::{GnnModel, TrainSchedule};
use fairlink_core::pilot::collect_statistics;
use fairlink_core::rng::{derive, tag};
use fairlink_core::scene::{Scene, SceneConfig};
use fairlink_core::vision::DetectionNoise;

use crate::CliError;

/// User count specification: every sample the same, or drawn per sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KConfig {
    Fixed(usize),
    Range(usize, usize),
}

impl KConfig {
    fn to_spec(self) -> KSpec {
        match self {
            KConfig::Fixed(k) => KSpec::Fixed(k),
            KConfig::Range(lo, hi) => KSpec::Range(lo, hi),
        }
    }

    fn max(self) -> usize {
        self.to_spec().max()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene config JSON path; None picks a built-in by `desk_scale`.
    pub scene: Option<PathBuf>,
    /// Built-in scene choice: true = 3 APs with 2x2 arrays, false = the
    /// full 4-AP intersection with 4x4 arrays.
    pub desk_scale: bool,
    pub k: KConfig,
    pub n_u: Vec<usize>,
    pub methods: Vec<Method>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Divisor on the published hidden widths (1 = full size).
    pub width_divisor: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub lambda_ramp_frac: f64,
    pub penalty_start: f64,
    pub penalty_end: f64,
    /// Monte Carlo realizations behind LMMSE channel statistics.
    pub stats_realizations: usize,
    pub seed: u64,
    pub pixel_sigma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: None,
            desk_scale: true,
            k: KConfig::Fixed(4),
            n_u: vec![4, 16, 64],
            methods: vec![
                Method::ExhaustivePerfect,
                Method::GnnPerfectCsi,
                Method::GnnPilot,
                Method::GnnImage,
                Method::GnnCombined,
            ],
            train_samples: 20_000,
            val_samples: 500,
            test_samples: 200,
            width_divisor: 4,
            epochs: 20,
            batch_size: 64,
            learning_rate: 2e-4,
            patience: 6,
            lambda_ramp_frac: 0.5,
            penalty_start: 0.1,
            penalty_end: 1e-4,
            stats_realizations: 2000,
            seed: 0,
            pixel_sigma: 2.0,
        }
    }
}

impl ExperimentConfig {
    /// The published operating point: full scene, six users, full widths,
    /// full training set.
    pub fn at_paper_scale(mut self) -> Self {
        self.scene = None;
        self.desk_scale = false;
        self.k = KConfig::Fixed(6);
        self.n_u = vec![8, 16, 32, 64, 128];
        self.train_samples = 197_000;
        self.val_samples = 1_800;
        self.test_samples = 200;
        self.width_divisor = 1;
        self.epochs = 100;
        self
    }

    fn build_scene(&self) -> Result<Scene, CliError> {
        let config = match &self.scene {
            Some(p) => serde_json::from_str::<SceneConfig>(&std::fs::read_to_string(p)?)?,
            None if self.desk_scale => SceneConfig::urban_intersection_reduced(3, 2, 2),
            None => SceneConfig::urban_intersection(),
        };
        Ok(config.build()?)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.methods.is_empty() {
            return Err(CliError::BadArgs("config lists no methods".into()));
        }
        if self.n_u.is_empty() {
            return Err(CliError::BadArgs("config lists no pilot lengths".into()));
        }
        let k_max = self.k.max();
        for &n in &self.n_u {
            if n < k_max {
                return Err(CliError::BadArgs(format!(
                    "pilot length {n} is shorter than the maximum user count {k_max}; \
                     orthogonal pilots need n_u >= k"
                )));
            }
        }
        if let KConfig::Range(lo, hi) = self.k {
            if lo == 0 || lo > hi {
                return Err(CliError::BadArgs(format!("bad user range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Pilot-fed methods see different observations per pilot length, so their
/// models are trained once per n_u; the rest are shared across the table.
fn per_nu(method: Method) -> bool {
    matches!(method, Method::GnnPilot | Method::GnnCombined | Method::GnnDirect)
}

fn ckpt_path(dir: &Path, method: Method, n_u: Option<usize>) -> PathBuf {
    match n_u {
        Some(n) => dir.join(format!("{}-nu{}.ckpt", method.name(), n)),
        None => dir.join(format!("{}.ckpt", method.name())),
    }
}

/// Stable per-artifact index used to derive init and shuffle seeds.
fn slot_index(method: Method, n_u: Option<usize>) -> u64 {
    let rank = Method::ALL.iter().position(|m| *m == method).expect("known method") as u64;
    rank * 1_000_003 + n_u.unwrap_or(0) as u64
}

struct Orchestrator<'a> {
    config: &'a ExperimentConfig,
    scene: Scene,
    dir: PathBuf,
}

impl Orchestrator<'_> {
    fn dataset(&self, name: &str, n: usize, split: u64) -> Result<Dataset, CliError> {
        let path = self.dir.join(name);
        let seed = derive(self.config.seed, tag::SAMPLE, split);
        let spec = self.config.k.to_spec();
        if path.exists() {
            match read_dataset(&path) {
                Ok(ds)
                    if ds.header.scene_hash == self.scene.hash()
                        && ds.header.n_records == n
                        && ds.header.k_max == spec.max() =>
                {
                    println!("reusing {}", path.display());
                    return Ok(ds);
                }
                _ => println!("regenerating {} (stale or unreadable)", path.display()),
            }
        }
        let noise =
            DetectionNoise { pixel_sigma: self.config.pixel_sigma, ..DetectionNoise::default() };
        let started = Instant::now();
        let ds = generate_dataset(&self.scene, n, spec, &noise, seed, &path)?;
        println!(
            "generated {} ({} records) in {:.1} s",
            path.display(),
            n,
            started.elapsed().as_secs_f64()
        );
        Ok(ds)
    }

    /// A stored checkpoint is reused only when it matches the config's
    /// architecture and pilot length; anything else is retrained in place.
    fn reusable(&self, path: &Path, method: Method, n_u: Option<usize>) -> Option<GnnModel> {
        if !path.exists() {
            return None;
        }
        let model = match load_model(path) {
            Ok(m) => m,
            Err(_) => return None,
        };
        let kind_ok = Some(model.kind) == method.model_kind();
        let shape_ok = model.l == self.scene.n_aps()
            && model.m == self.scene.n_antennas()
            && model.k_max == self.config.k.max()
            && model.width_divisor == self.config.width_divisor;
        let nu_ok = n_u.map(|n| model.n_u == n).unwrap_or(true);
        (kind_ok && shape_ok && nu_ok).then_some(model)
    }

    fn train_or_load(
        &self,
        method: Method,
        n_u: Option<usize>,
        train: &Dataset,
        val: &Dataset,
        extractors: Option<(GnnModel, GnnModel)>,
    ) -> Result<GnnModel, CliError> {
        let path = ckpt_path(&self.dir, method, n_u);
        if let Some(model) = self.reusable(&path, method, n_u) {
            println!("reusing {}", path.display());
            return Ok(model);
        }
        let slot = slot_index(method, n_u);
        let schedule = TrainSchedule {
            epochs: self.config.epochs,
            batch_size: self.config.batch_size,
            learning_rate: self.config.learning_rate,
            lambda_ramp_frac: self.config.lambda_ramp_frac,
            penalty_start: self.config.penalty_start,
            penalty_end: self.config.penalty_end,
            patience: self.config.patience,
            seed: derive(self.config.seed, tag::SHUFFLE, slot),
        };
        let k_max = self.config.k.max();
        let varying = matches!(self.config.k, KConfig::Range(lo, hi) if lo != hi);
        let started = Instant::now();
        println!(
            "training {}{} ...",
            method.name(),
            n_u.map(|n| format!(" at n_u {n}")).unwrap_or_default()
        );
        let (model, report) = train_method(
            &self.scene,
            method,
            &train.records,
            &val.records,
            n_u.unwrap_or(k_max),
            self.config.width_divisor,
            varying,
            k_max,
            &schedule,
            derive(self.config.seed, tag::INIT, slot),
            extractors,
        )?;
        save_model(&path, &model)?;
        let report_path = path.with_extension("report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
        println!(
            "trained {} in {:.1} s: val min-rate {:.4} -> {:.4} (best epoch {} of {})",
            path.display(),
            started.elapsed().as_secs_f64(),
            report.initial_val,
            report.best_val,
            report.best_epoch,
            report.log.len()
        );
        Ok(model)
    }

    /// The extractor pair a combined model freezes: the image model plus the
    /// pilot model for the same pilot length, trained on demand.
    fn extractor_pair(
        &self,
        n_u: usize,
        train: &Dataset,
        val: &Dataset,
    ) -> Result<(GnnModel, GnnModel), CliError> {
        let image = self.train_or_load(Method::GnnImage, None, train, val, None)?;
        let pilot = self.train_or_load(Method::GnnPilot, Some(n_u), train, val, None)?;
        Ok((image, pilot))
    }
}

pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<ResultsTable, CliError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let scene = config.build_scene()?;
    println!(
        "scene: {} aps, {} antennas, hash {:#018x}",
        scene.n_aps(),
        scene.n_antennas(),
        scene.hash()
    );
    let orch = Orchestrator { config, scene, dir: out_dir.to_path_buf() };

    let any_learned = config.methods.iter().any(|m| m.is_learned());
    let test = orch.dataset("test.bin", config.test_samples, 3)?;
    let (train, val) = if any_learned {
        (
            Some(orch.dataset("train.bin", config.train_samples, 1)?),
            Some(orch.dataset("val.bin", config.val_samples, 2)?),
        )
    } else {
        (None, None)
    };

    let needs_stats = config
        .methods
        .iter()
        .any(|m| matches!(m, Method::ExhaustiveLmmse | Method::StrongestLmmse));
    let stats = if needs_stats {
        let k = match config.k {
            KConfig::Fixed(k) => k,
            KConfig::Range(..) => {
                return Err(CliError::BadArgs(
                    "estimation methods need a fixed user count".into(),
                ))
            }
        };
        println!(
            "collecting channel statistics ({} realizations) ...",
            config.stats_realizations
        );
        Some(collect_statistics(&orch.scene, k, config.stats_realizations, config.seed))
    } else {
        None
    };

    // Evaluation runs once per pilot length so per-n_u checkpoints can swap
    // through the bank; rows are regrouped method-major afterwards.
    let run_seed = derive(config.seed, tag::PILOT, 0);
    let mut rows: Vec<ResultRow> = Vec::new();
    for &n_u in &config.n_u {
        let mut bank = MethodBank::default();
        for &method in &config.methods {
            if !method.is_learned() {
                continue;
            }
            let (train, val) = (
                train.as_ref().expect("learned methods imply training data"),
                val.as_ref().expect("learned methods imply validation data"),
            );
            let nu_key = per_nu(method).then_some(n_u);
            let extractors = if method == Method::GnnCombined {
                Some(orch.extractor_pair(n_u, train, val)?)
            } else {
                None
            };
            let model = orch.train_or_load(method, nu_key, train, val, extractors)?;
            match method {
                Method::GnnPilot => bank.pilot = Some(model),
                Method::GnnImage => bank.image = Some(model),
                Method::GnnCombined => bank.combined = Some(model),
                Method::GnnDirect => bank.direct = Some(model),
                Method::GnnPerfectCsi => bank.perfect_csi = Some(model),
                Method::GnnPerfectLocation => bank.perfect_location = Some(model),
                _ => unreachable!("classical methods skipped above"),
            }
        }
        println!("evaluating at n_u {n_u} over {} samples ...", test.records.len());
        let table = run_comparison(
            &orch.scene,
            &test,
            stats.as_ref(),
            &bank,
            &config.methods,
            &[n_u],
            run_seed,
            &SolverOptions::default(),
        )?;
        rows.extend(table.rows);
    }

    let ordered = config
        .methods
        .iter()
        .flat_map(|m| {
            config.n_u.iter().map(|&n| {
                rows.iter()
                    .find(|r| r.method == m.name() && r.n_u == n)
                    .expect("every (method, n_u) cell was evaluated")
                    .clone()
            })
        })
        .collect();
    let table = ResultsTable { rows: ordered };
    let csv_path = out_dir.join("results.csv");
    std::fs::write(&csv_path, table.to_csv())?;
    println!("wrote {}", csv_path.display());
    Ok(table)
}
