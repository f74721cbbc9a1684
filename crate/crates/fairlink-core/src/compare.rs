//! Side-by-side evaluation of association and beamforming methods over a
//! shared sample set, plus the two inspection tools: beam pattern export
//! and association-vs-distance reporting.
//!
//! Every method sees the same records, and for a fixed run seed the pilot
//! noise drawn for a record is identical across methods, so differences in
//! the table come from the methods themselves rather than from noise draws.
//! Rates are always scored on the record's true channel; methods that work
//! from estimates only use them to pick the association and beams.

use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{array_response, ChannelTensor};
use crate::dataset::{Dataset, DatasetRecord};
use crate::fairness::{
    self, exhaustive_association, maxmin_beamforming, strongest_channel_association,
    Association, FairnessError, SolverOptions,
};
use crate::geom::Vec3;
use crate::gnn::{self, GnnError, GnnModel, ModelKind, SampleData};
use crate::parallel::map_indexed;
use crate::pilot::{lmmse_estimate, make_pilots, observe_pilots, ChannelStatistics, PilotError};
use crate::rng::{derive, tag};
use crate::scene::{ArrayGeometry, Scene};

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("method {0} needs a trained model but none was supplied")]
    MissingModel(&'static str),
    #[error("{0}")]
    BadInput(String),
    #[error(transparent)]
    Pilot(#[from] PilotError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error("table parse failed: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The compared strategies. Classical ones run a solver per record; learned
/// ones run a trained model from the [`MethodBank`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExhaustivePerfect,
    ExhaustiveLmmse,
    StrongestLmmse,
    GnnPilot,
    GnnImage,
    GnnCombined,
    GnnDirect,
    GnnPerfectCsi,
    GnnPerfectLocation,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::ExhaustivePerfect,
        Method::ExhaustiveLmmse,
        Method::StrongestLmmse,
        Method::GnnPilot,
        Method::GnnImage,
        Method::GnnCombined,
        Method::GnnDirect,
        Method::GnnPerfectCsi,
        Method::GnnPerfectLocation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::ExhaustivePerfect => "exhaustive-perfect",
            Method::ExhaustiveLmmse => "exhaustive-lmmse",
            Method::StrongestLmmse => "strongest-lmmse",
            Method::GnnPilot => "gnn-pilot",
            Method::GnnImage => "gnn-image",
            Method::GnnCombined => "gnn-combined",
            Method::GnnDirect => "gnn-direct",
            Method::GnnPerfectCsi => "gnn-perfect-csi",
            Method::GnnPerfectLocation => "gnn-perfect-location",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_learned(&self) -> bool {
        !matches!(
            self,
            Method::ExhaustivePerfect | Method::ExhaustiveLmmse | Method::StrongestLmmse
        )
    }

    fn needs_lmmse(&self) -> bool {
        matches!(self, Method::ExhaustiveLmmse | Method::StrongestLmmse)
    }

    fn needs_pilot_observation(&self) -> bool {
        matches!(
            self,
            Method::ExhaustiveLmmse
                | Method::StrongestLmmse
                | Method::GnnPilot
                | Method::GnnCombined
                | Method::GnnDirect
        )
    }

    /// Network family a learned method trains, None for classical ones.
    pub fn model_kind(&self) -> Option<ModelKind> {
        match self {
            Method::GnnPilot | Method::GnnPerfectCsi => Some(ModelKind::Pilot),
            Method::GnnImage | Method::GnnPerfectLocation => Some(ModelKind::Image),
            Method::GnnCombined => Some(ModelKind::Combined),
            Method::GnnDirect => Some(ModelKind::Direct),
            _ => None,
        }
    }
}

/// Trained models for the learned methods; leave a slot empty when that
/// method is not being compared.
#[derive(Debug, Default)]
pub struct MethodBank {
    pub pilot: Option<GnnModel>,
    pub image: Option<GnnModel>,
    pub combined: Option<GnnModel>,
    pub direct: Option<GnnModel>,
    pub perfect_csi: Option<GnnModel>,
    pub perfect_location: Option<GnnModel>,
}

impl MethodBank {
    pub fn model_for(&self, method: Method) -> Option<&GnnModel> {
        match method {
            Method::GnnPilot => self.pilot.as_ref(),
            Method::GnnImage => self.image.as_ref(),
            Method::GnnCombined => self.combined.as_ref(),
            Method::GnnDirect => self.direct.as_ref(),
            Method::GnnPerfectCsi => self.perfect_csi.as_ref(),
            Method::GnnPerfectLocation => self.perfect_location.as_ref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n_u: usize,
    pub mean_min_rate: f64,
    pub std_min_rate: f64,
    pub samples: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,n_u,mean_min_rate,std_min_rate,samples,wall_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.n_u, r.mean_min_rate, r.std_min_rate, r.samples, r.wall_seconds
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ResultsTable, CompareError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CompareError::Csv("empty table".into()))?;
        if header.trim() != "method,n_u,mean_min_rate,std_min_rate,samples,wall_seconds" {
            return Err(CompareError::Csv(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(CompareError::Csv(format!("row {i} has {} fields", f.len())));
            }
            let num = |s: &str, what: &str| -> Result<f64, CompareError> {
                s.parse()
                    .map_err(|_| CompareError::Csv(format!("row {i}: bad {what} {s:?}")))
            };
            rows.push(ResultRow {
                method: f[0].to_string(),
                n_u: f[1]
                    .parse()
                    .map_err(|_| CompareError::Csv(format!("row {i}: bad n_u {:?}", f[1])))?,
                mean_min_rate: num(f[2], "mean")?,
                std_min_rate: num(f[3], "std")?,
                samples: f[4]
                    .parse()
                    .map_err(|_| CompareError::Csv(format!("row {i}: bad count {:?}", f[4])))?,
                wall_seconds: num(f[5], "wall time")?,
            });
        }
        Ok(ResultsTable { rows })
    }
}

/// The pilot observation every method shares for one record: noise is keyed
/// by the run seed and the record's stored pilot seed, so reruns with the
/// same seed reproduce it and different run seeds redraw only the noise.
pub fn pilot_observation(
    scene: &Scene,
    rec: &DatasetRecord,
    n_u: usize,
    run_seed: u64,
) -> Result<ChannelTensor, PilotError> {
    let pilots = make_pilots(rec.h.k, n_u, scene.rf.pilot_power_w)?;
    Ok(observe_pilots(
        &rec.h,
        &pilots,
        scene.rf.noise_w,
        derive(run_seed, tag::PILOT, rec.pilot_seed),
    ))
}

/// Feature tensors for one split of records, built the same way the
/// comparison loop builds them at evaluation time.
pub struct PreparedSet {
    pub samples: Vec<SampleData>,
    /// Normalizer actually applied to pilot features (1.0 when unused).
    pub pilot_rms: f64,
}

/// Turn raw records into model inputs for one learned method. Pass
/// `pilot_rms: None` on the training split to freeze the normalizer from
/// these records, then pass `Some(rms)` for validation/test splits so every
/// split is scaled identically.
pub fn prepare_samples(
    scene: &Scene,
    records: &[DatasetRecord],
    method: Method,
    n_u: usize,
    run_seed: u64,
    pilot_rms: Option<f64>,
) -> Result<PreparedSet, CompareError> {
    let kind = method.model_kind().ok_or_else(|| {
        CompareError::BadInput(format!("{} does not train a model", method.name()))
    })?;
    let pilot_source: Option<Vec<ChannelTensor>> = match method {
        Method::GnnPilot | Method::GnnCombined | Method::GnnDirect => {
            let obs = map_indexed(records.len(), |i| {
                pilot_observation(scene, &records[i], n_u, run_seed)
            });
            Some(obs.into_iter().collect::<Result<_, _>>()?)
        }
        Method::GnnPerfectCsi => Some(records.iter().map(|r| r.h.clone()).collect()),
        _ => None,
    };
    let rms = match (&pilot_source, pilot_rms) {
        (Some(_), Some(r)) => r,
        (Some(src), None) => gnn::pilot_feature_rms(src),
        (None, _) => 1.0,
    };
    let samples = records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let image = match kind {
                ModelKind::Image | ModelKind::Combined | ModelKind::Direct => {
                    Some(if method == Method::GnnPerfectLocation {
                        gnn::position_features(&rec.positions, scene.n_aps())
                    } else {
                        gnn::image_features(&rec.estimates)
                    })
                }
                ModelKind::Pilot => None,
            };
            let pilot = pilot_source
                .as_ref()
                .map(|src| gnn::pilot_features(&src[i], rms));
            SampleData { image, pilot, h: rec.h.clone() }
        })
        .collect();
    Ok(PreparedSet { samples, pilot_rms: rms })
}

/// Train one learned method end to end: build features from the records,
/// initialize the right network family, and run the optimizer. The combined
/// method reuses its pilot extractor's frozen normalizer; everything else
/// freezes it from the training split.
#[allow(clippy::too_many_arguments)]
pub fn train_method(
    scene: &Scene,
    method: Method,
    train_records: &[DatasetRecord],
    val_records: &[DatasetRecord],
    n_u: usize,
    width_divisor: usize,
    varying_k: bool,
    k_max: usize,
    schedule: &gnn::TrainSchedule,
    init_seed: u64,
    extractors: Option<(GnnModel, GnnModel)>,
) -> Result<(GnnModel, gnn::TrainReport), CompareError> {
    let kind = method.model_kind().ok_or_else(|| {
        CompareError::BadInput(format!("{} does not train a model", method.name()))
    })?;
    let mut model = GnnModel::new(
        kind,
        k_max,
        scene.n_aps(),
        scene.n_antennas(),
        varying_k,
        width_divisor,
        init_seed,
        extractors,
    )?;
    // Feature noise during training is keyed off the schedule seed so the
    // whole run reproduces from one number.
    let feature_seed = derive(schedule.seed, tag::SAMPLE, init_seed);
    let frozen = if kind == ModelKind::Combined { Some(model.pilot_rms) } else { None };
    let train_prep =
        prepare_samples(scene, train_records, method, n_u, feature_seed, frozen)?;
    let val_prep = prepare_samples(
        scene,
        val_records,
        method,
        n_u,
        feature_seed,
        Some(train_prep.pilot_rms),
    )?;
    model.pilot_rms = train_prep.pilot_rms;
    model.n_u = if method.needs_pilot_observation() { n_u } else { 0 };
    let budget = vec![scene.rf.ap_power_w; scene.n_aps()];
    let report = gnn::train(
        &mut model,
        &train_prep.samples,
        &val_prep.samples,
        &budget,
        scene.rf.noise_w,
        schedule,
    )?;
    Ok((model, report))
}

fn min_rate_on_true_channel(
    h: &ChannelTensor,
    assoc: &Association,
    beams: &fairness::BeamformerSet,
    noise_w: f64,
) -> f64 {
    fairness::compute_rates(h, assoc, beams, noise_w)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

fn evaluate_record(
    scene: &Scene,
    rec: &DatasetRecord,
    stats: Option<&ChannelStatistics>,
    bank: &MethodBank,
    method: Method,
    n_u: usize,
    run_seed: u64,
    opts: &SolverOptions,
) -> Result<f64, CompareError> {
    let budget = vec![scene.rf.ap_power_w; scene.n_aps()];
    let noise = scene.rf.noise_w;
    let observation = if method.needs_pilot_observation() {
        Some(pilot_observation(scene, rec, n_u, run_seed)?)
    } else {
        None
    };
    let estimate = if method.needs_lmmse() {
        let stats = stats.ok_or_else(|| {
            CompareError::BadInput("channel statistics required for an estimation method".into())
        })?;
        Some(lmmse_estimate(
            observation.as_ref().expect("estimation methods observe pilots"),
            stats,
            scene.rf.noise_w,
            scene.rf.pilot_power_w,
            n_u,
        ))
    } else {
        None
    };
    match method {
        Method::ExhaustivePerfect => {
            let (_, dec) = exhaustive_association(&rec.h, &budget, noise, opts)?;
            Ok(dec.min_rate)
        }
        Method::ExhaustiveLmmse => {
            let est = estimate.expect("built above");
            let (assoc, dec) = exhaustive_association(&est, &budget, noise, opts)?;
            Ok(min_rate_on_true_channel(&rec.h, &assoc, &dec.beams, noise))
        }
        Method::StrongestLmmse => {
            let est = estimate.expect("built above");
            let assoc = strongest_channel_association(&est);
            let dec = maxmin_beamforming(&est, &assoc, &budget, noise, opts);
            Ok(min_rate_on_true_channel(&rec.h, &assoc, &dec.beams, noise))
        }
        learned => {
            let model = bank
                .model_for(learned)
                .ok_or_else(|| CompareError::MissingModel(learned.name()))?;
            let image = match learned {
                Method::GnnImage | Method::GnnCombined | Method::GnnDirect => {
                    Some(gnn::image_features(&rec.estimates))
                }
                Method::GnnPerfectLocation => {
                    Some(gnn::position_features(&rec.positions, scene.n_aps()))
                }
                _ => None,
            };
            let pilot = match learned {
                Method::GnnPilot | Method::GnnCombined | Method::GnnDirect => Some(
                    gnn::pilot_features(observation.as_ref().expect("built above"), model.pilot_rms),
                ),
                Method::GnnPerfectCsi => Some(gnn::pilot_features(&rec.h, model.pilot_rms)),
                _ => None,
            };
            let sample = SampleData { image, pilot, h: rec.h.clone() };
            let (_, dec) = gnn::infer(model, &sample, &budget, noise)?;
            Ok(dec.min_rate)
        }
    }
}

/// Evaluate each method at each pilot length over the whole sample set.
/// Rows appear method-major in the given order. `stats` may be None when no
/// estimation-based method is requested.
#[allow(clippy::too_many_arguments)]
pub fn run_comparison(
    scene: &Scene,
    dataset: &Dataset,
    stats: Option<&ChannelStatistics>,
    bank: &MethodBank,
    methods: &[Method],
    n_u_list: &[usize],
    run_seed: u64,
    opts: &SolverOptions,
) -> Result<ResultsTable, CompareError> {
    if methods.is_empty() || n_u_list.is_empty() {
        return Err(CompareError::BadInput("need at least one method and pilot length".into()));
    }
    if dataset.records.is_empty() {
        return Err(CompareError::BadInput("empty sample set".into()));
    }
    for &n_u in n_u_list {
        if n_u < dataset.header.min_n_u {
            return Err(CompareError::BadInput(format!(
                "pilot length {n_u} is below the set's minimum {}",
                dataset.header.min_n_u
            )));
        }
    }
    if dataset.header.l != scene.n_aps() || dataset.header.m != scene.n_antennas() {
        return Err(CompareError::BadInput(
            "sample set and scene disagree on array dimensions".into(),
        ));
    }
    for &method in methods {
        if method.is_learned() && bank.model_for(method).is_none() {
            return Err(CompareError::MissingModel(method.name()));
        }
        if method.needs_lmmse() {
            let stats = stats.ok_or_else(|| {
                CompareError::BadInput(format!(
                    "method {} needs channel statistics",
                    method.name()
                ))
            })?;
            if dataset.records.iter().any(|r| r.h.k != stats.k) {
                return Err(CompareError::BadInput(format!(
                    "statistics were gathered for {} users; the set has other counts",
                    stats.k
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(methods.len() * n_u_list.len());
    for &method in methods {
        for &n_u in n_u_list {
            let start = Instant::now();
            let outcomes = map_indexed(dataset.records.len(), |i| {
                evaluate_record(
                    scene,
                    &dataset.records[i],
                    stats,
                    bank,
                    method,
                    n_u,
                    run_seed,
                    opts,
                )
            });
            let mut rates = Vec::with_capacity(outcomes.len());
            for outcome in outcomes {
                rates.push(outcome?);
            }
            let wall_seconds = start.elapsed().as_secs_f64();
            let n = rates.len();
            let mean = rates.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            rows.push(ResultRow {
                method: method.name().to_string(),
                n_u,
                mean_min_rate: mean,
                std_min_rate: std,
                samples: n,
                wall_seconds,
            });
        }
    }
    Ok(ResultsTable { rows })
}

// ---------------------------------------------------------------------------
// Beam pattern export

/// Power response of one beam sampled over a (theta, phi) grid,
/// theta-major. Theta spans [0, pi], phi spans [-pi, pi], both inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, ti: usize, pi: usize) -> f64 {
        self.values[ti * self.phis.len() + pi]
    }

    /// Grid indices and value of the strongest response.
    pub fn peak(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for ti in 0..self.thetas.len() {
            for pi in 0..self.phis.len() {
                let v = self.at(ti, pi);
                if v > best.2 {
                    best = (ti, pi, v);
                }
            }
        }
        best
    }
}

pub fn array_response_heatmap(
    v: &[Complex64],
    array: &ArrayGeometry,
    spacing: f64,
    wavelength: f64,
    n_theta: usize,
    n_phi: usize,
) -> Heatmap {
    assert!(n_theta >= 2 && n_phi >= 2, "grid must be at least 2x2");
    assert_eq!(v.len(), array.count(), "beam length must match the array");
    let thetas: Vec<f64> = (0..n_theta)
        .map(|i| std::f64::consts::PI * i as f64 / (n_theta - 1) as f64)
        .collect();
    let phis: Vec<f64> = (0..n_phi)
        .map(|j| {
            -std::f64::consts::PI
                + 2.0 * std::f64::consts::PI * j as f64 / (n_phi - 1) as f64
        })
        .collect();
    let values = map_indexed(n_theta, |ti| {
        let theta = thetas[ti];
        phis.iter()
            .map(|&phi| {
                array_response(v, theta, phi, array.rows, array.cols, spacing, wavelength)
            })
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect();
    Heatmap { thetas, phis, values }
}

/// CSV matrix: first row is the phi axis, each following row starts with its
/// theta value.
pub fn heatmap_to_csv(map: &Heatmap) -> String {
    let mut out = String::from("theta_rad\\phi_rad");
    for phi in &map.phis {
        out.push_str(&format!(",{phi}"));
    }
    out.push('\n');
    for (ti, theta) in map.thetas.iter().enumerate() {
        out.push_str(&format!("{theta}"));
        for pi in 0..map.phis.len() {
            out.push_str(&format!(",{}", map.at(ti, pi)));
        }
        out.push('\n');
    }
    out
}

/// 8-bit binary PGM, linear scale normalized to the map's maximum. An
/// all-zero map stays all zero.
pub fn write_pgm(path: &Path, map: &Heatmap) -> Result<(), CompareError> {
    let (w, h) = (map.phis.len(), map.thetas.len());
    let max = map.values.iter().cloned().fold(0.0f64, f64::max);
    let mut bytes = Vec::with_capacity(64 + w * h);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for v in &map.values {
        let level = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0u8 };
        bytes.push(level);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Association inspection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAssociationRow {
    pub user: usize,
    pub chosen: usize,
    pub nearest: usize,
    pub chosen_distance: f64,
    pub nearest_distance: f64,
    /// Set when the decision departs from plain nearest-AP assignment.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub users: Vec<UserAssociationRow>,
    /// Users served per AP; sums to the user count.
    pub loads: Vec<usize>,
}

/// Compare a serving decision against the nearest-AP rule. Distances are
/// 3D point distances from each user to each AP.
pub fn interpret_association(
    scene: &Scene,
    positions: &[Vec3],
    assoc: &Association,
) -> AssociationReport {
    assert_eq!(positions.len(), assoc.serving.len());
    let mut loads = vec![0usize; scene.n_aps()];
    let users = positions
        .iter()
        .zip(&assoc.serving)
        .enumerate()
        .map(|(user, (pos, &chosen))| {
            let dist = |ap: usize| (*pos - scene.aps[ap].position).norm();
            let nearest = (0..scene.n_aps())
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                .expect("scene has APs");
            loads[chosen] += 1;
            UserAssociationRow {
                user,
                chosen,
                nearest,
                chosen_distance: dist(chosen),
                nearest_distance: dist(nearest),
                flagged: chosen != nearest,
            }
        })
        .collect();
    AssociationReport { users, loads }
}
