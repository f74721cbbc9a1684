//! Graph neural models for joint user association and beamforming.
//!
//! Four flavors share one trunk shape: an embedding MLP, two
//! aggregate-combine stages that pool over the other users, and a linear
//! readout produced per user. They differ only in what feeds the first
//! layer: camera location estimates, pilot observations, both raw streams
//! concatenated, or the frozen stage-2 features of a trained camera model
//! and a trained pilot model side by side.
//!
//! The readout row per user carries L association logits followed by 2ML
//! reals holding the real/imag parts of L per-AP beams. Normalization maps
//! logits to a row-stochastic association and rescales beams so each AP
//! spends exactly its budget; training blends the soft association toward
//! its one-hot argmax through a stop-gradient so the quantization cost
//! reaches the weights while the forward value hardens.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, AdamState, BatchStats, Gradients, Tape, Tensor, Var};
use crate::channel::ChannelTensor;
use crate::fairness::{self, Association, BeamformerSet, Decision};
use crate::geom::Vec3;
use crate::parallel::map_indexed;
use crate::rng::{substream, tag};
use crate::vision::LocationEstimates;
use rand::Rng;

/// Meters-to-hectometers factor applied to location features.
pub const IMAGE_SCALE: f64 = 0.01;

/// Samples whose tapes are alive at once during a batch; bounds gradient
/// memory to CHUNK full parameter copies.
const CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error(transparent)]
    Engine(#[from] AdError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged { epoch: usize, batch: usize, reason: String },
    #[error("{0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Image,
    Pilot,
    Combined,
    Direct,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Image => "image",
            ModelKind::Pilot => "pilot",
            ModelKind::Combined => "combined",
            ModelKind::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "image" => Some(ModelKind::Image),
            "pilot" => Some(ModelKind::Pilot),
            "combined" => Some(ModelKind::Combined),
            "direct" => Some(ModelKind::Direct),
            _ => None,
        }
    }
}

/// Affine-chain widths for one trunk. Each chain lists every layer width
/// including the input, so a chain of n+1 entries is n affine layers; all of
/// them get batch norm and ReLU except the readout, which is bare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkSpec {
    pub embed: Vec<usize>,
    pub psi: Vec<usize>,
    pub rho: Vec<usize>,
    pub xi: Vec<usize>,
    pub stages: usize,
    pub readout_out: usize,
}

impl TrunkSpec {
    pub fn feature_width(&self) -> usize {
        *self.xi.last().unwrap()
    }

    pub fn input_width(&self) -> usize {
        self.embed[0]
    }
}

/// Hidden widths per kind, divided by `divisor` (1 keeps the published
/// sizes, 4 is the desk default). Data-determined widths (the input and the
/// concatenations) are computed, not scaled; that also resolves the
/// published varying-size table for the combined model, whose listed input
/// and readout widths disagree with the widths of the parts they join.
pub fn trunk_spec(
    kind: ModelKind,
    l: usize,
    m: usize,
    divisor: usize,
    varying_k: bool,
    combined_in: Option<usize>,
) -> TrunkSpec {
    let d = |w: usize| (w / divisor).max(1);
    let out = 2 * m * l + l;
    let input = match kind {
        ModelKind::Image => 3 * l,
        ModelKind::Pilot => 2 * l * m,
        ModelKind::Direct => 3 * l + 2 * l * m,
        ModelKind::Combined => {
            combined_in.expect("combined trunk needs the extractor feature width")
        }
    };
    let (embed_tail, psi_tail, xi_tail): (Vec<usize>, Vec<usize>, Vec<usize>) =
        match (kind, varying_k) {
            (ModelKind::Image, false) => (vec![512, 512], vec![512, 512], vec![512, 512]),
            (ModelKind::Image, true) => {
                (vec![512, 512, 256], vec![512, 512, 256], vec![512, 256])
            }
            (ModelKind::Pilot, _) | (ModelKind::Direct, _) => {
                (vec![1024, 1024], vec![1024, 1024], vec![1024, 1024])
            }
            (ModelKind::Combined, false) => {
                (vec![1024, 1536], vec![1024, 1536], vec![1024, 1536])
            }
            (ModelKind::Combined, true) => {
                (vec![2048, 1024], vec![2048, 1024], vec![2048, 1024])
            }
        };
    let mut embed = vec![input];
    embed.extend(embed_tail.iter().map(|&w| d(w)));
    let feat = *embed.last().unwrap();
    let mut psi = vec![feat];
    psi.extend(psi_tail.iter().map(|&w| d(w)));
    let rho = psi.clone();
    let mut xi = vec![2 * *psi.last().unwrap()];
    xi.extend(xi_tail.iter().map(|&w| d(w)));
    assert_eq!(*xi.last().unwrap(), feat, "stage output must chain into the next stage");
    TrunkSpec { embed, psi, rho, xi, stages: 2, readout_out: out }
}

#[derive(Debug, Clone)]
pub struct BnState {
    pub gamma: Arc<Tensor>,
    pub beta: Arc<Tensor>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Arc<Tensor>,
    pub b: Arc<Tensor>,
    pub bn: Option<BnState>,
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub psi: Vec<DenseLayer>,
    pub rho: Vec<DenseLayer>,
    pub xi: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct GnnParams {
    pub spec: TrunkSpec,
    pub embed: Vec<DenseLayer>,
    pub stages: Vec<StageParams>,
    pub readout: DenseLayer,
}

/// Everything needed to run one model: trunk parameters, the feature
/// scaling constants frozen at training time, and, for the combined kind,
/// the two frozen extractor models.
#[derive(Debug, Clone)]
pub struct GnnModel {
    pub kind: ModelKind,
    pub k_max: usize,
    pub l: usize,
    pub m: usize,
    pub varying_k: bool,
    /// Divisor applied to the published hidden widths (4 = desk scale).
    pub width_divisor: usize,
    /// Pilot feature normalizer frozen from the training set (1.0 until
    /// trained, or for models that take no pilot input).
    pub pilot_rms: f64,
    /// Pilot symbols per user the model was trained against (0 if unused).
    pub n_u: usize,
    pub params: GnnParams,
    pub image_extractor: Option<Box<GnnModel>>,
    pub pilot_extractor: Option<Box<GnnModel>>,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_vec(
        &[fan_in, fan_out],
        (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
}

fn init_chain(widths: &[usize], bn: bool, seed: u64, counter: &mut u64) -> Vec<DenseLayer> {
    widths
        .windows(2)
        .map(|w| {
            let mut rng = substream(seed, tag::INIT, *counter);
            *counter += 1;
            DenseLayer {
                w: Arc::new(glorot(&mut rng, w[0], w[1])),
                b: Arc::new(Tensor::zeros(&[w[1]])),
                bn: bn.then(|| BnState {
                    gamma: Arc::new(Tensor::from_vec(&[w[1]], vec![1.0; w[1]])),
                    beta: Arc::new(Tensor::zeros(&[w[1]])),
                    running_mean: vec![0.0; w[1]],
                    running_var: vec![1.0; w[1]],
                }),
            }
        })
        .collect()
}

impl GnnParams {
    pub fn init(spec: TrunkSpec, seed: u64) -> GnnParams {
        let mut counter = 0;
        let embed = init_chain(&spec.embed, true, seed, &mut counter);
        let stages = (0..spec.stages)
            .map(|_| StageParams {
                psi: init_chain(&spec.psi, true, seed, &mut counter),
                rho: init_chain(&spec.rho, true, seed, &mut counter),
                xi: init_chain(&spec.xi, true, seed, &mut counter),
            })
            .collect();
        let readout =
            init_chain(&[spec.feature_width(), spec.readout_out], false, seed, &mut counter)
                .pop()
                .unwrap();
        GnnParams { spec, embed, stages, readout }
    }

    fn chains(&self) -> Vec<(String, &Vec<DenseLayer>)> {
        let mut out: Vec<(String, &Vec<DenseLayer>)> =
            vec![("embed".to_string(), &self.embed)];
        for (s, st) in self.stages.iter().enumerate() {
            out.push((format!("stage{s}.psi"), &st.psi));
            out.push((format!("stage{s}.rho"), &st.rho));
            out.push((format!("stage{s}.xi"), &st.xi));
        }
        out
    }

    fn chains_mut(&mut self) -> Vec<(String, &mut Vec<DenseLayer>)> {
        let mut out: Vec<(String, &mut Vec<DenseLayer>)> = Vec::new();
        out.push(("embed".to_string(), &mut self.embed));
        for (s, st) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{s}.psi"), &mut st.psi));
            out.push((format!("stage{s}.rho"), &mut st.rho));
            out.push((format!("stage{s}.xi"), &mut st.xi));
        }
        out
    }

    /// Trainable tensors in a stable traversal order shared by the
    /// optimizer, gradient extraction, and checkpoints.
    pub fn trainable(&self) -> Vec<(String, Arc<Tensor>)> {
        let mut out = Vec::new();
        for (name, chain) in self.chains() {
            for (i, layer) in chain.iter().enumerate() {
                out.push((format!("{name}.{i}.w"), Arc::clone(&layer.w)));
                out.push((format!("{name}.{i}.b"), Arc::clone(&layer.b)));
                if let Some(bn) = &layer.bn {
                    out.push((format!("{name}.{i}.bn_gamma"), Arc::clone(&bn.gamma)));
                    out.push((format!("{name}.{i}.bn_beta"), Arc::clone(&bn.beta)));
                }
            }
        }
        out.push(("readout.w".to_string(), Arc::clone(&self.readout.w)));
        out.push(("readout.b".to_string(), Arc::clone(&self.readout.b)));
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        fn chain<'a>(layers: &'a mut [DenseLayer], out: &mut Vec<&'a mut Arc<Tensor>>) {
            for layer in layers.iter_mut() {
                out.push(&mut layer.w);
                out.push(&mut layer.b);
                if let Some(bn) = &mut layer.bn {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
            }
        }
        let GnnParams { embed, stages, readout, .. } = self;
        let mut out: Vec<&mut Arc<Tensor>> = Vec::new();
        chain(embed, &mut out);
        for st in stages.iter_mut() {
            chain(&mut st.psi, &mut out);
            chain(&mut st.rho, &mut out);
            chain(&mut st.xi, &mut out);
        }
        out.push(&mut readout.w);
        out.push(&mut readout.b);
        out
    }

    /// Batch-norm states in the same traversal order the forward pass
    /// visits them, for folding running statistics.
    fn bn_states_mut(&mut self) -> Vec<&mut BnState> {
        let mut out: Vec<&mut BnState> = Vec::new();
        for (_, chain) in self.chains_mut() {
            for layer in chain.iter_mut() {
                if let Some(bn) = &mut layer.bn {
                    out.push(bn);
                }
            }
        }
        out
    }

    /// Running statistics as named tensors (for persistence).
    pub fn statistics(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, chain) in self.chains() {
            for (i, layer) in chain.iter().enumerate() {
                if let Some(bn) = &layer.bn {
                    let n = bn.running_mean.len();
                    out.push((
                        format!("{name}.{i}.bn_mean"),
                        Tensor::from_vec(&[n], bn.running_mean.clone()),
                    ));
                    out.push((
                        format!("{name}.{i}.bn_var"),
                        Tensor::from_vec(&[n], bn.running_var.clone()),
                    ));
                }
            }
        }
        out
    }

    pub fn load_tensors(
        &mut self,
        mut fetch: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<(), GnnError> {
        let mut missing = Vec::new();
        {
            let names: Vec<String> =
                self.trainable().into_iter().map(|(n, _)| n).collect();
            let slots = self.trainable_mut();
            for (name, slot) in names.iter().zip(slots) {
                match fetch(name) {
                    Some(t) if t.shape == slot.shape => *slot = Arc::new(t),
                    Some(_) => {
                        return Err(GnnError::BadConfig(format!(
                            "checkpoint tensor {name} has the wrong shape"
                        )))
                    }
                    None => missing.push(name.clone()),
                }
            }
        }
        let stat_names: Vec<String> =
            self.statistics().into_iter().map(|(n, _)| n).collect();
        let mut idx = 0;
        for (_, chain) in self.chains_mut() {
            for layer in chain.iter_mut() {
                if let Some(bn) = &mut layer.bn {
                    for part in 0..2 {
                        let name = &stat_names[idx];
                        idx += 1;
                        match fetch(name) {
                            Some(t) if t.numel() == bn.running_mean.len() => {
                                if part == 0 {
                                    bn.running_mean = t.data;
                                } else {
                                    bn.running_var = t.data;
                                }
                            }
                            Some(_) => {
                                return Err(GnnError::BadConfig(format!(
                                    "checkpoint tensor {name} has the wrong shape"
                                )))
                            }
                            None => missing.push(name.clone()),
                        }
                    }
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(GnnError::BadConfig(format!(
                "checkpoint is missing tensors: {}",
                missing.join(", ")
            )))
        }
    }
}

impl GnnModel {
    /// Fresh model. `width_divisor` 4 gives the desk-scale trunk, 1 the
    /// published sizes. Combined models take ownership of their trained
    /// extractors and freeze them.
    pub fn new(
        kind: ModelKind,
        k_max: usize,
        l: usize,
        m: usize,
        varying_k: bool,
        width_divisor: usize,
        seed: u64,
        extractors: Option<(GnnModel, GnnModel)>,
    ) -> Result<GnnModel, GnnError> {
        let (image_extractor, pilot_extractor, combined_in) = match (kind, extractors) {
            (ModelKind::Combined, Some((img, pil))) => {
                if img.kind != ModelKind::Image || pil.kind != ModelKind::Pilot {
                    return Err(GnnError::BadConfig(
                        "combined model needs an image extractor and a pilot extractor"
                            .to_string(),
                    ));
                }
                let width =
                    img.params.spec.feature_width() + pil.params.spec.feature_width();
                (Some(Box::new(img)), Some(Box::new(pil)), Some(width))
            }
            (ModelKind::Combined, None) => {
                return Err(GnnError::BadConfig(
                    "combined model needs trained extractors".to_string(),
                ))
            }
            (_, Some(_)) => {
                return Err(GnnError::BadConfig(
                    "only the combined model takes extractors".to_string(),
                ))
            }
            (_, None) => (None, None, None),
        };
        let spec = trunk_spec(kind, l, m, width_divisor, varying_k, combined_in);
        let pilot_rms = pilot_extractor.as_ref().map(|p| p.pilot_rms).unwrap_or(1.0);
        Ok(GnnModel {
            kind,
            k_max,
            l,
            m,
            varying_k,
            width_divisor,
            pilot_rms,
            n_u: 0,
            params: GnnParams::init(spec, seed),
            image_extractor,
            pilot_extractor,
        })
    }

    /// Test-scale constructor with explicit widths.
    pub fn with_spec(
        kind: ModelKind,
        k_max: usize,
        l: usize,
        m: usize,
        spec: TrunkSpec,
        seed: u64,
    ) -> GnnModel {
        GnnModel {
            kind,
            k_max,
            l,
            m,
            varying_k: false,
            width_divisor: 0,
            pilot_rms: 1.0,
            n_u: 0,
            params: GnnParams::init(spec, seed),
            image_extractor: None,
            pilot_extractor: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Feature builders

/// Camera features: per user, the L estimated positions in AP order, each
/// (x, y, z) in hectometers. Missing detections keep their sentinel value,
/// scaled like any coordinate, so a miss reads as a constant the network can
/// learn.
pub fn image_features(estimates: &LocationEstimates) -> Tensor {
    let (k, l) = (estimates.k, estimates.l);
    let mut data = Vec::with_capacity(k * 3 * l);
    for ku in 0..k {
        for ap in 0..l {
            let p = estimates.at(ku, ap);
            data.extend_from_slice(&[p.x * IMAGE_SCALE, p.y * IMAGE_SCALE, p.z * IMAGE_SCALE]);
        }
    }
    Tensor::from_vec(&[k, 3 * l], data)
}

/// Idealized location features: the true position repeated for every AP.
pub fn position_features(positions: &[Vec3], l: usize) -> Tensor {
    let k = positions.len();
    let mut data = Vec::with_capacity(k * 3 * l);
    for p in positions {
        for _ in 0..l {
            data.extend_from_slice(&[p.x * IMAGE_SCALE, p.y * IMAGE_SCALE, p.z * IMAGE_SCALE]);
        }
    }
    Tensor::from_vec(&[k, 3 * l], data)
}

/// Pilot features: per user, real/imag pairs of the L observed (or true)
/// M-antenna channel vectors, divided by `rms`.
pub fn pilot_features(observation: &ChannelTensor, rms: f64) -> Tensor {
    let (k, l, m) = (observation.k, observation.l, observation.m);
    let mut data = Vec::with_capacity(k * 2 * l * m);
    for ku in 0..k {
        for ap in 0..l {
            for z in observation.at(ku, ap) {
                data.push(z.re / rms);
                data.push(z.im / rms);
            }
        }
    }
    Tensor::from_vec(&[k, 2 * l * m], data)
}

/// Root-mean-square of the raw pilot feature entries over a training set;
/// frozen into the model so inference scales inputs identically.
pub fn pilot_feature_rms(observations: &[ChannelTensor]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for obs in observations {
        for z in &obs.data {
            acc += z.re * z.re + z.im * z.im;
            n += 2;
        }
    }
    if n == 0 {
        1.0
    } else {
        (acc / n as f64).sqrt().max(f64::MIN_POSITIVE)
    }
}

/// One training/evaluation sample: whatever feature streams exist plus the
/// channel the rates are scored against.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub image: Option<Tensor>,
    pub pilot: Option<Tensor>,
    pub h: ChannelTensor,
}

// ---------------------------------------------------------------------------
// Forward pass

struct BoundLayer {
    w: Var,
    b: Var,
    bn: Option<(Var, Var)>,
}

fn bind_chain(tape: &mut Tape, chain: &[DenseLayer]) -> Vec<BoundLayer> {
    chain
        .iter()
        .map(|layer| BoundLayer {
            w: tape.leaf(Arc::clone(&layer.w)),
            b: tape.leaf(Arc::clone(&layer.b)),
            bn: layer.bn.as_ref().map(|bn| {
                (tape.leaf(Arc::clone(&bn.gamma)), tape.leaf(Arc::clone(&bn.beta)))
            }),
        })
        .collect()
}

struct BoundParams {
    embed: Vec<BoundLayer>,
    stages: Vec<(Vec<BoundLayer>, Vec<BoundLayer>, Vec<BoundLayer>)>,
    readout: BoundLayer,
}

fn bind_params(tape: &mut Tape, params: &GnnParams) -> BoundParams {
    BoundParams {
        embed: bind_chain(tape, &params.embed),
        stages: params
            .stages
            .iter()
            .map(|s| {
                (bind_chain(tape, &s.psi), bind_chain(tape, &s.rho), bind_chain(tape, &s.xi))
            })
            .collect(),
        readout: bind_chain(tape, std::slice::from_ref(&params.readout)).pop().unwrap(),
    }
}

impl BoundParams {
    /// Bound leaves in the same order as [`GnnParams::trainable`].
    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let chain = |layers: &[BoundLayer], out: &mut Vec<Var>| {
            for l in layers {
                out.push(l.w);
                out.push(l.b);
                if let Some((g, b)) = l.bn {
                    out.push(g);
                    out.push(b);
                }
            }
        };
        chain(&self.embed, &mut out);
        for (psi, rho, xi) in &self.stages {
            chain(psi, &mut out);
            chain(rho, &mut out);
            chain(xi, &mut out);
        }
        out.push(self.readout.w);
        out.push(self.readout.b);
        out
    }
}

fn run_chain(
    tape: &mut Tape,
    chain: &[DenseLayer],
    bound: &[BoundLayer],
    mut x: Var,
    train: bool,
    stats: &mut Vec<BatchStats>,
) -> Result<Var, AdError> {
    for (layer, vars) in chain.iter().zip(bound) {
        x = tape.affine(x, vars.w, vars.b)?;
        if let (Some(bn), Some((gamma, beta))) = (&layer.bn, vars.bn) {
            if train {
                let (y, st) = tape.batchnorm_train(x, gamma, beta)?;
                stats.push(st);
                x = y;
            } else {
                x = tape.batchnorm_eval(x, gamma, beta, &bn.running_mean, &bn.running_var)?;
            }
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Embedding plus the aggregate-combine stages; returns the per-user
/// feature matrix feeding the readout.
fn trunk_features(
    tape: &mut Tape,
    params: &GnnParams,
    bound: &BoundParams,
    input: Var,
    train: bool,
    stats: &mut Vec<BatchStats>,
) -> Result<Var, AdError> {
    let mut d = run_chain(tape, &params.embed, &bound.embed, input, train, stats)?;
    for (stage, (psi_b, rho_b, xi_b)) in params.stages.iter().zip(&bound.stages) {
        let msg = run_chain(tape, &stage.psi, psi_b, d, train, stats)?;
        let pooled = tape.neighbor_mean(msg)?;
        let own = run_chain(tape, &stage.rho, rho_b, d, train, stats)?;
        let cat = tape.concat_cols(&[pooled, own])?;
        d = run_chain(tape, &stage.xi, xi_b, cat, train, stats)?;
    }
    Ok(d)
}

/// Normalized model heads living on the tape.
pub struct Heads {
    /// Row-stochastic association weights.
    pub ahat: Var,
    /// One-hot argmax of `ahat` (ties to the smaller AP).
    pub astar: Var,
    /// Beams rescaled so every AP spends exactly its budget.
    pub vhat: Var,
    /// `ahat` blended toward `astar` by the straight-through coefficient.
    pub blended: Var,
}

fn normalize_readout(
    tape: &mut Tape,
    raw: Var,
    l: usize,
    m: usize,
    budget: &[f64],
    lambda: f64,
) -> Result<Heads, AdError> {
    let atil = tape.slice_cols(raw, 0, l)?;
    let ahat = tape.normalize_rows_abs(atil)?;
    let astar = tape.one_hot_argmax_rows(ahat)?;
    let diff = tape.sub(astar, ahat)?;
    let frozen = tape.stop_grad(diff)?;
    let push = tape.scale(frozen, lambda)?;
    let blended = tape.add(ahat, push)?;
    let vtil = tape.slice_cols(raw, l, l + 2 * m * l)?;
    let mut parts = Vec::with_capacity(l);
    for ap in 0..l {
        let slice = tape.slice_cols(vtil, ap * 2 * m, (ap + 1) * 2 * m)?;
        let sq = tape.square(slice)?;
        let total = tape.sum_all(sq)?;
        let root = tape.sqrt(total)?;
        let inv = tape.recip(root)?;
        let unit = tape.scale_var(slice, inv)?;
        parts.push(tape.scale(unit, budget[ap].sqrt())?);
    }
    let vhat = tape.concat_cols(&parts)?;
    Ok(Heads { ahat, astar, vhat, blended })
}

/// Real matrix turning a beam row (re/im interleaved per AP block) into the
/// per-AP complex products with this victim's channels: column pair
/// (2l, 2l+1) holds the real and imaginary part of h_{kl}^T v_{il}.
fn victim_matrix(h: &ChannelTensor, k: usize) -> Tensor {
    let (l, m) = (h.l, h.m);
    let mut w = Tensor::zeros(&[2 * m * l, 2 * l]);
    let cols = 2 * l;
    for ap in 0..l {
        let hv = h.at(k, ap);
        for ant in 0..m {
            let re = hv[ant].re;
            let im = hv[ant].im;
            let row_re = ap * 2 * m + 2 * ant;
            let row_im = row_re + 1;
            w.data[row_re * cols + 2 * ap] = re;
            w.data[row_im * cols + 2 * ap] = -im;
            w.data[row_re * cols + 2 * ap + 1] = im;
            w.data[row_im * cols + 2 * ap + 1] = re;
        }
    }
    w
}

fn pair_sum_matrix(l: usize) -> Tensor {
    let mut s = Tensor::zeros(&[2 * l, l]);
    for ap in 0..l {
        s.data[(2 * ap) * l + ap] = 1.0;
        s.data[(2 * ap + 1) * l + ap] = 1.0;
    }
    s
}

/// Per-user achievable rates of the blended association and normalized
/// beams, plus their minimum and the association-deviation penalty.
pub fn rate_loss(
    tape: &mut Tape,
    heads: &Heads,
    h: &ChannelTensor,
    noise_w: f64,
    lambda_p: f64,
) -> Result<(Var, Var, Vec<Var>), AdError> {
    let (k_users, l) = (h.k, h.l);
    let pair = Arc::new(pair_sum_matrix(l));
    let mut rates = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let wk = Arc::new(victim_matrix(h, k));
        let prods = tape.mat_const(heads.vhat, wk)?;
        let sq = tape.square(prods)?;
        let gains = tape.mat_const(sq, Arc::clone(&pair))?;
        let weighted = tape.mul(heads.blended, gains)?;
        let total = tape.sum_all(weighted)?;
        let own_a = tape.slice_rows(heads.blended, k, k + 1)?;
        let own_g = tape.slice_rows(gains, k, k + 1)?;
        let own_w = tape.mul(own_a, own_g)?;
        let own = tape.sum_all(own_w)?;
        let interf = tape.sub(total, own)?;
        let denom = tape.add_const(interf, noise_w)?;
        let inv = tape.recip(denom)?;
        let sinr = tape.mul(own, inv)?;
        let one_plus = tape.add_const(sinr, 1.0)?;
        rates.push(tape.log2(one_plus)?);
    }
    let min_rate = tape.min_scalars(&rates)?;
    let dev = tape.add_const(heads.blended, -1.0 / l as f64)?;
    let sq = tape.square(dev)?;
    let pen_sum = tape.sum_all(sq)?;
    let penalty = tape.scale(pen_sum, lambda_p)?;
    let loss = tape.sub(penalty, min_rate)?;
    Ok((loss, min_rate, rates))
}

/// The trunk input tensor for a sample: the kind's feature stream, or for
/// the combined kind the concatenated frozen-extractor features computed in
/// evaluation mode.
pub fn model_input(model: &GnnModel, sample: &SampleData) -> Result<Tensor, GnnError> {
    let need = |t: &Option<Tensor>, what: &str| -> Result<Tensor, GnnError> {
        t.clone().ok_or_else(|| GnnError::BadConfig(format!("sample lacks {what} features")))
    };
    match model.kind {
        ModelKind::Image => need(&sample.image, "image"),
        ModelKind::Pilot => need(&sample.pilot, "pilot"),
        ModelKind::Direct => {
            let img = need(&sample.image, "image")?;
            let pil = need(&sample.pilot, "pilot")?;
            let mut tape = Tape::new();
            let a = tape.leaf_owned(img);
            let b = tape.leaf_owned(pil);
            let cat = tape.concat_cols(&[a, b])?;
            Ok(tape.value(cat).clone())
        }
        ModelKind::Combined => {
            let img_model = model
                .image_extractor
                .as_ref()
                .ok_or_else(|| GnnError::BadConfig("missing image extractor".to_string()))?;
            let pil_model = model
                .pilot_extractor
                .as_ref()
                .ok_or_else(|| GnnError::BadConfig("missing pilot extractor".to_string()))?;
            let img = need(&sample.image, "image")?;
            let pil = need(&sample.pilot, "pilot")?;
            let mut tape = Tape::new();
            let mut sink = Vec::new();
            let a = tape.leaf_owned(img);
            let ba = bind_params(&mut tape, &img_model.params);
            let fa = trunk_features(&mut tape, &img_model.params, &ba, a, false, &mut sink)?;
            let b = tape.leaf_owned(pil);
            let bb = bind_params(&mut tape, &pil_model.params);
            let fb = trunk_features(&mut tape, &pil_model.params, &bb, b, false, &mut sink)?;
            let cat = tape.concat_cols(&[fa, fb])?;
            Ok(tape.value(cat).clone())
        }
    }
}

struct ForwardResult {
    loss: f64,
    grads: Vec<Tensor>,
}

fn forward_backward(
    params: &GnnParams,
    input: &Tensor,
    h: &ChannelTensor,
    budget: &[f64],
    noise_w: f64,
    lambda: f64,
    lambda_p: f64,
) -> Result<ForwardResult, AdError> {
    let mut tape = Tape::new();
    let mut stats = Vec::new();
    let bound = bind_params(&mut tape, params);
    let x = tape.leaf_owned(input.clone());
    let feat = trunk_features(&mut tape, params, &bound, x, true, &mut stats)?;
    let raw = tape.affine(feat, bound.readout.w, bound.readout.b)?;
    let heads = normalize_readout(&mut tape, raw, h.l, h.m, budget, lambda)?;
    let (loss, _, _) = rate_loss(&mut tape, &heads, h, noise_w, lambda_p)?;
    let loss_value = tape.value(loss).data[0];
    let grads: Gradients = tape.backward(loss)?;
    let shapes: Vec<Vec<usize>> =
        params.trainable().iter().map(|(_, t)| t.shape.clone()).collect();
    let grad_tensors = bound
        .vars()
        .iter()
        .zip(&shapes)
        .map(|(&v, shape)| grads.get_or_zeros(v, shape))
        .collect();
    Ok(ForwardResult { loss: loss_value, grads: grad_tensors })
}

/// Per-layer batch statistics of one training-mode forward pass, with the
/// sample's row count for weighting.
fn observe_bn_stats(
    params: &GnnParams,
    input: &Tensor,
) -> Result<(usize, Vec<BatchStats>), AdError> {
    let mut tape = Tape::new();
    let mut stats = Vec::new();
    let bound = bind_params(&mut tape, params);
    let x = tape.leaf_owned(input.clone());
    trunk_features(&mut tape, params, &bound, x, true, &mut stats)?;
    Ok((input.rows(), stats))
}

/// How many training samples the running-statistics estimate pools.
const BN_CALIBRATION_CAP: usize = 1024;

/// Replace every layer's running statistics with the exact pooled moments of
/// the normalized activations over a deterministic subsample of the training
/// inputs. Running averages folded during the epoch trail the weights they
/// were observed under; re-estimating against the frozen weights removes the
/// train/eval gap before each validation pass.
fn recalibrate_bn(params: &mut GnnParams, inputs: &[Tensor]) -> Result<(), AdError> {
    let step = inputs.len().div_ceil(BN_CALIBRATION_CAP).max(1);
    let chosen: Vec<&Tensor> = inputs.iter().step_by(step).collect();
    let observed = crate::parallel::map_indexed(chosen.len(), |i| {
        observe_bn_stats(params, chosen[i])
    });
    let mut total = 0.0f64;
    let mut pooled: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for res in observed {
        let (rows, stats) = res?;
        let w = rows as f64;
        total += w;
        if pooled.is_empty() {
            pooled = stats
                .iter()
                .map(|st| (vec![0.0; st.mean.len()], vec![0.0; st.var.len()]))
                .collect();
        }
        for (acc, st) in pooled.iter_mut().zip(&stats) {
            for j in 0..st.mean.len() {
                acc.0[j] += w * st.mean[j];
                // Pooled second moment: E[x^2] = var + mean^2 per sample.
                acc.1[j] += w * (st.var[j] + st.mean[j] * st.mean[j]);
            }
        }
    }
    for (bn, (sum_mean, sum_sq)) in params.bn_states_mut().into_iter().zip(pooled) {
        for j in 0..bn.running_mean.len() {
            let mean = sum_mean[j] / total;
            bn.running_mean[j] = mean;
            bn.running_var[j] = (sum_sq[j] / total - mean * mean).max(0.0);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of epochs over which the straight-through blend ramps 0 to 1.
    pub lambda_ramp_frac: f64,
    pub penalty_start: f64,
    pub penalty_end: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping (0 = never).
    pub patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 40,
            batch_size: 64,
            learning_rate: 2e-4,
            lambda_ramp_frac: 0.5,
            penalty_start: 0.1,
            penalty_end: 1e-4,
            seed: 0,
            patience: 0,
        }
    }
}

pub fn lambda_at(epoch: usize, epochs: usize, ramp_frac: f64) -> f64 {
    let ramp = (epochs as f64 * ramp_frac).ceil().max(1.0);
    (epoch as f64 / ramp).clamp(0.0, 1.0)
}

pub fn penalty_at(epoch: usize, epochs: usize, start: f64, end: f64) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    start * (end / start).powf(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub lambda_p: f64,
    pub train_loss: f64,
    pub val_min_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean validation min-rate of the freshly initialized model.
    pub initial_val: f64,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Train in place; the model keeps the parameters of its best validation
/// epoch. Deterministic for a fixed schedule seed.
pub fn train(
    model: &mut GnnModel,
    train_set: &[SampleData],
    val_set: &[SampleData],
    budget: &[f64],
    noise_w: f64,
    schedule: &TrainSchedule,
) -> Result<TrainReport, GnnError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(GnnError::BadConfig("empty training or validation set".to_string()));
    }
    if schedule.penalty_end > schedule.penalty_start {
        return Err(GnnError::BadConfig("penalty schedule must not increase".to_string()));
    }
    if budget.len() != model.l {
        return Err(GnnError::BadConfig("budget length must match AP count".to_string()));
    }
    let inputs: Vec<Tensor> = train_set
        .iter()
        .map(|s| model_input(model, s))
        .collect::<Result<_, _>>()?;
    let val_inputs: Vec<Tensor> =
        val_set.iter().map(|s| model_input(model, s)).collect::<Result<_, _>>()?;

    let trainable = model.params.trainable();
    let mut adam: Vec<AdamState> = trainable
        .iter()
        .map(|(_, t)| AdamState::new(t.numel(), schedule.learning_rate))
        .collect();

    let initial_val = validate_inputs(&model.params, &val_inputs, val_set, budget, noise_w);
    let mut best_val = initial_val;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut since_best = 0usize;
    let mut log = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        let lambda = lambda_at(epoch, schedule.epochs, schedule.lambda_ramp_frac);
        let lambda_p =
            penalty_at(epoch, schedule.epochs, schedule.penalty_start, schedule.penalty_end);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = substream(schedule.seed, tag::SHUFFLE, epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(schedule.batch_size).enumerate() {
            let mut acc: Vec<Tensor> =
                trainable.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
            let mut batch_loss = 0.0;
            for chunk in batch.chunks(CHUNK) {
                let results = map_indexed(chunk.len(), |i| {
                    let s = chunk[i];
                    forward_backward(
                        &model.params,
                        &inputs[s],
                        &train_set[s].h,
                        budget,
                        noise_w,
                        lambda,
                        lambda_p,
                    )
                });
                for res in results {
                    let fr = res.map_err(|e| GnnError::Diverged {
                        epoch,
                        batch: batch_idx,
                        reason: e.to_string(),
                    })?;
                    batch_loss += fr.loss;
                    for (a, g) in acc.iter_mut().zip(&fr.grads) {
                        for (av, gv) in a.data.iter_mut().zip(&g.data) {
                            *av += gv;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in acc.iter_mut() {
                for v in a.data.iter_mut() {
                    *v *= inv;
                }
            }
            if !batch_loss.is_finite() {
                return Err(GnnError::Diverged {
                    epoch,
                    batch: batch_idx,
                    reason: "non-finite batch loss".to_string(),
                });
            }
            for ((slot, state), grad) in
                model.params.trainable_mut().into_iter().zip(&mut adam).zip(&acc)
            {
                state.step(Arc::make_mut(slot), grad);
            }
            epoch_loss += batch_loss * inv;
            batches += 1;
        }
        recalibrate_bn(&mut model.params, &inputs).map_err(|e| GnnError::Diverged {
            epoch,
            batch: batches,
            reason: e.to_string(),
        })?;
        let val_min_rate =
            validate_inputs(&model.params, &val_inputs, val_set, budget, noise_w);
        log.push(EpochLog {
            epoch,
            lambda,
            lambda_p,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_min_rate,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} val min-rate {val_min_rate:.4} lambda {lambda:.2} \
             penalty {lambda_p:.5}",
            epoch_loss / batches.max(1) as f64
        );
        if val_min_rate > best_val {
            best_val = val_min_rate;
            best_epoch = epoch + 1;
            best_params = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if schedule.patience > 0 && since_best >= schedule.patience {
                break;
            }
        }
    }
    model.params = best_params;
    Ok(TrainReport { initial_val, log, best_epoch, best_val })
}

/// Evaluation-mode decision for one precomputed trunk input.
fn decide(
    params: &GnnParams,
    input: &Tensor,
    h: &ChannelTensor,
    budget: &[f64],
    noise_w: f64,
) -> Result<(Association, Decision), AdError> {
    let mut tape = Tape::new();
    let mut sink = Vec::new();
    let bound = bind_params(&mut tape, params);
    let x = tape.leaf_owned(input.clone());
    let feat = trunk_features(&mut tape, params, &bound, x, false, &mut sink)?;
    let raw = tape.affine(feat, bound.readout.w, bound.readout.b)?;
    let heads = normalize_readout(&mut tape, raw, h.l, h.m, budget, 1.0)?;
    let astar = tape.value(heads.astar).clone();
    let vhat = tape.value(heads.vhat).clone();
    let serving: Vec<usize> = (0..h.k)
        .map(|k| (0..h.l).find(|&l| astar.at2(k, l) == 1.0).unwrap_or(0))
        .collect();
    let assoc = Association::new(serving);
    let mut beams = BeamformerSet::zeros(h.k, h.l, h.m);
    for k in 0..h.k {
        for l in 0..h.l {
            let slot = beams.at_mut(k, l);
            for ant in 0..h.m {
                slot[ant] = num_complex::Complex64::new(
                    vhat.at2(k, l * 2 * h.m + 2 * ant),
                    vhat.at2(k, l * 2 * h.m + 2 * ant + 1),
                );
            }
        }
    }
    let sinrs = fairness::compute_sinrs(h, &assoc, &beams, noise_w);
    let rates: Vec<f64> = sinrs.iter().map(|s| (1.0 + s).log2()).collect();
    let min_rate = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_sinr = sinrs.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((assoc, Decision { beams, sinrs, rates, min_rate, min_sinr, converged: true }))
}

fn validate_inputs(
    params: &GnnParams,
    inputs: &[Tensor],
    samples: &[SampleData],
    budget: &[f64],
    noise_w: f64,
) -> f64 {
    let rates = map_indexed(inputs.len(), |i| {
        decide(params, &inputs[i], &samples[i].h, budget, noise_w)
            .map(|(_, d)| d.min_rate)
            .unwrap_or(f64::NEG_INFINITY)
    });
    rates.iter().sum::<f64>() / rates.len().max(1) as f64
}

/// Inference: hard one-hot association and budget-exact beams. The decision
/// keeps the beam rows for non-chosen APs too, but the rates only see each
/// user's serving beam.
pub fn infer(
    model: &GnnModel,
    sample: &SampleData,
    budget: &[f64],
    noise_w: f64,
) -> Result<(Association, Decision), GnnError> {
    let input = model_input(model, sample)?;
    Ok(decide(&model.params, &input, &sample.h, budget, noise_w)?)
}

/// Mean validation min-rate of a model over a sample set.
pub fn evaluate(
    model: &GnnModel,
    samples: &[SampleData],
    budget: &[f64],
    noise_w: f64,
) -> Result<f64, GnnError> {
    let inputs: Vec<Tensor> =
        samples.iter().map(|s| model_input(model, s)).collect::<Result<_, _>>()?;
    Ok(validate_inputs(&model.params, &inputs, samples, budget, noise_w))
}

// ---------------------------------------------------------------------------
// Persistence

impl GnnModel {
    /// Every tensor of the model under stable names: the trunk under
    /// "trunk.", frozen extractors (when present) under "image." and
    /// "pilot.". Parameters and running statistics alike.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        fn collect(params: &GnnParams, prefix: &str, out: &mut Vec<(String, Tensor)>) {
            for (name, t) in params.trainable() {
                out.push((format!("{prefix}{name}"), (*t).clone()));
            }
            for (name, t) in params.statistics() {
                out.push((format!("{prefix}{name}"), t));
            }
        }
        let mut out = Vec::new();
        collect(&self.params, "trunk.", &mut out);
        if let Some(ext) = &self.image_extractor {
            collect(&ext.params, "image.trunk.", &mut out);
        }
        if let Some(ext) = &self.pilot_extractor {
            collect(&ext.params, "pilot.trunk.", &mut out);
        }
        out
    }

    /// Restore every tensor from `fetch`, which returns the stored tensor
    /// for a name or None. Fails listing missing names.
    pub fn load_named(
        &mut self,
        mut fetch: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<(), GnnError> {
        self.params.load_tensors(|name| fetch(&format!("trunk.{name}")))?;
        if let Some(ext) = &mut self.image_extractor {
            ext.params.load_tensors(|name| fetch(&format!("image.trunk.{name}")))?;
        }
        if let Some(ext) = &mut self.pilot_extractor {
            ext.params.load_tensors(|name| fetch(&format!("pilot.trunk.{name}")))?;
        }
        Ok(())
    }
}
