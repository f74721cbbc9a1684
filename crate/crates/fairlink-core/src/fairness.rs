//! Joint user association and max-min-fair downlink beamforming.
//!
//! Rate model: with one-hot association a (a_kl = 1 iff AP l serves user k)
//! and per-slot beams v_kl,
//!     SINR_k = sum_l a_kl |h_kl^T v_kl|^2
//!            / (sum_l sum_{i != k} a_il |h_kl^T v_il|^2 + noise_w)
//! and R_k = log2(1 + SINR_k). The signal product is the plain transpose,
//! not conjugated, so a matched beam is proportional to conj(h).
//!
//! The solver bisects on a common SINR target. Each probe runs an uplink
//! power fixed point under per-AP dual noise weights, maps the resulting
//! MMSE receive directions back to downlink powers through a linear system,
//! and accepts the target only on an explicit certificate: every AP inside
//! its power budget with all users at the target. Infeasible candidates are
//! uniformly rescaled into the budget and kept as incumbents, so the routine
//! always returns the best feasible point it has seen.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelTensor;
use crate::linalg::{solve_complex, solve_real};
use crate::rng::{substream, tag};

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("association search over {combos} combinations exceeds limit {limit}")]
    SearchSpaceTooLarge { combos: u128, limit: u128 },
    #[error("AP {ap} spends {used} W, over its {cap} W budget")]
    PowerExceeded { ap: usize, used: f64, cap: f64 },
}

/// Per-AP power overshoot beyond which a decision counts as infeasible.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Exhaustive association search refuses above this many combinations.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

/// Serving AP index per user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    pub serving: Vec<usize>,
}

impl Association {
    pub fn new(serving: Vec<usize>) -> Self {
        Association { serving }
    }
}

/// Downlink beams for every (user, AP) slot, laid out like the channel
/// tensor. Classical solvers fill only serving slots; learned ones fill all.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeamformerSet {
    pub k: usize,
    pub l: usize,
    pub m: usize,
    pub data: Vec<Complex64>,
}

impl BeamformerSet {
    pub fn zeros(k: usize, l: usize, m: usize) -> BeamformerSet {
        BeamformerSet { k, l, m, data: vec![Complex64::new(0.0, 0.0); k * l * m] }
    }

    pub fn at(&self, k: usize, l: usize) -> &[Complex64] {
        let base = (k * self.l + l) * self.m;
        &self.data[base..base + self.m]
    }

    pub fn at_mut(&mut self, k: usize, l: usize) -> &mut [Complex64] {
        let base = (k * self.l + l) * self.m;
        &mut self.data[base..base + self.m]
    }

    pub fn scale(&mut self, s: f64) {
        for z in self.data.iter_mut() {
            *z *= s;
        }
    }
}

/// Solver output: beams plus the rates they achieve. `converged` is true
/// when the returned beams carry a feasibility certificate (every user at a
/// common SINR target, all budgets met); otherwise they are the best
/// incumbent seen before the iteration caps.
#[derive(Debug, Clone)]
pub struct Decision {
    pub beams: BeamformerSet,
    pub sinrs: Vec<f64>,
    pub rates: Vec<f64>,
    pub min_rate: f64,
    pub min_sinr: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Relative bisection width at which the target search stops.
    pub bisect_tol: f64,
    /// Combined uplink/dual iteration cap per feasibility probe.
    pub inner_cap: usize,
    /// Probe iterations without budget-overshoot progress before giving up.
    pub stall_cap: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { bisect_tol: 1e-4, inner_cap: 500, stall_cap: 60 }
    }
}

pub fn transpose_dot(h: &[Complex64], v: &[Complex64]) -> Complex64 {
    h.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// SINR of every user under the stated association and beams.
pub fn compute_sinrs(
    h: &ChannelTensor,
    assoc: &Association,
    beams: &BeamformerSet,
    noise_w: f64,
) -> Vec<f64> {
    assert_eq!((h.k, h.l, h.m), (beams.k, beams.l, beams.m));
    assert_eq!(assoc.serving.len(), h.k);
    (0..h.k)
        .map(|ku| {
            let lk = assoc.serving[ku];
            let sig = transpose_dot(h.at(ku, lk), beams.at(ku, lk)).norm_sqr();
            // Canonical addend order keeps user permutations bit-exact.
            let mut terms: Vec<f64> = (0..h.k)
                .filter(|&i| i != ku)
                .map(|i| {
                    let li = assoc.serving[i];
                    transpose_dot(h.at(ku, li), beams.at(i, li)).norm_sqr()
                })
                .collect();
            sig / (crate::num::ordered_sum(&mut terms) + noise_w)
        })
        .collect()
}

pub fn compute_rates(
    h: &ChannelTensor,
    assoc: &Association,
    beams: &BeamformerSet,
    noise_w: f64,
) -> Vec<f64> {
    compute_sinrs(h, assoc, beams, noise_w)
        .into_iter()
        .map(|s| (1.0 + s).log2())
        .collect()
}

/// Power each AP spends on the users it serves.
pub fn ap_powers(assoc: &Association, beams: &BeamformerSet) -> Vec<f64> {
    let mut p = vec![0.0; beams.l];
    for ku in 0..beams.k {
        let l = assoc.serving[ku];
        p[l] += beams.at(ku, l).iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    p
}

/// Largest relative budget overshoot across APs (0 when all within budget).
pub fn power_overshoot(assoc: &Association, beams: &BeamformerSet, budget: &[f64]) -> f64 {
    ap_powers(assoc, beams)
        .iter()
        .zip(budget)
        .map(|(used, cap)| (used / cap - 1.0).max(0.0))
        .fold(0.0, f64::max)
}

/// Check the structural decision constraints: a one-hot association of the
/// right size and every AP inside its power budget.
pub fn validate_constraints(
    assoc: &Association,
    beams: &BeamformerSet,
    budget: &[f64],
) -> Result<(), FairnessError> {
    let powers = ap_powers(assoc, beams);
    for (ap, (used, cap)) in powers.iter().zip(budget).enumerate() {
        if *used > cap * (1.0 + POWER_TOLERANCE) {
            return Err(FairnessError::PowerExceeded { ap, used: *used, cap: *cap });
        }
    }
    Ok(())
}

fn decision_from(
    h: &ChannelTensor,
    assoc: &Association,
    beams: BeamformerSet,
    noise_w: f64,
    converged: bool,
) -> Decision {
    let sinrs = compute_sinrs(h, assoc, &beams, noise_w);
    let rates: Vec<f64> = sinrs.iter().map(|s| (1.0 + s).log2()).collect();
    let min_rate = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_sinr = sinrs.iter().cloned().fold(f64::INFINITY, f64::min);
    Decision {
        beams,
        sinrs,
        rates,
        min_rate: if min_rate.is_finite() { min_rate } else { 0.0 },
        min_sinr: if min_sinr.is_finite() { min_sinr } else { 0.0 },
        converged,
    }
}

/// Matched-filter beams with each AP's budget split evenly across its users.
fn matched_filter_beams(
    h: &ChannelTensor,
    assoc: &Association,
    budget: &[f64],
) -> BeamformerSet {
    let mut counts = vec![0usize; h.l];
    for &l in &assoc.serving {
        counts[l] += 1;
    }
    let mut beams = BeamformerSet::zeros(h.k, h.l, h.m);
    for ku in 0..h.k {
        let lk = assoc.serving[ku];
        let row = h.at(ku, lk);
        let norm = row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let amp = (budget[lk] / counts[lk] as f64).sqrt() / norm;
        for (out, hv) in beams.at_mut(ku, lk).iter_mut().zip(row) {
            *out = hv.conj() * amp;
        }
    }
    beams
}

struct ProbeState {
    beta: Vec<f64>,
    q: Vec<f64>,
}

struct Incumbent {
    beams: BeamformerSet,
    min_sinr: f64,
}

/// True min-SINR of `beams`; replaces `best` when it improves.
fn consider_incumbent(
    h: &ChannelTensor,
    assoc: &Association,
    beams: &BeamformerSet,
    noise_w: f64,
    best: &mut Option<Incumbent>,
) {
    let sinrs = compute_sinrs(h, assoc, beams, noise_w);
    let min = sinrs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return;
    }
    if best.as_ref().map_or(true, |b| min > b.min_sinr) {
        *best = Some(Incumbent { beams: beams.clone(), min_sinr: min });
    }
}

/// One feasibility probe at SINR target `t`. Mutates the warm-started dual
/// state and may improve the incumbent. Returns true iff a certificate was
/// found: all users at target with every AP inside its budget.
#[allow(clippy::too_many_arguments)]
fn probe_target(
    h: &ChannelTensor,
    g: &[Complex64],
    assoc: &Association,
    budget: &[f64],
    noise_w: f64,
    t: f64,
    opts: &SolverOptions,
    state: &mut ProbeState,
    best_any: &mut Option<Incumbent>,
    best_certified: &mut Option<Incumbent>,
) -> bool {
    let (k, l_n, m) = (h.k, h.l, h.m);
    let g_row = |ku: usize, l: usize| &g[(ku * l_n + l) * m..(ku * l_n + l) * m + m];
    let q_bound = 1e25;
    let mut best_over = f64::INFINITY;
    let mut stall = 0usize;
    for it in 1..=opts.inner_cap {
        // Uplink power sweep: q_k = t / (g_k^H Z_k^{-1} g_k) with dual noise
        // beta at the serving AP and uplink interference from the other users.
        for ku in 0..k {
            let lk = assoc.serving[ku];
            let mut z = vec![Complex64::new(0.0, 0.0); m * m];
            for d in 0..m {
                z[d * m + d] = Complex64::new(state.beta[lk], 0.0);
            }
            for i in 0..k {
                if i == ku {
                    continue;
                }
                let gi = g_row(i, lk);
                for a in 0..m {
                    for b in 0..m {
                        z[a * m + b] += state.q[i] * gi[a] * gi[b].conj();
                    }
                }
            }
            let gk = g_row(ku, lk);
            let x = match solve_complex(&z, m, gk) {
                Some(x) => x,
                None => return false,
            };
            let denom: f64 = gk.iter().zip(&x).map(|(gv, xv)| (gv.conj() * xv).re).sum();
            if denom <= 1e-300 {
                return false;
            }
            state.q[ku] = t / denom;
        }
        if state.q.iter().any(|&q| !q.is_finite() || q > q_bound) {
            return false;
        }

        // MMSE receive directions under the updated powers.
        let mut dirs: Vec<Vec<Complex64>> = Vec::with_capacity(k);
        let mut ok = true;
        for ku in 0..k {
            let lk = assoc.serving[ku];
            let mut z = vec![Complex64::new(0.0, 0.0); m * m];
            for d in 0..m {
                z[d * m + d] = Complex64::new(state.beta[lk], 0.0);
            }
            for i in 0..k {
                if i == ku {
                    continue;
                }
                let gi = g_row(i, lk);
                for a in 0..m {
                    for b in 0..m {
                        z[a * m + b] += state.q[i] * gi[a] * gi[b].conj();
                    }
                }
            }
            let gk = g_row(ku, lk);
            match solve_complex(&z, m, gk) {
                Some(x) => {
                    let norm = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    if norm <= 1e-300 {
                        ok = false;
                        break;
                    }
                    dirs.push(x.iter().map(|z| z / norm).collect());
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            return false;
        }

        // Downlink power mapping: pick per-user powers d so every user sits
        // exactly at target t when transmitting sqrt(d_k) * dir_k.
        let mut mat = vec![0.0f64; k * k];
        for ku in 0..k {
            for i in 0..k {
                let li = assoc.serving[i];
                let cross = g_row(ku, li)
                    .iter()
                    .zip(&dirs[i])
                    .map(|(gv, uv)| gv.conj() * uv)
                    .sum::<Complex64>()
                    .norm_sqr();
                if i == ku {
                    mat[ku * k + i] = cross / t;
                } else {
                    mat[ku * k + i] = -cross;
                }
            }
        }
        let rhs = vec![noise_w; k];
        let delta = solve_real(&mat, k, &rhs);
        let mut powers: Option<Vec<f64>> = None;
        if let Some(d) = delta {
            if d.iter().all(|&x| x.is_finite() && x > 0.0) {
                powers = Some(d);
            }
        }

        if let Some(d) = powers {
            let mut per_ap = vec![0.0f64; l_n];
            for ku in 0..k {
                per_ap[assoc.serving[ku]] += d[ku];
            }
            let over = per_ap
                .iter()
                .zip(budget)
                .map(|(used, cap)| used / cap)
                .fold(0.0, f64::max);

            let mut beams = BeamformerSet::zeros(k, l_n, m);
            for ku in 0..k {
                let lk = assoc.serving[ku];
                let amp = d[ku].sqrt();
                // |h^T v| = |g^H v| with g = conj(h), so the receive
                // direction transmits unchanged.
                for (out, uv) in beams.at_mut(ku, lk).iter_mut().zip(&dirs[ku]) {
                    *out = uv * amp;
                }
            }
            if over <= 1.0 + POWER_TOLERANCE {
                consider_incumbent(h, assoc, &beams, noise_w, best_certified);
                consider_incumbent(h, assoc, &beams, noise_w, best_any);
                return true;
            }
            beams.scale((1.0 / over).sqrt());
            consider_incumbent(h, assoc, &beams, noise_w, best_any);

            if over < best_over - 1e-6 {
                best_over = over;
                stall = 0;
            } else {
                stall += 1;
                if stall > opts.stall_cap {
                    return false;
                }
            }

            // Dual ascent: raise the noise weight of overloaded APs so the
            // uplink solution steers power away from them.
            let step = 0.1 / (it as f64).sqrt();
            for l in 0..l_n {
                state.beta[l] = (state.beta[l] + step * (per_ap[l] / budget[l] - 1.0)).max(1e-12);
            }
            let scale: f64 = state.beta.iter().zip(budget).map(|(b, p)| b * p).sum();
            if scale > 0.0 && scale.is_finite() {
                for b in state.beta.iter_mut() {
                    *b /= scale;
                }
            }
        } else {
            stall += 1;
            if stall > opts.stall_cap {
                return false;
            }
        }
    }
    false
}

/// Max-min fair beams for a fixed association. Bisects on the common SINR
/// target; returns the best feasible decision observed.
pub fn maxmin_beamforming(
    h: &ChannelTensor,
    assoc: &Association,
    budget: &[f64],
    noise_w: f64,
    opts: &SolverOptions,
) -> Decision {
    let (k, l_n, m) = (h.k, h.l, h.m);
    assert!(k >= 1, "need at least one user");
    assert_eq!(assoc.serving.len(), k);
    assert_eq!(budget.len(), l_n);
    assert!(assoc.serving.iter().all(|&l| l < l_n), "association out of range");
    assert!(noise_w > 0.0, "noise power must be positive");

    let g: Vec<Complex64> = h.data.iter().map(|z| z.conj()).collect();

    // Interference-free ceiling for the weakest user bounds the search.
    let t_hi = (0..k)
        .map(|ku| {
            let lk = assoc.serving[ku];
            let norm2: f64 = h.at(ku, lk).iter().map(|z| z.norm_sqr()).sum();
            budget[lk] * norm2 / noise_w
        })
        .fold(f64::INFINITY, f64::min);
    if !(t_hi > 0.0) || !t_hi.is_finite() {
        return decision_from(h, assoc, BeamformerSet::zeros(k, l_n, m), noise_w, false);
    }

    let mut best_any: Option<Incumbent> = None;
    let mut best_certified: Option<Incumbent> = None;
    let mrt = matched_filter_beams(h, assoc, budget);
    consider_incumbent(h, assoc, &mrt, noise_w, &mut best_any);

    let budget_sum: f64 = budget.iter().sum();
    let mut state = ProbeState {
        beta: budget.iter().map(|_| 1.0 / budget_sum).collect(),
        q: vec![0.0; k],
    };

    let mut lo = 0.0f64;
    let mut hi = t_hi;
    for _ in 0..64 {
        if hi - lo <= opts.bisect_tol * hi {
            break;
        }
        let t = 0.5 * (lo + hi);
        // Fresh uplink powers per probe; dual weights stay warm-started.
        state.q.iter_mut().for_each(|q| *q = 0.0);
        let feasible = probe_target(
            h,
            &g,
            assoc,
            budget,
            noise_w,
            t,
            opts,
            &mut state,
            &mut best_any,
            &mut best_certified,
        );
        if feasible {
            lo = t;
        } else {
            hi = t;
        }
    }

    // Prefer the certified point (balanced SINRs by construction) unless an
    // uncertified incumbent is clearly better.
    match (best_certified, best_any) {
        (Some(cert), Some(any)) => {
            if any.min_sinr > cert.min_sinr * (1.0 + 1e-3) {
                decision_from(h, assoc, any.beams, noise_w, false)
            } else {
                decision_from(h, assoc, cert.beams, noise_w, true)
            }
        }
        (Some(cert), None) => decision_from(h, assoc, cert.beams, noise_w, true),
        (None, Some(any)) => decision_from(h, assoc, any.beams, noise_w, false),
        (None, None) => {
            decision_from(h, assoc, BeamformerSet::zeros(k, l_n, m), noise_w, false)
        }
    }
}

/// Standalone feasibility probe at SINR target `t` (no warm start): true iff
/// a certificate is found at `t`.
pub fn target_feasible(
    h: &ChannelTensor,
    assoc: &Association,
    budget: &[f64],
    noise_w: f64,
    t: f64,
    opts: &SolverOptions,
) -> bool {
    let g: Vec<Complex64> = h.data.iter().map(|z| z.conj()).collect();
    let budget_sum: f64 = budget.iter().sum();
    let mut state = ProbeState {
        beta: budget.iter().map(|_| 1.0 / budget_sum).collect(),
        q: vec![0.0; h.k],
    };
    let mut any = None;
    let mut cert = None;
    probe_target(h, &g, assoc, budget, noise_w, t, opts, &mut state, &mut any, &mut cert)
}

/// Serve every user from the AP with the largest channel norm (ties to the
/// lowest index).
pub fn strongest_channel_association(h: &ChannelTensor) -> Association {
    let serving = (0..h.k)
        .map(|ku| {
            let mut best_l = 0usize;
            let mut best = -1.0f64;
            for l in 0..h.l {
                let norm2: f64 = h.at(ku, l).iter().map(|z| z.norm_sqr()).sum();
                if norm2 > best {
                    best = norm2;
                    best_l = l;
                }
            }
            best_l
        })
        .collect();
    Association::new(serving)
}

/// Try every association and keep the one with the best max-min rate. Ties
/// go to the lexicographically smallest serving vector.
pub fn exhaustive_association(
    h: &ChannelTensor,
    budget: &[f64],
    noise_w: f64,
    opts: &SolverOptions,
) -> Result<(Association, Decision), FairnessError> {
    let (k, l_n) = (h.k, h.l);
    assert!(k >= 1 && l_n >= 1);
    let combos = (l_n as u128)
        .checked_pow(k as u32)
        .filter(|&c| c <= EXHAUSTIVE_LIMIT)
        .ok_or(FairnessError::SearchSpaceTooLarge {
            combos: (l_n as f64).powi(k as i32) as u128,
            limit: EXHAUSTIVE_LIMIT,
        })?;

    let solved: Vec<(Association, Decision)> =
        crate::parallel::map_indexed(combos as usize, |c| {
            let mut serving = vec![0usize; k];
            let mut rem = c;
            for ku in (0..k).rev() {
                serving[ku] = rem % l_n;
                rem /= l_n;
            }
            let assoc = Association::new(serving);
            let dec = maxmin_beamforming(h, &assoc, budget, noise_w, opts);
            (assoc, dec)
        });

    let mut best = 0usize;
    for c in 1..solved.len() {
        if solved[c].1.min_rate > solved[best].1.min_rate {
            best = c;
        }
    }
    let (assoc, dec) = solved.into_iter().nth(best).expect("nonempty search");
    Ok((assoc, dec))
}

/// Reference solution by multistart projected gradient ascent on the minimum
/// SINR, with numerical gradients. Slow but independent of the duality
/// machinery; used to validate the solver. Returns the best min-rate found.
pub fn multistart_ascent_reference(
    h: &ChannelTensor,
    assoc: &Association,
    budget: &[f64],
    noise_w: f64,
    restarts: usize,
    iters: usize,
    seed: u64,
) -> f64 {
    use rand::Rng;
    let (k, l_n, m) = (h.k, h.l, h.m);
    let dims = k * 2 * m;

    // x packs the serving beam of each user as interleaved re/im.
    let project = |x: &mut [f64]| {
        let mut used = vec![0.0f64; l_n];
        for ku in 0..k {
            let lk = assoc.serving[ku];
            let s: f64 = x[ku * 2 * m..(ku + 1) * 2 * m].iter().map(|v| v * v).sum();
            used[lk] += s;
        }
        let mut scale = vec![1.0f64; l_n];
        for l in 0..l_n {
            if used[l] > budget[l] {
                scale[l] = (budget[l] / used[l]).sqrt();
            }
        }
        for ku in 0..k {
            let s = scale[assoc.serving[ku]];
            if s < 1.0 {
                for v in x[ku * 2 * m..(ku + 1) * 2 * m].iter_mut() {
                    *v *= s;
                }
            }
        }
    };

    let sinrs_of = |x: &[f64]| -> Vec<f64> {
        let beam = |ku: usize, mi: usize| {
            Complex64::new(x[ku * 2 * m + 2 * mi], x[ku * 2 * m + 2 * mi + 1])
        };
        (0..k)
            .map(|ku| {
                let lk = assoc.serving[ku];
                let mut sig = Complex64::new(0.0, 0.0);
                for mi in 0..m {
                    sig += h.at(ku, lk)[mi] * beam(ku, mi);
                }
                let mut interf = 0.0;
                for i in 0..k {
                    if i == ku {
                        continue;
                    }
                    let li = assoc.serving[i];
                    let mut cross = Complex64::new(0.0, 0.0);
                    for mi in 0..m {
                        cross += h.at(ku, li)[mi] * beam(i, mi);
                    }
                    interf += cross.norm_sqr();
                }
                sig.norm_sqr() / (interf + noise_w)
            })
            .collect()
    };
    let min_sinr = |x: &[f64]| -> f64 {
        sinrs_of(x).into_iter().fold(f64::INFINITY, f64::min)
    };
    // Smoothed minimum: -tau ln(sum exp(-s/tau)) rises to min(s) as tau -> 0
    // and keeps the ascent from stalling on the kinks of the exact min.
    let soft_min = |x: &[f64], tau: f64| -> f64 {
        let s = sinrs_of(x);
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let z: f64 = s.iter().map(|v| (-(v - lo) / tau).exp()).sum();
        lo - tau * z.ln()
    };

    let mut best_sinr = 0.0f64;
    for r in 0..restarts {
        let mut x = vec![0.0f64; dims];
        if r == 0 {
            let mf = matched_filter_beams(h, assoc, budget);
            for ku in 0..k {
                let row = mf.at(ku, assoc.serving[ku]);
                for mi in 0..m {
                    x[ku * 2 * m + 2 * mi] = row[mi].re;
                    x[ku * 2 * m + 2 * mi + 1] = row[mi].im;
                }
            }
        } else {
            let mut rng = substream(seed, tag::ORACLE, r as u64);
            for v in x.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            // Start on the budget boundary of every AP.
            let mut used = vec![0.0f64; l_n];
            for ku in 0..k {
                let s: f64 = x[ku * 2 * m..(ku + 1) * 2 * m].iter().map(|v| v * v).sum();
                used[assoc.serving[ku]] += s;
            }
            for ku in 0..k {
                let lk = assoc.serving[ku];
                if used[lk] > 0.0 {
                    let s = (budget[lk] / used[lk]).sqrt();
                    for v in x[ku * 2 * m..(ku + 1) * 2 * m].iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
        project(&mut x);
        let scale = budget.iter().cloned().fold(0.0, f64::max).sqrt();
        let mut step = 0.1 * scale;
        let eps = 1e-7 * scale.max(1e-12);
        // Anneal the smoothing temperature from coarse to sharp.
        let tau0 = 0.2 * min_sinr(&x).max(0.05);
        let decay = (1e-4f64).powf(1.0 / iters.max(1) as f64);
        let mut tau = tau0;
        for _ in 0..iters {
            tau = (tau * decay).max(1e-9);
            let f = soft_min(&x, tau);
            let mut grad = vec![0.0f64; dims];
            for d in 0..dims {
                let keep = x[d];
                x[d] = keep + eps;
                let up = soft_min(&x, tau);
                x[d] = keep - eps;
                let dn = soft_min(&x, tau);
                x[d] = keep;
                grad[d] = (up - dn) / (2.0 * eps);
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm <= 1e-300 {
                continue;
            }
            let mut xn = x.clone();
            for d in 0..dims {
                xn[d] += step * grad[d] / gnorm;
            }
            project(&mut xn);
            let fn_ = soft_min(&xn, tau);
            if fn_ > f {
                x = xn;
                step *= 1.2;
            } else {
                step = (step * 0.5).max(1e-10 * scale.max(1e-12));
            }
        }
        // Short exact-min polish once the smoothing has done its job.
        let mut fex = min_sinr(&x);
        let mut pstep = 0.01 * scale;
        for _ in 0..(iters / 4).max(30) {
            let mut grad = vec![0.0f64; dims];
            for d in 0..dims {
                let keep = x[d];
                x[d] = keep + eps;
                let up = min_sinr(&x);
                x[d] = keep - eps;
                let dn = min_sinr(&x);
                x[d] = keep;
                grad[d] = (up - dn) / (2.0 * eps);
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm <= 1e-300 {
                break;
            }
            let mut xn = x.clone();
            for d in 0..dims {
                xn[d] += pstep * grad[d] / gnorm;
            }
            project(&mut xn);
            let fn_ = min_sinr(&xn);
            if fn_ > fex {
                x = xn;
                fex = fn_;
                pstep *= 1.2;
            } else {
                pstep *= 0.5;
                if pstep < 1e-11 * scale.max(1e-12) {
                    break;
                }
            }
        }
        best_sinr = best_sinr.max(fex);
    }
    (1.0 + best_sinr).log2()
}
