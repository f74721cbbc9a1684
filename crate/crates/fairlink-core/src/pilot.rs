//! Uplink pilot training and linear MMSE channel estimation.
//!
//! Each user transmits a dedicated pilot sequence; every AP correlates its
//! received block against each sequence to get a raw per-user channel
//! observation, then shrinks it toward per-slot channel statistics gathered
//! offline from the scene geometry.

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{synthesize_channel, ChannelTensor};
use crate::linalg::{matvec_complex, solve_complex};
use crate::rng::{derive, substream, tag};
use crate::scene::Scene;

#[derive(Debug, Error)]
pub enum PilotError {
    #[error("{users} users need at least {users} pilot symbols, got {symbols}")]
    TooManyUsers { users: usize, symbols: usize },
}

/// Orthogonal pilot book: row k holds user k's length-`n_u` sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotMatrix {
    pub k: usize,
    pub n_u: usize,
    /// Per-symbol transmit power (watts).
    pub power: f64,
    data: Vec<Complex64>,
}

impl PilotMatrix {
    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.n_u..(k + 1) * self.n_u]
    }
}

/// Discrete-Fourier rows scaled to per-symbol power `power`; rows are
/// mutually orthogonal with inner product `power * n_u` against themselves.
pub fn make_pilots(k: usize, n_u: usize, power: f64) -> Result<PilotMatrix, PilotError> {
    if k > n_u {
        return Err(PilotError::TooManyUsers { users: k, symbols: n_u });
    }
    let amp = power.sqrt();
    let mut data = Vec::with_capacity(k * n_u);
    for ki in 0..k {
        for n in 0..n_u {
            let phase = -2.0 * std::f64::consts::PI * (ki as f64) * (n as f64) / (n_u as f64);
            data.push(Complex64::from_polar(amp, phase));
        }
    }
    Ok(PilotMatrix { k, n_u, power, data })
}

/// Simulate the uplink training block at every AP and correlate against each
/// pilot. The result has the channel tensor's shape; entry (k, l) is
///     r_kl = h_kl + n_kl,   n_kl ~ CN(0, noise_w / (power * n_u) I).
/// Noise is drawn from `substream(seed, PILOT, l)` so a fixed seed pins the
/// whole observation.
pub fn observe_pilots(
    h: &ChannelTensor,
    pilots: &PilotMatrix,
    noise_w: f64,
    seed: u64,
) -> ChannelTensor {
    assert_eq!(h.k, pilots.k, "channel and pilot book disagree on user count");
    let (k, l, m, n_u) = (h.k, h.l, h.m, pilots.n_u);
    let scale = 1.0 / (pilots.power * n_u as f64);
    let per_ap = crate::parallel::map_indexed(l, |li| {
        let mut rng = substream(seed, tag::PILOT, li as u64);
        let comp = Normal::new(0.0, (noise_w / 2.0).sqrt()).expect("noise sigma");
        // Received block Y_l (m x n_u): superposed pilots through the channel
        // plus receiver noise.
        let mut block = vec![Complex64::new(0.0, 0.0); m * n_u];
        for ki in 0..k {
            let hv = h.at(ki, li);
            let s = pilots.row(ki);
            for mi in 0..m {
                for n in 0..n_u {
                    block[mi * n_u + n] += hv[mi] * s[n].conj();
                }
            }
        }
        if noise_w > 0.0 {
            for e in block.iter_mut() {
                *e += Complex64::new(comp.sample(&mut rng), comp.sample(&mut rng));
            }
        }
        // Correlate: r_kl = Y_l s_k / (power * n_u).
        let mut out = vec![Complex64::new(0.0, 0.0); k * m];
        for ki in 0..k {
            let s = pilots.row(ki);
            for mi in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..n_u {
                    acc += block[mi * n_u + n] * s[n];
                }
                out[ki * m + mi] = acc * scale;
            }
        }
        out
    });
    let mut r = ChannelTensor::zeros(k, l, m);
    r.seed = seed;
    for li in 0..l {
        for ki in 0..k {
            r.at_mut(ki, li).copy_from_slice(&per_ap[li][ki * m..(ki + 1) * m]);
        }
    }
    r
}

/// Per-slot first and second moments of the channel, estimated by spawning
/// fresh user drops and resynthesizing the channel `n_realizations` times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStatistics {
    pub k: usize,
    pub l: usize,
    pub m: usize,
    pub n_realizations: usize,
    /// Scene fingerprint the statistics were gathered under.
    pub scene_hash: u64,
    /// mean[(k*l + l_i)*m ..][m] per slot.
    mean: Vec<Complex64>,
    /// cov[(k*l + l_i)*m*m ..][m*m] per slot, row-major Hermitian.
    cov: Vec<Complex64>,
}

impl ChannelStatistics {
    pub fn mean(&self, k: usize, l: usize) -> &[Complex64] {
        let base = (k * self.l + l) * self.m;
        &self.mean[base..base + self.m]
    }

    pub fn cov(&self, k: usize, l: usize) -> &[Complex64] {
        let base = (k * self.l + l) * self.m * self.m;
        &self.cov[base..base + self.m * self.m]
    }
}

/// Gather `ChannelStatistics` for a `k`-user drop in `scene`. Realization `t`
/// spawns users with `derive(seed, STATS, 2t)` and synthesizes diffuse
/// components with `derive(seed, STATS, 2t+1)`, so the gather is reproducible
/// and independent of thread count.
pub fn collect_statistics(
    scene: &Scene,
    k: usize,
    n_realizations: usize,
    seed: u64,
) -> ChannelStatistics {
    assert!(n_realizations > 0);
    let l = scene.n_aps();
    let m = scene.n_antennas();
    let reals: Vec<ChannelTensor> = crate::parallel::map_indexed(n_realizations, |t| {
        let users = scene
            .spawn_ues(k, derive(seed, tag::STATS, 2 * t as u64))
            .expect("statistics spawn");
        synthesize_channel(scene, &users, derive(seed, tag::STATS, 2 * t as u64 + 1))
    });
    let slots = k * l;
    let inv_n = 1.0 / n_realizations as f64;
    let mut mean = vec![Complex64::new(0.0, 0.0); slots * m];
    for r in &reals {
        for (acc, v) in mean.iter_mut().zip(&r.data) {
            *acc += v * inv_n;
        }
    }
    // Gram form keeps the estimate positive semidefinite by construction.
    let mut cov = vec![Complex64::new(0.0, 0.0); slots * m * m];
    for r in &reals {
        for ki in 0..k {
            for li in 0..l {
                let mu = &mean[(ki * l + li) * m..(ki * l + li) * m + m];
                let h = r.at(ki, li);
                let base = (ki * l + li) * m * m;
                for a in 0..m {
                    let da = h[a] - mu[a];
                    for b in 0..m {
                        let db = h[b] - mu[b];
                        cov[base + a * m + b] += da * db.conj() * inv_n;
                    }
                }
            }
        }
    }
    ChannelStatistics {
        k,
        l,
        m,
        n_realizations,
        scene_hash: scene.hash(),
        mean,
        cov,
    }
}

/// Linear MMSE shrinkage of a raw pilot observation toward the slot prior:
///     est = mu + C (C + v I)^{-1} (r - mu),   v = noise_w / (power * n_u).
/// A singular system falls back to a tiny trace-scaled ridge.
pub fn lmmse_estimate(
    r: &ChannelTensor,
    stats: &ChannelStatistics,
    noise_w: f64,
    pilot_power: f64,
    n_u: usize,
) -> ChannelTensor {
    assert_eq!((r.k, r.l, r.m), (stats.k, stats.l, stats.m), "observation/statistics shape");
    let (k, l, m) = (r.k, r.l, r.m);
    let v = noise_w / (pilot_power * n_u as f64);
    let mut est = ChannelTensor::zeros(k, l, m);
    est.seed = r.seed;
    for ki in 0..k {
        for li in 0..l {
            let mu = stats.mean(ki, li);
            let c = stats.cov(ki, li);
            let innov: Vec<Complex64> =
                (0..m).map(|i| r.at(ki, li)[i] - mu[i]).collect();
            let mut sys = c.to_vec();
            for d in 0..m {
                sys[d * m + d] += Complex64::new(v, 0.0);
            }
            let x = solve_complex(&sys, m, &innov).unwrap_or_else(|| {
                let trace: f64 = (0..m).map(|d| c[d * m + d].re).sum();
                let ridge = 1e-12 * trace.max(f64::MIN_POSITIVE);
                let mut sys2 = c.to_vec();
                for d in 0..m {
                    sys2[d * m + d] += Complex64::new(v + ridge, 0.0);
                }
                solve_complex(&sys2, m, &innov)
                    .expect("ridge-regularized system must be solvable")
            });
            let cx = matvec_complex(c, m, &x);
            let out = est.at_mut(ki, li);
            for i in 0..m {
                out[i] = mu[i] + cx[i];
            }
        }
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Scene, SceneConfig};

    fn full_scene() -> Scene {
        SceneConfig::urban_intersection().build().unwrap()
    }

    fn small_scene(n_aps: usize) -> Scene {
        SceneConfig::urban_intersection_reduced(n_aps, 2, 2).build().unwrap()
    }

    fn max_abs(t: &ChannelTensor) -> f64 {
        t.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn pilot_rows_are_orthogonal_with_stated_power() {
        let p = make_pilots(4, 16, 5.0).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let inner: Complex64 =
                    (0..16).map(|n| p.row(a)[n].conj() * p.row(b)[n]).sum();
                let expect = if a == b { 5.0 * 16.0 } else { 0.0 };
                assert!(
                    (inner - Complex64::new(expect, 0.0)).norm() < 1e-12 * 5.0 * 16.0,
                    "rows {a},{b}: {inner}"
                );
            }
        }
    }

    #[test]
    fn pilot_book_rejects_too_many_users() {
        assert!(matches!(
            make_pilots(5, 4, 1.0),
            Err(PilotError::TooManyUsers { users: 5, symbols: 4 })
        ));
    }

    #[test]
    fn noiseless_observation_reconstructs_channel() {
        let scene = full_scene();
        let users = scene.spawn_ues(4, 11).unwrap();
        let h = synthesize_channel(&scene, &users, 0);
        let pilots = make_pilots(4, 4, scene.rf.pilot_power_w).unwrap();
        let r = observe_pilots(&h, &pilots, 0.0, 99);
        let scale = max_abs(&h);
        let worst = h
            .data
            .iter()
            .zip(&r.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst / scale < 1e-12, "relative deviation {}", worst / scale);
    }

    #[test]
    fn observation_error_variance_matches_closed_form() {
        // Zero channel isolates the correlated-noise term. Per complex entry
        // the variance must be noise_w / (power * n_u).
        let (k, l, m, n_u) = (2usize, 1usize, 4usize, 8usize);
        let noise_w = 0.3;
        let power = 2.0;
        let pilots = make_pilots(k, n_u, power).unwrap();
        let h = ChannelTensor::zeros(k, l, m);
        let mut acc = 0.0;
        let mut count = 0usize;
        for trial in 0..10_000u64 {
            let r = observe_pilots(&h, &pilots, noise_w, trial);
            for z in &r.data {
                acc += z.norm_sqr();
                count += 1;
            }
        }
        let expect = noise_w / (power * n_u as f64);
        let got = acc / count as f64;
        assert!(
            (got - expect).abs() < 0.05 * expect,
            "variance {got} vs {expect}"
        );
    }

    #[test]
    fn quadrupling_symbols_quarters_error_variance() {
        let (k, l, m) = (2usize, 1usize, 4usize);
        let noise_w = 0.3;
        let power = 2.0;
        let h = ChannelTensor::zeros(k, l, m);
        let mut var = [0.0f64; 2];
        for (slot, n_u) in [4usize, 16].iter().enumerate() {
            let pilots = make_pilots(k, *n_u, power).unwrap();
            let mut acc = 0.0;
            let mut count = 0usize;
            for trial in 0..6000u64 {
                let r = observe_pilots(&h, &pilots, noise_w, trial);
                for z in &r.data {
                    acc += z.norm_sqr();
                    count += 1;
                }
            }
            var[slot] = acc / count as f64;
        }
        let ratio = var[0] / var[1];
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn observation_is_seed_deterministic() {
        let scene = small_scene(2);
        let users = scene.spawn_ues(2, 5).unwrap();
        let h = synthesize_channel(&scene, &users, 1);
        let pilots = make_pilots(2, 4, scene.rf.pilot_power_w).unwrap();
        let a = observe_pilots(&h, &pilots, scene.rf.noise_w, 42);
        let b = observe_pilots(&h, &pilots, scene.rf.noise_w, 42);
        let c = observe_pilots(&h, &pilots, scene.rf.noise_w, 43);
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn statistics_are_reproducible_and_tagged() {
        let scene = small_scene(2);
        let s1 = collect_statistics(&scene, 2, 50, 7);
        let s2 = collect_statistics(&scene, 2, 50, 7);
        assert_eq!(s1.mean, s2.mean);
        assert_eq!(s1.cov, s2.cov);
        assert_eq!(s1.scene_hash, scene.hash());
        assert_eq!(s1.n_realizations, 50);
    }

    #[test]
    fn covariance_is_hermitian_psd() {
        use rand::Rng;
        let scene = small_scene(3);
        let stats = collect_statistics(&scene, 3, 200, 21);
        let m = stats.m;
        let mut rng = substream(77, tag::ORACLE, 1);
        for ki in 0..3 {
            for li in 0..scene.n_aps() {
                let c = stats.cov(ki, li);
                let trace: f64 = (0..m).map(|d| c[d * m + d].re).sum();
                for a in 0..m {
                    for b in 0..m {
                        let diff = c[a * m + b] - c[b * m + a].conj();
                        assert!(diff.norm() <= 1e-12 * trace.max(1e-300));
                    }
                }
                for _ in 0..20 {
                    let z: Vec<Complex64> = (0..m)
                        .map(|_| {
                            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                        })
                        .collect();
                    let cz = matvec_complex(c, m, &z);
                    let quad: Complex64 =
                        z.iter().zip(&cz).map(|(zi, ci)| zi.conj() * ci).sum();
                    assert!(quad.re >= -1e-9 * trace.max(1e-300));
                }
            }
        }
    }

    #[test]
    fn lmmse_zero_noise_returns_observation() {
        let scene = small_scene(2);
        let stats = collect_statistics(&scene, 2, 300, 3);
        let users = scene.spawn_ues(2, 9).unwrap();
        let h = synthesize_channel(&scene, &users, 2);
        let pilots = make_pilots(2, 4, scene.rf.pilot_power_w).unwrap();
        let r = observe_pilots(&h, &pilots, 0.0, 0);
        let est = lmmse_estimate(&r, &stats, 0.0, scene.rf.pilot_power_w, 4);
        let scale = max_abs(&r);
        for (a, b) in est.data.iter().zip(&r.data) {
            assert!((a - b).norm() < 1e-8 * scale);
        }
    }

    #[test]
    fn lmmse_infinite_noise_returns_prior_mean() {
        let scene = small_scene(2);
        let stats = collect_statistics(&scene, 2, 300, 3);
        let users = scene.spawn_ues(2, 9).unwrap();
        let h = synthesize_channel(&scene, &users, 2);
        let pilots = make_pilots(2, 4, scene.rf.pilot_power_w).unwrap();
        let r = observe_pilots(&h, &pilots, scene.rf.noise_w, 0);
        let est = lmmse_estimate(&r, &stats, 1e12, scene.rf.pilot_power_w, 4);
        for ki in 0..2 {
            for li in 0..scene.n_aps() {
                let mu = stats.mean(ki, li);
                for (a, b) in est.at(ki, li).iter().zip(mu) {
                    assert!((a - b).norm() < 1e-12 * max_abs(&r).max(1e-300) + 1e-20);
                }
            }
        }
    }

    #[test]
    fn lmmse_beats_raw_observation() {
        let scene = small_scene(3);
        let stats = collect_statistics(&scene, 3, 1000, 13);
        let pilots = make_pilots(3, 4, scene.rf.pilot_power_w).unwrap();
        let mut raw = 0.0;
        let mut shrunk = 0.0;
        for t in 0..200u64 {
            let users = scene.spawn_ues(3, derive(100, tag::SAMPLE, t)).unwrap();
            let h = synthesize_channel(&scene, &users, derive(101, tag::SAMPLE, t));
            let r = observe_pilots(&h, &pilots, scene.rf.noise_w, derive(102, tag::SAMPLE, t));
            let est = lmmse_estimate(&r, &stats, scene.rf.noise_w, scene.rf.pilot_power_w, 4);
            for ((hv, rv), ev) in h.data.iter().zip(&r.data).zip(&est.data) {
                raw += (rv - hv).norm_sqr();
                shrunk += (ev - hv).norm_sqr();
            }
        }
        assert!(
            shrunk < raw,
            "shrinkage must not increase error: {shrunk} vs {raw}"
        );
        // At 4 symbols the raw observation is noise-dominated, so the gain
        // should be large, not marginal.
        assert!(shrunk < 0.5 * raw, "expected strong shrinkage: {shrunk} vs {raw}");
    }

    #[test]
    fn degenerate_scene_gives_zero_covariance_and_ridge_survives() {
        // Shrink the road to one point: every spawn lands identically, so the
        // channel is deterministic and the covariance collapses.
        let mut scene = small_scene(2);
        scene.road.corners = vec![[30.0, -55.0], [30.0, -55.0 + 1e-12]];
        scene.road.closed = false;
        let stats = collect_statistics(&scene, 1, 40, 5);
        let m = stats.m;
        for li in 0..scene.n_aps() {
            let c = stats.cov(0, li);
            let trace: f64 = (0..m).map(|d| c[d * m + d].re).sum();
            assert!(trace < 1e-25, "trace {trace}");
        }
        // Zero covariance plus zero noise makes the plain system singular;
        // the ridge path must still produce finite output.
        let users = scene.spawn_ues(1, 0).unwrap();
        let h = synthesize_channel(&scene, &users, 0);
        let pilots = make_pilots(1, 4, scene.rf.pilot_power_w).unwrap();
        let r = observe_pilots(&h, &pilots, 0.0, 0);
        let est = lmmse_estimate(&r, &stats, 0.0, scene.rf.pilot_power_w, 4);
        assert!(est.data.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    }
}
