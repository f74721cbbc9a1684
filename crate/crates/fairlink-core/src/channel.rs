//! Geometric multipath channel synthesis.
//!
//! Propagation is modeled with images: the line-of-sight path, one bounce off
//! the ground plane, and one bounce off each visible facade. Every path
//! carries a free-space complex amplitude `lambda / (4 pi d) * exp(-j 2 pi d
//! / lambda)` times the product of reflection coefficients, and excites the
//! planar array through its departure direction.
//!
//! Array convention: elements are indexed row-major; element `m` sits at row
//! offset `v1(m) = floor(m / M_c) - (M_r - 1) / 2` and column offset
//! `v2(m) = (m mod M_c) - (M_c - 1) / 2` in units of the element pitch. The
//! local frame at an AP has +z along the horizontal boresight (the shared
//! camera yaw), +x 90 degrees counterclockwise from it in the horizontal
//! plane, and +y pointing up. A departure direction maps to zenith `theta`
//! (angle from local +z) and azimuth `phi` (angle of the transverse
//! component from local +x), and element `m` sees the phase
//! `2 pi (d_R / lambda) * (v1 sin(theta) cos(phi) + v2 cos(theta))`.

use crate::geom::Vec3;
use crate::rng::{substream, tag};
use crate::scene::{Scene, UserEquipment};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("element index {m} out of range for a {rows}x{cols} array")]
    ElementOutOfRange { m: usize, rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Row/column offsets of element `m` from the array center, in element
/// pitches.
pub fn index_maps(m: usize, rows: usize, cols: usize) -> Result<(f64, f64), ChannelError> {
    if m >= rows * cols {
        return Err(ChannelError::ElementOutOfRange { m, rows, cols });
    }
    let v1 = (m / cols) as f64 - (rows as f64 - 1.0) / 2.0;
    let v2 = (m % cols) as f64 - (cols as f64 - 1.0) / 2.0;
    Ok((v1, v2))
}

/// Free-space amplitude over distance `d`.
pub fn free_space_gain(d: f64, wavelength: f64) -> Complex64 {
    let mag = wavelength / (4.0 * std::f64::consts::PI * d);
    let phase = -2.0 * std::f64::consts::PI * d / wavelength;
    Complex64::from_polar(mag, phase)
}

/// Unit-magnitude array steering vector for departure direction
/// `(theta, phi)`; `spacing` is the element pitch in meters.
pub fn steering_vector(
    theta: f64,
    phi: f64,
    rows: usize,
    cols: usize,
    spacing: f64,
    wavelength: f64,
) -> Vec<Complex64> {
    let scale = 2.0 * std::f64::consts::PI * spacing / wavelength;
    let alpha = theta.sin() * phi.cos();
    let beta = theta.cos();
    (0..rows * cols)
        .map(|m| {
            let (v1, v2) = index_maps(m, rows, cols).expect("m < rows*cols");
            Complex64::from_polar(1.0, scale * (v1 * alpha + v2 * beta))
        })
        .collect()
}

/// Power response of beam `v` toward direction `(theta, phi)`:
/// the squared magnitude of the steering vector's Hermitian product with v.
pub fn array_response(
    v: &[Complex64],
    theta: f64,
    phi: f64,
    rows: usize,
    cols: usize,
    spacing: f64,
    wavelength: f64,
) -> f64 {
    let p = steering_vector(theta, phi, rows, cols, spacing, wavelength);
    let dot: Complex64 = p.iter().zip(v).map(|(pm, vm)| pm.conj() * vm).sum();
    dot.norm_sqr()
}

/// How a path left the AP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathKind {
    LineOfSight,
    GroundBounce,
    FacadeBounce(usize),
}

/// One specular propagation path from an AP to a user.
#[derive(Debug, Clone, Copy)]
pub struct Path {
    pub kind: PathKind,
    /// Total unfolded length in meters.
    pub length: f64,
    /// Complex amplitude: free-space gain times reflection coefficients.
    pub gain: Complex64,
    /// Departure zenith angle in the AP local frame.
    pub theta: f64,
    /// Departure azimuth angle in the AP local frame.
    pub phi: f64,
}

/// Departure angles of direction `dir` (world frame, need not be normalized)
/// in the local frame of an AP with boresight yaw `yaw`.
pub fn departure_angles(dir: Vec3, yaw: f64) -> (f64, f64) {
    let u = dir.normalized();
    let (sy, cy) = yaw.sin_cos();
    let ez = Vec3::new(cy, sy, 0.0);
    let ex = Vec3::new(-sy, cy, 0.0);
    let ey = Vec3::new(0.0, 0.0, 1.0);
    let theta = u.dot(ez).clamp(-1.0, 1.0).acos();
    let phi = u.dot(ey).atan2(u.dot(ex));
    (theta, phi)
}

/// Trace all specular paths from AP `ap_idx` to the point `target`
/// (typically a user's antenna position).
pub fn trace_paths(scene: &Scene, ap_idx: usize, target: Vec3) -> Vec<Path> {
    let ap = &scene.aps[ap_idx];
    let origin = ap.position;
    let lambda = scene.rf.wavelength;
    let mut paths = Vec::new();

    if scene.visibility(origin, target) {
        let d = origin.dist(target);
        let (theta, phi) = departure_angles(target - origin, ap.yaw);
        paths.push(Path {
            kind: PathKind::LineOfSight,
            length: d,
            gain: free_space_gain(d, lambda),
            theta,
            phi,
        });
    }

    if let Some(gamma) = scene.ground_reflection {
        if origin.z > 0.0 && target.z > 0.0 {
            let image = Vec3::new(target.x, target.y, -target.z);
            let d = origin.dist(image);
            let t = origin.z / (origin.z + target.z);
            let bounce = origin + (image - origin) * t;
            if scene.visibility(origin, bounce) && scene.visibility(bounce, target) {
                let (theta, phi) = departure_angles(bounce - origin, ap.yaw);
                paths.push(Path {
                    kind: PathKind::GroundBounce,
                    length: d,
                    gain: free_space_gain(d, lambda) * gamma,
                    theta,
                    phi,
                });
            }
        }
    }

    for (i, facade) in scene.facades.iter().enumerate() {
        // Specular reflection requires both endpoints strictly on the
        // outward side of the facade.
        if facade.rect.side(origin) <= 0.0 || facade.rect.side(target) <= 0.0 {
            continue;
        }
        let image = facade.rect.mirror(target);
        let Some(t) = facade.rect.segment_hit(origin, image) else {
            continue;
        };
        let bounce = origin + (image - origin) * t;
        if scene.clear_except(origin, bounce, Some(i))
            && scene.clear_except(bounce, target, Some(i))
        {
            let d = origin.dist(image);
            let (theta, phi) = departure_angles(bounce - origin, ap.yaw);
            paths.push(Path {
                kind: PathKind::FacadeBounce(i),
                length: d,
                gain: free_space_gain(d, lambda) * facade.reflection,
                theta,
                phi,
            });
        }
    }

    paths
}

/// Channel coefficients for K users x L APs x M antennas, stored row-major
/// as `[(k * L + l) * M + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    pub k: usize,
    pub l: usize,
    pub m: usize,
    pub data: Vec<Complex64>,
    /// Seed that generated any random (diffuse) component.
    pub seed: u64,
}

impl ChannelTensor {
    pub fn zeros(k: usize, l: usize, m: usize) -> ChannelTensor {
        ChannelTensor { k, l, m, data: vec![Complex64::new(0.0, 0.0); k * l * m], seed: 0 }
    }

    pub fn at(&self, k: usize, l: usize) -> &[Complex64] {
        let base = (k * self.l + l) * self.m;
        &self.data[base..base + self.m]
    }

    pub fn at_mut(&mut self, k: usize, l: usize) -> &mut [Complex64] {
        let base = (k * self.l + l) * self.m;
        &mut self.data[base..base + self.m]
    }
}

/// Synthesize the full channel tensor for the given users. Deterministic in
/// `(scene, users, seed)`; `seed` only feeds the diffuse component and is
/// unused when `scene.diffuse_sigma == 0`.
pub fn synthesize_channel(scene: &Scene, users: &[UserEquipment], seed: u64) -> ChannelTensor {
    let k = users.len();
    let l = scene.n_aps();
    let m = scene.n_antennas();
    let mut tensor = ChannelTensor::zeros(k, l, m);
    tensor.seed = seed;
    let pairs = crate::parallel::map_indexed(k * l, |idx| {
        let ki = idx / l;
        let li = idx % l;
        channel_for_pair(scene, li, users[ki].position, seed, idx as u64)
    });
    for (idx, h) in pairs.into_iter().enumerate() {
        let ki = idx / l;
        let li = idx % l;
        tensor.at_mut(ki, li).copy_from_slice(&h);
    }
    tensor
}

fn channel_for_pair(
    scene: &Scene,
    ap_idx: usize,
    target: Vec3,
    seed: u64,
    pair_index: u64,
) -> Vec<Complex64> {
    let m = scene.n_antennas();
    let rows = scene.array.rows;
    let cols = scene.array.cols;
    let mut h = vec![Complex64::new(0.0, 0.0); m];
    for path in trace_paths(scene, ap_idx, target) {
        let p = steering_vector(
            path.theta,
            path.phi,
            rows,
            cols,
            scene.rf.element_spacing,
            scene.rf.wavelength,
        );
        for (hm, pm) in h.iter_mut().zip(&p) {
            *hm += path.gain * pm;
        }
    }
    if scene.diffuse_sigma > 0.0 {
        let mut rng = substream(seed, tag::DIFFUSE, pair_index);
        // CN(0, sigma^2): each real component has variance sigma^2 / 2.
        let comp = Normal::new(0.0, scene.diffuse_sigma / 2f64.sqrt()).unwrap();
        for hm in h.iter_mut() {
            let re: f64 = comp.sample(&mut rng);
            let im: f64 = comp.sample(&mut rng);
            *hm += Complex64::new(re, im);
        }
    }
    debug_assert!(h.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
    h
}
