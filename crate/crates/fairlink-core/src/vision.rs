//! Camera detection emulation and per-camera localization.
//!
//! Each user renders to each camera as (at most) one detection of its own
//! object class: the projected body center plus Gaussian pixel noise, a
//! Beta-distributed confidence score, an occlusion/frustum check, and a
//! distance-dependent detection probability. Filtering then mimics the usual
//! detector post-processing: a confidence threshold and one detection per
//! class. Surviving detections are inverted through the calibrated camera at
//! an assumed body-center height to produce per-(user, camera) position
//! estimates; everything else becomes the `(-1, -1, -1)` sentinel.

use crate::geom::Vec3;
use crate::rng::{derive, substream, tag};
use crate::scene::{Scene, UserEquipment};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};

/// Detections below this confidence are discarded.
pub const CONFIDENCE_THRESHOLD: f64 = 0.7;

/// Missing-estimate sentinel.
pub const SENTINEL: Vec3 = Vec3 { x: -1.0, y: -1.0, z: -1.0 };

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub ap_index: usize,
    /// Object class; classes are assigned one per user.
    pub class: usize,
    pub pixel: (f64, f64),
    pub confidence: f64,
}

/// Detector emulation parameters.
#[derive(Debug, Clone, Copy)]
pub struct DetectionNoise {
    /// Std-dev of the pixel noise on each image coordinate.
    pub pixel_sigma: f64,
    /// Plateau detection probability at close range.
    pub p_max: f64,
    /// Distance where detection probability reaches half the plateau.
    pub d_mid: f64,
    /// Logistic falloff scale of the probability curve.
    pub d_scale: f64,
    /// Hard range cutoff: nothing is detected beyond this distance.
    pub max_range: f64,
    /// Probability that a detected object produces a second, duplicate
    /// detection.
    pub duplicate_prob: f64,
    /// Beta parameters of the confidence distribution.
    pub conf_alpha: f64,
    pub conf_beta: f64,
    /// When set, confidences are pinned to this value (no Beta draw).
    pub conf_fixed: Option<f64>,
}

impl Default for DetectionNoise {
    fn default() -> Self {
        DetectionNoise {
            pixel_sigma: 2.0,
            p_max: 0.98,
            d_mid: 55.0,
            d_scale: 7.0,
            max_range: 90.0,
            duplicate_prob: 0.02,
            conf_alpha: 8.0,
            conf_beta: 2.0,
            conf_fixed: None,
        }
    }
}

impl DetectionNoise {
    /// Ideal detector: always fires, exact pixels, confidence 1.
    pub fn noiseless() -> Self {
        DetectionNoise {
            pixel_sigma: 0.0,
            p_max: 1.0,
            d_mid: f64::INFINITY,
            d_scale: 1.0,
            max_range: f64::INFINITY,
            duplicate_prob: 0.0,
            conf_alpha: 8.0,
            conf_beta: 2.0,
            conf_fixed: Some(1.0),
        }
    }

    pub fn detect_prob(&self, distance: f64) -> f64 {
        if distance > self.max_range {
            return 0.0;
        }
        if self.d_mid.is_infinite() {
            return self.p_max;
        }
        self.p_max / (1.0 + ((distance - self.d_mid) / self.d_scale).exp())
    }
}

/// Emulate detections of `ues` in every camera of the scene. Deterministic
/// in `(scene, ues, noise, seed)`; each (camera, user) pair draws from its
/// own RNG substream.
pub fn emulate_detections(
    scene: &Scene,
    ues: &[UserEquipment],
    noise: &DetectionNoise,
    seed: u64,
) -> Vec<Detection> {
    let k = ues.len();
    let mut out = Vec::new();
    for (l, ap) in scene.aps.iter().enumerate() {
        for ue in ues {
            let mut rng = substream(seed, tag::DETECT, (l * k + ue.id) as u64);
            let body = ue.body_center();
            let Ok(pixel) = ap.camera.project(body) else {
                continue;
            };
            if !ap.camera.pixel_in_frame(pixel) {
                continue;
            }
            if !scene.visibility(ap.camera.position, body) {
                continue;
            }
            let dist = ap.camera.position.dist(body);
            let p = noise.detect_prob(dist);
            if rng.gen_range(0.0..1.0) >= p {
                continue;
            }
            out.push(sample_detection(l, ue.id, pixel, noise, &mut rng));
            if noise.duplicate_prob > 0.0 && rng.gen_range(0.0..1.0) < noise.duplicate_prob {
                out.push(sample_detection(l, ue.id, pixel, noise, &mut rng));
            }
        }
    }
    out
}

fn sample_detection(
    l: usize,
    class: usize,
    pixel: (f64, f64),
    noise: &DetectionNoise,
    rng: &mut impl Rng,
) -> Detection {
    let px = if noise.pixel_sigma > 0.0 {
        let n = Normal::new(0.0, noise.pixel_sigma).unwrap();
        (pixel.0 + n.sample(rng), pixel.1 + n.sample(rng))
    } else {
        pixel
    };
    let confidence = match noise.conf_fixed {
        Some(c) => c,
        None => Beta::new(noise.conf_alpha, noise.conf_beta).unwrap().sample(rng),
    };
    Detection { ap_index: l, class, pixel: px, confidence }
}

/// Post-process raw detections: drop anything below the confidence
/// threshold, then keep at most one detection per (camera, class), the one
/// with the highest confidence. Exact confidence ties go to the smaller
/// pixel x, then the smaller pixel y.
pub fn filter_detections(detections: &[Detection]) -> Vec<Detection> {
    let mut best: Vec<Detection> = Vec::new();
    for d in detections {
        if d.confidence < CONFIDENCE_THRESHOLD {
            continue;
        }
        match best
            .iter_mut()
            .find(|b| b.ap_index == d.ap_index && b.class == d.class)
        {
            None => best.push(*d),
            Some(b) => {
                let replace = d.confidence > b.confidence
                    || (d.confidence == b.confidence
                        && (d.pixel.0 < b.pixel.0
                            || (d.pixel.0 == b.pixel.0 && d.pixel.1 < b.pixel.1)));
                if replace {
                    *b = *d;
                }
            }
        }
    }
    best
}

/// Per-(user, camera) position estimates; missing entries hold [`SENTINEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocationEstimates {
    pub k: usize,
    pub l: usize,
    data: Vec<Vec3>,
}

impl LocationEstimates {
    pub fn from_parts(k: usize, l: usize, data: Vec<Vec3>) -> LocationEstimates {
        assert_eq!(data.len(), k * l);
        LocationEstimates { k, l, data }
    }

    pub fn at(&self, k: usize, l: usize) -> Vec3 {
        self.data[k * self.l + l]
    }

    pub fn is_missing(&self, k: usize, l: usize) -> bool {
        self.at(k, l) == SENTINEL
    }
}

/// Build the K x L estimate matrix from filtered detections. Each present
/// detection is back-projected at the scene's assumed body-center height;
/// estimates that fail (singular geometry) fall back to the sentinel.
pub fn build_location_matrix(
    scene: &Scene,
    filtered: &[Detection],
    k: usize,
) -> LocationEstimates {
    let l = scene.n_aps();
    let mut data = vec![SENTINEL; k * l];
    for d in filtered {
        if d.class >= k {
            continue;
        }
        let cam = &scene.aps[d.ap_index].camera;
        match cam.estimate_location_from_pixel(
            d.pixel.0,
            d.pixel.1,
            scene.ue.assumed_center_height,
        ) {
            Ok(p) => data[d.class * l + d.ap_index] = p,
            Err(_) => {
                log::warn!(
                    "camera {} class {}: singular back-projection, dropping",
                    d.ap_index,
                    d.class
                );
            }
        }
    }
    LocationEstimates { k, l, data }
}

/// End-to-end pipeline for one spawn: emulate, filter, localize.
pub fn localize_users(
    scene: &Scene,
    ues: &[UserEquipment],
    noise: &DetectionNoise,
    seed: u64,
) -> LocationEstimates {
    let raw = emulate_detections(scene, ues, noise, seed);
    let filtered = filter_detections(&raw);
    build_location_matrix(scene, &filtered, ues.len())
}

/// Planar localization errors (meters) of every filtered detection across
/// `trials` independent spawns of `k` users. Used for calibration reporting
/// and the accuracy gate.
pub fn collect_localization_errors(
    scene: &Scene,
    k: usize,
    trials: usize,
    noise: &DetectionNoise,
    seed: u64,
) -> Vec<f64> {
    let per_trial = crate::parallel::map_indexed(trials, |t| {
        let spawn_seed = derive(seed, tag::SAMPLE, t as u64);
        let ues = scene.spawn_ues(k, spawn_seed).expect("k within scene limit");
        let est = localize_users(scene, &ues, noise, derive(seed, tag::DETECT, t as u64));
        let mut errs = Vec::new();
        for ue in &ues {
            for l in 0..scene.n_aps() {
                if !est.is_missing(ue.id, l) {
                    let e = est.at(ue.id, l);
                    errs.push(e.dist_xy(ue.body_center()));
                }
            }
        }
        errs
    });
    per_trial.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, tag};
    use crate::scene::SceneConfig;

    fn scene() -> Scene {
        SceneConfig::urban_intersection().build().unwrap()
    }

    fn visible_ue(s: &Scene, id: usize) -> UserEquipment {
        // On the near road edge of camera 0, well inside its frustum.
        let _ = s;
        UserEquipment {
            id,
            position: Vec3::new(20.0, -55.0, 0.4),
            body_center_height: 0.75,
            assumed_center_height: 0.75,
        }
    }

    #[test]
    fn noiseless_detection_projects_exactly() {
        let s = scene();
        let ue = visible_ue(&s, 0);
        let dets = emulate_detections(&s, &[ue], &DetectionNoise::noiseless(), 1);
        let d0 = dets.iter().find(|d| d.ap_index == 0).unwrap();
        let expect = s.aps[0].camera.project(ue.body_center()).unwrap();
        assert_eq!(d0.pixel, expect);
        assert_eq!(d0.confidence, 1.0);
    }

    #[test]
    fn occluded_user_is_not_detected() {
        let s = scene();
        // Deep behind the (+,-) building as seen from camera 0.
        let ue = UserEquipment {
            id: 0,
            position: Vec3::new(-20.0, -19.0, 0.4),
            body_center_height: 0.75,
            assumed_center_height: 0.75,
        };
        assert!(!s.visibility(s.aps[0].camera.position, ue.body_center()));
        let dets = emulate_detections(&s, &[ue], &DetectionNoise::noiseless(), 1);
        assert!(dets.iter().all(|d| d.ap_index != 0));
    }

    #[test]
    fn duplicates_are_emitted_and_filtered() {
        let s = scene();
        let ue = visible_ue(&s, 0);
        let mut noise = DetectionNoise::noiseless();
        noise.duplicate_prob = 1.0;
        noise.pixel_sigma = 1.0;
        noise.conf_fixed = None;
        let dets = emulate_detections(&s, &[ue], &noise, 3);
        let cam0: Vec<_> = dets.iter().filter(|d| d.ap_index == 0).collect();
        assert_eq!(cam0.len(), 2);
        let kept = filter_detections(&dets);
        let cam0_kept: Vec<_> = kept.iter().filter(|d| d.ap_index == 0).collect();
        assert!(cam0_kept.len() <= 1);
    }

    #[test]
    fn filter_drops_low_confidence() {
        let d = |conf: f64, x: f64| Detection {
            ap_index: 0,
            class: 0,
            pixel: (x, 10.0),
            confidence: conf,
        };
        assert!(filter_detections(&[d(0.65, 5.0)]).is_empty());
        let kept = filter_detections(&[d(0.8, 5.0), d(0.9, 7.0)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        // Exact tie: smaller x wins.
        let kept = filter_detections(&[d(0.8, 7.0), d(0.8, 5.0)]);
        assert_eq!(kept[0].pixel.0, 5.0);
        // Same x: smaller y wins.
        let tie_y = [
            Detection { ap_index: 0, class: 0, pixel: (5.0, 9.0), confidence: 0.8 },
            Detection { ap_index: 0, class: 0, pixel: (5.0, 3.0), confidence: 0.8 },
        ];
        assert_eq!(filter_detections(&tie_y)[0].pixel.1, 3.0);
    }

    #[test]
    fn filter_keeps_at_most_one_per_camera_class_all_above_threshold() {
        let mut rng = substream(11, tag::DETECT, 99);
        let mut dets = Vec::new();
        for _ in 0..200 {
            dets.push(Detection {
                ap_index: rng.gen_range(0..3),
                class: rng.gen_range(0..4),
                pixel: (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)),
                confidence: rng.gen_range(0.0..1.0),
            });
        }
        let kept = filter_detections(&dets);
        for d in &kept {
            assert!(d.confidence >= CONFIDENCE_THRESHOLD);
        }
        for a in 0..3 {
            for c in 0..4 {
                assert!(kept.iter().filter(|d| d.ap_index == a && d.class == c).count() <= 1);
            }
        }
    }

    #[test]
    fn location_matrix_round_trips_noiseless() {
        let s = scene();
        let ues = s.spawn_ues(4, 17).unwrap();
        let est = localize_users(&s, &ues, &DetectionNoise::noiseless(), 5);
        let mut seen_any = false;
        for ue in &ues {
            for l in 0..s.n_aps() {
                if !est.is_missing(ue.id, l) {
                    seen_any = true;
                    let e = est.at(ue.id, l);
                    assert!(e.dist_xy(ue.body_center()) < 1e-6);
                    assert_eq!(e.z, s.ue.assumed_center_height);
                }
            }
        }
        assert!(seen_any, "at least one user should be visible somewhere");
    }

    #[test]
    fn missing_detection_yields_sentinel() {
        let s = scene();
        let ue = UserEquipment {
            id: 0,
            position: Vec3::new(-20.0, -19.0, 0.4),
            body_center_height: 0.75,
            assumed_center_height: 0.75,
        };
        let est = localize_users(&s, &[ue], &DetectionNoise::noiseless(), 1);
        assert!(est.is_missing(0, 0));
        assert_eq!(est.at(0, 0), SENTINEL);
    }

    #[test]
    fn localization_is_deterministic() {
        let s = scene();
        let a = collect_localization_errors(&s, 4, 20, &DetectionNoise::default(), 7);
        let b = collect_localization_errors(&s, 4, 20, &DetectionNoise::default(), 7);
        assert_eq!(a, b);
    }

    #[test]
    fn pixel_noise_scales_with_resolution() {
        // Doubling resolution, focal length, and pixel noise together leaves
        // world-space errors unchanged (same RNG draws, scaled geometry).
        let cfg = SceneConfig::urban_intersection();
        let mut cfg2 = cfg.clone();
        for ap in &mut cfg2.aps {
            ap.camera.width_px *= 2.0;
            ap.camera.height_px *= 2.0;
        }
        let s1 = cfg.build().unwrap();
        let s2 = cfg2.build().unwrap();
        let mut n1 = DetectionNoise::default();
        n1.duplicate_prob = 0.0;
        let mut n2 = n1;
        n2.pixel_sigma *= 2.0;
        let e1 = collect_localization_errors(&s1, 4, 50, &n1, 31);
        let e2 = collect_localization_errors(&s2, 4, 50, &n2, 31);
        assert_eq!(e1.len(), e2.len());
        for (a, b) in e1.iter().zip(&e2) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn default_noise_gives_small_mean_error() {
        let s = scene();
        let errs = collect_localization_errors(&s, 4, 200, &DetectionNoise::default(), 13);
        assert!(errs.len() > 300, "expected a few hundred detections, got {}", errs.len());
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean > 0.02 && mean < 0.8, "mean planar error {mean}");
    }
}
