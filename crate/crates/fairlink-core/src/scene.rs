//! Static scene: RF constants, access points with planar arrays and roadside
//! cameras, buildings (blocking volumes + reflective facades), a road loop
//! that users spawn on, and visibility queries.
//!
//! Unit conventions: positions and lengths in meters, powers in linear watts,
//! angles in radians. The serialized config ([`SceneConfig`]) is the only
//! place with human-facing units (dBm, degrees); conversion happens when the
//! scene is built.

use crate::camera::CameraModel;
use crate::geom::{Aabb, Rect, Vec3};
use crate::rng::{substream, tag};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("requested {requested} users but the scene allows at most {max}")]
    TooManyUsers { requested: usize, max: usize },
    #[error("scene config invalid: {0}")]
    BadConfig(String),
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Radio constants, all in linear/SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfConstants {
    pub carrier_hz: f64,
    pub wavelength: f64,
    /// Antenna element pitch in meters (same along rows and columns).
    pub element_spacing: f64,
    /// Per-AP downlink power budget in watts.
    pub ap_power_w: f64,
    /// Per-user uplink pilot power in watts.
    pub pilot_power_w: f64,
    /// Noise power in watts (applies to both pilot reception and downlink).
    pub noise_w: f64,
}

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Planar array layout at every AP: `rows x cols` elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl ArrayGeometry {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
pub struct AccessPoint {
    pub position: Vec3,
    /// Horizontal direction the array boresight and camera share, radians
    /// counterclockwise from world +x.
    pub yaw: f64,
    pub camera: CameraModel,
}

/// A mobile user. `position` is the antenna location (fixed height above the
/// road); the camera pipeline sees the body center instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserEquipment {
    pub id: usize,
    pub position: Vec3,
    /// True height of the detected body center.
    pub body_center_height: f64,
    /// Height assumed when inverting a detection back to world coordinates.
    pub assumed_center_height: f64,
}

impl UserEquipment {
    /// The world point a camera detection corresponds to.
    pub fn body_center(&self) -> Vec3 {
        Vec3::new(self.position.x, self.position.y, self.body_center_height)
    }
}

/// Reflective facade: a rectangle plus its complex reflection coefficient.
#[derive(Debug, Clone, Copy)]
pub struct Facade {
    pub rect: Rect,
    pub reflection: Complex64,
    /// Index of the building this facade belongs to, if any.
    pub building: Option<usize>,
}

/// Closed or open polyline in the ground plane that users spawn on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadPolyline {
    pub corners: Vec<[f64; 2]>,
    pub closed: bool,
}

impl RoadPolyline {
    fn segments(&self) -> Vec<([f64; 2], [f64; 2])> {
        let n = self.corners.len();
        let mut segs = Vec::new();
        for i in 0..n.saturating_sub(1) {
            segs.push((self.corners[i], self.corners[i + 1]));
        }
        if self.closed && n > 2 {
            segs.push((self.corners[n - 1], self.corners[0]));
        }
        segs
    }

    pub fn total_length(&self) -> f64 {
        self.segments()
            .iter()
            .map(|(a, b)| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt())
            .sum()
    }

    /// Point at arc length `s` from the start (s in [0, total_length]).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let segs = self.segments();
        let mut rem = s;
        for (a, b) in &segs {
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if rem <= len || len == 0.0 {
                let t = if len == 0.0 { 0.0 } else { rem / len };
                return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            }
            rem -= len;
        }
        let last = segs.last().expect("road needs at least one segment");
        last.1
    }

    /// Planar distance from a point to the nearest spot on the polyline.
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        let mut best = f64::INFINITY;
        for (a, b) in self.segments() {
            let abx = b[0] - a[0];
            let aby = b[1] - a[1];
            let len2 = abx * abx + aby * aby;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0)
            };
            let dx = p[0] - (a[0] + t * abx);
            let dy = p[1] - (a[1] + t * aby);
            best = best.min((dx * dx + dy * dy).sqrt());
        }
        best
    }
}

/// Per-user height profile shared by all spawned users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeProfile {
    pub antenna_height: f64,
    pub body_center_height: f64,
    pub assumed_center_height: f64,
    pub max_count: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub rf: RfConstants,
    pub array: ArrayGeometry,
    pub aps: Vec<AccessPoint>,
    pub buildings: Vec<Aabb>,
    pub facades: Vec<Facade>,
    /// Ground-plane (z = 0) reflection coefficient, None to disable the
    /// ground bounce entirely.
    pub ground_reflection: Option<Complex64>,
    pub road: RoadPolyline,
    pub ue: UeProfile,
    /// Std-dev of the optional diffuse channel component (0 disables it).
    pub diffuse_sigma: f64,
    config: SceneConfig,
}

impl Scene {
    pub fn n_aps(&self) -> usize {
        self.aps.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.array.count()
    }

    /// The config this scene was built from (canonical serialized form).
    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    /// Stable 64-bit identity of the scene parameters (FNV-1a over the
    /// canonical JSON form).
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(&self.config).expect("scene config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Spawn `k` users uniformly along the road. Deterministic in
    /// `(seed, draw_index)`; the same seed always yields the same users.
    pub fn spawn_ues(&self, k: usize, seed: u64) -> Result<Vec<UserEquipment>, SceneError> {
        if k > self.ue.max_count {
            return Err(SceneError::TooManyUsers { requested: k, max: self.ue.max_count });
        }
        let total = self.road.total_length();
        let mut rng = substream(seed, tag::SPAWN, 0);
        let mut out = Vec::with_capacity(k);
        for id in 0..k {
            let s = rng.gen_range(0.0..total);
            let [x, y] = self.road.point_at(s);
            out.push(UserEquipment {
                id,
                position: Vec3::new(x, y, self.ue.antenna_height),
                body_center_height: self.ue.body_center_height,
                assumed_center_height: self.ue.assumed_center_height,
            });
        }
        Ok(out)
    }

    /// True iff the open segment p->q crosses no building volume and no
    /// facade. Grazing contact (within [`crate::geom::GEOM_EPS`]) counts as
    /// blocked.
    pub fn visibility(&self, p: Vec3, q: Vec3) -> bool {
        self.clear_except(p, q, None)
    }

    /// Visibility test that ignores one facade (used for reflection legs
    /// whose endpoint lies on that facade). The facade's own building volume
    /// is skipped as well: a leg that ends on a face of a convex box never
    /// enters the box, but it does graze the tolerance-inflated surface.
    pub fn clear_except(&self, p: Vec3, q: Vec3, skip_facade: Option<usize>) -> bool {
        let skip_building = skip_facade.and_then(|i| self.facades[i].building);
        for (bi, b) in self.buildings.iter().enumerate() {
            if Some(bi) == skip_building {
                continue;
            }
            if b.intersects_segment(p, q) {
                return false;
            }
        }
        for (i, f) in self.facades.iter().enumerate() {
            if Some(i) == skip_facade {
                continue;
            }
            // Sibling faces of the skipped building: still tested, but a leg
            // in the front half-space of the skipped face cannot cross them.
            if f.rect.segment_hit(p, q).is_some() {
                return false;
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Serialized form.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfConfig {
    pub carrier_ghz: f64,
    pub ap_tx_power_dbm: f64,
    pub ue_pilot_power_dbm: f64,
    pub noise_power_dbm: f64,
    /// Element pitch as a multiple of the carrier wavelength.
    pub element_spacing_wavelengths: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub fov_deg: f64,
    pub width_px: f64,
    pub height_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApConfig {
    pub position: [f64; 3],
    pub camera: CameraConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Facade reflection coefficient as [re, im].
    pub reflection: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub rf: RfConfig,
    pub array: ArrayGeometry,
    pub aps: Vec<ApConfig>,
    pub road: RoadPolyline,
    pub buildings: Vec<BuildingConfig>,
    /// Ground reflection coefficient as [re, im]; omit to disable.
    pub ground_reflection: Option<[f64; 2]>,
    pub ue: UeProfile,
    #[serde(default)]
    pub diffuse_sigma: f64,
}

impl SceneConfig {
    pub fn build(&self) -> Result<Scene, SceneError> {
        if self.aps.is_empty() {
            return Err(SceneError::BadConfig("need at least one AP".into()));
        }
        if self.array.rows == 0 || self.array.cols == 0 {
            return Err(SceneError::BadConfig("array dimensions must be positive".into()));
        }
        if self.road.corners.len() < 2 {
            return Err(SceneError::BadConfig("road needs at least two corners".into()));
        }
        let carrier_hz = self.rf.carrier_ghz * 1e9;
        let wavelength = SPEED_OF_LIGHT / carrier_hz;
        let rf = RfConstants {
            carrier_hz,
            wavelength,
            element_spacing: self.rf.element_spacing_wavelengths * wavelength,
            ap_power_w: dbm_to_watts(self.rf.ap_tx_power_dbm),
            pilot_power_w: dbm_to_watts(self.rf.ue_pilot_power_dbm),
            noise_w: dbm_to_watts(self.rf.noise_power_dbm),
        };
        let aps = self
            .aps
            .iter()
            .map(|ap| {
                let position = Vec3::new(ap.position[0], ap.position[1], ap.position[2]);
                let yaw = ap.camera.yaw_deg.to_radians();
                let camera = CameraModel::from_pose(
                    position,
                    yaw,
                    ap.camera.pitch_deg.to_radians(),
                    ap.camera.roll_deg.to_radians(),
                    ap.camera.fov_deg.to_radians(),
                    ap.camera.width_px,
                    ap.camera.height_px,
                );
                AccessPoint { position, yaw, camera }
            })
            .collect();
        let buildings: Vec<Aabb> = self
            .buildings
            .iter()
            .map(|b| Aabb {
                min: Vec3::new(b.min[0], b.min[1], b.min[2]),
                max: Vec3::new(b.max[0], b.max[1], b.max[2]),
            })
            .collect();
        let mut facades = Vec::new();
        for (b_idx, (b, cfg)) in buildings.iter().zip(&self.buildings).enumerate() {
            let reflection = Complex64::new(cfg.reflection[0], cfg.reflection[1]);
            let cx = 0.5 * (b.min.x + b.max.x);
            let cy = 0.5 * (b.min.y + b.max.y);
            let cz = 0.5 * (b.min.z + b.max.z);
            let hx = 0.5 * (b.max.x - b.min.x);
            let hy = 0.5 * (b.max.y - b.min.y);
            let hz = 0.5 * (b.max.z - b.min.z);
            let sides = [
                (Vec3::new(b.max.x, cy, cz), Vec3::new(1.0, 0.0, 0.0), hy),
                (Vec3::new(b.min.x, cy, cz), Vec3::new(-1.0, 0.0, 0.0), hy),
                (Vec3::new(cx, b.max.y, cz), Vec3::new(0.0, 1.0, 0.0), hx),
                (Vec3::new(cx, b.min.y, cz), Vec3::new(0.0, -1.0, 0.0), hx),
            ];
            for (center, normal, half_w) in sides {
                facades.push(Facade {
                    rect: Rect::vertical(center, normal, half_w, hz),
                    reflection,
                    building: Some(b_idx),
                });
            }
        }
        Ok(Scene {
            rf,
            array: self.array,
            aps,
            buildings,
            facades,
            ground_reflection: self.ground_reflection.map(|g| Complex64::new(g[0], g[1])),
            road: self.road.clone(),
            ue: self.ue,
            diffuse_sigma: self.diffuse_sigma,
            config: self.clone(),
        })
    }

    /// The reference urban layout: four APs on the corners of a 110 m square
    /// road loop, each with a 4x4 half-wavelength array and a camera pitched
    /// 30 degrees down toward the intersection it overlooks, and one building
    /// block per quadrant.
    pub fn urban_intersection() -> SceneConfig {
        let cam = |yaw_deg: f64| CameraConfig {
            yaw_deg,
            pitch_deg: -30.0,
            roll_deg: 0.0,
            fov_deg: 100.0,
            width_px: 1280.0,
            height_px: 720.0,
        };
        let building = |x0: f64, x1: f64, y0: f64, y1: f64| BuildingConfig {
            min: [x0.min(x1), y0.min(y1), 0.0],
            max: [x0.max(x1), y0.max(y1), 20.0],
            reflection: [-0.55, 0.0],
        };
        SceneConfig {
            rf: RfConfig {
                carrier_ghz: 3.5,
                ap_tx_power_dbm: 25.0,
                ue_pilot_power_dbm: 5.0,
                noise_power_dbm: -55.0,
                element_spacing_wavelengths: 0.5,
            },
            array: ArrayGeometry { rows: 4, cols: 4 },
            aps: vec![
                ApConfig { position: [60.0, -55.0, 15.0], camera: cam(-224.0) },
                ApConfig { position: [-55.0, -60.0, 15.0], camera: cam(-315.0) },
                ApConfig { position: [-60.0, 55.0, 15.0], camera: cam(-43.0) },
                ApConfig { position: [55.0, 60.0, 15.0], camera: cam(-135.0) },
            ],
            road: RoadPolyline {
                corners: vec![[55.0, -55.0], [55.0, 55.0], [-55.0, 55.0], [-55.0, -55.0]],
                closed: true,
            },
            buildings: vec![
                building(12.0, 48.0, 12.0, 48.0),
                building(-48.0, -12.0, 12.0, 48.0),
                building(-48.0, -12.0, -48.0, -12.0),
                building(12.0, 48.0, -48.0, -12.0),
            ],
            ground_reflection: Some([-0.45, 0.0]),
            ue: UeProfile {
                antenna_height: 0.4,
                body_center_height: 0.75,
                assumed_center_height: 0.75,
                max_count: 12,
            },
            diffuse_sigma: 0.0,
        }
    }

    /// Same layout with only the first `n_aps` access points and a smaller
    /// `rows x cols` array, for reduced-scale experiments.
    pub fn urban_intersection_reduced(n_aps: usize, rows: usize, cols: usize) -> SceneConfig {
        let mut cfg = Self::urban_intersection();
        cfg.aps.truncate(n_aps.max(1));
        cfg.array = ArrayGeometry { rows, cols };
        cfg
    }
}
