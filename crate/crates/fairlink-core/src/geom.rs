//! Minimal 3D geometry: vectors, rotation matrices, and the two occluder
//! shapes the scene uses (axis-aligned boxes and finite rectangles).
//!
//! Occlusion queries share one tolerance, [`GEOM_EPS`]: surfaces are treated
//! as inflated by that margin, so grazing contact counts as a hit.

use serde::{Deserialize, Serialize};

/// Shared geometric tolerance in meters. Grazing within this margin blocks.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        assert!(n > 0.0, "cannot normalize zero vector");
        self * (1.0 / n)
    }

    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Planar (xy) distance, ignoring height.
    pub fn dist_xy(self, o: Vec3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        (dx * dx + dy * dy).sqrt()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub fn identity() -> Self {
        Mat3 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Mat3 {
            m: [[r0.x, r0.y, r0.z], [r1.x, r1.y, r1.z], [r2.x, r2.y, r2.z]],
        }
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::new(self.m[i][0], self.m[i][1], self.m[i][2])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat3 { m: r }
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// Rotation about the world z axis by `a` radians (counterclockwise
    /// looking down the +z axis).
    pub fn rot_z(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3 { m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]] }
    }
}

/// Axis-aligned box, used for building volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// True if segment p->q passes through the box inflated by [`GEOM_EPS`].
    /// Contact anywhere on the open interior of the segment counts; the
    /// endpoints themselves do not block.
    pub fn intersects_segment(&self, p: Vec3, q: Vec3) -> bool {
        let d = q - p;
        let len = d.norm();
        if len == 0.0 {
            return false;
        }
        let t_eps = GEOM_EPS / len;
        let mut t0 = t_eps;
        let mut t1 = 1.0 - t_eps;
        let lo = [self.min.x - GEOM_EPS, self.min.y - GEOM_EPS, self.min.z - GEOM_EPS];
        let hi = [self.max.x + GEOM_EPS, self.max.y + GEOM_EPS, self.max.z + GEOM_EPS];
        let pc = [p.x, p.y, p.z];
        let dc = [d.x, d.y, d.z];
        for a in 0..3 {
            if dc[a].abs() < 1e-300 {
                if pc[a] < lo[a] || pc[a] > hi[a] {
                    return false;
                }
            } else {
                let inv = 1.0 / dc[a];
                let mut ta = (lo[a] - pc[a]) * inv;
                let mut tb = (hi[a] - pc[a]) * inv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Finite rectangle with an orientation, used for reflective facades.
/// `center` sits in the middle; `tan_u`/`tan_v` are unit tangents spanning
/// the plane with half-extents `half_u`/`half_v`; `normal` is the outward
/// face direction.
#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub center: Vec3,
    pub normal: Vec3,
    pub tan_u: Vec3,
    pub tan_v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
}

impl Rect {
    /// Vertical rectangle whose outward normal is `normal` (must be a unit
    /// horizontal axis vector for the box facades used here).
    pub fn vertical(center: Vec3, normal: Vec3, half_width: f64, half_height: f64) -> Rect {
        let up = Vec3::new(0.0, 0.0, 1.0);
        let tan_u = normal.cross(up).normalized();
        Rect { center, normal, tan_u, tan_v: up, half_u: half_width, half_v: half_height }
    }

    /// Intersection parameter t in (0,1) where segment p->q crosses the
    /// rectangle (inflated by [`GEOM_EPS`]), or None. Endpoint contact within
    /// `GEOM_EPS` of either end does not count, so legs of a reflection can
    /// be tested without the bounce point blocking itself.
    pub fn segment_hit(&self, p: Vec3, q: Vec3) -> Option<f64> {
        let d = q - p;
        let len = d.norm();
        if len == 0.0 {
            return None;
        }
        let denom = d.dot(self.normal);
        if denom.abs() < 1e-300 {
            return None;
        }
        let t = (self.center - p).dot(self.normal) / denom;
        let t_eps = GEOM_EPS / len;
        if t < t_eps || t > 1.0 - t_eps {
            return None;
        }
        let hit = p + d * t;
        let rel = hit - self.center;
        if rel.dot(self.tan_u).abs() <= self.half_u + GEOM_EPS
            && rel.dot(self.tan_v).abs() <= self.half_v + GEOM_EPS
        {
            Some(t)
        } else {
            None
        }
    }

    /// Mirror image of point p across the rectangle's plane.
    pub fn mirror(&self, p: Vec3) -> Vec3 {
        let d = (p - self.center).dot(self.normal);
        p - self.normal * (2.0 * d)
    }

    /// Signed distance of p from the plane along the outward normal.
    pub fn side(&self, p: Vec3) -> f64 {
        (p - self.center).dot(self.normal)
    }
}
