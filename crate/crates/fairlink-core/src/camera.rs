//! Pinhole camera model with a fixed world convention.
//!
//! Camera frame: +z along the optical axis, +x to the right in the image,
//! +y down in the image. At zero yaw/pitch/roll the optical axis points along
//! world +x with world +z up. Yaw rotates about world +z (counterclockwise
//! seen from above), pitch then rotates about the camera's right axis
//! (negative pitch looks down), roll last about the optical axis.
//!
//! Projection is `x_p = f * x_c / z_c + c_1`, `y_p = f * y_c / z_c + c_2`
//! with the principal point at the image center and
//! `f = (width / 2) / tan(fov / 2)` for horizontal field of view `fov`.

use crate::geom::{Mat3, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    /// Point at or behind the image plane (z_c <= 0).
    #[error("point is behind the camera")]
    BehindCamera,
    /// Back-projection system is numerically singular (viewing ray parallel
    /// to the assumed-height plane, or degenerate calibration).
    #[error("back-projection geometry is singular")]
    SingularGeometry,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraModel {
    pub position: Vec3,
    /// World-to-camera rotation; rows are the camera right/down/forward axes.
    pub q: Mat3,
    pub f: f64,
    pub c1: f64,
    pub c2: f64,
    pub width: f64,
    pub height: f64,
}

impl Mat3 {
    fn serde_rows(&self) -> [[f64; 3]; 3] {
        self.m
    }
}

// Mat3 serde support lives here because only the camera persists one.
impl Serialize for Mat3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.serde_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Mat3 { m })
    }
}

impl CameraModel {
    /// Build from pose angles (radians) and horizontal field of view.
    pub fn from_pose(
        position: Vec3,
        yaw: f64,
        pitch: f64,
        roll: f64,
        fov: f64,
        width: f64,
        height: f64,
    ) -> CameraModel {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vec3::new(cp * cy, cp * sy, sp);
        let right0 = Vec3::new(sy, -cy, 0.0);
        let down0 = forward.cross(right0);
        let (sr, cr) = roll.sin_cos();
        let right = right0 * cr + down0 * sr;
        let down = right0 * (-sr) + down0 * cr;
        let q = Mat3::from_rows(right, down, forward);
        let f = (width / 2.0) / (fov / 2.0).tan();
        CameraModel { position, q, f, c1: width / 2.0, c2: height / 2.0, width, height }
    }

    /// World point -> camera-frame coordinates.
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.q.mul_vec(p - self.position)
    }

    /// Camera-frame point -> pixel coordinates.
    pub fn camera_to_pixel(&self, pc: Vec3) -> Result<(f64, f64), CameraError> {
        if pc.z <= 0.0 {
            return Err(CameraError::BehindCamera);
        }
        Ok((self.f * pc.x / pc.z + self.c1, self.f * pc.y / pc.z + self.c2))
    }

    /// World point -> pixel, in one step.
    pub fn project(&self, p: Vec3) -> Result<(f64, f64), CameraError> {
        self.camera_to_pixel(self.world_to_camera(p))
    }

    /// True if the pixel lies inside the image.
    pub fn pixel_in_frame(&self, px: (f64, f64)) -> bool {
        px.0 >= 0.0 && px.0 < self.width && px.1 >= 0.0 && px.1 < self.height
    }

    /// The 3x4 matrix F = D [Q | T] combining intrinsics and extrinsics,
    /// with T = -Q * position.
    pub fn matrix(&self) -> [[f64; 4]; 3] {
        let t = self.q.mul_vec(-self.position);
        let q = &self.q.m;
        let mut f = [[0.0; 4]; 3];
        for j in 0..3 {
            f[0][j] = self.f * q[0][j] + self.c1 * q[2][j];
            f[1][j] = self.f * q[1][j] + self.c2 * q[2][j];
            f[2][j] = q[2][j];
        }
        f[0][3] = self.f * t.x + self.c1 * t.z;
        f[1][3] = self.f * t.y + self.c2 * t.z;
        f[2][3] = t.z;
        f
    }

    /// Recover the world position of a pixel given an assumed world height
    /// `z_assumed`: the two projective constraints are rearranged into a 2x2
    /// linear system in (x, y) and solved in closed form.
    pub fn estimate_location_from_pixel(
        &self,
        xp: f64,
        yp: f64,
        z_assumed: f64,
    ) -> Result<Vec3, CameraError> {
        let f = self.matrix();
        let z = z_assumed;
        let a11 = xp * f[2][0] - f[0][0];
        let a12 = xp * f[2][1] - f[0][1];
        let a21 = yp * f[2][0] - f[1][0];
        let a22 = yp * f[2][1] - f[1][1];
        let b1 = z * f[0][2] + f[0][3] - z * xp * f[2][2] - xp * f[2][3];
        let b2 = z * f[1][2] + f[1][3] - z * yp * f[2][2] - yp * f[2][3];
        let det = a11 * a22 - a12 * a21;
        let fro2 = a11 * a11 + a12 * a12 + a21 * a21 + a22 * a22;
        // For a 2x2 matrix, ||A||_F * ||A^-1||_F = ||A||_F^2 / |det|.
        if det == 0.0 || fro2 / det.abs() > 1e12 {
            return Err(CameraError::SingularGeometry);
        }
        let x = (b1 * a22 - b2 * a12) / det;
        let y = (a11 * b2 - a21 * b1) / det;
        Ok(Vec3::new(x, y, z))
    }
}
