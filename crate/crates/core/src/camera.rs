//! Pinhole intrinsics and rigid camera poses.
//!
//! Conventions used throughout the crate:
//! - `CameraPose` stores the world→camera transform, `x_cam = R·x_world + t`.
//! - The camera frame is x right, y down, z forward; depth is camera-frame z.
//! - Pixel `(u, v)` has its center at the continuous coordinate `(u, v)`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl PinholeIntrinsics {
    pub fn new(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { width, height, fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics from horizontal/vertical fields of view in degrees, principal
    /// point at the image center.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64, vfov_deg: f64) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0 && vfov_deg > 0.0 && vfov_deg < 180.0) {
            return Err(invalid("field of view must lie in (0, 180) degrees"));
        }
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        let fy = 0.5 * height as f64 / (0.5 * vfov_deg.to_radians()).tan();
        Self::new(
            width,
            height,
            fx,
            fy,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) || !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(invalid("principal point must lie inside the image"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Mean focal length, the scale used for splat radii.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Intrinsics of a `divisor`-times subsampled image whose pixel `(i, j)`
    /// coincides with full-resolution pixel [`Self::subsample_pixel`]`(i, j)`.
    pub fn subsampled(&self, divisor: usize) -> Self {
        let div = divisor.max(1);
        let off = (div / 2) as f64;
        let d = div as f64;
        Self {
            width: self.width.saturating_sub(1 + div / 2) / div + 1,
            height: self.height.saturating_sub(1 + div / 2) / div + 1,
            fx: self.fx / d,
            fy: self.fy / d,
            cx: ((self.cx - off) / d).max(0.0),
            cy: ((self.cy - off) / d).max(0.0),
        }
    }

    pub fn subsample_pixel(divisor: usize, i: usize, j: usize) -> (usize, usize) {
        let div = divisor.max(1);
        (div * i + div / 2, div * j + div / 2)
    }

    /// Camera-frame direction with unit z through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// True when continuous coordinate `(u, v)` falls inside the pixel grid.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }
}

/// World→camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<PoseRepr> for CameraPose {
    fn from(r: PoseRepr) -> Self {
        let m = r.rotation;
        Self {
            rotation: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation: Vector3::from(r.translation),
        }
    }
}

impl From<CameraPose> for PoseRepr {
    fn from(p: CameraPose) -> Self {
        let r = p.rotation;
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: p.translation.into(),
        }
    }
}

pub const ROTATION_TOLERANCE: f64 = 1e-9;

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(invalid(format!(
                "rotation is not proper orthonormal (|RRᵀ−I|={ortho:e}, det={det})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("translation must be finite"));
        }
        Ok(())
    }

    /// Pose of a camera centered at `position` whose rows are the camera axes
    /// expressed in world coordinates (`camera_to_world` columns).
    pub fn from_camera_to_world(orientation: &Matrix3<f64>, position: &Vector3<f64>) -> Self {
        let rotation = orientation.transpose();
        Self { rotation, translation: -(rotation * position) }
    }

    /// Zero-roll pose looking along `direction` with world +z as up.
    pub fn look_at(position: Vector3<f64>, direction: Vector3<f64>) -> Self {
        let forward = direction.normalize();
        let up = Vector3::z();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // looking straight up or down: any horizontal right axis will do
            right = forward.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let c2w = Matrix3::from_columns(&[right, down, forward]);
        Self::from_camera_to_world(&c2w, &position)
    }

    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn camera_to_world_rotation(&self) -> Matrix3<f64> {
        self.rotation.transpose()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera→world orientation as a unit quaternion.
    pub fn orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.camera_to_world_rotation(),
        ))
    }

    pub fn from_orientation(q: &UnitQuaternion<f64>, position: &Vector3<f64>) -> Self {
        Self::from_camera_to_world(q.to_rotation_matrix().matrix(), position)
    }

    /// Back-projects pixel `(u, v)` at z-depth `depth` into world coordinates.
    pub fn back_project(&self, intr: &PinholeIntrinsics, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.camera_to_world(&(intr.ray(u, v) * depth))
    }
}
