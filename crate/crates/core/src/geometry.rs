//! Pinhole cameras, rigid poses and the unproject/project pair used by every warp.
//!
//! Conventions:
//! - camera frame is right-handed with x right, y down and z forward, so the
//!   depth of a point is its camera-space z;
//! - poses are stored world-to-camera (`x_cam = R x_world + t`);
//! - pixel index `i` covers the continuous interval `[i, i + 1)` and its center
//!   sits at `i + 0.5`; continuous coordinates are rounded with `floor`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

pub type Vec3 = Vector3<f64>;

/// Depth of a projected point at or below this value is treated as behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn from_fov_y(fov_y_deg: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let fy = height as f64 / (2.0 * (fov_y_deg.to_radians() / 2.0).tan());
        Self::new(fy, fy, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "image size must be at least 1x1".into(),
            ));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Whether an integer pixel index lies inside the image.
    pub fn contains_index(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && i < self.width as i64 && j < self.height as i64
    }

    /// Unnormalized camera-space direction through a continuous pixel coordinate; its z is 1.
    pub fn camera_ray(&self, px: PixelCoord) -> Vec3 {
        Vec3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid world-to-camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let pose = Pose {
            rotation,
            translation,
        };
        let err = pose.orthonormality_error();
        if !(err < 1e-6) || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation(err));
        }
        Ok(pose)
    }

    /// Builds a pose from a rotation and the camera center in world coordinates.
    pub fn from_rotation_center(rotation: Matrix3<f64>, center: Vec3) -> Self {
        Pose {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// Camera at `eye` looking at `target`, with `up` pointing roughly upward in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or(GeometryError::DegenerateLookAt)?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or(GeometryError::DegenerateLookAt)?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Ok(Pose::from_rotation_center(rotation, eye))
    }

    /// Camera on a sphere around `target` looking at it, world up +z. Angles in radians;
    /// elevation is measured from the xy-plane.
    pub fn orbit(target: Vec3, radius: f64, azimuth: f64, elevation: f64) -> Result<Self, GeometryError> {
        let eye = target
            + radius
                * Vec3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                );
        Pose::look_at(eye, target, Vec3::z())
    }

    /// Max-abs entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera-to-world 4×4 in the OpenGL axis convention (x right, y up, camera looks
    /// down −z) used by `transforms.json`, trajectory files and the streaming protocol.
    pub fn to_c2w_gl(&self) -> Matrix4<f64> {
        let c2w = self.inverse();
        let flip = Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
        let r = c2w.rotation * flip;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&c2w.translation);
        m
    }

    /// Inverse of [`Pose::to_c2w_gl`]. The rotation block must be orthonormal within `tol`.
    pub fn from_c2w_gl(m: &Matrix4<f64>, tol: f64) -> Result<Pose, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotARotation(f64::INFINITY));
        }
        let flip = Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
        let r_gl: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r_gl.transpose() * r_gl - Matrix3::identity()).amax();
        if err > tol || r_gl.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation(err));
        }
        // Re-orthonormalize so downstream invariants hold to machine precision.
        let r = gram_schmidt(&(r_gl * flip));
        let center: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        let c2w = Pose {
            rotation: r,
            translation: center,
        };
        Ok(c2w.inverse())
    }

    /// Row-major 16 floats of [`Pose::to_c2w_gl`].
    pub fn to_c2w_gl_rows(&self) -> [f64; 16] {
        let m = self.to_c2w_gl();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_c2w_gl_rows(rows: &[f64], tol: f64) -> Result<Pose, GeometryError> {
        if rows.len() != 16 {
            return Err(GeometryError::BadMatrix(rows.len()));
        }
        Pose::from_c2w_gl(&Matrix4::from_row_slice(rows), tol)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Continuous pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        PixelCoord { u, v }
    }

    /// Center of pixel index `(i, j)`.
    pub fn center(i: usize, j: usize) -> Self {
        PixelCoord {
            u: i as f64 + 0.5,
            v: j as f64 + 0.5,
        }
    }

    /// Pixel index containing this coordinate. Coordinates within 1e-9 below an
    /// integer boundary count as on it, so exact centers survive round-off.
    pub fn floor(&self) -> (i64, i64) {
        ((self.u + 1e-9).floor() as i64, (self.v + 1e-9).floor() as i64)
    }
}

pub fn generate_ray(
    intr: &CameraIntrinsics,
    pose: &Pose,
    px: PixelCoord,
    t_near: f64,
    t_far: f64,
) -> Ray {
    let dir_cam = intr.camera_ray(px).normalize();
    Ray {
        origin: pose.center(),
        direction: pose.rotation.transpose() * dir_cam,
        t_near,
        t_far,
    }
}

/// World point whose camera-space z equals `depth`.
pub fn unproject(intr: &CameraIntrinsics, pose: &Pose, px: PixelCoord, depth: f64) -> Vec3 {
    let p_cam = intr.camera_ray(px) * depth;
    pose.camera_to_world(&p_cam)
}

/// Projects a world point. Returns `None` when the point is at or behind the camera plane;
/// the returned coordinate may fall outside the image.
pub fn project(intr: &CameraIntrinsics, pose: &Pose, point: &Vec3) -> Option<(PixelCoord, f64)> {
    let p = pose.world_to_camera(point);
    if p.z <= BEHIND_CAMERA_EPS {
        return None;
    }
    let u = intr.fx * p.x / p.z + intr.cx;
    let v = intr.fy * p.y / p.z + intr.cy;
    Some((PixelCoord { u, v }, p.z))
}

pub fn scale_intrinsics(intr: &CameraIntrinsics, s: f64) -> Result<CameraIntrinsics, GeometryError> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(GeometryError::InvalidScale(s));
    }
    let w = intr.width as f64 * s;
    let h = intr.height as f64 * s;
    if w.fract() != 0.0 || h.fract() != 0.0 || w < 1.0 || h < 1.0 {
        return Err(GeometryError::NonIntegralSize { scale: s, width: intr.width, height: intr.height });
    }
    Ok(CameraIntrinsics {
        fx: intr.fx * s,
        fy: intr.fy * s,
        cx: intr.cx * s,
        cy: intr.cy * s,
        width: w as u32,
        height: h as u32,
    })
}

fn gram_schmidt(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = m.column(0).normalize();
    let c1 = m.column(1) - c0 * c0.dot(&m.column(1));
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

/// Divides an image size by an integer factor, scaling the intrinsics to match.
pub fn downscale_intrinsics(intr: &CameraIntrinsics, factor: u32) -> Result<CameraIntrinsics, GeometryError> {
    if factor == 0 || !intr.width.is_multiple_of(factor) || !intr.height.is_multiple_of(factor) {
        return Err(GeometryError::NonIntegralSize {
            scale: 1.0 / factor as f64,
            width: intr.width,
            height: intr.height,
        });
    }
    let f = factor as f64;
    Ok(CameraIntrinsics {
        fx: intr.fx / f,
        fy: intr.fy / f,
        cx: intr.cx / f,
        cy: intr.cy / f,
        width: intr.width / factor,
        height: intr.height / factor,
    })
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Aabb {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// Slab test; returns the parametric overlap `[t0, t1]` with `t0 < t1`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some((t0, t1))
    }
}
