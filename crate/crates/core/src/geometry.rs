//! Pinhole cameras, pixel rays, depth-anchored lifting and cross-view
//! projection, plus the two-view epipolar helpers the tests lean on.
//!
//! Conventions:
//!
//! * `rotation`/`translation` map world points into the camera frame:
//!   `x_cam = R * x_world + t`.
//! * Pixel coordinates are continuous; the principal point is whatever the
//!   intrinsics say. Patch tokens sit at patch centers (see [`crate::scene`]).
//! * Ray directions are `R^T K^-1 [u, v, 1]^T` and are never normalized, so a
//!   depth anchor `d` lifts a pixel to the point whose camera-frame z equals
//!   `d` (for zero skew this holds for every pixel, not just the axis).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Orthonormality tolerance used for rotations (elementwise on `R^T R - I`
/// and on `|det R - 1|`).
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Default near-plane epsilon for the projective divide, in scene units.
pub const DEFAULT_PROJ_EPS: f64 = 1e-6;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

fn check_rotation(rotation: &Mat3, what: &str) -> Result<()> {
    if rotation.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidCamera(format!("{what} has non-finite entries")));
    }
    let gram = rotation.transpose() * rotation - Mat3::identity();
    let max_dev = gram.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max_dev > ROTATION_TOLERANCE {
        return Err(Error::InvalidCamera(format!(
            "{what} is not orthonormal (max |R^T R - I| = {max_dev:e})"
        )));
    }
    let det = rotation.determinant();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::InvalidCamera(format!(
            "{what} determinant is {det}, expected +1"
        )));
    }
    Ok(())
}

/// Validated pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    intrinsics: Mat3,
    intrinsics_inv: Mat3,
    rotation: Mat3,
    translation: Vec3,
    image_size: (u32, u32),
}

impl Camera {
    /// Builds a camera after checking every invariant: upper-triangular
    /// intrinsics with positive focal lengths and `K[2][2] = 1`, a proper
    /// rotation, and a non-empty image.
    pub fn new(
        intrinsics: Mat3,
        rotation: Mat3,
        translation: Vec3,
        image_size: (u32, u32),
    ) -> Result<Self> {
        if intrinsics.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCamera("intrinsics have non-finite entries".into()));
        }
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCamera("translation has non-finite entries".into()));
        }
        if intrinsics[(1, 0)] != 0.0 || intrinsics[(2, 0)] != 0.0 || intrinsics[(2, 1)] != 0.0 {
            return Err(Error::InvalidCamera("intrinsics must be upper-triangular".into()));
        }
        let (fx, fy) = (intrinsics[(0, 0)], intrinsics[(1, 1)]);
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "non-positive focal length (fx = {fx}, fy = {fy})"
            )));
        }
        if intrinsics[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera("intrinsics[2][2] must equal 1".into()));
        }
        check_rotation(&rotation, "rotation")?;
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::InvalidCamera(format!(
                "degenerate image size {}x{}",
                image_size.0, image_size.1
            )));
        }
        let (skew, cx, cy) = (intrinsics[(0, 1)], intrinsics[(0, 2)], intrinsics[(1, 2)]);
        #[rustfmt::skip]
        let intrinsics_inv = Mat3::new(
            1.0 / fx, -skew / (fx * fy), (skew * cy - cx * fy) / (fx * fy),
            0.0,      1.0 / fy,          -cy / fy,
            0.0,      0.0,               1.0,
        );
        Ok(Self { intrinsics, intrinsics_inv, rotation, translation, image_size })
    }

    /// Convenience constructor from scalar intrinsics.
    #[allow(clippy::too_many_arguments)]
    pub fn from_params(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        skew: f64,
        rotation: Mat3,
        translation: Vec3,
        image_size: (u32, u32),
    ) -> Result<Self> {
        #[rustfmt::skip]
        let k = Mat3::new(
            fx,  skew, cx,
            0.0, fy,   cy,
            0.0, 0.0,  1.0,
        );
        Self::new(k, rotation, translation, image_size)
    }

    pub fn intrinsics(&self) -> &Mat3 {
        &self.intrinsics
    }

    pub fn intrinsics_inv(&self) -> &Mat3 {
        &self.intrinsics_inv
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World point to camera frame.
    pub fn to_camera_frame(&self, point: &Vec3) -> Vec3 {
        self.rotation * point + self.translation
    }

    /// Same camera with fx (and skew, which shares the row) scaled by `s`.
    pub fn with_scaled_fx(&self, s: f64) -> Result<Self> {
        let mut k = self.intrinsics;
        k[(0, 0)] *= s;
        Self::new(k, self.rotation, self.translation, self.image_size)
    }
}

/// Free-function form of [`Camera::new`].
pub fn make_camera(
    intrinsics: Mat3,
    rotation: Mat3,
    translation: Vec3,
    image_size: (u32, u32),
) -> Result<Camera> {
    Camera::new(intrinsics, rotation, translation, image_size)
}

pub fn camera_center(cam: &Camera) -> Vec3 {
    cam.center()
}

/// A world-frame ray. `direction` is not normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, depth: f64) -> Vec3 {
        self.origin + self.direction * depth
    }
}

/// Back-projects pixel `(u, v)` to its world ray `(o, R^T K^-1 [u, v, 1])`.
pub fn pixel_ray(cam: &Camera, u: f64, v: f64) -> Ray {
    let dir_cam = cam.intrinsics_inv * Vec3::new(u, v, 1.0);
    Ray { origin: cam.center(), direction: cam.rotation.transpose() * dir_cam }
}

/// Checks that anchor depths are finite, strictly positive and strictly
/// increasing.
pub fn validate_depths(depths: &[f64]) -> Result<()> {
    if depths.is_empty() {
        return Err(Error::InvalidArgument("depth list is empty".into()));
    }
    for (i, &d) in depths.iter().enumerate() {
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "depth[{i}] = {d} is not strictly positive"
            )));
        }
        if i > 0 && d <= depths[i - 1] {
            return Err(Error::InvalidArgument(format!(
                "depths must be strictly increasing (depth[{}] = {} >= depth[{i}] = {d})",
                i - 1,
                depths[i - 1]
            )));
        }
    }
    Ok(())
}

/// Lifts a ray to one point per depth anchor: `origin + d * direction`.
pub fn lift_along_ray(ray: &Ray, depths: &[f64]) -> Result<Vec<Vec3>> {
    validate_depths(depths)?;
    Ok(depths.iter().map(|&d| ray.at(d)).collect())
}

/// Result of a perspective projection.
///
/// `w_tilde` is the raw homogeneous denominator. `valid` is
/// `w_tilde >= eps`, so points behind the camera are invalid. When
/// `|w_tilde|` falls below eps the divide uses `sign(w_tilde) * eps`;
/// `u`, `v` stay finite either way and are never clamped to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPixel {
    pub u: f64,
    pub v: f64,
    pub w_tilde: f64,
    pub valid: bool,
}

/// Divides a homogeneous pixel with the sign-preserving epsilon clamp.
pub fn dehomogenize(h: &Vec3, eps: f64) -> ProjectedPixel {
    let w = h.z;
    let valid = w >= eps;
    let sign = if w < 0.0 { -1.0 } else { 1.0 };
    let denom = sign * w.abs().max(eps);
    ProjectedPixel { u: h.x / denom, v: h.y / denom, w_tilde: w, valid }
}

/// Projects a world point with the default epsilon.
pub fn project_point(cam: &Camera, point: &Vec3) -> ProjectedPixel {
    project_point_eps(cam, point, DEFAULT_PROJ_EPS)
}

pub fn project_point_eps(cam: &Camera, point: &Vec3, eps: f64) -> ProjectedPixel {
    let h = cam.intrinsics * cam.to_camera_frame(point);
    dehomogenize(&h, eps)
}

/// Lifts source pixel `(u, v)` at each depth and projects into `dst`.
pub fn project_cross_view(
    src: &Camera,
    dst: &Camera,
    u: f64,
    v: f64,
    depths: &[f64],
) -> Result<Vec<ProjectedPixel>> {
    project_cross_view_eps(src, dst, u, v, depths, DEFAULT_PROJ_EPS)
}

pub fn project_cross_view_eps(
    src: &Camera,
    dst: &Camera,
    u: f64,
    v: f64,
    depths: &[f64],
    eps: f64,
) -> Result<Vec<ProjectedPixel>> {
    let ray = pixel_ray(src, u, v);
    let points = lift_along_ray(&ray, depths)?;
    Ok(points.iter().map(|p| project_point_eps(dst, p, eps)).collect())
}

/// Relative pose taking `src` camera-frame points into the `dst` frame.
pub fn relative_pose(src: &Camera, dst: &Camera) -> (Mat3, Vec3) {
    let r_rel = dst.rotation * src.rotation.transpose();
    let t_rel = dst.translation - r_rel * src.translation;
    (r_rel, t_rel)
}

fn skew_matrix(t: &Vec3) -> Mat3 {
    #[rustfmt::skip]
    let m = Mat3::new(
        0.0,  -t.z, t.y,
        t.z,  0.0,  -t.x,
        -t.y, t.x,  0.0,
    );
    m
}

/// Fundamental matrix with `x_dst^T F x_src = 0`.
///
/// Fails when the camera centers coincide (no baseline).
pub fn fundamental_matrix(src: &Camera, dst: &Camera) -> Result<Mat3> {
    let baseline = (src.center() - dst.center()).norm();
    let scale = src.center().norm().max(dst.center().norm()).max(1.0);
    if baseline <= 1e-12 * scale {
        return Err(Error::Degenerate(
            "camera centers coincide; epipolar geometry is undefined".into(),
        ));
    }
    let (r_rel, t_rel) = relative_pose(src, dst);
    let essential = skew_matrix(&t_rel) * r_rel;
    Ok(dst.intrinsics_inv.transpose() * essential * src.intrinsics_inv)
}

/// Epipolar line `(a, b, c)` in `dst` of source pixel `(u, v)`.
pub fn epipolar_line(src: &Camera, dst: &Camera, u: f64, v: f64) -> Result<Vec3> {
    Ok(fundamental_matrix(src, dst)? * Vec3::new(u, v, 1.0))
}

/// Distance in `dst` pixels from `proj` to the epipolar line of `(u, v)`.
pub fn fundamental_residual(
    src: &Camera,
    dst: &Camera,
    u: f64,
    v: f64,
    proj: &ProjectedPixel,
) -> Result<f64> {
    if !proj.valid {
        return Err(Error::InvalidArgument(
            "fundamental residual needs a valid projection".into(),
        ));
    }
    let line = epipolar_line(src, dst, u, v)?;
    let norm = (line.x * line.x + line.y * line.y).sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("epipolar line has zero normal".into()));
    }
    Ok((line.x * proj.u + line.y * proj.v + line.z).abs() / norm)
}

/// Homogeneous image in `dst` of the source ray's point at infinity,
/// `K_dst R_rel K_src^-1 [u, v, 1]^T`. Its z component is the rate at which
/// the projective depth grows with the anchor depth.
pub fn infinity_point(src: &Camera, dst: &Camera, u: f64, v: f64) -> Vec3 {
    let (r_rel, _) = relative_pose(src, dst);
    dst.intrinsics * r_rel * src.intrinsics_inv * Vec3::new(u, v, 1.0)
}

/// Rigid motion of the world frame: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation, "rigid transform rotation")?;
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCamera(
                "rigid transform translation has non-finite entries".into(),
            ));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// The camera that sees the `g`-moved world exactly as `cam` sees the
/// original one.
pub fn apply_global_rigid(cam: &Camera, g: &RigidTransform) -> Camera {
    let rotation = cam.rotation * g.rotation.transpose();
    let translation = cam.translation - rotation * g.translation;
    Camera {
        intrinsics: cam.intrinsics,
        intrinsics_inv: cam.intrinsics_inv,
        rotation,
        translation,
        image_size: cam.image_size,
    }
}

/// Rotation matrix from an axis (need not be unit) and angle, via Rodrigues.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Mat3::identity();
    }
    let k = skew_matrix(&(axis / n));
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}
