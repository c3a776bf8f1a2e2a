//! Deterministic synthetic camera rigs and patch grids.
//!
//! Random numbers come from `ChaCha8Rng` (rand_chacha 0.3) seeded with
//! `seed_from_u64(seed)`. A uniform draw on `[0, 1)` is
//! `(next_u64() >> 11) * 2^-53`. Draw order is fixed: for each view in
//! order, (yaw jitter, pitch jitter, focal factor); then three coordinates
//! per ground-truth point. Changing any of this changes every fixture.

use nalgebra::Vector3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MultiviewLayout;
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, Camera, Mat3, Vec3};

/// Name of the generator, recorded in docs and fixtures.
pub const PRNG_NAME: &str = "chacha8-rand_chacha-0.3/seed_from_u64";

/// Distance from the look-at target (the world origin) to each camera.
pub const RIG_RADIUS: f64 = 4.0;

/// Patch-center convention: `((col + 0.5) p - 0.5, (row + 0.5) p - 0.5)`,
/// row-major.
pub fn patch_centers(image_size: (u32, u32), patch_size: u32) -> Result<Vec<(f64, f64)>> {
    let (w, h) = image_size;
    if patch_size == 0 || w == 0 || h == 0 || w % patch_size != 0 || h % patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {w}x{h} must be positive and divisible by patch size {patch_size}"
        )));
    }
    let p = patch_size as f64;
    let (cols, rows) = (w / patch_size, h / patch_size);
    Ok((0..rows)
        .flat_map(|r| (0..cols).map(move |c| ((c as f64 + 0.5) * p - 0.5, (r as f64 + 0.5) * p - 0.5)))
        .collect())
}

/// Parameters for [`gen_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    pub n_views: usize,
    pub image_size: (u32, u32),
    pub patch_size: u32,
    /// Angular spacing (radians) between neighbouring views around the
    /// vertical axis; per-view jitter is up to a quarter of it.
    pub pose_spread: f64,
    /// Focal lengths are scaled by a factor drawn from
    /// `[1 - jitter, 1 + jitter]`.
    pub focal_jitter: f64,
    /// Smallest allowed distance between two camera centers.
    pub min_baseline: f64,
    pub n_points: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_views: 2,
            image_size: (32, 32),
            patch_size: 8,
            pose_spread: 0.5,
            focal_jitter: 0.0,
            min_baseline: 0.1,
            n_points: 0,
        }
    }
}

/// A camera rig with its patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub patch_size: u32,
    pub cameras: Vec<Camera>,
    pub patch_grid: Vec<Vec<(f64, f64)>>,
    pub points: Option<Vec<[f64; 3]>>,
}

struct Uniform(ChaCha8Rng);

impl Uniform {
    fn next(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next()
    }
}

/// Camera at `center` looking at the origin, image y axis pointing down
/// world +y.
pub fn look_at_origin(center: Vec3) -> Result<Mat3> {
    let z = -center / center.norm();
    let x = Vector3::new(0.0, 1.0, 0.0).cross(&z);
    if x.norm() < 1e-9 {
        return Err(Error::InvalidArgument("view direction parallel to the up axis".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Ok(Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]))
}

pub fn gen_scene(params: &SceneParams) -> Result<Scene> {
    let p = params;
    if p.n_views == 0 {
        return Err(Error::InvalidArgument("scene needs at least one view".into()));
    }
    let grid = patch_centers(p.image_size, p.patch_size)?;
    if !(p.pose_spread.is_finite() && (0.0..=std::f64::consts::FRAC_PI_2).contains(&p.pose_spread)) {
        return Err(Error::InvalidArgument(format!(
            "pose spread must lie in [0, pi/2], got {}",
            p.pose_spread
        )));
    }
    if !(p.focal_jitter.is_finite() && (0.0..1.0).contains(&p.focal_jitter)) {
        return Err(Error::InvalidArgument(format!(
            "focal jitter must lie in [0, 1), got {}",
            p.focal_jitter
        )));
    }
    let mut rng = Uniform(ChaCha8Rng::seed_from_u64(p.seed));
    let (w, h) = p.image_size;
    let f0 = w as f64;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mid = (p.n_views as f64 - 1.0) / 2.0;
    let mut cameras = Vec::with_capacity(p.n_views);
    for k in 0..p.n_views {
        let yaw_jitter = rng.range(-0.25, 0.25) * p.pose_spread;
        let pitch = rng.range(-0.25, 0.25) * p.pose_spread;
        let focal = f0 * rng.range(1.0 - p.focal_jitter, 1.0 + p.focal_jitter);
        let yaw = (k as f64 - mid) * p.pose_spread + yaw_jitter;
        let center = axis_angle(Vec3::y(), yaw) * axis_angle(Vec3::x(), pitch)
            * Vec3::new(0.0, 0.0, -RIG_RADIUS);
        let rotation = look_at_origin(center)?;
        let translation = -(rotation * center);
        cameras.push(Camera::from_params(focal, focal, cx, cy, 0.0, rotation, translation, p.image_size)?);
    }
    for i in 0..cameras.len() {
        for j in i + 1..cameras.len() {
            let b = (cameras[i].center() - cameras[j].center()).norm();
            if b < p.min_baseline {
                return Err(Error::InvalidArgument(format!(
                    "views {i} and {j} have baseline {b:.4} below the minimum {}; increase pose spread",
                    p.min_baseline
                )));
            }
        }
    }
    let points = (p.n_points > 0).then(|| {
        (0..p.n_points)
            .map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)])
            .collect()
    });
    Ok(Scene {
        seed: p.seed,
        patch_size: p.patch_size,
        patch_grid: vec![grid; p.n_views],
        cameras,
        points,
    })
}

/// Wire form of one camera. Field order is part of the file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = c.rotation();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        let t = c.translation();
        let (width, height) = c.image_size();
        Self {
            fx: c.fx(),
            fy: c.fy(),
            cx: c.cx(),
            cy: c.cy(),
            skew: c.skew(),
            rotation,
            t: [t.x, t.y, t.z],
            width,
            height,
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: &CameraRecord) -> Result<Camera> {
        Camera::from_params(
            r.fx,
            r.fy,
            r.cx,
            r.cy,
            r.skew,
            Mat3::from_row_slice(&r.rotation),
            Vec3::from_row_slice(&r.t),
            (r.width, r.height),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    seed: u64,
    patch_size: u32,
    cameras: Vec<CameraRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<[f64; 3]>>,
}

impl Scene {
    /// Compact UTF-8 JSON followed by a newline.
    pub fn to_json(&self) -> String {
        let rec = SceneRecord {
            seed: self.seed,
            patch_size: self.patch_size,
            cameras: self.cameras.iter().map(CameraRecord::from).collect(),
            points: self.points.clone(),
        };
        let mut s = serde_json::to_string(&rec).expect("scene serializes");
        s.push('\n');
        s
    }

    /// Parses and revalidates every camera; the patch grid is rebuilt.
    pub fn from_json(text: &str) -> Result<Self> {
        let rec: SceneRecord = serde_json::from_str(text)?;
        if rec.cameras.is_empty() {
            return Err(Error::Format("scene has no cameras".into()));
        }
        let cameras = rec.cameras.iter().map(Camera::try_from).collect::<Result<Vec<_>>>()?;
        let patch_grid = cameras
            .iter()
            .map(|c| patch_centers(c.image_size(), rec.patch_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed: rec.seed, patch_size: rec.patch_size, cameras, patch_grid, points: rec.points })
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    /// Patch grid of view 0 as (columns, rows).
    pub fn grid_dims(&self, view: usize) -> (usize, usize) {
        let (w, h) = self.cameras[view].image_size();
        ((w / self.patch_size) as usize, (h / self.patch_size) as usize)
    }

    /// Token layout over all views (view-major, row-major patches).
    pub fn layout(&self) -> Result<MultiviewLayout> {
        let (cols, rows) = self.grid_dims(0);
        MultiviewLayout::new(self.cameras.clone(), &self.patch_grid)?.with_grid(cols, rows)
    }
}
