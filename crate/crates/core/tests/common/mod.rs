#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urope::attention::{assign_anchors, HeadAnchorAssignment, MultiviewLayout};
use urope::geometry::{axis_angle, project_cross_view, Camera, RigidTransform};
use urope::rope::{make_anchor_schedule, RopeConfig, SamplingKind};
use urope::scene::look_at_origin;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = unit_vector(rng);
    axis_angle(axis, rng.gen_range(-3.1..3.1))
}

pub fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let t = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    RigidTransform::new(random_rotation(rng), t).unwrap()
}

/// Random intrinsics on a `w x h` image.
pub fn random_intrinsics(rng: &mut ChaCha8Rng, w: u32, h: u32) -> (f64, f64, f64, f64, f64) {
    let f = rng.gen_range(0.5..2.0) * w as f64;
    let fy = f * rng.gen_range(0.8..1.25);
    let cx = rng.gen_range(0.3..0.7) * w as f64;
    let cy = rng.gen_range(0.3..0.7) * h as f64;
    let skew = if rng.gen_bool(0.3) { rng.gen_range(-2.0..2.0) } else { 0.0 };
    (f, fy, cx, cy, skew)
}

/// Fully random pose (camera may face anywhere).
pub fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let (w, h) = (64, 48);
    let (fx, fy, cx, cy, s) = random_intrinsics(rng, w, h);
    let t = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
    Camera::from_params(fx, fy, cx, cy, s, random_rotation(rng), t, (w, h)).unwrap()
}

/// Camera on a sphere around a point near the origin, looking at it, with
/// random roll.
pub fn random_rig_camera(rng: &mut ChaCha8Rng) -> Camera {
    let (w, h) = (64, 48);
    let (fx, fy, cx, cy, s) = random_intrinsics(rng, w, h);
    let target = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let center = target + unit_vector(rng) * rng.gen_range(2.0..6.0);
    let look = look_at_origin(center - target).unwrap();
    let roll = axis_angle(Vector3::z(), rng.gen_range(-0.5..0.5));
    let r = roll * look;
    let t = -(r * center);
    Camera::from_params(fx, fy, cx, cy, s, r, t, (w, h)).unwrap()
}

/// Two rig cameras whose centers are at least `min_baseline` apart.
pub fn random_pair(rng: &mut ChaCha8Rng, min_baseline: f64) -> (Camera, Camera) {
    loop {
        let a = random_rig_camera(rng);
        let b = random_rig_camera(rng);
        if (a.center() - b.center()).norm() >= min_baseline {
            return (a, b);
        }
    }
}

pub fn random_pixel(rng: &mut ChaCha8Rng, cam: &Camera) -> (f64, f64) {
    let (w, h) = cam.image_size();
    (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// `n` rig cameras with `lv` random pixels each.
pub fn random_layout(rng: &mut ChaCha8Rng, n: usize, lv: usize) -> MultiviewLayout {
    let cams: Vec<Camera> = loop {
        let cams: Vec<Camera> = (0..n).map(|_| random_rig_camera(rng)).collect();
        let ok = (0..n).all(|i| (i + 1..n).all(|j| (cams[i].center() - cams[j].center()).norm() >= 0.1));
        if ok {
            break cams;
        }
    };
    let pixels: Vec<Vec<(f64, f64)>> =
        cams.iter().map(|c| (0..lv).map(|_| random_pixel(rng, c)).collect()).collect();
    MultiviewLayout::new(cams, &pixels).unwrap()
}

pub fn max_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A random multiview self-attention problem.
pub struct Instance {
    pub q: Array4<f64>,
    pub k: Array4<f64>,
    pub v: Array4<f64>,
    pub layout: MultiviewLayout,
    pub assignment: HeadAnchorAssignment,
    pub cfg: RopeConfig,
}

/// Shapes bounded by `b <= max_b`, `n <= max_n`, `lv <= max_lv`,
/// `h <= max_h`, `c <= max_c`; head-wise anchors with `K | H`.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    max_b: usize,
    max_n: usize,
    max_lv: usize,
    max_h: usize,
    max_c: usize,
) -> Instance {
    let b = rng.gen_range(1..=max_b);
    let n = rng.gen_range(1..=max_n);
    let lv = rng.gen_range(1..=max_lv);
    let h = rng.gen_range(1..=max_h);
    let c = 4 * rng.gen_range(1..=max_c / 4);
    let divisors: Vec<usize> = (1..=h).filter(|k| h % k == 0).collect();
    let k = divisors[rng.gen_range(0..divisors.len())];
    let d_min = rng.gen_range(0.5..3.0);
    let schedule = make_anchor_schedule(SamplingKind::Uniform, d_min, d_min + rng.gen_range(1.0..20.0), k).unwrap();
    let assignment = assign_anchors(&schedule, h).unwrap();
    let layout = random_layout(rng, n, lv);
    let cfg = RopeConfig::new(c).unwrap().with_base([10.0, 100.0][rng.gen_range(0..2)]).unwrap();
    Instance {
        q: random_tensor(rng, (b, n * lv, h, c)),
        k: random_tensor(rng, (b, n * lv, h, c)),
        v: random_tensor(rng, (b, n * lv, h, c)),
        layout,
        assignment,
        cfg,
    }
}

/// Largest `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_diff(a: &Array4<f64>, b: &Array4<f64>, floor: f64) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Smallest `|w_tilde|` over every cross-view key projection of `layout`.
/// Pixel coordinates are amplified by its inverse, so rigs where it is tiny
/// are numerically ill-conditioned.
pub fn min_projection_depth(layout: &MultiviewLayout, assignment: &HeadAnchorAssignment) -> f64 {
    let mut depths: Vec<f64> = (0..assignment.heads()).flat_map(|h| assignment.head_depths(h).to_vec()).collect();
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    depths.dedup();
    let mut m = f64::INFINITY;
    for t in layout.tokens() {
        for (j, dst) in layout.cameras().iter().enumerate() {
            if j == t.view {
                continue;
            }
            let src = &layout.cameras()[t.view];
            for p in project_cross_view(src, dst, t.u, t.v, &depths).unwrap() {
                m = m.min(p.w_tilde.abs());
            }
        }
    }
    m
}
