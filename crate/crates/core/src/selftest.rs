//! Built-in checks behind `urope selftest`.
//!
//! `Quick` runs the fixed examples and compares the pipeline against the
//! golden files in `golden/` (produced by `scripts/gen_goldens.py`, an
//! independent numpy implementation). `Full` adds randomized property sweeps
//! of at least 1000 cases each. Every sweep draws from `ChaCha8Rng` with a
//! fixed seed, so reports are reproducible byte for byte.

use std::fmt;
use std::time::Instant;

use nalgebra::Vector3;
use ndarray::{Array4, ArrayD, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{dominant_head_map, normalized_entropy};
use crate::attention::{
    assign_anchors, flop_estimate, sdpa_forward, sequence_weights, standard_attention_flops,
    urope_self_attention, urope_self_attention_backward, AttentionOptions, MultiviewLayout,
};
use crate::config::RunConfig;
use crate::geometry::{
    apply_global_rigid, axis_angle, fundamental_residual, project_cross_view, Camera, Mat3, RigidTransform,
};
use crate::io::{csv_diff, decode_tensor, diagnostic_files, projection_csv, tensor4_csv, DiagnosticTarget};
use crate::oracle::{finite_difference_grads, pairwise_urope_attention};
use crate::rope::{
    make_anchor_schedule, rope_frequencies, rope_rotate_1d, rope_rotate_2d, rope_rotate_3d, rope_rotate_6d,
    RopeConfig, SamplingKind,
};
use crate::scene::{gen_scene, look_at_origin, Scene, SceneParams};

const GOLDEN_SCENE: &str = include_str!("../golden/scene.json");
const GOLDEN_PROJECTION: &str = include_str!("../golden/projection.csv");
const GOLDEN_ATTENTION: &str = include_str!("../golden/attention.csv");
const GOLDEN_SINGLE_VIEW: &str = include_str!("../golden/attention_single_view.csv");
const GOLDEN_ENTROPY: &str = include_str!("../golden/entropy.csv");
const GOLDEN_DOMINANT: &str = include_str!("../golden/dominant.csv");
const GOLDEN_HEATMAPS: [&str; 8] = [
    include_str!("../golden/heatmap_h0.csv"),
    include_str!("../golden/heatmap_h1.csv"),
    include_str!("../golden/heatmap_h2.csv"),
    include_str!("../golden/heatmap_h3.csv"),
    include_str!("../golden/heatmap_h4.csv"),
    include_str!("../golden/heatmap_h5.csv"),
    include_str!("../golden/heatmap_h6.csv"),
    include_str!("../golden/heatmap_h7.csv"),
];
const GOLDEN_INPUTS: [(&str, &[u8], f64); 3] = [
    (include_str!("../golden/inputs/q.json"), include_bytes!("../golden/inputs/q.bin"), 0.0),
    (include_str!("../golden/inputs/k.json"), include_bytes!("../golden/inputs/k.bin"), 1.0),
    (include_str!("../golden/inputs/v.json"), include_bytes!("../golden/inputs/v.bin"), 2.0),
];

/// Numeric tolerance for golden comparisons.
pub const GOLDEN_TOLERANCE: f64 = 1e-9;

/// Pixel and depths of the golden projection.
pub const GOLDEN_PIXEL: (f64, f64) = (11.5, 3.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// The invariant the check guards, named in failure reports.
    pub invariant: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed {
            write!(f, "PASS {}", self.name)
        } else {
            write!(f, "FAIL {}: violated \"{}\": {}", self.name, self.invariant, self.detail)
        }
    }
}

type Check = fn() -> std::result::Result<(), String>;

/// Parameters of the committed fixture scene.
pub fn golden_scene_params() -> SceneParams {
    SceneParams {
        seed: 7,
        n_views: 2,
        image_size: (32, 32),
        patch_size: 8,
        pose_spread: 0.5,
        focal_jitter: 0.2,
        ..Default::default()
    }
}

/// Deterministic fixture tensor: element `i` (row-major) is
/// `sin(0.37 (i + 1) + phase)`.
pub fn fixture_tensor(shape: (usize, usize, usize, usize), phase: f64) -> Array4<f64> {
    let mut i = 0.0;
    Array4::from_shape_fn(shape, |_| {
        i += 1.0;
        (0.37 * i + phase).sin()
    })
}

/// Runs every check of `level` in a fixed order.
pub fn run(level: Level) -> Vec<CheckOutcome> {
    let mut checks: Vec<(&'static str, &'static str, Check)> = vec![
        ("scene_regenerates", "scene generation is a pure function of (seed, parameters)", scene_regenerates),
        ("camera_rejects_bad_focal", "cameras require positive focal lengths", camera_rejects_bad_focal),
        ("same_view_identity", "same-view projection is the identity", same_view_identity),
        ("rope_examples", "rotary frequencies and rotations match their closed forms", rope_examples),
        ("anchor_schedules", "schedules are increasing and hit their endpoints", anchor_schedules),
        ("anchor_groups", "heads split into contiguous equal anchor groups", anchor_groups),
        ("sdpa_single_key", "softmax over a single key is 1", sdpa_single_key),
        ("flop_count", "view-batched cost equals standard attention cost", flop_count),
        ("entropy_examples", "uniform head scores have entropy exactly 1", entropy_examples),
        ("golden_inputs", "tensor files decode to the fixture values", golden_inputs),
        ("golden_projection", "cross-view projection matches the reference", golden_projection),
        ("golden_attention", "multiview attention matches the pairwise reference", golden_attention),
        ("golden_single_view", "single-view attention equals plain 2D rotary attention", golden_single_view),
        ("golden_diagnostics", "entropy, dominant-head and heatmap outputs match the reference", golden_diagnostics),
    ];
    if level == Level::Full {
        checks.extend_from_slice(&[
            ("sweep_same_view", "same-view projection is the identity", sweep_same_view as Check),
            ("sweep_epipolar", "projections lie on the epipolar line", sweep_epipolar),
            ("sweep_monotone", "projections move monotonically with depth", sweep_monotone),
            ("sweep_se3_projection", "projections are invariant to a common rigid transform", sweep_se3_projection),
            ("sweep_rope", "rotary relative-position identity, isometry and composition", sweep_rope),
            ("sweep_oracle", "view-batched attention equals the pairwise reference", sweep_oracle),
            ("sweep_se3_weights", "attention weights are invariant to a common rigid transform", sweep_se3_weights),
            ("sweep_gradients", "analytic gradients match finite differences", sweep_gradients),
            ("sweep_dominant_scaling", "dominant-head map ignores positive rescaling", sweep_dominant_scaling),
        ]);
    }
    checks
        .into_iter()
        .map(|(name, invariant, f)| {
            let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            CheckOutcome { name, invariant, passed: result.is_ok(), detail: result.err().unwrap_or_default() }
        })
        .collect()
}

/// Wall-clock seconds of `run(level)`, for reports.
pub fn timed_run(level: Level) -> (Vec<CheckOutcome>, f64) {
    let t = Instant::now();
    let out = run(level);
    (out, t.elapsed().as_secs_f64())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn golden_scene() -> Scene {
    Scene::from_json(GOLDEN_SCENE).expect("committed scene parses")
}

fn compare(name: &str, expected: &str, actual: &str) -> std::result::Result<(), String> {
    match csv_diff(expected, actual, GOLDEN_TOLERANCE) {
        None => Ok(()),
        Some(d) => Err(format!("{name}: {d}")),
    }
}

fn scene_regenerates() -> std::result::Result<(), String> {
    let s = gen_scene(&golden_scene_params()).map_err(|e| e.to_string())?;
    ensure(s.to_json() == GOLDEN_SCENE, || "regenerated scene JSON differs from the committed bytes".into())?;
    ensure(golden_scene().to_json() == GOLDEN_SCENE, || "scene JSON does not round-trip".into())
}

fn camera_rejects_bad_focal() -> std::result::Result<(), String> {
    let err = Camera::from_params(-100.0, 100.0, 0.0, 0.0, 0.0, Mat3::identity(), Vector3::zeros(), (8, 8));
    match err {
        Err(e) if e.to_string().contains("non-positive focal") => Ok(()),
        other => Err(format!("unexpected result {other:?}")),
    }
}

fn same_view_identity() -> std::result::Result<(), String> {
    let scene = golden_scene();
    for cam in &scene.cameras {
        for &(u, v) in &scene.patch_grid[0] {
            for p in project_cross_view(cam, cam, u, v, &[2.0, 8.0, 20.0]).map_err(|e| e.to_string())? {
                ensure((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9, || format!("({u}, {v}) -> {p:?}"))?;
            }
        }
    }
    Ok(())
}

fn rope_examples() -> std::result::Result<(), String> {
    let cfg = RopeConfig::new(8).map_err(|e| e.to_string())?;
    let f = rope_frequencies(&cfg, 4).map_err(|e| e.to_string())?;
    ensure(f[0] == 1.0 && (f[1] - 0.1).abs() < 1e-15, || format!("ladder {f:?}"))?;
    let r = rope_rotate_1d(&[1.0, 0.0], std::f64::consts::FRAC_PI_2, &[1.0]).map_err(|e| e.to_string())?;
    ensure(r[0].abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12, || format!("rotation {r:?}"))?;
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
    let cfg12 = RopeConfig::new(12).map_err(|e| e.to_string())?;
    let same = rope_rotate_2d(&x, 0.0, 0.0, &cfg12).map_err(|e| e.to_string())? == x
        && rope_rotate_3d(&x, [0.0; 3], &cfg12).map_err(|e| e.to_string())? == x
        && rope_rotate_6d(&x, [0.0; 6], &cfg12).map_err(|e| e.to_string())? == x;
    ensure(same, || "zero position is not the identity".into())
}

fn anchor_schedules() -> std::result::Result<(), String> {
    let d = |k, lo, hi, n| make_anchor_schedule(k, lo, hi, n).map(|s| s.depths().to_vec()).map_err(|e| e.to_string());
    ensure(d(SamplingKind::Uniform, 2.0, 20.0, 4)? == [2.0, 8.0, 14.0, 20.0], || "uniform".into())?;
    let lg = d(SamplingKind::LogUniform, 1.0, 100.0, 3)?;
    ensure(lg[0] == 1.0 && (lg[1] - 10.0).abs() < 1e-12 && lg[2] == 100.0, || format!("log-uniform {lg:?}"))?;
    ensure(d(SamplingKind::Uniform, 2.0, 20.0, 1)? == [11.0], || "K = 1 midpoint".into())?;
    for k in 3..12 {
        let lid = d(SamplingKind::Lid, 2.0, 20.0, k)?;
        let gaps: Vec<f64> = lid.windows(2).map(|w| w[1] - w[0]).collect();
        ensure(lid[0] == 2.0 && lid[k - 1] == 20.0, || format!("lid endpoints {lid:?}"))?;
        ensure(gaps.windows(2).all(|g| g[1] > g[0]), || format!("lid gaps {gaps:?}"))?;
    }
    Ok(())
}

fn anchor_groups() -> std::result::Result<(), String> {
    let s = make_anchor_schedule(SamplingKind::Uniform, 2.0, 20.0, 4).map_err(|e| e.to_string())?;
    let a = assign_anchors(&s, 8).map_err(|e| e.to_string())?;
    ensure(a.per_head_depth() == Some(&[2.0, 2.0, 8.0, 8.0, 14.0, 14.0, 20.0, 20.0][..]), || format!("{a:?}"))?;
    ensure(assign_anchors(&s, 6).is_err(), || "6 heads accepted for 4 anchors".into())
}

fn sdpa_single_key() -> std::result::Result<(), String> {
    let q = fixture_tensor((1, 3, 2, 4), 0.0);
    let k = fixture_tensor((1, 1, 2, 4), 1.0);
    let v = fixture_tensor((1, 1, 2, 4), 2.0);
    let out = sdpa_forward(&q, &k, &v, 0.5).map_err(|e| e.to_string())?;
    for l in 0..3 {
        ensure(out.out.slice(ndarray::s![0, l, .., ..]) == v.slice(ndarray::s![0, 0, .., ..]), || "out != v".into())?;
    }
    Ok(())
}

fn flop_count() -> std::result::Result<(), String> {
    ensure(flop_estimate(1, 1, 4, 2, 4) == 512, || format!("{}", flop_estimate(1, 1, 4, 2, 4)))?;
    ensure(flop_estimate(2, 3, 5, 4, 8) == standard_attention_flops(2, 4, 15, 8), || "count mismatch".into())
}

fn entropy_examples() -> std::result::Result<(), String> {
    ensure(normalized_entropy(&[0.25; 4]) == Some(1.0), || "uniform".into())?;
    ensure(normalized_entropy(&[0.0, 1.0, 0.0]) == Some(0.0), || "one-hot".into())?;
    let e = normalized_entropy(&[1.0, 1.0, 1.0, 1.0, 1.0, 5.0]).unwrap_or(f64::NAN);
    ensure((e - 0.8359750080865052).abs() < 1e-15, || format!("six-head example {e}"))
}

fn golden_inputs() -> std::result::Result<(), String> {
    for (side, bytes, phase) in GOLDEN_INPUTS {
        let t: ArrayD<f64> = decode_tensor(side, bytes).map_err(|e| e.to_string())?;
        let t = t.into_dimensionality::<Ix4>().map_err(|e| e.to_string())?;
        ensure(t == fixture_tensor(t.dim(), phase), || format!("phase {phase} tensor differs"))?;
    }
    Ok(())
}

fn golden_projection() -> std::result::Result<(), String> {
    let scene = golden_scene();
    let cfg = RunConfig::default();
    let depths = cfg.schedule().map_err(|e| e.to_string())?.depths().to_vec();
    let (u, v) = GOLDEN_PIXEL;
    let rows = project_cross_view(&scene.cameras[0], &scene.cameras[1], u, v, &depths).map_err(|e| e.to_string())?;
    compare("projection.csv", GOLDEN_PROJECTION, &projection_csv(&depths, &rows))
}

fn golden_run(n_views: usize) -> std::result::Result<(Array4<f64>, Array4<f64>), String> {
    let mut scene = golden_scene();
    scene.cameras.truncate(n_views);
    scene.patch_grid.truncate(n_views);
    let layout = scene.layout().map_err(|e| e.to_string())?;
    let cfg = RunConfig::default();
    let shape = (1, layout.len(), cfg.heads, cfg.per_head_dim);
    let (q, k, v) = (fixture_tensor(shape, 0.0), fixture_tensor(shape, 1.0), fixture_tensor(shape, 2.0));
    let assignment = cfg.assignment().map_err(|e| e.to_string())?;
    let rope = cfg.rope_config().map_err(|e| e.to_string())?;
    let out = urope_self_attention(&q, &k, &v, &layout, &assignment, &rope, &cfg.attention_options())
        .map_err(|e| e.to_string())?;
    let w = sequence_weights(&out.weights, 1, layout.n_views()).map_err(|e| e.to_string())?;
    Ok((out.out, w))
}

fn golden_attention() -> std::result::Result<(), String> {
    compare("attention.csv", GOLDEN_ATTENTION, &tensor4_csv(&golden_run(2)?.0))
}

fn golden_single_view() -> std::result::Result<(), String> {
    compare("attention_single_view.csv", GOLDEN_SINGLE_VIEW, &tensor4_csv(&golden_run(1)?.0))
}

fn golden_diagnostics() -> std::result::Result<(), String> {
    let (_, w) = golden_run(2)?;
    let files = diagnostic_files(&[w], &golden_scene(), &RunConfig::default(), DiagnosticTarget::default())
        .map_err(|e| e.to_string())?;
    let get = |name: &str| files.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str()).unwrap_or("");
    compare("entropy.csv", GOLDEN_ENTROPY, get("entropy.csv"))?;
    compare("dominant.csv", GOLDEN_DOMINANT, get("dominant.csv"))?;
    for (h, golden) in GOLDEN_HEATMAPS.iter().enumerate() {
        let name = format!("heatmap_h{h}.csv");
        compare(&name, golden, get(&name))?;
    }
    Ok(())
}

const SWEEP: usize = 1000;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(r: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn rigid(r: &mut ChaCha8Rng) -> RigidTransform {
    let t = Vector3::new(r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0));
    RigidTransform::new(axis_angle(unit(r), r.gen_range(-3.1..3.1)), t).expect("rotation is orthonormal")
}

/// Camera on a sphere around a point near the origin, looking at it.
fn rig_camera(r: &mut ChaCha8Rng) -> Camera {
    let (w, h) = (64u32, 48u32);
    let f = r.gen_range(0.5..2.0) * w as f64;
    let fy = f * r.gen_range(0.8..1.25);
    let (cx, cy) = (r.gen_range(0.3..0.7) * w as f64, r.gen_range(0.3..0.7) * h as f64);
    let skew = if r.gen_bool(0.3) { r.gen_range(-2.0..2.0) } else { 0.0 };
    let target = Vector3::new(r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5));
    let center = target + unit(r) * r.gen_range(2.0..6.0);
    let rot = axis_angle(Vector3::z(), r.gen_range(-0.5..0.5)) * look_at_origin(center - target).expect("non-vertical");
    Camera::from_params(f, fy, cx, cy, skew, rot, -(rot * center), (w, h)).expect("valid camera")
}

fn rig_pair(r: &mut ChaCha8Rng) -> (Camera, Camera) {
    loop {
        let (a, b) = (rig_camera(r), rig_camera(r));
        if (a.center() - b.center()).norm() >= 0.1 {
            return (a, b);
        }
    }
}

fn pixel(r: &mut ChaCha8Rng, c: &Camera) -> (f64, f64) {
    let (w, h) = c.image_size();
    (r.gen_range(0.0..w as f64), r.gen_range(0.0..h as f64))
}

fn tensor(r: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn layout(r: &mut ChaCha8Rng, n: usize, lv: usize) -> MultiviewLayout {
    loop {
        let cams: Vec<Camera> = (0..n).map(|_| rig_camera(r)).collect();
        if (0..n).all(|i| (i + 1..n).all(|j| (cams[i].center() - cams[j].center()).norm() >= 0.1)) {
            let px: Vec<Vec<(f64, f64)>> = cams.iter().map(|c| (0..lv).map(|_| pixel(r, c)).collect()).collect();
            return MultiviewLayout::new(cams, &px).expect("valid layout");
        }
    }
}

const ANCHORS: [f64; 4] = [2.0, 8.0, 14.0, 20.0];

fn sweep_same_view() -> std::result::Result<(), String> {
    let mut r = rng(101);
    for case in 0..SWEEP {
        let cam = rig_camera(&mut r);
        let (u, v) = pixel(&mut r, &cam);
        let d = r.gen_range(0.1..50.0);
        let p = project_cross_view(&cam, &cam, u, v, &[d]).map_err(|e| e.to_string())?[0];
        ensure((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9, || format!("case {case}: {p:?}"))?;
    }
    Ok(())
}

fn sweep_epipolar() -> std::result::Result<(), String> {
    let mut r = rng(102);
    for case in 0..SWEEP {
        let (a, b) = rig_pair(&mut r);
        let (u, v) = pixel(&mut r, &a);
        for p in project_cross_view(&a, &b, u, v, &ANCHORS).map_err(|e| e.to_string())? {
            if p.valid {
                let res = fundamental_residual(&a, &b, u, v, &p).map_err(|e| e.to_string())?;
                ensure(res < 1e-6, || format!("case {case}: residual {res} px"))?;
            }
        }
    }
    Ok(())
}

fn sweep_monotone() -> std::result::Result<(), String> {
    let mut r = rng(103);
    for case in 0..SWEEP {
        let (a, b) = rig_pair(&mut r);
        let (u, v) = pixel(&mut r, &a);
        let front: Vec<_> = project_cross_view(&a, &b, u, v, &ANCHORS)
            .map_err(|e| e.to_string())?
            .into_iter()
            .filter(|p| p.valid && p.w_tilde > 0.0)
            .collect();
        if front.len() < 2 {
            continue;
        }
        let dir = Vector3::new(front[1].u - front[0].u, front[1].v - front[0].v, 0.0);
        let t: Vec<f64> = front.iter().map(|p| (p.u - front[0].u) * dir.x + (p.v - front[0].v) * dir.y).collect();
        ensure(t.windows(2).all(|w| w[1] > w[0]), || format!("case {case}: {t:?}"))?;
    }
    Ok(())
}

fn sweep_se3_projection() -> std::result::Result<(), String> {
    let mut r = rng(104);
    for case in 0..SWEEP {
        let (a, b) = rig_pair(&mut r);
        let g = rigid(&mut r);
        let (u, v) = pixel(&mut r, &a);
        let x = project_cross_view(&a, &b, u, v, &ANCHORS).map_err(|e| e.to_string())?;
        let y = project_cross_view(&apply_global_rigid(&a, &g), &apply_global_rigid(&b, &g), u, v, &ANCHORS)
            .map_err(|e| e.to_string())?;
        for (p, q) in x.iter().zip(&y) {
            if p.w_tilde.abs() >= 1e-2 {
                ensure((p.u - q.u).abs() < 1e-7 && (p.v - q.v).abs() < 1e-7, || format!("case {case}: {p:?} vs {q:?}"))?;
            }
        }
    }
    Ok(())
}

fn sweep_rope() -> std::result::Result<(), String> {
    let mut r = rng(105);
    for case in 0..SWEEP {
        for axes in [1usize, 2, 3, 6] {
            let c = 2 * axes.max(1) * r.gen_range(1..4);
            let cfg = RopeConfig::new(c).map_err(|e| e.to_string())?;
            let rot = |x: &[f64], p: &[f64]| -> Vec<f64> {
                match axes {
                    1 => rope_rotate_1d(x, p[0], &rope_frequencies(&cfg, c).unwrap()).unwrap(),
                    2 => rope_rotate_2d(x, p[0], p[1], &cfg).unwrap(),
                    3 => rope_rotate_3d(x, [p[0], p[1], p[2]], &cfg).unwrap(),
                    _ => rope_rotate_6d(x, p.try_into().unwrap(), &cfg).unwrap(),
                }
            };
            let q: Vec<f64> = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
            let pq: Vec<f64> = (0..axes).map(|_| r.gen_range(-100.0..100.0)).collect();
            let pk: Vec<f64> = (0..axes).map(|_| r.gen_range(-100.0..100.0)).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let diff: Vec<f64> = pk.iter().zip(&pq).map(|(a, b)| a - b).collect();
            let lhs = dot(&rot(&q, &pq), &rot(&k, &pk));
            let rhs = dot(&q, &rot(&k, &diff));
            ensure((lhs - rhs).abs() < 1e-9, || format!("case {case}, {axes} axes: {lhs} vs {rhs}"))?;
            let (n0, n1) = (dot(&q, &q).sqrt(), {
                let x = rot(&q, &pq);
                dot(&x, &x).sqrt()
            });
            ensure((n0 - n1).abs() <= 1e-12 * n0, || format!("case {case}: norm {n0} -> {n1}"))?;
            let sum: Vec<f64> = pq.iter().zip(&pk).map(|(a, b)| a + b).collect();
            let two = rot(&rot(&q, &pq), &pk);
            let one = rot(&q, &sum);
            ensure(two.iter().zip(&one).all(|(a, b)| (a - b).abs() < 1e-9), || format!("case {case}: composition"))?;
        }
    }
    Ok(())
}

struct Problem {
    q: Array4<f64>,
    k: Array4<f64>,
    v: Array4<f64>,
    layout: MultiviewLayout,
    assignment: crate::attention::HeadAnchorAssignment,
    cfg: RopeConfig,
}

fn problem(r: &mut ChaCha8Rng, max_b: usize, max_n: usize, max_lv: usize, max_h: usize, max_c: usize) -> Problem {
    let (b, n, lv, h) = (r.gen_range(1..=max_b), r.gen_range(1..=max_n), r.gen_range(1..=max_lv), r.gen_range(1..=max_h));
    let c = 4 * r.gen_range(1..=max_c / 4);
    let divisors: Vec<usize> = (1..=h).filter(|k| h % k == 0).collect();
    let k = divisors[r.gen_range(0..divisors.len())];
    let d_min = r.gen_range(0.5..3.0);
    let schedule = make_anchor_schedule(SamplingKind::Uniform, d_min, d_min + r.gen_range(1.0..20.0), k).expect("valid");
    let layout = layout(r, n, lv);
    Problem {
        q: tensor(r, (b, n * lv, h, c)),
        k: tensor(r, (b, n * lv, h, c)),
        v: tensor(r, (b, n * lv, h, c)),
        layout,
        assignment: assign_anchors(&schedule, h).expect("K divides H"),
        cfg: RopeConfig::new(c).expect("valid dim"),
    }
}

fn max_abs(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sweep_oracle() -> std::result::Result<(), String> {
    let mut r = rng(106);
    let opts = AttentionOptions::default();
    for case in 0..SWEEP {
        let p = problem(&mut r, 2, 3, 8, 8, 16);
        let got = urope_self_attention(&p.q, &p.k, &p.v, &p.layout, &p.assignment, &p.cfg, &opts).map_err(|e| e.to_string())?;
        let (out, _) = pairwise_urope_attention(&p.q, &p.layout, &p.k, &p.v, &p.layout, &p.assignment, &p.cfg, &opts)
            .map_err(|e| e.to_string())?;
        let d = max_abs(&got.out, &out);
        ensure(d < 1e-10, || format!("case {case}: max abs diff {d}"))?;
    }
    Ok(())
}

/// Smallest |w_tilde| over the cross-view key projections.
fn conditioning(p: &Problem) -> f64 {
    let mut m = f64::INFINITY;
    for t in p.layout.tokens() {
        for (j, dst) in p.layout.cameras().iter().enumerate() {
            if j != t.view {
                for h in 0..p.assignment.heads() {
                    let src = &p.layout.cameras()[t.view];
                    let x = project_cross_view(src, dst, t.u, t.v, p.assignment.head_depths(h)).expect("depths valid");
                    m = x.iter().fold(m, |m, q| m.min(q.w_tilde.abs()));
                }
            }
        }
    }
    m
}

fn sweep_se3_weights() -> std::result::Result<(), String> {
    let mut r = rng(107);
    let opts = AttentionOptions::default();
    let mut done = 0;
    while done < SWEEP {
        let p = problem(&mut r, 1, 3, 4, 4, 8);
        let g = rigid(&mut r);
        if conditioning(&p) < 0.05 {
            continue;
        }
        let moved = p.layout.map_cameras(|c| apply_global_rigid(c, &g));
        let a = urope_self_attention(&p.q, &p.k, &p.v, &p.layout, &p.assignment, &p.cfg, &opts).map_err(|e| e.to_string())?;
        let b = urope_self_attention(&p.q, &p.k, &p.v, &moved, &p.assignment, &p.cfg, &opts).map_err(|e| e.to_string())?;
        let d = max_abs(&a.weights, &b.weights);
        ensure(d < 1e-7, || format!("case {done}: weights moved by {d}"))?;
        done += 1;
    }
    Ok(())
}

fn sweep_gradients() -> std::result::Result<(), String> {
    let mut r = rng(108);
    let opts = AttentionOptions::default();
    for case in 0..SWEEP / 10 {
        let p = problem(&mut r, 1, 2, 2, 2, 8);
        let d_out = tensor(&mut r, p.q.dim());
        let g = urope_self_attention_backward(&p.q, &p.k, &p.v, &d_out, &p.layout, &p.assignment, &p.cfg, &opts)
            .map_err(|e| e.to_string())?;
        let fd = finite_difference_grads(
            |q, k, v| urope_self_attention(q, k, v, &p.layout, &p.assignment, &p.cfg, &opts).expect("valid").out,
            &p.q,
            &p.k,
            &p.v,
            &d_out,
            1e-4,
        );
        for (a, f) in [(&g.dq, &fd[0]), (&g.dk, &fd[1]), (&g.dv, &fd[2])] {
            let rel = a.iter().zip(f.iter()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3)).fold(0.0, f64::max);
            ensure(rel <= 1e-5, || format!("case {case}: relative error {rel}"))?;
        }
    }
    Ok(())
}

fn sweep_dominant_scaling() -> std::result::Result<(), String> {
    let mut r = rng(109);
    for case in 0..SWEEP {
        let (n, lv, h) = (r.gen_range(1..=3), r.gen_range(1..=6), r.gen_range(1..=8));
        let l = layout(&mut r, n, lv);
        let w = Array4::from_shape_fn((2, h, 3, n * lv), |_| r.gen_range(0.0..1.0f64));
        let s = r.gen_range(1e-6..1e6);
        let a = dominant_head_map(&w, &l).map_err(|e| e.to_string())?;
        let b = dominant_head_map(&(&w * s), &l).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("case {case}: map changed under scale {s}"))?;
    }
    Ok(())
}
