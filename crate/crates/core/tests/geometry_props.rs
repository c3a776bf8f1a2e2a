mod common;

use common::*;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;
use urope::geometry::*;

const ANCHORS: [f64; 4] = [2.0, 8.0, 14.0, 20.0];

fn random_depths(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let mut d: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..30.0)).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d.dedup();
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn same_camera_projection_is_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r);
        let (u, v) = random_pixel(&mut r, &cam);
        for p in project_cross_view(&cam, &cam, u, v, &random_depths(&mut r)).unwrap() {
            prop_assert!((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9, "{p:?} vs ({u}, {v})");
        }
    }

    #[test]
    fn projections_lie_on_epipolar_line(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (src, dst) = random_pair(&mut r, 0.1);
        let (u, v) = random_pixel(&mut r, &src);
        for p in project_cross_view(&src, &dst, u, v, &ANCHORS).unwrap() {
            if p.valid {
                let res = fundamental_residual(&src, &dst, u, v, &p).unwrap();
                prop_assert!(res < 1e-6, "residual {res}");
            }
        }
    }

    #[test]
    fn projections_move_monotonically(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (src, dst) = random_pair(&mut r, 0.1);
        let (u, v) = random_pixel(&mut r, &src);
        let depths = random_depths(&mut r);
        // Only while the lifted points stay in front of dst.
        let proj: Vec<_> = project_cross_view(&src, &dst, u, v, &depths)
            .unwrap()
            .into_iter()
            .filter(|p| p.valid && p.w_tilde > 0.0)
            .collect();
        let inf = infinity_point(&src, &dst, u, v);
        let line = epipolar_line(&src, &dst, u, v).unwrap();
        let dir = Vector3::new(-line.y, line.x, 0.0).normalize();
        let t: Vec<f64> = proj.iter().map(|p| p.u * dir.x + p.v * dir.y).collect();
        let increasing = t.windows(2).all(|w| w[1] > w[0]);
        let decreasing = t.windows(2).all(|w| w[1] < w[0]);
        prop_assert!(increasing || decreasing, "non-monotone {t:?}");
        if inf.z > 1e-9 {
            let (iu, iv) = (inf.x / inf.z, inf.y / inf.z);
            let dist: Vec<f64> = proj.iter().map(|p| ((p.u - iu).powi(2) + (p.v - iv).powi(2)).sqrt()).collect();
            prop_assert!(dist.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{dist:?}");
        }
    }

    #[test]
    fn rigid_transport_preserves_projection(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r);
        let g = random_rigid(&mut r);
        let p = Vector3::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
        let a = project_point(&cam, &p);
        let b = project_point(&apply_global_rigid(&cam, &g), &g.apply(&p));
        let scale = a.u.abs().max(a.v.abs()).max(1.0);
        prop_assert!((a.u - b.u).abs() <= 1e-9 * scale && (a.v - b.v).abs() <= 1e-9 * scale);
        prop_assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn cross_view_is_se3_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (src, dst) = random_pair(&mut r, 0.1);
        let g = random_rigid(&mut r);
        let (u, v) = random_pixel(&mut r, &src);
        let a = project_cross_view(&src, &dst, u, v, &ANCHORS).unwrap();
        let b = project_cross_view(&apply_global_rigid(&src, &g), &apply_global_rigid(&dst, &g), u, v, &ANCHORS).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.valid, y.valid);
            // Near the dst principal plane pixel coordinates are amplified
            // by 1/w_tilde; the absolute bound holds away from it.
            if x.w_tilde.abs() >= 1e-2 {
                prop_assert!((x.u - y.u).abs() < 1e-7 && (x.v - y.v).abs() < 1e-7, "{x:?} {y:?}");
            } else if x.valid {
                let tol = 1e-12 * (x.u.abs() + x.v.abs() + 1.0) / x.w_tilde.abs();
                prop_assert!((x.u - y.u).abs() < tol && (x.v - y.v).abs() < tol, "{x:?} {y:?}");
            }
        }
    }

    #[test]
    fn fx_scaling_scales_horizontal_offset(seed in any::<u64>(), s in 0.2f64..5.0) {
        let mut r = rng(seed);
        let (src, dst) = random_pair(&mut r, 0.1);
        let (u, v) = random_pixel(&mut r, &src);
        // Zero-skew dst so that fx only enters u.
        let dst = Camera::from_params(dst.fx(), dst.fy(), dst.cx(), dst.cy(), 0.0, *dst.rotation(), *dst.translation(), dst.image_size()).unwrap();
        let a = project_cross_view(&src, &dst, u, v, &ANCHORS).unwrap();
        let b = project_cross_view(&src, &dst.with_scaled_fx(s).unwrap(), u, v, &ANCHORS).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let expect = s * (x.u - dst.cx());
            let got = y.u - dst.cx();
            prop_assert!((got - expect).abs() <= 1e-9 * expect.abs().max(1.0), "{got} vs {expect}");
            prop_assert!((x.v - y.v).abs() <= 1e-9 * x.v.abs().max(1.0));
        }
    }
}

#[test]
fn rays_point_forward_inside_image() {
    let mut r = rng(5);
    for _ in 0..200 {
        let cam = random_camera(&mut r);
        let (u, v) = random_pixel(&mut r, &cam);
        let ray = pixel_ray(&cam, u, v);
        assert!((cam.rotation() * ray.direction).z > 0.0);
        // unnormalized: camera-frame z of the direction is exactly 1
        assert!(((cam.rotation() * ray.direction).z - 1.0).abs() < 1e-12);
    }
}

#[test]
fn depth_anchor_is_camera_z() {
    let mut r = rng(9);
    for _ in 0..100 {
        let cam = random_camera(&mut r);
        let (u, v) = random_pixel(&mut r, &cam);
        let pts = lift_along_ray(&pixel_ray(&cam, u, v), &ANCHORS).unwrap();
        for (p, d) in pts.iter().zip(ANCHORS) {
            assert!((cam.to_camera_frame(p).z - d).abs() < 1e-9);
        }
    }
}

#[test]
fn center_agrees_with_generic_inverse() {
    let mut r = rng(1);
    for _ in 0..100 {
        let cam = random_camera(&mut r);
        let oracle = -(cam.rotation().try_inverse().unwrap() * cam.translation());
        assert!((cam.center() - oracle).amax() < 1e-12);
    }
}
