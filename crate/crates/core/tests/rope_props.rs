mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use urope::rope::*;

/// Rotates `x` in the mode with `axes` position axes.
fn rotate(x: &[f64], pos: &[f64], cfg: &RopeConfig) -> Vec<f64> {
    match pos.len() {
        1 => rope_rotate_1d(x, pos[0], &rope_frequencies(cfg, cfg.per_head_dim).unwrap()).unwrap(),
        2 => rope_rotate_2d(x, pos[0], pos[1], cfg).unwrap(),
        3 => rope_rotate_3d(x, [pos[0], pos[1], pos[2]], cfg).unwrap(),
        6 => rope_rotate_6d(x, pos.try_into().unwrap(), cfg).unwrap(),
        n => panic!("no {n}-axis mode"),
    }
}

fn draw(seed: u64, axes: usize) -> (RopeConfig, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let unit = if axes == 1 { 2 } else { 2 * axes };
    let c = unit * r.gen_range(1..5);
    let base = [10.0, 100.0, 10000.0][r.gen_range(0..3)];
    let cfg = RopeConfig::new(c).unwrap().with_base(base).unwrap();
    let q = random_vec(&mut r, c, 1.0);
    let k = random_vec(&mut r, c, 1.0);
    let pq = random_vec(&mut r, axes, 100.0);
    let pk = random_vec(&mut r, axes, 100.0);
    (cfg, q, k, pq, pk)
}

fn axes_strategy() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(2), Just(3), Just(6)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn relative_position_identity(seed in any::<u64>(), axes in axes_strategy()) {
        let (cfg, q, k, pq, pk) = draw(seed, axes);
        let lhs = dot(&rotate(&q, &pq, &cfg), &rotate(&k, &pk, &cfg));
        let diff: Vec<f64> = pk.iter().zip(&pq).map(|(a, b)| a - b).collect();
        let rhs = dot(&q, &rotate(&k, &diff, &cfg));
        prop_assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn rotation_is_isometry(seed in any::<u64>(), axes in axes_strategy()) {
        let (cfg, q, _, pq, _) = draw(seed, axes);
        let (a, b) = (norm(&q), norm(&rotate(&q, &pq, &cfg)));
        prop_assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
    }

    #[test]
    fn rotations_compose_additively(seed in any::<u64>(), axes in axes_strategy()) {
        let (cfg, q, _, p1, p2) = draw(seed, axes);
        let sum: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a + b).collect();
        let two_step = rotate(&rotate(&q, &p1, &cfg), &p2, &cfg);
        let one_step = rotate(&q, &sum, &cfg);
        for (a, b) in two_step.iter().zip(&one_step) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_position_is_identity(seed in any::<u64>(), axes in axes_strategy()) {
        let (cfg, q, _, _, _) = draw(seed, axes);
        prop_assert_eq!(rotate(&q, &vec![0.0; axes], &cfg), q);
    }

    #[test]
    fn inverse_sign_undoes_rotation(seed in any::<u64>(), axes in prop_oneof![Just(2usize), Just(3), Just(6)]) {
        let (cfg, q, _, p, _) = draw(seed, axes);
        let rot = BlockRotator::new(&cfg, axes).unwrap();
        let mut x = q.clone();
        rot.apply(&mut x, &p, 1.0);
        rot.apply(&mut x, &p, -1.0);
        for (a, b) in x.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedules_are_monotone_with_exact_endpoints(
        kind in prop_oneof![Just(SamplingKind::Uniform), Just(SamplingKind::LogUniform), Just(SamplingKind::Lid)],
        d_min in 0.1f64..10.0,
        span in 0.5f64..100.0,
        count in 1usize..16,
    ) {
        let d_max = d_min + span;
        let s = make_anchor_schedule(kind, d_min, d_max, count).unwrap();
        let d = s.depths();
        prop_assert_eq!(d.len(), count);
        prop_assert!(d.windows(2).all(|w| w[1] > w[0]));
        if count == 1 {
            prop_assert_eq!(d[0], (d_min + d_max) / 2.0);
        } else {
            prop_assert_eq!(d[0], d_min);
            prop_assert_eq!(d[count - 1], d_max);
        }
        if kind == SamplingKind::Lid && count >= 3 {
            let gaps: Vec<f64> = d.windows(2).map(|w| w[1] - w[0]).collect();
            prop_assert!(gaps.windows(2).all(|g| g[1] > g[0]), "{gaps:?}");
        }
    }
}

#[test]
fn frequency_ladder_values() {
    let cfg = RopeConfig::new(8).unwrap();
    let f = rope_frequencies(&cfg, 8).unwrap();
    let expect = [1.0, 100f64.powf(-0.25), 100f64.powf(-0.5), 100f64.powf(-0.75)];
    for (a, b) in f.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(rope_frequencies(&cfg, 2).unwrap(), vec![1.0]);
    assert!(rope_frequencies(&cfg, 3).is_err());
}

#[test]
fn mode_dimension_errors() {
    let x = vec![1.0; 8];
    assert!(rope_rotate_3d(&x, [0.0; 3], &RopeConfig::new(8).unwrap()).is_err());
    assert!(rope_rotate_6d(&x, [0.0; 6], &RopeConfig::new(8).unwrap()).is_err());
    assert!(rope_rotate_2d(&x[..6], 0.0, 0.0, &RopeConfig::new(6).unwrap()).is_err());
    assert!(rope_rotate_1d(&x, 1.0, &[1.0]).is_err());
}

#[test]
fn position_scale_multiplies_positions() {
    let cfg = RopeConfig::new(8).unwrap();
    let scaled = cfg.with_position_scale(0.25).unwrap();
    let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    let a = rope_rotate_2d(&x, 12.0, -4.0, &scaled).unwrap();
    let b = rope_rotate_2d(&x, 3.0, -1.0, &cfg).unwrap();
    for (a, b) in a.iter().zip(&b) {
        assert!((a - b).abs() < 1e-12);
    }
}
