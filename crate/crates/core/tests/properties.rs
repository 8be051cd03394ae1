//! Property-based invariants of the geometry, metrics, constraints, warping and formats.

use nalgebra::Matrix3;
use proptest::prelude::*;

use sfm_core::geometry::{backproject_point, compute_flow, pixel_to_normalized, project_point, rotation_from_sines};
use sfm_core::io;
use sfm_core::metrics::{endpoint_error, mask_iou, scale_invariant_log_rmse};
use sfm_core::solver::{constrain_depth_value, constrain_sin, unconstrain_depth_value, MaskSchedule};
use sfm_core::synth::{generate_scene, suite_scene};
use sfm_core::types::{CameraIntrinsics, DepthMap, FlowField, Image, MotionMaskStack, RigidMotion};
use sfm_core::warping::inverse_warp;

fn intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
    (0.2..5.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(f, cx, cy)| CameraIntrinsics::new(f, cx, cy))
}

fn depth_map(w: usize, h: usize) -> impl Strategy<Value = DepthMap> {
    prop::collection::vec(0.05..50.0f64, w * h).prop_map(move |d| DepthMap::new(w, h, d))
}

fn flow_field(w: usize, h: usize) -> impl Strategy<Value = FlowField> {
    (prop::collection::vec(-5.0..5.0f64, w * h), prop::collection::vec(-5.0..5.0f64, w * h))
        .prop_map(move |(u, v)| FlowField { width: w, height: h, u, v, w: vec![0.0; w * h] })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_inverts_backprojection(
        k in intrinsics(),
        (w, px) in (1usize..4000).prop_flat_map(|w| (Just(w), 0..w)),
        (h, py) in (1usize..4000).prop_flat_map(|h| (Just(h), 0..h)),
        depth in 1e-2..1e3f64,
    ) {
        let p = backproject_point(pixel_to_normalized(px, w), pixel_to_normalized(py, h), depth, &k);
        prop_assert!((p.z - depth).abs() <= 1e-15 * depth);
        let (xn, yn) = project_point(&p, &k);
        prop_assert!((xn * w as f64 - 0.5 - px as f64).abs() <= 1e-12);
        prop_assert!((yn * h as f64 - 0.5 - py as f64).abs() <= 1e-12);
    }

    #[test]
    fn rotations_are_proper_and_orthonormal(s in prop::array::uniform3(-0.999..0.999f64)) {
        let r = rotation_from_sines(s[0], s[1], s[2]).unwrap();
        prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_sines_are_rejected(s in 1.0001..10.0f64, axis in 0usize..3) {
        let mut sines = [0.0; 3];
        sines[axis] = s;
        prop_assert!(rotation_from_sines(sines[0], sines[1], sines[2]).is_err());
    }

    #[test]
    fn log_rmse_ignores_global_scale(
        (d, g) in (depth_map(6, 5), depth_map(6, 5)),
        c in 1e-3..1e3f64,
    ) {
        let all = vec![true; 30];
        let base = scale_invariant_log_rmse(&d, &g, &all).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((scale_invariant_log_rmse(&d.scaled(c), &g, &all).unwrap() - base).abs() < 1e-10);
        prop_assert!((scale_invariant_log_rmse(&d, &g.scaled(c), &all).unwrap() - base).abs() < 1e-10);
        prop_assert!((scale_invariant_log_rmse(&g, &d, &all).unwrap() - base).abs() < 1e-12);
        prop_assert!(scale_invariant_log_rmse(&d.scaled(c), &d, &all).unwrap() < 1e-12);
    }

    #[test]
    fn mask_iou_is_blind_to_complements(
        values in prop::collection::vec(prop_oneof![0.0..0.49f64, 0.51..1.0f64], 48),
        gt in prop::collection::vec(any::<bool>(), 48),
    ) {
        let pred = MotionMaskStack::from_layers(8, 6, std::slice::from_ref(&values));
        let flipped = MotionMaskStack::from_layers(8, 6, &[values.iter().map(|v| 1.0 - v).collect()]);
        let a = mask_iou(&pred, std::slice::from_ref(&gt), 0.5).unwrap();
        prop_assert_eq!(a, mask_iou(&flipped, std::slice::from_ref(&gt), 0.5).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        let exact = MotionMaskStack::from_layers(8, 6, &[gt.iter().map(|&b| b as u8 as f64).collect()]);
        prop_assert_eq!(mask_iou(&exact, std::slice::from_ref(&gt), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn endpoint_error_is_a_symmetric_distance((a, b) in (flow_field(5, 4), flow_field(5, 4))) {
        let all = vec![true; 20];
        let ab = endpoint_error(&a, &b, &all).unwrap();
        prop_assert_eq!(ab, endpoint_error(&b, &a, &all).unwrap());
        prop_assert_eq!(endpoint_error(&a, &a, &all).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn constraints_stay_in_range(u in -1e3..1e3f64, step in 0usize..100_000, rate in 1e-5..1e-1f64) {
        let d = constrain_depth_value(u);
        prop_assert!((1.0..=100.0).contains(&d));
        let s = constrain_sin(u);
        prop_assert!((-1.0..=1.0).contains(&s));
        let schedule = MaskSchedule { rate, max: 10.0 };
        let m = schedule.multiplier(step);
        prop_assert!((1.0..=10.0).contains(&m));
        prop_assert!(schedule.multiplier(step + 1) >= m);
    }

    #[test]
    fn depth_constraint_round_trips(d in 1.001..99.9f64) {
        prop_assert!((constrain_depth_value(unconstrain_depth_value(d)) - d).abs() < 1e-9 * d);
    }

    #[test]
    fn integer_shift_warp_is_a_translation(
        pixels in prop::collection::vec(0.0..1.0f64, 9 * 7),
        dx in -3i32..=3,
        dy in -3i32..=3,
    ) {
        let (w, h) = (9usize, 7usize);
        let target = Image::new(w, h, 1, pixels);
        let mut flow = FlowField::zeros(w, h);
        flow.u.fill(dx as f64);
        flow.v.fill(dy as f64);
        let (warped, valid) = inverse_warp(&target, &flow);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as i32 + dx, y as i32 + dy);
                let inside = (0..w as i32).contains(&sx) && (0..h as i32).contains(&sy);
                prop_assert_eq!(valid[y * w + x], inside);
                if inside {
                    prop_assert_eq!(warped.get(x, y, 0), target.get(sx as usize, sy as usize, 0));
                }
            }
        }
    }

    #[test]
    fn pure_lateral_motion_flow_scales_with_inverse_depth(depth in 0.5..20.0f64, tx in -0.2..0.2f64) {
        let k = CameraIntrinsics::default();
        let (w, h) = (8, 6);
        let camera = RigidMotion::translation([tx, 0.0, 0.0]);
        let flow = compute_flow(&DepthMap::filled(w, h, depth), &MotionMaskStack::zeros(w, h, 0), &[], &camera, &k).unwrap();
        for (&u, &v) in flow.u.iter().zip(&flow.v) {
            prop_assert!((u - tx / depth * w as f64).abs() < 1e-12);
            prop_assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn pfm_and_flo_round_trip((d, f) in (depth_map(7, 3), flow_field(4, 5))) {
        let d32 = DepthMap::new(d.width, d.height, d.data.iter().map(|&v| v as f32 as f64).collect());
        prop_assert_eq!(io::parse_pfm(&io::encode_pfm(&d32)).unwrap(), d32);
        let back = io::parse_flo(&io::encode_flo(&f)).unwrap();
        for (a, b) in back.u.iter().zip(&f.u).chain(back.v.iter().zip(&f.v)) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn ppm_round_trips_8bit(bytes in prop::collection::vec(any::<u8>(), 4 * 3 * 3)) {
        let img = Image::new(4, 3, 3, bytes.iter().map(|&b| b as f64 / 255.0).collect());
        prop_assert_eq!(io::parse_ppm(&io::encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn flow_colors_ignore_global_scale(f in flow_field(6, 6), c in 0.1..10.0f64) {
        let mut scaled = f.clone();
        scaled.u.iter_mut().chain(scaled.v.iter_mut()).for_each(|x| *x *= c);
        let (a, b) = (io::flow_to_color(&f), io::flow_to_color(&scaled));
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn scenes_are_deterministic(seed in any::<u64>()) {
        let spec = suite_scene("two-objects").unwrap();
        prop_assert_eq!(generate_scene(&spec, seed).unwrap(), generate_scene(&spec, seed).unwrap());
    }
}
