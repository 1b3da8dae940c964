//! Property tests for the invariants of every module.

use affine_pyramid::cost_volume::{build_constrained, build_with_budget, window_radius, CostVolume};
use affine_pyramid::eval::{endpoint_accuracy_sweep, mask_iou, pck, sweep_thresholds};
use affine_pyramid::features::{concat_levels, extract_handcrafted, l2_normalize, DescriptorMap, LevelSpec};
use affine_pyramid::geometry::{
    compose, compose_fields, flow_from_field, warp_image, Affine2D, AffineField, FlowField, GridAffineField,
};
use affine_pyramid::image::Image;
use affine_pyramid::io::{decode_feature_map, decode_param_blocks, encode_feature_map, encode_param_blocks, ParamBlock};
use affine_pyramid::net::NetParams;
use affine_pyramid::pipeline::{run_inference, PyramidConfig, PyramidParams};
use affine_pyramid::supervision::{generate_samples, msac_pairs, MsacConfig, ObjectMask};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed seed so every run explores the same cases.
fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, rng_seed: RngSeed::Fixed(0x5eed), failure_persistence: None, ..ProptestConfig::default() }
}

fn affine() -> impl Strategy<Value = Affine2D> {
    (prop::array::uniform4(-2.0..2.0f64), prop::array::uniform2(-50.0..50.0f64))
        .prop_map(|(l, t)| Affine2D::new(l[0], l[1], t[0], l[2], l[3], t[1]))
}

fn rel_close(a: &Affine2D, b: &Affine2D, tol: f64) -> bool {
    a.params().iter().zip(b.params()).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, |_, _| rng.gen())
}

fn random_map(h: usize, w: usize, d: usize, rng: &mut ChaCha8Rng) -> DescriptorMap {
    let data = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    l2_normalize(&DescriptorMap::new(h, w, d, data).unwrap())
}

fn random_flow(h: usize, w: usize, scale: f64, rng: &mut ChaCha8Rng) -> FlowField {
    FlowField::new(h, w, (0..h * w).map(|_| [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)]).collect()).unwrap()
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn compose_is_associative(a in affine(), b in affine(), c in affine()) {
        prop_assert!(rel_close(&compose(&a, &compose(&b, &c)), &compose(&compose(&a, &b), &c), 1e-12));
    }

    #[test]
    fn compose_matches_sequential_application(a in affine(), b in affine(), p in prop::array::uniform2(-100.0..100.0f64)) {
        let lhs = compose(&a, &b).apply(p);
        let rhs = a.apply(b.apply(p));
        prop_assert!((lhs[0] - rhs[0]).abs() < 1e-9 && (lhs[1] - rhs[1]).abs() < 1e-9);
    }

    #[test]
    fn inverse_round_trip(t in affine()) {
        prop_assume!(t.det().abs() > 1e-6);
        let inv = t.invert().unwrap();
        // Conditioning of the linear part bounds the attainable accuracy.
        prop_assume!(inv.params().iter().all(|v| v.abs() < 1e4));
        prop_assert!(compose(&t, &inv).max_abs_diff(&Affine2D::identity()) < 1e-9);
    }

    #[test]
    fn constant_grid_upsamples_to_constant_field(t in affine(), level in 1u32..4, h in 8usize..40, w in 8usize..40) {
        let side = 1usize << (level - 1);
        let g = GridAffineField::new(level, h, w, vec![t; side * side]).unwrap();
        let d = g.to_dense();
        prop_assert!(d.cells.iter().all(|c| *c == t));
    }

    #[test]
    fn grid_interpolation_is_linear_between_centres(a in affine(), b in affine(), s in 0.0..1.0f64) {
        let g = GridAffineField::new(2, 32, 48, vec![a, b, a, b]).unwrap();
        let (c0, c1) = (g.cell_center(0, 0), g.cell_center(0, 1));
        let x = c0[0] + s * (c1[0] - c0[0]);
        let got = g.sample(x, c0[1]).params();
        for k in 0..6 {
            let want = (1.0 - s) * a.params()[k] + s * b.params()[k];
            prop_assert!((got[k] - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn identity_warp_is_bit_identical(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let img = random_image(h, w, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(warp_image(&img, &AffineField::identity(h, w)).unwrap(), img);
    }

    #[test]
    fn warp_is_conservative(seed in any::<u64>(), t in affine()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(12, 15, &mut rng);
        let out = warp_image(&img, &AffineField::constant(12, 15, t)).unwrap();
        prop_assert!(out.max_value() <= img.max_value());
    }

    #[test]
    fn singleton_composition_keeps_flow(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = (0..6 * 7).map(|_| Affine2D::new(rng.gen(), rng.gen(), rng.gen(), rng.gen(), rng.gen(), rng.gen())).collect();
        let f = AffineField::new(6, 7, cells).unwrap();
        prop_assert_eq!(flow_from_field(&compose_fields(&[f.clone()]).unwrap()), flow_from_field(&f));
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn descriptors_are_translation_equivariant(seed in any::<u64>(), dx in 0usize..4, dy in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_image(44, 44, &mut rng);
        let shifted = Image::from_fn(40, 40, |x, y| base.get(x + dx, y + dy, 0));
        let orig = Image::from_fn(40, 40, |x, y| base.get(x, y, 0));
        let spec = LevelSpec::new(1, vec![1, 0], 0.1).unwrap();
        let (a, b) = (extract_handcrafted(&orig, &spec).unwrap(), extract_handcrafted(&shifted, &spec).unwrap());
        // Pooling at sigma 2 truncated at 3 sigma plus the gradient stencil.
        let margin = 8;
        for y in margin..40 - margin - dy {
            for x in margin..40 - margin - dx {
                let (p, q) = (a.pixel(x + dx, y + dy), b.pixel(x, y));
                prop_assert!(p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-5));
            }
        }
    }

    #[test]
    fn concat_flattens_associatively(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (random_map(5, 6, 3, &mut rng), random_map(5, 6, 2, &mut rng), random_map(5, 6, 4, &mut rng));
        let nested = concat_levels(&[a.clone(), concat_levels(&[b.clone(), c.clone()]).unwrap()]).unwrap();
        let flat = concat_levels(&[a, b, c]).unwrap();
        prop_assert_eq!(nested.data, flat.data);
    }

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>()) {
        let m = random_map(7, 5, 6, &mut ChaCha8Rng::seed_from_u64(seed));
        let twice = l2_normalize(&m);
        prop_assert!(m.data.iter().zip(&twice.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn feature_maps_round_trip(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, d in 1usize..9) {
        let m = random_map(h, w, d, &mut ChaCha8Rng::seed_from_u64(seed));
        let back = decode_feature_map(&encode_feature_map(&m).unwrap()).unwrap();
        prop_assert_eq!(back.data, m.data);
    }

    #[test]
    fn cost_volume_bounds_and_symmetry(seed in any::<u64>(), h in 2usize..9, w in 2usize..9, d in 1usize..5, ratio in 0.1..0.6f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, g) = (random_map(h, w, d, &mut rng), random_map(h, w, d, &mut rng));
        let c = build_constrained(&f, &g, ratio).unwrap();
        let t = build_constrained(&g, &f, ratio).unwrap();
        let r = c.radius as isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let s = c.score(x as usize, y as usize, dx, dy);
                        prop_assert!((0.0..=1.0 + 1e-6).contains(&s));
                        let (sx, sy) = (x + dx, y + dy);
                        if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                            prop_assert_eq!(s, 0.0);
                        } else {
                            prop_assert_eq!(s, t.score(sx as usize, sy as usize, -dx, -dy));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn default_schedule_radius_shrinks(h in 16usize..300, w in 16usize..300) {
        let radii: Vec<usize> = PyramidConfig::default().window_ratios.iter().map(|&r| window_radius(r, h, w)).collect();
        prop_assert!(radii.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn budget_is_enforced(h in 4usize..12, w in 4usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, g) = (random_map(h, w, 2, &mut rng), random_map(h, w, 2, &mut rng));
        let r = window_radius(0.5, h, w);
        let need = h * w * (2 * r + 1) * (2 * r + 1) * 8;
        prop_assert!(build_with_budget(&f, &g, 0.5, need).is_ok());
        prop_assert!(build_with_budget(&f, &g, 0.5, need - 1).is_err());
    }

    #[test]
    fn samples_are_consistent_masked_and_deterministic(seed in any::<u64>(), h in 3usize..10, w in 3usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, g) = (random_map(h, w, 4, &mut rng), random_map(h, w, 4, &mut rng));
        let c: CostVolume = build_constrained(&f, &g, 0.3).unwrap();
        let mut bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.6)).collect();
        bits[0] = true;
        let mask = ObjectMask::new(h, w, bits).unwrap();
        let s = generate_samples(&c, Some(&mask), 1, 1).unwrap();
        for smp in &s.samples {
            prop_assert!(mask.get(smp.i[0], smp.i[1]));
            prop_assert_eq!(c.best_backward(smp.f), smp.i);
            prop_assert_eq!(c.best_forward(smp.i), smp.f);
        }
        prop_assert_eq!(generate_samples(&c, Some(&mask), 1, 1).unwrap(), s);
    }

    #[test]
    fn msac_inliers_grow_with_threshold(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Affine2D::new(1.1, 0.1, 3.0, -0.05, 0.9, -2.0);
        let pairs: Vec<([f64; 2], [f64; 2])> = (0..60)
            .map(|k| {
                let p = [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)];
                let q = if k % 4 == 0 {
                    [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)]
                } else {
                    let m = t.apply(p);
                    [m[0] + rng.gen_range(-1.5..1.5), m[1] + rng.gen_range(-1.5..1.5)]
                };
                (p, q)
            })
            .collect();
        let count = |thr: f64| msac_pairs(&pairs, &MsacConfig { iterations: 300, inlier_threshold_px: thr, seed }).unwrap().1.len();
        let counts: Vec<usize> = [0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|&thr| count(thr)).collect();
        prop_assert!(counts.windows(2).all(|p| p[0] <= p[1]), "{counts:?}");
    }

    #[test]
    fn endpoint_accuracy_is_monotone_and_counts(seed in any::<u64>(), h in 4usize..60, w in 4usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (flow, gt) = (random_flow(h, w, 10.0, &mut rng), random_flow(h, w, 10.0, &mut rng));
        let mask = ObjectMask::full(h, w);
        let reps = endpoint_accuracy_sweep(&flow, &gt, &mask, &sweep_thresholds()).unwrap();
        prop_assert!(reps.windows(2).all(|p| p[0].fraction <= p[1].fraction));
    }

    #[test]
    fn pck_is_monotone_and_permutation_invariant(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)]).collect();
        let warped: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + rng.gen_range(-20.0..20.0), p[1] + rng.gen_range(-20.0..20.0)]).collect();
        let bbox = (80.0, 60.0);
        let alphas = [0.01, 0.05, 0.1, 0.15, 0.2, 0.3];
        let vals: Vec<f64> = alphas.iter().map(|&a| pck(&warped, &gt, bbox, a).unwrap()).collect();
        prop_assert!(vals.windows(2).all(|p| p[0] <= p[1]));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(n / 3);
        let (pw, pg): (Vec<_>, Vec<_>) = perm.iter().map(|&k| (warped[k], gt[k])).unzip();
        for &a in &alphas {
            prop_assert_eq!(pck(&pw, &pg, bbox, a).unwrap(), pck(&warped, &gt, bbox, a).unwrap());
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = || {
            let mut bits: Vec<bool> = (0..120).map(|_| rng.gen_bool(0.4)).collect();
            bits[0] = true;
            ObjectMask::new(10, 12, bits).unwrap()
        };
        let (a, b) = (mask(), mask());
        let v = mask_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, mask_iou(&b, &a).unwrap());
        prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn param_blocks_round_trip(seed in any::<u64>(), dims in prop::collection::vec(1usize..5, 1..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let blocks = vec![ParamBlock { name: "w".into(), shape: dims, data: (0..n).map(|_| rng.gen::<f64>() - 0.5).collect() }];
        prop_assert_eq!(decode_param_blocks(&encode_param_blocks(&blocks).unwrap()).unwrap(), blocks);
    }
}

proptest! {
    #![proptest_config(config(4))]

    #[test]
    fn regressor_checkpoints_round_trip(seed in any::<u64>(), level in 1u32..4) {
        let mut p = NetParams::grid(level, 25, seed).unwrap();
        p.randomize_head(seed, 0.1);
        prop_assert_eq!(NetParams::decode(&p.encode().unwrap()).unwrap(), p);
    }

    #[test]
    fn untrained_pyramid_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (src, tgt) = (random_image(64, 64, &mut rng), random_image(64, 64, &mut rng));
        let config = PyramidConfig::default();
        let params = PyramidParams::identity(&config, 64, 64).unwrap();
        let inf = run_inference(&src, &tgt, &config, &params).unwrap();
        prop_assert!(inf.field.is_identity());
        prop_assert_eq!(warp_image(&src, &inf.field).unwrap(), src);
    }
}
