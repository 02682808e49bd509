use patchloc::backbone::BackboneConfig;
use patchloc::crf::{CrfConfig, CrfLayer, PatchFeatures};
use patchloc::grid::PatchScores;
use patchloc::tensor::ParamSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Layer on a `grid×grid` patch grid with 4-pixel patches.
fn layer(grid: usize, classes: usize, window: usize, iterations: usize, seed: u64) -> (CrfLayer, ParamSet<f64>, BackboneConfig) {
    let bb = BackboneConfig {
        input_side: grid * 4,
        grid,
        classes,
        widths: vec![4, 4],
        blur_taps: 3,
        head_width: 4,
    };
    let cfg = CrfConfig {
        window,
        iterations,
        features: 3,
        ..CrfConfig::default()
    };
    let mut ps = ParamSet::new();
    let l = CrfLayer::new(cfg, &bb, &mut ps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (l, ps, bb)
}

fn zero_features(grid: usize) -> PatchFeatures<f64> {
    PatchFeatures::new(grid, 3, vec![0.0; 3 * grid * grid], 4).unwrap()
}

fn random_scores(rng: &mut ChaCha8Rng, grid: usize, classes: usize) -> PatchScores<f64> {
    PatchScores::new(grid, classes, (0..grid * grid * classes).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
    (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Adjacent (4-neighbour) pairs on opposite sides of 0.5.
fn sign_flips(z: &PatchScores<f64>) -> usize {
    let g = z.side();
    let mut n = 0;
    for r in 0..g {
        for c in 0..g {
            let here = z.get(r, c, 0) >= 0.5;
            if c + 1 < g && here != (z.get(r, c + 1, 0) >= 0.5) {
                n += 1;
            }
            if r + 1 < g && here != (z.get(r + 1, c, 0) >= 0.5) {
                n += 1;
            }
        }
    }
    n
}

fn set_adjacent_compat(ps: &mut ParamSet<f64>, l: &CrfLayer, value: f64) {
    let s = l.config().window;
    let h = s / 2;
    let w = ps.get_mut(l.compat_id()).data_mut();
    w.iter_mut().for_each(|v| *v = 0.0);
    for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
        let a = (h as isize + dr) as usize;
        let b = (h as isize + dc) as usize;
        w[a * s + b] = value;
    }
}

#[test]
fn zero_compatibility_is_the_identity_on_many_grids() {
    let (l, ps, bb) = layer(6, 3, 5, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let p = random_scores(&mut rng, 6, 3);
        let f = l.compute_features(&ps, &random_image(&mut rng, bb.input_side)).unwrap();
        let z = l.crf_refine(&ps, &p, &f).unwrap();
        let err = p.values().iter().zip(z.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-9, "max |z - p| = {err}");
    }
}

#[test]
fn attractive_compatibility_smooths_a_checkerboard() {
    let (l, mut ps, _) = layer(4, 1, 3, 5, 2);
    set_adjacent_compat(&mut ps, &l, -1.5);
    let mut p = PatchScores::filled(4, 1, 0.0);
    for r in 0..4 {
        for c in 0..4 {
            p.set(r, c, 0, if (r + c) % 2 == 0 { 0.35 } else { 0.65 });
        }
    }
    let z = l.crf_refine(&ps, &p, &zero_features(4)).unwrap();
    assert_eq!(sign_flips(&p), 24);
    assert!(sign_flips(&z) < sign_flips(&p), "flips {} -> {}", sign_flips(&p), sign_flips(&z));
    assert!(z.values().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn delta_compatibility_reaches_exactly_one_patch() {
    let (l, mut ps, _) = layer(3, 2, 3, 1, 3);
    let w = 0.7;
    for a in 0..3 {
        for b in 0..3 {
            if a == 1 && b == 1 {
                continue;
            }
            let data = ps.get_mut(l.compat_id()).data_mut();
            data.iter_mut().for_each(|v| *v = 0.0);
            // Class 0 receives from class 0 at offset (a − 1, b − 1).
            data[a * 3 + b] = w;
            let mut z = PatchScores::filled(3, 2, 0.0);
            z.set(1, 1, 0, 1.0);
            let m = l.pairwise_message(&ps, &z, &zero_features(3)).unwrap();
            let (tr, tc) = (1 + a - 1, 1 + b - 1);
            for (i, &v) in m.iter().enumerate() {
                let (k, r, c) = (i / 9, (i % 9) / 3, i % 3);
                let expect = if k == 0 && r == tr && c == tc { w } else { 0.0 };
                assert_eq!(v, expect, "offset ({a},{b}) patch ({k},{r},{c})");
            }
        }
    }
}

#[test]
fn zero_feature_weights_give_zero_features() {
    let (l, mut ps, bb) = layer(5, 2, 3, 2, 4);
    for id in ps.ids_with_prefix("crf.feat").collect::<Vec<_>>() {
        if ps.is_learnable(id) {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let f = l.compute_features(&ps, &random_image(&mut ChaCha8Rng::seed_from_u64(5), bb.input_side)).unwrap();
    assert!(f.values().iter().all(|&v| v == 0.0));
    assert_eq!(f.side(), 5);
}

#[test]
fn features_ignore_pixels_outside_the_receptive_field() {
    let (l, ps, bb) = layer(8, 1, 3, 1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = random_image(&mut rng, bb.input_side);
    let base = l.compute_features(&ps, &img).unwrap();
    // Perturb every pixel in patch columns 5..8; patch (r, 0..=1) sees at most two patches away.
    let mut other = img.clone();
    for r in 0..bb.input_side {
        for c in 20..bb.input_side {
            other[r * bb.input_side + c] += rng.gen_range(-1.0..1.0);
        }
    }
    let moved = l.compute_features(&ps, &other).unwrap();
    for r in 0..8 {
        for c in 0..2 {
            assert_eq!(base.at(r, c), moved.at(r, c), "patch ({r},{c})");
        }
    }
    assert_ne!(base.values(), moved.values(), "the perturbation must reach some feature");
}

#[test]
fn small_compatibility_moves_scores_to_first_order() {
    let (l, mut ps, _) = layer(5, 2, 3, 1, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir: Vec<f64> = (0..ps.get(l.compat_id()).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = PatchScores::new(5, 2, (0..50).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
    let f = zero_features(5);
    let mut dev = |eps: f64| {
        let w = ps.get_mut(l.compat_id()).data_mut();
        for (v, d) in w.iter_mut().zip(&dir) {
            *v = eps * d;
        }
        let z = l.crf_refine(&ps, &p, &f).unwrap();
        z.values().iter().zip(p.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let (d1, d2) = (dev(1e-4), dev(2e-4));
    let norm1: f64 = dir.iter().map(|v| v.abs()).sum();
    // |σ(u − m) − σ(u)| ≤ |m| / 4 and |m| ≤ ‖W‖₁ · max z.
    assert!(d1 <= 1e-4 * norm1 / 4.0 + 1e-12);
    assert!(d1 > 0.0);
    assert!((d2 / d1 - 2.0).abs() < 1e-3, "ratio {}", d2 / d1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn message_is_linear_in_the_scores(seed in 0u64..10_000, scale in 0.1f64..3.0) {
        let (l, mut ps, bb) = layer(5, 2, 5, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in ps.get_mut(l.compat_id()).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let z = random_scores(&mut rng, 5, 2);
        let zs = PatchScores::new(5, 2, z.values().iter().map(|v| v * scale / 3.0).collect()).unwrap();
        let z3 = PatchScores::new(5, 2, z.values().iter().map(|v| v / 3.0).collect()).unwrap();
        let f = l.compute_features(&ps, &random_image(&mut rng, bb.input_side)).unwrap();
        let a = l.pairwise_message(&ps, &zs, &f).unwrap();
        let b = l.pairwise_message(&ps, &z3, &f).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - scale * y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn refinement_is_local(seed in 0u64..10_000, iterations in 1usize..3) {
        let (l, mut ps, bb) = layer(9, 1, 3, iterations, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in ps.get_mut(l.compat_id()).data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let p = random_scores(&mut rng, 9, 1);
        let f = l.compute_features(&ps, &random_image(&mut rng, bb.input_side)).unwrap();
        let z = l.crf_refine(&ps, &p, &f).unwrap();
        // Perturb one patch beyond `iterations` window radii from the centre patch.
        let reach = iterations;
        let (pr, pc) = (4 + reach + 1 + rng.gen_range(0..4 - reach), rng.gen_range(0..9));
        let mut q = p.clone();
        q.set(pr, pc, 0, 1.0 - p.get(pr, pc, 0));
        let zq = l.crf_refine(&ps, &q, &f).unwrap();
        prop_assert_eq!(z.get(4, 4, 0), zq.get(4, 4, 0));
        prop_assert!(z.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
