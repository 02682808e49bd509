//! Set-counting oracle for IoU/IoR over every region mask of a 3×3 grid.

use patchloc::grid::PatchMask;
use patchloc::metrics::iou_ior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn cells(bits: u32) -> BTreeSet<usize> {
    (0..9).filter(|i| bits >> i & 1 == 1).collect()
}

fn mask(bits: u32) -> PatchMask {
    PatchMask::from_cells(3, (0..9).map(|i| bits >> i & 1 == 1).collect()).unwrap()
}

/// Number of (region, box) pairs where `iou_ior` disagrees with set counting.
pub fn brute_force_mismatches(boxes: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut bad = 0;
    for _ in 0..boxes {
        let b = rng.gen_range(1u32..512);
        let bs = cells(b);
        for r in 0u32..512 {
            let rs = cells(r);
            let inter = rs.intersection(&bs).count() as f64;
            let union = rs.union(&bs).count() as f64;
            let expect_ior = if rs.is_empty() { 0.0 } else { inter / rs.len() as f64 };
            let got = iou_ior(&mask(r), &mask(b)).unwrap();
            checked += 1;
            if got != (inter / union, expect_ior) {
                bad += 1;
            }
        }
    }
    (checked, bad)
}
