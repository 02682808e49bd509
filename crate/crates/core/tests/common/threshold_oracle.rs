//! Independent breakpoint oracle for the threshold fit.
//!
//! The segment holding the optimum is found by evaluating the hinge loss at
//! every breakpoint directly; only the closed-form root on that segment is
//! shared with the implementation, summed in the same ascending order.

use patchloc::losses::ThresholdSet;
use patchloc::threshold_fit::{BoxSums, ClassSums, ThresholdFitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hinge_below(values: &[f64], t: f64) -> f64 {
    values.iter().map(|&s| if t > s { t - s } else { 0.0 }).sum()
}

/// Largest `t` with `Σ max(t − s, 0) ≤ eps`.
pub fn oracle_lower(values: &[f64], eps: f64) -> Option<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let m = (1..=s.len()).rev().find(|&m| hinge_below(&s, s[m - 1]) <= eps)?;
    let prefix: f64 = s[..m].iter().sum();
    Some((eps + prefix) / m as f64)
}

/// Smallest `r` with `Σ max(s − r, 0) ≤ eps`.
pub fn oracle_upper(values: &[f64], eps: f64) -> Option<f64> {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    oracle_lower(&neg, eps).map(|t| -t)
}

pub fn oracle_fit(samples: &[Vec<ClassSums>], previous: &ThresholdSet, grid: usize, cfg: &ThresholdFitConfig) -> ThresholdSet {
    let cells = (grid * grid) as f64;
    let mut th = previous.clone();
    for c in 0..previous.classes() {
        let (mut pos, mut neg, mut fin, mut fout) = (vec![], vec![], vec![], vec![]);
        for row in samples {
            let s = row[c];
            match s.boxed {
                Some(b) => {
                    fin.push(b.inside / b.inside_count as f64);
                    if b.outside_count > 0 {
                        fout.push(b.outside / b.outside_count as f64);
                    }
                }
                None if s.label => pos.push(s.total),
                None => neg.push(s.total),
            }
        }
        let eps = |v: &Vec<f64>| cfg.eps_frac * v.len() as f64;
        if let Some(t) = oracle_lower(&pos, eps(&pos)) {
            th.tau_hat[c] = t.max(cfg.tau_min).min(cells);
        }
        if let Some(r) = oracle_upper(&neg, eps(&neg)) {
            th.rho_hat[c] = r.max(0.0).min(cfg.rho_max(grid));
        }
        if let Some(t) = oracle_lower(&fin, eps(&fin)) {
            th.tau[c] = t.max(cfg.tau_rel_min).min(1.0);
        }
        if let Some(r) = oracle_upper(&fout, eps(&fout)) {
            th.rho[c] = r.max(0.0).min(cfg.rho_rel_max);
        }
    }
    th
}

/// Random frozen sums: `n` samples, `k` classes on a `grid×grid` grid.
pub fn random_instance(seed: u64) -> (Vec<Vec<ClassSums>>, ThresholdSet, usize, ThresholdFitConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = rng.gen_range(2..10);
    let cells = grid * grid;
    let k = rng.gen_range(1..4);
    let n = rng.gen_range(0..40);
    let samples = (0..n)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let boxed = rng.gen_bool(0.3).then(|| {
                        let inside_count = rng.gen_range(1..=cells);
                        let outside_count = cells - inside_count;
                        BoxSums {
                            inside: rng.gen_range(0.0..=inside_count as f64),
                            inside_count,
                            outside: rng.gen_range(0.0..=outside_count as f64),
                            outside_count,
                        }
                    });
                    ClassSums {
                        total: rng.gen_range(0.0..cells as f64),
                        label: boxed.is_some() || rng.gen_bool(0.5),
                        boxed,
                    }
                })
                .collect()
        })
        .collect();
    let cfg = ThresholdFitConfig {
        eps_frac: [0.0, 0.02, 0.1][rng.gen_range(0..3)],
        ..ThresholdFitConfig::default()
    };
    let previous = ThresholdSet::uniform(k, 0.5, 0.1, 2.0, 0.5);
    (samples, previous, grid, cfg)
}
