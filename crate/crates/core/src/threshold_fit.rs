//! Threshold fitting against frozen network outputs.
//!
//! Every hinge term is piecewise linear in its threshold, so each 1-D fit is
//! solved exactly by a scan over sorted sample sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ThresholdSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFitConfig {
    /// Lower bound on τ̂ (absolute patches).
    pub tau_min: f64,
    /// Upper bound on ρ̂ as a fraction of P².
    pub rho_max_frac: f64,
    /// Lower bound on the box-relative τ.
    pub tau_rel_min: f64,
    /// Upper bound on the box-relative ρ.
    pub rho_rel_max: f64,
    /// Slack per sample: ε = eps_frac · (number of samples in the constraint set).
    pub eps_frac: f64,
    pub rounds: usize,
    /// Relative loss improvement counted as stalled.
    pub tolerance: f64,
    /// Consecutive stalled rounds that end the alternation.
    pub patience: usize,
}

impl Default for ThresholdFitConfig {
    fn default() -> Self {
        Self {
            tau_min: 1.0,
            rho_max_frac: 0.25,
            tau_rel_min: 0.1,
            rho_rel_max: 0.25,
            eps_frac: 0.02,
            rounds: 10,
            tolerance: 1e-3,
            patience: 1,
        }
    }
}

impl ThresholdFitConfig {
    pub fn rho_max(&self, grid: usize) -> f64 {
        self.rho_max_frac * (grid * grid) as f64
    }

    pub fn validate(&self, grid: usize) -> Result<()> {
        let cells = (grid * grid) as f64;
        let bad = |m: &str| Err(Error::Config(format!("threshold fit: {m}")));
        if !(self.tau_min > 0.0 && self.tau_min <= cells) {
            return bad("tau_min must lie in (0, P^2]");
        }
        if !(self.rho_max_frac >= 0.0 && self.rho_max_frac < 1.0) {
            return bad("rho_max_frac must lie in [0, 1)");
        }
        if !(self.tau_rel_min > 0.0 && self.tau_rel_min <= 1.0) {
            return bad("tau_rel_min must lie in (0, 1]");
        }
        if !(self.rho_rel_max >= 0.0 && self.rho_rel_max < 1.0) {
            return bad("rho_rel_max must lie in [0, 1)");
        }
        if !(self.eps_frac >= 0.0 && self.eps_frac.is_finite()) {
            return bad("eps_frac must be finite and nonnegative");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be nonnegative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

/// Frozen score sums of one annotated class instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSums {
    pub inside: f64,
    pub inside_count: usize,
    pub outside: f64,
    pub outside_count: usize,
}

/// Frozen score sums of one (sample, class) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassSums {
    /// Σ_j z_j over the whole grid.
    pub total: f64,
    pub label: bool,
    /// Present iff the class carries a box in this sample.
    pub boxed: Option<BoxSums>,
}

/// Which threshold a fit could not update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitFlag {
    NoPositives { class: usize },
    NoNegatives { class: usize },
    NoBoxes { class: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub thresholds: ThresholdSet,
    pub flags: Vec<FitFlag>,
}

/// Largest `t` with `Σ ReLU(t − s_i) ≤ eps`; `None` for an empty list.
pub fn max_feasible_lower(values: &[f64], eps: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let mut prefix = 0.0;
    for m in 1..=s.len() {
        prefix += s[m - 1];
        // On [s_{m-1}, s_m] the loss is m·t − prefix.
        let t = (eps + prefix) / m as f64;
        if m == s.len() || t <= s[m] {
            return Some(t);
        }
    }
    unreachable!()
}

/// Smallest `r` with `Σ ReLU(s_i − r) ≤ eps`; `None` for an empty list.
pub fn min_feasible_upper(values: &[f64], eps: f64) -> Option<f64> {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    max_feasible_lower(&neg, eps).map(|t| -t)
}

/// Total hinge loss `Σ ReLU(t − s_i)`.
pub fn lower_hinge(values: &[f64], t: f64) -> f64 {
    values.iter().map(|&s| (t - s).max(0.0)).sum()
}

/// Total hinge loss `Σ ReLU(s_i − r)`.
pub fn upper_hinge(values: &[f64], r: f64) -> f64 {
    values.iter().map(|&s| (s - r).max(0.0)).sum()
}

/// Per-class constraint sets gathered from frozen sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassLists {
    /// Σz of unannotated positives.
    pub positives: Vec<f64>,
    /// Σz of unannotated negatives.
    pub negatives: Vec<f64>,
    /// Σ_b z / |b| of annotated instances.
    pub inside_frac: Vec<f64>,
    /// Σ_b̄ z / |b̄| of annotated instances with a nonempty complement.
    pub outside_frac: Vec<f64>,
}

pub fn collect_lists(samples: &[Vec<ClassSums>], classes: usize) -> Result<Vec<ClassLists>> {
    let mut lists = vec![ClassLists::default(); classes];
    for (i, row) in samples.iter().enumerate() {
        if row.len() != classes {
            return Err(Error::Invalid(format!("sample {i} has {} class sums, expected {classes}", row.len())));
        }
        for (c, s) in row.iter().enumerate() {
            match s.boxed {
                Some(b) => {
                    if b.inside_count > 0 {
                        lists[c].inside_frac.push(b.inside / b.inside_count as f64);
                    }
                    if b.outside_count > 0 {
                        lists[c].outside_frac.push(b.outside / b.outside_count as f64);
                    }
                }
                None if s.label => lists[c].positives.push(s.total),
                None => lists[c].negatives.push(s.total),
            }
        }
    }
    Ok(lists)
}

/// Fits every threshold of every class; thresholds without data keep their previous value.
pub fn fit_thresholds(
    samples: &[Vec<ClassSums>],
    previous: &ThresholdSet,
    grid: usize,
    cfg: &ThresholdFitConfig,
) -> Result<FitOutcome> {
    let k = previous.classes();
    let lists = collect_lists(samples, k)?;
    let cells = (grid * grid) as f64;
    let rho_max = cfg.rho_max(grid);
    let mut th = previous.clone();
    let mut flags = Vec::new();
    let eps = |n: usize| cfg.eps_frac * n as f64;
    for (c, l) in lists.iter().enumerate() {
        match max_feasible_lower(&l.positives, eps(l.positives.len())) {
            Some(t) => th.tau_hat[c] = t.clamp(cfg.tau_min, cells),
            None => flags.push(FitFlag::NoPositives { class: c }),
        }
        match min_feasible_upper(&l.negatives, eps(l.negatives.len())) {
            Some(r) => th.rho_hat[c] = r.clamp(0.0, rho_max),
            None => flags.push(FitFlag::NoNegatives { class: c }),
        }
        let tau = max_feasible_lower(&l.inside_frac, eps(l.inside_frac.len()));
        let rho = min_feasible_upper(&l.outside_frac, eps(l.outside_frac.len()));
        if let Some(t) = tau {
            th.tau[c] = t.clamp(cfg.tau_rel_min, 1.0);
        }
        if let Some(r) = rho {
            th.rho[c] = r.clamp(0.0, cfg.rho_rel_max);
        }
        if tau.is_none() {
            flags.push(FitFlag::NoBoxes { class: c });
        }
    }
    Ok(FitOutcome { thresholds: th, flags })
}

/// Unbounded subgradient descent on the thresholds themselves, holding the sums fixed.
///
/// Diagnostic only: minimizing the hinge losses over free thresholds has the
/// trivial solution that empties every constraint.
pub fn fit_unbounded(
    samples: &[Vec<ClassSums>],
    initial: &ThresholdSet,
    grid: usize,
    steps: usize,
    lr: f64,
) -> Result<ThresholdSet> {
    let k = initial.classes();
    let lists = collect_lists(samples, k)?;
    let cells = (grid * grid) as f64;
    let mut th = initial.clone();
    for _ in 0..steps {
        for (c, l) in lists.iter().enumerate() {
            // d/dt Σ ReLU(t − s) counts the active terms.
            let active_lo = |v: &[f64], t: f64| v.iter().filter(|&&s| t > s).count() as f64 / v.len().max(1) as f64;
            let active_hi = |v: &[f64], r: f64| v.iter().filter(|&&s| s > r).count() as f64 / v.len().max(1) as f64;
            th.tau_hat[c] = (th.tau_hat[c] - lr * active_lo(&l.positives, th.tau_hat[c])).clamp(0.0, cells);
            th.rho_hat[c] = (th.rho_hat[c] + lr * active_hi(&l.negatives, th.rho_hat[c])).clamp(0.0, cells);
            th.tau[c] = (th.tau[c] - lr / cells * active_lo(&l.inside_frac, th.tau[c])).clamp(0.0, 1.0);
            th.rho[c] = (th.rho[c] + lr / cells * active_hi(&l.outside_frac, th.rho[c])).clamp(0.0, 1.0);
        }
    }
    Ok(th)
}

/// Weight training and frozen evaluation as seen by the alternation loop.
pub trait Alternating {
    /// Trains the weights with the thresholds frozen; returns the resulting loss.
    fn train_weights(&mut self, thresholds: &ThresholdSet) -> Result<f64>;
    /// Score sums of the fit set under the current (frozen) weights.
    fn frozen_sums(&mut self) -> Result<Vec<Vec<ClassSums>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlternationOutcome {
    pub thresholds: ThresholdSet,
    /// Loss reported after each weight phase.
    pub losses: Vec<f64>,
    pub flags: Vec<FitFlag>,
    pub converged: bool,
}

/// Runs weights → thresholds rounds until the relative loss improvement
/// `(prev − loss) / |prev|` stays below the tolerance for `patience`
/// consecutive rounds, or the round budget runs out.
pub fn alternate<M: Alternating>(
    model: &mut M,
    initial: ThresholdSet,
    grid: usize,
    cfg: &ThresholdFitConfig,
) -> Result<AlternationOutcome> {
    let mut th = initial;
    let mut losses: Vec<f64> = Vec::new();
    let mut flags = Vec::new();
    let mut converged = false;
    let mut stalled = 0;
    for round in 0..cfg.rounds {
        let loss = model.train_weights(&th).map_err(|e| match e {
            Error::NonFinite { .. } | Error::NonFiniteIteration { .. } => Error::AlternationDiverged { round },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::AlternationDiverged { round });
        }
        let sums = model.frozen_sums()?;
        let fit = fit_thresholds(&sums, &th, grid, cfg)?;
        th = fit.thresholds;
        flags = fit.flags;
        if let Some(&prev) = losses.last() {
            let improvement = (prev - loss) / prev.abs().max(f64::MIN_POSITIVE);
            stalled = if improvement < cfg.tolerance { stalled + 1 } else { 0 };
        }
        losses.push(loss);
        if stalled >= cfg.patience.max(1) {
            converged = true;
            break;
        }
    }
    Ok(AlternationOutcome {
        thresholds: th,
        losses,
        flags,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unboxed(total: f64, label: bool) -> Vec<ClassSums> {
        vec![ClassSums {
            total,
            label,
            boxed: None,
        }]
    }

    #[test]
    fn scan_examples() {
        assert_eq!(max_feasible_lower(&[3.0, 2.5], 0.0), Some(2.5));
        assert_eq!(min_feasible_upper(&[0.2, 0.4], 0.0), Some(0.4));
        assert_eq!(max_feasible_lower(&[], 0.0), None);
        // 2·t − 3 = 1 on [1, 2] → t = 2, at the next breakpoint.
        assert_eq!(max_feasible_lower(&[1.0, 2.0, 5.0], 1.0), Some(2.0));
        assert_eq!(max_feasible_lower(&[1.0, 2.0, 5.0], 1.5), Some(2.25));
    }

    #[test]
    fn tau_hat_clamps_to_lower_bound() {
        let samples = vec![unboxed(0.0, true), unboxed(0.25, true)];
        let cfg = ThresholdFitConfig {
            eps_frac: 0.0,
            ..Default::default()
        };
        let prev = ThresholdSet::uniform(1, 0.5, 0.1, 3.0, 1.0);
        let out = fit_thresholds(&samples, &prev, 8, &cfg).unwrap();
        assert_eq!(out.thresholds.tau_hat[0], 1.0);
        assert_eq!(out.flags, vec![FitFlag::NoNegatives { class: 0 }, FitFlag::NoBoxes { class: 0 }]);
        assert_eq!(out.thresholds.rho_hat[0], 1.0);
    }

    #[test]
    fn empty_positives_keep_previous() {
        let samples = vec![unboxed(5.0, false)];
        let prev = ThresholdSet::uniform(1, 0.5, 0.1, 3.0, 1.0);
        let cfg = ThresholdFitConfig {
            eps_frac: 0.0,
            ..Default::default()
        };
        let out = fit_thresholds(&samples, &prev, 8, &cfg).unwrap();
        assert_eq!(out.thresholds.tau_hat[0], 3.0);
        assert_eq!(out.thresholds.rho_hat[0], 5.0);
        assert!(out.flags.contains(&FitFlag::NoPositives { class: 0 }));
    }

    #[test]
    fn box_relative_fit() {
        let b = |inside: f64, outside: f64| {
            vec![ClassSums {
                total: inside + outside,
                label: true,
                boxed: Some(BoxSums {
                    inside,
                    inside_count: 4,
                    outside,
                    outside_count: 60,
                }),
            }]
        };
        let samples = vec![b(3.0, 6.0), b(2.0, 3.0)];
        let cfg = ThresholdFitConfig {
            eps_frac: 0.0,
            ..Default::default()
        };
        let out = fit_thresholds(&samples, &ThresholdSet::uniform(1, 0.9, 0.0, 1.0, 1.0), 8, &cfg).unwrap();
        assert_eq!(out.thresholds.tau[0], 0.5);
        assert_eq!(out.thresholds.rho[0], 0.1);
    }

    struct Fixed(Vec<f64>, usize);

    impl Alternating for Fixed {
        fn train_weights(&mut self, _: &ThresholdSet) -> Result<f64> {
            self.1 += 1;
            Ok(self.0[(self.1 - 1).min(self.0.len() - 1)])
        }
        fn frozen_sums(&mut self) -> Result<Vec<Vec<ClassSums>>> {
            Ok(vec![unboxed(4.0, true)])
        }
    }

    #[test]
    fn alternation_rounds_and_stop() {
        let init = ThresholdSet::uniform(1, 0.5, 0.1, 2.0, 1.0);
        let zero = ThresholdFitConfig {
            rounds: 0,
            ..Default::default()
        };
        let out = alternate(&mut Fixed(vec![1.0], 0), init.clone(), 8, &zero).unwrap();
        assert_eq!(out.thresholds, init);
        assert!(out.losses.is_empty());

        let cfg = ThresholdFitConfig::default();
        let mut m = Fixed(vec![4.0, 2.0, 1.0, 1.0, 1.0], 0);
        let out = alternate(&mut m, init.clone(), 8, &cfg).unwrap();
        assert_eq!(out.losses, vec![4.0, 2.0, 1.0, 1.0]);
        assert!(out.converged);

        let patient = ThresholdFitConfig {
            patience: 3,
            ..Default::default()
        };
        let mut m = Fixed(vec![4.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0], 0);
        let out = alternate(&mut m, init.clone(), 8, &patient).unwrap();
        assert_eq!(out.losses.len(), 6);

        let mut bad = Fixed(vec![1.0, f64::NAN], 0);
        assert!(matches!(
            alternate(&mut bad, init, 8, &cfg),
            Err(Error::AlternationDiverged { round: 1 })
        ));
    }
}
