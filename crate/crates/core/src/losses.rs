//! Localization losses over patch scores.
//!
//! Three families share one per-example combination
//! `Σ_k λ_ann·a^k·L_ann^k + (1 − a^k)·L_un^k`:
//!
//! * `Baseline`: independent-patch likelihoods. `L_ann` is the negative log of
//!   `Π_{j∈b} p_j · Π_{j∉b} (1 − p_j)`; `L_un` is the cross-entropy of
//!   `1 − Π_j (1 − p_j)` ("at least one positive patch").
//! * `Sigmoid`: smooth threshold constraints on patch counts, multiplied.
//! * `Relu`: hinge constraints on patch counts, added and normalized by the
//!   region sizes. Zero exactly when every threshold constraint holds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PatchMask, PatchScores};
use crate::scalar::{relu, sigmoid, Scalar};
use crate::tensor::{Tape, Var};

/// Clamp applied to probabilities inside the baseline's logarithms during training.
pub const BASELINE_LOG_EPS: f64 = 1e-7;

/// Whole-image labels, box flags and patch-space boxes of one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    /// y^k: class present.
    pub labels: Vec<bool>,
    /// a^k: a box is provided for class k.
    pub annotated: Vec<bool>,
    /// b^k for annotated classes (union of all boxes of that class).
    pub boxes: Vec<Option<PatchMask>>,
}

impl Annotation {
    pub fn unannotated(labels: Vec<bool>) -> Self {
        let k = labels.len();
        Self {
            labels,
            annotated: vec![false; k],
            boxes: vec![None; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn is_annotated(&self) -> bool {
        self.annotated.iter().any(|&a| a)
    }

    /// Checks a^k ⇒ y^k, a^k ⇔ box present, boxes nonempty and on the grid.
    pub fn validate(&self, grid: usize) -> std::result::Result<(), String> {
        let k = self.labels.len();
        if self.annotated.len() != k || self.boxes.len() != k {
            return Err(format!(
                "labels/annotated/boxes lengths differ ({}, {}, {})",
                k,
                self.annotated.len(),
                self.boxes.len()
            ));
        }
        for c in 0..k {
            match (&self.boxes[c], self.annotated[c]) {
                (Some(b), true) => {
                    if !self.labels[c] {
                        return Err(format!("class {c} has a box but label 0"));
                    }
                    if b.side() != grid {
                        return Err(format!("class {c} box is on a {0}x{0} grid, expected {grid}", b.side()));
                    }
                    if b.is_empty() {
                        return Err(format!("class {c} box is empty"));
                    }
                }
                (None, false) => {}
                (Some(_), false) => return Err(format!("class {c} has a box but is not flagged annotated")),
                (None, true) => return Err(format!("class {c} is flagged annotated but has no box")),
            }
        }
        Ok(())
    }
}

/// Per-class thresholds: τ, ρ relative to the box and its complement; τ̂, ρ̂ absolute patch counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub tau: Vec<f64>,
    pub rho: Vec<f64>,
    pub tau_hat: Vec<f64>,
    pub rho_hat: Vec<f64>,
}

impl ThresholdSet {
    pub fn uniform(classes: usize, tau: f64, rho: f64, tau_hat: f64, rho_hat: f64) -> Self {
        Self {
            tau: vec![tau; classes],
            rho: vec![rho; classes],
            tau_hat: vec![tau_hat; classes],
            rho_hat: vec![rho_hat; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tau.len()
    }

    pub fn validate(&self, grid: usize) -> Result<()> {
        let k = self.tau.len();
        if self.rho.len() != k || self.tau_hat.len() != k || self.rho_hat.len() != k {
            return Err(Error::Invalid("threshold vectors differ in length".into()));
        }
        let cells = (grid * grid) as f64;
        for c in 0..k {
            let ok = (0.0..=1.0).contains(&self.tau[c])
                && (0.0..=1.0).contains(&self.rho[c])
                && (0.0..=cells).contains(&self.tau_hat[c])
                && (0.0..=cells).contains(&self.rho_hat[c]);
            if !ok {
                return Err(Error::Invalid(format!("class {c} thresholds out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Baseline,
    Sigmoid,
    Relu,
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossFamily::Baseline => "baseline",
            LossFamily::Sigmoid => "sigmoid",
            LossFamily::Relu => "relu",
        })
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(LossFamily::Baseline),
            "sigmoid" => Ok(LossFamily::Sigmoid),
            "relu" => Ok(LossFamily::Relu),
            other => Err(Error::Config(format!("unknown loss family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_ann: f64,
    /// Per-class weight on negative unannotated examples.
    pub gamma: Vec<f64>,
    pub family: LossFamily,
}

impl LossConfig {
    pub fn new(classes: usize, family: LossFamily) -> Self {
        Self {
            lambda_ann: 70.0,
            gamma: vec![1.0; classes],
            family,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ann > 0.0) {
            return Err(Error::Config("loss.lambda_ann must be positive".into()));
        }
        if self.gamma.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config("every gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Positive/negative ratio per class, clamped to `[1e-3, 1]`.
/// `labels` iterates over the label vectors of the (unannotated) training split.
pub fn class_balance<'a>(classes: usize, labels: impl IntoIterator<Item = &'a [bool]>) -> Vec<f64> {
    let mut pos = vec![0usize; classes];
    let mut neg = vec![0usize; classes];
    for y in labels {
        for (c, &v) in y.iter().enumerate().take(classes) {
            if v {
                pos[c] += 1;
            } else {
                neg[c] += 1;
            }
        }
    }
    pos.iter()
        .zip(&neg)
        .map(|(&p, &n)| if n == 0 { 1.0 } else { (p as f64 / n as f64).clamp(1e-3, 1.0) })
        .collect()
}

fn check_box(z_side: usize, bx: &PatchMask) -> Result<(usize, usize)> {
    if bx.side() != z_side {
        return Err(Error::Invalid(format!("box grid {} does not match score grid {}", bx.side(), z_side)));
    }
    let inside = bx.count();
    let outside = z_side * z_side - inside;
    if inside == 0 {
        return Err(Error::Invalid("empty box".into()));
    }
    Ok((inside, outside))
}

/// `−ln(Π_{j∈b} p_j · Π_{j∉b} (1 − p_j))` summed in the log domain.
/// A zero probability inside the box yields `+∞` (reported, not a panic).
pub fn baseline_ann_nll<T: Scalar>(p: &PatchScores<T>, class: usize, bx: &PatchMask) -> Result<T> {
    check_box(p.side(), bx)?;
    let mut s = T::zero();
    for (&v, &inside) in p.class_plane(class).iter().zip(bx.cells()) {
        s += if inside { v.ln() } else { (T::one() - v).ln() };
    }
    Ok(-s)
}

/// The same probability as a raw product, as the naive formulation computes it.
pub fn baseline_ann_raw<T: Scalar>(p: &PatchScores<T>, class: usize, bx: &PatchMask) -> Result<T> {
    check_box(p.side(), bx)?;
    let mut prod = T::one();
    for (&v, &inside) in p.class_plane(class).iter().zip(bx.cells()) {
        prod *= if inside { v } else { T::one() - v };
    }
    Ok(prod)
}

/// Probability that at least one patch carries the class: `1 − Π_j (1 − p_j)`.
pub fn baseline_un_prob<T: Scalar>(p: &PatchScores<T>, class: usize) -> T {
    let prod = p.class_plane(class).iter().fold(T::one(), |acc, &v| acc * (T::one() - v));
    T::one() - prod
}

/// Cross-entropy of [`baseline_un_prob`] against the image label.
pub fn baseline_un_nll<T: Scalar>(p: &PatchScores<T>, class: usize, label: bool) -> T {
    let log_none: T = p.class_plane(class).iter().map(|&v| (T::one() - v).ln()).sum();
    if label {
        -(T::one() - log_none.exp()).ln()
    } else {
        -log_none
    }
}

/// `−σ(Σ_b z − τ|b|) · σ(ρ|b̄| − Σ_b̄ z)`.
pub fn sigmoid_ann_loss<T: Scalar>(z: &PatchScores<T>, class: usize, bx: &PatchMask, tau: T, rho: T) -> Result<T> {
    let (nin, nout) = check_box(z.side(), bx)?;
    let s_in = z.masked_sum(class, bx);
    let s_out = z.class_sum(class) - s_in;
    let nin = T::from_usize(nin).unwrap();
    let nout = T::from_usize(nout).unwrap();
    Ok(-(sigmoid(s_in - tau * nin) * sigmoid(rho * nout - s_out)))
}

/// `−y·σ(Σz − τ̂) − (1 − y)·σ(ρ̂ − Σz)`.
pub fn sigmoid_un_loss<T: Scalar>(z: &PatchScores<T>, class: usize, label: bool, tau_hat: T, rho_hat: T) -> T {
    let s = z.class_sum(class);
    if label {
        -sigmoid(s - tau_hat)
    } else {
        -sigmoid(rho_hat - s)
    }
}

/// Per-class sigmoid losses: the annotated form where a box exists, else the unannotated one.
pub fn sigmoid_losses<T: Scalar>(z: &PatchScores<T>, ann: &Annotation, th: &ThresholdSet) -> Result<Vec<T>> {
    (0..ann.classes())
        .map(|k| match (&ann.boxes[k], ann.annotated[k]) {
            (Some(b), true) => sigmoid_ann_loss(z, k, b, T::lit(th.tau[k]), T::lit(th.rho[k])),
            _ => Ok(sigmoid_un_loss(z, k, ann.labels[k], T::lit(th.tau_hat[k]), T::lit(th.rho_hat[k]))),
        })
        .collect()
}

/// `|b|⁻¹·ReLU(τ|b| − Σ_b z) + |b̄|⁻¹·ReLU(Σ_b̄ z − ρ|b̄|)`.
///
/// The box must be a nonempty proper subset of the grid.
pub fn relu_ann_loss<T: Scalar>(z: &PatchScores<T>, class: usize, bx: &PatchMask, tau: T, rho: T) -> Result<T> {
    let (nin, nout) = check_box(z.side(), bx)?;
    if nout == 0 {
        return Err(Error::Invalid("box covers the whole grid; its complement is empty".into()));
    }
    let s_in = z.masked_sum(class, bx);
    let s_out = z.masked_sum(class, &bx.complement());
    let nin = T::from_usize(nin).unwrap();
    let nout = T::from_usize(nout).unwrap();
    Ok(relu(tau * nin - s_in) / nin + relu(s_out - rho * nout) / nout)
}

/// `y·ReLU(τ̂ − Σz) + γ·(1 − y)·ReLU(Σz − ρ̂)`.
pub fn relu_un_loss<T: Scalar>(z: &PatchScores<T>, class: usize, label: bool, tau_hat: T, rho_hat: T, gamma: T) -> T {
    let s = z.class_sum(class);
    if label {
        relu(tau_hat - s)
    } else {
        gamma * relu(s - rho_hat)
    }
}

/// Per-class contributions `λ_ann·a^k·L_ann^k + (1 − a^k)·L_un^k` for the configured family.
pub fn per_class_loss<T: Scalar>(
    z: &PatchScores<T>,
    ann: &Annotation,
    th: &ThresholdSet,
    cfg: &LossConfig,
) -> Result<Vec<T>> {
    let lambda = T::lit(cfg.lambda_ann);
    (0..ann.classes())
        .map(|k| {
            let boxed = match (&ann.boxes[k], ann.annotated[k]) {
                (Some(b), true) => Some(b),
                _ => None,
            };
            Ok(match (cfg.family, boxed) {
                (LossFamily::Relu, Some(b)) => lambda * relu_ann_loss(z, k, b, T::lit(th.tau[k]), T::lit(th.rho[k]))?,
                (LossFamily::Relu, None) => relu_un_loss(
                    z,
                    k,
                    ann.labels[k],
                    T::lit(th.tau_hat[k]),
                    T::lit(th.rho_hat[k]),
                    T::lit(cfg.gamma[k]),
                ),
                (LossFamily::Sigmoid, Some(b)) => {
                    lambda * sigmoid_ann_loss(z, k, b, T::lit(th.tau[k]), T::lit(th.rho[k]))?
                }
                (LossFamily::Sigmoid, None) => {
                    sigmoid_un_loss(z, k, ann.labels[k], T::lit(th.tau_hat[k]), T::lit(th.rho_hat[k]))
                }
                (LossFamily::Baseline, Some(b)) => lambda * baseline_ann_nll(z, k, b)?,
                (LossFamily::Baseline, None) => baseline_un_nll(z, k, ann.labels[k]),
            })
        })
        .collect()
}

/// Per-example ReLU-family loss summed over classes.
pub fn full_loss<T: Scalar>(z: &PatchScores<T>, ann: &Annotation, th: &ThresholdSet, cfg: &LossConfig) -> Result<T> {
    let cfg = LossConfig {
        family: LossFamily::Relu,
        ..cfg.clone()
    };
    Ok(per_class_loss(z, ann, th, &cfg)?.into_iter().sum())
}

/// Loss of a batch recorded on a tape.
pub struct BatchLoss<T> {
    /// Sum of the per-example losses (rank 0).
    pub total: Var,
    /// Per-class sums over the batch.
    pub per_class: Vec<T>,
}

struct Coefs<T> {
    box_mask: Vec<T>,
    comp_mask: Vec<T>,
    ones: Vec<T>,
}

fn batch_masks<T: Scalar>(anns: &[&Annotation], k: usize, plane: usize) -> Coefs<T> {
    let n = anns.len();
    let mut box_mask = vec![T::zero(); n * k * plane];
    let mut comp_mask = vec![T::zero(); n * k * plane];
    for (i, ann) in anns.iter().enumerate() {
        for c in 0..k {
            if let (Some(b), true) = (&ann.boxes[c], ann.annotated[c]) {
                let off = (i * k + c) * plane;
                for (j, &inside) in b.cells().iter().enumerate() {
                    if inside {
                        box_mask[off + j] = T::one();
                    } else {
                        comp_mask[off + j] = T::one();
                    }
                }
            }
        }
    }
    Coefs {
        box_mask,
        comp_mask,
        ones: vec![T::one(); n * k * plane],
    }
}

/// Weighted sum of `x` (same length as `weights`), also returning per-class sums.
fn weighted_total<T: Scalar>(tape: &mut Tape<T>, x: Var, weights: &[T], k: usize, per_class: &mut [T]) -> Result<Var> {
    let zeros = vec![T::zero(); weights.len()];
    let w = tape.affine_const(x, weights, &zeros)?;
    for (i, &v) in tape.value(w).iter().enumerate() {
        per_class[i % k] += v;
    }
    tape.sum(w)
}

/// Records the batch loss for scores `z` of shape (N, K, P, P).
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    anns: &[&Annotation],
    th: &ThresholdSet,
    cfg: &LossConfig,
) -> Result<BatchLoss<T>> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 4 || shape[0] != anns.len() || shape[2] != shape[3] {
        return Err(Error::ShapeMismatch {
            op: "batch_loss",
            left: shape,
            right: vec![anns.len()],
        });
    }
    let (n, k, side) = (shape[0], shape[1], shape[2]);
    if th.classes() != k || cfg.gamma.len() != k || anns.iter().any(|a| a.classes() != k) {
        return Err(Error::Invalid(format!("loss inputs disagree on the class count {k}")));
    }
    let plane = side * side;
    let m = batch_masks::<T>(anns, k, plane);
    let lambda = T::lit(cfg.lambda_ann);
    let mut per_class = vec![T::zero(); k];
    let nk = n * k;

    // Per (sample, class) coefficient vectors.
    let mut a_in = vec![T::zero(); nk];
    let mut a_out = vec![T::zero(); nk];
    let mut w_in = vec![T::zero(); nk];
    let mut w_out = vec![T::zero(); nk];
    let mut w_ann = vec![T::zero(); nk];
    let mut w_pos = vec![T::zero(); nk];
    let mut w_neg = vec![T::zero(); nk];
    let mut t_hat = vec![T::zero(); nk];
    let mut r_hat = vec![T::zero(); nk];
    for (i, ann) in anns.iter().enumerate() {
        for c in 0..k {
            let idx = i * k + c;
            t_hat[idx] = T::lit(th.tau_hat[c]);
            r_hat[idx] = T::lit(th.rho_hat[c]);
            match (&ann.boxes[c], ann.annotated[c]) {
                (Some(b), true) => {
                    let nin = b.count();
                    let nout = plane - nin;
                    if nin == 0 || (nout == 0 && cfg.family != LossFamily::Baseline) {
                        return Err(Error::Invalid(format!("sample {i} class {c}: box must be a proper nonempty subset")));
                    }
                    a_in[idx] = T::lit(th.tau[c] * nin as f64);
                    a_out[idx] = T::lit(th.rho[c] * nout as f64);
                    if nout > 0 {
                        w_out[idx] = lambda / T::from_usize(nout).unwrap();
                    }
                    w_in[idx] = lambda / T::from_usize(nin).unwrap();
                    w_ann[idx] = lambda;
                }
                _ => {
                    if ann.labels[c] {
                        w_pos[idx] = T::one();
                    } else {
                        w_neg[idx] = T::lit(cfg.gamma[c]);
                    }
                }
            }
        }
    }
    let plus = vec![T::one(); nk];
    let minus = vec![-T::one(); nk];
    let neg = |v: &[T]| v.iter().map(|&x| -x).collect::<Vec<T>>();

    let mut parts = Vec::new();
    match cfg.family {
        LossFamily::Relu => {
            let s_in = tape.masked_sum(z, &m.box_mask)?;
            let s_out = tape.masked_sum(z, &m.comp_mask)?;
            let s_all = tape.masked_sum(z, &m.ones)?;
            let d_in = tape.affine_const(s_in, &minus, &a_in)?;
            let d_in = tape.relu(d_in)?;
            parts.push(weighted_total(tape, d_in, &w_in, k, &mut per_class)?);
            let d_out = tape.affine_const(s_out, &plus, &neg(&a_out))?;
            let d_out = tape.relu(d_out)?;
            parts.push(weighted_total(tape, d_out, &w_out, k, &mut per_class)?);
            let d_pos = tape.affine_const(s_all, &minus, &t_hat)?;
            let d_pos = tape.relu(d_pos)?;
            parts.push(weighted_total(tape, d_pos, &w_pos, k, &mut per_class)?);
            let d_neg = tape.affine_const(s_all, &plus, &neg(&r_hat))?;
            let d_neg = tape.relu(d_neg)?;
            // γ is folded into w_neg for this family.
            parts.push(weighted_total(tape, d_neg, &w_neg, k, &mut per_class)?);
        }
        LossFamily::Sigmoid => {
            let s_in = tape.masked_sum(z, &m.box_mask)?;
            let s_out = tape.masked_sum(z, &m.comp_mask)?;
            let s_all = tape.masked_sum(z, &m.ones)?;
            let g_in = tape.affine_const(s_in, &plus, &neg(&a_in))?;
            let g_in = tape.sigmoid(g_in)?;
            let g_out = tape.affine_const(s_out, &minus, &a_out)?;
            let g_out = tape.sigmoid(g_out)?;
            let both = tape.hadamard(g_in, g_out)?;
            parts.push(weighted_total(tape, both, &neg(&w_ann), k, &mut per_class)?);
            let g_pos = tape.affine_const(s_all, &plus, &neg(&t_hat))?;
            let g_pos = tape.sigmoid(g_pos)?;
            parts.push(weighted_total(tape, g_pos, &neg(&w_pos), k, &mut per_class)?);
            let g_neg = tape.affine_const(s_all, &minus, &r_hat)?;
            let g_neg = tape.sigmoid(g_neg)?;
            let unweighted_neg: Vec<T> = w_neg.iter().map(|&g| if g > T::zero() { -T::one() } else { T::zero() }).collect();
            parts.push(weighted_total(tape, g_neg, &unweighted_neg, k, &mut per_class)?);
        }
        LossFamily::Baseline => {
            let eps = T::lit(BASELINE_LOG_EPS);
            let one_minus = tape.affine_const(z, &vec![-T::one(); nk * plane], &vec![T::one(); nk * plane])?;
            let log_p = tape.log_clamp(z, eps)?;
            let log_q = tape.log_clamp(one_minus, eps)?;
            let ll_in = tape.masked_sum(log_p, &m.box_mask)?;
            let ll_out = tape.masked_sum(log_q, &m.comp_mask)?;
            let ll = tape.add(ll_in, ll_out)?;
            parts.push(weighted_total(tape, ll, &neg(&w_ann), k, &mut per_class)?);
            let log_none = tape.masked_sum(log_q, &m.ones)?;
            let log_any = tape.log1m_exp(log_none, (T::one() - eps).ln())?;
            parts.push(weighted_total(tape, log_any, &neg(&w_pos), k, &mut per_class)?);
            let unweighted_neg: Vec<T> = w_neg.iter().map(|&g| if g > T::zero() { -T::one() } else { T::zero() }).collect();
            parts.push(weighted_total(tape, log_none, &unweighted_neg, k, &mut per_class)?);
        }
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(BatchLoss { total, per_class })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// One configuration of the numerical-stability comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRow {
    pub grid: usize,
    pub p_value: f64,
    pub precision: Precision,
    /// Raw product over a full-grid box, evaluated in `precision`.
    pub eq1_raw: f64,
    /// Natural log of the same product, summed in the log domain.
    pub eq1_logdomain: f64,
    /// Hinge annotated loss on the same grid with the top half as box; absent for P = 1.
    pub eq9_loss: Option<f64>,
    pub underflow: bool,
}

/// Box used for the hinge column: the top ⌈P/2⌉ rows.
fn half_box(grid: usize) -> Option<PatchMask> {
    (grid >= 2).then(|| PatchMask::rect(grid, 0, 0, grid.div_ceil(2), grid).expect("fits"))
}

fn stability_row_in<T: Scalar>(grid: usize, p: f64, precision: Precision) -> StabilityRow {
    let scores = PatchScores::<T>::filled(grid, 1, T::lit(p));
    let full = PatchMask::full(grid);
    let raw = baseline_ann_raw(&scores, 0, &full).expect("nonempty box");
    let logdomain = baseline_ann_nll(&PatchScores::<f64>::filled(grid, 1, p), 0, &full).expect("nonempty box");
    let eq9 = half_box(grid).map(|b| {
        relu_ann_loss(&scores, 0, &b, T::lit(0.5), T::lit(0.1))
            .expect("proper box")
            .as_f64()
    });
    StabilityRow {
        grid,
        p_value: p,
        precision,
        eq1_raw: raw.as_f64(),
        eq1_logdomain: -logdomain,
        eq9_loss: eq9,
        underflow: raw == T::zero(),
    }
}

/// Raw-product vs log-domain vs hinge loss across grids, probabilities and precisions.
pub fn stability_report(grids: &[usize], probs: &[f64], precisions: &[Precision]) -> Vec<StabilityRow> {
    let mut rows = Vec::new();
    for &g in grids {
        for &p in probs {
            for &prec in precisions {
                rows.push(match prec {
                    Precision::F32 => stability_row_in::<f32>(g, p, prec),
                    Precision::F64 => stability_row_in::<f64>(g, p, prec),
                });
            }
        }
    }
    rows
}

pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut out = String::from("P,p_value,precision,eq1_raw,eq1_logdomain,eq9_loss,underflow_flag\n");
    for r in rows {
        let eq9 = r.eq9_loss.map_or_else(|| "NA".to_string(), |v| format!("{v:e}"));
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{},{}\n",
            r.grid, r.p_value, r.precision, r.eq1_raw, r.eq1_logdomain, eq9, r.underflow
        ));
    }
    out
}
