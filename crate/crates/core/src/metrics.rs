//! Localization scoring and fold planning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PatchMask, PatchScores};
use crate::scalar::Scalar;

/// Patches whose score is at least this value form the detected region.
pub const DETECTION_THRESHOLD: f64 = 0.5;

/// Default localization threshold T.
pub const DEFAULT_T: f64 = 0.1;

/// Union of positive patches (`z ≥ 0.5`) for one class.
pub fn detect_region<T: Scalar>(z: &PatchScores<T>, class: usize) -> PatchMask {
    let half = T::lit(DETECTION_THRESHOLD);
    let cells = z.class_plane(class).iter().map(|&v| v >= half).collect();
    PatchMask::from_cells(z.side(), cells).expect("plane matches side")
}

/// `(|R∩B| / |R∪B|, |R∩B| / |R|)`; an empty region scores `(0, 0)`.
pub fn iou_ior(region: &PatchMask, bx: &PatchMask) -> Result<(f64, f64)> {
    if bx.is_empty() {
        return Err(Error::Invalid("empty ground-truth box".into()));
    }
    if region.side() != bx.side() {
        return Err(Error::Invalid(format!("region grid {} vs box grid {}", region.side(), bx.side())));
    }
    let inter = region.intersection_count(bx) as f64;
    let union = region.union_count(bx) as f64;
    let r = region.count();
    let ior = if r == 0 { 0.0 } else { inter / r as f64 };
    Ok((inter / union, ior))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    IoU,
    IoR,
}

impl Criterion {
    pub const ALL: [Criterion; 2] = [Criterion::IoU, Criterion::IoR];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::IoU => "IoU",
            Criterion::IoR => "IoR",
        }
    }
}

/// Scores of one annotated (sample, class) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub class: usize,
    pub iou: f64,
    pub ior: f64,
}

/// Accuracy per class and criterion; `None` where the class has no results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub t: f64,
    pub iou: Vec<Option<f64>>,
    pub ior: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl AccuracyTable {
    pub fn get(&self, class: usize, criterion: Criterion) -> Option<f64> {
        match criterion {
            Criterion::IoU => self.iou[class],
            Criterion::IoR => self.ior[class],
        }
    }

    /// Mean over classes that have results.
    pub fn mean(&self, criterion: Criterion) -> Option<f64> {
        let vals: Vec<f64> = (0..self.counts.len()).filter_map(|c| self.get(c, criterion)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Rows `class,criterion,T,accuracy,n`; absent accuracies are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,criterion,T,accuracy,n\n");
        for c in 0..self.counts.len() {
            for crit in Criterion::ALL {
                let acc = self.get(c, crit).map_or_else(|| "NA".to_string(), |a| format!("{a}"));
                out.push_str(&format!("{c},{},{},{acc},{}\n", crit.name(), self.t, self.counts[c]));
            }
        }
        out
    }
}

/// Fraction of results with score ≥ T, per class and criterion.
pub fn localization_accuracy(results: &[LocalizationResult], classes: usize, t: f64) -> Result<AccuracyTable> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Invalid(format!("T must lie in (0, 1], got {t}")));
    }
    let mut n = vec![0usize; classes];
    let mut hit_iou = vec![0usize; classes];
    let mut hit_ior = vec![0usize; classes];
    for r in results {
        if r.class >= classes {
            return Err(Error::Invalid(format!("result class {} out of range", r.class)));
        }
        n[r.class] += 1;
        hit_iou[r.class] += usize::from(r.iou >= t);
        hit_ior[r.class] += usize::from(r.ior >= t);
    }
    let frac = |h: &[usize]| -> Vec<Option<f64>> {
        h.iter()
            .zip(&n)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect()
    };
    Ok(AccuracyTable {
        t,
        iou: frac(&hit_iou),
        ior: frac(&hit_ior),
        counts: n,
    })
}

/// Scores every annotated class of one sample.
pub fn score_sample<T: Scalar>(z: &PatchScores<T>, boxes: &[Option<PatchMask>]) -> Result<Vec<LocalizationResult>> {
    let mut out = Vec::new();
    for (class, b) in boxes.iter().enumerate() {
        if let Some(b) = b {
            let (iou, ior) = iou_ior(&detect_region(z, class), b)?;
            out.push(LocalizationResult { class, iou, ior });
        }
    }
    Ok(out)
}

/// Shuffled partition of ids into k folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Ids of every other fold, in fold order.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }
}

/// Fold sizes differ by at most one.
pub fn make_folds(ids: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Invalid(format!("fold count must be at least 2, got {k}")));
    }
    if ids.is_empty() || k > ids.len() {
        return Err(Error::Invalid(format!("cannot split {} ids into {k} folds", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan { k, seed, folds })
}

/// (mean, sample std, folds contributing) of one class and criterion.
pub type SummaryCell = (Option<f64>, Option<f64>, usize);

/// Per-fold accuracy summarized as mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub t: f64,
    /// `[class][criterion]` → (mean, std, folds contributing).
    pub cells: Vec<[SummaryCell; 2]>,
}

pub fn summarize_folds(tables: &[AccuracyTable], classes: usize, t: f64) -> FoldSummary {
    let mut cells = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut row = [(None, None, 0); 2];
        for (i, crit) in Criterion::ALL.into_iter().enumerate() {
            let v: Vec<f64> = tables.iter().filter_map(|tb| tb.get(c, crit)).collect();
            if v.is_empty() {
                continue;
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = (v.len() > 1)
                .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt());
            row[i] = (Some(mean), std, v.len());
        }
        cells.push(row);
    }
    FoldSummary { t, cells }
}

impl FoldSummary {
    pub fn mean(&self, criterion: Criterion) -> Option<f64> {
        let i = criterion as usize;
        let v: Vec<f64> = self.cells.iter().filter_map(|r| r[i].0).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Classes × {IoU, IoR} with `mean ± std` cells.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut out = format!("{:<12} {:>16} {:>16}\n", format!("T={}", self.t), "IoU", "IoR");
        let fmt = |cell: &(Option<f64>, Option<f64>, usize)| match cell {
            (Some(m), Some(s), _) => format!("{m:.3} ± {s:.3}"),
            (Some(m), None, _) => format!("{m:.3}"),
            _ => "n/a".to_string(),
        };
        for (c, row) in self.cells.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
            out.push_str(&format!("{name:<12} {:>16} {:>16}\n", fmt(&row[0]), fmt(&row[1])));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,criterion,T,mean,std,folds\n");
        for (c, row) in self.cells.iter().enumerate() {
            for (i, crit) in Criterion::ALL.into_iter().enumerate() {
                let (m, s, n) = row[i];
                let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
                out.push_str(&format!("{c},{},{},{},{},{n}\n", crit.name(), self.t, f(m), f(s)));
            }
        }
        out
    }
}

/// Vertical bar chart of per-class accuracy for one criterion.
pub fn accuracy_svg(title: &str, labels: &[String], values: &[Option<f64>]) -> String {
    let (bar_w, gap, h, top, left) = (40.0, 16.0, 200.0, 30.0, 40.0);
    let width = left + labels.len() as f64 * (bar_w + gap) + gap;
    let height = top + h + 40.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!("<text x=\"{left}\" y=\"18\" font-size=\"13\">{}</text>\n", escape(title)));
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{y}\" x2=\"{width}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = top + h
    ));
    for tick in [0.0, 0.5, 1.0] {
        let y = top + h * (1.0 - tick);
        s.push_str(&format!("<text x=\"4\" y=\"{}\">{tick:.1}</text>\n", y + 4.0));
    }
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        if let Some(v) = v {
            let bh = h * v.clamp(0.0, 1.0);
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{}\" width=\"{bar_w}\" height=\"{bh}\" fill=\"#4a78b0\"/>\n",
                top + h - bh
            ));
            s.push_str(&format!("<text x=\"{x}\" y=\"{}\">{v:.2}</text>\n", top + h - bh - 3.0));
        } else {
            s.push_str(&format!("<text x=\"{x}\" y=\"{}\">n/a</text>\n", top + h - 3.0));
        }
        s.push_str(&format!("<text x=\"{x}\" y=\"{}\">{}</text>\n", top + h + 16.0, escape(label)));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
