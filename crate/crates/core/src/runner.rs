//! Command implementations behind the CLI. Each writes its artifacts into an
//! output directory and returns the in-memory results.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{parse_arm, RunConfig};
use crate::error::{Error, Result};
use crate::losses::{stability_csv, stability_report, LossFamily, Precision};
use crate::metrics::{accuracy_svg, make_folds, summarize_folds, AccuracyTable, Criterion, FoldPlan, FoldSummary};
use crate::synth::{self, Sample};
use crate::tensor::Checkpoint;
use crate::train::{annotated_ids, evaluate, train_model, unannotated_pool, write_atomic, Model, RunFiles, TrainReport};

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the resolved configuration next to a run's outputs.
pub fn export_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    write_atomic(&dir.join("config.json"), cfg.to_json()?.as_bytes())?;
    write_atomic(&dir.join("config.txt"), cfg.to_text()?.as_bytes())
}

/// Loads the configured dataset and checks it against the backbone.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<Sample>> {
    if !cfg.dataset.join(synth::MANIFEST).is_file() {
        return Err(Error::Config(format!("dataset `{}` has no {}", cfg.dataset.display(), synth::MANIFEST)));
    }
    let samples = synth::load(&cfg.dataset, cfg.backbone.input_side, cfg.backbone.grid)?;
    if let Some(s) = samples.first() {
        if s.annotation.classes() != cfg.backbone.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, backbone.classes is {}",
                s.annotation.classes(),
                cfg.backbone.classes
            )));
        }
    }
    Ok(samples)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<Sample>> {
    cfg.synth.validate()?;
    let samples = synth::generate(&cfg.synth, out)?;
    Ok(samples)
}

/// Trains one model on every annotated sample plus the unannotated pool.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let samples = load_dataset(cfg)?;
    export_config(cfg, out)?;
    let ids = training_ids(cfg, &samples, &annotated_ids(&samples));
    train_model(cfg, &samples, &ids, cfg.seed, Some(&RunFiles { dir: out.to_path_buf() }))
}

/// Annotated training ids merged with the unannotated pool, sorted.
pub fn training_ids(cfg: &RunConfig, samples: &[Sample], annotated: &[usize]) -> Vec<usize> {
    let mut ids = annotated.to_vec();
    ids.extend(unannotated_pool(samples, cfg.train.unannotated_fraction, cfg.seed));
    ids.sort_unstable();
    ids
}

pub fn fold_plan(cfg: &RunConfig, samples: &[Sample]) -> Result<FoldPlan> {
    make_folds(&annotated_ids(samples), cfg.eval.folds, cfg.seed)
}

/// Cross-validated results of one configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvOutcome {
    pub plan: FoldPlan,
    pub tables: Vec<AccuracyTable>,
    pub summary: FoldSummary,
    /// Final mean epoch loss per fold and phase (`[phase1, phase2]`).
    pub final_losses: Vec<[Option<f64>; 2]>,
    pub first_losses: Vec<Option<f64>>,
}

impl CvOutcome {
    pub fn mean(&self, c: Criterion) -> Option<f64> {
        self.summary.mean(c)
    }
}

fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}"))
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c}")).collect()
}

/// Writes per-fold metrics, the fold summary, a text table and one SVG per criterion.
pub fn write_metrics(out: &Path, cv: &CvOutcome, classes: usize) -> Result<()> {
    mkdir(out)?;
    let mut per_fold = String::from("fold,class,criterion,T,accuracy,n\n");
    for (f, t) in cv.tables.iter().enumerate() {
        for line in t.to_csv().lines().skip(1) {
            per_fold.push_str(&format!("{f},{line}\n"));
        }
    }
    write_atomic(&out.join("metrics.csv"), per_fold.as_bytes())?;
    write_atomic(&out.join("summary.csv"), cv.summary.to_csv().as_bytes())?;
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(cv)?.as_bytes())?;
    write_report(out, &cv.summary, classes)
}

fn write_report(out: &Path, summary: &FoldSummary, classes: usize) -> Result<()> {
    let names = class_names(classes);
    write_atomic(&out.join("table.txt"), summary.to_table(&names).as_bytes())?;
    for (i, crit) in Criterion::ALL.into_iter().enumerate() {
        let vals: Vec<Option<f64>> = summary.cells.iter().map(|r| r[i].0).collect();
        let svg = accuracy_svg(&format!("{} accuracy, T={}", crit.name(), summary.t), &names, &vals);
        write_atomic(&out.join(format!("accuracy_{}.svg", crit.name().to_lowercase())), svg.as_bytes())?;
    }
    Ok(())
}

/// Trains one model per fold and scores it on the held-out annotated samples.
pub fn cross_validate(cfg: &RunConfig, samples: &[Sample], out: Option<&Path>) -> Result<CvOutcome> {
    cfg.validate()?;
    let plan = fold_plan(cfg, samples)?;
    let mut tables = Vec::new();
    let mut final_losses = Vec::new();
    let mut first_losses = Vec::new();
    for f in 0..plan.k {
        let ids = training_ids(cfg, samples, &plan.train(f));
        let files = out.map(|o| RunFiles { dir: fold_dir(o, f) });
        let (model, report) = train_model(cfg, samples, &ids, cfg.seed.wrapping_add(f as u64), files.as_ref())?;
        tables.push(evaluate(&model, samples, plan.test(f), cfg.eval.t)?);
        final_losses.push([report.phase1.losses.last().copied(), report.phase2.losses.last().copied()]);
        first_losses.push(report.phase1.losses.first().copied());
    }
    let summary = summarize_folds(&tables, cfg.backbone.classes, cfg.eval.t);
    let cv = CvOutcome {
        plan,
        tables,
        summary,
        final_losses,
        first_losses,
    };
    if let Some(o) = out {
        write_metrics(o, &cv, cfg.backbone.classes)?;
    }
    Ok(cv)
}

/// Scores freshly initialized (untrained) models on the same folds.
pub fn untrained_baseline(cfg: &RunConfig, samples: &[Sample]) -> Result<CvOutcome> {
    let plan = fold_plan(cfg, samples)?;
    let mut tables = Vec::new();
    for f in 0..plan.k {
        let model = Model::new(cfg, cfg.seed.wrapping_add(f as u64))?;
        tables.push(evaluate(&model, samples, plan.test(f), cfg.eval.t)?);
    }
    let summary = summarize_folds(&tables, cfg.backbone.classes, cfg.eval.t);
    Ok(CvOutcome {
        final_losses: vec![[None, None]; plan.k],
        first_losses: vec![None; plan.k],
        plan,
        tables,
        summary,
    })
}

/// Evaluates existing checkpoints on the fold test splits: `checkpoint` for
/// every fold if given, else `out/fold<i>/checkpoint.plck`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<CvOutcome> {
    cfg.validate()?;
    let samples = load_dataset(cfg)?;
    let plan = fold_plan(cfg, &samples)?;
    let mut tables = Vec::new();
    for f in 0..plan.k {
        let path = checkpoint.map_or_else(|| RunFiles { dir: fold_dir(out, f) }.checkpoint(), Path::to_path_buf);
        if !path.is_file() {
            return Err(Error::Config(format!("checkpoint `{}` not found", path.display())));
        }
        let model = Model::from_checkpoint(cfg, &Checkpoint::load(&path)?)?;
        tables.push(evaluate(&model, &samples, plan.test(f), cfg.eval.t)?);
    }
    let summary = summarize_folds(&tables, cfg.backbone.classes, cfg.eval.t);
    let cv = CvOutcome {
        final_losses: vec![[None, None]; plan.k],
        first_losses: vec![None; plan.k],
        plan,
        tables,
        summary,
    };
    write_metrics(out, &cv, cfg.backbone.classes)?;
    Ok(cv)
}

/// Cross-validated training and evaluation in one step.
pub fn cmd_train_folds(cfg: &RunConfig, out: &Path) -> Result<CvOutcome> {
    let samples = load_dataset(cfg)?;
    export_config(cfg, out)?;
    cross_validate(cfg, &samples, Some(out))
}

/// Fails unless `a` and `b` agree on everything except the loss family and
/// the unannotated fraction.
pub fn check_arm_diff(a: &RunConfig, b: &RunConfig) -> Result<()> {
    let strip = |c: &RunConfig| {
        let mut c = c.clone();
        c.loss.family = LossFamily::Relu;
        c.train.unannotated_fraction = 0.0;
        c
    };
    if strip(a) != strip(b) {
        let (ja, jb) = (serde_json::to_value(strip(a))?, serde_json::to_value(strip(b))?);
        let mut diffs = Vec::new();
        diff_paths(&ja, &jb, String::new(), &mut diffs);
        return Err(Error::Config(format!(
            "arms may differ only in loss.family and train.unannotated_fraction; also differ in {}",
            diffs.join(", ")
        )));
    }
    Ok(())
}

fn diff_paths(a: &serde_json::Value, b: &serde_json::Value, prefix: String, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, va) in x {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match y.get(k) {
                    Some(vb) => diff_paths(va, vb, key, out),
                    None => out.push(key),
                }
            }
        }
        _ if a != b => out.push(prefix),
        _ => {}
    }
}

/// Arm configurations derived from `compare.arms`.
pub fn arms_from_config(cfg: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    cfg.compare
        .arms
        .iter()
        .map(|spec| {
            let (family, frac) = parse_arm(spec)?;
            let mut c = cfg.clone();
            c.loss.family = family;
            c.train.unannotated_fraction = frac;
            Ok((spec.clone(), c))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub arms: Vec<String>,
    pub outcomes: Vec<CvOutcome>,
}

impl Comparison {
    /// Side-by-side mean accuracies: one row per class and criterion, one column per arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,criterion");
        for a in &self.arms {
            out.push_str(&format!(",{a}"));
        }
        out.push('\n');
        let classes = self.outcomes.first().map_or(0, |o| o.summary.cells.len());
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        for c in 0..classes {
            for (i, crit) in Criterion::ALL.into_iter().enumerate() {
                out.push_str(&format!("{c},{}", crit.name()));
                for o in &self.outcomes {
                    out.push_str(&format!(",{}", fmt(o.summary.cells[c][i].0)));
                }
                out.push('\n');
            }
        }
        for crit in Criterion::ALL {
            out.push_str(&format!("mean,{}", crit.name()));
            for o in &self.outcomes {
                out.push_str(&format!(",{}", fmt(o.mean(crit))));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every arm on identical folds and seeds.
pub fn compare_arms(arms: &[(String, RunConfig)], samples: &[Sample], out: Option<&Path>) -> Result<Comparison> {
    let first = arms
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one arm".into()))?;
    for (_, c) in &arms[1..] {
        check_arm_diff(&first.1, c)?;
    }
    let mut outcomes = Vec::new();
    for (i, (name, c)) in arms.iter().enumerate() {
        let dir = out.map(|o| o.join(format!("arm{i}")));
        if let Some(d) = &dir {
            export_config(c, d)?;
        }
        outcomes.push(cross_validate(c, samples, dir.as_deref()).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("arm `{name}`: {m}")),
            other => other,
        })?);
    }
    let cmp = Comparison {
        arms: arms.iter().map(|(n, _)| n.clone()).collect(),
        outcomes,
    };
    if let Some(o) = out {
        mkdir(o)?;
        write_atomic(&o.join("compare.csv"), cmp.to_csv().as_bytes())?;
    }
    Ok(cmp)
}

pub fn cmd_compare(arms: &[(String, RunConfig)], out: &Path) -> Result<Comparison> {
    let first = arms
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one arm".into()))?;
    for (_, c) in arms {
        c.validate()?;
    }
    let samples = load_dataset(&first.1)?;
    compare_arms(arms, &samples, Some(out))
}

pub const STABILITY_GRIDS: [usize; 3] = [5, 10, 20];
pub const STABILITY_PROBS: [f64; 3] = [0.1, 0.3, 0.5];

pub fn cmd_stability(out: &Path) -> Result<String> {
    let rows = stability_report(&STABILITY_GRIDS, &STABILITY_PROBS, &[Precision::F32, Precision::F64]);
    let csv = stability_csv(&rows);
    mkdir(out)?;
    write_atomic(&out.join("stability.csv"), csv.as_bytes())?;
    Ok(csv)
}

/// Re-renders the table and charts of a finished evaluation directory.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let path = dir.join("summary.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let cv: CvOutcome = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        what: "summary",
        msg: e.to_string(),
    })?;
    let classes = cv.summary.cells.len();
    write_report(dir, &cv.summary, classes)?;
    Ok(cv.summary.to_table(&class_names(classes)))
}
