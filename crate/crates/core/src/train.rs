//! Model assembly, two-phase training and held-out evaluation.
//!
//! Phase 1 trains the backbone on the unaries `p` while thresholds alternate
//! with the weights. The CRF is skipped there: with `W ≡ 0` it is the identity.
//! Phase 2 freezes the backbone, caches `p`, and trains the CRF on refined `z`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::crf::CrfLayer;
use crate::error::{Error, Result};
use crate::grid::PatchScores;
use crate::layers::{apply_stat_updates, Mode};
use crate::losses::{batch_loss, class_balance, Annotation, LossConfig, ThresholdSet};
use crate::metrics::{localization_accuracy, score_sample, AccuracyTable, LocalizationResult};
use crate::synth::Sample;
use crate::tensor::{AdamState, Checkpoint, ParamSet, Tape};
use crate::threshold_fit::{alternate, AlternationOutcome, Alternating, BoxSums, ClassSums, ThresholdFitConfig};

const PREDICT_CHUNK: usize = 64;
const THRESHOLD_NAMES: [&str; 4] = ["tau", "rho", "tau_hat", "rho_hat"];

/// Backbone, CRF and thresholds with their values.
#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub crf: CrfLayer,
    pub params: ParamSet<f64>,
    pub thresholds: ThresholdSet,
}

impl Model {
    /// Fresh model: He-initialized convolutions, `W ≡ 0`, initial thresholds from the config.
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(cfg.backbone.clone(), &mut params, &mut rng)?;
        let crf = CrfLayer::new(cfg.crf.clone(), &cfg.backbone, &mut params, &mut rng)?;
        Ok(Self {
            backbone,
            crf,
            params,
            thresholds: cfg.thresholds.build(cfg.backbone.classes),
        })
    }

    pub fn classes(&self) -> usize {
        self.backbone.config().classes
    }

    pub fn grid(&self) -> usize {
        self.backbone.config().grid
    }

    /// Every parameter plus `thresholds.<class>.<name>` scalars.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        let th = &self.thresholds;
        for k in 0..th.classes() {
            for (name, v) in THRESHOLD_NAMES.iter().zip([th.tau[k], th.rho[k], th.tau_hat[k], th.rho_hat[k]]) {
                ck.push_scalar(format!("thresholds.{k}.{name}"), v);
            }
        }
        ck
    }

    /// Model for `cfg` with values restored from `ck`; shapes must match.
    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        ck.restore_into(&mut m.params)?;
        for k in 0..m.classes() {
            let get = |name: &str| ck.scalar(&format!("thresholds.{k}.{name}"));
            m.thresholds.tau[k] = get("tau")?;
            m.thresholds.rho[k] = get("rho")?;
            m.thresholds.tau_hat[k] = get("tau_hat")?;
            m.thresholds.rho_hat[k] = get("rho_hat")?;
        }
        Ok(m)
    }

    /// Backbone probabilities `p` (inference statistics).
    pub fn unary(&self, images: &[&[f64]]) -> Result<Vec<PatchScores<f64>>> {
        let taps = self.backbone.config().blur_taps;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_CHUNK) {
            out.extend(self.backbone.predict(&self.params, chunk, taps)?);
        }
        Ok(out)
    }

    /// Refined scores `z` for cached unaries.
    pub fn refine(&self, images: &[&[f64]], unaries: &[PatchScores<f64>]) -> Result<Vec<PatchScores<f64>>> {
        let (p, k) = (self.grid(), self.classes());
        let side = self.backbone.config().input_side;
        let mut out = Vec::with_capacity(images.len());
        for (imgs, ps) in images.chunks(PREDICT_CHUNK).zip(unaries.chunks(PREDICT_CHUNK)) {
            let n = imgs.len();
            let mut tape = Tape::new();
            let x = tape.constant(vec![n, 1, side, side], imgs.concat())?;
            let pv = tape.constant(vec![n, k, p, p], ps.iter().flat_map(|s| s.values().iter().copied()).collect())?;
            let f = self.crf.features(&mut tape, &self.params, x, Mode::Eval, &mut Vec::new())?;
            let z = self.crf.refine(&mut tape, &self.params, pv, f)?;
            for c in tape.value(z).chunks(k * p * p) {
                out.push(PatchScores::new(p, k, c.to_vec())?);
            }
        }
        Ok(out)
    }

    /// Full inference: backbone, then CRF refinement.
    pub fn predict(&self, images: &[&[f64]]) -> Result<Vec<PatchScores<f64>>> {
        let p = self.unary(images)?;
        self.refine(images, &p)
    }
}

/// Frozen sums of one scored sample.
pub fn class_sums(z: &PatchScores<f64>, ann: &Annotation) -> Vec<ClassSums> {
    (0..ann.classes())
        .map(|k| {
            let total = z.class_sum(k);
            let boxed = match (&ann.boxes[k], ann.annotated[k]) {
                (Some(b), true) => {
                    let inside = z.masked_sum(k, b);
                    let n_in = b.count();
                    Some(BoxSums {
                        inside,
                        inside_count: n_in,
                        outside: total - inside,
                        outside_count: z.side() * z.side() - n_in,
                    })
                }
                _ => None,
            };
            ClassSums {
                total,
                label: ann.labels[k],
                boxed,
            }
        })
        .collect()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: u8,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    pub per_class: Vec<f64>,
}

pub fn log_csv(rows: &[LogRow], classes: usize) -> String {
    let mut out = String::from("epoch,phase,loss");
    for k in 0..classes {
        out.push_str(&format!(",loss_class{k}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{:e}", r.epoch, r.phase, r.loss));
        for v in &r.per_class {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

pub fn thresholds_csv(th: &ThresholdSet) -> String {
    let mut out = String::from("class,tau,rho,tau_hat,rho_hat\n");
    for k in 0..th.classes() {
        out.push_str(&format!("{k},{},{},{},{}\n", th.tau[k], th.rho[k], th.tau_hat[k], th.rho_hat[k]));
    }
    out
}

/// Writes `bytes` through a temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Files written during training.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.plck")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn thresholds(&self) -> PathBuf {
        self.dir.join("thresholds.csv")
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub phase1: AlternationOutcome,
    pub phase2: AlternationOutcome,
    pub gamma: Vec<f64>,
}

struct Runner<'a> {
    model: &'a mut Model,
    adam: AdamState<f64>,
    samples: &'a [Sample],
    ids: &'a [usize],
    loss: LossConfig,
    batch: usize,
    rng: ChaCha8Rng,
    phase: u8,
    epoch: &'a mut usize,
    log: &'a mut Vec<LogRow>,
    files: Option<&'a RunFiles>,
    /// Phase 2 only: cached unaries, indexed like `ids`.
    unaries: Option<Vec<PatchScores<f64>>>,
}

impl Runner<'_> {
    fn phase_name(&self) -> String {
        if self.phase == 1 { "backbone" } else { "crf" }.to_string()
    }

    fn run_epoch(&mut self) -> Result<(f64, Vec<f64>)> {
        let cfg = self.model.backbone.config().clone();
        let (side, p, k) = (cfg.input_side, cfg.grid, cfg.classes);
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut per_class = vec![0.0; k];
        for batch in order.chunks(self.batch) {
            let n = batch.len();
            let mut tape = Tape::new();
            let pixels: Vec<f64> = batch
                .iter()
                .flat_map(|&i| self.samples[self.ids[i]].image.iter().copied())
                .collect();
            let x = tape.constant(vec![n, 1, side, side], pixels)?;
            let (scores, updates) = match &self.unaries {
                None => {
                    let out = self.model.backbone.forward(&mut tape, &self.model.params, x, Mode::Train)?;
                    (out.probs, out.updates)
                }
                Some(cache) => {
                    let pv = tape.constant(
                        vec![n, k, p, p],
                        batch.iter().flat_map(|&i| cache[i].values().iter().copied()).collect(),
                    )?;
                    let mut updates = Vec::new();
                    let f = self.model.crf.features(&mut tape, &self.model.params, x, Mode::Train, &mut updates)?;
                    (self.model.crf.refine(&mut tape, &self.model.params, pv, f)?, updates)
                }
            };
            let anns: Vec<&Annotation> = batch.iter().map(|&i| &self.samples[self.ids[i]].annotation).collect();
            let bl = batch_loss(&mut tape, scores, &anns, &self.model.thresholds, &self.loss)?;
            let mean = tape.mul(bl.total, 1.0 / n as f64)?;
            total += tape.scalar(bl.total);
            for (a, b) in per_class.iter_mut().zip(&bl.per_class) {
                *a += b;
            }
            self.model.params.zero_grad();
            tape.backward_into(mean, &mut self.model.params)?;
            let ids = self.model.params.trainable_ids();
            self.adam.step(&mut self.model.params, &ids)?;
            apply_stat_updates(&mut self.model.params, &updates);
            if self.model.params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.adam.end_epoch();
        let n = self.ids.len().max(1) as f64;
        Ok((total / n, per_class.into_iter().map(|v| v / n).collect()))
    }

    fn scores(&self) -> Result<Vec<PatchScores<f64>>> {
        let images: Vec<&[f64]> = self.ids.iter().map(|&i| self.samples[i].image.as_slice()).collect();
        match &self.unaries {
            None => self.model.unary(&images),
            Some(cache) => self.model.refine(&images, cache),
        }
    }
}

impl Alternating for Runner<'_> {
    fn train_weights(&mut self, thresholds: &ThresholdSet) -> Result<f64> {
        self.model.thresholds = thresholds.clone();
        *self.epoch += 1;
        let epoch = *self.epoch;
        let phase = self.phase_name();
        let diverged = || Error::Diverged { phase: phase.clone(), epoch };
        let (loss, per_class) = match self.run_epoch() {
            Ok(v) => v,
            Err(e) if e.is_numeric() => return Err(diverged()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged());
        }
        self.log.push(LogRow {
            epoch,
            phase: self.phase,
            loss,
            per_class,
        });
        if let Some(files) = self.files {
            self.model.checkpoint().save(&files.checkpoint())?;
            write_atomic(&files.log(), log_csv(self.log, self.model.classes()).as_bytes())?;
        }
        Ok(loss)
    }

    fn frozen_sums(&mut self) -> Result<Vec<Vec<ClassSums>>> {
        let z = self.scores()?;
        Ok(z.iter()
            .zip(self.ids)
            .map(|(z, &i)| class_sums(z, &self.samples[i].annotation))
            .collect())
    }
}

/// Trains a fresh model on `samples[ids]`. With `files`, a loadable
/// checkpoint and the log are rewritten after every epoch.
pub fn train_model(
    cfg: &RunConfig,
    samples: &[Sample],
    ids: &[usize],
    seed: u64,
    files: Option<&RunFiles>,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let k = cfg.backbone.classes;
    for &i in ids {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("training id {i} out of range")))?;
        if s.annotation.classes() != k || s.side != cfg.backbone.input_side {
            return Err(Error::Config(format!(
                "sample `{}` ({} classes, {} px) does not match the backbone ({k} classes, {} px)",
                s.id,
                s.annotation.classes(),
                s.side,
                cfg.backbone.input_side
            )));
        }
    }
    let mut model = Model::new(cfg, seed)?;
    if let Some(f) = files {
        fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
        model.checkpoint().save(&f.checkpoint())?;
        write_atomic(&f.log(), log_csv(&[], k).as_bytes())?;
    }
    let gamma = if cfg.loss.gamma.is_empty() {
        class_balance(k, ids.iter().map(|&i| samples[i].annotation.labels.as_slice()))
    } else {
        cfg.loss.gamma.clone()
    };
    let loss = LossConfig {
        lambda_ann: cfg.loss.lambda_ann,
        gamma: gamma.clone(),
        family: cfg.loss.family,
    };
    let mut log = Vec::new();
    let mut epoch = 0usize;
    let grid = cfg.backbone.grid;

    // Phase 1: backbone only.
    model.params.set_frozen("crf.", true);
    model.params.set_frozen("backbone.", false);
    let phase1_fit = ThresholdFitConfig {
        rounds: cfg.train.phase1_epochs,
        tolerance: cfg.train.min_improvement,
        patience: cfg.train.patience,
        ..cfg.fit.clone()
    };
    let initial = model.thresholds.clone();
    let phase1 = {
        let mut runner = Runner {
            model: &mut model,
            adam: AdamState::new(cfg.optim.clone()),
            samples,
            ids,
            loss: loss.clone(),
            batch: cfg.train.batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001),
            phase: 1,
            epoch: &mut epoch,
            log: &mut log,
            files,
            unaries: None,
        };
        alternate(&mut runner, initial, grid, &phase1_fit)?
    };
    model.thresholds = phase1.thresholds.clone();

    // Phase 2: CRF only, on cached unaries.
    model.params.set_frozen("backbone.", true);
    model.params.set_frozen("crf.", false);
    let phase2_fit = ThresholdFitConfig {
        rounds: cfg.train.phase2_epochs,
        tolerance: cfg.train.min_improvement,
        patience: cfg.train.patience,
        ..cfg.fit.clone()
    };
    let phase2 = if cfg.train.phase2_epochs > 0 {
        let images: Vec<&[f64]> = ids.iter().map(|&i| samples[i].image.as_slice()).collect();
        let unaries = model.unary(&images)?;
        let th = model.thresholds.clone();
        let mut runner = Runner {
            model: &mut model,
            adam: AdamState::new(cfg.optim.clone()),
            samples,
            ids,
            loss: loss.clone(),
            batch: cfg.train.batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002),
            phase: 2,
            epoch: &mut epoch,
            log: &mut log,
            files,
            unaries: Some(unaries),
        };
        alternate(&mut runner, th, grid, &phase2_fit)?
    } else {
        AlternationOutcome {
            thresholds: model.thresholds.clone(),
            losses: Vec::new(),
            flags: Vec::new(),
            converged: false,
        }
    };
    model.thresholds = phase2.thresholds.clone();
    model.params.set_frozen("backbone.", false);

    if let Some(f) = files {
        model.checkpoint().save(&f.checkpoint())?;
        write_atomic(&f.log(), log_csv(&log, k).as_bytes())?;
        write_atomic(&f.thresholds(), thresholds_csv(&model.thresholds).as_bytes())?;
    }
    Ok((
        model,
        TrainReport {
            log,
            phase1,
            phase2,
            gamma,
        },
    ))
}

/// Deterministic subset of the unannotated samples of size `round(fraction · count)`.
pub fn unannotated_pool(samples: &[Sample], fraction: f64, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..samples.len())
        .filter(|&i| !samples[i].annotation.is_annotated())
        .collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0900_u64));
    let n = (fraction * ids.len() as f64).round() as usize;
    ids.truncate(n);
    ids.sort_unstable();
    ids
}

pub fn annotated_ids(samples: &[Sample]) -> Vec<usize> {
    (0..samples.len()).filter(|&i| samples[i].annotation.is_annotated()).collect()
}

/// Localization results of `samples[ids]` under `model`.
pub fn localize(model: &Model, samples: &[Sample], ids: &[usize]) -> Result<Vec<LocalizationResult>> {
    let images: Vec<&[f64]> = ids.iter().map(|&i| samples[i].image.as_slice()).collect();
    let z = model.predict(&images)?;
    let mut out = Vec::new();
    for (z, &i) in z.iter().zip(ids) {
        out.extend(score_sample(z, &samples[i].annotation.boxes)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[Sample], ids: &[usize], t: f64) -> Result<AccuracyTable> {
    localization_accuracy(&localize(model, samples, ids)?, model.classes(), t)
}
