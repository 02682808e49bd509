//! Run configuration and its `key = value` text format.
//!
//! Keys are dotted paths into [`RunConfig`], e.g. `backbone.grid = 8` or
//! `optim.lr = 0.001`. Lists are comma-separated. `#` starts a comment. Keys
//! not present in the defaults are rejected, so typos surface as errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::crf::CrfConfig;
use crate::error::{Error, Result};
use crate::losses::{LossFamily, ThresholdSet};
use crate::synth::SynthConfig;
use crate::tensor::AdamConfig;
use crate::threshold_fit::ThresholdFitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    pub family: LossFamily,
    pub lambda_ann: f64,
    /// Fixed per-class γ; empty means "positive/negative ratio of the training split".
    pub gamma: Vec<f64>,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            family: LossFamily::Relu,
            lambda_ann: 70.0,
            gamma: Vec::new(),
        }
    }
}

/// Starting thresholds, shared by every class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialThresholds {
    pub tau: f64,
    pub rho: f64,
    pub tau_hat: f64,
    pub rho_hat: f64,
}

impl Default for InitialThresholds {
    fn default() -> Self {
        Self {
            tau: 0.5,
            rho: 0.1,
            tau_hat: 2.0,
            rho_hat: 0.5,
        }
    }
}

impl InitialThresholds {
    pub fn build(&self, classes: usize) -> ThresholdSet {
        ThresholdSet::uniform(classes, self.tau, self.rho, self.tau_hat, self.rho_hat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Epoch budget of the backbone phase.
    pub phase1_epochs: usize,
    /// Epoch budget of the CRF phase (backbone frozen).
    pub phase2_epochs: usize,
    /// Relative improvement below which an epoch counts as stalled.
    pub min_improvement: f64,
    /// Consecutive stalled epochs that end the backbone phase.
    pub patience: usize,
    /// Fraction of the unannotated samples added to each training split.
    pub unannotated_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 48,
            phase1_epochs: 20,
            phase2_epochs: 4,
            min_improvement: 1e-3,
            patience: 3,
            unannotated_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub folds: usize,
    /// Localization threshold T.
    pub t: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { folds: 5, t: 0.1 }
    }
}

/// Arms of `compare`, each `family@unannotated_fraction` (e.g. `relu@0.2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSettings {
    pub arms: Vec<String>,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            arms: vec!["baseline@0.2".into(), "relu@0.2".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub crf: CrfConfig,
    pub loss: LossSettings,
    pub thresholds: InitialThresholds,
    pub fit: ThresholdFitConfig,
    pub optim: AdamConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub compare: CompareSettings,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            seed: 0,
            backbone: BackboneConfig::default(),
            crf: CrfConfig::default(),
            loss: LossSettings::default(),
            thresholds: InitialThresholds::default(),
            fit: ThresholdFitConfig::default(),
            optim: AdamConfig::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            compare: CompareSettings::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks every numeric field against its documented range.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.crf.validate(self.backbone.grid)?;
        self.fit.validate(self.backbone.grid)?;
        self.synth.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.loss.lambda_ann > 0.0) {
            return bad("loss.lambda_ann must be positive".into());
        }
        if !self.loss.gamma.is_empty() && self.loss.gamma.len() != self.backbone.classes {
            return bad(format!("loss.gamma needs {} entries or none", self.backbone.classes));
        }
        if self.loss.gamma.iter().any(|&g| !(g > 0.0)) {
            return bad("loss.gamma entries must be positive".into());
        }
        let cells = (self.backbone.grid * self.backbone.grid) as f64;
        let th = &self.thresholds;
        if !((0.0..=1.0).contains(&th.tau)
            && (0.0..=1.0).contains(&th.rho)
            && (0.0..=cells).contains(&th.tau_hat)
            && (0.0..=cells).contains(&th.rho_hat))
        {
            return bad("initial thresholds out of range".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("optim: need lr > 0, beta1/beta2 in [0, 1), eps > 0".into());
        }
        if !(o.weight_decay >= 0.0 && o.lr_decay > 0.0 && o.lr_decay <= 1.0) {
            return bad("optim: need weight_decay >= 0 and lr_decay in (0, 1]".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.patience == 0 {
            return bad("train.batch_size and train.patience must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&t.unannotated_fraction) {
            return bad("train.unannotated_fraction must lie in [0, 1]".into());
        }
        if !(t.min_improvement >= 0.0) {
            return bad("train.min_improvement must be nonnegative".into());
        }
        if self.eval.folds < 2 {
            return bad("eval.folds must be at least 2".into());
        }
        if !(self.eval.t > 0.0 && self.eval.t <= 1.0) {
            return bad("eval.t must lie in (0, 1]".into());
        }
        for arm in &self.compare.arms {
            parse_arm(arm)?;
        }
        Ok(())
    }

    /// Parses `key = value` text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(RunConfig::default())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            set_path(&mut root, key.trim(), value.trim())
                .map_err(|m| Error::Config(format!("line {}: {m}", lineno + 1)))?;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies a single dotted-key override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        set_path(&mut root, key, value).map_err(Error::Config)?;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Resolved configuration as pretty JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Resolved configuration in the `key = value` format accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        flatten(&serde_json::to_value(self)?, String::new(), &mut out);
        Ok(out)
    }
}

/// Splits `family@fraction`.
pub fn parse_arm(arm: &str) -> Result<(LossFamily, f64)> {
    let (fam, frac) = arm
        .split_once('@')
        .ok_or_else(|| Error::Config(format!("arm `{arm}` must look like family@fraction")))?;
    let family: LossFamily = fam.trim().parse()?;
    let f: f64 = frac
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("arm `{arm}`: bad fraction")))?;
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Config(format!("arm `{arm}`: fraction must lie in [0, 1]")));
    }
    Ok((family, f))
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| format!("unknown key `{key}`"))?;
    }
    *node = parse_like(node, raw).map_err(|m| format!("`{key}`: {m}"))?;
    Ok(())
}

/// Parses `raw` into a value of the same JSON kind as `template`.
fn parse_like(template: &Value, raw: &str) -> std::result::Result<Value, String> {
    match template {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true/false, got `{raw}`")),
        Value::Number(n) => {
            if n.is_f64() {
                raw.parse::<f64>()
                    .ok()
                    .and_then(serde_json::Number::from_f64)
                    .map(Value::Number)
                    .ok_or_else(|| format!("expected a number, got `{raw}`"))
            } else {
                raw.parse::<u64>()
                    .map(|v| Value::Number(v.into()))
                    .map_err(|_| format!("expected a nonnegative integer, got `{raw}`"))
            }
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            if raw.is_empty() || raw == "auto" {
                return Ok(Value::Array(Vec::new()));
            }
            let elem = items.first().cloned().unwrap_or_else(|| {
                // Empty default list: numeric entries.
                Value::Number(serde_json::Number::from_f64(0.0).unwrap())
            });
            raw.split(',')
                .map(|s| parse_like(&elem, s.trim()))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null | Value::Object(_) => Err("not a settable leaf".into()),
    }
}

fn flatten(v: &Value, prefix: String, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, key, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|i| match i {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.push_str(&format!("{prefix} = {}\n", parts.join(", ")));
        }
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides() {
        let cfg = RunConfig::parse(
            "# comment\nseed = 7\nbackbone.widths = 8, 16, 32\noptim.lr = 0.002  # inline\nloss.family = baseline\nloss.gamma = 0.5,0.5,0.5,0.5,0.5,0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.backbone.widths, vec![8, 16, 32]);
        assert_eq!(cfg.optim.lr, 0.002);
        assert_eq!(cfg.loss.family, LossFamily::Baseline);
        assert_eq!(cfg.loss.gamma.len(), 6);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::parse("optim.learning_rate = 1").unwrap_err().is_config());
        assert!(RunConfig::parse("seed = -1").unwrap_err().is_config());
        assert!(RunConfig::parse("loss.family = hinge").unwrap_err().is_config());
        assert!(RunConfig::parse("just words").unwrap_err().is_config());
        let mut cfg = RunConfig::default();
        cfg.backbone.blur_taps = 4;
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("train.unannotated_fraction", "0.5").unwrap();
        cfg.set("loss.gamma", "0.25,0.25,0.25,0.25,0.25,0.25").unwrap();
        let back = RunConfig::parse(&cfg.to_text().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn arms() {
        assert_eq!(parse_arm("relu@0.2").unwrap(), (LossFamily::Relu, 0.2));
        assert!(parse_arm("relu").is_err());
        assert!(parse_arm("relu@2").is_err());
    }
}
