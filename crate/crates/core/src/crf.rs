//! Pixel-adaptive-convolution CRF over the patch grid.
//!
//! Unaries are the backbone probabilities `p`. Pairwise terms couple patches
//! inside a square window through a Gaussian affinity of learned features and
//! an offset-dependent class compatibility `W`. Inference is an unrolled
//! mean-field update in logit space:
//!
//! ```text
//! z⁰ = p,   zᵗ⁺¹ = σ(logit(clamp(p)) − m(zᵗ))
//! ```
//!
//! With `W ≡ 0` the message vanishes and `z = p` (up to the clamp).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::grid::PatchScores;
use crate::layers::{Conv, Mode, Norm, StatUpdate};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    /// Side of the square pairwise window Ω (odd).
    pub window: usize,
    /// Mean-field iterations T.
    pub iterations: usize,
    /// Feature dimension F of the feature branch.
    pub features: usize,
    /// Gaussian affinity bandwidth.
    pub bandwidth: f64,
    /// Unary probabilities are clamped to `[eps, 1 − eps]` before the logit.
    pub clamp_eps: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            window: 5,
            iterations: 5,
            features: 8,
            bandwidth: 1.0,
            clamp_eps: 1e-7,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self, grid: usize) -> Result<()> {
        if self.window.is_multiple_of(2) || self.window > 2 * grid - 1 {
            return Err(Error::Config(format!(
                "crf.window must be odd and at most 2P-1 = {}, got {}",
                2 * grid - 1,
                self.window
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("crf.iterations must be at least 1".into()));
        }
        if self.features == 0 {
            return Err(Error::Config("crf.features must be at least 1".into()));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::Config("crf.bandwidth must be positive".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config("crf.clamp_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Learned features on the patch grid plus the fixed patch-centre coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<T> {
    side: usize,
    dim: usize,
    /// (F, P, P)
    values: Vec<T>,
    /// (P, P, 2): pixel coordinates (row, col) of each patch centre.
    coords: Vec<T>,
}

impl<T: Scalar> PatchFeatures<T> {
    pub fn new(side: usize, dim: usize, values: Vec<T>, patch_pixels: usize) -> Result<Self> {
        if values.len() != side * side * dim {
            return Err(Error::ShapeMismatch {
                op: "patch_features",
                left: vec![values.len()],
                right: vec![dim, side, side],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "patch_features" });
        }
        Ok(Self {
            side,
            dim,
            values,
            coords: patch_coords(side, patch_pixels),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    /// Feature vector of the patch at (row, col).
    pub fn at(&self, row: usize, col: usize) -> Vec<T> {
        let plane = self.side * self.side;
        (0..self.dim).map(|q| self.values[q * plane + row * self.side + col]).collect()
    }
}

/// Patch-centre pixel coordinates, (P, P, 2) row-major.
pub fn patch_coords<T: Scalar>(side: usize, patch_pixels: usize) -> Vec<T> {
    let s = patch_pixels as f64;
    let mut out = Vec::with_capacity(side * side * 2);
    for r in 0..side {
        for c in 0..side {
            out.push(T::lit((r as f64 + 0.5) * s));
            out.push(T::lit((c as f64 + 0.5) * s));
        }
    }
    out
}

/// Parameter handles of the CRF: compatibility `crf.W` and a two-layer feature branch.
#[derive(Clone, Debug)]
pub struct CrfLayer {
    config: CrfConfig,
    grid: usize,
    classes: usize,
    pool_steps: usize,
    patch_pixels: usize,
    compat: ParamId,
    convs: [Conv; 2],
    norms: [Norm; 2],
}

impl CrfLayer {
    /// Registers `crf.*` tensors. `W` starts at zero, so an untrained CRF is the identity.
    pub fn new<T: Scalar>(
        config: CrfConfig,
        backbone: &BackboneConfig,
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(backbone.grid)?;
        let k = backbone.classes;
        let s = config.window;
        let compat = params.insert("crf.W", Tensor::zeros(vec![k, k, s, s]).with_requires_grad(true))?;
        let f = config.features;
        let convs = [
            Conv::register(params, "crf.feat.0", 1, f, 3, rng)?,
            Conv::register(params, "crf.feat.1", f, f, 3, rng)?,
        ];
        let norms = [
            Norm::register(params, "crf.feat.0", f)?,
            Norm::register(params, "crf.feat.1", f)?,
        ];
        Ok(Self {
            config,
            grid: backbone.grid,
            classes: k,
            pool_steps: backbone.stages(),
            patch_pixels: backbone.patch_pixels(),
            compat,
            convs,
            norms,
        })
    }

    pub fn config(&self) -> &CrfConfig {
        &self.config
    }

    pub fn compat_id(&self) -> ParamId {
        self.compat
    }

    /// Feature branch: area-average the image down to P×P, then two
    /// `conv3×3 → ReLU → norm` layers. Output (N, F, P, P).
    pub fn features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        image: Var,
        mode: Mode,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<Var> {
        let side = self.grid * self.patch_pixels;
        let shape = tape.shape(image);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != side || shape[3] != side {
            return Err(Error::ShapeMismatch {
                op: "crf_features",
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(0), 1, side, side],
            });
        }
        let mut h = image;
        for _ in 0..self.pool_steps {
            h = tape.blur_downsample(h, 2)?;
        }
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(tape, params, h)?;
            h = tape.relu(h)?;
            h = norm.forward(tape, params, h, mode, updates)?;
        }
        Ok(h)
    }

    /// Pairwise message `m` for scores `z` (N, K, P, P) and features `f` (N, F, P, P).
    pub fn message<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, z: Var, f: Var) -> Result<Var> {
        let w = tape.param(params, self.compat);
        tape.pac_message(z, f, w, T::lit(self.config.bandwidth))
    }

    /// Unrolled mean-field refinement of unaries `p` (N, K, P, P).
    pub fn refine<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, p: Var, f: Var) -> Result<Var> {
        let w = tape.param(params, self.compat);
        let bw = T::lit(self.config.bandwidth);
        let unary = tape.logit_clamp(p, T::lit(self.config.clamp_eps))?;
        let mut z = p;
        for t in 0..self.config.iterations {
            let step = |tape: &mut Tape<T>| -> Result<Var> {
                let m = tape.pac_message(z, f, w, bw)?;
                let a = tape.sub(unary, m)?;
                tape.sigmoid(a)
            };
            z = step(tape).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteIteration { iteration: t },
                other => other,
            })?;
        }
        Ok(z)
    }

    /// Features of one image (`S×S` values) with running statistics.
    pub fn compute_features<T: Scalar>(&self, params: &ParamSet<T>, image: &[T]) -> Result<PatchFeatures<T>> {
        let side = self.grid * self.patch_pixels;
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1, side, side], image.to_vec()).map_err(|_| Error::ShapeMismatch {
            op: "crf_features",
            left: vec![image.len()],
            right: vec![side * side],
        })?;
        let f = self.features(&mut tape, params, x, Mode::Eval, &mut Vec::new())?;
        PatchFeatures::new(self.grid, self.config.features, tape.value(f).to_vec(), self.patch_pixels)
    }

    fn check_scores<T: Scalar>(&self, s: &PatchScores<T>, feats: &PatchFeatures<T>) -> Result<()> {
        if s.side() != self.grid || s.classes() != self.classes || feats.side() != self.grid || feats.dim() != self.config.features {
            return Err(Error::ShapeMismatch {
                op: "crf",
                left: vec![s.side(), s.side(), s.classes()],
                right: vec![self.grid, self.grid, self.classes],
            });
        }
        Ok(())
    }

    /// Message for a single grid, returned as (K, P, P) values.
    pub fn pairwise_message<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        z: &PatchScores<T>,
        feats: &PatchFeatures<T>,
    ) -> Result<Vec<T>> {
        self.check_scores(z, feats)?;
        let (p, k, fd) = (self.grid, self.classes, self.config.features);
        let mut tape = Tape::new();
        let zv = tape.constant(vec![1, k, p, p], z.values().to_vec())?;
        let fv = tape.constant(vec![1, fd, p, p], feats.values().to_vec())?;
        let m = self.message(&mut tape, params, zv, fv)?;
        Ok(tape.value(m).to_vec())
    }

    /// Refined scores `z` for a single grid of unaries `p`.
    pub fn crf_refine<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        p: &PatchScores<T>,
        feats: &PatchFeatures<T>,
    ) -> Result<PatchScores<T>> {
        self.check_scores(p, feats)?;
        let (g, k, fd) = (self.grid, self.classes, self.config.features);
        let mut tape = Tape::new();
        let pv = tape.constant(vec![1, k, g, g], p.values().to_vec())?;
        let fv = tape.constant(vec![1, fd, g, g], feats.values().to_vec())?;
        let z = self.refine(&mut tape, params, pv, fv)?;
        PatchScores::new(g, k, tape.value(z).to_vec())
    }
}
