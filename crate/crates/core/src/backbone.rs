//! Anti-aliased convolutional backbone producing per-patch class probabilities.
//!
//! Each stage is `conv3×3 → norm → ReLU → blur_downsample`, so the input side
//! must be `P · 2^stages`. Two head layers (`conv3×3 → norm → ReLU`, then a
//! `1×1` conv to K channels) are followed by a sigmoid, never a softmax: a
//! patch may carry several classes at once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PatchScores;
use crate::layers::{Conv, Mode, Norm, StatUpdate};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const ALLOWED_TAPS: [usize; 4] = [1, 2, 3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input image side, pixels.
    pub input_side: usize,
    /// Patch grid side P.
    pub grid: usize,
    /// Class count K.
    pub classes: usize,
    /// Channel width of each downsampling stage.
    pub widths: Vec<usize>,
    /// Binomial blur taps used before each stride-2 subsampling.
    pub blur_taps: usize,
    /// Channels of the first head layer.
    pub head_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_side: 64,
            grid: 8,
            classes: 6,
            widths: vec![16, 32, 64],
            blur_taps: 3,
            head_width: 32,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Pixels per patch along one axis.
    pub fn patch_pixels(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("backbone.classes must be at least 1".into()));
        }
        if self.grid == 0 {
            return Err(Error::Config("backbone.grid must be at least 1".into()));
        }
        if self.widths.contains(&0) || self.head_width == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if !ALLOWED_TAPS.contains(&self.blur_taps) {
            return Err(Error::Config(format!(
                "backbone.blur_taps must be one of {ALLOWED_TAPS:?}, got {}",
                self.blur_taps
            )));
        }
        if self.input_side != self.grid * self.patch_pixels() {
            return Err(Error::Config(format!(
                "backbone.input_side {} must equal grid {} x 2^{} stages",
                self.input_side,
                self.grid,
                self.stages()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv,
    norm: Norm,
}

/// Parameter handles for the backbone; the values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Block>,
    head: Block,
    out: Conv,
}

/// Output of a recorded forward pass.
pub struct BackboneOutput<T> {
    /// Patch probabilities, shape (N, K, P, P).
    pub probs: Var,
    pub updates: Vec<StatUpdate<T>>,
}

impl Backbone {
    /// Registers `backbone.*` tensors in `params`.
    pub fn new<T: Scalar>(config: BackboneConfig, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut channels = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            let prefix = format!("backbone.stage{i}");
            stages.push(Block {
                conv: Conv::register(params, &prefix, channels, w, 3, rng)?,
                norm: Norm::register(params, &prefix, w)?,
            });
            channels = w;
        }
        let head = Block {
            conv: Conv::register(params, "backbone.head0", channels, config.head_width, 3, rng)?,
            norm: Norm::register(params, "backbone.head0", config.head_width)?,
        };
        let out = Conv::register(params, "backbone.head1", config.head_width, config.classes, 1, rng)?;
        Ok(Self {
            config,
            stages,
            head,
            out,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Records the forward pass of a batch `x` of shape (N, 1, S, S).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
    ) -> Result<BackboneOutput<T>> {
        self.forward_with_taps(tape, params, x, mode, self.config.blur_taps)
    }

    pub(crate) fn forward_with_taps<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
        taps: usize,
    ) -> Result<BackboneOutput<T>> {
        let s = self.config.input_side;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(0), 1, s, s],
            });
        }
        let mut updates = Vec::new();
        let mut h = x;
        for block in &self.stages {
            h = block.conv.forward(tape, params, h)?;
            h = block.norm.forward(tape, params, h, mode, &mut updates)?;
            h = tape.relu(h)?;
            h = tape.blur_downsample(h, taps)?;
        }
        h = self.head.conv.forward(tape, params, h)?;
        h = self.head.norm.forward(tape, params, h, mode, &mut updates)?;
        h = tape.relu(h)?;
        h = self.out.forward(tape, params, h)?;
        let probs = tape.sigmoid(h)?;
        Ok(BackboneOutput { probs, updates })
    }

    /// Inference on a single image (`S×S` values) with running statistics.
    pub fn forward_patch_probs<T: Scalar>(&self, params: &ParamSet<T>, image: &[T]) -> Result<PatchScores<T>> {
        self.predict(params, &[image], self.config.blur_taps)
            .map(|mut v| v.pop().expect("one image"))
    }

    /// Inference on a batch of images with a chosen blur tap count.
    pub fn predict<T: Scalar>(&self, params: &ParamSet<T>, images: &[&[T]], taps: usize) -> Result<Vec<PatchScores<T>>> {
        let s = self.config.input_side;
        let (p, k) = (self.config.grid, self.config.classes);
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.len() != s * s {
                return Err(Error::ShapeMismatch {
                    op: "backbone",
                    left: vec![img.len()],
                    right: vec![s * s],
                });
            }
            data.extend_from_slice(img);
        }
        let mut tape = Tape::new();
        let x = tape.constant(vec![images.len(), 1, s, s], data)?;
        let out = self.forward_with_taps(&mut tape, params, x, Mode::Eval, taps)?;
        tape.value(out.probs)
            .chunks(p * p * k)
            .map(|c| PatchScores::new(p, k, c.to_vec()))
            .collect()
    }

    /// Mean absolute change of the patch probabilities when the image is
    /// cyclically shifted by one pixel along each of the four diagonals.
    pub fn shift_sensitivity<T: Scalar>(&self, params: &ParamSet<T>, image: &[T], use_blur: bool) -> Result<T> {
        let taps = if use_blur { self.config.blur_taps } else { 1 };
        self.shift_sensitivity_with_taps(params, image, taps)
    }

    pub fn shift_sensitivity_with_taps<T: Scalar>(&self, params: &ParamSet<T>, image: &[T], taps: usize) -> Result<T> {
        if !ALLOWED_TAPS.contains(&taps) {
            return Err(Error::Config(format!("unsupported blur tap count {taps}")));
        }
        let s = self.config.input_side;
        let shifted: Vec<Vec<T>> = [(1isize, 1isize), (1, -1), (-1, 1), (-1, -1)]
            .iter()
            .map(|&(dy, dx)| roll(image, s, dy, dx))
            .collect();
        let mut batch: Vec<&[T]> = vec![image];
        batch.extend(shifted.iter().map(Vec::as_slice));
        let out = self.predict(params, &batch, taps)?;
        let base = out[0].values();
        let mut total = T::zero();
        let mut count = 0usize;
        for other in &out[1..] {
            for (a, b) in base.iter().zip(other.values()) {
                total += (*a - *b).abs();
                count += 1;
            }
        }
        Ok(total / T::from_usize(count).unwrap())
    }
}

/// Cyclic shift of a square image: `out[r][c] = img[r − dy][c − dx]`.
pub fn roll<T: Scalar>(image: &[T], side: usize, dy: isize, dx: isize) -> Vec<T> {
    let n = side as isize;
    let mut out = vec![T::zero(); image.len()];
    for r in 0..n {
        for c in 0..n {
            let sr = (r - dy).rem_euclid(n) as usize;
            let sc = (c - dx).rem_euclid(n) as usize;
            out[(r * n + c) as usize] = image[sr * side + sc];
        }
    }
    out
}

/// Standalone blur + stride-2 subsampling of an (N, C, H, W) tensor.
pub fn blur_downsample<T: Scalar>(input: &Tensor<T>, taps: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.shape().to_vec(), input.data().to_vec())?;
    let y = tape.blur_downsample(x, taps)?;
    Ok(tape.tensor(y))
}
