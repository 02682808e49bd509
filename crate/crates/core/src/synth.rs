//! Synthetic blob dataset: generation, on-disk format and validated loading.
//!
//! Each class has a signature made of an amplitude sign and a stripe texture.
//! Blobs are elliptical Gaussian bumps on unit-variance noise; pixel values are
//! `clamp(x / 3, -1, 1)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PatchMask;
use crate::losses::Annotation;

pub const IMAGE_MAGIC: &[u8; 4] = b"PLIM";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "synth_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_side: usize,
    /// Patch grid side used for boxes.
    pub grid: usize,
    pub classes: usize,
    /// Classes `0..boxed_classes` may carry boxes.
    pub boxed_classes: usize,
    pub images: usize,
    pub annotated_fraction: f64,
    pub label_noise: f64,
    /// Probability that a class appears in an image.
    pub class_prior: f64,
    /// Probability that a present class gets a second blob.
    pub second_blob: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Peak blob height in noise standard deviations.
    pub amplitude: f64,
    pub stripe_period: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            grid: 8,
            classes: 6,
            boxed_classes: 4,
            images: 4000,
            annotated_fraction: 0.01,
            label_noise: 0.0,
            class_prior: 0.25,
            second_blob: 0.15,
            sigma_min: 3.0,
            sigma_max: 6.0,
            amplitude: 3.0,
            stripe_period: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.classes == 0 || self.boxed_classes > self.classes {
            return bad(format!("need 1 <= classes and boxed_classes <= classes ({}, {})", self.classes, self.boxed_classes));
        }
        if self.grid == 0 || !self.image_side.is_multiple_of(self.grid) {
            return bad(format!("image_side {} must be a multiple of grid {}", self.image_side, self.grid));
        }
        for (name, v) in [
            ("annotated_fraction", self.annotated_fraction),
            ("label_noise", self.label_noise),
            ("class_prior", self.class_prior),
            ("second_blob", self.second_blob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return bad("need 0 < sigma_min <= sigma_max".into());
        }
        if 4.0 * self.sigma_max > self.image_side as f64 {
            return bad(format!("blobs of sigma {} do not fit a {}-pixel image", self.sigma_max, self.image_side));
        }
        if !(self.amplitude.is_finite() && self.stripe_period > 0.0) {
            return bad("amplitude must be finite and stripe_period positive".into());
        }
        Ok(())
    }

    pub fn annotated_count(&self) -> usize {
        (self.annotated_fraction * self.images as f64).round() as usize
    }
}

/// Amplitude sign and texture of a class. Textures: 0 flat, 1 horizontal stripes, 2 vertical stripes.
pub fn class_signature(class: usize) -> (f64, usize) {
    let sign = if class.is_multiple_of(2) { 1.0 } else { -1.0 };
    (sign, (class / 2) % 3)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub class: usize,
    pub center: (f64, f64),
    pub sigma: (f64, f64),
}

impl Blob {
    /// Tight pixel box `center ± 2σ`, clipped to the image: `(y0, x0, y1, x1)`.
    pub fn pixel_box(&self, side: usize) -> (f64, f64, f64, f64) {
        let s = side as f64;
        (
            (self.center.0 - 2.0 * self.sigma.0).max(0.0),
            (self.center.1 - 2.0 * self.sigma.1).max(0.0),
            (self.center.0 + 2.0 * self.sigma.0).min(s),
            (self.center.1 + 2.0 * self.sigma.1).min(s),
        )
    }

    /// Patches covered more than half by the pixel box, plus the patch holding the center.
    pub fn patch_mask(&self, side: usize, grid: usize) -> PatchMask {
        let ps = (side / grid) as f64;
        let (y0, x0, y1, x1) = self.pixel_box(side);
        let mut m = PatchMask::empty(grid);
        for r in 0..grid {
            for c in 0..grid {
                let (py, px) = (r as f64 * ps, c as f64 * ps);
                let oy = (y1.min(py + ps) - y0.max(py)).max(0.0);
                let ox = (x1.min(px + ps) - x0.max(px)).max(0.0);
                if oy * ox > 0.5 * ps * ps {
                    m.set(r, c, true);
                }
            }
        }
        let cr = ((self.center.0 / ps) as usize).min(grid - 1);
        let cc = ((self.center.1 / ps) as usize).min(grid - 1);
        m.set(cr, cc, true);
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub side: usize,
    /// Row-major pixels in [-1, 1].
    pub image: Vec<f64>,
    pub annotation: Annotation,
}

/// Generation-time facts not stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTruth {
    pub blobs: Vec<Blob>,
    /// Labels before noise.
    pub clean_labels: Vec<bool>,
}

fn render(cfg: &SynthConfig, blobs: &[Blob], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.image_side;
    let mut x: Vec<f64> = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for b in blobs {
        let (sign, texture) = class_signature(b.class);
        let (y0, x0, y1, x1) = (
            (b.center.0 - 4.0 * b.sigma.0).floor().max(0.0) as usize,
            (b.center.1 - 4.0 * b.sigma.1).floor().max(0.0) as usize,
            ((b.center.0 + 4.0 * b.sigma.0).ceil() as usize).min(n),
            ((b.center.1 + 4.0 * b.sigma.1).ceil() as usize).min(n),
        );
        for r in y0..y1 {
            for c in x0..x1 {
                let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
                let dy = (py - b.center.0) / b.sigma.0;
                let dx = (px - b.center.1) / b.sigma.1;
                let g = (-0.5 * (dy * dy + dx * dx)).exp();
                let phase = std::f64::consts::TAU / cfg.stripe_period;
                let tex = match texture {
                    0 => 1.0,
                    1 => 1.0 + (phase * py).cos(),
                    _ => 1.0 + (phase * px).cos(),
                };
                x[r * n + c] += sign * cfg.amplitude * g * tex;
            }
        }
    }
    // Stored as f32 on disk; round here so in-memory and loaded samples agree.
    x.into_iter().map(|v| (v / 3.0).clamp(-1.0, 1.0) as f32 as f64).collect()
}

/// Generates the dataset in memory, with the hidden blob placements.
pub fn generate_samples(cfg: &SynthConfig) -> Result<(Vec<Sample>, Vec<SampleTruth>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = cfg.image_side as f64;
    let mut truths = Vec::with_capacity(cfg.images);
    let mut images = Vec::with_capacity(cfg.images);
    for _ in 0..cfg.images {
        let mut blobs = Vec::new();
        for class in 0..cfg.classes {
            if rng.gen::<f64>() >= cfg.class_prior {
                continue;
            }
            let count = if rng.gen::<f64>() < cfg.second_blob { 2 } else { 1 };
            for _ in 0..count {
                let sigma = (
                    rng.gen_range(cfg.sigma_min..=cfg.sigma_max),
                    rng.gen_range(cfg.sigma_min..=cfg.sigma_max),
                );
                let margin = 2.0 * cfg.sigma_min;
                let center = (rng.gen_range(margin..side - margin), rng.gen_range(margin..side - margin));
                blobs.push(Blob { class, center, sigma });
            }
        }
        let clean: Vec<bool> = (0..cfg.classes).map(|k| blobs.iter().any(|b| b.class == k)).collect();
        images.push(render(cfg, &blobs, &mut rng));
        truths.push(SampleTruth {
            blobs,
            clean_labels: clean,
        });
    }

    let mut candidates: Vec<usize> = (0..cfg.images)
        .filter(|&i| truths[i].clean_labels[..cfg.boxed_classes].iter().any(|&y| y))
        .collect();
    candidates.shuffle(&mut rng);
    let mut chosen = vec![false; cfg.images];
    for &i in candidates.iter().take(cfg.annotated_count()) {
        chosen[i] = true;
    }

    let mut samples = Vec::with_capacity(cfg.images);
    for (i, (image, truth)) in images.into_iter().zip(&truths).enumerate() {
        let mut ann = Annotation::unannotated(truth.clean_labels.clone());
        if chosen[i] {
            for k in 0..cfg.boxed_classes {
                let mut mask: Option<PatchMask> = None;
                for b in truth.blobs.iter().filter(|b| b.class == k) {
                    let m = b.patch_mask(cfg.image_side, cfg.grid);
                    mask = Some(match mask {
                        Some(prev) => prev.union(&m),
                        None => m,
                    });
                }
                if mask.is_some() {
                    ann.annotated[k] = true;
                    ann.boxes[k] = mask;
                }
            }
        }
        for k in 0..cfg.classes {
            if !ann.annotated[k] && rng.gen::<f64>() < cfg.label_noise {
                ann.labels[k] = !ann.labels[k];
            }
        }
        samples.push(Sample {
            id: format!("img{i:05}"),
            side: cfg.image_side,
            image,
            annotation: ann,
        });
    }
    Ok((samples, truths))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub class: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_file: String,
    pub labels: Vec<u8>,
    pub annotated: Vec<u8>,
    pub boxes: Vec<BoxRecord>,
}

impl ManifestRecord {
    pub fn from_sample(s: &Sample) -> Self {
        let a = &s.annotation;
        let mut boxes = Vec::new();
        for (class, b) in a.boxes.iter().enumerate() {
            if let Some(b) = b {
                for (row0, col0, rows, cols) in b.to_rects() {
                    boxes.push(BoxRecord {
                        class,
                        row0,
                        col0,
                        rows,
                        cols,
                    });
                }
            }
        }
        Self {
            id: s.id.clone(),
            image_file: format!("images/{}.plim", s.id),
            labels: a.labels.iter().map(|&v| u8::from(v)).collect(),
            annotated: a.annotated.iter().map(|&v| u8::from(v)).collect(),
            boxes,
        }
    }

    /// Rebuilds and validates the annotation on a `grid`×`grid` patch grid.
    pub fn annotation(&self, grid: usize) -> Result<Annotation> {
        let err = |msg: String| Error::Sample {
            id: self.id.clone(),
            msg,
        };
        let flag = |v: &[u8], what: &str| -> Result<Vec<bool>> {
            v.iter()
                .map(|&x| match x {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(err(format!("{what} entries must be 0 or 1, got {other}"))),
                })
                .collect()
        };
        let labels = flag(&self.labels, "labels")?;
        let annotated = flag(&self.annotated, "annotated")?;
        let k = labels.len();
        if annotated.len() != k {
            return Err(err(format!("{k} labels but {} annotated flags", annotated.len())));
        }
        let mut boxes: Vec<Option<PatchMask>> = vec![None; k];
        for b in &self.boxes {
            if b.class >= k {
                return Err(err(format!("box class {} out of range", b.class)));
            }
            let m = PatchMask::rect(grid, b.row0, b.col0, b.rows, b.cols).map_err(|e| err(e.to_string()))?;
            boxes[b.class] = Some(match boxes[b.class].take() {
                Some(prev) => prev.union(&m),
                None => m,
            });
        }
        let ann = Annotation {
            labels,
            annotated,
            boxes,
        };
        ann.validate(grid).map_err(err)?;
        Ok(ann)
    }
}

pub fn encode_image(side: usize, image: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * image.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [side as u32, side as u32, 1u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in image {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses an image file, returning `(height, width, pixels)`; single-channel only.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err("missing PLIM header".into());
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (u(4), u(8), u(12));
    if c != 1 {
        return Err(format!("expected 1 channel, found {c}"));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| "image extents overflow".to_string())?;
    if bytes.len() - 16 != expected {
        return Err(format!("payload is {} bytes, expected {expected} for {h}x{w}", bytes.len() - 16));
    }
    let px: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if px.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err("pixel outside [-1, 1]".into());
    }
    Ok((h, w, px))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `samples` as a dataset directory.
pub fn write_dataset(dir: &Path, samples: &[Sample], cfg: Option<&SynthConfig>) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rec = ManifestRecord::from_sample(s);
        write_file(&dir.join(&rec.image_file), &encode_image(s.side, &s.image))?;
        records.push(rec);
    }
    write_file(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&records)?)?;
    if let Some(cfg) = cfg {
        write_file(&dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(cfg)?)?;
    }
    Ok(())
}

/// Generates the dataset and writes it to `dir`.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<Vec<Sample>> {
    let (samples, _) = generate_samples(cfg)?;
    write_dataset(dir, &samples, Some(cfg))?;
    Ok(samples)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        what: "manifest",
        msg: e.to_string(),
    })
}

/// Loads every sample in manifest order, validating images and annotations.
pub fn load(dir: &Path, image_side: usize, grid: usize) -> Result<Vec<Sample>> {
    let records = read_manifest(dir)?;
    let mut out = Vec::with_capacity(records.len());
    let mut classes = None;
    for rec in &records {
        let err = |msg: String| Error::Sample {
            id: rec.id.clone(),
            msg,
        };
        let ann = rec.annotation(grid)?;
        match classes {
            None => classes = Some(ann.classes()),
            Some(k) if k != ann.classes() => return Err(err(format!("{} classes, expected {k}", ann.classes()))),
            _ => {}
        }
        let path: PathBuf = dir.join(&rec.image_file);
        let bytes = fs::read(&path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        let (h, w, image) = decode_image(&bytes).map_err(err)?;
        if h != image_side || w != image_side {
            return Err(err(format!("image is {h}x{w}, expected {image_side}x{image_side}")));
        }
        out.push(Sample {
            id: rec.id.clone(),
            side: image_side,
            image,
            annotation: ann,
        });
    }
    Ok(out)
}
