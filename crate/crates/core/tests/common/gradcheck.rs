//! Central finite-difference gradient checks over random configurations.
//!
//! A coordinate counts as a breakpoint (and is excluded) when its one-sided
//! differences disagree, i.e. a ReLU or clamp kink lies within `h` of it.
//! That test depends only on the function, never on the analytic gradient.

use patchloc::backbone::{Backbone, BackboneConfig};
use patchloc::crf::{CrfConfig, CrfLayer};
use patchloc::grid::PatchMask;
use patchloc::layers::Mode;
use patchloc::losses::{batch_loss, per_class_loss, Annotation, LossConfig, LossFamily, ThresholdSet};
use patchloc::tensor::{ParamId, ParamSet, Tape, Tensor, Var};
use patchloc::PatchScores64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Denominator floor of the relative error, scaled by `max(1, |loss|)`.
/// Central differences carry roundoff of about `1e-11·|loss|`, so a
/// gradient that is exactly zero must not be compared against that noise.
pub const FLOOR: f64 = 1e-6;
const COORDS_PER_PARAM: usize = 6;

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub configs: usize,
    pub coords: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.configs += other.configs;
        self.coords += other.coords;
        self.kinks += other.kinks;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &ParamSet<f64>) -> patchloc::Result<Var> + 'a;

fn eval(build: &Build<'_>, params: &ParamSet<f64>) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params).expect("forward");
    tape.scalar(loss)
}

/// Checks `∂loss/∂params[ids]` at a random subset of coordinates.
pub fn check(label: &str, params: &ParamSet<f64>, ids: &[ParamId], build: &Build<'_>, rng: &mut ChaCha8Rng) -> GradReport {
    let mut ps = params.clone();
    ps.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &ps).expect("forward");
    tape.backward_into(loss, &mut ps).expect("backward");
    let f0 = tape.scalar(loss);
    let mut rep = GradReport {
        configs: 1,
        ..Default::default()
    };
    for &id in ids {
        let n = ps.get(id).len();
        let analytic = ps.get(id).grad().expect("grad present").to_vec();
        let picks: Vec<usize> = if n <= COORDS_PER_PARAM {
            (0..n).collect()
        } else {
            (0..COORDS_PER_PARAM).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let mut plus = params.clone();
            plus.get_mut(id).data_mut()[i] += H;
            let mut minus = params.clone();
            minus.get_mut(id).data_mut()[i] -= H;
            let (fp, fm) = (eval(build, &plus), eval(build, &minus));
            let fwd = (fp - f0) / H;
            let bwd = (f0 - fm) / H;
            let central = (fp - fm) / (2.0 * H);
            if (fwd - bwd).abs() > 1e-3 * (fwd.abs().max(bwd.abs()).max(1e-3)) {
                rep.kinks += 1;
                continue;
            }
            let a = analytic[i];
            let err = (a - central).abs() / a.abs().max(central.abs()).max(FLOOR * f0.abs().max(1.0));
            rep.coords += 1;
            rep.max_rel_err = rep.max_rel_err.max(err);
            if err > TOL {
                rep.failures.push(format!(
                    "{label}: {}[{i}] analytic {a:e} numeric {central:e} rel {err:e}",
                    params.name(id)
                ));
            }
        }
    }
    rep
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random chains of primitive ops ending in a scalar.
pub fn op_chains(count: usize, seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    for c in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
        let n = rng.gen_range(1..3);
        let ch = rng.gen_range(1..4);
        let side = 2 * rng.gen_range(2..5);
        let out_ch = rng.gen_range(1..4);
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let taps = [1, 2, 3, 5][rng.gen_range(0..4)];
        let variant = c % 5;
        let mut ps = ParamSet::new();
        let x = ps.insert("x", rand_tensor(&mut rng, vec![n, ch, side, side], 1.0)).unwrap();
        let w = ps.insert("w", rand_tensor(&mut rng, vec![out_ch, ch, k, k], 0.7)).unwrap();
        let b = ps.insert("b", rand_tensor(&mut rng, vec![out_ch], 0.5)).unwrap();
        let g = ps.insert("gamma", rand_tensor(&mut rng, vec![out_ch], 1.0)).unwrap();
        let be = ps.insert("beta", rand_tensor(&mut rng, vec![out_ch], 0.5)).unwrap();
        let y = ps.insert("y", rand_tensor(&mut rng, vec![n, out_ch, side, side], 1.0)).unwrap();
        let out_len = n * out_ch * side * side;
        let mul = rand_vec(&mut rng, out_len, -1.5, 1.5);
        let add = rand_vec(&mut rng, out_len, -0.5, 0.5);
        let half = side / 2;
        let mask = rand_vec(&mut rng, n * out_ch * half * half, 0.0, 1.0);
        let scale = rng.gen_range(-2.0..2.0);
        let build = move |t: &mut Tape<f64>, p: &ParamSet<f64>| -> patchloc::Result<Var> {
            let (xv, wv, bv) = (t.param(p, x), t.param(p, w), t.param(p, b));
            let mut h = t.conv2d(xv, wv, Some(bv), k / 2)?;
            match variant {
                0 => {
                    h = t.relu(h)?;
                    let yv = t.param(p, y);
                    h = t.hadamard(h, yv)?;
                }
                1 => {
                    let (gv, bev) = (t.param(p, g), t.param(p, be));
                    h = t.affine_norm_train(h, gv, bev, 1e-5)?.0;
                    h = t.sigmoid(h)?;
                }
                2 => {
                    h = t.affine_const(h, &mul, &add)?;
                    let yv = t.param(p, y);
                    h = t.sub(h, yv)?;
                    h = t.sigmoid(h)?;
                    h = t.log_clamp(h, 1e-7)?;
                }
                3 => {
                    let yv = t.param(p, y);
                    h = t.add(h, yv)?;
                    h = t.mul(h, scale)?;
                    h = t.relu(h)?;
                }
                _ => {
                    h = t.sigmoid(h)?;
                    h = t.affine_const(h, &vec![-1.0; out_len], &vec![-0.1; out_len])?;
                    h = t.log1m_exp(h, -1e-7)?;
                }
            }
            h = t.blur_downsample(h, taps)?;
            let s = t.masked_sum(h, &mask)?;
            t.sum(s)
        };
        let ids = match variant {
            1 => vec![x, w, b, g, be],
            4 => vec![x, w, b],
            _ => vec![x, w, b, y],
        };
        rep.merge(check(&format!("chain{c}/v{variant}"), &ps, &ids, &build, &mut rng));
    }
    rep
}

/// Pixel-adaptive message and logit clamp in isolation.
pub fn pac_ops(count: usize, seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    for c in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
        let (n, k, f) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let side = rng.gen_range(3..6);
        let s = [1, 3, 5][rng.gen_range(0..3)];
        let bw = rng.gen_range(0.5..2.0);
        let mut ps = ParamSet::new();
        let zi = ps.insert("z", rand_tensor(&mut rng, vec![n, k, side, side], 1.0)).unwrap();
        let fi = ps.insert("f", rand_tensor(&mut rng, vec![n, f, side, side], 1.0)).unwrap();
        let wi = ps.insert("W", rand_tensor(&mut rng, vec![k, k, s, s], 1.0)).unwrap();
        let weights = rand_vec(&mut rng, n * k * side * side, -1.0, 1.0);
        let build = move |t: &mut Tape<f64>, p: &ParamSet<f64>| -> patchloc::Result<Var> {
            let (z, fv, w) = (t.param(p, zi), t.param(p, fi), t.param(p, wi));
            let zs = t.sigmoid(z)?;
            let logit = t.logit_clamp(zs, 1e-7)?;
            let m = t.pac_message(zs, fv, w, bw)?;
            let d = t.sub(logit, m)?;
            let s = t.masked_sum(d, &weights)?;
            t.sum(s)
        };
        rep.merge(check(&format!("pac{c}"), &ps, &[zi, fi, wi], &build, &mut rng));
    }
    rep
}

fn tiny_backbone(rng: &mut ChaCha8Rng, classes: usize) -> BackboneConfig {
    let stages = rng.gen_range(1..3);
    let grid = rng.gen_range(2..4);
    BackboneConfig {
        input_side: grid << stages,
        grid,
        classes,
        widths: (0..stages).map(|_| rng.gen_range(2..5)).collect(),
        blur_taps: [1, 2, 3, 5][rng.gen_range(0..4)],
        head_width: rng.gen_range(2..5),
    }
}

/// Backbone forward (training-mode normalization) under a random linear read-out.
pub fn backbone(count: usize, seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    for c in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
        let classes = rng.gen_range(1..4);
        let cfg = tiny_backbone(&mut rng, classes);
        let n = rng.gen_range(2..4);
        let mut ps = ParamSet::new();
        let bb = Backbone::new(cfg.clone(), &mut ps, &mut rng).unwrap();
        let side = cfg.input_side;
        let image = rand_vec(&mut rng, n * side * side, -1.0, 1.0);
        let readout = rand_vec(&mut rng, n * classes * cfg.grid * cfg.grid, -1.0, 1.0);
        let build = |t: &mut Tape<f64>, p: &ParamSet<f64>| -> patchloc::Result<Var> {
            let x = t.constant(vec![n, 1, side, side], image.clone())?;
            let out = bb.forward(t, p, x, Mode::Train)?;
            let s = t.masked_sum(out.probs, &readout)?;
            t.sum(s)
        };
        let ids = ps.trainable_ids();
        rep.merge(check(&format!("backbone{c}"), &ps, &ids, &build, &mut rng));
    }
    rep
}

/// Unrolled CRF refinement w.r.t. unaries, `W` and the feature branch.
pub fn crf(count: usize, seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    for c in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
        let classes = rng.gen_range(1..4);
        let bcfg = tiny_backbone(&mut rng, classes);
        let ccfg = CrfConfig {
            window: [1, 3][rng.gen_range(0..2)].min(2 * bcfg.grid - 1),
            iterations: rng.gen_range(1..4),
            features: rng.gen_range(1..4),
            bandwidth: rng.gen_range(0.5..2.0),
            clamp_eps: 1e-7,
        };
        let mut ps = ParamSet::new();
        let layer = CrfLayer::new(ccfg.clone(), &bcfg, &mut ps, &mut rng).unwrap();
        // Nonzero compatibilities so the pairwise path carries gradient.
        let wid = layer.compat_id();
        for v in ps.get_mut(wid).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let n = 2;
        let (side, g) = (bcfg.input_side, bcfg.grid);
        let pi = ps
            .insert(
                "p",
                Tensor::new(vec![n, classes, g, g], rand_vec(&mut rng, n * classes * g * g, 0.05, 0.95))
                    .unwrap()
                    .with_requires_grad(true),
            )
            .unwrap();
        let image = rand_vec(&mut rng, n * side * side, -1.0, 1.0);
        let readout = rand_vec(&mut rng, n * classes * g * g, -1.0, 1.0);
        let build = |t: &mut Tape<f64>, p: &ParamSet<f64>| -> patchloc::Result<Var> {
            let x = t.constant(vec![n, 1, side, side], image.clone())?;
            let pv = t.param(p, pi);
            let f = layer.features(t, p, x, Mode::Train, &mut Vec::new())?;
            let z = layer.refine(t, p, pv, f)?;
            let s = t.masked_sum(z, &readout)?;
            t.sum(s)
        };
        let ids = ps.trainable_ids();
        rep.merge(check(&format!("crf{c}"), &ps, &ids, &build, &mut rng));
    }
    rep
}

/// Random annotations on a `g×g` grid with proper, nonempty boxes.
pub fn random_annotations(rng: &mut ChaCha8Rng, n: usize, k: usize, g: usize) -> Vec<Annotation> {
    (0..n)
        .map(|_| {
            let mut a = Annotation::unannotated((0..k).map(|_| rng.gen_bool(0.5)).collect());
            for c in 0..k {
                if a.labels[c] && rng.gen_bool(0.5) {
                    let rows = rng.gen_range(1..g);
                    let cols = rng.gen_range(1..=g);
                    let r0 = rng.gen_range(0..=g - rows);
                    let c0 = rng.gen_range(0..=g - cols);
                    a.annotated[c] = true;
                    a.boxes[c] = Some(PatchMask::rect(g, r0, c0, rows, cols).unwrap());
                }
            }
            a
        })
        .collect()
}

fn random_thresholds(rng: &mut ChaCha8Rng, k: usize, g: usize) -> ThresholdSet {
    let cells = (g * g) as f64;
    ThresholdSet {
        tau: rand_vec(rng, k, 0.1, 0.9),
        rho: rand_vec(rng, k, 0.05, 0.5),
        tau_hat: rand_vec(rng, k, 1.0, cells * 0.6),
        rho_hat: rand_vec(rng, k, 0.0, cells * 0.4),
    }
}

/// Tape losses of every family w.r.t. the scores, plus a value check against
/// the direct per-example formulas.
pub fn losses(count: usize, seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    let families = [LossFamily::Relu, LossFamily::Sigmoid, LossFamily::Baseline];
    for c in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
        let family = families[c % 3];
        let (n, k, g) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..5));
        let anns = random_annotations(&mut rng, n, k, g);
        let th = random_thresholds(&mut rng, k, g);
        let cfg = LossConfig {
            lambda_ann: rng.gen_range(1.0..80.0),
            gamma: rand_vec(&mut rng, k, 0.1, 1.0),
            family,
        };
        let mut ps = ParamSet::new();
        let zi = ps
            .insert(
                "z",
                Tensor::new(vec![n, k, g, g], rand_vec(&mut rng, n * k * g * g, 0.02, 0.98))
                    .unwrap()
                    .with_requires_grad(true),
            )
            .unwrap();
        let refs: Vec<&Annotation> = anns.iter().collect();
        let build = |t: &mut Tape<f64>, p: &ParamSet<f64>| -> patchloc::Result<Var> {
            let z = t.param(p, zi);
            Ok(batch_loss(t, z, &refs, &th, &cfg)?.total)
        };
        // Value oracle: per-example formulas summed.
        let z = ps.get(zi).data().to_vec();
        let mut direct = 0.0;
        for (i, a) in anns.iter().enumerate() {
            let scores = PatchScores64::new(g, k, z[i * k * g * g..(i + 1) * k * g * g].to_vec()).unwrap();
            direct += per_class_loss(&scores, a, &th, &cfg).unwrap().iter().sum::<f64>();
        }
        let taped = eval(&build, &ps);
        if (taped - direct).abs() > 1e-9 * direct.abs().max(1.0) {
            rep.failures.push(format!("loss{c}/{family}: tape value {taped} vs direct {direct}"));
        }
        rep.merge(check(&format!("loss{c}/{family}"), &ps, &[zi], &build, &mut rng));
    }
    rep
}

/// Per-example loss through the CRF and the backbone together.
pub fn end_to_end(count: usize, seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    let families = [LossFamily::Relu, LossFamily::Sigmoid, LossFamily::Baseline];
    for c in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + c as u64);
        let family = families[c % 3];
        let k = rng.gen_range(1..3);
        let bcfg = tiny_backbone(&mut rng, k);
        let g = bcfg.grid;
        let ccfg = CrfConfig {
            window: 3.min(2 * g - 1),
            iterations: 2,
            features: 2,
            bandwidth: 1.0,
            clamp_eps: 1e-7,
        };
        let mut ps = ParamSet::new();
        let bb = Backbone::new(bcfg.clone(), &mut ps, &mut rng).unwrap();
        let layer = CrfLayer::new(ccfg, &bcfg, &mut ps, &mut rng).unwrap();
        for v in ps.get_mut(layer.compat_id()).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let n = 2;
        let side = bcfg.input_side;
        let image = rand_vec(&mut rng, n * side * side, -1.0, 1.0);
        let anns = random_annotations(&mut rng, n, k, g);
        let refs: Vec<&Annotation> = anns.iter().collect();
        let th = random_thresholds(&mut rng, k, g);
        let cfg = LossConfig {
            lambda_ann: 70.0,
            gamma: rand_vec(&mut rng, k, 0.1, 1.0),
            family,
        };
        let build = |t: &mut Tape<f64>, p: &ParamSet<f64>| -> patchloc::Result<Var> {
            let x = t.constant(vec![n, 1, side, side], image.clone())?;
            let out = bb.forward(t, p, x, Mode::Train)?;
            let f = layer.features(t, p, x, Mode::Train, &mut Vec::new())?;
            let z = layer.refine(t, p, out.probs, f)?;
            Ok(batch_loss(t, z, &refs, &th, &cfg)?.total)
        };
        let ids = ps.trainable_ids();
        rep.merge(check(&format!("e2e{c}/{family}"), &ps, &ids, &build, &mut rng));
    }
    rep
}

/// The whole suite; returns one report per path.
pub fn full_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    vec![
        ("primitive op chains", op_chains(40, seed)),
        ("pac message / logit clamp", pac_ops(10, seed + 1000)),
        ("backbone", backbone(15, seed + 2000)),
        ("crf refinement", crf(15, seed + 3000)),
        ("losses (relu / sigmoid / baseline)", losses(30, seed + 4000)),
        ("loss through crf and backbone", end_to_end(12, seed + 5000)),
    ]
}
