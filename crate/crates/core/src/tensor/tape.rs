//! Reverse-mode tape. Every forward op appends a node; `backward` walks the
//! nodes in exact reverse order of recording.

use super::kernels::{self, ConvDims, PacDims};
use super::{numel, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    AffineConst {
        x: Var,
        mul: Vec<T>,
    },
    Sum(Var),
    MaskedSum {
        x: Var,
        mask: Vec<T>,
        plane: usize,
    },
    AffineNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        spatial: usize,
        batch: bool,
    },
    BlurDownsample {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        taps: usize,
    },
    LogClamp {
        x: Var,
        floor: T,
    },
    LogitClamp {
        x: Var,
        eps: T,
    },
    Log1mExp {
        x: Var,
        ceil: T,
    },
    PacMessage {
        z: Var,
        f: Var,
        w: Var,
        dims: PacDims,
        bandwidth: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "mul",
            Op::AffineConst { .. } => "affine_const",
            Op::Sum(_) => "sum",
            Op::MaskedSum { .. } => "masked_sum",
            Op::AffineNorm { .. } => "affine_norm",
            Op::BlurDownsample { .. } => "blur_downsample",
            Op::LogClamp { .. } => "log_clamp",
            Op::LogitClamp { .. } => "logit_clamp",
            Op::Log1mExp { .. } => "log1m_exp",
            Op::PacMessage { .. } => "pac_message",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Operation recorder for one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], len: usize, v: Var, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor; it participates in gradients iff it requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf { param: None }, t.requires_grad())
            .expect("tensor values are finite")
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "constant",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        self.push(shape, data, Op::Leaf { param: None }, false)
    }

    /// Records a snapshot of a registered parameter.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let t = params.get(id);
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf { param: Some(id) }, t.requires_grad())
            .expect("parameter values are finite")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, data, op, rg)
    }

    fn zip(&mut self, opname: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(opname, a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(shape, data, op, rg)
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    /// `x`: (N, C, H, W), `w`: (O, C, kh, kw), `b`: (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if let Some(b) = b {
            let bs = &self.nodes[b.0].shape;
            if bs.as_slice() != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: ws,
                    right: bs.clone(),
                });
            }
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        let dims = ConvDims {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            pad,
        };
        let data = kernels::conv2d_forward(
            &dims,
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            b.map(|b| self.nodes[b.0].data.as_slice()),
        );
        let shape = vec![dims.n, dims.o, dims.out_h(), dims.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(shape, data, Op::Conv2d { x, w, b, dims }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), scalar::relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), scalar::sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("hadamard", a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    /// Multiplication by a scalar constant.
    pub fn mul(&mut self, x: Var, c: T) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// Elementwise `mul ⊙ x + add` with constant coefficients.
    pub fn affine_const(&mut self, x: Var, mul: &[T], add: &[T]) -> Result<Var> {
        let n = self.nodes[x.0].data.len();
        if mul.len() != n || add.len() != n {
            return Err(Error::ShapeMismatch {
                op: "affine_const",
                left: self.nodes[x.0].shape.clone(),
                right: vec![mul.len(), add.len()],
            });
        }
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(mul.iter().zip(add))
            .map(|(&v, (&m, &a))| m * v + a)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::AffineConst { x, mul: mul.to_vec() }, rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].data.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    /// Weighted sum over the trailing two axes: `out[..] = Σ_{i,j} mask[.., i, j] · x[.., i, j]`.
    pub fn masked_sum(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 || mask.len() != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_sum",
                left: shape,
                right: vec![mask.len()],
            });
        }
        let plane = shape[shape.len() - 1] * shape[shape.len() - 2];
        let data = self.nodes[x.0]
            .data
            .chunks(plane)
            .zip(mask.chunks(plane))
            .map(|(xs, ms)| xs.iter().zip(ms).map(|(&a, &b)| a * b).sum())
            .collect();
        let out_shape = shape[..shape.len() - 2].to_vec();
        let rg = self.rg(&[x]);
        self.push(
            out_shape,
            data,
            Op::MaskedSum {
                x,
                mask: mask.to_vec(),
                plane,
            },
            rg,
        )
    }

    fn norm_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = &self.nodes[x.0].shape;
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                op: "affine_norm",
                msg: format!("expected a 4-D input, got {xs:?}"),
            });
        }
        let c = xs[1];
        for v in [gamma, beta] {
            if self.nodes[v.0].shape.as_slice() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "affine_norm",
                    left: xs.clone(),
                    right: self.nodes[v.0].shape.clone(),
                });
            }
        }
        Ok((xs[0], c, xs[2] * xs[3]))
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T, batch: bool) -> Result<Var> {
        let (n, c, spatial) = self.norm_check(x, gamma, beta)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            shape,
            out,
            Op::AffineNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c,
                spatial,
                batch,
            },
            rg,
        )
    }

    /// Per-channel normalization with statistics of the current batch.
    pub fn affine_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, spatial) = self.norm_check(x, gamma, beta)?;
        let xd = &self.nodes[x.0].data;
        let count = T::from_usize(n * spatial).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for smp in 0..n {
                let off = (smp * c + ch) * spatial;
                s += xd[off..off + spatial].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for smp in 0..n {
                let off = (smp * c + ch) * spatial;
                v += xd[off..off + spatial].iter().map(|&a| (a - m) * (a - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let out = self.norm_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Per-channel normalization with fixed (running) statistics.
    pub fn affine_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let c = self.nodes[x.0].shape.get(1).copied().unwrap_or(0);
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "affine_norm",
                left: self.nodes[x.0].shape.clone(),
                right: vec![mean.len(), var.len()],
            });
        }
        self.norm_apply(x, gamma, beta, mean, var, eps, false)
    }

    /// Binomial low-pass filter (reflect padding) followed by stride-2 subsampling.
    pub fn blur_downsample(&mut self, x: Var, taps: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                op: "blur_downsample",
                msg: format!("expected a 4-D input, got {xs:?}"),
            });
        }
        if kernels::binomial_row(taps).is_none() {
            return Err(Error::InvalidShape {
                op: "blur_downsample",
                msg: format!("unsupported tap count {taps} (allowed: 1, 2, 3, 5)"),
            });
        }
        let (h, w) = (xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                op: "blur_downsample",
                msg: format!("spatial extents must be even and nonzero, got {h}x{w}"),
            });
        }
        let planes = xs[0] * xs[1];
        let data = kernels::blur_forward(planes, h, w, taps, &self.nodes[x.0].data);
        let rg = self.rg(&[x]);
        self.push(
            vec![xs[0], xs[1], h / 2, w / 2],
            data,
            Op::BlurDownsample { x, planes, h, w, taps },
            rg,
        )
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamp(&mut self, x: Var, floor: T) -> Result<Var> {
        self.map(x, Op::LogClamp { x, floor }, |v| if v > floor { v.ln() } else { floor.ln() })
    }

    /// `logit(clamp(x, eps, 1 − eps))`.
    pub fn logit_clamp(&mut self, x: Var, eps: T) -> Result<Var> {
        let hi = T::one() - eps;
        self.map(x, Op::LogitClamp { x, eps }, |v| {
            let c = v.max(eps).min(hi);
            (c / (T::one() - c)).ln()
        })
    }

    /// `ln(1 − exp(min(x, ceil)))` for a negative `ceil`, evaluated stably;
    /// zero gradient where the ceiling is active.
    pub fn log1m_exp(&mut self, x: Var, ceil: T) -> Result<Var> {
        let ln2 = T::lit(std::f64::consts::LN_2);
        self.map(x, Op::Log1mExp { x, ceil }, |v| {
            let v = v.min(ceil);
            if v >= T::zero() {
                T::neg_infinity()
            } else if v > -ln2 {
                (-v.exp_m1()).ln()
            } else {
                (-v.exp()).ln_1p()
            }
        })
    }

    /// Pixel-adaptive pairwise message over a square window:
    /// `m[n,k,j] = Σ_{l∈Ω(j), l≠j} G(f_j, f_l) Σ_k' W[k,k',ξ_j−ξ_l] z[n,k',l]`
    /// with `G(a, b) = exp(−‖a − b‖² / (2·bandwidth²))`.
    ///
    /// `z`: (N, K, P, Q), `f`: (N, F, P, Q), `w`: (K, K, S, S) with odd S.
    pub fn pac_message(&mut self, z: Var, f: Var, w: Var, bandwidth: T) -> Result<Var> {
        let zs = self.nodes[z.0].shape.clone();
        let fs = self.nodes[f.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if zs.len() != 4 || fs.len() != 4 || zs[0] != fs[0] || zs[2..] != fs[2..] {
            return Err(Error::ShapeMismatch {
                op: "pac_message",
                left: zs,
                right: fs,
            });
        }
        if ws.len() != 4 || ws[0] != zs[1] || ws[1] != zs[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::ShapeMismatch {
                op: "pac_message",
                left: zs,
                right: ws,
            });
        }
        let dims = PacDims {
            n: zs[0],
            k: zs[1],
            f: fs[1],
            rows: zs[2],
            cols: zs[3],
            window: ws[2],
        };
        let data = kernels::pac_forward(
            &dims,
            &self.nodes[z.0].data,
            &self.nodes[f.0].data,
            &self.nodes[w.0].data,
            bandwidth,
        );
        let rg = self.rg(&[z, f, w]);
        self.push(zs, data, Op::PacMessage { z, f, w, dims, bandwidth }, rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        self.accumulate_into(&grads, params);
        Ok(grads)
    }

    pub fn accumulate_into(&self, grads: &Gradients<T>, params: &mut ParamSet<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let (Some(g), Some(dst)) = (grads.grads[i].as_ref(), params.get_mut(id).grad_mut()) {
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].data.len();
        let val = |v: Var| self.nodes[v.0].data.as_slice();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, b, dims } => {
                let mut gx = self.needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); len(*x)]));
                let mut gw = self.needs(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); len(*w)]));
                let mut gb = b
                    .filter(|b| self.needs(*b))
                    .map(|b| grads[b.0].take().unwrap_or_else(|| vec![T::zero(); len(b)]));
                kernels::conv2d_backward(
                    dims,
                    val(*x),
                    val(*w),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    grads[x.0] = Some(gx);
                }
                if let Some(gw) = gw {
                    grads[w.0] = Some(gw);
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    grads[b.0] = Some(gb);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                accumulate(grads, len(*x), *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.data;
                accumulate(grads, len(*x), *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.needs(*a) {
                    accumulate(grads, len(*a), *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                }
                if self.needs(*b) {
                    accumulate(grads, len(*b), *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g));
                }
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    let bv = val(*b);
                    accumulate(grads, len(*a), *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                }
                if self.needs(*b) {
                    let av = val(*a);
                    accumulate(grads, len(*b), *b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, len(*x), *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += *c * g));
            }
            Op::AffineConst { x, mul } => {
                accumulate(grads, len(*x), *x, |d| {
                    for i in 0..d.len() {
                        d[i] += mul[i] * g[i];
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                accumulate(grads, len(*x), *x, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::MaskedSum { x, mask, plane } => {
                accumulate(grads, len(*x), *x, |d| {
                    for (p, (dp, mp)) in d.chunks_mut(*plane).zip(mask.chunks(*plane)).enumerate() {
                        for (dv, &m) in dp.iter_mut().zip(mp) {
                            *dv += g[p] * m;
                        }
                    }
                });
            }
            Op::AffineNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                spatial,
                batch,
            } => {
                let c = *channels;
                let sp = *spatial;
                let n = xhat.len() / (c * sp);
                let gv = val(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * sp;
                        for i in off..off + sp {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    accumulate(grads, c, *gamma, |d| d.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += v));
                }
                if self.needs(*beta) {
                    accumulate(grads, c, *beta, |d| d.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += v));
                }
                if self.needs(*x) {
                    let m = T::from_usize(n * sp).unwrap();
                    accumulate(grads, len(*x), *x, |d| {
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * sp;
                                let k = gv[ch] * inv_std[ch];
                                for i in off..off + sp {
                                    d[i] += if *batch {
                                        k * (g[i] - (sum_dy[ch] + xhat[i] * sum_dy_xhat[ch]) / m)
                                    } else {
                                        k * g[i]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            Op::BlurDownsample { x, planes, h, w, taps } => {
                accumulate(grads, len(*x), *x, |d| kernels::blur_backward(*planes, *h, *w, *taps, g, d));
            }
            Op::LogClamp { x, floor } => {
                let xv = val(*x);
                accumulate(grads, len(*x), *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] > *floor {
                            d[i] += g[i] / xv[i];
                        }
                    }
                });
            }
            Op::LogitClamp { x, eps } => {
                let xv = val(*x);
                let hi = T::one() - *eps;
                accumulate(grads, len(*x), *x, |d| {
                    for i in 0..d.len() {
                        let v = xv[i];
                        if v > *eps && v < hi {
                            d[i] += g[i] / (v * (T::one() - v));
                        }
                    }
                });
            }
            Op::Log1mExp { x, ceil } => {
                let xv = val(*x);
                accumulate(grads, len(*x), *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] < *ceil {
                            d[i] -= g[i] / (-xv[i]).exp_m1();
                        }
                    }
                });
            }
            Op::PacMessage { z, f, w, dims, bandwidth } => {
                let mut gz = self.needs(*z).then(|| grads[z.0].take().unwrap_or_else(|| vec![T::zero(); len(*z)]));
                let mut gf = self.needs(*f).then(|| grads[f.0].take().unwrap_or_else(|| vec![T::zero(); len(*f)]));
                let mut gw = self.needs(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); len(*w)]));
                kernels::pac_backward(
                    dims,
                    val(*z),
                    val(*f),
                    val(*w),
                    *bandwidth,
                    g,
                    gz.as_deref_mut(),
                    gf.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(v) = gz {
                    grads[z.0] = Some(v);
                }
                if let Some(v) = gf {
                    grads[f.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
            }
        }
    }
}
