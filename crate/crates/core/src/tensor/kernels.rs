//! Raw forward/backward kernels over flat row-major buffers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    /// Output index range along one axis for kernel tap `k`, plus the input offset.
    #[inline]
    fn span(&self, k: usize, input: usize, output: usize) -> (usize, usize, isize) {
        let shift = k as isize - self.pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((input as isize - shift).min(output as isize)).max(0) as usize;
        (lo, hi.max(lo), shift)
    }
}

/// Stride-1 convolution of (N, C, H, W) by (O, C, KH, KW) weights via im2col and GEMM.
pub(crate) fn conv2d_forward<T: Scalar>(d: &ConvDims, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let (ck, p) = (d.c * d.kh * d.kw, oh * ow);
    let mut out = vec![T::zero(); d.n * d.o * p];
    let mut col = vec![T::zero(); ck * p];
    for n in 0..d.n {
        im2col(d, &x[n * d.c * d.h * d.w..][..d.c * d.h * d.w], &mut col);
        let plane = &mut out[n * d.o * p..][..d.o * p];
        if let Some(b) = bias {
            for (o, row) in plane.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        T::gemm(d.o, ck, p, (wt, ck, 1), (&col, p, 1), T::one(), (plane, p, 1));
    }
    out
}

/// Unfolds one image (C, H, W) into columns (C·KH·KW, OH·OW), zero-padded.
fn im2col<T: Scalar>(d: &ConvDims, x: &[T], col: &mut [T]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let p = oh * ow;
    col.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..d.c {
        let xin = &x[c * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            let (ylo, yhi, ys) = d.span(ky, d.h, oh);
            for kx in 0..d.kw {
                let (xlo, xhi, xs) = d.span(kx, d.w, ow);
                let row = &mut col[((c * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = (oy as isize + ys) as usize;
                    let src = &xin[iy * d.w + (xlo as isize + xs) as usize..][..xhi - xlo];
                    row[oy * ow + xlo..oy * ow + xhi].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adds columns (C·KH·KW, OH·OW) back onto one image gradient (C, H, W).
fn col2im<T: Scalar>(d: &ConvDims, col: &[T], gx: &mut [T]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let p = oh * ow;
    for c in 0..d.c {
        let g = &mut gx[c * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            let (ylo, yhi, ys) = d.span(ky, d.h, oh);
            for kx in 0..d.kw {
                let (xlo, xhi, xs) = d.span(kx, d.w, ow);
                let row = &col[((c * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = (oy as isize + ys) as usize;
                    let dst = &mut g[iy * d.w + (xlo as isize + xs) as usize..][..xhi - xlo];
                    for (a, &b) in dst.iter_mut().zip(&row[oy * ow + xlo..oy * ow + xhi]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of a stride-1 convolution.
pub(crate) fn conv2d_backward<T: Scalar>(
    d: &ConvDims,
    x: &[T],
    wt: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let (ck, p) = (d.c * d.kh * d.kw, oh * ow);
    if let Some(gb) = gb {
        for n in 0..d.n {
            for o in 0..d.o {
                let plane = &gout[(n * d.o + o) * p..][..p];
                gb[o] += plane.iter().copied().sum::<T>();
            }
        }
    }
    let mut col = vec![T::zero(); ck * p];
    let image = d.c * d.h * d.w;
    for n in 0..d.n {
        let g = &gout[n * d.o * p..][..d.o * p];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(d, &x[n * image..][..image], &mut col);
            // gW (O×CK) += gout (O×P) · colᵀ (P×CK)
            T::gemm(d.o, p, ck, (g, p, 1), (&col, 1, p), T::one(), (gw, ck, 1));
        }
        if let Some(gx) = gx.as_deref_mut() {
            // gcol (CK×P) = Wᵀ (CK×O) · gout (O×P)
            T::gemm(ck, d.o, p, (wt, 1, ck), (g, p, 1), T::zero(), (&mut col, p, 1));
            col2im(d, &col, &mut gx[n * image..][..image]);
        }
    }
}

/// Normalized binomial filter row for a supported tap count.
pub(crate) fn binomial_row(taps: usize) -> Option<&'static [f64]> {
    match taps {
        1 => Some(&[1.0]),
        2 => Some(&[0.5, 0.5]),
        3 => Some(&[0.25, 0.5, 0.25]),
        5 => Some(&[0.0625, 0.25, 0.375, 0.25, 0.0625]),
        _ => None,
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// For every output sample of a stride-2 blur along an axis of length `n`,
/// the contributing (input index, weight) pairs.
pub(crate) fn blur_taps_1d<T: Scalar>(taps: usize, n: usize) -> Vec<Vec<(usize, T)>> {
    let row = binomial_row(taps).expect("validated tap count");
    let first = if taps == 2 { 0 } else { -((taps / 2) as isize) };
    (0..n / 2)
        .map(|o| {
            let centre = 2 * o as isize;
            let mut taps_out: Vec<(usize, T)> = Vec::with_capacity(row.len());
            for (t, &wv) in row.iter().enumerate() {
                let idx = reflect(centre + first + t as isize, n);
                match taps_out.iter_mut().find(|(i, _)| *i == idx) {
                    Some(entry) => entry.1 += T::lit(wv),
                    None => taps_out.push((idx, T::lit(wv))),
                }
            }
            taps_out
        })
        .collect()
}

pub(crate) fn blur_forward<T: Scalar>(planes: usize, h: usize, w: usize, taps: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let ty = blur_taps_1d::<T>(taps, h);
    let tx = blur_taps_1d::<T>(taps, w);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let xin = &x[p * h * w..][..h * w];
        for r in 0..h {
            for (oc, list) in tx.iter().enumerate() {
                tmp[r * ow + oc] = list.iter().map(|&(i, wv)| wv * xin[r * w + i]).sum();
            }
        }
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (or, list) in ty.iter().enumerate() {
            for oc in 0..ow {
                dst[or * ow + oc] = list.iter().map(|&(i, wv)| wv * tmp[i * ow + oc]).sum();
            }
        }
    }
    out
}

pub(crate) fn blur_backward<T: Scalar>(planes: usize, h: usize, w: usize, taps: usize, gout: &[T], gx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let ty = blur_taps_1d::<T>(taps, h);
    let tx = blur_taps_1d::<T>(taps, w);
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        let g = &gout[p * oh * ow..][..oh * ow];
        for (or, list) in ty.iter().enumerate() {
            for oc in 0..ow {
                let gv = g[or * ow + oc];
                for &(i, wv) in list {
                    tmp[i * ow + oc] += wv * gv;
                }
            }
        }
        let dst = &mut gx[p * h * w..][..h * w];
        for r in 0..h {
            for (oc, list) in tx.iter().enumerate() {
                let gv = tmp[r * ow + oc];
                for &(i, wv) in list {
                    dst[r * w + i] += wv * gv;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PacDims {
    pub n: usize,
    pub k: usize,
    pub f: usize,
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
}

impl PacDims {
    /// Visits every in-grid neighbour pair (j, l) with l ≠ j inside the window.
    /// Arguments: row/col of j, row/col of l, window index of the offset ξ_j − ξ_l.
    #[inline]
    fn for_each_pair(&self, mut visit: impl FnMut(usize, usize, usize, usize, usize)) {
        let h = (self.window / 2) as isize;
        for r in 0..self.rows {
            for c in 0..self.cols {
                for dr in -h..=h {
                    let lr = r as isize + dr;
                    if lr < 0 || lr >= self.rows as isize {
                        continue;
                    }
                    for dc in -h..=h {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let lc = c as isize + dc;
                        if lc < 0 || lc >= self.cols as isize {
                            continue;
                        }
                        // W is indexed by the offset ξ_j − ξ_l = −(dr, dc).
                        let widx = ((h - dr) as usize) * self.window + (h - dc) as usize;
                        visit(r, c, lr as usize, lc as usize, widx);
                    }
                }
            }
        }
    }

    #[inline]
    fn affinity<T: Scalar>(&self, feat: &[T], n: usize, j: usize, l: usize, inv_two_bw2: T) -> T {
        let plane = self.rows * self.cols;
        let mut d2 = T::zero();
        for q in 0..self.f {
            let base = (n * self.f + q) * plane;
            let diff = feat[base + j] - feat[base + l];
            d2 += diff * diff;
        }
        (-d2 * inv_two_bw2).exp()
    }
}

pub(crate) fn pac_forward<T: Scalar>(d: &PacDims, z: &[T], feat: &[T], wt: &[T], bandwidth: T) -> Vec<T> {
    let plane = d.rows * d.cols;
    let ww = d.window * d.window;
    let inv = T::one() / (T::lit(2.0) * bandwidth * bandwidth);
    let mut out = vec![T::zero(); d.n * d.k * plane];
    for n in 0..d.n {
        d.for_each_pair(|r, c, lr, lc, widx| {
            let j = r * d.cols + c;
            let l = lr * d.cols + lc;
            let g = d.affinity(feat, n, j, l, inv);
            for k in 0..d.k {
                let mut acc = T::zero();
                for kp in 0..d.k {
                    acc += wt[(k * d.k + kp) * ww + widx] * z[(n * d.k + kp) * plane + l];
                }
                out[(n * d.k + k) * plane + j] += g * acc;
            }
        });
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pac_backward<T: Scalar>(
    d: &PacDims,
    z: &[T],
    feat: &[T],
    wt: &[T],
    bandwidth: T,
    gout: &[T],
    mut gz: Option<&mut [T]>,
    mut gf: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let plane = d.rows * d.cols;
    let ww = d.window * d.window;
    let inv = T::one() / (T::lit(2.0) * bandwidth * bandwidth);
    let inv_bw2 = T::one() / (bandwidth * bandwidth);
    for n in 0..d.n {
        d.for_each_pair(|r, c, lr, lc, widx| {
            let j = r * d.cols + c;
            let l = lr * d.cols + lc;
            let g = d.affinity(feat, n, j, l, inv);
            let mut dg = T::zero();
            for k in 0..d.k {
                let go = gout[(n * d.k + k) * plane + j];
                if go == T::zero() {
                    continue;
                }
                for kp in 0..d.k {
                    let wi = (k * d.k + kp) * ww + widx;
                    let zv = z[(n * d.k + kp) * plane + l];
                    dg += go * wt[wi] * zv;
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[wi] += go * g * zv;
                    }
                    if let Some(gz) = gz.as_deref_mut() {
                        gz[(n * d.k + kp) * plane + l] += go * g * wt[wi];
                    }
                }
            }
            if let Some(gf) = gf.as_deref_mut() {
                // dG/df_j = −G (f_j − f_l) / bw², and the opposite for f_l.
                let scale = dg * g * inv_bw2;
                for q in 0..d.f {
                    let base = (n * d.f + q) * plane;
                    let diff = feat[base + j] - feat[base + l];
                    gf[base + j] -= scale * diff;
                    gf[base + l] += scale * diff;
                }
            }
        });
    }
}
