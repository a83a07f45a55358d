//! Raw numeric kernels behind the tape ops: im2col convolution lowered onto
//! GEMM, batch-norm statistics, nearest-neighbor resampling, top-k selection,
//! and row softmax.
//!
//! Determinism contract: given identical inputs, every kernel produces
//! bit-identical outputs for any rayon thread count. Parallel loops only
//! write disjoint per-sample regions or reduce in a fixed chunk order; no
//! result depends on scheduling.

use crate::error::{Error, Result};
use crate::diffcore::tensor::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

/// Samples per partial gradient buffer when reducing conv weight gradients.
/// Fixed so the reduction tree does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

fn view2<F: Scalar>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), data).expect("kernel view shape")
}

fn view2_mut<F: Scalar>(data: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("kernel view shape")
}

/// c[m,n] = a[m,k] * b[k,n] (+ c if `accumulate`).
pub fn mm<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { F::one() } else { F::zero() };
    general_mat_mul(
        F::one(),
        &view2(a, m, k),
        &view2(b, k, n),
        beta,
        &mut view2_mut(c, m, n),
    );
}

/// c[m,n] = a^T * b where a is stored [k,m] (+ c if `accumulate`).
pub fn mm_tn<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { F::one() } else { F::zero() };
    let at = view2(a, k, m);
    general_mat_mul(
        F::one(),
        &at.t(),
        &view2(b, k, n),
        beta,
        &mut view2_mut(c, m, n),
    );
}

/// c[m,n] = a * b^T where b is stored [n,k] (+ c if `accumulate`).
pub fn mm_nt<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { F::one() } else { F::zero() };
    let bt = view2(b, n, k);
    general_mat_mul(
        F::one(),
        &view2(a, m, k),
        &bt.t(),
        beta,
        &mut view2_mut(c, m, n),
    );
}

/// What out-of-bounds taps read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-bounds taps read zero.
    #[default]
    Zero,
    /// Out-of-bounds taps read the nearest edge pixel. Keeps border
    /// statistics close to the interior; with zero padding the rim cells
    /// are so distinctive that a head free to keep only k cells learns to
    /// key on them instead of the image content.
    Replicate,
}

/// Convolution geometry shared by forward and backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Constraint("conv stride must be >= 1".into()));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::Constraint("conv kernel dims must be >= 1".into()));
        }
        let eff_h = in_h + 2 * pad;
        let eff_w = in_w + 2 * pad;
        if eff_h < kh || eff_w < kw {
            return Err(Error::Constraint(format!(
                "conv kernel {kh}x{kw} larger than padded input {eff_h}x{eff_w}"
            )));
        }
        let out_h = (eff_h - kh) / stride + 1;
        let out_w = (eff_w - kw) / stride + 1;
        Ok(ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            pad_mode: PadMode::Zero,
            out_h,
            out_w,
        })
    }

    pub fn with_pad_mode(mut self, pad_mode: PadMode) -> Self {
        self.pad_mode = pad_mode;
        self
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    /// The 1x1/stride-1/no-pad case degenerates to plain GEMM over the
    /// input laid out as [C, H*W]; no patch matrix is needed.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample [C,H,W] into the patch matrix [C*kh*kw, out_h*out_w].
/// Every entry is written, including padding taps.
pub fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let l = g.out_spatial();
    debug_assert_eq!(cols.len(), g.patch_len() * l);
    debug_assert_eq!(x.len(), g.in_c * g.in_h * g.in_w);
    let (h, w, ow) = (g.in_h as isize, g.in_w as isize, g.out_w);
    let replicate = g.pad_mode == PadMode::Replicate;
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                let kj_off = kj as isize - g.pad as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = row + oy * ow;
                    if (iy < 0 || iy >= h) && !replicate {
                        cols[dst..dst + ow].fill(F::zero());
                        continue;
                    }
                    let src_row = (c * g.in_h + iy.clamp(0, h - 1) as usize) * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride) as isize + kj_off;
                        cols[dst + ox] = if ix < 0 || ix >= w {
                            if replicate {
                                x[src_row + ix.clamp(0, w - 1) as usize]
                            } else {
                                F::zero()
                            }
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds patch-matrix gradients back onto
/// the input gradient of one sample. Replicated taps accumulate into the
/// edge pixel they read from, which is the exact adjoint of the clamp.
pub fn col2im_add<F: Scalar>(dcols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let l = g.out_spatial();
    debug_assert_eq!(dcols.len(), g.patch_len() * l);
    debug_assert_eq!(dx.len(), g.in_c * g.in_h * g.in_w);
    let (h, w, ow) = (g.in_h as isize, g.in_w as isize, g.out_w);
    let replicate = g.pad_mode == PadMode::Replicate;
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                let kj_off = kj as isize - g.pad as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if (iy < 0 || iy >= h) && !replicate {
                        continue;
                    }
                    let dst_row = (c * g.in_h + iy.clamp(0, h - 1) as usize) * g.in_w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * g.stride) as isize + kj_off;
                        if ix >= 0 && ix < w {
                            dx[dst_row + ix as usize] += dcols[src + ox];
                        } else if replicate {
                            dx[dst_row + ix.clamp(0, w - 1) as usize] += dcols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. x is [N,C,H,W] flattened, w is
/// [F,C,kh,kw] flattened, bias has one entry per output channel.
/// Output is [N,F,out_h,out_w] flattened. Parallel over samples.
pub fn conv2d_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    n: usize,
    g: &ConvGeom,
) -> Vec<F> {
    let l = g.out_spatial();
    let ckk = g.patch_len();
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * l;
    let mut out = vec![F::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each_init(
            || vec![F::zero(); if g.is_pointwise() { 0 } else { ckk * l }],
            |cols, (i, out_n)| {
                let x_n = &x[i * in_len..(i + 1) * in_len];
                if g.is_pointwise() {
                    mm(w, x_n, out_n, g.out_c, ckk, l, false);
                } else {
                    im2col(x_n, g, cols);
                    mm(w, cols, out_n, g.out_c, ckk, l, false);
                }
                if let Some(b) = bias {
                    for (f, row) in out_n.chunks_mut(l).enumerate() {
                        let bf = b[f];
                        for v in row {
                            *v += bf;
                        }
                    }
                }
            },
        );
    out
}

/// Gradients of the batched convolution. Recomputes im2col rather than
/// caching it; memory stays flat and results are unchanged.
/// Any of the three outputs can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dout: &[F],
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let l = g.out_spatial();
    let ckk = g.patch_len();
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * l;

    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); n * in_len];
        dx.par_chunks_mut(in_len)
            .enumerate()
            .for_each_init(
                || vec![F::zero(); ckk * l],
                |dcols, (i, dx_n)| {
                    let dout_n = &dout[i * out_len..(i + 1) * out_len];
                    if g.is_pointwise() {
                        mm_tn(w, dout_n, dx_n, ckk, g.out_c, l, false);
                    } else {
                        mm_tn(w, dout_n, dcols, ckk, g.out_c, l, false);
                        col2im_add(dcols, g, dx_n);
                    }
                },
            );
        dx
    });

    let dw = need_dw.then(|| {
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(GRAD_CHUNK)
            .map(|s| (s, (s + GRAD_CHUNK).min(n)))
            .collect();
        let partials: Vec<Vec<F>> = chunks
            .par_iter()
            .map(|&(lo, hi)| {
                let mut acc = vec![F::zero(); g.out_c * ckk];
                let mut cols = vec![F::zero(); ckk * l];
                for i in lo..hi {
                    let x_n = &x[i * in_len..(i + 1) * in_len];
                    let dout_n = &dout[i * out_len..(i + 1) * out_len];
                    if g.is_pointwise() {
                        mm_nt(dout_n, x_n, &mut acc, g.out_c, l, ckk, true);
                    } else {
                        im2col(x_n, g, &mut cols);
                        mm_nt(dout_n, &cols, &mut acc, g.out_c, l, ckk, true);
                    }
                }
                acc
            })
            .collect();
        // Serial reduction in chunk order keeps the sum bit-stable.
        let mut dw = vec![F::zero(); g.out_c * ckk];
        for p in &partials {
            for (d, s) in dw.iter_mut().zip(p) {
                *d += *s;
            }
        }
        dw
    });

    let db = need_db.then(|| {
        let mut db = vec![F::zero(); g.out_c];
        for i in 0..n {
            let dout_n = &dout[i * out_len..(i + 1) * out_len];
            for (f, row) in dout_n.chunks(l).enumerate() {
                let mut s = F::zero();
                for v in row {
                    s += *v;
                }
                db[f] += s;
            }
        }
        db
    });

    (dx, dw, db)
}

/// Per-channel mean, biased variance, and 1/sqrt(var+eps) over N*H*W.
/// Two-pass for stability; serial fixed-order accumulation.
pub fn bn_stats<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    spatial: usize,
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let m = n * spatial;
    let mf = F::from_usize(m).expect("bn count fits scalar");
    let mut mean = vec![F::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let mut s = F::zero();
            for v in &x[base..base + spatial] {
                s += *v;
            }
            mean[ch] += s;
        }
    }
    for v in &mut mean {
        *v = *v / mf;
    }
    let mut var = vec![F::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let mu = mean[ch];
            let mut s = F::zero();
            for v in &x[base..base + spatial] {
                let d = *v - mu;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for v in &mut var {
        *v = *v / mf;
    }
    let inv_std = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    (mean, var, inv_std)
}

/// y = (x - mean) * inv_std * gamma + beta, per channel.
pub fn bn_apply<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    spatial: usize,
    mean: &[F],
    inv_std: &[F],
    gamma: &[F],
    beta: &[F],
) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let scale = inv_std[ch] * gamma[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for j in base..base + spatial {
                y[j] = x[j] * scale + shift;
            }
        }
    }
    y
}

/// Backward through train-mode batch norm, where mean/var are functions of x.
/// Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn bn_train_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    n: usize,
    c: usize,
    spatial: usize,
    mean: &[F],
    inv_std: &[F],
    gamma: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let m = n * spatial;
    let mf = F::from_usize(m).expect("bn count fits scalar");
    let mut sum_dy = vec![F::zero(); c];
    let mut sum_dy_xhat = vec![F::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            for j in base..base + spatial {
                let xhat = (x[j] - mu) * is;
                s1 += dy[j];
                s2 += dy[j] * xhat;
            }
            sum_dy[ch] += s1;
            sum_dy_xhat[ch] += s2;
        }
    }
    let mut dx = vec![F::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let (mu, is, ga) = (mean[ch], inv_std[ch], gamma[ch]);
            let k = ga * is / mf;
            for j in base..base + spatial {
                let xhat = (x[j] - mu) * is;
                dx[j] = k * (mf * dy[j] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
            }
        }
    }
    (dx, sum_dy_xhat, sum_dy)
}

/// Backward through eval-mode batch norm, where the stats are constants.
pub fn bn_eval_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    n: usize,
    c: usize,
    spatial: usize,
    mean: &[F],
    inv_std: &[F],
    gamma: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = vec![F::zero(); x.len()];
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let (mu, is, ga) = (mean[ch], inv_std[ch], gamma[ch]);
            let scale = ga * is;
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            for j in base..base + spatial {
                dx[j] = dy[j] * scale;
                s1 += dy[j];
                s2 += dy[j] * (x[j] - mu) * is;
            }
            dbeta[ch] += s1;
            dgamma[ch] += s2;
        }
    }
    (dx, dgamma, dbeta)
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<F> {
    let (oh, ow) = (h * factor, w * factor);
    let mut y = vec![F::zero(); n * c * oh * ow];
    for img in 0..n * c {
        let src = img * h * w;
        let dst = img * oh * ow;
        for yy in 0..oh {
            let sy = src + (yy / factor) * w;
            let dy = dst + yy * ow;
            for xx in 0..ow {
                y[dy + xx] = x[sy + xx / factor];
            }
        }
    }
    y
}

/// Adjoint of nearest upsampling: each input cell receives the sum of its
/// factor*factor output block.
pub fn upsample_nearest_backward<F: Scalar>(
    dy: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<F> {
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![F::zero(); n * c * h * w];
    for img in 0..n * c {
        let src = img * oh * ow;
        let dst = img * h * w;
        for yy in 0..oh {
            let sy = src + yy * ow;
            let dyr = dst + (yy / factor) * w;
            for xx in 0..ow {
                dx[dyr + xx / factor] += dy[sy + xx];
            }
        }
    }
    dx
}

/// Indices of the k largest entries, ordered by descending value with ties
/// broken toward the lower flat index. Values must be finite.
pub fn topk_indices<F: Scalar>(row: &[F], k: usize) -> Vec<u32> {
    debug_assert!(k >= 1 && k <= row.len());
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    idx.sort_unstable_by(|&a, &b| {
        row[b as usize]
            .partial_cmp(&row[a as usize])
            .expect("finite values in topk")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Row-wise softmax with max subtraction. Returns probabilities.
pub fn softmax_rows<F: Scalar>(logits: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut probs = vec![F::zero(); logits.len()];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = F::zero();
        let out = &mut probs[r * cols..(r + 1) * cols];
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            denom += e;
        }
        for o in out.iter_mut() {
            *o = *o / denom;
        }
    }
    probs
}

/// sign with sign(0) = 0, used by the attack step and the l1 subgradient.
pub fn sign_zero<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}
