//! Numeric kernels behind the tape primitives.
//!
//! Every reduction runs in a fixed order so results do not depend on the
//! number of worker threads: batch items are processed independently and
//! per-item partial sums are combined in batch order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub(crate) const KERNEL: usize = 3;
pub(crate) const TAPS: usize = KERNEL * KERNEL;

/// Unrolls one batch item into a `[cin * 9, h * w]` column matrix.
///
/// Row `k = ci * 9 + ky * 3 + kx` holds the input shifted by
/// `((ky - 1) * dilation, (kx - 1) * dilation)`; taps outside the image are zero.
fn im2col<T: Real>(sample: &[T], cin: usize, h: usize, w: usize, dilation: usize, col: &mut [T]) {
    let hw = h * w;
    let d = dilation as isize;
    for ci in 0..cin {
        let plane = &sample[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            let dy = (ky as isize - 1) * d;
            for kx in 0..KERNEL {
                let dx = (kx as isize - 1) * d;
                let row = &mut col[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                let (x0, x1) = valid_range(w, dx);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    dst[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Scatters a column-gradient matrix back onto the input plane (adjoint of `im2col`).
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, dilation: usize, out: &mut [T]) {
    let hw = h * w;
    let d = dilation as isize;
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            let dy = (ky as isize - 1) * d;
            for kx in 0..KERNEL {
                let dx = (kx as isize - 1) * d;
                let row = &col[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    for (o, &g) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *o += g;
                    }
                }
            }
        }
    }
}

/// Output columns `[x0, x1)` whose tap at offset `dx` lands inside `[0, w)`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    (x0.min(w), x1)
}

/// `c[i, :] += sum_p a[i, p] * b[p, :]`, with `p` accumulated in ascending
/// order for every output element.
fn gemm_acc<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (blk, cblk) in c.chunks_mut(4 * n).enumerate() {
        let i0 = blk * 4;
        if cblk.len() == 4 * n {
            let (r0, rest) = cblk.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let w0 = a[i0 * k + p];
                let w1 = a[(i0 + 1) * k + p];
                let w2 = a[(i0 + 2) * k + p];
                let w3 = a[(i0 + 3) * k + p];
                for j in 0..n {
                    let x = brow[j];
                    r0[j] += w0 * x;
                    r1[j] += w1 * x;
                    r2[j] += w2 * x;
                    r3[j] += w3 * x;
                }
            }
        } else {
            for (r, row) in cblk.chunks_mut(n).enumerate() {
                let i = i0 + r;
                for p in 0..k {
                    let wv = a[i * k + p];
                    for (o, &x) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *o += wv * x;
                    }
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let rest = ca.remainder();
    for x in ca {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for &x in rest {
        s += x;
    }
    s
}

pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
}

pub(crate) fn check_conv(input: Shape, weight: Shape, bias: Shape) -> Result<ConvDims> {
    if weight.height != KERNEL {
        return Err(Error::shape("conv2d", "kernel height", KERNEL, weight.height));
    }
    if weight.width != KERNEL {
        return Err(Error::shape("conv2d", "kernel width", KERNEL, weight.width));
    }
    if input.channels != weight.channels {
        return Err(Error::shape(
            "conv2d",
            "input channels",
            weight.channels,
            input.channels,
        ));
    }
    if bias.numel() != weight.batch {
        return Err(Error::shape("conv2d", "bias length", weight.batch, bias.numel()));
    }
    Ok(ConvDims {
        cin: weight.channels,
        cout: weight.batch,
    })
}

/// Zero-padded 3x3 convolution with `padding == dilation`, so the output keeps
/// the input's spatial size.
pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let ConvDims { cin, cout } = check_conv(s, weight.shape(), bias.shape())?;
    let hw = s.plane();
    let k = cin * TAPS;
    let out_shape = s.with_channels(cout)?;
    let mut out = vec![T::zero(); out_shape.numel()];
    let wdata = weight.data();
    let bdata = bias.data();
    out.par_chunks_mut(cout * hw)
        .zip(input.data().par_chunks(s.sample()))
        .for_each_init(
            || vec![T::zero(); k * hw],
            |col, (out_b, in_b)| {
                im2col(in_b, cin, s.height, s.width, dilation, col);
                for (row, &b) in out_b.chunks_mut(hw).zip(bdata) {
                    row.fill(b);
                }
                gemm_acc(wdata, cout, k, col, hw, out_b);
            },
        );
    Tensor::from_vec(out_shape, out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    dilation: usize,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let cin = ws.channels;
    let cout = ws.batch;
    let hw = s.plane();
    let k = cin * TAPS;

    // W^T laid out as [k, cout] for the input-gradient product.
    let wdata = weight.data();
    let mut wt = vec![T::zero(); k * cout];
    for o in 0..cout {
        for p in 0..k {
            wt[p * cout + o] = wdata[o * k + p];
        }
    }

    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(s.sample())
        .zip(grad_out.data().par_chunks(cout * hw))
        .map(|(in_b, g_b)| {
            let mut col = vec![T::zero(); k * hw];
            im2col(in_b, cin, s.height, s.width, dilation, &mut col);
            let mut dw = vec![T::zero(); cout * k];
            let mut db = vec![T::zero(); cout];
            for o in 0..cout {
                let g_row = &g_b[o * hw..(o + 1) * hw];
                db[o] = sum(g_row);
                for p in 0..k {
                    dw[o * k + p] = dot(g_row, &col[p * hw..(p + 1) * hw]);
                }
            }
            let dx = if want_input {
                let mut dcol = col;
                dcol.fill(T::zero());
                gemm_acc(&wt, k, cout, g_b, hw, &mut dcol);
                let mut dx = vec![T::zero(); s.sample()];
                col2im(&dcol, cin, s.height, s.width, dilation, &mut dx);
                dx
            } else {
                Vec::new()
            };
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); cout * k];
    let mut db = vec![T::zero(); cout];
    let mut dx = Vec::with_capacity(if want_input { s.numel() } else { 0 });
    for (pw, pb, px) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
        dx.extend(px);
    }
    Ok(ConvGrads {
        input: if want_input {
            Some(Tensor::from_vec(s, dx)?)
        } else {
            None
        },
        weight: Tensor::from_vec(ws, dw)?,
        bias: Tensor::from_vec(Shape::vector(cout)?, db)?,
    })
}

/// Visits every value of channel `c`, batch item by batch item.
fn channel_slices<T: Real>(data: &[T], shape: Shape, c: usize) -> impl Iterator<Item = &[T]> {
    let hw = shape.plane();
    (0..shape.batch).map(move |b| &data[(b * shape.channels + c) * hw..][..hw])
}

pub(crate) struct BatchStats<T> {
    pub normalized: Vec<T>,
    pub output: Tensor<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<T>,
}

/// Batch-statistics normalisation followed by the per-channel affine map.
pub(crate) fn batchnorm_train_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<BatchStats<T>> {
    let s = input.shape();
    let n = s.batch * s.plane();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let hw = s.plane();
    let x = input.data();
    let mut normalized = vec![T::zero(); s.numel()];
    let mut output = vec![T::zero(); s.numel()];
    let mut means = Vec::with_capacity(s.channels);
    let mut vars = Vec::with_capacity(s.channels);
    let mut inv_stds = Vec::with_capacity(s.channels);
    for c in 0..s.channels {
        let total: f64 = channel_slices(x, s, c)
            .map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>())
            .sum();
        let mean = total / n as f64;
        let sq: f64 = channel_slices(x, s, c)
            .map(|p| {
                p.iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
            })
            .sum();
        let var = sq / n as f64;
        let inv_std = T::of(1.0 / (var + eps).sqrt());
        let mean_t = T::of(mean);
        for b in 0..s.batch {
            let off = (b * s.channels + c) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean_t) * inv_std;
                normalized[i] = xh;
                output[i] = gamma[c] * xh + beta[c];
            }
        }
        means.push(mean);
        vars.push(var);
        inv_stds.push(inv_std);
    }
    Ok(BatchStats {
        normalized,
        output: Tensor::from_vec(s, output)?,
        mean: means,
        var: vars,
        inv_std: inv_stds,
    })
}

pub(crate) struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub(crate) fn batchnorm_train_backward<T: Real>(
    grad_out: &Tensor<T>,
    normalized: &[T],
    gamma: &[T],
    inv_std: &[T],
) -> Result<NormGrads<T>> {
    let s = grad_out.shape();
    let hw = s.plane();
    let n = s.batch * hw;
    let g = grad_out.data();
    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![T::zero(); s.channels];
    let mut dbeta = vec![T::zero(); s.channels];
    for c in 0..s.channels {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..s.batch {
            let off = (b * s.channels + c) * hw;
            for i in off..off + hw {
                sum_dy += g[i].as_f64();
                sum_dy_xh += (g[i] * normalized[i]).as_f64();
            }
        }
        dgamma[c] = T::of(sum_dy_xh);
        dbeta[c] = T::of(sum_dy);
        let scale = gamma[c] * inv_std[c] / T::of(n as f64);
        let nn = T::of(n as f64);
        let sdy = T::of(sum_dy);
        let sdyx = T::of(sum_dy_xh);
        for b in 0..s.batch {
            let off = (b * s.channels + c) * hw;
            for i in off..off + hw {
                dx[i] = scale * (nn * g[i] - sdy - normalized[i] * sdyx);
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::from_vec(s, dx)?,
        gamma: Tensor::from_vec(Shape::vector(s.channels)?, dgamma)?,
        beta: Tensor::from_vec(Shape::vector(s.channels)?, dbeta)?,
    })
}

/// Normalisation with fixed (running) statistics.
pub(crate) fn batchnorm_eval_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    let s = input.shape();
    let hw = s.plane();
    let mut out = input.data().to_vec();
    for (i, chunk) in out.chunks_mut(hw).enumerate() {
        let c = i % s.channels;
        for v in chunk {
            *v = gamma[c] * ((*v - mean[c]) * inv_std[c]) + beta[c];
        }
    }
    Tensor::from_vec(s, out)
}

pub(crate) fn batchnorm_eval_backward<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Result<NormGrads<T>> {
    let s = input.shape();
    let hw = s.plane();
    let x = input.data();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![0.0f64; s.channels];
    let mut dbeta = vec![0.0f64; s.channels];
    for (i, (xs, gs)) in x.chunks(hw).zip(g.chunks(hw)).enumerate() {
        let c = i % s.channels;
        let off = i * hw;
        for j in 0..hw {
            let xh = (xs[j] - mean[c]) * inv_std[c];
            dgamma[c] += (gs[j] * xh).as_f64();
            dbeta[c] += gs[j].as_f64();
            dx[off + j] = gs[j] * gamma[c] * inv_std[c];
        }
    }
    Ok(NormGrads {
        input: Tensor::from_vec(s, dx)?,
        gamma: Tensor::from_vec(Shape::vector(s.channels)?, dgamma.into_iter().map(T::of).collect())?,
        beta: Tensor::from_vec(Shape::vector(s.channels)?, dbeta.into_iter().map(T::of).collect())?,
    })
}
