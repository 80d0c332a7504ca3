//! Slice-level numeric kernels shared by the tape's forward and backward passes.

use super::Float;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx` when stride is 1.
    fn unit_stride_span(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.w_out);
        (lo.min(hi), hi)
    }
}

/// Unfolds one image `[c_in, h, w]` into `[c_in * k * k, h_out * w_out]`.
pub(crate) fn im2col<F: Float>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let plane = g.h * g.w;
    let out_px = g.out_pixels();
    for ci in 0..g.c_in {
        let src_plane = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * out_px..(row + 1) * out_px];
                for oy in 0..g.h_out {
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &src_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kx);
                        drow[..lo].fill(F::zero());
                        let off = lo + kx - g.pad;
                        drow[lo..hi].copy_from_slice(&srow[off..off + (hi - lo)]);
                        drow[hi..].fill(F::zero());
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                F::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image gradient.
pub(crate) fn col2im_add<F: Float>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let plane = g.h * g.w;
    let out_px = g.out_pixels();
    for ci in 0..g.c_in {
        let dst_plane = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * out_px..(row + 1) * out_px];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let drow = &mut dst_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kx);
                        let off = lo + kx - g.pad;
                        for (d, &s) in drow[off..off + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(mean, rstd)` per `(batch, group)` and writes the normalized,
/// affine-transformed output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<F: Float>(
    x: &[F],
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
    out: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let cg = channels / groups;
    let n = cg * plane;
    let nf = F::from_usize(n).unwrap();
    let mut means = Vec::with_capacity(batch * groups);
    let mut rstds = Vec::with_capacity(batch * groups);
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * cg) * plane;
            let seg = &x[start..start + n];
            let mean = seg.iter().copied().sum::<F>() / nf;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rstd = F::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for c in 0..cg {
                let ch = g * cg + c;
                let (ga, be) = (gamma[ch], beta[ch]);
                let off = start + c * plane;
                for (o, &v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                    *o = (v - mean) * rstd * ga + be;
                }
            }
        }
    }
    (means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<F: Float>(
    x: &[F],
    dy: &[F],
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    gamma: &[F],
    means: &[F],
    rstds: &[F],
    dx: Option<&mut [F]>,
    dgamma: &mut [F],
    dbeta: &mut [F],
) {
    let cg = channels / groups;
    let n = cg * plane;
    let nf = F::from_usize(n).unwrap();
    let mut dx = dx;
    for b in 0..batch {
        for g in 0..groups {
            let idx = b * groups + g;
            let (mean, rstd) = (means[idx], rstds[idx]);
            let start = (b * channels + g * cg) * plane;
            let mut sum_dyg = F::zero();
            let mut sum_dyg_xhat = F::zero();
            for c in 0..cg {
                let ch = g * cg + c;
                let off = start + c * plane;
                let mut dg = F::zero();
                let mut db = F::zero();
                for (&v, &d) in x[off..off + plane].iter().zip(&dy[off..off + plane]) {
                    let xhat = (v - mean) * rstd;
                    dg += d * xhat;
                    db += d;
                }
                dgamma[ch] += dg;
                dbeta[ch] += db;
                sum_dyg += db * gamma[ch];
                sum_dyg_xhat += dg * gamma[ch];
            }
            if let Some(dx) = dx.as_deref_mut() {
                let m1 = sum_dyg / nf;
                let m2 = sum_dyg_xhat / nf;
                for c in 0..cg {
                    let ga = gamma[g * cg + c];
                    let off = start + c * plane;
                    for ((o, &v), &d) in dx[off..off + plane]
                        .iter_mut()
                        .zip(&x[off..off + plane])
                        .zip(&dy[off..off + plane])
                    {
                        let xhat = (v - mean) * rstd;
                        *o += rstd * (d * ga - m1 - xhat * m2);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Row-wise softmax over contiguous rows of length `n`.
pub(crate) fn softmax_rows<F: Float>(x: &[F], n: usize, out: &mut [F]) {
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        for y in yr.iter_mut() {
            *y /= sum;
        }
    }
}
