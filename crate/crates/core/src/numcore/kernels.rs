//! Slice-level compute kernels. Shapes are validated by the callers in `ops`.

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    /// Output columns `ox` whose source column `ox + kx - pad` lies inside the input.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.width + self.pad).saturating_sub(kx).min(self.out_width());
        (lo, hi)
    }

    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy + ky).checked_sub(self.pad)?;
        (iy < self.height).then_some(iy)
    }
}

/// Direct stride-1 cross-correlation with zero padding.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (ho, wo) = (d.out_height(), d.out_width());
    let k = d.kernel;
    let in_plane = d.height * d.width;
    let out_plane = ho * wo;
    let mut out = vec![T::zero(); d.batch * d.c_out * out_plane];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let o = &mut out[(b * d.c_out + co) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..d.c_in {
                let src = &x[(b * d.c_in + ci) * in_plane..][..in_plane];
                let wk = &w[(co * d.c_in + ci) * k * k..][..k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        let (lo, hi) = d.col_range(kx);
                        for oy in 0..ho {
                            let Some(iy) = d.src_row(oy, ky) else { continue };
                            let orow = &mut o[oy * wo..][..wo];
                            let irow = &src[iy * d.width..][..d.width];
                            for ox in lo..hi {
                                orow[ox] += wv * irow[ox + kx - d.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Scalar>(x: &[T], w: &[T], dout: &[T], d: &ConvDims) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (d.out_height(), d.out_width());
    let k = d.kernel;
    let in_plane = d.height * d.width;
    let out_plane = ho * wo;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); d.c_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g = &dout[(b * d.c_out + co) * out_plane..][..out_plane];
            db[co] += g.iter().copied().sum::<T>();
            for ci in 0..d.c_in {
                let base = (b * d.c_in + ci) * in_plane;
                let wbase = (co * d.c_in + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (lo, hi) = d.col_range(kx);
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let Some(iy) = d.src_row(oy, ky) else { continue };
                            let grow = &g[oy * wo..][..wo];
                            let row_off = base + iy * d.width + kx;
                            for ox in lo..hi {
                                let idx = row_off + ox - d.pad;
                                acc += x[idx] * grow[ox];
                                dx[idx] += wv * grow[ox];
                            }
                        }
                        dw[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 stride-2 max pooling over the last two dims; odd trailing rows/columns
/// are dropped. Returns the pooled values and, per output, the flat input
/// index of the first maximal element in row-major order.
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel batch statistics of an `[B, C, H, W]` buffer: `(mean, biased variance)`.
pub fn channel_stats<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let n = T::lit((batch * plane) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            s += x[(b * channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s / n;
        let mut v = T::zero();
        for b in 0..batch {
            for &e in &x[(b * channels + c) * plane..][..plane] {
                v += (e - m) * (e - m);
            }
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

/// `[m, k] @ [k, n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
