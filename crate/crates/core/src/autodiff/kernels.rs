//! Numeric kernels shared by the forward and backward passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution: input `[n, c, h, w]`, kernel `[o, c, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: expected rank-4 input and kernel, got {x_shape:?} and {w_shape:?}"
            )));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::Shape(format!(
                "conv2d: input {x_shape:?} has {} channels but kernel {w_shape:?} expects {}",
                x_shape[1], w_shape[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let (h, w) = (x_shape[2] + 2 * pad, x_shape[3] + 2 * pad);
        if w_shape[2] > h || w_shape[3] > w {
            return Err(Error::Shape(format!(
                "conv2d: kernel {w_shape:?} larger than padded input {x_shape:?} (pad {pad})"
            )));
        }
        Ok(Self {
            n: x_shape[0],
            c: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            o: w_shape[0],
            kh: w_shape[2],
            kw: w_shape[3],
            stride,
            pad,
            oh: (h - w_shape[2]) / stride + 1,
            ow: (w - w_shape[3]) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.o, self.c, self.kh, self.kw]
    }

    /// Output positions `o0..o1` whose tap `k` lands inside an input of length `len`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        // input index = o * stride + k - pad, must lie in [0, len)
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((len as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_len as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    let xd = x.data();
    let wd = w.data();
    for n in 0..g.n {
        for o in 0..g.o {
            let ob = (n * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xb = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wd[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.valid(kx, g.w, g.ow);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = ob + oy * g.ow;
                            let irow = xb + iy * g.w;
                            for ox in x0..x1 {
                                let ix = ox * g.stride + kx - g.pad;
                                out[orow + ox] += wv * xd[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(g.out_shape(), out)
}

/// Adjoint of [`conv2d`] with respect to its input (a transposed convolution).
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    let gd = gy.data();
    let wd = w.data();
    for n in 0..g.n {
        for o in 0..g.o {
            let ob = (n * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xb = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wd[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.valid(kx, g.w, g.ow);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = ob + oy * g.ow;
                            let irow = xb + iy * g.w;
                            for ox in x0..x1 {
                                let ix = ox * g.stride + kx - g.pad;
                                out[irow + ix] += wv * gd[orow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(g.in_shape(), out)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, g: &ConvGeom) -> Tensor {
    let mut out = vec![0.0; g.o * g.c * g.kh * g.kw];
    let gd = gy.data();
    let xd = x.data();
    for n in 0..g.n {
        for o in 0..g.o {
            let ob = (n * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xb = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid(kx, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = ob + oy * g.ow;
                            let irow = xb + iy * g.w;
                            for ox in x0..x1 {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += gd[orow + ox] * xd[irow + ix];
                            }
                        }
                        out[((o * g.c + c) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_parts(g.kernel_shape(), out)
}

/// `a [m,k] · b [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ [k,m]ᵀ · b [k,n]` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `a [m,k] · bᵀ` where `b` is `[n,k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let (n, k) = (z.shape()[0], z.shape()[1]);
    let mut out = z.data().to_vec();
    for row in out.chunks_mut(k).take(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(vec![n, k], out)
}

/// Mean softmax cross-entropy over rows.
pub fn softmax_cross_entropy(z: &Tensor, labels: &[usize]) -> f64 {
    let k = z.shape()[1];
    let mut total = 0.0;
    for (row, &y) in z.data().chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub const TV_EPS: f64 = 1e-8;

/// Isotropic total variation of a `[b, c, h, w]` batch, summed over pixels.
pub fn total_variation(x: &Tensor) -> f64 {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let d = x.data();
    let mut tv = 0.0;
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let v = d[base + i * w + j];
                let dh = d[base + i * w + j + 1] - v;
                let dv = d[base + (i + 1) * w + j] - v;
                tv += (dh * dh + dv * dv + TV_EPS).sqrt();
            }
        }
    }
    tv
}

pub fn total_variation_grad(x: &Tensor, g: f64) -> Tensor {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let at = base + i * w + j;
                let v = d[at];
                let dh = d[at + 1] - v;
                let dv = d[at + w] - v;
                let t = (dh * dh + dv * dv + TV_EPS).sqrt();
                out[at + 1] += g * dh / t;
                out[at + w] += g * dv / t;
                out[at] -= g * (dh + dv) / t;
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

/// Sums every axis except axis 1, giving a per-feature (or per-channel) vector.
pub fn sum_to_bias(x: &Tensor) -> Tensor {
    let s = x.shape();
    let f = s[1];
    let inner: usize = s[2..].iter().product();
    let mut out = vec![0.0; f];
    for (i, chunk) in x.data().chunks(inner).enumerate() {
        out[i % f] += chunk.iter().sum::<f64>();
    }
    Tensor::from_parts(vec![f], out)
}

/// Broadcasts a per-feature vector back to `shape` (inverse layout of [`sum_to_bias`]).
pub fn broadcast_bias(b: &[f64], shape: &[usize]) -> Tensor {
    let f = shape[1];
    let inner: usize = shape[2..].iter().product();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    for i in 0..total / inner {
        let v = b[i % f];
        out.extend(std::iter::repeat_n(v, inner));
    }
    Tensor::from_parts(shape.to_vec(), out)
}
