//! Numeric forward/backward kernels behind the tape ops.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that preserves height and width (stride 1).
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub pad_t: usize,
    pub pad_l: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], padding: Padding) -> Result<Self> {
        let mismatch = || Error::Dimension {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        };
        let (&[n, h, w, cin], &[kh, kw, kcin, cout]) = (input, kernel) else {
            return Err(mismatch());
        };
        if cin != kcin || kh == 0 || kw == 0 {
            return Err(mismatch());
        }
        let (pad_t, pad_b, pad_l, pad_r) = match padding {
            Padding::Same => ((kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2),
            Padding::Valid => (0, 0, 0, 0),
        };
        if kh > h + pad_t + pad_b || kw > w + pad_l + pad_r {
            return Err(mismatch());
        }
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            pad_t,
            pad_l,
            ho: h + pad_t + pad_b - kh + 1,
            wo: w + pad_l + pad_r - kw + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.ho, self.wo, self.cout]
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo * self.cout
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let pl = self.patch_len();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * pl..][..pl];
                for dy in 0..self.kh {
                    let iy = (oy + dy) as isize - self.pad_t as isize;
                    for dx in 0..self.kw {
                        let ix = (ox + dx) as isize - self.pad_l as isize;
                        let dst = &mut row[(dy * self.kw + dx) * self.cin..][..self.cin];
                        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
                            dst.fill(0.0);
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * self.cin;
                            dst.copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let pl = self.patch_len();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * pl..][..pl];
                for dy in 0..self.kh {
                    let iy = (oy + dy) as isize - self.pad_t as isize;
                    if iy < 0 || iy as usize >= self.h {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox + kx) as isize - self.pad_l as isize;
                        if ix < 0 || ix as usize >= self.w {
                            continue;
                        }
                        let src = &row[(dy * self.kw + kx) * self.cin..][..self.cin];
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        for (d, s) in dx[dst..dst + self.cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let pl = g.patch_len();
    let rows = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.out_len()];
    let mut cols = vec![0.0; rows * pl];
    for s in 0..g.n {
        g.im2col(&x[s * g.in_len()..][..g.in_len()], &mut cols);
        gemm(
            rows,
            pl,
            g.cout,
            &cols,
            false,
            k,
            false,
            &mut out[s * g.out_len()..][..g.out_len()],
            0.0,
        );
    }
    out
}

/// Gradients of a convolution w.r.t. its input and kernel.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let pl = g.patch_len();
    let rows = g.ho * g.wo;
    let mut dx = need_dx.then(|| vec![0.0; g.n * g.in_len()]);
    let mut dk = need_dk.then(|| vec![0.0; pl * g.cout]);
    let mut cols = vec![0.0; rows * pl];
    for s in 0..g.n {
        let dys = &dy[s * g.out_len()..][..g.out_len()];
        if let Some(dk) = dk.as_mut() {
            g.im2col(&x[s * g.in_len()..][..g.in_len()], &mut cols);
            gemm(pl, rows, g.cout, &cols, true, dys, false, dk, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, g.cout, pl, dys, false, k, true, &mut cols, 0.0);
            g.col2im(&cols, &mut dx[s * g.in_len()..][..g.in_len()]);
        }
    }
    (dx, dk)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        let &[n, h, w, c] = input else {
            return Err(Error::Dimension {
                op: "maxpool2d",
                lhs: input.to_vec(),
                rhs: vec![window, window],
            });
        };
        if window == 0 || stride == 0 || h < window || w < window {
            return Err(Error::Dimension {
                op: "maxpool2d",
                lhs: input.to_vec(),
                rhs: vec![window, window],
            });
        }
        Ok(PoolGeom {
            n,
            h,
            w,
            c,
            window,
            stride,
            ho: (h - window) / stride + 1,
            wo: (w - window) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.ho, self.wo, self.c]
    }
}

/// Window maxima and the flat input index each came from. Ties resolve to
/// the first element in row-major window order.
pub(crate) fn maxpool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let out_len = g.n * g.ho * g.wo * g.c;
    let mut out = vec![f64::NEG_INFINITY; out_len];
    let mut arg = vec![0usize; out_len];
    for s in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((s * g.ho + oy) * g.wo + ox) * g.c;
                for wy in 0..g.window {
                    for wx in 0..g.window {
                        let iy = oy * g.stride + wy;
                        let ix = ox * g.stride + wx;
                        let i = ((s * g.h + iy) * g.w + ix) * g.c;
                        for ch in 0..g.c {
                            if x[i + ch] > out[o + ch] || (wy == 0 && wx == 0) {
                                out[o + ch] = x[i + ch];
                                arg[o + ch] = i + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) const BN_EPS: f64 = 1e-5;

pub(crate) struct BatchNormForward {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance (train) or the running variance (eval).
    pub var: Vec<f64>,
}

/// Per-channel normalization over every axis but the last.
pub(crate) fn batchnorm_forward(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> BatchNormForward {
    let m = x.len() / channels;
    let (mean, var) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
        None => {
            let mut mean = vec![0.0; channels];
            for row in x.chunks_exact(channels) {
                for (mu, v) in mean.iter_mut().zip(row) {
                    *mu += v;
                }
            }
            mean.iter_mut().for_each(|mu| *mu /= m as f64);
            let mut var = vec![0.0; channels];
            for row in x.chunks_exact(channels) {
                for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|s| *s /= m as f64);
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ((row, xh), yr) in x
        .chunks_exact(channels)
        .zip(xhat.chunks_exact_mut(channels))
        .zip(y.chunks_exact_mut(channels))
    {
        for c in 0..channels {
            xh[c] = (row[c] - mean[c]) * inv_std[c];
            yr[c] = gamma[c] * xh[c] + beta[c];
        }
    }
    BatchNormForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the statistics are
/// treated as functions of `x`; otherwise they are constants.
pub(crate) fn batchnorm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let channels = gamma.len();
    let m = (dy.len() / channels) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (d, xh) in dy.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
        for c in 0..channels {
            dgamma[c] += d[c] * xh[c];
            dbeta[c] += d[c];
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for ((dxr, d), xh) in dx
        .chunks_exact_mut(channels)
        .zip(dy.chunks_exact(channels))
        .zip(xhat.chunks_exact(channels))
    {
        for c in 0..channels {
            let scale = gamma[c] * inv_std[c];
            dxr[c] = if batch_stats {
                scale * (d[c] - dbeta[c] / m - xh[c] * dgamma[c] / m)
            } else {
                scale * d[c]
            };
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax of a `[rows, cols]` matrix.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            z += *oi;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Mean negative log-likelihood; returns `(loss, softmax probabilities)`.
pub(crate) fn softmax_cross_entropy(logits: &[f64], cols: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let probs = softmax_rows(logits, cols);
    let mut total = 0.0;
    for (row, &y) in logits.chunks_exact(cols).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    (total / labels.len() as f64, probs)
}
