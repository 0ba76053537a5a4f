//! Differentiable primitives.
//!
//! Each operation validates shapes, computes its forward value, checks the
//! result for NaN/Inf and registers a backward rule that maps the upstream
//! gradient to one contribution per parent. Convolution is fixed to 3x3
//! kernels with stride 1 or 2 and reflect padding; that is all the networks
//! here need.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{fmt_shape, Error, Result, Tensor};

/// Cephes-style polynomial `exp` for f32: deterministic pure arithmetic,
/// accurate to about one ulp, and cheap enough for the softmax hot loop.
/// Branch-free so the surrounding loops vectorize.
#[inline(always)]
pub(crate) fn exp_approx(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    const LOG2E: f32 = core::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // round to nearest via the shift-magic constant (safe: |x * LOG2E| < 2^22)
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    let k = (x * LOG2E + MAGIC) - MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_6e-1;
    p = p * r + 5.000_000_2e-1;
    p = p * r * r + r + 1.0;
    // k is integral and within [-126, 127] thanks to the input clamp, so the
    // truncating cast is exact; the unchecked form lets the loop vectorize
    // (the saturating semantics of `as` block it).
    let ki = unsafe { k.to_int_unchecked::<i32>() };
    let scale = f32::from_bits(((ki + 127) << 23) as u32);
    scale * p
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + exp_approx(-x))
}

/// Dot product with eight accumulator lanes; the independent partial sums
/// break the serial dependency so the loop vectorizes.
#[inline]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let pa = &a[c * 8..c * 8 + 8];
        let pb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

/// `a * b` for row-major `[m,k] x [k,n]`.
fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    if n < 32 && k >= 32 {
        // narrow output: transpose b once and use the dot kernel
        let mut bt = alloc::vec![0.0f32; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot_lanes(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a * b^T` for `[m,k] x [n,k]`.
fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot_lanes(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `a^T * b` for `[k,m] x [k,n]`.
fn matmul_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize, out: &mut [f32]) {
    out.fill(0.0);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    // reflect_101: -1 -> 1, len -> len - 2
    if i < 0 {
        (-i) as usize
    } else if i as usize >= len {
        2 * len - 2 - i as usize
    } else {
        i as usize
    }
}

/// Copies `[c,h,w]` into a `[c,h+2,w+2]` buffer with one ring of reflect
/// padding.
fn reflect_pad(data: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hp = h + 2;
    let wp = w + 2;
    let mut out = vec![0.0f32; c * hp * wp];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * hp * wp..(ch + 1) * hp * wp];
        for py in 0..hp {
            let sy = reflect_index(py as isize - 1, h);
            for px in 0..wp {
                let sx = reflect_index(px as isize - 1, w);
                dst[py * wp + px] = src[sy * w + sx];
            }
        }
    }
    out
}

fn conv_out_extent(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

impl Tensor {
    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{} vs {}", fmt_shape(self.shape()), fmt_shape(other.shape())),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data: Vec<f32> = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(|g, _| Ok(vec![g.to_vec(), g.to_vec()])),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data: Vec<f32> = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(|g, _| Ok(vec![g.to_vec(), g.iter().map(|v| -v).collect()])),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data: Vec<f32> = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                let da = parents[1].with_data(|b| g.iter().zip(b).map(|(gv, bv)| gv * bv).collect());
                let db = parents[0].with_data(|a| g.iter().zip(a).map(|(gv, av)| gv * av).collect());
                Ok(vec![da, db])
            }),
        )
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn neg(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.with_data(|a| a.iter().map(|v| -v).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "neg",
            vec![self.clone()],
            Box::new(|g, _| Ok(vec![g.iter().map(|v| -v).collect()])),
        )
    }

    pub fn add_scalar(&self, s: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.with_data(|a| a.iter().map(|v| v + s).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add_scalar",
            vec![self.clone()],
            Box::new(|g, _| Ok(vec![g.to_vec()])),
        )
    }

    pub fn mul_scalar(&self, s: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.with_data(|a| a.iter().map(|v| v * s).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "mul_scalar",
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.iter().map(|v| v * s).collect()])),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.with_data(|a| a.iter().map(|&x| x * sigmoid(x)).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "silu",
            vec![self.clone()],
            Box::new(|g, parents| {
                let dx = parents[0].with_data(|xs| {
                    g.iter()
                        .zip(xs)
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect()
                });
                Ok(vec![dx])
            }),
        )
    }

    /// Hard clamp; the gradient passes only strictly inside the interval.
    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.with_data(|a| a.iter().map(|v| v.clamp(lo, hi)).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "clamp",
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dx = parents[0].with_data(|xs| {
                    g.iter()
                        .zip(xs)
                        .map(|(gv, &x)| if x > lo && x < hi { *gv } else { 0.0 })
                        .collect()
                });
                Ok(vec![dx])
            }),
        )
    }

    /// Sum of all elements, accumulated in f64, returned as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.with_data(|a| a.iter().map(|&v| v as f64).sum());
        Tensor::from_op(
            vec![1],
            vec![total as f32],
            "sum",
            vec![self.clone()],
            Box::new(|g, parents| Ok(vec![vec![g[0]; parents[0].numel()]])),
        )
    }

    /// Mean over all elements, accumulated in f64.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::InvalidArgument { op: "mean", detail: "empty tensor".into() });
        }
        let total: f64 = self.with_data(|a| a.iter().map(|&v| v as f64).sum());
        Tensor::from_op(
            vec![1],
            vec![(total / n as f64) as f32],
            "mean",
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![vec![g[0] / n as f32; n]])),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape() {
            [m, k] => (*m, *k),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    detail: format!("lhs must be rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        let (k2, n) = match other.shape() {
            [k2, n] => (*k2, *n),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    detail: format!("rhs must be rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{} x {}", fmt_shape(self.shape()), fmt_shape(other.shape())),
            });
        }
        let mut data = vec![0.0f32; m * n];
        self.with_data(|a| other.with_data(|b| matmul_raw(a, b, m, k, n, &mut data)));
        Tensor::from_op(
            vec![m, n],
            data,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let mut da = vec![0.0f32; m * k];
                let mut db = vec![0.0f32; k * n];
                parents[1].with_data(|b| matmul_nt(g, b, m, n, k, &mut da));
                parents[0].with_data(|a| matmul_tn(a, g, m, k, n, &mut db));
                Ok(vec![da, db])
            }),
        )
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = match self.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "transpose2d",
                    detail: format!("expected rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        let mut data = vec![0.0f32; r * c];
        self.with_data(|a| {
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a[i * c + j];
                }
            }
        });
        Tensor::from_op(
            vec![c, r],
            data,
            "transpose2d",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                Ok(vec![dx])
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{} -> {}", fmt_shape(self.shape()), fmt_shape(shape)),
            });
        }
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _| Ok(vec![g.to_vec()])),
        )
    }

    /// Concatenates along `axis`; all other extents must match.
    pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        let rank = inputs[0].shape().len();
        if axis >= rank {
            return Err(Error::InvalidArgument {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut out_shape = inputs[0].shape().to_vec();
        let mut axis_total = 0usize;
        for t in inputs {
            if t.shape().len() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{} vs {}", fmt_shape(inputs[0].shape()), fmt_shape(t.shape())),
                });
            }
            for (d, (&a, &b)) in inputs[0].shape().iter().zip(t.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        detail: format!("{} vs {}", fmt_shape(inputs[0].shape()), fmt_shape(t.shape())),
                    });
                }
            }
            axis_total += t.shape()[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let sizes: Vec<usize> = inputs.iter().map(|t| t.shape()[axis]).collect();

        let mut data = vec![0.0f32; outer * axis_total * inner];
        for o in 0..outer {
            let mut offset = 0usize;
            for (t, &sz) in inputs.iter().zip(&sizes) {
                t.with_data(|src| {
                    let chunk = sz * inner;
                    let s = &src[o * chunk..(o + 1) * chunk];
                    let dst = &mut data[(o * axis_total + offset) * inner..][..chunk];
                    dst.copy_from_slice(s);
                });
                offset += sz;
            }
        }
        let parents: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
        Tensor::from_op(
            out_shape,
            data,
            "concat",
            parents,
            Box::new(move |g, parents| {
                let mut out = Vec::with_capacity(parents.len());
                for p in parents.iter() {
                    out.push(vec![0.0f32; p.numel()]);
                }
                for o in 0..outer {
                    let mut offset = 0usize;
                    for (buf, &sz) in out.iter_mut().zip(&sizes) {
                        let chunk = sz * inner;
                        buf[o * chunk..(o + 1) * chunk]
                            .copy_from_slice(&g[(o * axis_total + offset) * inner..][..chunk]);
                        offset += sz;
                    }
                }
                Ok(out)
            }),
        )
    }

    /// Splits along `axis` into parts of the given extents.
    pub fn split(&self, axis: usize, parts: &[usize]) -> Result<Vec<Tensor>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::InvalidArgument {
                op: "split",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let total: usize = parts.iter().sum();
        if total != self.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "split",
                detail: format!("parts sum to {total}, axis extent is {}", self.shape()[axis]),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let axis_total = self.shape()[axis];

        let mut outputs = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for &sz in parts {
            let mut shape = self.shape().to_vec();
            shape[axis] = sz;
            let chunk = sz * inner;
            let mut data = vec![0.0f32; outer * chunk];
            self.with_data(|src| {
                for o in 0..outer {
                    data[o * chunk..(o + 1) * chunk]
                        .copy_from_slice(&src[(o * axis_total + offset) * inner..][..chunk]);
                }
            });
            let start = offset;
            let parent_numel = self.numel();
            outputs.push(Tensor::from_op(
                shape,
                data,
                "split",
                vec![self.clone()],
                Box::new(move |g, _| {
                    let mut dx = vec![0.0f32; parent_numel];
                    let chunk = sz * inner;
                    for o in 0..outer {
                        dx[(o * axis_total + start) * inner..][..chunk]
                            .copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                    }
                    Ok(vec![dx])
                }),
            )?);
            offset += sz;
        }
        Ok(outputs)
    }

    /// Row-wise layer normalization of a `[rows, width]` tensor (no affine).
    pub fn layer_norm(&self, eps: f32) -> Result<Tensor> {
        let (rows, width) = match self.shape() {
            [r, w] => (*r, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("expected rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        let mut data = vec![0.0f32; rows * width];
        self.with_data(|xs| {
            for r in 0..rows {
                let row = &xs[r * width..(r + 1) * width];
                let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
                let var: f64 =
                    row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / width as f64;
                let inv = 1.0 / libm::sqrt(var + eps as f64);
                for (o, &v) in data[r * width..(r + 1) * width].iter_mut().zip(row) {
                    *o = ((v as f64 - mean) * inv) as f32;
                }
            }
        });
        Tensor::from_op(
            vec![rows, width],
            data,
            "layer_norm",
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![0.0f32; rows * width];
                parents[0].with_data(|xs| {
                    for r in 0..rows {
                        let row = &xs[r * width..(r + 1) * width];
                        let grow = &g[r * width..(r + 1) * width];
                        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
                        let var: f64 = row
                            .iter()
                            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                            .sum::<f64>()
                            / width as f64;
                        let inv = 1.0 / libm::sqrt(var + eps as f64);
                        let mut gmean = 0.0f64;
                        let mut gxhat = 0.0f64;
                        for (&gv, &v) in grow.iter().zip(row) {
                            let xh = (v as f64 - mean) * inv;
                            gmean += gv as f64;
                            gxhat += gv as f64 * xh;
                        }
                        gmean /= width as f64;
                        gxhat /= width as f64;
                        for ((o, &gv), &v) in dx[r * width..(r + 1) * width].iter_mut().zip(grow).zip(row) {
                            let xh = (v as f64 - mean) * inv;
                            *o = (inv * (gv as f64 - gmean - xh * gxhat)) as f32;
                        }
                    }
                });
                Ok(vec![dx])
            }),
        )
    }

    /// Row-wise softmax of a `[rows, width]` tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        let (rows, width) = match self.shape() {
            [r, w] => (*r, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    detail: format!("expected rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        let mut data = vec![0.0f32; rows * width];
        self.with_data(|xs| {
            for r in 0..rows {
                let row = &xs[r * width..(r + 1) * width];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                // eight-lane blocks so the exponential pass vectorizes
                let out_row = &mut data[r * width..(r + 1) * width];
                let blocks = width / 8;
                for c in 0..blocks {
                    let src8 = &row[c * 8..c * 8 + 8];
                    let dst8 = &mut out_row[c * 8..c * 8 + 8];
                    for l in 0..8 {
                        dst8[l] = exp_approx(src8[l] - max);
                    }
                }
                for i in blocks * 8..width {
                    out_row[i] = exp_approx(row[i] - max);
                }
                let denom: f64 = out_row.iter().map(|&e| e as f64).sum();
                let inv = (1.0 / denom) as f32;
                for o in out_row.iter_mut() {
                    *o *= inv;
                }
            }
        });
        // the saved output is only needed when a backward pass can happen
        let tracked = self.requires_grad() || self.is_tracked();
        let out_snapshot = if tracked { data.clone() } else { Vec::new() };
        Tensor::from_op(
            vec![rows, width],
            data,
            "softmax",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; rows * width];
                for r in 0..rows {
                    let yrow = &out_snapshot[r * width..(r + 1) * width];
                    let grow = &g[r * width..(r + 1) * width];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| y as f64 * gv as f64).sum();
                    for ((o, &y), &gv) in dx[r * width..(r + 1) * width].iter_mut().zip(yrow).zip(grow) {
                        *o = (y as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                Ok(vec![dx])
            }),
        )
    }

    /// Adds a `[width]` vector to every row of a `[rows, width]` tensor.
    pub fn add_rows(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, width) = match self.shape() {
            [r, w] => (*r, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "add_rows",
                    detail: format!("expected rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        if bias.shape() != [width] {
            return Err(Error::ShapeMismatch {
                op: "add_rows",
                detail: format!("bias {} vs width {width}", fmt_shape(bias.shape())),
            });
        }
        let data: Vec<f32> = self.with_data(|xs| {
            bias.with_data(|b| xs.iter().enumerate().map(|(i, &v)| v + b[i % width]).collect())
        });
        Tensor::from_op(
            vec![rows, width],
            data,
            "add_rows",
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let mut db = vec![0.0f32; width];
                for r in 0..rows {
                    for (dbv, gv) in db.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *dbv += gv;
                    }
                }
                Ok(vec![g.to_vec(), db])
            }),
        )
    }

    /// Multiplies every row of a `[rows, width]` tensor by a `[width]` vector.
    pub fn mul_rows(&self, scale: &Tensor) -> Result<Tensor> {
        let (rows, width) = match self.shape() {
            [r, w] => (*r, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "mul_rows",
                    detail: format!("expected rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        if scale.shape() != [width] {
            return Err(Error::ShapeMismatch {
                op: "mul_rows",
                detail: format!("scale {} vs width {width}", fmt_shape(scale.shape())),
            });
        }
        let data: Vec<f32> = self.with_data(|xs| {
            scale.with_data(|s| xs.iter().enumerate().map(|(i, &v)| v * s[i % width]).collect())
        });
        Tensor::from_op(
            vec![rows, width],
            data,
            "mul_rows",
            vec![self.clone(), scale.clone()],
            Box::new(move |g, parents| {
                let dx = parents[1].with_data(|s| {
                    g.iter().enumerate().map(|(i, &gv)| gv * s[i % width]).collect::<Vec<f32>>()
                });
                let ds = parents[0].with_data(|xs| {
                    let mut ds = vec![0.0f32; width];
                    for (i, (&gv, &xv)) in g.iter().zip(xs).enumerate() {
                        ds[i % width] += gv * xv;
                    }
                    ds
                });
                Ok(vec![dx, ds])
            }),
        )
    }

    /// Adds a per-channel bias `[c]` to a `[c,h,w]` map.
    pub fn add_channels(&self, bias: &Tensor) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "add_channels",
                    detail: format!("expected rank 3, got {}", fmt_shape(s)),
                })
            }
        };
        if bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channels",
                detail: format!("bias {} vs channels {c}", fmt_shape(bias.shape())),
            });
        }
        let plane = h * w;
        let data: Vec<f32> = self.with_data(|xs| {
            bias.with_data(|b| xs.iter().enumerate().map(|(i, &v)| v + b[i / plane]).collect())
        });
        Tensor::from_op(
            vec![c, h, w],
            data,
            "add_channels",
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let mut db = vec![0.0f32; c];
                for (i, gv) in g.iter().enumerate() {
                    db[i / plane] += gv;
                }
                Ok(vec![g.to_vec(), db])
            }),
        )
    }

    /// Contiguous row slice of a `[rows, width]` tensor; used for embedding
    /// lookups, so the backward pass scatters into the source rows.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, width) = match self.shape() {
            [r, w] => (*r, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "slice_rows",
                    detail: format!("expected rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        if start + len > rows {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                detail: format!("rows [{start}, {}) out of range for {rows}", start + len),
            });
        }
        let data: Vec<f32> = self.with_data(|xs| xs[start * width..(start + len) * width].to_vec());
        Tensor::from_op(
            vec![len, width],
            data,
            "slice_rows",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; rows * width];
                dx[start * width..(start + len) * width].copy_from_slice(g);
                Ok(vec![dx])
            }),
        )
    }

    /// Nearest-neighbor 2x upsample of a `[c,h,w]` map.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "upsample_nearest2x",
                    detail: format!("expected rank 3, got {}", fmt_shape(s)),
                })
            }
        };
        let (h2, w2) = (h * 2, w * 2);
        let mut data = vec![0.0f32; c * h2 * w2];
        self.with_data(|xs| {
            for ch in 0..c {
                for y in 0..h2 {
                    let src_row = &xs[ch * h * w + (y / 2) * w..][..w];
                    let dst_row = &mut data[ch * h2 * w2 + y * w2..][..w2];
                    for (x, d) in dst_row.iter_mut().enumerate() {
                        *d = src_row[x / 2];
                    }
                }
            }
        });
        Tensor::from_op(
            vec![c, h2, w2],
            data,
            "upsample_nearest2x",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        let grow = &g[ch * h2 * w2 + y * w2..][..w2];
                        let drow = &mut dx[ch * h * w + (y / 2) * w..][..w];
                        for (x, gv) in grow.iter().enumerate() {
                            drow[x / 2] += gv;
                        }
                    }
                }
                Ok(vec![dx])
            }),
        )
    }

    /// Rearranges a single-channel `[1,h,w]` image into `[(h/p)*(w/p), p*p]`
    /// patch tokens.
    pub fn patchify(&self, p: usize) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "patchify",
                    detail: format!("expected rank 3, got {}", fmt_shape(s)),
                })
            }
        };
        if c != 1 || h % p != 0 || w % p != 0 {
            return Err(Error::InvalidArgument {
                op: "patchify",
                detail: format!("need [1, h, w] with h, w divisible by {p}, got {}", fmt_shape(self.shape())),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let tokens = gh * gw;
        let mut data = vec![0.0f32; tokens * p * p];
        self.with_data(|xs| {
            for by in 0..gh {
                for bx in 0..gw {
                    let tok = by * gw + bx;
                    for py in 0..p {
                        for px in 0..p {
                            data[tok * p * p + py * p + px] = xs[(by * p + py) * w + bx * p + px];
                        }
                    }
                }
            }
        });
        Tensor::from_op(
            vec![tokens, p * p],
            data,
            "patchify",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0f32; h * w];
                for by in 0..gh {
                    for bx in 0..gw {
                        let tok = by * gw + bx;
                        for py in 0..p {
                            for px in 0..p {
                                dx[(by * p + py) * w + bx * p + px] = g[tok * p * p + py * p + px];
                            }
                        }
                    }
                }
                Ok(vec![dx])
            }),
        )
    }

    /// 3x3 convolution with reflect padding, stride 1 or 2.
    /// `self` is `[c_in, h, w]`, `weight` is `[c_out, c_in, 3, 3]`, `bias` is
    /// `[c_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        let (cin, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("input must be rank 3, got {}", fmt_shape(s)),
                })
            }
        };
        let (cout, wcin) = match weight.shape() {
            [co, ci, 3, 3] => (*co, *ci),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("weight must be [c_out, c_in, 3, 3], got {}", fmt_shape(s)),
                })
            }
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {cin} vs weight {wcin}"),
            });
        }
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {} vs c_out {cout}", fmt_shape(bias.shape())),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                detail: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        if h < 2 || w < 2 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                detail: format!("spatial extent too small for reflect padding: {}", fmt_shape(self.shape())),
            });
        }
        let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
        let (hp, wp) = (h + 2, w + 2);
        let padded = self.with_data(|xs| reflect_pad(xs, cin, h, w));

        let mut data = vec![0.0f32; cout * ho * wo];
        weight.with_data(|wd| {
            bias.with_data(|bd| {
                for co in 0..cout {
                    let out_ch = &mut data[co * ho * wo..(co + 1) * ho * wo];
                    out_ch.fill(bd[co]);
                    for ci in 0..cin {
                        let pch = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                        let wbase = (co * cin + ci) * 9;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = wd[wbase + ky * 3 + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                if stride == 1 {
                                    for oy in 0..ho {
                                        let irow = &pch[(oy + ky) * wp + kx..][..wo];
                                        let orow = &mut out_ch[oy * wo..(oy + 1) * wo];
                                        for (o, &iv) in orow.iter_mut().zip(irow) {
                                            *o += wv * iv;
                                        }
                                    }
                                } else {
                                    for oy in 0..ho {
                                        let irow = &pch[(oy * 2 + ky) * wp..(oy * 2 + ky + 1) * wp];
                                        let orow = &mut out_ch[oy * wo..(oy + 1) * wo];
                                        for (ox, o) in orow.iter_mut().enumerate() {
                                            *o += wv * irow[ox * 2 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            })
        });

        Tensor::from_op(
            vec![cout, ho, wo],
            data,
            "conv2d",
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, parents| {
                let input = &parents[0];
                let weight = &parents[1];
                let padded = input.with_data(|xs| reflect_pad(xs, cin, h, w));

                // bias gradient
                let mut db = vec![0.0f32; cout];
                for co in 0..cout {
                    db[co] = g[co * ho * wo..(co + 1) * ho * wo].iter().sum();
                }

                // weight gradient
                let mut dw = vec![0.0f32; cout * cin * 9];
                for co in 0..cout {
                    let gch = &g[co * ho * wo..(co + 1) * ho * wo];
                    for ci in 0..cin {
                        let pch = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                        let wbase = (co * cin + ci) * 9;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let mut acc = 0.0f64;
                                for oy in 0..ho {
                                    let grow = &gch[oy * wo..(oy + 1) * wo];
                                    let irow = &pch[(oy * stride + ky) * wp..];
                                    if stride == 1 {
                                        for (&gv, &iv) in grow.iter().zip(&irow[kx..kx + wo]) {
                                            acc += gv as f64 * iv as f64;
                                        }
                                    } else {
                                        for (ox, &gv) in grow.iter().enumerate() {
                                            acc += gv as f64 * irow[ox * 2 + kx] as f64;
                                        }
                                    }
                                }
                                dw[wbase + ky * 3 + kx] = acc as f32;
                            }
                        }
                    }
                }

                // input gradient via the padded buffer, then fold the ring back
                let mut dpad = vec![0.0f32; cin * hp * wp];
                weight.with_data(|wd| {
                    for co in 0..cout {
                        let gch = &g[co * ho * wo..(co + 1) * ho * wo];
                        for ci in 0..cin {
                            let dch = &mut dpad[ci * hp * wp..(ci + 1) * hp * wp];
                            let wbase = (co * cin + ci) * 9;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = wd[wbase + ky * 3 + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for oy in 0..ho {
                                        let grow = &gch[oy * wo..(oy + 1) * wo];
                                        let drow = &mut dch[(oy * stride + ky) * wp..];
                                        if stride == 1 {
                                            for (ox, &gv) in grow.iter().enumerate() {
                                                drow[ox + kx] += wv * gv;
                                            }
                                        } else {
                                            for (ox, &gv) in grow.iter().enumerate() {
                                                drow[ox * 2 + kx] += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                let mut dx = vec![0.0f32; cin * h * w];
                for ci in 0..cin {
                    let dch = &dpad[ci * hp * wp..(ci + 1) * hp * wp];
                    let xch = &mut dx[ci * h * w..(ci + 1) * h * w];
                    for py in 0..hp {
                        let sy = reflect_index(py as isize - 1, h);
                        for px in 0..wp {
                            let sx = reflect_index(px as isize - 1, w);
                            xch[sy * w + sx] += dch[py * wp + px];
                        }
                    }
                }
                Ok(vec![dx, dw, db])
            }),
        )
    }

    /// Scaled dot-product attention: `softmax(q k^T / sqrt(d)) v`.
    /// `q` is `[s, d]`, `k` and `v` are `[m, d]`. The scale folds into the
    /// queries so no full score-sized temporary is needed for it. Untracked
    /// inputs take a fused row-blocked kernel that never materializes the
    /// score matrix.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let d = match q.shape() {
            [_, d] => *d,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    detail: format!("q must be rank 2, got {}", fmt_shape(s)),
                })
            }
        };
        let tracked = [q, k, v].iter().any(|t| t.requires_grad() || t.is_tracked());
        if !tracked {
            return Tensor::attention_fused(q, k, v);
        }
        let scaled_q = q.mul_scalar(1.0 / libm::sqrtf(d as f32))?;
        scaled_q.matmul(&k.transpose2d()?)?.softmax()?.matmul(v)
    }

    /// Forward-only attention with row-sized temporaries.
    fn attention_fused(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (s, d) = (q.shape()[0], q.shape()[1]);
        let m = match k.shape() {
            [m, kd] if *kd == d => *m,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    detail: format!("k is {}, expected [m, {d}]", fmt_shape(other)),
                })
            }
        };
        if v.shape() != [m, d] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                detail: format!("v is {}, expected [{m}, {d}]", fmt_shape(v.shape())),
            });
        }
        let scale = 1.0 / libm::sqrtf(d as f32);
        let mut out = vec![0.0f32; s * d];
        let mut scores = vec![0.0f32; m];
        q.with_data(|qd| {
            k.with_data(|kd| {
                v.with_data(|vd| {
                    // keys and values transposed once so both the score
                    // pass and the weighted sum run over wide rows
                    let mut kt = vec![0.0f32; d * m];
                    let mut vt = vec![0.0f32; d * m];
                    for j in 0..m {
                        for p in 0..d {
                            kt[p * m + j] = kd[j * d + p];
                            vt[p * m + j] = vd[j * d + p];
                        }
                    }
                    for i in 0..s {
                        let qrow = &qd[i * d..(i + 1) * d];
                        scores.fill(0.0);
                        for (p, &qv) in qrow.iter().enumerate() {
                            let qv = qv * scale;
                            let krow = &kt[p * m..(p + 1) * m];
                            for (sc, &kv) in scores.iter_mut().zip(krow) {
                                *sc += qv * kv;
                            }
                        }
                        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let blocks = m / 8;
                        for c in 0..blocks {
                            let sc8 = &mut scores[c * 8..c * 8 + 8];
                            for l in 0..8 {
                                sc8[l] = exp_approx(sc8[l] - max);
                            }
                        }
                        for sc in scores[blocks * 8..].iter_mut() {
                            *sc = exp_approx(*sc - max);
                        }
                        let denom: f64 = scores.iter().map(|&e| e as f64).sum();
                        let inv = (1.0 / denom) as f32;
                        for sc in scores.iter_mut() {
                            *sc *= inv;
                        }
                        let orow = &mut out[i * d..(i + 1) * d];
                        for (p, o) in orow.iter_mut().enumerate() {
                            *o = dot_lanes(&scores, &vt[p * m..(p + 1) * m]);
                        }
                    }
                })
            })
        });
        if !super::all_finite(&out) {
            return Err(Error::NonFinite { op: "attention" });
        }
        Ok(Tensor::construct_untracked(vec![s, d], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_loss_gradients, numeric_gradient, relative_error};
    use crate::tensor::Rng;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = a.matmul(&id).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = x.softmax().unwrap();
        for v in y.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn conv2d_preserves_constant_image() {
        // kernel summing to 1 + reflect padding keeps a constant image constant
        let img = Tensor::from_vec(&[1, 6, 6], vec![0.37; 36]).unwrap();
        let mut kw = vec![1.0 / 9.0; 9];
        kw[4] = 1.0 / 9.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], kw).unwrap();
        let b = Tensor::zeros(&[1]);
        let out = img.conv2d(&w, &b, 1).unwrap();
        for v in out.to_vec() {
            assert!((v - 0.37).abs() < 1e-6, "got {v}");
        }
    }

    #[test]
    fn conv2d_stride2_shape() {
        let img = Tensor::zeros(&[3, 24, 24]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let b = Tensor::zeros(&[5]);
        let out = img.conv2d(&w, &b, 2).unwrap();
        assert_eq!(out.shape(), &[5, 12, 12]);
    }

    #[test]
    fn conv2d_shape_mismatch_names_op() {
        let img = Tensor::zeros(&[2, 6, 6]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::zeros(&[4]);
        let err = img.conv2d(&w, &b, 1).unwrap_err();
        match err {
            Error::ShapeMismatch { op, detail } => {
                assert_eq!(op, "conv2d");
                assert!(detail.contains('2') && detail.contains('3'), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        for axis in 0..2 {
            let joined = Tensor::concat(&[&a, &b], axis).unwrap();
            let parts = joined.split(axis, &[a.shape()[axis], b.shape()[axis]]).unwrap();
            assert_eq!(parts[0].to_vec(), a.to_vec());
            assert_eq!(parts[1].to_vec(), b.to_vec());
        }
    }

    #[test]
    fn concat_gradient_is_split_of_upstream() {
        let a = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(&[1, 2], vec![5.0, 6.0]).unwrap();
        let joined = Tensor::concat(&[&a, &b], 0).unwrap();
        // weight rows so the upstream gradient is distinguishable
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let loss = joined.mul(&w).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![5.0, 6.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose2d().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.transpose2d().unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn clamp_contract() {
        let x = Tensor::from_vec(&[4], vec![-3.0, -0.5, 0.5, 3.0]).unwrap();
        assert_eq!(x.clamp(-1.0, 1.0).unwrap().to_vec(), vec![-1.0, -0.5, 0.5, 1.0]);
    }

    fn gradcheck_unary(name: &str, f: impl Fn(&Tensor) -> Result<Tensor>, shape: &[usize], seed: u64) {
        let mut rng = Rng::new(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.next_normal() * 0.5).collect();
        let x = Tensor::param(shape, data).unwrap();
        let wvec: Vec<f32> = (0..f(&x).unwrap().numel()).map(|_| rng.next_normal()).collect();
        let mut build = || -> Result<Tensor> {
            let y = f(&x)?;
            let w = Tensor::from_vec(y.shape(), wvec.clone())?;
            y.mul(&w)?.sum()
        };
        let worst = check_loss_gradients(&mut build, &[x.clone()], 1e-3).unwrap();
        assert!(worst < 1e-4, "{name}: jvp relative error {worst}");
    }

    #[test]
    fn primitive_jvp_checks() {
        gradcheck_unary("silu", |x| x.silu(), &[3, 4], 1);
        gradcheck_unary("softmax", |x| x.softmax(), &[3, 5], 2);
        gradcheck_unary("layer_norm", |x| x.layer_norm(1e-5), &[3, 6], 3);
        gradcheck_unary("mean", |x| x.mean(), &[7], 4);
        gradcheck_unary("upsample", |x| x.upsample_nearest2x(), &[2, 3, 3], 5);
        gradcheck_unary("patchify", |x| x.patchify(2), &[1, 4, 4], 6);
        gradcheck_unary("transpose", |x| x.transpose2d(), &[3, 4], 7);
        gradcheck_unary("slice_rows", |x| x.slice_rows(1, 2), &[4, 3], 8);
        gradcheck_unary("clamp", |x| x.clamp(-0.4, 0.4), &[10], 9);
    }

    #[test]
    fn matmul_jvp_check() {
        let mut rng = Rng::new(11);
        let a = Tensor::param(&[3, 4], (0..12).map(|_| rng.next_normal()).collect()).unwrap();
        let b = Tensor::param(&[4, 2], (0..8).map(|_| rng.next_normal()).collect()).unwrap();
        let wvec: Vec<f32> = (0..6).map(|_| rng.next_normal()).collect();
        let mut build = || -> Result<Tensor> {
            let y = a.matmul(&b)?;
            let w = Tensor::from_vec(y.shape(), wvec.clone())?;
            y.mul(&w)?.sum()
        };
        let worst = check_loss_gradients(&mut build, &[a.clone(), b.clone()], 1e-3).unwrap();
        assert!(worst < 1e-4, "matmul jvp relative error {worst}");
    }

    #[test]
    fn conv2d_jvp_check() {
        for stride in [1usize, 2] {
            let mut rng = Rng::new(20 + stride as u64);
            let x = Tensor::param(&[2, 5, 5], (0..50).map(|_| rng.next_normal() * 0.5).collect()).unwrap();
            let w = Tensor::param(&[3, 2, 3, 3], (0..54).map(|_| rng.next_normal() * 0.3).collect()).unwrap();
            let b = Tensor::param(&[3], (0..3).map(|_| rng.next_normal() * 0.2).collect()).unwrap();
            let out_len = x.conv2d(&w, &b, stride).unwrap().numel();
            let wvec: Vec<f32> = (0..out_len).map(|_| rng.next_normal()).collect();
            let mut build = || -> Result<Tensor> {
                let y = x.conv2d(&w, &b, stride)?;
                let ww = Tensor::from_vec(y.shape(), wvec.clone())?;
                y.mul(&ww)?.sum()
            };
            let worst =
                check_loss_gradients(&mut build, &[x.clone(), w.clone(), b.clone()], 1e-3).unwrap();
            assert!(worst < 1e-4, "conv2d stride {stride}: jvp relative error {worst}");
        }
    }

    #[test]
    fn attention_jvp_check() {
        let mut rng = Rng::new(31);
        let q = Tensor::param(&[3, 4], (0..12).map(|_| rng.next_normal() * 0.5).collect()).unwrap();
        let k = Tensor::param(&[2, 4], (0..8).map(|_| rng.next_normal() * 0.5).collect()).unwrap();
        let v = Tensor::param(&[2, 4], (0..8).map(|_| rng.next_normal() * 0.5).collect()).unwrap();
        let wvec: Vec<f32> = (0..12).map(|_| rng.next_normal()).collect();
        let mut build = || -> Result<Tensor> {
            let y = Tensor::attention(&q, &k, &v)?;
            let w = Tensor::from_vec(y.shape(), wvec.clone())?;
            y.mul(&w)?.sum()
        };
        let worst =
            check_loss_gradients(&mut build, &[q.clone(), k.clone(), v.clone()], 5e-3).unwrap();
        assert!(worst < 1e-4, "attention jvp relative error {worst}");
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        // elementwise central differences at h = 1e-3 on a tiny dense net
        let mut rng = Rng::new(42);
        let x = Tensor::from_vec(&[2, 3], (0..6).map(|_| rng.next_normal() * 0.5).collect()).unwrap();
        let w1 = Tensor::param(&[3, 4], (0..12).map(|_| rng.next_normal() * 0.5).collect()).unwrap();
        let b1 = Tensor::param(&[4], (0..4).map(|_| rng.next_normal() * 0.1).collect()).unwrap();
        let w2 = Tensor::param(&[4, 2], (0..8).map(|_| rng.next_normal() * 0.5).collect()).unwrap();
        let build = |w1: &Tensor, b1: &Tensor, w2: &Tensor| -> Result<Tensor> {
            x.matmul(w1)?.add_rows(b1)?.silu()?.matmul(w2)?.square()?.sum()
        };
        let loss = build(&w1, &b1, &w2).unwrap();
        loss.backward().unwrap();
        for p in [&w1, &b1, &w2] {
            let analytic = p.grad().unwrap();
            let mut f = || build(&w1, &b1, &w2)?.item();
            let numeric = numeric_gradient(&mut f, p, 1e-3).unwrap();
            // compare as Jacobian-vector product along the gradient direction
            let norm: f64 = analytic.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let dot_a: f64 = analytic.iter().map(|&v| (v as f64) * (v as f64) / norm).sum();
            let dot_n: f64 = numeric.iter().zip(&analytic).map(|(&n, &a)| n * a as f64 / norm).sum();
            let rel = relative_error(dot_a, dot_n);
            assert!(rel < 1e-4, "param {:?}: relative error {rel}", p.shape());
        }
    }

    #[test]
    fn fused_attention_matches_composed_path() {
        let mut rng = Rng::new(77);
        let q = Tensor::randn(&[9, 6], &mut rng);
        let k = Tensor::randn(&[5, 6], &mut rng);
        let v = Tensor::randn(&[5, 6], &mut rng);
        // untracked inputs dispatch to the fused kernel
        let fused = Tensor::attention(&q, &k, &v).unwrap();
        // tracked clones force the composed path
        let qt = Tensor::param(q.shape(), q.to_vec()).unwrap();
        let kt = Tensor::param(k.shape(), k.to_vec()).unwrap();
        let vt = Tensor::param(v.shape(), v.to_vec()).unwrap();
        let composed = Tensor::attention(&qt, &kt, &vt).unwrap();
        assert!(composed.is_tracked());
        assert!(!fused.is_tracked());
        let gap = fused.with_data(|a| {
            composed.with_data(|b| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max))
        });
        assert!(gap < 1e-6, "fused and composed attention diverge by {gap}");
    }

    #[test]
    fn determinism_two_runs_bit_identical() {
        let run = || {
            let mut rng = Rng::new(123);
            let x = Tensor::randn(&[2, 8], &mut rng);
            let w = Tensor::randn(&[8, 8], &mut rng);
            let y = x.matmul(&w).unwrap().silu().unwrap().softmax().unwrap();
            y.to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
