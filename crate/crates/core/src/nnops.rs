//! Fused CPU kernels behind candle's autodiff.
//!
//! candle's stock CPU backend runs 2D convolution through a direct kernel
//! and group norm / GELU through long chains of composed ops; both are an
//! order of magnitude too slow for the training budgets here. These custom
//! ops keep the autodiff graph intact (each one carries its own backward)
//! while doing the heavy lifting in single fused passes:
//!
//! - [`conv2d`] — stride-1 convolution as im2col + batched matmul,
//! - [`gelu`] — tanh-approximation GELU,
//! - [`group_norm`] — fused group normalization plus a composed affine.
//!
//! All kernels support f32 and f64 (f64 is what makes finite-difference
//! gradient checks meaningful) and parallelize over disjoint output slices,
//! so results are bit-deterministic regardless of thread count.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};
use rayon::prelude::*;

use crate::error::Result;

fn contiguous_slice<'a, T: WithDType>(src: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((o1, o2)) => Ok(&src[o1..o2]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

// ---------------------------------------------------------------------------
// im2col convolution
// ---------------------------------------------------------------------------

/// Unfold (B, C, H, W) into (B, C*K*K, OH*OW) patch columns, stride 1.
struct Im2Col {
    kernel: usize,
    padding: usize,
}

impl Im2Col {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.padding - self.kernel + 1, w + 2 * self.padding - self.kernel + 1)
    }

    fn fwd<T: WithDType>(&self, src: &[T], dims: &[usize]) -> (Vec<T>, Shape) {
        let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let (oh, ow) = self.out_hw(h, w);
        let (k, p) = (self.kernel, self.padding);
        let row_len = oh * ow;
        let rows = c * k * k;
        let mut dst = vec![T::zero(); b * rows * row_len];
        dst.par_chunks_mut(rows * row_len)
            .zip(src.par_chunks(c * h * w))
            .for_each(|(dst_b, src_b)| {
                for ci in 0..c {
                    let plane = &src_b[ci * h * w..(ci + 1) * h * w];
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = &mut dst_b[((ci * k + ki) * k + kj) * row_len..][..row_len];
                            // Valid output columns for this kernel offset.
                            let ow_lo = p.saturating_sub(kj);
                            let ow_hi = (w + p - kj).min(ow);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oi in 0..oh {
                                let ih = oi + ki;
                                if ih < p || ih >= h + p {
                                    continue;
                                }
                                let iw0 = ow_lo + kj - p;
                                let n = ow_hi - ow_lo;
                                let src_row = &plane[(ih - p) * w + iw0..][..n];
                                row[oi * ow + ow_lo..][..n].copy_from_slice(src_row);
                            }
                        }
                    }
                }
            });
        (dst, Shape::from_dims(&[b, rows, row_len]))
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let dims = [dims.0, dims.1, dims.2, dims.3];
        match storage {
            CpuStorage::F32(s) => {
                let (dst, shape) = self.fwd(contiguous_slice(s, layout)?, &dims);
                Ok((CpuStorage::F32(dst), shape))
            }
            CpuStorage::F64(s) => {
                let (dst, shape) = self.fwd(contiguous_slice(s, layout)?, &dims);
                Ok((CpuStorage::F64(dst), shape))
            }
            _ => candle_core::bail!("im2col: unsupported dtype"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let grad = grad_res.contiguous()?.apply_op1(Col2Im {
            kernel: self.kernel,
            padding: self.padding,
            height: h,
            width: w,
        })?;
        Ok(Some(grad))
    }
}

/// Scatter-add patch columns back onto the (B, C, H, W) input grid; the
/// adjoint of [`Im2Col`].
struct Col2Im {
    kernel: usize,
    padding: usize,
    height: usize,
    width: usize,
}

impl Col2Im {
    fn fwd<T: WithDType>(&self, src: &[T], b: usize, rows: usize, row_len: usize) -> (Vec<T>, Shape) {
        let (k, p, h, w) = (self.kernel, self.padding, self.height, self.width);
        let c = rows / (k * k);
        let oh = h + 2 * p - k + 1;
        let ow = w + 2 * p - k + 1;
        debug_assert_eq!(row_len, oh * ow);
        let mut dst = vec![T::zero(); b * c * h * w];
        dst.par_chunks_mut(c * h * w)
            .zip(src.par_chunks(rows * row_len))
            .for_each(|(dst_b, src_b)| {
                for ci in 0..c {
                    let plane = &mut dst_b[ci * h * w..(ci + 1) * h * w];
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = &src_b[((ci * k + ki) * k + kj) * row_len..][..row_len];
                            let ow_lo = p.saturating_sub(kj);
                            let ow_hi = (w + p - kj).min(ow);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oi in 0..oh {
                                let ih = oi + ki;
                                if ih < p || ih >= h + p {
                                    continue;
                                }
                                let iw0 = ow_lo + kj - p;
                                let n = ow_hi - ow_lo;
                                let dst_row = &mut plane[(ih - p) * w + iw0..][..n];
                                for (d, s) in dst_row.iter_mut().zip(&row[oi * ow + ow_lo..][..n]) {
                                    *d += *s;
                                }
                            }
                        }
                    }
                }
            });
        (dst, Shape::from_dims(&[b, c, h, w]))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, rows, row_len) = layout.shape().dims3()?;
        match storage {
            CpuStorage::F32(s) => {
                let (dst, shape) = self.fwd(contiguous_slice(s, layout)?, b, rows, row_len);
                Ok((CpuStorage::F32(dst), shape))
            }
            CpuStorage::F64(s) => {
                let (dst, shape) = self.fwd(contiguous_slice(s, layout)?, b, rows, row_len);
                Ok((CpuStorage::F64(dst), shape))
            }
            _ => candle_core::bail!("col2im: unsupported dtype"),
        }
    }
}

/// Stride-1 2D convolution: im2col + batched matmul.
///
/// `weight` is (C_out, C_in, K, K); 1x1 kernels skip the unfold entirely.
/// Gradients reach the input through [`Col2Im`] and the weight/bias through
/// the matmul and broadcast ops.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    let (b, _c, h, w) = x.dims4()?;
    let (c_out, c_in, kh, kw) = weight.dims4()?;
    debug_assert_eq!(kh, kw);
    let w2 = weight.reshape((c_out, c_in * kh * kw))?;
    let y = if kh == 1 && padding == 0 {
        let cols = x.reshape((b, c_in, h * w))?;
        w2.broadcast_matmul(&cols)?.reshape((b, c_out, h, w))?
    } else {
        let cols = x.contiguous()?.apply_op1(Im2Col { kernel: kh, padding })?;
        let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
        w2.broadcast_matmul(&cols)?.reshape((b, c_out, oh, ow))?
    };
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, c_out, 1, 1))?)?,
        None => y,
    };
    Ok(y)
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[inline]
fn gelu_scalar<T: WithDType + num_traits::Float>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_COEF);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar<T: WithDType + num_traits::Float>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_COEF);
    let three_a = T::from_f64(3.0 * GELU_COEF);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (T::one() + three_a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

struct FusedGelu;

fn unary_map<T: WithDType + Send + Sync>(src: &[T], f: impl Fn(T) -> T + Send + Sync) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    src.par_chunks(1 << 14)
        .zip(dst.par_chunks_mut(1 << 14))
        .for_each(|(s, d)| {
            for (si, di) in s.iter().zip(d.iter_mut()) {
                *di = f(*si);
            }
        });
    dst
}

impl CustomOp1 for FusedGelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = layout.shape().clone();
        match storage {
            CpuStorage::F32(s) => {
                let dst = unary_map(contiguous_slice(s, layout)?, gelu_scalar::<f32>);
                Ok((CpuStorage::F32(dst), shape))
            }
            CpuStorage::F64(s) => {
                let dst = unary_map(contiguous_slice(s, layout)?, gelu_scalar::<f64>);
                Ok((CpuStorage::F64(dst), shape))
            }
            _ => candle_core::bail!("gelu: unsupported dtype"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2(&grad_res.contiguous()?, GeluGrad)?))
    }
}

/// Elementwise `grad * gelu'(x)`.
struct GeluGrad;

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType + num_traits::Float>(
            x: &[T],
            l1: &Layout,
            g: &[T],
            l2: &Layout,
        ) -> candle_core::Result<(Vec<T>, Shape)> {
            let x = contiguous_slice(x, l1)?;
            let g = contiguous_slice(g, l2)?;
            let mut dst = vec![T::zero(); x.len()];
            dst.par_chunks_mut(1 << 14)
                .zip(x.par_chunks(1 << 14).zip(g.par_chunks(1 << 14)))
                .for_each(|(d, (x, g))| {
                    for ((di, xi), gi) in d.iter_mut().zip(x).zip(g) {
                        *di = *gi * gelu_grad_scalar(*xi);
                    }
                });
            Ok((dst, l1.shape().clone()))
        }
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let (dst, shape) = run(x, l1, g, l2)?;
                Ok((CpuStorage::F32(dst), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let (dst, shape) = run(x, l1, g, l2)?;
                Ok((CpuStorage::F64(dst), shape))
            }
            _ => candle_core::bail!("gelu-grad: unsupported dtype"),
        }
    }
}

/// GELU with the tanh approximation, fused forward and backward.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(FusedGelu)?)
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

/// Normalize (B, C, H, W) per (batch, group) to zero mean and unit variance.
/// The affine transform stays outside so autodiff owns its gradients.
struct GroupNormalize {
    groups: usize,
    eps: f64,
}

impl GroupNormalize {
    fn fwd<T: WithDType + num_traits::Float>(&self, src: &[T], dims: &[usize]) -> Vec<T> {
        let group_len = dims[1] / self.groups * dims[2] * dims[3];
        let eps = T::from_f64(self.eps);
        let mut dst = vec![T::zero(); src.len()];
        dst.par_chunks_mut(group_len)
            .zip(src.par_chunks(group_len))
            .for_each(|(d, s)| {
                let n = T::from_f64(group_len as f64);
                let mut mean = T::zero();
                for v in s {
                    mean += *v;
                }
                mean = mean / n;
                let mut var = T::zero();
                for v in s {
                    let c = *v - mean;
                    var += c * c;
                }
                var = var / n;
                let ivar = T::one() / (var + eps).sqrt();
                for (di, si) in d.iter_mut().zip(s) {
                    *di = (*si - mean) * ivar;
                }
            });
        dst
    }
}

impl CustomOp1 for GroupNormalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, _, _) = layout.shape().dims4()?;
        if c % self.groups != 0 {
            candle_core::bail!("group-normalize: {} channels not divisible by {} groups", c, self.groups);
        }
        let shape = layout.shape().clone();
        let dims = shape.dims().to_vec();
        match storage {
            CpuStorage::F32(s) => {
                let dst = self.fwd::<f32>(contiguous_slice(s, layout)?, &dims);
                Ok((CpuStorage::F32(dst), shape))
            }
            CpuStorage::F64(s) => {
                let dst = self.fwd::<f64>(contiguous_slice(s, layout)?, &dims);
                Ok((CpuStorage::F64(dst), shape))
            }
            _ => candle_core::bail!("group-normalize: unsupported dtype"),
        }
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = arg.apply_op3(res, &grad_res.contiguous()?, GroupNormalizeGrad {
            groups: self.groups,
            eps: self.eps,
        })?;
        Ok(Some(grad))
    }
}

/// Input gradient of [`GroupNormalize`]:
/// `dx = ivar * (dy - mean(dy) - xhat * mean(dy * xhat))` per group.
struct GroupNormalizeGrad {
    groups: usize,
    eps: f64,
}

impl GroupNormalizeGrad {
    fn fwd<T: WithDType + num_traits::Float>(&self, x: &[T], xhat: &[T], dy: &[T], dims: &[usize]) -> Vec<T> {
        let group_len = dims[1] / self.groups * dims[2] * dims[3];
        let eps = T::from_f64(self.eps);
        let mut dst = vec![T::zero(); x.len()];
        dst.par_chunks_mut(group_len)
            .zip(x.par_chunks(group_len).zip(xhat.par_chunks(group_len).zip(dy.par_chunks(group_len))))
            .for_each(|(d, (x, (xh, dy)))| {
                let n = T::from_f64(group_len as f64);
                let mut mean = T::zero();
                for v in x {
                    mean += *v;
                }
                mean = mean / n;
                let mut var = T::zero();
                for v in x {
                    let c = *v - mean;
                    var += c * c;
                }
                var = var / n;
                let ivar = T::one() / (var + eps).sqrt();
                let mut mean_dy = T::zero();
                let mut mean_dy_xhat = T::zero();
                for (g, h) in dy.iter().zip(xh) {
                    mean_dy += *g;
                    mean_dy_xhat += *g * *h;
                }
                mean_dy = mean_dy / n;
                mean_dy_xhat = mean_dy_xhat / n;
                for ((di, gi), hi) in d.iter_mut().zip(dy).zip(xh) {
                    *di = ivar * (*gi - mean_dy - *hi * mean_dy_xhat);
                }
            });
        dst
    }
}

impl CustomOp3 for GroupNormalizeGrad {
    fn name(&self) -> &'static str {
        "group-normalize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = l1.shape().clone();
        let dims = shape.dims().to_vec();
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(xh), CpuStorage::F32(dy)) => {
                let dst = self.fwd::<f32>(
                    contiguous_slice(x, l1)?,
                    contiguous_slice(xh, l2)?,
                    contiguous_slice(dy, l3)?,
                    &dims,
                );
                Ok((CpuStorage::F32(dst), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(xh), CpuStorage::F64(dy)) => {
                let dst = self.fwd::<f64>(
                    contiguous_slice(x, l1)?,
                    contiguous_slice(xh, l2)?,
                    contiguous_slice(dy, l3)?,
                    &dims,
                );
                Ok((CpuStorage::F64(dst), shape))
            }
            _ => candle_core::bail!("group-normalize-grad: unsupported dtype"),
        }
    }
}

/// Group normalization with learnable per-channel scale and shift.
pub fn group_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let c = x.dim(1)?;
    let xhat = x.contiguous()?.apply_op1(GroupNormalize { groups, eps })?;
    let y = xhat
        .broadcast_mul(&weight.reshape((1, c, 1, 1))?)?
        .broadcast_add(&bias.reshape((1, c, 1, 1))?)?;
    Ok(y)
}
