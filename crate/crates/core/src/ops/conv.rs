//! im2col + GEMM convolution kernels.
//!
//! Every kernel works sample by sample. Weight gradients are reduced over
//! fixed-size sample chunks and then summed in chunk order, so the result is
//! bit-identical no matter how many rayon threads run the chunks.

use rayon::prelude::*;

use crate::error::{PcnError, Result};
use crate::tensor::{Scalar, Tensor};

/// Samples per weight-gradient partial sum. Fixed so the reduction order does
/// not depend on the thread pool.
const GRAD_CHUNK: usize = 8;

/// Stride and zero padding of a square convolution. No bias, no dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with the padding that keeps H x W for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        // Floor division: trailing rows that do not fill a window are dropped.
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// A convolution weight `[C_out, C_in, k, k]` with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T: Scalar> {
    pub weights: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        match weights.shape() {
            &[_, _, kh, kw] if kh == kw => {}
            s => {
                return Err(PcnError::shape(
                    "conv kernel",
                    format!("expected [C_out, C_in, k, k], got {s:?}"),
                ))
            }
        }
        if stride == 0 {
            return Err(PcnError::Contract("conv stride must be positive".into()));
        }
        Ok(Self {
            weights,
            stride,
            padding,
        })
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }
}

struct Plan {
    n: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Plan {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.c_out * self.ho * self.wo
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
}

fn kernel_dims<T: Scalar>(w: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let [c_out, c_in, kh, kw] = w.dims4(op)?;
    if kh != kw {
        return Err(PcnError::shape(op, format!("non-square kernel {kh}x{kw}")));
    }
    Ok((c_out, c_in, kh))
}

/// Plan for a forward convolution of an `[N, C_in, H, W]` input.
fn conv_plan<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeometry) -> Result<Plan> {
    let [n, c, h, wd] = x.dims4("conv2d")?;
    let (c_out, c_in, k) = kernel_dims(w, "conv2d")?;
    if c != c_in {
        return Err(PcnError::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {c_in}"),
        ));
    }
    let (ho, wo) = match (geom.output_size(h, k), geom.output_size(wd, k)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(PcnError::shape(
                "conv2d",
                format!(
                    "{h}x{wd} input is smaller than k={k} (stride={}, pad={})",
                    geom.stride, geom.padding
                ),
            ))
        }
    };
    Ok(Plan {
        n,
        c_in,
        c_out,
        k,
        h,
        w: wd,
        ho,
        wo,
        geom,
    })
}

/// Plan for a transposed convolution taking `[N, C_out, H, W]` back to
/// `[N, C_in, H, W]`. Only same-size geometry (stride 1, pad (k-1)/2).
fn transpose_plan<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeometry) -> Result<Plan> {
    let [n, c, h, wd] = x.dims4("conv_transpose2d")?;
    let (c_out, c_in, k) = kernel_dims(w, "conv_transpose2d")?;
    if k % 2 == 0 || geom != ConvGeometry::same(k) {
        return Err(PcnError::Unsupported {
            op: "conv_transpose2d",
            detail: format!(
                "only stride 1 with padding (k-1)/2 is supported, got k={k} stride={} pad={}",
                geom.stride, geom.padding
            ),
        });
    }
    if c != c_out {
        return Err(PcnError::shape(
            "conv_transpose2d",
            format!("input has {c} channels, kernel maps from {c_out}"),
        ));
    }
    Ok(Plan {
        n,
        c_in,
        c_out,
        k,
        h,
        w: wd,
        ho: h,
        wo: wd,
        geom,
    })
}

/// Unfold one `[C, H, W]` sample into `[C*k*k, Ho*Wo]` patch columns.
fn im2col<T: Scalar>(x: &[T], p: &Plan, col: &mut [T]) {
    let (h, w, k) = (p.h, p.w, p.k);
    let (ho, wo) = (p.ho, p.wo);
    let s = p.geom.stride;
    let pad = p.geom.padding as isize;
    for ci in 0..p.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let out = &mut dst[oh * wo..(oh + 1) * wo];
                    let ih = (oh * s + ki) as isize - pad;
                    if ih < 0 || ih >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    if s == 1 {
                        // iw = ow + kj - pad must land in [0, w)
                        let shift = kj as isize - pad;
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                        out[..lo].fill(T::zero());
                        if hi > lo {
                            let start = (lo as isize + shift) as usize;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                        out[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ow, o) in out.iter_mut().enumerate() {
                            let iw = (ow * s + kj) as isize - pad;
                            *o = if iw >= 0 && iw < w as isize {
                                src[iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Fold patch columns back onto a `[C, H, W]` sample, accumulating overlaps.
fn col2im<T: Scalar>(col: &[T], p: &Plan, x: &mut [T]) {
    let (h, w, k) = (p.h, p.w, p.k);
    let (ho, wo) = (p.ho, p.wo);
    let s = p.geom.stride;
    let pad = p.geom.padding as isize;
    for ci in 0..p.c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - pad;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let line = &src[oh * wo..(oh + 1) * wo];
                    if s == 1 {
                        let shift = kj as isize - pad;
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                        if hi > lo {
                            let start = (lo as isize + shift) as usize;
                            for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ow, &v) in line.iter().enumerate() {
                            let iw = (ow * s + kj) as isize - pad;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Sum per-chunk weight gradients in chunk order.
fn reduce_chunks<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let p = conv_plan(x, w, geom)?;
    let mut out = vec![T::zero(); p.n * p.out_plane()];
    let wd = w.data();
    out.par_chunks_mut(p.out_plane())
        .zip(x.data().par_chunks(p.in_plane()))
        .for_each_init(
            || vec![T::zero(); if p.is_pointwise() { 0 } else { p.patch() * p.out_hw() }],
            |col, (y, xs)| {
                let cols: &[T] = if p.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &p, col);
                    col
                };
                T::gemm(false, false, p.c_out, p.out_hw(), p.patch(), T::one(), wd, cols, T::zero(), y);
            },
        );
    Tensor::from_vec(&[p.n, p.c_out, p.ho, p.wo], out)
}

/// Gradients of `conv2d` with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let p = conv_plan(x, w, geom)?;
    if dy.shape() != [p.n, p.c_out, p.ho, p.wo] {
        return Err(PcnError::shape("conv2d_backward", format!("dy shape {:?}", dy.shape())));
    }
    let wd = w.data();
    let mut dx = vec![T::zero(); x.numel()];
    let chunk_in = GRAD_CHUNK * p.in_plane();
    let chunk_out = GRAD_CHUNK * p.out_plane();
    let parts: Vec<Vec<T>> = dx
        .par_chunks_mut(chunk_in)
        .zip(x.data().par_chunks(chunk_in))
        .zip(dy.data().par_chunks(chunk_out))
        .map(|((dxc, xc), dyc)| {
            let mut dw = vec![T::zero(); w.numel()];
            let mut col = vec![T::zero(); p.patch() * p.out_hw()];
            for ((dxs, xs), dys) in dxc
                .chunks_mut(p.in_plane())
                .zip(xc.chunks(p.in_plane()))
                .zip(dyc.chunks(p.out_plane()))
            {
                if p.is_pointwise() {
                    T::gemm(false, true, p.c_out, p.patch(), p.out_hw(), T::one(), dys, xs, T::one(), &mut dw);
                    T::gemm(true, false, p.patch(), p.out_hw(), p.c_out, T::one(), wd, dys, T::zero(), dxs);
                } else {
                    im2col(xs, &p, &mut col);
                    T::gemm(false, true, p.c_out, p.patch(), p.out_hw(), T::one(), dys, &col, T::one(), &mut dw);
                    T::gemm(true, false, p.patch(), p.out_hw(), p.c_out, T::one(), wd, dys, T::zero(), &mut col);
                    col2im(&col, &p, dxs);
                }
            }
            dw
        })
        .collect();
    let dw = reduce_chunks(parts, w.numel());
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
    ))
}

/// Transposed convolution: the exact adjoint of [`conv2d`] with the same
/// kernel and geometry. `x` is `[N, C_out, H, W]`, result `[N, C_in, H, W]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let p = transpose_plan(x, w, geom)?;
    let wd = w.data();
    let mut out = vec![T::zero(); p.n * p.in_plane()];
    out.par_chunks_mut(p.in_plane())
        .zip(x.data().par_chunks(p.out_plane()))
        .for_each_init(
            || vec![T::zero(); p.patch() * p.out_hw()],
            |col, (y, xs)| {
                if p.is_pointwise() {
                    T::gemm(true, false, p.patch(), p.out_hw(), p.c_out, T::one(), wd, xs, T::zero(), y);
                } else {
                    T::gemm(true, false, p.patch(), p.out_hw(), p.c_out, T::one(), wd, xs, T::zero(), col);
                    col2im(col, &p, y);
                }
            },
        );
    Tensor::from_vec(&[p.n, p.c_in, p.h, p.w], out)
}

/// Gradients of [`conv_transpose2d`] with respect to input and kernel.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let p = transpose_plan(x, w, geom)?;
    if dy.shape() != [p.n, p.c_in, p.h, p.w] {
        return Err(PcnError::shape(
            "conv_transpose2d_backward",
            format!("dy shape {:?}", dy.shape()),
        ));
    }
    let wd = w.data();
    let mut dx = vec![T::zero(); x.numel()];
    let chunk_x = GRAD_CHUNK * p.out_plane();
    let chunk_dy = GRAD_CHUNK * p.in_plane();
    let parts: Vec<Vec<T>> = dx
        .par_chunks_mut(chunk_x)
        .zip(x.data().par_chunks(chunk_x))
        .zip(dy.data().par_chunks(chunk_dy))
        .map(|((dxc, xc), dyc)| {
            let mut dw = vec![T::zero(); w.numel()];
            let mut col = vec![T::zero(); p.patch() * p.out_hw()];
            for ((dxs, xs), dys) in dxc
                .chunks_mut(p.out_plane())
                .zip(xc.chunks(p.out_plane()))
                .zip(dyc.chunks(p.in_plane()))
            {
                let cols: &[T] = if p.is_pointwise() {
                    dys
                } else {
                    im2col(dys, &p, &mut col);
                    &col
                };
                T::gemm(false, false, p.c_out, p.out_hw(), p.patch(), T::one(), wd, cols, T::zero(), dxs);
                T::gemm(false, true, p.c_out, p.patch(), p.out_hw(), T::one(), xs, cols, T::one(), &mut dw);
            }
            dw
        })
        .collect();
    let dw = reduce_chunks(parts, w.numel());
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: &[usize]) -> Tensor<f64> {
        Tensor::full(shape, 1.0).unwrap()
    }

    #[test]
    fn three_by_three_ones() {
        let y = conv2d(&ones(&[1, 1, 3, 3]), &ones(&[1, 1, 3, 3]), ConvGeometry::new(1, 1)).unwrap();
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
        let z = conv_transpose2d(&ones(&[1, 1, 3, 3]), &ones(&[1, 1, 3, 3]), ConvGeometry::new(1, 1))
            .unwrap();
        assert_eq!(z.data(), y.data());
    }

    #[test]
    fn pointwise_identity() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 3], vec![1., -2., 3., 4., 5., -6.]).unwrap();
        let w = ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, ConvGeometry::new(1, 0)).unwrap(), x);
        assert_eq!(conv_transpose2d(&x, &w, ConvGeometry::new(1, 0)).unwrap(), x);
    }

    #[test]
    fn rejects_channel_and_tiling_mismatch() {
        let x = ones(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &ones(&[1, 3, 3, 3]), ConvGeometry::new(1, 1)).is_err());
        assert!(conv2d(&x, &ones(&[1, 2, 7, 7]), ConvGeometry::new(1, 1)).is_err());
    }

    #[test]
    fn transpose_rejects_strided_geometry() {
        let x = ones(&[1, 1, 4, 4]);
        let err = conv_transpose2d(&x, &ones(&[1, 1, 3, 3]), ConvGeometry::new(2, 1)).unwrap_err();
        assert!(matches!(err, PcnError::Unsupported { .. }));
    }

    #[test]
    fn strided_seven_by_seven_output_size() {
        let g = ConvGeometry::new(2, 3);
        assert_eq!(g.output_size(224, 7), Some(112));
        assert_eq!(g.output_size(32, 7), Some(16));
        assert_eq!(g.output_size(8, 7), Some(4));
    }
}
