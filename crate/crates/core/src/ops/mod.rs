//! Forward and backward kernels for every operator the network uses.
//!
//! These are plain functions on tensors; [`crate::tape`] records them for
//! reverse-mode differentiation.

pub mod conv;
pub mod norm;

pub use conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvGeometry, ConvKernel,
};
pub use norm::{batchnorm2d, BatchNormState, BatchStats, BnMode, BN_EPS, BN_MOMENTUM};

use crate::error::{PcnError, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, "relu backward", |v, g| if v > T::zero() { g } else { T::zero() })
}

/// 2x2 max pooling with stride 2. Also returns, per output, the flat input
/// index of the first maximal element in scan order.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(PcnError::shape("maxpool2", format!("odd spatial size {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + 2 * oh * w + 2 * ow;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oh + di) * w + 2 * ow + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != dy.numel() {
        return Err(PcnError::shape("maxpool2 backward", "argmax/dy length"));
    }
    let mut dx = Tensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let hw = h * w;
    let inv = T::from_f64(1.0 / hw as f64);
    let out = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let hw: usize = input_shape[2..].iter().product();
    let inv = T::from_f64(1.0 / hw as f64);
    let data = dy
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect();
    Tensor::from_vec(input_shape, data)
}

/// `x W^T + b` with `x: [N, D]`, `W: [K, D]`, `b: [K]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, d] = x.dims2("linear")?;
    let [k, dw] = w.dims2("linear")?;
    if d != dw || b.shape() != [k] {
        return Err(PcnError::shape(
            "linear",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    T::gemm(false, true, n, k, d, T::one(), x.data(), w.data(), T::one(), &mut out);
    Tensor::from_vec(&[n, k], out)
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, d] = x.dims2("linear backward")?;
    let [k, _] = w.dims2("linear backward")?;
    if dy.shape() != [n, k] {
        return Err(PcnError::shape("linear backward", "dy shape"));
    }
    let mut dx = vec![T::zero(); n * d];
    T::gemm(false, false, n, d, k, T::one(), dy.data(), w.data(), T::zero(), &mut dx);
    let mut dw = vec![T::zero(); k * d];
    T::gemm(true, false, k, d, n, T::one(), dy.data(), x.data(), T::zero(), &mut dw);
    let mut db = vec![T::zero(); k];
    for row in dy.data().chunks(k) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok((
        Tensor::from_vec(&[n, d], dx)?,
        Tensor::from_vec(&[k, d], dw)?,
        Tensor::from_vec(&[k], db)?,
    ))
}

/// Mean cross-entropy of softmax(logits) against class indices. Returns the
/// loss and the row-stochastic probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [n, k] = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(PcnError::shape(
            "softmax_cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(PcnError::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = 0.0f64;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].to_f64() - max);
        probs.extend(exps.iter().map(|e| T::from_f64(e / z)));
    }
    Ok((T::from_f64(loss / n as f64), Tensor::from_vec(&[n, k], probs)?))
}

/// Gradient of the mean loss: `(softmax - onehot) / N`, scaled by `upstream`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Result<Tensor<T>> {
    let [n, k] = probs.dims2("softmax_cross_entropy backward")?;
    let scale = upstream / T::from_f64(n as f64);
    let mut g = probs.data().to_vec();
    for (row, &label) in g.chunks_mut(k).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::from_vec(&[n, k], g)
}

/// Multiply each channel of an NCHW map by its own scalar.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c, h, w] = x.dims4("scale_channels")?;
    if scale.shape() != [c] {
        return Err(PcnError::shape(
            "scale_channels",
            format!("{c} channels, scale {:?}", scale.shape()),
        ));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_mut(hw).enumerate() {
        let s = scale.data()[i % c];
        for v in plane {
            *v *= s;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Returns `(dx, dscale)`.
pub fn scale_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, c, h, w] = x.dims4("scale_channels backward")?;
    let hw = h * w;
    let dx = scale_channels(dy, scale)?;
    let mut ds = vec![T::zero(); c];
    for (i, (xp, gp)) in x.data().chunks(hw).zip(dy.data().chunks(hw)).enumerate() {
        let s: T = xp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        ds[i % c] += s;
    }
    Ok((dx, Tensor::from_vec(&[c], ds)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_examples() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = t(&[2], &[-3.0, -0.5]);
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn maxpool_picks_window_max() {
        let (y, arg) = maxpool2(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (y, _) = maxpool2(&Tensor::<f64>::full(&[1, 2, 4, 4], 0.5).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn maxpool_ties_route_to_first_in_scan_order() {
        let (_, arg) = maxpool2(&t(&[1, 1, 2, 2], &[1., 5., 5., 5.])).unwrap();
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn maxpool_rejects_odd() {
        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 1, 3, 4]).unwrap()).is_err());
    }

    #[test]
    fn gap_examples() {
        let y = global_avg_pool(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let x = t(&[2, 2, 1, 1], &[1., 2., 3., 4.]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), x.data());
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let zero = t(&[2], &[0., 0.]);
        assert_eq!(linear(&x, &eye, &zero).unwrap(), x);
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let y = linear(&Tensor::zeros(&[2, 2]).unwrap(), &Tensor::zeros(&[3, 2]).unwrap(), &b).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(linear(&x, &Tensor::zeros(&[3, 3]).unwrap(), &b).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, probs) =
            softmax_cross_entropy(&Tensor::<f64>::zeros(&[1, 10]).unwrap(), &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((probs.sum() - 1.0).abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[100.0, 0.0]), &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]),
            Err(PcnError::Contract(_))
        ));
    }

    #[test]
    fn scale_channels_broadcasts_per_channel() {
        let x = Tensor::<f64>::full(&[2, 2, 1, 2], 1.0).unwrap();
        let y = scale_channels(&x, &t(&[2], &[2.0, -1.0])).unwrap();
        assert_eq!(y.data(), &[2., 2., -1., -1., 2., 2., -1., -1.]);
    }
}
