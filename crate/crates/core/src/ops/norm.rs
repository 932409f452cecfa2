//! Per-channel batch normalization over NCHW maps.

use crate::error::{PcnError, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Learnable scale/shift plus running statistics for one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Fraction of the new batch statistic blended into the running value.
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::Train,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Blend batch statistics into the running estimates. `var` is the
    /// unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.unbiased_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Batch moments gathered by a train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

/// Cached values needed by the train-mode backward rule.
#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = x.dims4("batchnorm2d")?;
    let c = dims[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(PcnError::shape(
            "batchnorm2d",
            format!(
                "{c} channels but gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(dims)
}

/// Visit each channel's values: callback gets (channel, plane index range start) pairs.
fn for_channel_planes<T: Scalar>(
    dims: [usize; 4],
    data: &[T],
    mut f: impl FnMut(usize, &[T]),
) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * hw;
            f(ch, &data[start..start + hw]);
        }
    }
}

/// Train-mode forward: normalize with batch moments.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>, BatchStats<T>)> {
    let dims = check(x, gamma, beta)?;
    let [n, c, h, w] = dims;
    let count = n * h * w;
    if count < 2 {
        return Err(PcnError::DegenerateBatch { count });
    }
    // Moments accumulate in f64 regardless of T.
    let mut sum = vec![0.0f64; c];
    for_channel_planes(dims, x.data(), |ch, plane| {
        sum[ch] += plane.iter().map(|v| v.to_f64()).sum::<f64>();
    });
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; c];
    for_channel_planes(dims, x.data(), |ch, plane| {
        let m = mean[ch];
        sq[ch] += plane.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
    });
    let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let hw = h * w;
    let mut xhat = x.data().to_vec();
    let mut y = x.data().to_vec();
    for (i, (xh, yv)) in xhat.iter_mut().zip(y.iter_mut()).enumerate() {
        let ch = (i / hw) % c;
        let v = T::from_f64((xh.to_f64() - mean[ch]) * inv_std[ch]);
        *xh = v;
        *yv = gamma.data()[ch] * v + beta.data()[ch];
    }
    let stats = BatchStats {
        mean: mean.iter().map(|&m| T::from_f64(m)).collect(),
        unbiased_var: sq
            .iter()
            .map(|s| T::from_f64(s / (count - 1) as f64))
            .collect(),
    };
    let cache = BnCache {
        xhat: Tensor::from_vec(x.shape(), xhat)?,
        inv_std: inv_std.iter().map(|&v| T::from_f64(v)).collect(),
    };
    Ok((Tensor::from_vec(x.shape(), y)?, cache, stats))
}

/// Train-mode backward: returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    dy.expect_same_shape(&cache.xhat, "batchnorm2d backward")?;
    let dims = dy.dims4("batchnorm2d backward")?;
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut dbeta = vec![0.0f64; c];
    let mut dgamma = vec![0.0f64; c];
    for (i, (&g, &xh)) in dy.data().iter().zip(cache.xhat.data()).enumerate() {
        let ch = (i / hw) % c;
        dbeta[ch] += g.to_f64();
        dgamma[ch] += g.to_f64() * xh.to_f64();
    }
    // dx = gamma * inv_std / M * (M*dy - sum(dy) - xhat * sum(dy * xhat))
    let dx: Vec<T> = dy
        .data()
        .iter()
        .zip(cache.xhat.data())
        .enumerate()
        .map(|(i, (&g, &xh))| {
            let ch = (i / hw) % c;
            let scale = gamma.data()[ch].to_f64() * cache.inv_std[ch].to_f64() / count;
            T::from_f64(scale * (count * g.to_f64() - dbeta[ch] - xh.to_f64() * dgamma[ch]))
        })
        .collect();
    Ok((
        Tensor::from_vec(dy.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma.into_iter().map(T::from_f64).collect())?,
        Tensor::from_vec(&[c], dbeta.into_iter().map(T::from_f64).collect())?,
    ))
}

/// Eval-mode forward with fixed statistics. Returns the output and the
/// per-channel `1/sqrt(var + eps)` used.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let [_, c, h, w] = check(x, gamma, beta)?;
    if mean.shape() != [c] || var.shape() != [c] {
        return Err(PcnError::shape("batchnorm2d", "running statistics length"));
    }
    let inv_std: Vec<T> = var
        .data()
        .iter()
        .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();
    let hw = h * w;
    let y = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            gamma.data()[ch] * (v - mean.data()[ch]) * inv_std[ch] + beta.data()[ch]
        })
        .collect();
    Ok((Tensor::from_vec(x.shape(), y)?, inv_std))
}

/// Eval-mode backward: statistics are constants.
pub fn batchnorm_eval_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    dy.expect_same_shape(x, "batchnorm2d backward")?;
    let [_, c, h, w] = x.dims4("batchnorm2d backward")?;
    let hw = h * w;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); x.numel()];
    for (i, ((&g, &xv), d)) in dy.data().iter().zip(x.data()).zip(dx.iter_mut()).enumerate() {
        let ch = (i / hw) % c;
        let xhat = (xv - mean.data()[ch]) * inv_std[ch];
        dbeta[ch] += g;
        dgamma[ch] += g * xhat;
        *d = g * gamma.data()[ch] * inv_std[ch];
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

/// Stand-alone batch norm: normalizes `x` according to `state.mode` and, in
/// train mode, folds the batch statistics into the running estimates.
pub fn batchnorm2d<T: Scalar>(x: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    match state.mode {
        BnMode::Train => {
            let (y, _, stats) = batchnorm_train(x, &state.gamma, &state.beta, state.eps)?;
            state.update_running(&stats);
            Ok(y)
        }
        BnMode::Eval => Ok(batchnorm_eval(
            x,
            &state.gamma,
            &state.beta,
            &state.running_mean,
            &state.running_var,
            state.eps,
        )?
        .0),
    }
}
