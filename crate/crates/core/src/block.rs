//! The PcConv recurrent block.
//!
//! One block runs, on its input `x`:
//!
//! ```text
//! x_bn  = BN(x)
//! r(0)  = ReLU(ff * x_bn)
//! for t in 1..=T:
//!     p(t) = fb^T * r(t-1)              (transposed conv, top-down prediction)
//!     e(t) = ReLU(x_bn - p(t))          (rectified prediction error)
//!     r(t) = r(t-1) + alpha . (ff * e(t))
//! y     = r(T) + bp * x_bn               (1x1 bypass), then 2x2 max-pool if flagged
//! ```
//!
//! The same feedforward kernel drives the initial sweep and every error
//! update. `alpha` holds one non-negative rate per output filter. BN is
//! applied once, outside the cycle loop.

use rand::Rng;

use crate::error::{PcnError, Result};
use crate::ops::{BatchNormState, BatchStats, BnMode, ConvGeometry, ConvKernel};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const FF_KERNEL: usize = 3;
pub const ALPHA_INIT: f64 = 0.1;

/// Learnable state of one block. `fb` and `alpha` are absent in the
/// feedforward-only ("plain") counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct PcBlockParams<T: Scalar> {
    /// `[C_out, C_in, 3, 3]`, stride 1, pad 1.
    pub ff: ConvKernel<T>,
    /// `[C_out, C_in, 3, 3]` applied as a transposed conv (C_out -> C_in).
    pub fb: Option<ConvKernel<T>>,
    /// `[C_out, C_in, 1, 1]`.
    pub bp: ConvKernel<T>,
    /// `[C_out]`, kept >= 0.
    pub alpha: Option<Tensor<T>>,
    /// Over the block input's C_in channels.
    pub bn: BatchNormState<T>,
    pub pool_after: bool,
}

/// Zero-mean Gaussian with std `sqrt(2 / (k^2 * fan_in))`.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(
    shape: [usize; 4],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let k = shape[2];
    let std = (2.0 / (k * k * fan_in) as f64).sqrt();
    Tensor::normal(&shape, std, rng)
}

/// Random streams for each parameter role of a block.
pub struct BlockRngs<'a, R: Rng + ?Sized> {
    pub ff: &'a mut R,
    pub fb: &'a mut R,
    pub bp: &'a mut R,
}

impl<T: Scalar> PcBlockParams<T> {
    /// Freshly initialized block. `recurrent = false` builds the plain block.
    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        pool_after: bool,
        recurrent: bool,
        rngs: BlockRngs<'_, R>,
    ) -> Result<Self> {
        let k = FF_KERNEL;
        let same = ConvGeometry::same(k);
        let ff = ConvKernel::new(
            he_normal([c_out, c_in, k, k], c_in, rngs.ff)?,
            same.stride,
            same.padding,
        )?;
        let bp = ConvKernel::new(he_normal([c_out, c_in, 1, 1], c_in, rngs.bp)?, 1, 0)?;
        let (fb, alpha) = if recurrent {
            // The feedback conv reads C_out channels.
            let fb = ConvKernel::new(
                he_normal([c_out, c_in, k, k], c_out, rngs.fb)?,
                same.stride,
                same.padding,
            )?;
            (Some(fb), Some(Tensor::full(&[c_out], T::from_f64(ALPHA_INIT))?))
        } else {
            (None, None)
        };
        Ok(Self {
            ff,
            fb,
            bp,
            alpha,
            bn: BatchNormState::new(c_in)?,
            pool_after,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.ff.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.ff.out_channels()
    }

    pub fn is_recurrent(&self) -> bool {
        self.fb.is_some()
    }

    /// Learnable scalars in this block.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Learnable tensors in a fixed order: ff, fb, bp, alpha, gamma, beta.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![("ff", &self.ff.weights)];
        if let Some(fb) = &self.fb {
            out.push(("fb", &fb.weights));
        }
        out.push(("bp", &self.bp.weights));
        if let Some(a) = &self.alpha {
            out.push(("alpha", a));
        }
        out.push(("bn.gamma", &self.bn.gamma));
        out.push(("bn.beta", &self.bn.beta));
        out
    }

    /// Same order as [`Self::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![("ff", &mut self.ff.weights)];
        if let Some(fb) = &mut self.fb {
            out.push(("fb", &mut fb.weights));
        }
        out.push(("bp", &mut self.bp.weights));
        if let Some(a) = &mut self.alpha {
            out.push(("alpha", a));
        }
        out.push(("bn.gamma", &mut self.bn.gamma));
        out.push(("bn.beta", &mut self.bn.beta));
        out
    }

    /// Project the update rates onto the non-negative orthant.
    pub fn clamp_alpha(&mut self) {
        if let Some(alpha) = &mut self.alpha {
            for a in alpha.data_mut() {
                if !(*a >= T::zero()) {
                    *a = T::zero();
                }
            }
        }
    }

    /// Record the learnable tensors as tape leaves.
    pub fn register(&self, tape: &mut Tape<T>) -> BlockVars {
        BlockVars {
            ff: tape.leaf(self.ff.weights.clone()),
            fb: self.fb.as_ref().map(|k| tape.leaf(k.weights.clone())),
            bp: tape.leaf(self.bp.weights.clone()),
            alpha: self.alpha.as_ref().map(|a| tape.leaf(a.clone())),
            gamma: tape.leaf(self.bn.gamma.clone()),
            beta: tape.leaf(self.bn.beta.clone()),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[_, c, _, _] if c == self.in_channels() => Ok(()),
            s => Err(PcnError::shape(
                "pc_block_forward",
                format!("block expects {} input channels, got {s:?}", self.in_channels()),
            )),
        }
    }

    /// Record the batch normalization of the block input.
    pub fn normalize_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &BlockVars,
        x: Var,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check_input(tape.value(x).shape())?;
        match self.bn.mode {
            BnMode::Train => {
                let (v, stats) = tape.batchnorm_train(x, vars.gamma, vars.beta, self.bn.eps)?;
                Ok((v, Some(stats)))
            }
            BnMode::Eval => Ok((
                tape.batchnorm_eval(
                    x,
                    vars.gamma,
                    vars.beta,
                    &self.bn.running_mean,
                    &self.bn.running_var,
                    self.bn.eps,
                )?,
                None,
            )),
        }
    }

    /// Record the T recurrent cycles on an already normalized input.
    pub fn recur_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &BlockVars,
        x_bn: Var,
        cycles: usize,
    ) -> Result<Cycles> {
        let ff_geom = self.ff.geometry();
        let r0 = tape.conv2d(x_bn, vars.ff, ff_geom)?;
        let mut r = vec![tape.relu(r0)];
        let mut p = Vec::with_capacity(cycles);
        let mut e = Vec::with_capacity(cycles);
        if cycles == 0 {
            return Ok(Cycles { r, p, e });
        }
        let (Some(fb), Some(fb_var), Some(alpha)) = (&self.fb, vars.fb, vars.alpha) else {
            return Err(PcnError::Contract(format!(
                "feedforward-only block cannot run {cycles} recurrent cycle(s)"
            )));
        };
        for _ in 0..cycles {
            let prev = *r.last().expect("r(0) recorded");
            let pred = tape.conv_transpose2d(prev, fb_var, fb.geometry())?;
            let diff = tape.sub(x_bn, pred)?;
            let err = tape.relu(diff);
            let drive = tape.conv2d(err, vars.ff, ff_geom)?;
            let step = tape.scale_channels(drive, alpha)?;
            r.push(tape.add(prev, step)?);
            p.push(pred);
            e.push(err);
        }
        Ok(Cycles { r, p, e })
    }

    /// Bypass merge of a representation with the normalized input, then the
    /// optional pool. Used both by the forward pass and by analyses that
    /// restart the network from an intermediate `r(t)`.
    pub fn merge_tape(&self, tape: &mut Tape<T>, vars: &BlockVars, r: Var, x_bn: Var) -> Result<Var> {
        let bypass = tape.conv2d(x_bn, vars.bp, self.bp.geometry())?;
        let merged = tape.add(r, bypass)?;
        if self.pool_after {
            tape.maxpool2(merged)
        } else {
            Ok(merged)
        }
    }

    /// Record the full block.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &BlockVars,
        x: Var,
        cycles: usize,
    ) -> Result<BlockTape<T>> {
        let (x_bn, stats) = self.normalize_tape(tape, vars, x)?;
        let cyc = self.recur_tape(tape, vars, x_bn, cycles)?;
        let last = *cyc.r.last().expect("r(0) recorded");
        let y = self.merge_tape(tape, vars, last, x_bn)?;
        Ok(BlockTape {
            x_bn,
            r: cyc.r,
            p: cyc.p,
            e: cyc.e,
            y,
            stats,
        })
    }

    /// Run the recurrent core on an already normalized input.
    pub fn recur(&self, x_bn: &Tensor<T>, cycles: usize) -> Result<BlockTrace<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xb = tape.leaf(x_bn.clone());
        let cyc = self.recur_tape(&mut tape, &vars, xb, cycles)?;
        Ok(cyc.collect(&tape))
    }
}

/// Tape handles of one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ff: Var,
    pub fb: Option<Var>,
    pub bp: Var,
    pub alpha: Option<Var>,
    pub gamma: Var,
    pub beta: Var,
}

impl BlockVars {
    /// Same order as [`PcBlockParams::named_params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.ff];
        out.extend(self.fb);
        out.push(self.bp);
        out.extend(self.alpha);
        out.push(self.gamma);
        out.push(self.beta);
        out
    }
}

/// Handles of the recurrent states: `r` has T+1 entries, `p` and `e` T.
#[derive(Debug, Clone)]
pub struct Cycles {
    pub r: Vec<Var>,
    pub p: Vec<Var>,
    pub e: Vec<Var>,
}

impl Cycles {
    fn collect<T: Scalar>(&self, tape: &Tape<T>) -> BlockTrace<T> {
        let get = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        BlockTrace {
            r: get(&self.r),
            p: get(&self.p),
            e: get(&self.e),
        }
    }
}

/// One recorded block invocation.
#[derive(Debug, Clone)]
pub struct BlockTape<T: Scalar> {
    pub x_bn: Var,
    pub r: Vec<Var>,
    pub p: Vec<Var>,
    pub e: Vec<Var>,
    pub y: Var,
    /// Batch moments when BN ran in train mode.
    pub stats: Option<BatchStats<T>>,
}

impl<T: Scalar> BlockTape<T> {
    pub fn trace(&self, tape: &Tape<T>) -> BlockTrace<T> {
        Cycles {
            r: self.r.clone(),
            p: self.p.clone(),
            e: self.e.clone(),
        }
        .collect(tape)
    }
}

/// Representations `r(0..=T)`, predictions `p(1..=T)` and rectified errors
/// `e(1..=T)` of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace<T: Scalar> {
    pub r: Vec<Tensor<T>>,
    pub p: Vec<Tensor<T>>,
    pub e: Vec<Tensor<T>>,
}

/// Run one block on `x`. In train mode the BN running statistics are updated.
pub fn pc_block_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &mut PcBlockParams<T>,
    cycles: usize,
    trace: bool,
) -> Result<(Tensor<T>, Option<BlockTrace<T>>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = params.forward_tape(&mut tape, &vars, xv, cycles)?;
    if let Some(stats) = &out.stats {
        params.bn.update_running(stats);
    }
    let traced = trace.then(|| out.trace(&tape));
    Ok((tape.value(out.y).clone(), traced))
}

/// Layer-wise prediction loss `0.5 * sum(e^2)`.
pub fn prediction_loss<T: Scalar>(e: &Tensor<T>) -> T {
    e.data().iter().map(|&v| v * v).sum::<T>() * T::from_f64(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c_in: usize, c_out: usize, pool: bool, seed: u64) -> PcBlockParams<f64> {
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut c = ChaCha8Rng::seed_from_u64(seed + 2);
        PcBlockParams::init(
            c_in,
            c_out,
            pool,
            true,
            BlockRngs {
                ff: &mut a,
                fb: &mut b,
                bp: &mut c,
            },
        )
        .unwrap()
    }

    fn center_kernel(v: f64) -> ConvKernel<f64> {
        let mut w = vec![0.0; 9];
        w[4] = v;
        ConvKernel::new(Tensor::from_vec(&[1, 1, 3, 3], w).unwrap(), 1, 1).unwrap()
    }

    #[test]
    fn scalar_recursion_by_hand() {
        let mut params = block(1, 1, false, 0);
        params.ff = center_kernel(0.5);
        params.fb = Some(center_kernel(1.0));
        params.alpha = Some(Tensor::from_vec(&[1], vec![0.2]).unwrap());
        let x_bn = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let tr = params.recur(&x_bn, 1).unwrap();
        assert_eq!(tr.r[0].data(), &[0.5]);
        assert_eq!(tr.p[0].data(), &[0.5]);
        assert_eq!(tr.e[0].data(), &[0.5]);
        assert!((tr.r[1].data()[0] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn trace_lengths_shapes_and_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng).unwrap();
        let mut params = block(3, 4, true, 9);
        let (y, tr) = pc_block_forward(&x, &mut params, 3, true).unwrap();
        let tr = tr.unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        assert_eq!((tr.r.len(), tr.p.len(), tr.e.len()), (4, 3, 3));
        for r in &tr.r {
            assert_eq!(r.shape(), &[2, 4, 6, 6]);
        }
        for (p, e) in tr.p.iter().zip(&tr.e) {
            assert_eq!(p.shape(), &[2, 3, 6, 6]);
            assert!(e.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_alpha_freezes_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let mut params = block(3, 5, false, 1);
        params.alpha = Some(Tensor::zeros(&[5]).unwrap());
        let (y0, _) = pc_block_forward(&x, &mut params, 0, false).unwrap();
        for t in [1, 2, 5] {
            let (yt, _) = pc_block_forward(&x, &mut params, t, false).unwrap();
            assert_eq!(yt, y0);
        }
    }

    #[test]
    fn zero_cycles_is_plain_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let mut params = block(2, 3, false, 2);
        let (y, _) = pc_block_forward(&x, &mut params, 0, false).unwrap();

        let mut bn = BatchNormState::new(2).unwrap();
        let xb = crate::ops::batchnorm2d(&x, &mut bn).unwrap();
        let ff = crate::ops::conv2d(&xb, &params.ff.weights, params.ff.geometry()).unwrap();
        let bp = crate::ops::conv2d(&xb, &params.bp.weights, params.bp.geometry()).unwrap();
        let expect = crate::ops::relu(&ff).zip_map(&bp, "add", |a, b| a + b).unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn plain_block_refuses_cycles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = PcBlockParams::<f64>::init(
            2,
            2,
            false,
            false,
            BlockRngs {
                ff: &mut rng.clone(),
                fb: &mut rng.clone(),
                bp: &mut rng,
            },
        )
        .unwrap();
        let x = Tensor::full(&[1, 2, 2, 2], 1.0).unwrap();
        assert!(pc_block_forward(&x, &mut params, 1, false).is_err());
        assert!(pc_block_forward(&x, &mut params, 0, false).is_ok());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut params = block(3, 4, false, 0);
        let x = Tensor::<f64>::full(&[1, 2, 4, 4], 1.0).unwrap();
        assert!(matches!(
            pc_block_forward(&x, &mut params, 1, false),
            Err(PcnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn prediction_loss_examples() {
        assert_eq!(prediction_loss(&Tensor::<f64>::zeros(&[3]).unwrap()), 0.0);
        assert_eq!(prediction_loss(&Tensor::<f64>::full(&[2], 1.0).unwrap()), 1.0);
    }

    #[test]
    fn clamp_alpha_projects() {
        let mut params = block(1, 2, false, 0);
        params.alpha = Some(Tensor::from_vec(&[2], vec![-0.1, 0.2]).unwrap());
        params.clamp_alpha();
        assert_eq!(params.alpha.as_ref().unwrap().data(), &[0.0, 0.2]);
        params.clamp_alpha();
        assert_eq!(params.alpha.as_ref().unwrap().data(), &[0.0, 0.2]);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let p = block(16, 32, false, 0);
        assert_eq!(p.param_count(), 9 * 16 * 32 * 2 + 16 * 32 + 2 * 16 + 32);
    }
}
