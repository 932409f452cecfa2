//! Central-difference verification of every backward rule, of a single
//! PcConv block, and of whole models.
//!
//! Each check builds a scalar loss on a fresh [`Tape`], compares the
//! reverse-mode gradient of every input against central differences, and
//! reports `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf)`
//! over the coordinates checked. A coordinate whose `+eps` or `-eps`
//! evaluation takes a different ReLU or max-pool branch than the base point
//! straddles a kink; it is retried with a smaller step and skipped if the
//! branch still changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{BlockRngs, BlockVars, PcBlockParams};
use crate::error::{PcnError, Result};
use crate::ops::{BnMode, ConvGeometry, BN_EPS};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::zoo::{Arch, Model, ModelSpec};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-12;
const KINK_RETRIES: usize = 2;

/// Central differences of `f` at `x`: `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    check_eps(eps)?;
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(PcnError::Contract(format!("finite-difference step must be positive, got {eps}")))
    }
}

/// `max |a - n| / max(|a|_inf, |n|_inf)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(DENOM_FLOOR, f64::max);
    diff / scale
}

/// Outcome of one named check, merged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    fn merge(&mut self, other: &CheckResult) {
        self.worst_rel_err = self.worst_rel_err.max(other.worst_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    fn absorb(&mut self, r: CheckResult) {
        match self.results.iter_mut().find(|x| x.name == r.name) {
            Some(x) => x.merge(&r),
            None => self.results.push(r),
        }
    }

    /// The check with the largest error.
    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
    }

    pub fn failures(&self, tol: f64) -> Vec<&CheckResult> {
        self.results
            .iter()
            .filter(|r| !(r.worst_rel_err < tol))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub arch: Arch,
    pub cycles: Vec<usize>,
    pub input_size: usize,
    pub batch: usize,
    /// Coordinates sampled per model tensor.
    pub coords_per_tensor: usize,
    /// Batch-norm mode of the end-to-end models.
    pub bn_mode: BnMode,
    /// Corrupt one backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            eps: DEFAULT_EPS,
            arch: Arch::A,
            cycles: vec![1, 3, 5],
            input_size: 8,
            batch: 2,
            coords_per_tensor: 4,
            bn_mode: BnMode::Train,
            fault: None,
        }
    }
}

/// Scalar loss and branch fingerprint of one evaluation.
type Eval = (f64, Option<u64>);

/// Numeric derivative at coordinate `i` of `inputs[which]`, or `None` when
/// the coordinate sits on a kink at every step size tried.
fn probe(
    eval: &mut dyn FnMut(&[Tensor<f64>]) -> Result<Eval>,
    inputs: &mut [Tensor<f64>],
    which: usize,
    i: usize,
    eps: f64,
    base_sig: Option<u64>,
) -> Result<Option<f64>> {
    let orig = inputs[which].data()[i];
    let mut step = eps;
    for _ in 0..=KINK_RETRIES {
        inputs[which].data_mut()[i] = orig + step;
        let (plus, sp) = eval(inputs)?;
        inputs[which].data_mut()[i] = orig - step;
        let (minus, sm) = eval(inputs)?;
        inputs[which].data_mut()[i] = orig;
        if sp == base_sig && sm == base_sig {
            return Ok(Some((plus - minus) / (2.0 * step)));
        }
        step /= 10.0;
    }
    Ok(None)
}

/// Compare `analytic[k]` (gradient of `inputs[k]`) with central differences
/// at the given coordinates of each input.
fn compare(
    name: &str,
    eval: &mut dyn FnMut(&[Tensor<f64>]) -> Result<Eval>,
    inputs: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    coords: &[Vec<usize>],
    eps: f64,
) -> Result<CheckResult> {
    check_eps(eps)?;
    let (_, base_sig) = eval(inputs)?;
    let mut result = CheckResult {
        name: name.to_string(),
        worst_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (k, idx) in coords.iter().enumerate() {
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &i in idx {
            match probe(eval, inputs, k, i, eps, base_sig)? {
                Some(d) => {
                    a.push(analytic[k].data()[i]);
                    n.push(d);
                    result.checked += 1;
                }
                None => result.skipped += 1,
            }
        }
        if !a.is_empty() {
            result.worst_rel_err = result.worst_rel_err.max(relative_error(&a, &n));
        }
    }
    Ok(result)
}

fn sample_coords(numel: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        rand::seq::index::sample(rng, numel, max).into_vec()
    }
}

type Graph = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Check `graph`, which maps input leaves to a tensor, under the loss
/// `0.5 |graph(inputs) - target|^2` with a fixed random target. Inputs whose
/// `differentiable` flag is false are constants.
fn check_graph(
    name: &str,
    mut inputs: Vec<Tensor<f64>>,
    differentiable: &[bool],
    graph: &Graph,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
    max_coords: usize,
) -> Result<CheckResult> {
    let run = |tape: &mut Tape<f64>, inputs: &[Tensor<f64>], target: Option<&Tensor<f64>>| -> Result<(Vec<Var>, Var)> {
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = graph(tape, &leaves)?;
        let loss = match target {
            Some(t) if tape.value(out).numel() > 1 => {
                let tv = tape.leaf(t.clone());
                let d = tape.sub(out, tv)?;
                tape.half_sum_squares(d)
            }
            _ => out,
        };
        Ok((leaves, loss))
    };
    let out_shape = {
        let mut t = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = graph(&mut t, &leaves)?;
        t.value(out).shape().to_vec()
    };
    let target = Tensor::uniform(&out_shape, -1.0, 1.0, rng)?;

    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let (leaves, loss) = run(&mut tape, &inputs, Some(&target))?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| if d { sample_coords(t.numel(), max_coords, rng) } else { Vec::new() })
        .collect();
    let mut eval = |ins: &[Tensor<f64>]| -> Result<Eval> {
        let mut t = Tape::new();
        t.track_branches();
        let (_, loss) = run(&mut t, ins, Some(&target))?;
        Ok((t.value(loss).data()[0], t.branch_signature()))
    };
    compare(name, &mut eval, &mut inputs, &analytic, &coords, opts.eps)
}

fn uni(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Every differentiable op, plus a full PcConv block, over `opts.seeds`.
pub fn op_suite(opts: &GradcheckOptions) -> Result<Report> {
    let mut report = Report::default();
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        for r in op_checks(opts, &mut rng)? {
            report.absorb(r);
        }
    }
    Ok(report)
}

fn op_checks(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    const ALL: usize = usize::MAX;
    let t = |out: &mut Vec<CheckResult>, r: Result<CheckResult>| -> Result<()> {
        out.push(r?);
        Ok(())
    };

    let (a, b) = (uni(&[2, 3, 4], rng)?, uni(&[2, 3, 4], rng)?);
    let r = check_graph("add", vec![a.clone(), b.clone()], &[true, true], &|t, v| t.add(v[0], v[1]), opts, rng, ALL);
    t(&mut out, r)?;
    let r = check_graph("sub", vec![a, b], &[true, true], &|t, v| t.sub(v[0], v[1]), opts, rng, ALL);
    t(&mut out, r)?;

    let x = uni(&[2, 3, 4, 4], rng)?;
    let r = check_graph("relu", vec![x.clone()], &[true], &|t, v| Ok(t.relu(v[0])), opts, rng, ALL);
    t(&mut out, r)?;
    let s = uni(&[3], rng)?;
    let r = check_graph(
        "scale_channels",
        vec![x.clone(), s],
        &[true, true],
        &|t, v| t.scale_channels(v[0], v[1]),
        opts,
        rng,
        ALL,
    );
    t(&mut out, r)?;

    let conv_cases: [(&str, usize, usize, usize, usize); 4] = [
        ("conv2d_k3_s1", 3, 1, 1, 6),
        ("conv2d_k3_s2", 3, 2, 1, 7),
        ("conv2d_k7_s2", 7, 2, 3, 9),
        ("conv2d_k1_s1", 1, 1, 0, 5),
    ];
    for (name, k, stride, pad, side) in conv_cases {
        let x = uni(&[2, 3, side, side], rng)?;
        let w = uni(&[4, 3, k, k], rng)?;
        let g = ConvGeometry::new(stride, pad);
        let r = check_graph(name, vec![x, w], &[true, true], &move |t, v| t.conv2d(v[0], v[1], g), opts, rng, 96);
        t(&mut out, r)?;
    }
    for (name, k) in [("conv_transpose2d_k3", 3), ("conv_transpose2d_k1", 1)] {
        let x = uni(&[2, 4, 5, 5], rng)?;
        let w = uni(&[4, 3, k, k], rng)?;
        let g = ConvGeometry::same(k);
        let r = check_graph(
            name,
            vec![x, w],
            &[true, true],
            &move |t, v| t.conv_transpose2d(v[0], v[1], g),
            opts,
            rng,
            96,
        );
        t(&mut out, r)?;
    }

    let x = uni(&[3, 2, 3, 3], rng)?;
    let gamma = Tensor::uniform(&[2], 0.5, 1.5, rng)?;
    let beta = uni(&[2], rng)?;
    let r = check_graph(
        "batchnorm_train",
        vec![x.clone(), gamma.clone(), beta.clone()],
        &[true, true, true],
        &|t, v| Ok(t.batchnorm_train(v[0], v[1], v[2], BN_EPS)?.0),
        opts,
        rng,
        ALL,
    );
    t(&mut out, r)?;
    let mean = uni(&[2], rng)?;
    let var = Tensor::uniform(&[2], 0.5, 2.0, rng)?;
    let r = check_graph(
        "batchnorm_eval",
        vec![x, gamma, beta],
        &[true, true, true],
        &move |t, v| t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS),
        opts,
        rng,
        ALL,
    );
    t(&mut out, r)?;

    let x = uni(&[2, 2, 4, 6], rng)?;
    let r = check_graph("maxpool2", vec![x.clone()], &[true], &|t, v| t.maxpool2(v[0]), opts, rng, ALL);
    t(&mut out, r)?;
    let r = check_graph("global_avg_pool", vec![x], &[true], &|t, v| t.global_avg_pool(v[0]), opts, rng, ALL);
    t(&mut out, r)?;

    let (x, w, b) = (uni(&[3, 4], rng)?, uni(&[5, 4], rng)?, uni(&[5], rng)?);
    let r = check_graph(
        "linear",
        vec![x, w, b],
        &[true, true, true],
        &|t, v| t.linear(v[0], v[1], v[2]),
        opts,
        rng,
        ALL,
    );
    t(&mut out, r)?;

    let logits = Tensor::uniform(&[4, 5], -3.0, 3.0, rng)?;
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    let r = check_graph(
        "softmax_cross_entropy",
        vec![logits],
        &[true],
        &move |t, v| t.softmax_cross_entropy(v[0], &labels),
        opts,
        rng,
        ALL,
    );
    t(&mut out, r)?;

    let x = uni(&[2, 3], rng)?;
    let r = check_graph("sum", vec![x.clone()], &[true], &|t, v| Ok(t.sum(v[0])), opts, rng, ALL);
    t(&mut out, r)?;
    let r = check_graph("half_sum_squares", vec![x], &[true], &|t, v| Ok(t.half_sum_squares(v[0])), opts, rng, ALL);
    t(&mut out, r)?;

    for (mode, name) in [(BnMode::Train, "pc_block_train"), (BnMode::Eval, "pc_block_eval")] {
        let r = block_check(name, mode, opts, rng);
        t(&mut out, r)?;
    }
    Ok(out)
}

/// A PcConv block `3 -> 4` with pooling and three cycles, every learnable
/// tensor and the input treated as variables.
fn block_check(name: &str, mode: BnMode, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut r1 = ChaCha8Rng::seed_from_u64(rng.random());
    let mut r2 = ChaCha8Rng::seed_from_u64(rng.random());
    let mut r3 = ChaCha8Rng::seed_from_u64(rng.random());
    let mut params = PcBlockParams::<f64>::init(
        3,
        4,
        true,
        true,
        BlockRngs {
            ff: &mut r1,
            fb: &mut r2,
            bp: &mut r3,
        },
    )?;
    params.bn.mode = mode;
    params.bn.running_mean = uni(&[3], rng)?;
    params.bn.running_var = Tensor::uniform(&[3], 0.5, 2.0, rng)?;
    let alpha = Tensor::uniform(&[4], 0.05, 0.5, rng)?;
    let gamma = Tensor::uniform(&[3], 0.5, 1.5, rng)?;
    let beta = uni(&[3], rng)?;
    let x = uni(&[2, 3, 6, 6], rng)?;
    let inputs = vec![
        x,
        params.ff.weights.clone(),
        params.fb.as_ref().expect("recurrent block").weights.clone(),
        params.bp.weights.clone(),
        alpha,
        gamma,
        beta,
    ];
    let graph = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let vars = BlockVars {
            ff: v[1],
            fb: Some(v[2]),
            bp: v[3],
            alpha: Some(v[4]),
            gamma: v[5],
            beta: v[6],
        };
        Ok(params.forward_tape(t, &vars, v[0], 3)?.y)
    };
    check_graph(name, inputs, &[true; 7], &graph, opts, rng, 32)
}

/// End-to-end checks of the configured architecture for every cycle count:
/// batch-mean cross-entropy, every parameter tensor and the input sampled.
pub fn model_suite(opts: &GradcheckOptions) -> Result<Report> {
    let mut report = Report::default();
    for &cycles in &opts.cycles {
        for &seed in &opts.seeds {
            report.absorb(model_check(opts, cycles, seed)?);
        }
    }
    Ok(report)
}

fn model_check(opts: &GradcheckOptions, cycles: usize, seed: u64) -> Result<CheckResult> {
    let spec = ModelSpec::pcn(opts.arch, cycles, 10);
    let mut model = Model::<f64>::build(spec, seed)?;
    model.set_mode(opts.bn_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    for b in &mut model.blocks {
        if let Some(a) = &mut b.alpha {
            for v in a.data_mut() {
                *v = rng.random_range(0.05..0.5);
            }
        }
    }
    let s = opts.input_size;
    let x = uni(&[opts.batch, 3, s, s], &mut rng)?;
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..10)).collect();

    let loss_on = |m: &Model<f64>, x: &Tensor<f64>, tape: &mut Tape<f64>| -> Result<(Vec<Var>, Var, Var)> {
        let vars = m.register(tape);
        let xv = tape.leaf(x.clone());
        let out = m.forward_tape(tape, &vars, xv, cycles)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        Ok((vars.all(), xv, loss))
    };

    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let (pvars, xv, loss) = loss_on(&model, &x, &mut tape)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = pvars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    analytic.push(grads.get_or_zeros(&tape, xv));

    let mut inputs: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(x);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| sample_coords(t.numel(), opts.coords_per_tensor, &mut rng))
        .collect();
    let mut eval = |ins: &[Tensor<f64>]| -> Result<Eval> {
        let mut m = model.clone();
        for ((_, dst), src) in m.named_params_mut().into_iter().zip(ins) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let mut t = Tape::new();
        t.track_branches();
        let (_, _, loss) = loss_on(&m, &ins[ins.len() - 1], &mut t)?;
        Ok((t.value(loss).data()[0], t.branch_signature()))
    };
    let name = format!("PCN-{}-{} end-to-end", opts.arch, cycles);
    compare(&name, &mut eval, &mut inputs, &analytic, &coords, opts.eps)
}
