use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pcn::block::BlockRngs;
use pcn::ops::{self, BnMode, ConvGeometry, BN_EPS};
use pcn::trainer::{Sgd, TrainConfig};
use pcn::zoo::{Arch, Model, ModelSpec};
use pcn::{pc_block_forward, prediction_loss, PcBlockParams, Tape, Tensor};

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn block(c_in: usize, c_out: usize, pool: bool, seed: u64) -> PcBlockParams<f64> {
    let mut rngs: Vec<ChaCha8Rng> = (0..3).map(|i| ChaCha8Rng::seed_from_u64(seed * 3 + i)).collect();
    let [a, b, c] = rngs.as_mut_slice() else { unreachable!() };
    PcBlockParams::init(c_in, c_out, pool, true, BlockRngs { ff: a, fb: b, bp: c }).unwrap()
}

fn centre_only(value: f64) -> Tensor<f64> {
    let mut k = vec![0.0; 9];
    k[4] = value;
    Tensor::from_vec(&[1, 1, 3, 3], k).unwrap()
}

#[test]
fn scalar_recursion_by_hand() {
    let mut b = block(1, 1, false, 0);
    b.ff.weights = centre_only(0.5);
    b.fb.as_mut().unwrap().weights = centre_only(1.0);
    b.bp.weights = Tensor::zeros(&[1, 1, 1, 1]).unwrap();
    b.alpha = Some(Tensor::full(&[1], 0.2).unwrap());
    b.bn.mode = BnMode::Eval;
    let x = Tensor::full(&[1, 1, 1, 1], (1.0 + BN_EPS).sqrt()).unwrap();
    let (y, trace) = pc_block_forward(&x, &mut b, 1, true).unwrap();
    let tr = trace.unwrap();
    let close = |t: &Tensor<f64>, v: f64| (t.data()[0] - v).abs() < 1e-12;
    assert!(close(&tr.r[0], 0.5));
    assert!(close(&tr.p[0], 0.5));
    assert!(close(&tr.e[0], 0.5));
    assert!(close(&tr.r[1], 0.55));
    assert!(close(&y, 0.55));
}

#[test]
fn zero_update_rate_freezes_the_recursion() {
    let x = uniform(&[2, 3, 8, 8], 1);
    let mut b = block(3, 5, true, 1);
    b.alpha = Some(Tensor::zeros(&[5]).unwrap());
    let (y0, _) = pc_block_forward(&x, &mut b.clone(), 0, false).unwrap();
    for t in [1, 4, 7] {
        let (yt, _) = pc_block_forward(&x, &mut b.clone(), t, false).unwrap();
        assert_eq!(yt, y0, "T={t}");
    }
}

#[test]
fn no_cycles_equals_feedforward_block() {
    let x = uniform(&[3, 4, 6, 6], 2);
    let mut b = block(4, 6, true, 2);
    let (y, _) = pc_block_forward(&x, &mut b.clone(), 0, false).unwrap();

    let (x_bn, _, _) = ops::norm::batchnorm_train(&x, &b.bn.gamma, &b.bn.beta, BN_EPS).unwrap();
    let ff = ops::relu(&ops::conv2d(&x_bn, &b.ff.weights, ConvGeometry::same(3)).unwrap());
    let bp = ops::conv2d(&x_bn, &b.bp.weights, ConvGeometry::same(1)).unwrap();
    let merged = ff.zip_map(&bp, "test", |a, c| a + c).unwrap();
    let (expected, _) = ops::maxpool2(&merged).unwrap();
    assert_eq!(y, expected);
    b.bn.mode = BnMode::Eval;
    assert_eq!(pc_block_forward(&x, &mut b, 0, false).unwrap().0.shape(), &[3, 6, 3, 3]);
}

#[test]
fn trace_lengths_shapes_and_signs() {
    let x = uniform(&[2, 3, 7, 5], 3);
    for t in [0, 1, 4] {
        let (_, trace) = pc_block_forward(&x, &mut block(3, 4, false, 3), t, true).unwrap();
        let tr = trace.unwrap();
        assert_eq!((tr.r.len(), tr.p.len(), tr.e.len()), (t + 1, t, t));
        for r in &tr.r {
            assert_eq!(r.shape(), &[2, 4, 7, 5]);
        }
        for (p, e) in tr.p.iter().zip(&tr.e) {
            assert_eq!(p.shape(), &[2, 3, 7, 5]);
            assert_eq!(e.shape(), &[2, 3, 7, 5]);
            assert!(e.data().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn train_mode_updates_running_statistics() {
    let x = uniform(&[2, 3, 4, 4], 4);
    let mut b = block(3, 4, false, 4);
    pc_block_forward(&x, &mut b, 2, false).unwrap();
    assert!(b.bn.running_mean.data().iter().any(|&v| v != 0.0));
}

#[test]
fn forward_is_deterministic() {
    let x = uniform(&[2, 3, 8, 8], 5);
    let b = block(3, 8, true, 5);
    let a = pc_block_forward(&x, &mut b.clone(), 3, true).unwrap();
    let c = pc_block_forward(&x, &mut b.clone(), 3, true).unwrap();
    assert_eq!(a.0, c.0);
    assert_eq!(a.1, c.1);
}

fn feedback_gradient(cycles: usize) -> Vec<Tensor<f64>> {
    let model = Model::<f64>::build(ModelSpec::pcn(Arch::A, cycles, 10), 6).unwrap();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let x = tape.leaf(uniform(&[2, 3, 8, 8], 6));
    let out = model.forward_tape(&mut tape, &vars, x, cycles).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &[2, 9]).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.blocks.iter().map(|b| grads.get_or_zeros(&tape, b.fb.unwrap())).collect()
}

#[test]
fn classification_gradient_reaches_feedback_kernels_only_with_cycles() {
    for g in feedback_gradient(2) {
        assert!(g.max_abs() > 0.0);
    }
    for g in feedback_gradient(0) {
        assert_eq!(g.max_abs(), 0.0);
    }
}

#[test]
fn prediction_loss_examples() {
    assert_eq!(prediction_loss(&Tensor::<f64>::zeros(&[3, 2]).unwrap()), 0.0);
    assert_eq!(prediction_loss(&Tensor::<f64>::full(&[2], 1.0).unwrap()), 1.0);
}

#[test]
fn clamp_projects_update_rates_onto_non_negative_values() {
    let mut b = block(2, 2, false, 7);
    b.alpha = Some(Tensor::from_vec(&[2], vec![-0.1, 0.2]).unwrap());
    b.clamp_alpha();
    assert_eq!(b.alpha.as_ref().unwrap().data(), &[0.0, 0.2]);
    b.clamp_alpha();
    assert_eq!(b.alpha.as_ref().unwrap().data(), &[0.0, 0.2]);
}

#[test]
fn update_rates_stay_non_negative_under_random_steps() {
    let mut model = Model::<f64>::build(ModelSpec::pcn(Arch::A, 1, 10), 8).unwrap();
    let mut sgd = Sgd::new(&model);
    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let grads: Vec<Tensor<f64>> = model
            .named_params()
            .iter()
            .map(|(_, p)| Tensor::uniform(p.shape(), -50.0, 50.0, &mut rng).unwrap())
            .collect();
        sgd.step(&mut model, &grads, 0.1, &config).unwrap();
        for b in &model.blocks {
            assert!(b.alpha.as_ref().unwrap().data().iter().all(|&a| a >= 0.0));
        }
    }
}
