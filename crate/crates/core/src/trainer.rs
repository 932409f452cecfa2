//! Nesterov SGD with weight decay, step learning-rate schedule, per-epoch
//! evaluation, checkpoints and a CSV log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::KvMap;
use crate::data::{augment, Dataset};
use crate::error::{PcnError, Result};
use crate::ops::BnMode;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::Model;

pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_err,test_err,wall_time_s";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fractions of `epochs` at which the rate drops.
    pub lr_drop_points: Vec<f64>,
    pub lr_drop_factor: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 0,
            lr_drop_points: vec![0.5, 0.75, 0.875],
            lr_drop_factor: 10.0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PcnError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad("lr_drop_factor must be positive");
        }
        Ok(())
    }

    /// Consume the training keys of a config file.
    pub fn apply_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        if let Some(v) = kv.take("epochs")? {
            self.epochs = v;
        }
        if let Some(v) = kv.take("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.take("lr")? {
            self.lr0 = v;
        }
        if let Some(v) = kv.take("momentum")? {
            self.momentum = v;
        }
        if let Some(v) = kv.take("weight_decay")? {
            self.weight_decay = v;
        }
        if let Some(v) = kv.take("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.take::<String>("lr_drop_points")? {
            self.lr_drop_points = v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| PcnError::Config(format!("bad drop point `{p}`")))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = kv.take("lr_drop_factor")? {
            self.lr_drop_factor = v;
        }
        if let Some(v) = kv.take("augment")? {
            self.augment = v;
        }
        Ok(())
    }
}

/// `lr0 / factor^d` where `d` counts drop points `p` with `p * epochs <= epoch`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let drops = config
        .lr_drop_points
        .iter()
        .filter(|&&p| p * config.epochs as f64 <= epoch as f64)
        .count();
    config.lr0 / config.lr_drop_factor.powi(drops as i32)
}

/// In-place Nesterov step on one tensor's storage:
/// `g' = g + wd θ; v = μ v + g'; θ -= lr (g' + μ v)`.
pub fn nesterov_update<T: Scalar>(theta: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + wd * *t;
        *v = mu * *v + g;
        *t -= lr * (g + mu * *v);
    }
}

/// Momentum buffers for every learnable tensor of a model.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    velocity: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self {
            velocity: model.named_params().iter().map(|(_, t)| t.zeros_like()).collect(),
            steps: 0,
        }
    }

    /// Apply one update with gradients in [`Model::named_params`] order,
    /// then clamp every update rate to be non-negative.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64, config: &TrainConfig) -> Result<()> {
        let params = model.named_params_mut();
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(PcnError::Contract(format!(
                "{} parameters, {} gradients, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            p.expect_same_shape(g, "sgd_step")?;
            if !g.all_finite() {
                return Err(PcnError::NonFinite {
                    param: name.clone(),
                    step: self.steps,
                });
            }
        }
        for ((_, p), (g, v)) in params.into_iter().zip(grads.iter().zip(&mut self.velocity)) {
            nesterov_update(p.data_mut(), g.data(), v.data_mut(), lr, config.momentum, config.weight_decay);
        }
        model.clamp_alpha();
        self.steps += 1;
        Ok(())
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn count_errors(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p != l).count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub errors: usize,
}

/// Forward, backward and one SGD update on a batch. BN runs in train mode
/// and its running statistics are updated.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    sgd: &mut Sgd<T>,
    x: Tensor<T>,
    labels: &[usize],
    lr: f64,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    model.set_mode(BnMode::Train);
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let xv = tape.leaf(x);
    let out = model.forward_tape(&mut tape, &vars, xv, model.spec.cycles)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    let grads = tape.backward(loss)?;
    let grad_list: Vec<Tensor<T>> = vars.all().into_iter().map(|v| grads.get_or_zeros(&tape, v)).collect();
    let outcome = StepOutcome {
        loss: tape.value(loss).data()[0].to_f64(),
        errors: count_errors(&argmax_rows(tape.value(out.logits)), labels),
    };
    sgd.step(model, &grad_list, lr, config)?;
    model.update_running_stats(&out.batch_stats());
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub error_rate: f64,
    pub loss: f64,
}

/// Error rate and mean cross-entropy. The model must be in eval mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if model.mode() != BnMode::Eval {
        return Err(PcnError::Contract("evaluate requires eval-mode batch norm".into()));
    }
    if dataset.is_empty() {
        return Err(PcnError::Contract("evaluate on an empty dataset".into()));
    }
    let mut errors = 0;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = dataset.batch::<T>(chunk, <[f32]>::to_vec);
        let logits = model.forward(&x, None, false)?.logits;
        let (l, _) = crate::ops::softmax_cross_entropy(&logits, &labels)?;
        loss += l.to_f64() * chunk.len() as f64;
        errors += count_errors(&argmax_rows(&logits), &labels);
    }
    Ok(EvalReport {
        error_rate: errors as f64 / dataset.len() as f64,
        loss: loss / dataset.len() as f64,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.lr, r.train_loss, r.train_err, r.test_err, r.wall_time_s
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(PcnError::Format {
                what: "train log",
                detail: "missing header".into(),
            });
        }
        let rows = lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| PcnError::Format {
                        what: "train log",
                        detail: format!("bad row `{line}`"),
                    })
                };
                Ok(LogRow {
                    epoch: num(0)? as usize,
                    lr: num(1)?,
                    train_loss: num(2)?,
                    train_err: num(3)?,
                    test_err: num(4)?,
                    wall_time_s: num(5)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.csv")
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: TrainLog,
    pub best_test_err: f64,
    pub final_test_err: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 32) + epoch as u64);
    rng
}

/// Batches of one epoch in delivery order. The order and augmentation
/// depend only on `(seed, epoch)`.
fn epoch_batches(
    data: &Dataset,
    config: &TrainConfig,
    epoch: usize,
    send: impl FnMut((Vec<f32>, Vec<usize>)) -> bool,
) {
    let mut send = send;
    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let (h, w) = data.image_size();
    for chunk in order.chunks(config.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut x = Vec::with_capacity(chunk.len() * data.image_len());
        for &i in chunk {
            if config.augment {
                x.extend(augment(data.image(i), h, w, &mut rng));
            } else {
                x.extend_from_slice(data.image(i));
            }
        }
        if !send((x, chunk.iter().map(|&i| data.labels[i]).collect())) {
            return;
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| PcnError::io(path, e))
}

/// Train for `config.epochs` epochs, evaluating after each. Writes
/// `best.ckpt` (lowest test error), `last.ckpt` and `log.csv` under
/// `outputs.dir` when given. Batches are assembled on a prefetch thread.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    config: &TrainConfig,
    outputs: Option<&TrainOutputs>,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainReport> {
    config.validate()?;
    if train_ds.num_classes != model.spec.num_classes || test_ds.num_classes != model.spec.num_classes {
        return Err(PcnError::Contract(format!(
            "model has {} classes, datasets have {} / {}",
            model.spec.num_classes, train_ds.num_classes, test_ds.num_classes
        )));
    }
    if train_ds.len() < 2 || test_ds.is_empty() {
        return Err(PcnError::Contract("need at least 2 training items and 1 test item".into()));
    }
    let (h, w) = train_ds.image_size();
    model.check_input(&[1, 3, h, w])?;
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(|e| PcnError::io(&o.dir, e))?;
    }

    model.input_stats = train_ds.stats;
    let start = Instant::now();
    let mut sgd = Sgd::new(model);
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        let (mut loss_sum, mut errors, mut seen) = (0.0, 0usize, 0usize);
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(2);
            s.spawn(move || epoch_batches(train_ds, config, epoch, |b| tx.send(b).is_ok()));
            for (x, labels) in rx {
                let n = labels.len();
                let x = Tensor::from_vec(&[n, 3, h, w], x.into_iter().map(|v| T::from_f64(v as f64)).collect())?;
                let out = train_step(model, &mut sgd, x, &labels, lr, config)?;
                loss_sum += out.loss * n as f64;
                errors += out.errors;
                seen += n;
            }
            Ok(())
        })?;
        model.set_mode(BnMode::Eval);
        let test = evaluate(model, test_ds, config.batch_size)?;
        model.set_mode(BnMode::Train);
        let row = LogRow {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_err: errors as f64 / seen.max(1) as f64,
            test_err: test.error_rate,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log.rows.push(row);
        on_epoch(&row);
        if let Some(o) = outputs {
            let bytes = checkpoint::to_bytes(model);
            if test.error_rate < best {
                write_file(&o.best(), &bytes)?;
            }
            write_file(&o.last(), &bytes)?;
            write_file(&o.log(), log.to_csv().as_bytes())?;
        }
        best = best.min(test.error_rate);
    }
    Ok(TrainReport {
        final_test_err: log.rows.last().map_or(f64::NAN, |r| r.test_err),
        best_test_err: best,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, &cfg(300)), 0.01);
        assert!((lr_schedule(150, &cfg(300)) - 0.001).abs() < 1e-15);
        assert!((lr_schedule(35, &cfg(40)) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(34, &cfg(40)) - 1e-4).abs() < 1e-17);
    }

    #[test]
    fn nesterov_scalar_example() {
        let (mut t, mut v) = ([1.0f64], [0.0f64]);
        nesterov_update(&mut t, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(v[0], 1.0);
        assert!((t[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let (mut t, mut v) = ([2.0f64, -1.0], [0.0f64; 2]);
        nesterov_update(&mut t, &[0.5, 0.25], &mut v, 0.2, 0.0, 0.0);
        assert_eq!(t, [2.0 - 0.1, -1.0 - 0.05]);
    }

    #[test]
    fn argmax_ties_go_low() {
        let l = Tensor::from_vec(&[2, 3], vec![1.0f32, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }

    #[test]
    fn config_validation_and_kv() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { momentum: 1.0, ..cfg(1) }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..cfg(1) }.validate().is_err());
        let mut kv = KvMap::parse("epochs=7\nlr=0.5\nlr_drop_points=0.5,0.9\n").unwrap();
        let mut c = TrainConfig::default();
        c.apply_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!((c.epochs, c.lr0), (7, 0.5));
        assert_eq!(c.lr_drop_points, vec![0.5, 0.9]);
    }

    #[test]
    fn log_csv_round_trip() {
        let log = TrainLog {
            rows: vec![LogRow {
                epoch: 1,
                lr: 0.01,
                train_loss: 2.25,
                train_err: 0.5,
                test_err: 0.75,
                wall_time_s: 1.5,
            }],
        };
        assert_eq!(TrainLog::parse_csv(&log.to_csv()).unwrap(), log);
    }
}
