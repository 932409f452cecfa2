//! Architectures A-E, their plain counterparts, and whole-model forward.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{he_normal, BlockRngs, BlockTape, BlockTrace, BlockVars, PcBlockParams};
use crate::config::{self, KvMap};
use crate::data::ChannelStats;
use crate::error::{PcnError, Result};
use crate::ops::{BatchStats, BnMode, ConvGeometry, ConvKernel};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    A,
    B,
    C,
    D,
    E,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::A, Arch::B, Arch::C, Arch::D, Arch::E];

    /// `(C_in, C_out, pool_after)` for every PcConv block.
    pub fn blocks(self) -> Vec<BlockSpec> {
        let table: &[(usize, usize, bool)] = match self {
            Arch::A => &[
                (3, 16, false),
                (16, 16, false),
                (16, 32, true),
                (32, 32, false),
                (32, 64, true),
                (64, 64, false),
            ],
            Arch::B => &[
                (3, 16, false),
                (16, 32, false),
                (32, 64, true),
                (64, 64, false),
                (64, 128, true),
                (128, 128, false),
            ],
            Arch::C => &[
                (3, 64, false),
                (64, 64, false),
                (64, 128, true),
                (128, 128, false),
                (128, 256, true),
                (256, 256, false),
                (256, 256, false),
                (256, 256, false),
            ],
            Arch::D => &[
                (3, 64, false),
                (64, 64, false),
                (64, 128, true),
                (128, 128, false),
                (128, 256, true),
                (256, 256, false),
                (256, 512, false),
                (512, 512, false),
            ],
            Arch::E => &[
                (64, 64, false),
                (64, 128, true),
                (128, 128, false),
                (128, 128, true),
                (128, 128, false),
                (128, 256, true),
                (256, 256, false),
                (256, 256, false),
                (256, 512, true),
                (512, 512, false),
                (512, 512, false),
            ],
        };
        table
            .iter()
            .map(|&(c_in, c_out, pool_after)| BlockSpec {
                c_in,
                c_out,
                pool_after,
            })
            .collect()
    }

    /// The regular convolution in front of the blocks (arch E only).
    pub fn stem(self) -> Option<StemSpec> {
        (self == Arch::E).then_some(StemSpec {
            c_in: 3,
            c_out: 64,
            kernel: 7,
            stride: 2,
            padding: 3,
        })
    }

    /// Native input resolution.
    pub fn input_size(self) -> usize {
        match self {
            Arch::E => 224,
            _ => 32,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arch::A => "A",
            Arch::B => "B",
            Arch::C => "C",
            Arch::D => "D",
            Arch::E => "E",
        };
        f.write_str(s)
    }
}

impl FromStr for Arch {
    type Err = PcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Arch::A),
            "B" => Ok(Arch::B),
            "C" => Ok(Arch::C),
            "D" => Ok(Arch::D),
            "E" => Ok(Arch::E),
            other => Err(PcnError::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub pool_after: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Declarative description of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub cycles: usize,
    pub num_classes: usize,
    /// Feedforward-only counterpart: no feedback kernels, no rates, T = 0.
    pub plain: bool,
}

impl ModelSpec {
    pub fn pcn(arch: Arch, cycles: usize, num_classes: usize) -> Self {
        Self {
            arch,
            cycles,
            num_classes,
            plain: false,
        }
    }

    pub fn plain(arch: Arch, num_classes: usize) -> Self {
        Self {
            arch,
            cycles: 0,
            num_classes,
            plain: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(PcnError::Config("need at least 2 classes".into()));
        }
        if self.plain && self.cycles != 0 {
            return Err(PcnError::Config(
                "a plain model has no recurrent cycles".into(),
            ));
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockSpec> {
        self.arch.blocks()
    }

    /// `PCN-A-5` / `Plain-A`.
    pub fn label(&self) -> String {
        if self.plain {
            format!("Plain-{}", self.arch)
        } else {
            format!("PCN-{}-{}", self.arch, self.cycles)
        }
    }

    pub fn to_kv(&self) -> String {
        config::render(&[
            ("arch", self.arch.to_string()),
            ("cycles", self.cycles.to_string()),
            ("classes", self.num_classes.to_string()),
            ("plain", self.plain.to_string()),
        ])
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let spec = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(spec)
    }

    /// Consume the spec keys of a larger key=value map.
    pub fn take_from(kv: &mut KvMap) -> Result<Self> {
        let spec = Self {
            arch: kv.require::<String>("arch")?.parse()?,
            cycles: kv.require("cycles")?,
            num_classes: kv.require("classes")?,
            plain: kv.require("plain")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Closed-form learnable-scalar count of a spec, without building it.
pub fn param_count_for(spec: &ModelSpec) -> usize {
    layer_param_counts(spec).iter().map(|(_, n)| n).sum()
}

/// Per-layer learnable-scalar counts: stem, each block, classifier.
pub fn layer_param_counts(spec: &ModelSpec) -> Vec<(String, usize)> {
    let mut rows = Vec::new();
    if let Some(s) = spec.arch.stem() {
        rows.push((
            format!("Conv{}-{}", s.kernel, s.c_out),
            s.kernel * s.kernel * s.c_in * s.c_out,
        ));
    }
    for b in spec.blocks() {
        let (ci, co) = (b.c_in, b.c_out);
        let shared = 9 * ci * co + ci * co + 2 * ci;
        let n = if spec.plain {
            shared
        } else {
            shared + 9 * co * ci + co
        };
        let star = if b.pool_after { "*" } else { "" };
        rows.push((format!("PcConv3-{ci}-{co}{star}"), n));
    }
    let last = spec.blocks().last().map_or(0, |b| b.c_out);
    rows.push((
        format!("FC-{}", spec.num_classes),
        spec.num_classes * last + spec.num_classes,
    ));
    rows
}

const STREAM_STEM: u64 = 1;
const STREAM_FC: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn block_stream(block: usize, role: u64) -> u64 {
    16 + 4 * block as u64 + role
}

/// Instantiated network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub stem: Option<ConvKernel<T>>,
    pub blocks: Vec<PcBlockParams<T>>,
    /// `[K, C_last]`.
    pub fc_w: Tensor<T>,
    /// `[K]`.
    pub fc_b: Tensor<T>,
    /// Training-split moments the inputs are normalized with.
    pub input_stats: Option<ChannelStats>,
    mode: BnMode,
}

/// Tape handles of every learnable tensor of a model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub stem: Option<Var>,
    pub blocks: Vec<BlockVars>,
    pub fc_w: Var,
    pub fc_b: Var,
}

impl ModelVars {
    /// Same order as [`Model::named_params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.stem.into_iter().collect();
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.push(self.fc_w);
        out.push(self.fc_b);
        out
    }
}

/// One recorded model forward pass.
#[derive(Debug, Clone)]
pub struct ModelTape<T: Scalar> {
    /// Input to each block.
    pub block_inputs: Vec<Var>,
    pub blocks: Vec<BlockTape<T>>,
    pub logits: Var,
}

impl<T: Scalar> ModelTape<T> {
    /// Batch moments of every block in train mode, for the running stats.
    pub fn batch_stats(&self) -> Vec<Option<BatchStats<T>>> {
        self.blocks.iter().map(|b| b.stats.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    pub logits: Tensor<T>,
    pub traces: Option<Vec<BlockTrace<T>>>,
    pub batch_stats: Vec<Option<BatchStats<T>>>,
}

/// Build a PCN with `cycles` recurrent cycles per block.
pub fn build_pcn<T: Scalar>(arch: Arch, cycles: usize, num_classes: usize, seed: u64) -> Result<Model<T>> {
    Model::build(ModelSpec::pcn(arch, cycles, num_classes), seed)
}

/// Build the feedforward-only counterpart. Shared parameters (stem, ff, bp,
/// classifier) draw from the same streams as [`build_pcn`] with equal seed.
pub fn build_plain<T: Scalar>(arch: Arch, num_classes: usize, seed: u64) -> Result<Model<T>> {
    Model::build(ModelSpec::plain(arch, num_classes), seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let stem = match spec.arch.stem() {
            Some(s) => {
                let mut rng = stream_rng(seed, STREAM_STEM);
                Some(ConvKernel::new(
                    he_normal([s.c_out, s.c_in, s.kernel, s.kernel], s.c_in, &mut rng)?,
                    s.stride,
                    s.padding,
                )?)
            }
            None => None,
        };
        let blocks = spec
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut ff = stream_rng(seed, block_stream(i, 0));
                let mut fb = stream_rng(seed, block_stream(i, 1));
                let mut bp = stream_rng(seed, block_stream(i, 2));
                PcBlockParams::init(
                    b.c_in,
                    b.c_out,
                    b.pool_after,
                    !spec.plain,
                    BlockRngs {
                        ff: &mut ff,
                        fb: &mut fb,
                        bp: &mut bp,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let width = blocks.last().map_or(0, PcBlockParams::out_channels);
        let mut rng = stream_rng(seed, STREAM_FC);
        let fc_w = Tensor::normal(&[spec.num_classes, width], (1.0 / width as f64).sqrt(), &mut rng)?;
        let fc_b = Tensor::zeros(&[spec.num_classes])?;
        Ok(Self {
            spec,
            stem,
            blocks,
            fc_w,
            fc_b,
            input_stats: None,
            mode: BnMode::Train,
        })
    }

    /// Assemble a model from parts, checking the channel chain.
    pub fn from_parts(
        spec: ModelSpec,
        stem: Option<ConvKernel<T>>,
        blocks: Vec<PcBlockParams<T>>,
        fc_w: Tensor<T>,
        fc_b: Tensor<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let expect = spec.blocks();
        if expect.len() != blocks.len() {
            return Err(PcnError::shape("model", "block count does not match arch"));
        }
        for (i, (e, b)) in expect.iter().zip(&blocks).enumerate() {
            if e.c_in != b.in_channels()
                || e.c_out != b.out_channels()
                || e.pool_after != b.pool_after
                || b.is_recurrent() == spec.plain
            {
                return Err(PcnError::shape("model", format!("block {i} disagrees with arch")));
            }
        }
        if spec.arch.stem().is_some() != stem.is_some() {
            return Err(PcnError::shape("model", "stem presence disagrees with arch"));
        }
        let width = expect.last().map_or(0, |b| b.c_out);
        if fc_w.shape() != [spec.num_classes, width] || fc_b.shape() != [spec.num_classes] {
            return Err(PcnError::shape("model", "classifier shape"));
        }
        Ok(Self {
            spec,
            stem,
            blocks,
            fc_w,
            fc_b,
            input_stats: None,
            mode: BnMode::Train,
        })
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
        for b in &mut self.blocks {
            b.bn.mode = mode;
        }
    }

    /// Copy with every block's update rates set to `value`.
    pub fn with_alpha(mut self, value: T) -> Self {
        for b in &mut self.blocks {
            if let Some(a) = &mut b.alpha {
                a.data_mut().fill(value);
            }
        }
        self
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Learnable tensors in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(s) = &self.stem {
            out.push(("stem.weight".to_string(), &s.weights));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.named_params() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("fc.weight".to_string(), &self.fc_w));
        out.push(("fc.bias".to_string(), &self.fc_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(s) = &mut self.stem {
            out.push(("stem.weight".to_string(), &mut s.weights));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.named_params_mut() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("fc.weight".to_string(), &mut self.fc_w));
        out.push(("fc.bias".to_string(), &mut self.fc_b));
        out
    }

    /// Non-learnable state (BN running statistics).
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("block{i}.bn.running_var"), &b.bn.running_var));
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("block{i}.bn.running_var"), &mut b.bn.running_var));
        }
        out
    }

    pub fn clamp_alpha(&mut self) {
        for b in &mut self.blocks {
            b.clamp_alpha();
        }
    }

    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats<T>>]) {
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            if let Some(s) = s {
                b.bn.update_running(s);
            }
        }
    }

    /// Check `[N, 3, H, W]` survives the stem and every 2x2 pool.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, mut h, mut w] = shape else {
            return Err(PcnError::shape("forward", format!("expected NCHW, got {shape:?}")));
        };
        let want_c = self
            .stem
            .as_ref()
            .map_or_else(|| self.blocks[0].in_channels(), ConvKernel::in_channels);
        if c != want_c {
            return Err(PcnError::shape(
                "forward",
                format!("expected {want_c} input channels, got {c}"),
            ));
        }
        if let Some(s) = &self.stem {
            let g = s.geometry();
            match (g.output_size(h, s.size()), g.output_size(w, s.size())) {
                (Some(a), Some(b)) => (h, w) = (a, b),
                _ => return Err(PcnError::shape("forward", "input smaller than stem kernel")),
            }
        }
        for b in &self.blocks {
            if b.pool_after {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(PcnError::shape(
                        "forward",
                        format!("input {:?} cannot be pooled down the network", &shape[2..]),
                    ));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            stem: self.stem.as_ref().map(|s| tape.leaf(s.weights.clone())),
            blocks: self.blocks.iter().map(|b| b.register(tape)).collect(),
            fc_w: tape.leaf(self.fc_w.clone()),
            fc_b: tape.leaf(self.fc_b.clone()),
        }
    }

    /// Record the stem (if any) on the tape.
    fn stem_tape(&self, tape: &mut Tape<T>, vars: &ModelVars, x: Var) -> Result<Var> {
        match (&self.stem, vars.stem) {
            (Some(s), Some(w)) => {
                let y = tape.conv2d(x, w, ConvGeometry::new(s.stride, s.padding))?;
                Ok(tape.relu(y))
            }
            _ => Ok(x),
        }
    }

    /// Global average pooling and the fully-connected classifier.
    pub fn head_tape(&self, tape: &mut Tape<T>, vars: &ModelVars, h: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(h)?;
        tape.linear(pooled, vars.fc_w, vars.fc_b)
    }

    /// Run blocks `from..` on `h`, then the classifier. Returns the logits.
    pub fn tail_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        from: usize,
        mut h: Var,
        cycles: usize,
    ) -> Result<Var> {
        for (b, bv) in self.blocks.iter().zip(&vars.blocks).skip(from) {
            h = b.forward_tape(tape, bv, h, cycles)?.y;
        }
        self.head_tape(tape, vars, h)
    }

    /// Record a full forward pass with `cycles` recurrent cycles per block.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        x: Var,
        cycles: usize,
    ) -> Result<ModelTape<T>> {
        self.check_input(tape.value(x).shape())?;
        if self.spec.plain && cycles > 0 {
            return Err(PcnError::Contract(
                "a plain model has no recurrent cycles".into(),
            ));
        }
        let mut h = self.stem_tape(tape, vars, x)?;
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, bv) in self.blocks.iter().zip(&vars.blocks) {
            block_inputs.push(h);
            let out = b.forward_tape(tape, bv, h, cycles)?;
            h = out.y;
            blocks.push(out);
        }
        let logits = self.head_tape(tape, vars, h)?;
        Ok(ModelTape {
            block_inputs,
            blocks,
            logits,
        })
    }

    /// Forward pass without gradients. `cycles` overrides the spec's T.
    pub fn forward(&self, x: &Tensor<T>, cycles: Option<usize>, trace: bool) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward_tape(&mut tape, &vars, xv, cycles.unwrap_or(self.spec.cycles))?;
        let traces = trace.then(|| out.blocks.iter().map(|b| b.trace(&tape)).collect());
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            traces,
            batch_stats: out.batch_stats(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_a_channel_chain() {
        let m = build_pcn::<f32>(Arch::A, 5, 10, 0).unwrap();
        let chain: Vec<usize> = std::iter::once(m.blocks[0].in_channels())
            .chain(m.blocks.iter().map(|b| b.out_channels()))
            .collect();
        assert_eq!(chain, vec![3, 16, 16, 32, 32, 64, 64]);
        assert_eq!(m.blocks.len(), 6);
    }

    #[test]
    fn arch_e_has_stem_and_ends_at_512() {
        let spec = ModelSpec::pcn(Arch::E, 5, 1000);
        assert!(spec.arch.stem().is_some());
        let blocks = spec.blocks();
        assert_eq!(blocks.len(), 11);
        assert_eq!(blocks[0].c_in, 64);
        assert_eq!(blocks.last().unwrap().c_out, 512);
        assert_eq!(blocks.iter().filter(|b| b.pool_after).count(), 4);
    }

    #[test]
    fn channel_chains_are_consistent() {
        for arch in Arch::ALL {
            let blocks = arch.blocks();
            for pair in blocks.windows(2) {
                assert_eq!(pair[0].c_out, pair[1].c_in, "{arch}");
            }
            let first = arch.stem().map_or(3, |s| s.c_out);
            assert_eq!(blocks[0].c_in, first);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_pcn::<f32>(Arch::B, 2, 10, 42).unwrap();
        let b = build_pcn::<f32>(Arch::B, 2, 10, 42).unwrap();
        assert_eq!(a, b);
        let c = build_pcn::<f32>(Arch::B, 2, 10, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn plain_shares_streams_with_pcn() {
        let pcn = build_pcn::<f64>(Arch::A, 3, 10, 7).unwrap();
        let plain = build_plain::<f64>(Arch::A, 10, 7).unwrap();
        for (p, q) in pcn.blocks.iter().zip(&plain.blocks) {
            assert_eq!(p.ff, q.ff);
            assert_eq!(p.bp, q.bp);
            assert!(q.fb.is_none() && q.alpha.is_none());
        }
        assert_eq!(pcn.fc_w, plain.fc_w);
    }

    #[test]
    fn built_counts_match_closed_form() {
        for arch in [Arch::A, Arch::B] {
            for plain in [false, true] {
                let spec = if plain {
                    ModelSpec::plain(arch, 10)
                } else {
                    ModelSpec::pcn(arch, 1, 10)
                };
                let m = Model::<f32>::build(spec.clone(), 0).unwrap();
                assert_eq!(m.param_count(), param_count_for(&spec));
            }
        }
        assert_eq!(param_count_for(&ModelSpec::pcn(Arch::A, 1, 10)), 152_896);
    }

    #[test]
    fn spec_kv_round_trip_and_validation() {
        let spec = ModelSpec::pcn(Arch::C, 5, 100);
        assert_eq!(ModelSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        assert!(ModelSpec::from_kv("arch=A\ncycles=3\nclasses=10\nplain=true\n").is_err());
        assert!(ModelSpec::from_kv("arch=Z\ncycles=3\nclasses=10\nplain=false\n").is_err());
        assert!("F".parse::<Arch>().is_err());
    }

    #[test]
    fn forward_shapes_and_input_checks() {
        let mut m = build_pcn::<f32>(Arch::C, 1, 100, 0).unwrap();
        m.set_mode(BnMode::Eval);
        let x = Tensor::full(&[2, 3, 32, 32], 0.1).unwrap();
        let out = m.forward(&x, None, true).unwrap();
        assert_eq!(out.logits.shape(), &[2, 100]);
        let traces = out.traces.unwrap();
        let last = traces.last().unwrap();
        assert_eq!(&last.r[0].shape()[2..], &[8, 8]);
        assert!(m.forward(&Tensor::full(&[1, 3, 30, 30], 0.1).unwrap(), None, false).is_err());
        assert!(m.forward(&Tensor::full(&[1, 1, 32, 32], 0.1).unwrap(), None, false).is_err());
    }

    #[test]
    fn plain_rejects_cycles() {
        let m = build_plain::<f32>(Arch::A, 10, 0).unwrap();
        let x = Tensor::full(&[2, 3, 8, 8], 0.1).unwrap();
        assert!(m.forward(&x, Some(2), false).is_err());
        assert!(m.forward(&x, None, false).is_ok());
    }
}
