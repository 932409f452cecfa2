use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pcn::analysis::{self, LayerCycleMatrix};
use pcn::checkpoint;
use pcn::config::KvMap;
use pcn::data::{self, ChannelStats, Dataset};
use pcn::gradcheck::{self, GradcheckOptions, DEFAULT_TOLERANCE};
use pcn::ops::BnMode;
use pcn::trainer::{self, TrainConfig, TrainOutputs};
use pcn::zoo::{self, Arch, Model, ModelSpec};
use pcn::{OpKind, Tensor};

const DATA_DIR_ENV: &str = "PCN_DATA_DIR";

/// Train, evaluate and analyse predictive coding networks.
#[derive(Parser, Debug)]
#[command(name = "pcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a CSV log.
    Train(TrainArgs),
    /// Report the test error of a checkpoint.
    Eval(EvalArgs),
    /// Prediction-error trajectories, saliency maps or update/gradient cosines.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every backward rule and a small model.
    Gradcheck(GradcheckArgs),
    /// Layer-by-layer learnable parameter counts.
    Params(ParamsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset to read.
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Directory holding the CIFAR binary files (default: $PCN_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use only the first N training items.
    #[arg(long)]
    train_subset: Option<usize>,
    /// Use only the first N test items.
    #[arg(long)]
    test_subset: Option<usize>,
    /// Synthetic training-set size.
    #[arg(long, default_value_t = 2000)]
    synthetic_train: usize,
    /// Synthetic test-set size.
    #[arg(long, default_value_t = 500)]
    synthetic_test: usize,
    /// Synthetic class count.
    #[arg(long, default_value_t = 10)]
    synthetic_classes: usize,
    /// Seed of the synthetic generator (test split uses seed + 1).
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Recurrent cycles per block.
    #[arg(long)]
    cycles: Option<usize>,
    /// Train the feedforward-only counterpart.
    #[arg(long)]
    plain: bool,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable flip/translation augmentation.
    #[arg(long)]
    no_augment: bool,
    /// key=value file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override the cycle count used at inference.
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnalyzeMode {
    Trajectory,
    Saliency,
    Cosine,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    mode: AnalyzeMode,
    /// Output file (CSV, or PGM for saliency).
    #[arg(long)]
    out: PathBuf,
    /// Binary PPM (P6) image for saliency mode.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Test item analysed in saliency mode.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Test items used by trajectory and cosine modes.
    #[arg(long)]
    count: Option<usize>,
    /// Cycle count at inference (default: the checkpoint's).
    #[arg(long)]
    cycles: Option<usize>,
    /// Also write a raw f32 dump of the saliency map next to the PGM.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BnArg {
    Train,
    Eval,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_arch, default_value = "A")]
    arch: Arch,
    /// Cycle counts checked end to end.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5])]
    cycles: Vec<usize>,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Spatial size of the end-to-end input (default 8, or 32 for arch E).
    #[arg(long)]
    input_size: Option<usize>,
    /// Batch size of the end-to-end input.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Batch-norm mode of the end-to-end models (default: train, or eval for
    /// arch E, whose last blocks see 1x1 maps at a 32x32 input).
    #[arg(long, value_enum)]
    bn: Option<BnArg>,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    eps: f64,
    #[arg(long, hide = true, value_parser = parse_op)]
    inject_fault: Option<OpKind>,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Count the feedforward-only counterpart.
    #[arg(long)]
    plain: bool,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown op `{s}`"))
}

/// Invalid flag combination; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn data_dir(args: &DataArgs) -> Result<PathBuf> {
    let dir = args
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| usage(format!("--data-dir (or ${DATA_DIR_ENV}) is required for this dataset")))?;
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

/// Check the data flags before any work starts.
fn validate_data(args: &DataArgs) -> Result<DatasetKind> {
    let kind = args.dataset.ok_or_else(|| usage("--dataset is required"))?;
    if kind != DatasetKind::Synthetic {
        data_dir(args)?;
    }
    Ok(kind)
}

/// Load both splits and normalize them with `stats`, or with the training
/// split's own moments when `stats` is `None`.
fn load_data(args: &DataArgs, stats: Option<ChannelStats>) -> Result<(Dataset, Dataset)> {
    let (train, test) = match validate_data(args)? {
        DatasetKind::Cifar10 => data::load_cifar10(&data_dir(args)?)?,
        DatasetKind::Cifar100 => data::load_cifar100(&data_dir(args)?)?,
        DatasetKind::Synthetic => (
            data::synthetic_dataset(args.synthetic_classes, args.synthetic_train, args.data_seed)?,
            data::synthetic_dataset(args.synthetic_classes, args.synthetic_test, args.data_seed + 1)?,
        ),
    };
    let train = args.train_subset.map_or(train.clone(), |n| train.take(n));
    let test = args.test_subset.map_or(test.clone(), |n| test.take(n));
    let stats = stats.unwrap_or_else(|| ChannelStats::compute(&train.images));
    Ok((data::normalize_with(&train, &stats), data::normalize_with(&test, &stats)))
}

fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_classes(model: &Model<f32>, ds: &Dataset) -> Result<()> {
    anyhow::ensure!(
        model.spec.num_classes == ds.num_classes,
        "checkpoint has {} classes but the dataset has {}",
        model.spec.num_classes,
        ds.num_classes
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = TrainConfig::default();
    let (mut arch, mut cycles, mut plain) = (a.arch, a.cycles, a.plain);
    let mut data = a.data.clone();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut kv = KvMap::parse(&text).map_err(|e| usage(e.to_string()))?;
        let parsed = (|| -> pcn::Result<()> {
            if let Some(v) = kv.take::<String>("arch")? {
                arch = arch.or(Some(v.parse()?));
            }
            cycles = cycles.or(kv.take("cycles")?);
            plain = plain || kv.take("plain")?.unwrap_or(false);
            if let Some(v) = kv.take::<String>("dataset")? {
                let kind = DatasetKind::from_str(&v, true)
                    .map_err(|_| pcn::PcnError::Config(format!("unknown dataset `{v}`")))?;
                data.dataset = data.dataset.or(Some(kind));
            }
            data.data_dir = data.data_dir.take().or(kv.take("data_dir")?);
            data.train_subset = data.train_subset.or(kv.take("train_subset")?);
            data.test_subset = data.test_subset.or(kv.take("test_subset")?);
            cfg.apply_kv(&mut kv)?;
            Ok(())
        })();
        parsed.map_err(|e| usage(e.to_string()))?;
        kv.finish().map_err(|e| usage(e.to_string()))?;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let arch = arch.ok_or_else(|| usage("--arch is required"))?;
    let spec = match (plain, cycles) {
        (true, Some(c)) if c > 0 => return Err(usage("a plain model has no recurrent cycles; drop --cycles")),
        (true, _) => ModelSpec::plain(arch, 0),
        (false, Some(c)) => ModelSpec::pcn(arch, c, 0),
        (false, None) => return Err(usage("--cycles is required (or pass --plain)")),
    };
    if arch == Arch::E {
        return Err(usage("architecture E is buildable and checkable but has no training pipeline here"));
    }
    validate_data(&data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let (train, test) = load_data(&data, None)?;
    let spec = ModelSpec {
        num_classes: train.num_classes,
        ..spec
    };
    let mut model = Model::<f32>::build(spec, cfg.seed)?;
    println!(
        "training {} on {} ({} train / {} test), {} parameters",
        model.spec.label(),
        data.dataset.map_or("?", DatasetKind::name),
        train.len(),
        test.len(),
        model.param_count()
    );
    let outputs = TrainOutputs { dir: a.out.clone() };
    let report = trainer::train(&mut model, &train, &test, &cfg, Some(&outputs), |r| {
        println!(
            "epoch {:>3}  lr {:.0e}  loss {:.4}  train_err {:.4}  test_err {:.4}  {:.1}s",
            r.epoch, r.lr, r.train_loss, r.train_err, r.test_err, r.wall_time_s
        );
    })?;
    println!("final test error: {:.4}", report.final_test_err);
    println!("best test error: {:.4}", report.best_test_err);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    validate_data(&a.data)?;
    let mut model = load_checkpoint(&a.checkpoint)?;
    model.set_mode(BnMode::Eval);
    let (_, test) = load_data(&a.data, model.input_stats)?;
    check_classes(&model, &test)?;
    if let Some(c) = a.cycles {
        model.spec.cycles = c;
        model.spec.validate().context("cycle override")?;
    }
    let r = trainer::evaluate(&model, &test, a.batch_size)?;
    println!("{} test error: {:.4} ({} items, loss {:.4})", model.spec.label(), r.error_rate, test.len(), r.loss);
    Ok(ExitCode::SUCCESS)
}

fn to_batch(ds: &Dataset, count: usize) -> (Tensor<f32>, Vec<usize>) {
    let idx: Vec<usize> = (0..count.min(ds.len())).collect();
    ds.batch::<f32>(&idx, <[f32]>::to_vec)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    match (a.mode, &a.image) {
        (AnalyzeMode::Cosine, Some(_)) => {
            return Err(usage("cosine mode needs labelled data; use --dataset instead of --image"))
        }
        (AnalyzeMode::Trajectory, Some(_)) => return Err(usage("trajectory mode reads --dataset, not --image")),
        (_, Some(img)) if !img.is_file() => {
            return Err(usage(format!("image {} does not exist", img.display())))
        }
        (_, None) => {
            validate_data(&a.data)?;
        }
        _ => {}
    }
    let mut model = load_checkpoint(&a.checkpoint)?;
    model.set_mode(BnMode::Eval);
    let cycles = a.cycles.unwrap_or(model.spec.cycles);
    anyhow::ensure!(
        !(model.spec.plain && cycles > 0),
        "checkpoint {} is a plain model and cannot run {cycles} recurrent cycle(s)",
        a.checkpoint.display()
    );
    let dataset = match a.image {
        Some(_) => None,
        None => {
            let (_, test) = load_data(&a.data, model.input_stats)?;
            check_classes(&model, &test)?;
            Some(test)
        }
    };
    let write = |bytes: &[u8], path: &Path| -> Result<()> {
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    };
    match a.mode {
        AnalyzeMode::Trajectory => {
            let ds = dataset.expect("dataset loaded");
            let (x, _) = to_batch(&ds, a.count.unwrap_or(1000));
            let m = analysis::error_trajectory(&model, &x, cycles, a.batch_size)?;
            write(m.to_csv().as_bytes(), &a.out)?;
            print_matrix("mean ||e||_2", &m);
        }
        AnalyzeMode::Cosine => {
            let ds = dataset.expect("dataset loaded");
            let (x, labels) = to_batch(&ds, a.count.unwrap_or(100));
            let m = analysis::cosine_diagnostic(&model, &x, &labels, cycles)?;
            write(m.to_csv().as_bytes(), &a.out)?;
            print_matrix("mean cosine", &m);
            let (frac, n) = analysis::negative_fraction(&m);
            println!("negative entries: {:.1}% of {n}", 100.0 * frac);
        }
        AnalyzeMode::Saliency => {
            let image = match (&a.image, &dataset) {
                (Some(path), _) => {
                    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                    let raw = analysis::parse_ppm(&bytes)?;
                    let stats = model
                        .input_stats
                        .context("checkpoint carries no input normalization; analyse a dataset item instead")?;
                    let [_, _, h, w] = raw.dims4("image")?;
                    let ds = Dataset::new(raw, vec![0], model.spec.num_classes)?;
                    let normed = data::normalize_with(&ds, &stats);
                    Tensor::from_vec(&[1, 3, h, w], normed.images.data().to_vec())?
                }
                (None, Some(ds)) => {
                    anyhow::ensure!(a.index < ds.len(), "--index {} outside the {} test items", a.index, ds.len());
                    ds.batch::<f32>(&[a.index], <[f32]>::to_vec).0
                }
                (None, None) => unreachable!("validated above"),
            };
            if let Some(c) = a.cycles {
                model.spec.cycles = c;
            }
            let map = analysis::saliency_map(&model, &image)?;
            let (h, w) = (map.shape()[0], map.shape()[1]);
            write(&analysis::to_pgm(map.data(), h, w), &a.out)?;
            if a.raw {
                write(&analysis::to_raw_f32(map.data(), h, w), &a.out.with_extension("raw"))?;
            }
            println!("wrote {}x{} saliency map to {}", h, w, a.out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_matrix(title: &str, m: &LayerCycleMatrix) {
    println!("{title} (rows: blocks, columns: cycles)");
    for (l, row) in m.values.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>9.4}")).collect();
        println!("  block {:>2}: {}", l + 1, cells.join(" "));
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let opts = GradcheckOptions {
        seeds: (a.seed..a.seed + a.seeds).collect(),
        eps: a.eps,
        arch: a.arch,
        cycles: a.cycles,
        input_size: a.input_size.unwrap_or(if a.arch == Arch::E { 32 } else { 8 }),
        batch: a.batch,
        bn_mode: match a.bn {
            Some(BnArg::Train) => BnMode::Train,
            Some(BnArg::Eval) => BnMode::Eval,
            None if a.arch == Arch::E => BnMode::Eval,
            None => BnMode::Train,
        },
        fault: a.inject_fault,
        ..GradcheckOptions::default()
    };
    if !(opts.eps > 0.0) {
        return Err(usage("--eps must be positive"));
    }
    let start = Instant::now();
    let mut results = gradcheck::op_suite(&opts)?.results;
    results.extend(gradcheck::model_suite(&opts)?.results);
    for r in &results {
        let status = if r.worst_rel_err < DEFAULT_TOLERANCE { "ok  " } else { "FAIL" };
        println!(
            "{status} {:<28} rel_err {:.3e}  ({} coords, {} skipped at kinks)",
            r.name, r.worst_rel_err, r.checked, r.skipped
        );
    }
    let worst = results
        .iter()
        .max_by(|x, y| x.worst_rel_err.total_cmp(&y.worst_rel_err))
        .context("no checks ran")?;
    println!(
        "worst relative error: {:.3e} ({}), tolerance {:.0e}, {:.1}s",
        worst.worst_rel_err,
        worst.name,
        DEFAULT_TOLERANCE,
        start.elapsed().as_secs_f64()
    );
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| !(r.worst_rel_err < DEFAULT_TOLERANCE))
        .map(|r| r.name.as_str())
        .collect();
    if failing.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed for: {}", failing.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_params(a: ParamsArgs) -> Result<ExitCode> {
    let spec = if a.plain {
        ModelSpec::plain(a.arch, a.classes)
    } else {
        ModelSpec::pcn(a.arch, 1, a.classes)
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let label = if a.plain { format!("Plain-{}", a.arch) } else { format!("PCN-{}", a.arch) };
    println!("{label} with {} classes", a.classes);
    for (name, n) in zoo::layer_param_counts(&spec) {
        println!("  {name:<20} {n:>12}");
    }
    let total = zoo::param_count_for(&spec);
    println!("total: {total} ({:.2}M)", total as f64 / 1e6);
    Ok(ExitCode::SUCCESS)
}
