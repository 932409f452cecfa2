use std::path::Path;
use std::process::{Command, Output};

fn pcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcn"))
        .args(args)
        .env_remove("PCN_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn total_millions(out: &Output) -> f64 {
    let text = stdout(out);
    let line = text.lines().find(|l| l.starts_with("total: ")).expect("total line");
    let n: f64 = line["total: ".len()..].split_whitespace().next().unwrap().parse().unwrap();
    n / 1e6
}

const SYNTH: &[&str] = &[
    "--dataset",
    "synthetic",
    "--synthetic-train",
    "60",
    "--synthetic-test",
    "20",
    "--synthetic-classes",
    "4",
];

fn train_small(out: &Path) -> Output {
    let dir = out.to_str().unwrap();
    let mut args = vec!["train", "--arch", "A", "--cycles", "2", "--out", dir, "--epochs", "2", "--batch-size", "16"];
    args.extend_from_slice(SYNTH);
    pcn(&args)
}

#[test]
fn train_writes_log_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_small(tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(tmp.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(tmp.path().join("best.ckpt").is_file());
    assert!(tmp.path().join("last.ckpt").is_file());

    let ckpt = tmp.path().join("last.ckpt");
    let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend_from_slice(SYNTH);
    let eval = pcn(&args);
    assert!(eval.status.success());
    assert!(stdout(&eval).contains("test error"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let no_data = pcn(&["train", "--arch", "A", "--cycles", "1", "--out", dir, "--dataset", "cifar10"]);
    assert_eq!(no_data.status.code(), Some(2));
    let plain_cycles = pcn(&["train", "--arch", "A", "--plain", "--cycles", "3", "--out", dir, "--dataset", "synthetic"]);
    assert_eq!(plain_cycles.status.code(), Some(2));
    let missing_cycles = pcn(&["train", "--arch", "A", "--out", dir, "--dataset", "synthetic"]);
    assert_eq!(missing_cycles.status.code(), Some(2));
    let no_ckpt = pcn(&["eval", "--checkpoint", &format!("{dir}/none.ckpt"), "--dataset", "synthetic"]);
    assert_eq!(no_ckpt.status.code(), Some(2));
    assert_eq!(pcn(&["params", "--arch", "Z"]).status.code(), Some(2));
}

#[test]
fn params_report_published_sizes() {
    for (args, millions) in [
        (vec!["params", "--arch", "A"], 0.15),
        (vec!["params", "--arch", "D", "--classes", "100"], 9.90),
        (vec!["params", "--arch", "E", "--classes", "1000"], 17.26),
        (vec!["params", "--arch", "C", "--classes", "100", "--plain"], 2.59),
    ] {
        let out = pcn(&args);
        assert!(out.status.success());
        let got = total_millions(&out);
        assert!((got - millions).abs() <= 0.02 * millions, "{args:?}: {got}");
    }
}

#[test]
fn gradcheck_passes_and_detects_injected_faults() {
    let ok = pcn(&["gradcheck", "--seeds", "2", "--cycles", "1,3"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("worst relative error"));
    let bad = pcn(&["gradcheck", "--seeds", "1", "--cycles", "1", "--inject-fault", "conv2d"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("conv2d"));
}

#[test]
fn analyze_modes_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(train_small(tmp.path()).status.success());
    let ckpt = tmp.path().join("best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let analyze = |mode: &str, out: &Path, extra: &[&str]| {
        let mut args = vec!["analyze", "--checkpoint", ckpt, "--mode", mode, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        pcn(&args)
    };
    let mut with_data: Vec<&str> = SYNTH.to_vec();
    with_data.extend(["--count", "8", "--cycles", "5"]);

    let csv = tmp.path().join("traj.csv");
    assert!(analyze("trajectory", &csv, &with_data).status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("layer,cycle,value"));
    assert_eq!(text.lines().count(), 1 + 6 * 5);

    let cos = tmp.path().join("cos.csv");
    let out = analyze("cosine", &cos, &with_data);
    assert!(out.status.success());
    assert!(stdout(&out).contains("negative entries"));

    let pgm = tmp.path().join("sal.pgm");
    let mut sal_args = SYNTH.to_vec();
    sal_args.extend(["--index", "3", "--raw"]);
    assert!(analyze("saliency", &pgm, &sal_args).status.success());
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
    assert_eq!(std::fs::read(pgm.with_extension("raw")).unwrap().len(), 8 + 4 * 32 * 32);

    let ppm = tmp.path().join("img.ppm");
    let mut img = b"P6\n32 32\n255\n".to_vec();
    img.extend((0..32 * 32 * 3).map(|i| (i * 7 % 256) as u8));
    std::fs::write(&ppm, img).unwrap();
    let from_image = analyze("saliency", &tmp.path().join("img.pgm"), &["--image", ppm.to_str().unwrap()]);
    assert!(from_image.status.success(), "{}", String::from_utf8_lossy(&from_image.stderr));

    let bad = analyze("cosine", &cos, &["--image", ppm.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}
