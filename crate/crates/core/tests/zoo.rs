use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pcn::data::ChannelStats;
use pcn::ops::BnMode;
use pcn::zoo::{layer_param_counts, param_count_for, Arch, Model, ModelSpec};
use pcn::{build_pcn, build_plain, checkpoint, DType, Tensor};

/// Layer rows of the architecture table, `PcConv<k>-<feedback ch>-<feedforward ch>`
/// with `*` marking a pooled output.
fn table(arch: Arch) -> &'static [&'static str] {
    match arch {
        Arch::A => &["PcConv3-3-16", "PcConv3-16-16", "PcConv3-16-32*", "PcConv3-32-32", "PcConv3-32-64*", "PcConv3-64-64"],
        Arch::B => &["PcConv3-3-16", "PcConv3-16-32", "PcConv3-32-64*", "PcConv3-64-64", "PcConv3-64-128*", "PcConv3-128-128"],
        Arch::C => &[
            "PcConv3-3-64", "PcConv3-64-64", "PcConv3-64-128*", "PcConv3-128-128", "PcConv3-128-256*", "PcConv3-256-256",
            "PcConv3-256-256", "PcConv3-256-256",
        ],
        Arch::D => &[
            "PcConv3-3-64", "PcConv3-64-64", "PcConv3-64-128*", "PcConv3-128-128", "PcConv3-128-256*", "PcConv3-256-256",
            "PcConv3-256-512", "PcConv3-512-512",
        ],
        Arch::E => &[
            "Conv7-64", "PcConv3-64-64", "PcConv3-64-128*", "PcConv3-128-128", "PcConv3-128-128*", "PcConv3-128-128",
            "PcConv3-128-256*", "PcConv3-256-256", "PcConv3-256-256", "PcConv3-256-512*", "PcConv3-512-512", "PcConv3-512-512",
        ],
    }
}

/// Closed-form count from the table rows: ff 9ab, fb 9ab (PCN only),
/// bypass ab, update rates b (PCN only), BN 2a; the stem is 49*3*64 and
/// the classifier K*C + K.
fn closed_form(arch: Arch, classes: usize, plain: bool) -> usize {
    let mut total = 0;
    let mut last = 0;
    for row in table(arch) {
        if let Some(rest) = row.strip_prefix("Conv7-") {
            last = rest.parse::<usize>().unwrap();
            total += 49 * 3 * last;
            continue;
        }
        let dims: Vec<usize> = row["PcConv3-".len()..].trim_end_matches('*').split('-').map(|s| s.parse().unwrap()).collect();
        let (a, b) = (dims[0], dims[1]);
        total += 9 * a * b + a * b + 2 * a;
        if !plain {
            total += 9 * a * b + b;
        }
        last = b;
    }
    total + classes * last + classes
}

#[test]
fn counts_match_closed_form_for_every_architecture() {
    for arch in Arch::ALL {
        for k in [10, 100, 1000] {
            for plain in [false, true] {
                let spec = if plain { ModelSpec::plain(arch, k) } else { ModelSpec::pcn(arch, 3, k) };
                assert_eq!(param_count_for(&spec), closed_form(arch, k, plain), "{arch} K={k} plain={plain}");
            }
        }
    }
}

#[test]
fn built_models_hold_exactly_the_counted_scalars() {
    for arch in [Arch::A, Arch::B, Arch::C] {
        let m = build_pcn::<f32>(arch, 2, 100, 0).unwrap();
        assert_eq!(m.param_count(), param_count_for(&m.spec));
        let p = build_plain::<f32>(arch, 10, 0).unwrap();
        assert_eq!(p.param_count(), param_count_for(&p.spec));
    }
}

#[test]
fn published_totals_within_two_percent() {
    let close = |spec: ModelSpec, millions: f64| {
        let n = param_count_for(&spec) as f64;
        assert!((n - millions * 1e6).abs() <= 0.02 * millions * 1e6, "{}: {n}", spec.label());
    };
    close(ModelSpec::pcn(Arch::A, 5, 10), 0.15);
    close(ModelSpec::pcn(Arch::B, 5, 100), 0.61);
    close(ModelSpec::pcn(Arch::C, 5, 10), 4.91);
    close(ModelSpec::pcn(Arch::C, 5, 100), 4.91);
    close(ModelSpec::pcn(Arch::D, 5, 100), 9.90);
    close(ModelSpec::pcn(Arch::E, 5, 1000), 17.26);
    close(ModelSpec::plain(Arch::A, 10), 0.08);
    close(ModelSpec::plain(Arch::C, 100), 2.59);
    assert_eq!(param_count_for(&ModelSpec::pcn(Arch::A, 5, 10)), 152_896);
}

#[test]
fn layer_rows_follow_table_labels() {
    let rows = layer_param_counts(&ModelSpec::pcn(Arch::E, 5, 1000));
    assert_eq!(rows.first().unwrap().0, "Conv7-64");
    assert_eq!(rows.last().unwrap().0, "FC-1000");
    assert_eq!(rows.len(), table(Arch::E).len() + 1);
    for (row, label) in rows.iter().zip(table(Arch::E)) {
        assert_eq!(&row.0, label);
    }
}

#[test]
fn logits_shape_and_top_map_size() {
    let mut m = build_pcn::<f32>(Arch::C, 1, 10, 1).unwrap();
    let x = Tensor::uniform(&[3, 3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let out = m.forward(&x, None, true).unwrap();
    assert_eq!(out.logits.shape(), &[3, 10]);
    assert_eq!(out.traces.unwrap().last().unwrap().r[0].shape(), &[3, 256, 8, 8]);
    m.set_mode(BnMode::Eval);
    let a = m.forward(&x, None, false).unwrap().logits;
    let b = m.forward(&x, None, false).unwrap().logits;
    assert_eq!(a, b);
}

#[test]
fn arch_e_reduces_to_seven_by_seven() {
    let mut m = build_pcn::<f32>(Arch::E, 0, 10, 2).unwrap();
    m.set_mode(BnMode::Eval);
    let x = Tensor::full(&[1, 3, 224, 224], 0.5f32).unwrap();
    let out = m.forward(&x, None, true).unwrap();
    assert_eq!(out.traces.unwrap().last().unwrap().r[0].shape(), &[1, 512, 7, 7]);
    assert!(m.check_input(&[1, 3, 30, 30]).is_err());
}

#[test]
fn pcn_without_cycles_matches_plain_with_shared_parameters() {
    let pcn = build_pcn::<f64>(Arch::B, 0, 10, 3).unwrap();
    let plain = build_plain::<f64>(Arch::B, 10, 3).unwrap();
    for (p, q) in pcn.blocks.iter().zip(&plain.blocks) {
        assert_eq!(p.ff, q.ff);
        assert_eq!(p.bp, q.bp);
    }
    assert_eq!(pcn.fc_w, plain.fc_w);
    let x = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(pcn.forward(&x, None, false).unwrap().logits, plain.forward(&x, None, false).unwrap().logits);
    let recurrent = build_pcn::<f64>(Arch::B, 2, 10, 3).unwrap();
    assert_ne!(recurrent.forward(&x, None, false).unwrap().logits, plain.forward(&x, None, false).unwrap().logits);
}

#[test]
fn plain_model_rejects_cycles() {
    let mut spec = ModelSpec::plain(Arch::A, 10);
    spec.cycles = 3;
    assert!(Model::<f32>::build(spec, 0).is_err());
    assert!(ModelSpec::pcn(Arch::A, 1, 1).validate().is_err());
}

#[test]
fn spec_text_round_trips() {
    for spec in [ModelSpec::pcn(Arch::D, 5, 100), ModelSpec::plain(Arch::E, 1000)] {
        assert_eq!(ModelSpec::from_kv(&spec.to_kv()).unwrap(), spec);
    }
    assert!(ModelSpec::from_kv("arch=A\ncycles=1\nclasses=10\nplain=false\ncolour=red\n").is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact_in_both_precisions() {
    let mut m = build_pcn::<f32>(Arch::B, 4, 100, 4).unwrap();
    m.input_stats = Some(ChannelStats {
        mean: [0.491_39, 0.482_15, 0.446_53],
        std: [0.247_03, 0.243_49, 0.261_59],
    });
    m.blocks[1].bn.running_var.data_mut()[3] = f32::MIN_POSITIVE;
    m.blocks[0].alpha.as_mut().unwrap().data_mut()[0] = 0.0;
    let bytes = checkpoint::to_bytes(&m);
    assert_eq!(&bytes[..8], checkpoint::MAGIC);
    let back = checkpoint::from_bytes::<f32>(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    assert_eq!(checkpoint::read_spec(&bytes).unwrap(), (m.spec, DType::F32));

    let d = build_plain::<f64>(Arch::A, 10, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plain.ckpt");
    checkpoint::save(&d, &path).unwrap();
    assert_eq!(checkpoint::load::<f64>(&path).unwrap(), d);
    assert!(checkpoint::load::<f32>(&path).is_err());
    assert!(checkpoint::load::<f64>(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn checkpoint_rejects_tampering() {
    let m = build_pcn::<f32>(Arch::A, 1, 10, 6).unwrap();
    let bytes = checkpoint::to_bytes(&m);
    for cut in [4, 12, bytes.len() / 3, bytes.len() - 30] {
        assert!(checkpoint::from_bytes::<f32>(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut footer = bytes.clone();
    footer.extend_from_slice(b"unknown=1\n");
    assert!(checkpoint::from_bytes::<f32>(&footer).is_err());
    let other = checkpoint::to_bytes(&build_pcn::<f32>(Arch::B, 1, 10, 6).unwrap());
    let mut mixed = bytes[..bytes.len() - m.spec.to_kv().len()].to_vec();
    mixed.extend_from_slice(ModelSpec::pcn(Arch::B, 1, 10).to_kv().as_bytes());
    assert!(checkpoint::from_bytes::<f32>(&mixed).is_err());
    assert!(checkpoint::from_bytes::<f32>(&other).is_ok());
}
