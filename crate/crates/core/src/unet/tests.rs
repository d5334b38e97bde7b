use super::*;
use crate::autodiff::grad_check_many;
use crate::costmodel::attention_flops_local;
use crate::lfam::ResidualSource;
use rand::Rng;

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn lfam(m: usize) -> SkipMode {
    SkipMode::Lfam(LfamConfig::default().with_local_range(m))
}

#[test]
fn full_scale_widths() {
    let cfg = UNetConfig::new(1, 5, 64, 4);
    assert_eq!(cfg.bottleneck_channels(), 1024);
    let skip_widths: Vec<usize> = (0..4).rev().map(|l| cfg.width(l)).collect();
    assert_eq!(skip_widths, [512, 256, 128, 64]);
}

#[test]
fn tiny_concat_param_count_by_hand() {
    let cfg = UNetConfig::new(1, 2, 1, 1);
    let model = build_unet::<f32>(&cfg, 0).unwrap();
    let hand = (9 + 1) // enc0.conv1 1->1
        + (9 + 1) // enc0.conv2 1->1
        + (2 * 9 + 2) // bottleneck.conv1 1->2
        + (2 * 2 * 9 + 2) // bottleneck.conv2 2->2
        + (2 * 4 + 1) // dec0.up 2->1, 2x2
        + (2 * 9 + 1) // dec0.conv1 2->1 after concat
        + (9 + 1) // dec0.conv2 1->1
        + (2 + 2); // head 1->2, 1x1
    assert_eq!(model.num_params(), hand);
    assert_eq!(model.names().len(), 16);
    let mut sorted = model.names().to_vec();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 16, "names are unique");
}

#[test]
fn build_is_deterministic_per_seed() {
    let cfg = UNetConfig::new(1, 3, 2, 2).with_skips(lfam(4));
    let a = build_unet::<f32>(&cfg, 5).unwrap();
    let b = build_unet::<f32>(&cfg, 5).unwrap();
    let c = build_unet::<f32>(&cfg, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(matches!(build_unet::<f32>(&UNetConfig::new(1, 2, 1, 0), 0), Err(Error::Config(_))));
    assert!(matches!(build_unet::<f32>(&UNetConfig::new(1, 2, 0, 2), 0), Err(Error::Config(_))));
    let mut cfg = UNetConfig::new(1, 2, 1, 2);
    cfg.skips.pop();
    assert!(matches!(build_unet::<f32>(&cfg, 0), Err(Error::Config(_))));
    let cfg = UNetConfig::new(1, 2, 1, 1).with_skips(lfam(0));
    assert!(matches!(build_unet::<f32>(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn output_shape_and_mode_independence() {
    let x = random([1, 1, 32, 32], 1).cast::<f32>();
    for skip in [SkipMode::Concat, lfam(7), SkipMode::None] {
        let cfg = UNetConfig::new(1, 5, 2, 4).with_skips(skip);
        let out = build_unet::<f32>(&cfg, 0).unwrap().forward(&x).unwrap();
        assert_eq!(out.shape(), [1, 5, 32, 32]);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let model = build_unet::<f32>(&UNetConfig::new(1, 2, 2, 2), 0).unwrap();
    let err = model.forward(&Tensor::zeros([1, 1, 10, 12])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    let err = model.forward(&Tensor::zeros([1, 2, 8, 8])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn zero_parameters_give_zero_logits() {
    let cfg = UNetConfig::new(1, 3, 2, 2).with_skips(lfam(4));
    let mut model = build_unet::<f64>(&cfg, 0).unwrap();
    for p in model.params_mut() {
        *p = Tensor::zeros(p.shape());
    }
    let out = model.forward(&random([2, 1, 8, 8], 3)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_range_lfam_matches_global_oracle() {
    for residual in [ResidualSource::Encoder, ResidualSource::None] {
        let l = LfamConfig::default().with_local_range(32).with_residual(residual);
        let cfg = UNetConfig::new(1, 3, 2, 2).with_skips(SkipMode::Lfam(l));
        let model = build_unet::<f64>(&cfg, 9).unwrap();
        let x = random([1, 1, 32, 32], 4);
        let windowed = model.forward(&x).unwrap();
        let global = model.forward_with(&x, AttentionImpl::GlobalOracle).unwrap();
        let diff = windowed.max_abs_diff(&global).unwrap();
        assert!(diff < 1e-5, "{diff}");
    }
}

#[test]
fn end_to_end_gradients() {
    let cfg = UNetConfig::new(1, 2, 2, 2).with_skips(lfam(4));
    let mut model = build_unet::<f64>(&cfg, 2).unwrap();
    // Non-zero biases exercise every path.
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        if p.shape()[1..] == [1, 1, 1] {
            *p = random(p.shape(), 100 + i as u64);
            p.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
    }
    let probe = random([1, 2, 8, 8], 77);
    let mut xs = vec![random([1, 1, 8, 8], 8)];
    xs.extend(model.params().iter().cloned());
    let report = grad_check_many(
        |tape, vars| {
            let logits = forward_tape(&model, tape, &vars[1..], vars[0], AttentionImpl::Windowed)?;
            let w = tape.constant(probe.clone());
            let prod = tape.mul(logits, w)?;
            tape.sum(prod)
        },
        &xs,
        1e-5,
    )
    .unwrap();
    assert!(report.max() < 1e-3, "{:?}", report.per_input);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = UNetConfig::new(1, 4, 2, 2).with_skips(lfam(4));
    let model = build_unet::<f32>(&cfg, 3).unwrap();
    let x = random([1, 1, 16, 16], 5).cast::<f32>();
    let before = model.forward(&x).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lfck");
    save_checkpoint(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(bytes[4..12], cfg.fingerprint().to_le_bytes());
    let loaded: ModelState<f32> = load_checkpoint(&cfg, &path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.forward(&x).unwrap().data(), before.data());
}

#[test]
fn checkpoint_errors() {
    let cfg = UNetConfig::new(1, 2, 1, 1);
    let model = build_unet::<f32>(&cfg, 0).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();

    let other = UNetConfig::new(1, 3, 1, 1);
    assert!(matches!(read_checkpoint::<f32, _>(&other, &bytes[..]), Err(Error::Format(_))));
    assert!(matches!(read_checkpoint::<f32, _>(&cfg, &bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint::<f32, _>(&cfg, &bad[..]), Err(Error::Format(_))));
    let missing = std::path::Path::new("/nonexistent/model.lfck");
    assert!(matches!(load_checkpoint::<f32>(&cfg, missing), Err(Error::Io { .. })));
}

#[test]
fn flop_formula_instances() {
    assert_eq!(conv_flops(3, 2, 1, 4, 4), 192);
    let p = ConvParams::<f32>::init(4, 2, 3, 1, 1, &mut seeded(0));
    assert_eq!(p.weight.numel() + p.bias.numel(), 76);
}

/// Charges every recorded conv, transposed conv and attention node from the
/// tensor shapes actually seen during a forward pass.
fn walked_flops(model: &ModelState<f32>, h: usize, w: usize) -> u64 {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros([1, model.config().in_channels, h, w]));
    forward_tape(model, &mut tape, &vars, x, AttentionImpl::Windowed).unwrap();
    let mut ranges: Vec<usize> = model
        .config()
        .skips
        .iter()
        .filter_map(|s| match s {
            SkipMode::Lfam(l) => Some(l.local_range),
            _ => None,
        })
        .collect();
    // Decoder levels run deepest first.
    ranges.reverse();
    let mut ranges = ranges.into_iter();
    let mut total = 0u64;
    for i in 0..tape.len() {
        let v = Var(i);
        let shape = |j: usize| tape.value(tape.inputs(v)[j]).shape();
        let out = tape.value(v).shape();
        match tape.op_name(v) {
            "conv2d" => {
                let [co, ci, kh, kw] = shape(1);
                let mut macs = 0u64;
                for _ in 0..out[2] * out[3] {
                    macs += (co * ci * kh * kw) as u64;
                }
                total += 2 * macs;
            }
            "upconv2x2" => {
                let [_, ci, ih, iw] = shape(0);
                let co = out[1];
                total += 2 * (ih * iw * ci * co * 4) as u64;
            }
            "window_attention" => {
                let [_, d, ah, aw] = shape(0);
                total += attention_flops_local(ah, aw, d, ranges.next().unwrap());
            }
            _ => {}
        }
    }
    assert!(ranges.next().is_none());
    total
}

#[test]
fn flop_count_matches_layer_walk() {
    for skip in [lfam(4), SkipMode::Concat] {
        let cfg = UNetConfig::new(1, 4, 8, 2).with_skips(skip);
        let model = build_unet::<f32>(&cfg, 0).unwrap();
        let cost = model.count_flops_and_params(32, 32).unwrap();
        assert_eq!(cost.flops, walked_flops(&model, 32, 32));
        let tracked: usize = {
            let mut tape = Tape::new();
            model.bind(&mut tape, true).iter().map(|&v| tape.value(v).numel()).sum()
        };
        assert_eq!(cost.params as usize, tracked);
    }
}

#[test]
fn batch_items_are_independent() {
    for skip in [SkipMode::Concat, lfam(3)] {
        let cfg = UNetConfig::new(1, 3, 2, 2).with_skips(skip);
        let model = build_unet::<f64>(&cfg, 4).unwrap();
        let x = random([3, 1, 8, 8], 12);
        let whole = model.forward(&x).unwrap();
        for b in 0..3 {
            let one = Tensor::from_vec([1, 1, 8, 8], x.data()[b * 64..(b + 1) * 64].to_vec()).unwrap();
            let out = model.forward(&one).unwrap();
            assert_eq!(out.data(), &whole.data()[b * 192..(b + 1) * 192]);
        }
    }
}
