use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdpm::error::Error;
use vdpm::gradcheck::{model_suite, report_lines};
use vdpm::model::{
    backbone_block, embed_patches, embed_time, forward, normalized_times, patchify,
    time_decoder, time_encoding, Conditioning, DecoderKind, Model, ModelConfig, ModelInput, Params,
    Session, Variant, Weights,
};
use vdpm::scenegen::{GeneratorConfig, Sequence};
use vdpm_tensor::{Tape, Tensor, Var};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn random_input(cfg: &ModelConfig, n: usize, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [n, cfg.channels, cfg.image_height, cfg.image_width];
    let images = Tensor::from_fn(shape, |_| rng.random_range(0.0f32..1.0));
    let mut t = 0.0;
    let timestamps = (0..n)
        .map(|_| {
            t += rng.random_range(0.05..0.3);
            t
        })
        .collect();
    ModelInput { images, timestamps }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_width: 16,
        image_height: 16,
        patch_size: 8,
        embed_dim: 8,
        backbone_depth: 4,
        heads: 2,
        tap_layers: vec![0, 1, 2, 3],
        decoder_depth: 2,
        register_tokens: 1,
        head_hidden_dim: 8,
        mlp_ratio: 2,
        time_frequencies: 2,
        ..ModelConfig::default()
    }
}

fn with_random_gates(mut model: Model, seed: u64) -> Model {
    model
        .weights
        .perturb(|n| n.contains(".gate.") || n.starts_with("qhead.mod"), 0.3, seed);
    model
}

#[test]
fn patchify_counts_tokens_and_checks_divisibility() {
    let images = Tensor::<f32>::zeros([2, 3, 32, 32]);
    assert_eq!(patchify(&images, 8).unwrap().shape(), &[2, 16, 192]);
    let bad = Tensor::<f32>::zeros([1, 3, 30, 32]);
    assert!(matches!(patchify(&bad, 8), Err(Error::Contract(_))));
    let cfg = ModelConfig {
        image_width: 30,
        ..ModelConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn zero_image_and_weights_give_positional_embedding() {
    let cfg = ModelConfig::default();
    let mut w = Weights::<f32>::init(&cfg, 1).unwrap();
    *w.get_mut("patch.w").unwrap() = Tensor::zeros([192, 64]);
    let tape = Tape::new();
    let p = Params::constants(&tape, &w);
    let tokens = embed_patches(&cfg, &p, &Tensor::zeros([1, 3, 32, 32])).unwrap();
    let pos = w.get("patch.pos").unwrap();
    assert_eq!(tokens.value().data(), pos.data());
}

#[test]
fn swapping_patches_swaps_tokens_before_position() {
    let cfg = ModelConfig::default();
    let w = Weights::<f64>::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_tensor(&mut rng, &[1, 3, 32, 32], 1.0);
    // swap patch (0, 1) with patch (2, 3)
    let mut swapped = img.clone();
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                let a = (c * 32 + y) * 32 + 8 + x;
                let b = (c * 32 + 16 + y) * 32 + 24 + x;
                swapped.data_mut().swap(a, b);
            }
        }
    }
    let embed = |im: &Tensor<f64>| {
        let tape = Tape::new();
        let p = Params::constants(&tape, &w);
        let pos = p.get("patch.pos").unwrap();
        embed_patches(&cfg, &p, im).unwrap().sub(pos).unwrap().value()
    };
    let (a, b) = (embed(&img), embed(&swapped));
    let row = |t: &Tensor<f64>, k: usize| t.data()[k * 64..(k + 1) * 64].to_vec();
    let (pa, pb) = (1, 2 * 4 + 3);
    for k in 0..16 {
        let want = if k == pa { pb } else if k == pb { pa } else { k };
        let (x, y) = (row(&b, k), row(&a, want));
        assert!(x.iter().zip(&y).all(|(u, v)| (u - v).abs() < 1e-12), "token {k}");
    }
}

#[test]
fn time_encoding_endpoints_and_degenerate_span() {
    let ts = [0.3, 0.5, 0.9];
    let tau = normalized_times(&ts);
    assert_eq!(tau[0], 0.0);
    assert_eq!(tau[2], 1.0);
    let zero = time_encoding(0.0, 4);
    assert_eq!(zero, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let one = time_encoding(1.0, 4);
    assert!((one[0]).abs() < 1e-12 && (one[4] + 1.0).abs() < 1e-12);
    assert_eq!(normalized_times(&[2.0]), vec![0.0]);
    assert_eq!(normalized_times(&[2.0, 2.0]), vec![0.0, 0.0]);

    let cfg = ModelConfig::default();
    let w = Weights::<f64>::init(&cfg, 4).unwrap();
    let tape = Tape::new();
    let p = Params::constants(&tape, &w);
    let first = embed_time(&cfg, &p, 0.3, &ts).unwrap().value();
    let base = w.get("time.token").unwrap();
    let enc = time_encoding(0.0, cfg.time_frequencies);
    let tw = w.get("time.w").unwrap();
    for d in 0..64 {
        let want: f64 = base.data()[d]
            + (0..enc.len()).map(|k| enc[k] * tw.data()[k * 64 + d]).sum::<f64>();
        assert!((first.data()[d] - want).abs() < 1e-12);
    }
}

#[test]
fn distinct_times_give_distinct_tokens() {
    let cfg = ModelConfig::default();
    let w = Weights::<f64>::init(&cfg, 5).unwrap();
    let tape = Tape::new();
    let p = Params::constants(&tape, &w);
    let tokens: Vec<Vec<f64>> = (0..100)
        .map(|k| {
            let t = k as f64 / 99.0;
            embed_time(&cfg, &p, t, &[0.0, 1.0]).unwrap().value().into_data()
        })
        .collect();
    for a in 0..100 {
        for b in a + 1..100 {
            let d: f64 = tokens[a].iter().zip(&tokens[b]).map(|(x, y)| (x - y).abs()).sum();
            assert!(d > 1e-9, "tokens {a} and {b} coincide");
        }
    }
}

#[test]
fn tokens_per_frame() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.num_patches(), 16);
    assert_eq!(cfg.tokens_per_frame(), 16 + 1 + 2 + 1);
}

#[test]
fn single_frame_attention_modes_coincide() {
    let cfg = ModelConfig::default();
    let w = Weights::<f32>::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Tensor<f32> = random_tensor(&mut rng, &[1, 19, 64], 1.0).cast();
    let run = |global| {
        let tape = Tape::new();
        let p = Params::constants(&tape, &w);
        let (y, _, _) = backbone_block(&p, "backbone.0", tape.constant(x.clone()), 4, global).unwrap();
        y.value()
    };
    assert!(run(false).bit_eq(&run(true)));
}

#[test]
fn config_validation() {
    let ok = ModelConfig::default();
    ok.validate().unwrap();
    let bad_taps = ModelConfig {
        tap_layers: vec![1, 3, 3, 7],
        ..ok.clone()
    };
    assert!(bad_taps.validate().is_err());
    let deep_tap = ModelConfig {
        tap_layers: vec![1, 3, 5, 8],
        ..ok.clone()
    };
    assert!(deep_tap.validate().is_err());
    let three = ModelConfig {
        decoder_depth: 3,
        ..ok.clone()
    };
    assert!(three.validate().is_err());
    let heads = ModelConfig { heads: 5, ..ok.clone() };
    assert!(heads.validate().is_err());
    let json = r#"{"embed_dim": 32, "bogus": 1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    let partial: ModelConfig = serde_json::from_str(r#"{"embed_dim": 32}"#).unwrap();
    assert_eq!(partial.embed_dim, 32);
    assert_eq!(partial.backbone_depth, 8);
}

#[test]
fn output_shapes_and_confidence() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 8).unwrap();
    let input = random_input(&cfg, 3, 9);
    let (pred, _) = model.full_forward(&input, 1).unwrap();
    assert_eq!(pred.p_points.shape(), &[3, 32, 32, 3]);
    assert_eq!(pred.q_conf.shape(), &[3, 32, 32]);
    assert!(pred.p_conf.data().iter().chain(pred.q_conf.data()).all(|&c| c > 1.0));
    let set = pred.dpm_set().unwrap();
    assert_eq!(set.time_variant.len() + set.time_invariant.len(), 6);
    assert_eq!(set.distinct_maps().len(), 5);
    for q in pred.camera.quat.data().chunks(4) {
        let n: f32 = q.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert!(pred.camera.fov.data().iter().all(|&f| f > 0.0));
}

#[test]
fn zero_gates_make_q_equal_p_bitwise() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 10).unwrap();
    for (k, n) in [1, 2, 4].into_iter().enumerate() {
        let input = random_input(&cfg, n, 11 + k as u64);
        for j in 0..n {
            let (pred, _) = model.full_forward(&input, j).unwrap();
            assert!(pred.q_points.bit_eq(&pred.p_points));
            assert!(pred.q_conf.bit_eq(&pred.p_conf));
        }
    }
}

#[test]
fn reference_frame_bypasses_trained_decoder() {
    let cfg = ModelConfig::default();
    let model = with_random_gates(Model::new(cfg.clone(), 12).unwrap(), 13);
    let input = random_input(&cfg, 3, 14);
    let (n, hw3) = (3, 32 * 32 * 3);
    for j in 0..n {
        let (pred, _) = model.full_forward(&input, j).unwrap();
        let slice = |t: &Tensor<f32>, i: usize| t.data()[i * hw3..(i + 1) * hw3].to_vec();
        assert_eq!(slice(&pred.q_points, j), slice(&pred.p_points, j));
        for i in (0..n).filter(|&i| i != j) {
            assert_ne!(slice(&pred.q_points, i), slice(&pred.p_points, i));
        }
    }

    let w = model.weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let taps: Vec<Tensor<f32>> = (0..4)
        .map(|_| random_tensor(&mut rng, &[3, 16, 64], 1.0).cast())
        .collect();
    let tape = Tape::new();
    let p = Params::constants(&tape, &w);
    let vars: Vec<Var<f32>> = taps.iter().map(|t| tape.constant(t.clone())).collect();
    let t_hat = tape.constant(random_tensor(&mut rng, &[64], 1.0).cast());
    let out = time_decoder(&cfg, &p, &vars, t_hat, 2).unwrap();
    for (o, t) in out.iter().zip(&taps) {
        let v = o.value();
        assert_eq!(&v.data()[2 * 16 * 64..], &t.data()[2 * 16 * 64..]);
        assert_ne!(&v.data()[..16 * 64], &t.data()[..16 * 64]);
    }
}

#[test]
fn zero_gate_decoder_is_identity_for_every_frame() {
    let cfg = ModelConfig::default();
    let w = Weights::<f32>::init(&cfg, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let taps: Vec<Tensor<f32>> = (0..4)
        .map(|_| random_tensor(&mut rng, &[2, 16, 64], 1.0).cast())
        .collect();
    let tape = Tape::new();
    let p = Params::constants(&tape, &w);
    let vars: Vec<Var<f32>> = taps.iter().map(|t| tape.constant(t.clone())).collect();
    let t_hat = tape.constant(random_tensor(&mut rng, &[64], 1.0).cast());
    let out = time_decoder(&cfg, &p, &vars, t_hat, 0).unwrap();
    for (o, t) in out.iter().zip(&taps) {
        assert!(o.value().bit_eq(t));
    }
}

#[test]
fn decode_at_time_matches_full_forward_bitwise() {
    let cfg = ModelConfig::default();
    for kind in [DecoderKind::Transformer, DecoderKind::HeadOnly] {
        let cfg = ModelConfig {
            decoder_kind: kind,
            ..cfg.clone()
        };
        let model = with_random_gates(Model::new(cfg.clone(), 18).unwrap(), 19);
        let input = random_input(&cfg, 4, 20);
        let mut session = Session::new(&model);
        let first = session.full_forward(&input, 0).unwrap();
        for j in 0..4 {
            let fresh = model.full_forward(&input, j).unwrap().0;
            let decoded = session.decode_at_time(j).unwrap();
            assert!(decoded.q_points.bit_eq(&fresh.q_points), "{kind:?} j={j}");
            assert!(decoded.q_conf.bit_eq(&fresh.q_conf));
            assert!(decoded.p_points.bit_eq(&first.p_points));
        }
    }
}

#[test]
fn decode_without_forward_is_a_cache_miss() {
    let model = Model::new(ModelConfig::default(), 21).unwrap();
    let mut session = Session::new(&model);
    assert!(matches!(session.decode_at_time(0), Err(Error::CacheMiss(_))));
    session.full_forward(&random_input(&model.config, 2, 22), 0).unwrap();
    session.decode_at_time(1).unwrap();
    assert!(session.decode_at_time(2).is_err());
    session.clear();
    assert!(matches!(session.decode_at_time(0), Err(Error::CacheMiss(_))));
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::default();
    let model = with_random_gates(Model::new(cfg.clone(), 23).unwrap(), 24);
    let input = random_input(&cfg, 3, 25);
    let a = model.full_forward(&input, 2).unwrap().0;
    let b = model.full_forward(&input, 2).unwrap().0;
    assert_eq!(a, b);
}

fn permute_input(input: &ModelInput<f64>, order: &[usize]) -> ModelInput<f64> {
    let s = input.images.shape().to_vec();
    let frame = s[1] * s[2] * s[3];
    let data = order
        .iter()
        .flat_map(|&i| input.images.data()[i * frame..(i + 1) * frame].to_vec())
        .collect();
    ModelInput {
        images: Tensor::new(s, data).unwrap(),
        timestamps: order.iter().map(|&i| input.timestamps[i]).collect(),
    }
}

#[test]
fn permuting_non_reference_frames_permutes_outputs() {
    let cfg = ModelConfig::default();
    let mut w = Weights::<f64>::init(&cfg, 26).unwrap();
    w.perturb(|n| n.contains(".gate."), 0.3, 27);
    let input = random_input(&cfg, 4, 28).cast::<f64>();
    let order = [0, 3, 1, 2];
    let permuted = permute_input(&input, &order);
    let run = |inp: &ModelInput<f64>, j: usize| {
        let tape = Tape::new();
        let p = Params::constants(&tape, &w);
        let f = forward(&cfg, &p, inp, j).unwrap();
        (
            f.main.time_variant.points.value(),
            f.time_invariant.points.value(),
            f.main.camera.translation.value(),
            f.main.taps[3].value(),
        )
    };
    // original reference frame 1 sits at position 2 after permutation
    let a = run(&input, 1);
    let b = run(&permuted, 2);
    let check_perm = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let per = x.len() / 4;
        for (k, &src) in order.iter().enumerate() {
            let xs = &x.data()[src * per..(src + 1) * per];
            let ys = &y.data()[k * per..(k + 1) * per];
            let err = xs.iter().zip(ys).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "frame {k}: {err}");
        }
    };
    check_perm(&a.0, &b.0);
    check_perm(&a.1, &b.1);
    check_perm(&a.2, &b.2);
    check_perm(&a.3, &b.3);
}

#[test]
fn all_ablation_variants_run() {
    let base = ModelConfig::default();
    let seq = Sequence::generate(30, &GeneratorConfig::default()).unwrap();
    let snippet = seq.snippet(&[0, 2, 4, 6, 8]).unwrap();
    let input = ModelInput::from_snippet(&snippet).unwrap();
    for v in Variant::ALL {
        let cfg = v.apply(&base);
        let model = Model::new(cfg.clone(), 31).unwrap();
        let (pred, cache) = model.full_forward(&input, 2).unwrap();
        assert_eq!(pred.q_points.shape(), &[5, 32, 32, 3], "{}", v.label());
        let again = model.decode_at_time(&cache, 4).unwrap();
        assert!(again.q_points.all_finite());
        // training graph also backpropagates
        let tape = Tape::new();
        let p = Params::leaves(&tape, &model.weights);
        let f = forward(&cfg, &p, &input, 1).unwrap();
        let loss = f
            .time_invariant
            .points
            .mean_all()
            .add(f.main.camera.fov.mean_all())
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.is_empty());
    }
    assert_eq!(Variant::Addition.apply(&base).conditioning, Conditioning::Addition);
    assert_eq!(Variant::DecoderDepth2.apply(&base).decoder_depth, 2);
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = ModelConfig::default();
    for v in Variant::ALL {
        let cfg = v.apply(&cfg);
        let mut w = Weights::<f32>::init(&cfg, 32).unwrap();
        w.perturb(|n| n.contains(".gate.") || n.starts_with("qhead.mod"), 0.3, 33);
        let input = random_input(&cfg, 3, 34);
        let tape = Tape::new();
        let p = Params::leaves(&tape, &w);
        let f = forward(&cfg, &p, &input, 1).unwrap();
        let loss = f
            .main
            .time_variant
            .points
            .mean_all()
            .add(f.time_invariant.points.mean_all())
            .unwrap()
            .add(f.time_invariant.conf.mean_all())
            .unwrap()
            .add(f.main.time_variant.conf.mean_all())
            .unwrap()
            .add(f.main.camera.translation.sum_all())
            .unwrap()
            .add(f.main.camera.quat.sum_all())
            .unwrap()
            .add(f.main.camera.fov.sum_all())
            .unwrap();
        let ids: Vec<(String, usize)> = p.iter().map(|(n, v)| (n.to_string(), v.id())).collect();
        let grads = tape.backward(loss).unwrap();
        for (name, id) in ids {
            let g = grads.get_id(id).unwrap_or_else(|| panic!("{}: no gradient for {name}", v.label()));
            assert!(g.data().iter().any(|&x| x != 0.0), "{}: zero gradient for {name}", v.label());
        }
    }
}

#[test]
fn blocks_and_whole_model_pass_finite_differences() {
    let lines = model_suite(&tiny_config(), 35).unwrap();
    assert_eq!(lines.len(), 7);
    for l in &lines {
        assert!(l.passed, "{l:?}");
        assert!(l.checked > 0);
    }
    print!("{}", report_lines(&lines));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = ModelConfig::default();
    let model = with_random_gates(Model::new(cfg.clone(), 46).unwrap(), 47);
    model.save(&path, 123).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded.step, 123);
    assert_eq!(loaded.model, model);
    let input = random_input(&cfg, 2, 48);
    let a = model.full_forward(&input, 1).unwrap().0;
    let b = loaded.model.full_forward(&input, 1).unwrap().0;
    assert!(a.q_points.bit_eq(&b.q_points) && a.p_conf.bit_eq(&b.p_conf));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"VDPM");
    let path2 = dir.path().join("again.ckpt");
    loaded.model.save(&path2, 123).unwrap();
    assert_eq!(std::fs::read(&path2).unwrap(), bytes);
}

#[test]
fn checkpoint_config_mismatch_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = Model::new(ModelConfig::default(), 49).unwrap();
    model.save(&path, 0).unwrap();
    let other = Variant::DecoderDepth2.apply(&ModelConfig::default());
    let err = Model::load_expecting(&path, &other).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("decoder_depth"), "{err}");
    Model::load_expecting(&path, &ModelConfig::default()).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Model::load(&path), Err(Error::Format { .. })));
    assert!(matches!(
        Model::load(&dir.path().join("missing.ckpt")),
        Err(Error::Io { .. })
    ));
    let mut w = model.weights.clone();
    w.insert("extra", Tensor::zeros([1]));
    assert!(Model::from_weights(model.config.clone(), w).is_err());
}
