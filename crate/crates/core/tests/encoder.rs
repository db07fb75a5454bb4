use ehrseq::corpus::vocab::{ICD_OFFSET, MASK, PAD};
use ehrseq::corpus::{encode_history, generate_synthetic_corpus, GeneratorConfig, PatientHistory, Vocabulary};
use ehrseq::encoder::{
    mlm_loss_graph, predict_next_distribution, train, Batch, EncoderModel, MaskedBatch, ModelConfig, TrainOptions,
    IGNORE_INDEX,
};
use ehrseq::Error;
use ehrseq_tensor::{gradient_check, GradCheckConfig, Tensor};

fn mini_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 32,
        max_len: 12,
        vocab_size,
        dropout: 0.0,
        ..ModelConfig::desk(vocab_size)
    }
}

fn small_corpus() -> (Vec<PatientHistory>, Vocabulary) {
    let ps = generate_synthetic_corpus(
        5,
        &GeneratorConfig {
            n_patients: 64,
            n_codes: 20,
            ..Default::default()
        },
    )
    .unwrap();
    let v = Vocabulary::build(&ps).unwrap();
    (ps, v)
}

fn rel_close(a: &[f32], b: &[f32], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| {
        let (x, y) = (*x as f64, *y as f64);
        (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0)
    })
}

#[test]
fn full_encoder_gradient_matches_finite_differences() {
    // A wider init than training uses keeps attention away from uniform, so
    // no gradient sits at the finite-difference noise floor.
    let cfg = ModelConfig {
        init_std: 0.3,
        ..mini_config(50)
    };
    let model = EncoderModel::new(cfg.clone(), "mini", 11).unwrap();
    // Two rows of 12 slots; the second carries a PAD tail.
    let ids: Vec<usize> = vec![
        2, 8, 20, 30, MASK, 41, 12, 30, 49, 33, MASK, 17, //
        2, 9, 60 % 50, 44, 45, MASK, 22, 23, PAD, PAD, PAD, PAD,
    ];
    let mut labels = vec![IGNORE_INDEX; 24];
    labels[4] = 35;
    labels[10] = 48;
    labels[7] = 30;
    labels[17] = 46;
    let mb = MaskedBatch {
        attention_mask: ids.iter().map(|&t| t != PAD).collect(),
        input_ids: ids,
        labels,
        batch: 2,
        len: 12,
    };
    let params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.cast()).collect();
    let started = std::time::Instant::now();
    let report = gradient_check(
        &params,
        |g, vars| Ok(mlm_loss_graph(g, &cfg, vars, &mb, false).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        })?),
        &GradCheckConfig {
            tolerance: 1e-3,
            // Key biases have an exactly zero gradient (softmax shift
            // invariance); their differences are pure roundoff near 1e-11.
            floor: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn padding_tail_does_not_change_real_positions() {
    let (ps, v) = small_corpus();
    let cfg = ModelConfig {
        max_len: 40,
        ..mini_config(v.len())
    };
    let model = EncoderModel::new(cfg.clone(), v.hash(), 2).unwrap();
    let samples: Vec<_> = ps[..4].iter().map(|p| encode_history(p, &v, cfg.encode_options())).collect();
    let short = Batch::from_samples(&samples);
    let long = Batch::padded(&samples, 40);
    let a = model.forward(&short).unwrap();
    let b = model.forward(&long).unwrap();
    let (d, vs) = (cfg.d, cfg.vocab_size);
    for (i, s) in samples.iter().enumerate() {
        for pos in 0..s.length {
            let ha = &a.hidden.data()[(i * short.len + pos) * d..][..d];
            let hb = &b.hidden.data()[(i * long.len + pos) * d..][..d];
            assert!(rel_close(ha, hb, 1e-5));
            let la = &a.logits.data()[(i * short.len + pos) * vs..][..vs];
            let lb = &b.logits.data()[(i * long.len + pos) * vs..][..vs];
            assert!(rel_close(la, lb, 1e-5));
        }
    }
}

#[test]
fn without_positions_encoder_is_permutation_equivariant() {
    let (ps, v) = small_corpus();
    let cfg = ModelConfig {
        max_len: 40,
        use_positional: false,
        ..mini_config(v.len())
    };
    let model = EncoderModel::new(cfg.clone(), v.hash(), 4).unwrap();
    let p = ps.iter().find(|p| p.events.len() >= 6).unwrap();
    let s = encode_history(p, &v, cfg.encode_options());
    let k = s.length - 3;
    // Reverse the event slots.
    let perm: Vec<usize> = (0..s.length).map(|i| if i < 3 { i } else { 3 + (k - 1 - (i - 3)) }).collect();
    let mut t = s.clone();
    for i in 0..s.length {
        t.token_ids[i] = s.token_ids[perm[i]];
    }
    let a = model.forward(&Batch::from_samples(&[s.clone()])).unwrap();
    let b = model.forward(&Batch::from_samples(&[t])).unwrap();
    let vs = cfg.vocab_size;
    for i in 0..s.length {
        let la = &a.logits.data()[perm[i] * vs..][..vs];
        let lb = &b.logits.data()[i * vs..][..vs];
        assert!(rel_close(la, lb, 1e-5), "position {i}");
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise_and_guards_vocabulary() {
    let (ps, v) = small_corpus();
    let model = EncoderModel::new(mini_config(v.len()), v.hash(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = EncoderModel::load(&path, Some(&v.hash())).unwrap();
    assert_eq!(back, model);
    let samples: Vec<_> = ps[..3].iter().map(|p| encode_history(p, &v, model.config.encode_options())).collect();
    let batch = Batch::from_samples(&samples);
    assert_eq!(model.forward(&batch).unwrap().logits, back.forward(&batch).unwrap().logits);

    assert!(matches!(
        EncoderModel::load(&path, Some("other-hash")),
        Err(Error::VocabMismatch { .. })
    ));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(EncoderModel::load(&path, None).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (ps, v) = small_corpus();
    let cfg = ModelConfig {
        lr: 0.0,
        epochs: 1,
        batch_size: 1,
        max_len: 40,
        ..mini_config(v.len())
    };
    let mut model = EncoderModel::new(cfg.clone(), v.hash(), 3).unwrap();
    let before = model.clone();
    let sample = encode_history(&ps[0], &v, cfg.encode_options());
    train(&mut model, &[sample], &TrainOptions::default(), |_| {}).unwrap();
    assert_eq!(model.params(), before.params());
}

#[test]
fn training_is_deterministic_and_checkpoints_each_epoch() {
    let (ps, v) = small_corpus();
    let cfg = ModelConfig {
        epochs: 2,
        batch_size: 8,
        max_len: 40,
        dropout: 0.1,
        ..mini_config(v.len())
    };
    let samples: Vec<_> = ps.iter().map(|p| encode_history(p, &v, cfg.encode_options())).collect();
    let dir = tempfile::tempdir().unwrap();
    let run = |ckpt: bool| {
        let mut m = EncoderModel::new(cfg.clone(), v.hash(), 21).unwrap();
        let opts = TrainOptions {
            workers: 1,
            checkpoint_dir: ckpt.then(|| dir.path().to_path_buf()),
        };
        let rep = train(&mut m, &samples, &opts, |_| {}).unwrap();
        (m, rep)
    };
    let (m1, r1) = run(true);
    let (m2, r2) = run(false);
    assert_eq!(r1.losses(), r2.losses());
    assert_eq!(m1.params(), m2.params());
    assert_eq!(m1.epochs_completed, 2);
    let last = EncoderModel::load(&dir.path().join("epoch_2.ckpt"), Some(&v.hash())).unwrap();
    assert_eq!(last, m1);
    assert!(dir.path().join("epoch_1.ckpt").exists());
}

#[test]
fn parallel_workers_train_to_similar_loss() {
    let (ps, v) = small_corpus();
    let cfg = ModelConfig {
        epochs: 2,
        batch_size: 16,
        max_len: 40,
        ..mini_config(v.len())
    };
    let samples: Vec<_> = ps.iter().map(|p| encode_history(p, &v, cfg.encode_options())).collect();
    let mut m = EncoderModel::new(cfg.clone(), v.hash(), 5).unwrap();
    let opts = TrainOptions {
        workers: 3,
        checkpoint_dir: None,
    };
    let rep = train(&mut m, &samples, &opts, |_| {}).unwrap();
    assert!(rep.losses().iter().all(|l| l.is_finite() && *l > 0.0));
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let (ps, v) = small_corpus();
    let cfg = ModelConfig {
        max_len: 40,
        ..mini_config(v.len())
    };
    let mut m = EncoderModel::new(cfg.clone(), v.hash(), 5).unwrap();
    let n = m.params().len();
    m.params_mut()[n - 1].data_mut()[ICD_OFFSET] = f32::NAN;
    let samples: Vec<_> = ps.iter().map(|p| encode_history(p, &v, cfg.encode_options())).collect();
    let err = train(&mut m, &samples, &TrainOptions::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }), "{err}");
}

#[test]
fn next_code_distribution_covers_only_icd_tokens() {
    let (ps, v) = small_corpus();
    let cfg = ModelConfig {
        max_len: 40,
        ..mini_config(v.len())
    };
    let mut m = EncoderModel::new(cfg, v.hash(), 5).unwrap();
    let probs = predict_next_distribution(&m, &ps[0], &v).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(probs[..ICD_OFFSET].iter().all(|&p| p == 0.0));

    m.zero_decoder();
    let probs = predict_next_distribution(&m, &ps[1].prefix(1), &v).unwrap();
    let uniform = 1.0 / v.n_icd() as f64;
    assert!(probs[ICD_OFFSET..].iter().all(|p| (p - uniform).abs() < 1e-12));

    let other = Vocabulary::build(&ps[..1]).unwrap();
    assert!(matches!(
        predict_next_distribution(&m, &ps[0], &other),
        Err(Error::VocabMismatch { .. })
    ));
}

#[test]
fn long_prefix_keeps_most_recent_events() {
    let (ps, v) = small_corpus();
    let cfg = ModelConfig {
        max_len: 6,
        ..mini_config(v.len())
    };
    let m = EncoderModel::new(cfg, v.hash(), 5).unwrap();
    let p = ps.iter().find(|p| p.events.len() >= 5).unwrap();
    let s = ehrseq::encoder::prediction_sample(&m, p, &v);
    assert_eq!(s.length, 6);
    assert_eq!(s.token_ids[5], MASK);
    let last = &p.events[p.events.len() - 2..];
    assert_eq!(s.token_ids[3], v.icd_id(&last[0].code).unwrap());
    assert_eq!(s.token_ids[4], v.icd_id(&last[1].code).unwrap());
}
