use dami::corpus::Label;
use dami::featurize::{FeaturizedDialogue, FeaturizedUtterance};
use dami::model::{glorot_bound, matching_features, Dami, EncoderMode, ModelConfig, ModelParams};
use dami::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        embed_dim: 8,
        n_pos: 4,
        hidden: 5,
        attention: 6,
        max_dialogue_len: 6,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    }
}

fn utterance(rng: &mut ChaCha8Rng, n: usize, role: u8) -> FeaturizedUtterance {
    FeaturizedUtterance {
        token_ids: (0..n).map(|_| rng.random_range(2..30)).collect(),
        pos_tags: (0..n).map(|_| rng.random_range(0..4)).collect(),
        term_freqs: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        positions: (1..=n as u32).collect(),
        emotion: rng.random_range(-1.0..1.0),
        role,
    }
}

fn dialogue(rng: &mut ChaCha8Rng, len: usize) -> FeaturizedDialogue {
    FeaturizedDialogue {
        session_id: "d".into(),
        utterances: (0..len).map(|t| utterance(rng, 1 + t % 4, (t % 2 == 0) as u8)).collect(),
        labels: vec![Label::Normal; len],
    }
}

#[test]
fn utterance_vector_has_4k_plus_1_entries() {
    let cfg = ModelConfig {
        hidden: 128,
        attention: 16,
        embed_dim: 8,
        ..small_config()
    };
    let model = Dami::new(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(model.encode_utterance(&utterance(&mut rng, 4, 1)).unwrap().len(), 513);
}

#[test]
fn single_token_attention_is_one() {
    let model = Dami::new(small_config(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for tf in [0.0, 0.3, 1.0] {
        let mut u = utterance(&mut rng, 1, 0);
        u.term_freqs = vec![tf];
        assert_eq!(model.encode_with_attention(&u).unwrap().1, vec![1.0]);
    }
}

#[test]
fn role_selects_its_own_attention_parameters() {
    let mut model = Dami::new(small_config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let customer = utterance(&mut rng, 4, 1);
    let agent = utterance(&mut rng, 4, 0);
    let before = (
        model.encode_utterance(&customer).unwrap(),
        model.encode_utterance(&agent).unwrap(),
    );
    for name in ["attn_w_agent", "attn_b_agent", "attn_g_agent"] {
        let i = model.params.index(name).unwrap();
        model.params.value_mut(i).mapv_inplace(|x| x * 3.0 + 0.1);
    }
    assert_eq!(model.encode_utterance(&customer).unwrap(), before.0);
    assert_ne!(model.encode_utterance(&agent).unwrap(), before.1);
    for name in ["attn_w_customer", "attn_b_customer", "attn_g_customer"] {
        let i = model.params.index(name).unwrap();
        model.params.value_mut(i).mapv_inplace(|x| x - 0.2);
    }
    assert_ne!(model.encode_utterance(&customer).unwrap(), before.0);
}

#[test]
fn matching_matches_a_double_loop() {
    let cfg = small_config();
    let dim = cfg.utterance_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vs: Vec<Vec<f64>> = (0..5).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let m = matching_features(&vs, &cfg).unwrap();
    assert!(m.is_strictly_lower_triangular());
    for i in 0..5 {
        for j in 0..5 {
            let mut want = 0.0;
            if j < i {
                for k in 0..dim {
                    want += vs[i][k] * vs[j][k];
                }
            }
            assert!((m.get(i, j) - want).abs() < 1e-6);
        }
    }
    assert_eq!(m.padded_row(2, 6).len(), 6);

    let one = matching_features(&vs[..1], &cfg).unwrap();
    assert_eq!(one.values, vec![vec![0.0]]);

    let mut unit = vec![0.0; dim];
    unit[3] = 1.0;
    let same = matching_features(&[unit.clone(), unit], &cfg).unwrap();
    assert_eq!(same.get(1, 0), 1.0);
}

#[test]
fn too_long_dialogues_are_rejected_with_advice() {
    let cfg = small_config();
    let vs = vec![vec![0.0; cfg.utterance_dim()]; 7];
    let err = matching_features(&vs, &cfg).unwrap_err();
    assert!(matches!(err, Error::DialogueTooLong { len: 7, max: 6 }));
    assert!(err.to_string().contains("raise max_dialogue_len"));

    let model = Dami::new(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(matches!(model.label_dialogue(&dialogue(&mut rng, 7)), Err(Error::DialogueTooLong { .. })));
}

#[test]
fn disabling_matching_equals_zeroed_matching_weights() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = dialogue(&mut rng, 5);
    let on = Dami::new(cfg.clone(), 6).unwrap();
    let off = Dami::from_parts(
        ModelConfig {
            use_matching: false,
            ..cfg.clone()
        },
        on.params.clone(),
    )
    .unwrap();
    let mut zeroed = on.clone();
    let i = zeroed.params.index("fuse_w").unwrap();
    zeroed
        .params
        .value_mut(i)
        .slice_mut(ndarray::s![.., ..cfg.max_dialogue_len])
        .fill(0.0);
    let a = off.predict_batch(&[&d]).unwrap();
    let b = zeroed.predict_batch(&[&d]).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, on.predict_batch(&[&d]).unwrap());
}

#[test]
fn init_is_deterministic_and_glorot() {
    let cfg = ModelConfig {
        vocab_size: 500,
        embed_dim: 32,
        n_pos: 10,
        hidden: 24,
        attention: 20,
        ..ModelConfig::default()
    };
    let a = ModelParams::init(&cfg, 9, None).unwrap();
    assert_eq!(a, ModelParams::init(&cfg, 9, None).unwrap());
    assert_ne!(a, ModelParams::init(&cfg, 10, None).unwrap());
    assert_eq!(glorot_bound(20, 2 * 32 + 10), (6.0f64 / (20.0 + 74.0)).sqrt());

    for (name, v) in a.iter() {
        let (r, c) = v.dim();
        let bound = if name == "word_embedding" {
            0.05
        } else if c == 1 {
            continue;
        } else {
            glorot_bound(r, c)
        };
        assert!(v.iter().all(|x| x.abs() <= bound), "{name} exceeds its bound");
        let n = v.len() as f64;
        let se = bound / 3f64.sqrt() / n.sqrt();
        let mean = v.sum() / n;
        assert!(mean.abs() < 3.0 * se, "{name}: mean {mean}, se {se}");
    }
}

#[test]
fn every_encoder_keeps_the_vector_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = dialogue(&mut rng, 4);
    for mode in [EncoderMode::Difficulty, EncoderMode::PlainBirnn, EncoderMode::BirnnSelfAttention] {
        for use_emotion in [true, false] {
            let cfg = ModelConfig {
                encoder_mode: mode,
                use_emotion,
                ..small_config()
            };
            let model = Dami::new(cfg.clone(), 1).unwrap();
            let v = model.encode_utterance(&d.utterances[0]).unwrap();
            assert_eq!(v.len(), cfg.utterance_dim());
            assert_eq!(*v.last().unwrap() == 0.0, !use_emotion, "{mode:?}");
            let p = model.label_dialogue(&d).unwrap();
            assert_eq!(p.probs.len(), 4);
        }
    }
}

#[test]
fn checkpoint_file_round_trip() {
    use dami::corpus::Vocabulary;
    use dami::model::Checkpoint;
    let vocabulary = Vocabulary::from_counts((0..28).map(|i| (format!("w{i}"), 30 - i as u64)).collect()).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocabulary.len(),
        ..small_config()
    };
    let ckpt = Checkpoint {
        model: Dami::new(cfg, 11).unwrap(),
        vocabulary,
        pos_tagset: (0..4).map(|i| format!("T{i}")).collect(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.vocabulary, ckpt.vocabulary);
    assert_eq!(back.pos_tagset, ckpt.pos_tagset);
    let expected = ckpt.rounded();
    assert_eq!(back.model, expected.model);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = dialogue(&mut rng, 4);
    assert_eq!(back.model.label_dialogue(&d).unwrap(), expected.model.label_dialogue(&d).unwrap());
}
