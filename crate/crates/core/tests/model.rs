//! Behavioral tests for the character language model: initialization,
//! scoring traces, sampling, training, low-rank adapters, and the
//! checkpoint format.

use approx::assert_relative_eq;
use mialab_core::corpus::{TokenSequence, Vocabulary, PAD_ID, UNK_ID};
use mialab_core::model::train::{
    finite_difference_max_rel_err, fit, mean_loss, per_sample_gradient, total_nll, TrainConfig,
    TrainMode,
};
use mialab_core::model::{
    checkpoint, full_matrix_params, log_moments, lora_matrix_params, read_traces,
    trainable_param_count, write_traces, LanguageModel, Mode, ModelConfig, TraceRecord,
};
use mialab_core::{Error, Model32, Model64};
use rand::Rng;

const CHARS: &[u8] = b"abcdefgh ";

fn vocab() -> Vocabulary {
    Vocabulary::from_texts(["abcdefgh "])
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        context_len: 4,
        embed_dim: 3,
        hidden_dim: 6,
        init_seed: 77,
        init_scale: 0.1,
    }
}

fn tiny_model(seed: u64) -> Model64 {
    let cfg = ModelConfig { init_seed: seed, ..tiny_cfg() };
    LanguageModel::new(vocab(), &cfg)
}

/// Random sequences over the tiny vocabulary's characters.
fn random_seqs(v: &Vocabulary, n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = mialab_core::seeds::rng(seed);
    (0..n)
        .map(|i| {
            let text: String = (0..len)
                .map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char)
                .collect();
            v.tokenize(format!("s{i}"), &text).unwrap()
        })
        .collect()
}

#[test]
fn initialization_is_a_pure_function_of_the_seed() {
    let a = tiny_model(77);
    let b = tiny_model(77);
    let c = tiny_model(78);
    assert_eq!(a, b);
    assert_ne!(a.weights.w1, c.weights.w1);
    assert_eq!(a.mode, Mode::Frozen);
    assert!(a.delta.is_none());
    // Biases start at zero; weight matrices do not.
    assert!(a.weights.b1.iter().all(|&x| x == 0.0));
    assert!(a.weights.b2.iter().all(|&x| x == 0.0));
    assert!(a.weights.w1.as_slice().iter().any(|&x| x != 0.0));
}

#[test]
fn zero_scale_initialization_scores_uniformly() {
    let cfg = ModelConfig { init_scale: 0.0, ..tiny_cfg() };
    let m: Model64 = LanguageModel::new(vocab(), &cfg);
    let v = m.vocab_size() as f64;
    let data = random_seqs(&m.vocab, 6, 20, 1);
    let tr = m.trace(&data[0]);
    for &lp in &tr.logp {
        assert_relative_eq!(lp, -v.ln(), max_relative = 1e-12);
    }
    assert_relative_eq!(m.perplexity(&data), v, max_relative = 1e-6);
}

#[test]
fn next_distribution_is_a_probability_vector() {
    for seed in 0..20u64 {
        let m = tiny_model(100 + seed);
        let ctx = random_seqs(&m.vocab, 1, 10, seed)[0].tokens.clone();
        for take in [0usize, 2, 10] {
            let p = m.next_distribution(&ctx[..take]);
            assert_eq!(p.len(), m.vocab_size());
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum = {sum}");
        }
    }
}

#[test]
fn distribution_moments_match_reference_values() {
    let (mu, sigma) = log_moments(&[0.75, 0.25]);
    assert_relative_eq!(mu, -0.5623351446188083, max_relative = 1e-12);
    assert_relative_eq!(sigma, 0.475713075448173, max_relative = 1e-12);

    // A point mass has zero log-probability mean and spread; zero-weight
    // entries contribute nothing rather than NaN.
    let (mu, sigma) = log_moments(&[1.0, 0.0, 0.0]);
    assert_eq!(mu, 0.0);
    assert_eq!(sigma, 0.0);
}

#[test]
fn trace_reports_consistent_per_token_statistics() {
    let m = tiny_model(5);
    let x = &random_seqs(&m.vocab, 1, 25, 9)[0];
    let tr = m.trace(x);
    assert_eq!(tr.len(), x.tokens.len());
    assert_eq!(tr.seq_id, x.id);
    assert!(tr.logp.iter().all(|&lp| lp <= 0.0 && lp.is_finite()));
    assert!(tr.sigma.iter().all(|&s| s >= 0.0));
    let manual: f64 = tr.logp.iter().sum();
    assert_relative_eq!(tr.nll_sum(), -manual, max_relative = 1e-12);
    assert_relative_eq!(tr.nll_mean(), -manual / tr.len() as f64, max_relative = 1e-12);
}

#[test]
fn trace_agrees_with_stepwise_distributions() {
    let m = tiny_model(6);
    let x = &random_seqs(&m.vocab, 1, 15, 3)[0];
    let tr = m.trace(x);
    // Independent path: query the next-token distribution position by
    // position and accumulate the product of the realized probabilities.
    let mut product = 1.0f64;
    for (i, &tok) in x.tokens.iter().enumerate() {
        product *= m.next_distribution(&x.tokens[..i])[tok];
    }
    assert_relative_eq!((-tr.nll_sum()).exp(), product, max_relative = 1e-9);
}

#[test]
fn empty_prefix_conditioning_is_plain_scoring() {
    let m = tiny_model(7);
    let x = &random_seqs(&m.vocab, 1, 12, 4)[0];
    let a = m.trace(x);
    let b = m.conditional_trace(&[], x);
    assert_eq!(a.logp, b.logp);
    assert_eq!(a.mu, b.mu);
    assert_eq!(a.sigma, b.sigma);
}

#[test]
fn prefix_conditioning_matches_scoring_the_concatenation() {
    let m = tiny_model(8);
    let both = random_seqs(&m.vocab, 2, 10, 5);
    let (prefix, x) = (&both[0], &both[1]);

    let mut joined = prefix.raw_text.clone();
    joined.push_str(&x.raw_text);
    let joined = m.vocab.tokenize("joined", &joined).unwrap();
    let full = m.trace(&joined);

    let cond = m.conditional_trace(&prefix.tokens, x);
    assert_eq!(cond.len(), x.tokens.len());
    assert_eq!(cond.logp, full.logp[prefix.tokens.len()..]);
}

#[test]
fn a_repeated_pattern_is_memorized() {
    let v = Vocabulary::from_texts(["ab"]);
    let cfg = ModelConfig {
        context_len: 4,
        embed_dim: 4,
        hidden_dim: 8,
        init_seed: 3,
        init_scale: 0.1,
    };
    let m: Model64 = LanguageModel::new(v.clone(), &cfg);
    let data = vec![v.tokenize("x", "abababababababab").unwrap()];
    let cfg = TrainConfig {
        epochs: 400,
        learning_rate: 0.7,
        batch_size: 1,
        seed: 2,
        mode: TrainMode::Full,
    };
    let trained = fit(&m, &data, &cfg).unwrap();
    assert!(m.perplexity(&data) > 1.5);
    assert!(trained.perplexity(&data) < 1.2);

    // Greedy continuation reproduces the pattern.
    let a = v.tokenize("p", "a").unwrap().tokens;
    let gen = trained.generate(&a, 6, 0.0, 0);
    assert_eq!(trained.render_tokens(&gen), "abababa");
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let m = tiny_model(11);
    let data = random_seqs(&m.vocab, 30, 24, 21);
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 0.3,
        batch_size: 8,
        seed: 4,
        mode: TrainMode::Full,
    };
    let t1 = fit(&m, &data, &cfg).unwrap();
    let t2 = fit(&m, &data, &cfg).unwrap();
    assert_eq!(t1, t2);
    assert!(mean_loss(&t1, &data) < mean_loss(&m, &data));
    assert_eq!(t1.mode, Mode::Full);

    let other = fit(&m, &data, &TrainConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(t1.weights.w1, other.weights.w1);
}

#[test]
fn zero_learning_rate_training_changes_nothing() {
    let m = tiny_model(12);
    let data = random_seqs(&m.vocab, 10, 16, 22);
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 0.0,
        batch_size: 4,
        seed: 6,
        mode: TrainMode::Full,
    };
    let t = fit(&m, &data, &cfg).unwrap();
    assert_eq!(t.weights, m.weights);
    assert!(t.delta.is_none());
}

#[test]
fn training_configuration_is_validated() {
    let m = tiny_model(13);
    let data = random_seqs(&m.vocab, 4, 16, 23);
    let bad_batch = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(fit(&m, &data, &bad_batch), Err(Error::InvalidConfig(_))));
    let bad_lr = TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() };
    assert!(matches!(fit(&m, &data, &bad_lr), Err(Error::InvalidConfig(_))));
    assert!(matches!(
        fit(&m, &[], &TrainConfig::default()),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn runaway_training_reports_the_failing_step() {
    let m = tiny_model(14);
    let data = random_seqs(&m.vocab, 8, 16, 24);
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 1e300,
        batch_size: 1,
        seed: 7,
        mode: TrainMode::Full,
    };
    match fit(&m, &data, &cfg) {
        Err(Error::TrainingDiverged { step }) => assert!(step > 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn full_gradients_match_finite_differences() {
    let m = tiny_model(15);
    let data = random_seqs(&m.vocab, 3, 10, 25);
    let err = finite_difference_max_rel_err(&m, &data, TrainMode::Full, 1e-4);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let m = tiny_model(16);
    // Attach a rank-2 delta (without stepping) so the check differentiates
    // through the composed weights.
    let attach = TrainConfig {
        epochs: 0,
        learning_rate: 0.1,
        batch_size: 4,
        seed: 8,
        mode: TrainMode::Lora { rank: 2 },
    };
    let data = random_seqs(&m.vocab, 3, 10, 26);
    let mut adapted = fit(&m, &data, &attach).unwrap();
    // Give R nonzero entries so both factors carry signal.
    if let Some(d) = adapted.delta.as_mut() {
        for (i, x) in d.r1.as_mut_slice().iter_mut().enumerate() {
            *x = 0.01 * (i as f64 + 1.0);
        }
        for (i, x) in d.r2.as_mut_slice().iter_mut().enumerate() {
            *x = -0.005 * (i as f64 + 1.0);
        }
    }
    let err = finite_difference_max_rel_err(&adapted, &data, TrainMode::Lora { rank: 2 }, 1e-4);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn per_sample_gradient_loss_matches_scoring() {
    let m = tiny_model(17);
    let x = &random_seqs(&m.vocab, 1, 12, 27)[0];
    let (_, loss) = per_sample_gradient(&m, x, TrainMode::Full);
    assert_relative_eq!(loss, m.sequence_nll(x), max_relative = 1e-12);
    assert_relative_eq!(total_nll(&m, std::slice::from_ref(x)), loss, max_relative = 1e-12);
}

#[test]
fn adapter_training_freezes_the_base_weights() {
    let m = tiny_model(18);
    let data = random_seqs(&m.vocab, 20, 20, 28);
    let cfg = TrainConfig {
        epochs: 4,
        learning_rate: 0.3,
        batch_size: 4,
        seed: 9,
        mode: TrainMode::Lora { rank: 2 },
    };
    let t = fit(&m, &data, &cfg).unwrap();
    assert_eq!(t.weights, m.weights);
    assert_eq!(t.mode, Mode::Lora);
    let d = t.delta.as_ref().expect("adapter attached");
    assert_eq!(d.rank, 2);
    assert_eq!(d.scale, 4.0);
    assert!(d.r1.as_slice().iter().any(|&x| x != 0.0), "adapter never trained");
    assert!(mean_loss(&t, &data) < mean_loss(&m, &data));
}

#[test]
fn a_fresh_adapter_scores_exactly_like_the_base() {
    let m = tiny_model(19);
    let data = random_seqs(&m.vocab, 4, 16, 29);
    let attach = TrainConfig {
        epochs: 0,
        learning_rate: 0.1,
        batch_size: 4,
        seed: 10,
        mode: TrainMode::Lora { rank: 3 },
    };
    let t = fit(&m, &data, &attach).unwrap();
    assert!(t.delta.is_some());
    for x in &data {
        assert_eq!(t.trace(x).logp, m.trace(x).logp);
    }
}

#[test]
fn adapter_rank_must_leave_both_factors_thin() {
    let m = tiny_model(20); // hidden_dim = 6 is the binding dimension
    let data = random_seqs(&m.vocab, 4, 16, 30);
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.1,
        batch_size: 4,
        seed: 11,
        mode: TrainMode::Lora { rank: 6 },
    };
    match fit(&m, &data, &cfg) {
        Err(Error::RankTooLarge { rank: 6, .. }) => {}
        other => panic!("expected rank error, got {other:?}"),
    }
}

#[test]
fn mode_mismatches_are_rejected() {
    let m = tiny_model(21);
    let data = random_seqs(&m.vocab, 4, 16, 31);
    let lora = TrainConfig {
        epochs: 0,
        learning_rate: 0.1,
        batch_size: 4,
        seed: 12,
        mode: TrainMode::Lora { rank: 2 },
    };
    let adapted = fit(&m, &data, &lora).unwrap();

    let full = TrainConfig { mode: TrainMode::Full, ..lora };
    assert!(matches!(fit(&adapted, &data, &full), Err(Error::InvalidMode(_))));

    let other_rank = TrainConfig { mode: TrainMode::Lora { rank: 3 }, ..lora };
    assert!(matches!(fit(&adapted, &data, &other_rank), Err(Error::InvalidMode(_))));
}

#[test]
fn parameter_counts_follow_the_shapes() {
    assert_eq!(full_matrix_params(4, 6), 24);
    assert_eq!(lora_matrix_params(4, 6, 2), 20);

    let m = tiny_model(22);
    let (v, d, k, h) = (m.vocab_size(), m.embed_dim, m.context_len, m.hidden_dim);
    assert_eq!(
        trainable_param_count(&m, TrainMode::Full),
        v * d + k * d * h + h + h * v + v
    );
    for rank in 1..h.min(6) {
        let lora = trainable_param_count(&m, TrainMode::Lora { rank });
        assert_eq!(lora, k * d * rank + rank * h + h * rank + rank * v);
        // The adapter is smaller than the matrices it shadows whenever the
        // rank is below each matrix's harmonic threshold m*n/(m+n).
        let full = full_matrix_params(k * d, h) + full_matrix_params(h, v);
        let threshold = |m: usize, n: usize| (m * n) as f64 / (m + n) as f64;
        if (rank as f64) < threshold(k * d, h).min(threshold(h, v)) {
            assert!(lora < full, "rank {rank}: {lora} >= {full}");
        }
    }
}

#[test]
fn generation_is_seeded_and_well_formed() {
    let m = tiny_model(23);
    let prefix = m.vocab.tokenize("p", "abc").unwrap().tokens;

    let g1 = m.generate(&prefix, 30, 1.0, 99);
    let g2 = m.generate(&prefix, 30, 1.0, 99);
    assert_eq!(g1, g2);
    assert_eq!(g1.len(), prefix.len() + 30);
    assert_eq!(&g1[..prefix.len()], &prefix[..]);
    assert!(g1[prefix.len()..]
        .iter()
        .all(|&t| t != UNK_ID && t != PAD_ID && t < m.vocab_size()));

    let g3 = m.generate(&prefix, 30, 1.0, 100);
    assert_ne!(g1, g3, "different seeds should diverge");

    // Greedy decoding ignores the seed entirely.
    assert_eq!(m.generate(&prefix, 10, 0.0, 1), m.generate(&prefix, 10, 0.0, 2));
    // Zero-length generation returns the prefix untouched.
    assert_eq!(m.generate(&prefix, 0, 1.0, 1), prefix);
    // Text renders with the same characters that were tokenized.
    assert_eq!(m.render_tokens(&prefix), "abc");
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model(24);
    let data = random_seqs(&m.vocab, 10, 16, 32);
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 0.3,
        batch_size: 4,
        seed: 13,
        mode: TrainMode::Full,
    };
    let trained = fit(&m, &data, &cfg).unwrap();

    let path = dir.path().join("full.bin");
    checkpoint::save(&path, &trained).unwrap();
    let loaded: Model64 = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, trained);

    // Adapted models keep their delta, rank, and scaling.
    let lora_cfg = TrainConfig { mode: TrainMode::Lora { rank: 2 }, ..cfg };
    let adapted = fit(&m, &data, &lora_cfg).unwrap();
    let path = dir.path().join("lora.bin");
    checkpoint::save(&path, &adapted).unwrap();
    let loaded: Model64 = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, adapted);
    assert_eq!(loaded.trace(&data[0]).logp, adapted.trace(&data[0]).logp);
}

#[test]
fn corrupt_checkpoints_are_rejected_with_causes() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model(25);
    let path = dir.path().join("m.bin");
    checkpoint::save(&path, &m).unwrap();
    let good = std::fs::read(&path).unwrap();

    // Wrong magic.
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let err = checkpoint::load::<f64>(&junk).unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");

    // Wrong version.
    let mut versioned = good.clone();
    versioned[4..8].copy_from_slice(&9u32.to_le_bytes());
    let vpath = dir.path().join("v.bin");
    std::fs::write(&vpath, &versioned).unwrap();
    let err = checkpoint::load::<f64>(&vpath).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    // Truncated tensor data.
    let tpath = dir.path().join("t.bin");
    std::fs::write(&tpath, &good[..good.len() - 8]).unwrap();
    assert!(checkpoint::load::<f64>(&tpath).is_err());

    // Trailing garbage.
    let mut extended = good.clone();
    extended.extend_from_slice(&[0u8; 8]);
    let epath = dir.path().join("e.bin");
    std::fs::write(&epath, &extended).unwrap();
    assert!(checkpoint::load::<f64>(&epath).is_err());
}

#[test]
fn trace_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model(26);
    let data = random_seqs(&m.vocab, 3, 10, 33);
    let traces: Vec<_> = data.iter().map(|x| m.trace(x)).collect();
    let path = dir.path().join("traces.jsonl");
    write_traces(&path, &traces).unwrap();
    let back = read_traces(&path).unwrap();
    assert_eq!(back.len(), traces.len());
    for (rec, tr) in back.iter().zip(&traces) {
        assert_eq!(rec.seq_id, tr.seq_id);
        assert_eq!(rec.logp, tr.logp);
        assert_eq!(rec.mu, tr.mu);
        assert_eq!(rec.sigma, tr.sigma);
    }
    let manual = TraceRecord::from_trace(&traces[0]);
    assert_eq!(manual.logp, back[0].logp);
}

#[test]
fn single_precision_models_work_end_to_end() {
    let cfg = tiny_cfg();
    let m: Model32 = LanguageModel::new(vocab(), &cfg);
    let data = random_seqs(&m.vocab, 8, 16, 34);
    let tr = m.trace(&data[0]);
    assert!(tr.logp.iter().all(|lp| lp.is_finite()));
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 0.3,
        batch_size: 4,
        seed: 14,
        mode: TrainMode::Full,
    };
    let trained = fit(&m, &data, &cfg).unwrap();
    assert!(mean_loss(&trained, &data) < mean_loss(&m, &data));
    assert!(trained.perplexity(&data).is_finite());

    // A double-precision checkpoint loads into single precision.
    let dir = tempfile::tempdir().unwrap();
    let m64 = tiny_model(27);
    let path = dir.path().join("m64.bin");
    checkpoint::save(&path, &m64).unwrap();
    let m32: Model32 = checkpoint::load(&path).unwrap();
    assert_eq!(m32.vocab, m64.vocab);
    assert!(m32.trace(&data[0]).nll_sum().is_finite());
}
