use super::*;
use crate::numerics::softmax_rows;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        dropout: 0.0,
        window: 8,
        total_tokens: 8,
        ln_eps: 1e-5,
    }
}

fn tokens(batch: usize, window: usize, total: u32, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch * window).map(|_| rng.random_range(0..total)).collect()
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(16, 8).unwrap();
    for c in 0..8 {
        assert_eq!(pe.get(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
    assert!((positional_encoding(4, 256).unwrap().get(1, 0) - 0.8415).abs() < 1e-4);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(positional_encoding(4, 7).is_err());
}

#[test]
fn zero_embedding_gives_positions() {
    let mut model = CanBertModel::new(tiny_config(), 0).unwrap();
    model.params_mut()[EMBED].value.fill(0.0);
    let x = model.embed_sequence(&[3; 8]).unwrap();
    assert_eq!(x.data(), positional_encoding(8, 8).unwrap().data());

    let model = CanBertModel::new(tiny_config(), 0).unwrap();
    let x = model.embed_sequence(&[5; 8]).unwrap();
    let pe = &model.pe;
    for c in 0..8 {
        let diff = x.get(1, c) - x.get(0, c);
        assert!((diff - (pe.get(1, c) - pe.get(0, c))).abs() < 1e-15);
    }
    assert!(matches!(
        model.embed_sequence(&[8; 8]),
        Err(ModelError::TokenOutOfRange { token: 8, .. })
    ));
    assert!(model.embed_sequence(&[0; 7]).is_err());
}

#[test]
fn default_shapes() {
    let model = CanBertModel::new(ModelConfig::new(32, 4), 0).unwrap();
    assert_eq!(model.embed_sequence(&[0; 32]).unwrap().shape(), (32, 256));
    assert_eq!(model.forward(&[1; 32]).unwrap().shape(), (32, 6));
}

#[test]
fn parameter_count_closed_form() {
    let cfg = ModelConfig::new(32, 90);
    let expected = 92 * 256
        + 4 * (3 * 256 * 256 + 256 * 256 + 2 * 2 * 256 + 256 * 512 + 512 + 512 * 256 + 256)
        + 256 * 92
        + 92;
    assert_eq!(cfg.closed_form_parameter_count(), expected);
    assert_eq!(expected, 2_151_516);

    let small = tiny_config();
    let model = CanBertModel::new(small.clone(), 0).unwrap();
    assert_eq!(model.parameter_count(), small.closed_form_parameter_count());

    let deeper = ModelConfig {
        layers: 2,
        ..small.clone()
    };
    assert_eq!(
        CanBertModel::new(deeper.clone(), 0).unwrap().parameter_count() - model.parameter_count(),
        small.layer_parameter_count()
    );
    let wider = ModelConfig {
        total_tokens: small.total_tokens + 1,
        ..small.clone()
    };
    assert_eq!(
        CanBertModel::new(wider, 0).unwrap().parameter_count() - model.parameter_count(),
        2 * small.d_model + 1
    );
}

#[test]
fn config_validation() {
    let base = tiny_config();
    for bad in [
        ModelConfig { heads: 3, ..base.clone() },
        ModelConfig { window: 1, ..base.clone() },
        ModelConfig { d_model: 7, heads: 1, ..base.clone() },
        ModelConfig { dropout: 1.0, ..base.clone() },
        ModelConfig { total_tokens: 2, ..base.clone() },
    ] {
        assert!(CanBertModel::new(bad, 0).is_err());
    }
}

#[test]
fn eval_forward_is_deterministic_and_normalized() {
    let model = CanBertModel::new(tiny_config(), 1).unwrap();
    let toks = tokens(3, 8, 8, 2);
    let a = model.forward(&toks).unwrap();
    let b = model.forward(&toks).unwrap();
    assert_eq!(a.data(), b.data());
    for r in 0..a.rows() {
        assert!((softmax_rows(&a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // Batched and one-at-a-time evaluation agree exactly.
    let single = model.forward(&toks[8..16]).unwrap();
    assert_eq!(single.data(), &a.data()[8 * 8..16 * 8]);
}

#[test]
fn attention_rows_are_stochastic_in_every_layer() {
    let cfg = ModelConfig {
        layers: 2,
        heads: 4,
        ..tiny_config()
    };
    let model = CanBertModel::new(cfg, 3).unwrap();
    let toks = tokens(2, 8, 8, 4);
    let (_, cache) = model.encode(&toks, Mode::Eval, true, &mut NoRng).unwrap();
    let cache = cache.unwrap();
    for l in 0..2 {
        for s in 0..2 {
            for h in 0..4 {
                let a = cache.attention(l, s, h);
                for r in 0..8 {
                    assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(a.row(r).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }
}

#[test]
fn permuting_tokens_changes_logits() {
    let model = CanBertModel::new(tiny_config(), 5).unwrap();
    let toks: Vec<u32> = vec![0, 1, 2, 3, 4, 5, 6, 7];
    let mut perm = toks.clone();
    perm.reverse();
    let a = model.forward(&toks).unwrap();
    let b = model.forward(&perm).unwrap();
    // Row i of the permuted input sees the same token as row 7 - i of the
    // original; positions must still make the outputs differ.
    let differs = (0..8).any(|i| a.row(7 - i) != b.row(i));
    assert!(differs);
}

#[test]
fn train_mode_dropout_changes_hidden_state() {
    let cfg = ModelConfig {
        dropout: 0.5,
        ..tiny_config()
    };
    let model = CanBertModel::new(cfg, 0).unwrap();
    let toks = tokens(1, 8, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (train, _) = model.encode(&toks, Mode::Train, false, &mut rng).unwrap();
    let (eval, _) = model.encode(&toks, Mode::Eval, false, &mut NoRng).unwrap();
    assert_ne!(train.data(), eval.data());
}

/// Central-difference check of every parameter entry on the tiny config.
#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut model = CanBertModel::new(cfg.clone(), 11).unwrap();
    let toks = tokens(2, 8, 8, 12);
    let rows = vec![1, 4, 6, 9, 10, 15];
    let targets: Vec<usize> = rows.iter().map(|&r| (toks[r] as usize + 3) % 6).collect();

    model
        .loss_and_backward(&toks, &rows, &targets, Mode::Train, &mut NoRng)
        .unwrap();
    let analytic: Vec<Tensor2> = model.params().iter().map(|p| p.grad.clone()).collect();

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for pi in 0..model.params().len() {
        for i in 0..model.params()[pi].len() {
            let orig = model.params()[pi].value.data()[i];
            model.params_mut()[pi].value.data_mut()[i] = orig + h;
            let up = model.masked_loss(&toks, &rows, &targets).unwrap();
            model.params_mut()[pi].value.data_mut()[i] = orig - h;
            let down = model.masked_loss(&toks, &rows, &targets).unwrap();
            model.params_mut()[pi].value.data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-3, "{} [{i}]: analytic {a} numeric {num}", model.params()[pi].name);
        }
    }
    assert!(worst < 1e-3);
}

#[test]
fn gradients_accumulate_across_calls() {
    let mut model = CanBertModel::new(tiny_config(), 2).unwrap();
    let toks = tokens(1, 8, 8, 3);
    let rows = [2, 5];
    let targets = [1, 2];
    model.loss_and_backward(&toks, &rows, &targets, Mode::Eval, &mut NoRng).unwrap();
    let once: Vec<f64> = model.params()[0].grad.data().to_vec();
    model.loss_and_backward(&toks, &rows, &targets, Mode::Eval, &mut NoRng).unwrap();
    for (a, b) in model.params()[0].grad.data().iter().zip(&once) {
        assert!((a - 2.0 * b).abs() < 1e-15);
    }
}
