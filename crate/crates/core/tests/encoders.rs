use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdforge::encoders::{
    checkpoint_bytes, encode_batch, encode_gloss, init_encoder, lstm_layer, model_from_checkpoint_bytes, parameter_gap,
    parity_config, rnn_layer, scalar_mix, scalar_mix_weights, Direction, EncoderConfig, EncoderKind, ForwardCtx,
    RecurrentWeights, SeqBatch,
};
use rdforge::gradcheck::{check_encoder_gradients, toy_encoder_config};
use rdforge::tokenizers::{train_wordpiece, word_counts, PAD};
use rdforge::{ParamStore, Task, TaskSpec, Tape, Tensor, TrainedModel};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn params(config: &EncoderConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_encoder(config, &mut ChaCha8Rng::seed_from_u64(seed), &mut store).unwrap();
    store
}

fn zero_where(store: &mut ParamStore, pred: impl Fn(&str) -> bool) {
    for (name, t) in store.iter_mut() {
        if pred(name) {
            t.data_mut().fill(0.0);
        }
    }
}

fn encode_rows(config: &EncoderConfig, store: &ParamStore, seqs: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let batch = SeqBatch::new(seqs, config.max_len).unwrap();
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx {
        tape: &mut tape,
        params: &binding,
        train: false,
        rng: &mut rng,
    };
    let out = encode_batch(config, &mut ctx, &batch).unwrap();
    let v = tape.value(out);
    (0..seqs.len()).map(|r| v.row(r).to_vec()).collect()
}

fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> rdforge::Var {
    tape.leaf(&Tensor::new(shape.to_vec(), data).unwrap())
}

#[test]
fn rnn_single_step_with_identity_input_weights() {
    let mut tape = Tape::new();
    let w = RecurrentWeights {
        w_ih: leaf(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        w_hh: leaf(&mut tape, &[2, 2], vec![0.0; 4]),
        bias: leaf(&mut tape, &[2], vec![0.0; 2]),
    };
    let x = leaf(&mut tape, &[1, 2], vec![0.1, 0.2]);
    let h = rnn_layer(&mut tape, &w, x, &[1], 1, Direction::Forward).unwrap();
    assert_eq!(tape.value(h).data(), &[0.1f64.tanh(), 0.2f64.tanh()]);
}

#[test]
fn lstm_matches_hand_stepped_scalar_cell() {
    let (wx, wh, b) = ([0.7, -0.4, 0.9, 0.3], [0.2, 0.5, -0.6, 0.8], [0.1, 1.0, -0.2, 0.05]);
    let xs = [0.5, -0.3, 0.8];
    let mut tape = Tape::new();
    let w = RecurrentWeights {
        w_ih: leaf(&mut tape, &[1, 4], wx.to_vec()),
        w_hh: leaf(&mut tape, &[1, 4], wh.to_vec()),
        bias: leaf(&mut tape, &[4], b.to_vec()),
    };
    let x = leaf(&mut tape, &[3, 1], xs.to_vec());
    let out = lstm_layer(&mut tape, &w, x, &[3], 3, Direction::Forward).unwrap();

    let (mut h, mut c) = (0.0f64, 0.0f64);
    let mut expected = Vec::new();
    for &xt in &xs {
        let gate = |k: usize| xt * wx[k] + b[k] + h * wh[k];
        let (i, f, g, o) = (sigmoid(gate(0)), sigmoid(gate(1)), gate(2).tanh(), sigmoid(gate(3)));
        c = f * c + i * g;
        h = o * c.tanh();
        expected.push(h);
    }
    for (a, e) in tape.value(out).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-14, "{a} vs {e}");
    }
}

#[test]
fn zero_weight_lstm_stays_at_zero() {
    let mut tape = Tape::new();
    let mut bias = vec![0.0; 12];
    bias[3..6].fill(1.0);
    let w = RecurrentWeights {
        w_ih: leaf(&mut tape, &[2, 12], vec![0.0; 24]),
        w_hh: leaf(&mut tape, &[3, 12], vec![0.0; 36]),
        bias: leaf(&mut tape, &[12], bias),
    };
    let x = leaf(&mut tape, &[4, 2], vec![0.3; 8]);
    let out = lstm_layer(&mut tape, &w, x, &[4], 4, Direction::Backward).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_on_palindrome_mirrors_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (wih, whh, b) = (r(2 * 12), r(3 * 12), r(12));
    let half = r(3 * 2);
    // rows: a b c b a
    let xs: Vec<f64> = [0, 1, 2, 1, 0].iter().flat_map(|&k| half[2 * k..2 * k + 2].to_vec()).collect();
    let mut tape = Tape::new();
    let w = RecurrentWeights {
        w_ih: leaf(&mut tape, &[2, 12], wih),
        w_hh: leaf(&mut tape, &[3, 12], whh),
        bias: leaf(&mut tape, &[12], b),
    };
    let x = leaf(&mut tape, &[5, 2], xs);
    let fw = lstm_layer(&mut tape, &w, x, &[5], 5, Direction::Forward).unwrap();
    let bw = lstm_layer(&mut tape, &w, x, &[5], 5, Direction::Backward).unwrap();
    let (f, b) = (tape.value(fw).clone(), tape.value(bw).clone());
    for p in 0..5 {
        assert_eq!(f.row(p), b.row(4 - p));
    }
}

#[test]
fn recurrent_layer_rejects_dim_mismatch() {
    let mut tape = Tape::new();
    let w = RecurrentWeights {
        w_ih: leaf(&mut tape, &[3, 2], vec![0.0; 6]),
        w_hh: leaf(&mut tape, &[2, 2], vec![0.0; 4]),
        bias: leaf(&mut tape, &[2], vec![0.0; 2]),
    };
    let x = leaf(&mut tape, &[2, 2], vec![0.0; 4]);
    assert!(rnn_layer(&mut tape, &w, x, &[2], 2, Direction::Forward).is_err());
}

#[test]
fn zero_parameters_give_zero_gloss() {
    for kind in [EncoderKind::Rnn, EncoderKind::BiRnn] {
        let config = toy_encoder_config(kind);
        let mut store = params(&config, 1);
        zero_where(&mut store, |_| true);
        let out = encode_gloss(&config, &store, &[2, 5, 7], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0), "{kind}");
    }
}

#[test]
fn single_token_lstm_gloss_matches_scalar_cell() {
    let config = EncoderConfig {
        num_layers: 1,
        hidden_size: 1,
        input_size: 1,
        dropout: 0.0,
        ..EncoderConfig::new(EncoderKind::Lstm, 4)
    };
    let mut store = params(&config, 0);
    store.get_mut("enc.embed").unwrap().data_mut().copy_from_slice(&[0.0, 0.0, 0.6, 0.0]);
    store.get_mut("enc.l0.w_ih").unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
    store.get_mut("enc.l0.b").unwrap().data_mut().copy_from_slice(&[0.1, 1.0, 0.0, -0.3]);
    let out = encode_gloss(&config, &store, &[2], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x: f64 = 0.6;
    let c = sigmoid(0.5 * x + 0.1) * (2.0 * x).tanh();
    let h = sigmoid(0.25 * x - 0.3) * c.tanh();
    assert!((out[0] - h).abs() < 1e-15);
}

#[test]
fn single_token_birnn_halves_agree_for_mirrored_params() {
    let config = EncoderConfig {
        num_layers: 1,
        ..toy_encoder_config(EncoderKind::BiRnn)
    };
    let mut store = params(&config, 5);
    for p in ["w_ih", "w_hh", "b"] {
        let fwd = store.get(&format!("enc.l0.fwd.{p}")).unwrap().data().to_vec();
        store.get_mut(&format!("enc.l0.bwd.{p}")).unwrap().data_mut().copy_from_slice(&fwd);
    }
    let out = encode_gloss(&config, &store, &[4], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out[..4], out[4..]);
}

#[test]
fn scalar_mix_weight_examples() {
    let w = scalar_mix_weights(&[1f64.ln(), 3f64.ln()]);
    assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::matrix(1, 2, vec![3.0, 6.0]).unwrap());
    let s = tape.constant(Tensor::vector(vec![0.4, 0.4]));
    let g = tape.constant(Tensor::scalar(2.0));
    let m = scalar_mix(&mut tape, &[a, b], s, g).unwrap();
    assert_eq!(tape.value(m).data(), &[4.0, 8.0]);
    let zero = tape.constant(Tensor::scalar(0.0));
    let m = scalar_mix(&mut tape, &[a, b], s, zero).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
}

#[test]
fn elmo_gloss_uses_mix_over_all_layers() {
    let config = toy_encoder_config(EncoderKind::Elmo);
    let mut store = params(&config, 2);
    // all weight on the embedding layer: output is gamma * embedding row
    store.get_mut("enc.mix.s").unwrap().data_mut().copy_from_slice(&[0.0, -800.0, -800.0]);
    store.get_mut("enc.mix.gamma").unwrap().data_mut()[0] = 1.5;
    let out = encode_gloss(&config, &store, &[7, 3, 4], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let row = &store.get("enc.embed").unwrap().row(7).to_vec();
    for (o, e) in out.iter().zip(row) {
        assert!((o - 1.5 * e).abs() < 1e-15);
    }
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn transformer_with_zero_sublayers_is_a_norm_of_the_input() {
    let config = toy_encoder_config(EncoderKind::Transformer);
    let mut store = params(&config, 4);
    zero_where(&mut store, |n| n.contains(".attn.") || n.contains(".ffn."));
    let out = encode_gloss(&config, &store, &[9], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let e = store.get("enc.embed").unwrap().row(9).to_vec();
    let p = store.get("enc.pos").unwrap().row(0).to_vec();
    let x: Vec<f64> = e.iter().zip(&p).map(|(a, b)| a + b).collect();
    for (o, want) in out.iter().zip(layer_norm(&x)) {
        assert!((o - want).abs() < 1e-12);
    }
}

#[test]
fn residual_cut_with_zero_sublayers_zeroes_the_stream() {
    let config = EncoderConfig {
        residual_cut_layer: Some(0),
        ..toy_encoder_config(EncoderKind::Transformer)
    };
    let mut store = params(&config, 4);
    zero_where(&mut store, |n| n.contains(".attn.") || n.contains(".ffn."));
    let out = encode_gloss(&config, &store, &[9, 4, 4], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn residual_cut_changes_output_and_unset_matches_baseline() {
    let base = toy_encoder_config(EncoderKind::Transformer);
    let store = params(&base, 8);
    let ids = vec![2, 5, 11, 7];
    let run = |c: &EncoderConfig| encode_gloss(c, &store, &ids, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let a = run(&base);
    assert_eq!(a, run(&base.clone()));
    for k in 0..2 {
        let cut = EncoderConfig {
            residual_cut_layer: Some(k),
            ..base.clone()
        };
        let b = run(&cut);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6), "cut at {k}");
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut configs: Vec<EncoderConfig> = EncoderKind::ALL.iter().map(|&k| toy_encoder_config(k)).collect();
    configs.push(EncoderConfig {
        residual_cut_layer: Some(1),
        ..toy_encoder_config(EncoderKind::Transformer)
    });
    for config in configs {
        let report = check_encoder_gradients(&config, 11, 1e-5).unwrap();
        assert!(report.checked > 100);
        assert!(
            report.max_rel_error < 1e-3,
            "{}: {} at {:?}",
            config.kind,
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn batch_padding_does_not_change_outputs() {
    for kind in EncoderKind::ALL {
        let config = EncoderConfig {
            max_len: 8,
            ..toy_encoder_config(kind)
        };
        let store = params(&config, 21);
        let short = vec![2, 4, 9];
        let long = vec![2, 13, 6, 6, 1, 17, 3];
        let alone = encode_rows(&config, &store, &[short.clone()]);
        let first = encode_rows(&config, &store, &[short.clone(), long.clone()]);
        let second = encode_rows(&config, &store, &[long, short]);
        for (a, b) in alone[0].iter().zip(&first[0]).chain(alone[0].iter().zip(&second[1])) {
            assert!((a - b).abs() <= 1e-12, "{kind}: {a} vs {b}");
        }
    }
}

#[test]
fn explicit_pad_ids_are_padding() {
    let batch = SeqBatch::new(&[vec![2, 5, 6], vec![2, 5, 6, 7, 8, 9, 10]], 64).unwrap();
    assert_eq!(batch.width(), 7);
    assert_eq!(batch.row(0)[3..], [PAD; 4]);
    assert_eq!(batch.lengths(), &[3, 7]);
}

#[test]
fn overlong_input_is_truncated_and_empty_rejected() {
    let config = EncoderConfig {
        max_len: 4,
        ..toy_encoder_config(EncoderKind::Lstm)
    };
    let store = params(&config, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let long = encode_gloss(&config, &store, &[2, 3, 4, 5, 6, 7], false, &mut rng).unwrap();
    let cut = encode_gloss(&config, &store, &[2, 3, 4, 5], false, &mut rng).unwrap();
    assert_eq!(long, cut);
    assert!(encode_gloss(&config, &store, &[], false, &mut rng).is_err());
    assert!(encode_gloss(&config, &store, &[2, 25], false, &mut rng).is_err());
}

#[test]
fn dropout_only_in_train_mode_and_seeded() {
    let config = EncoderConfig {
        dropout: 0.3,
        ..toy_encoder_config(EncoderKind::Transformer)
    };
    let store = params(&config, 1);
    let ids = [2, 3, 4];
    let eval = encode_gloss(&config, &store, &ids, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let t1 = encode_gloss(&config, &store, &ids, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let t2 = encode_gloss(&config, &store, &ids, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(t1, t2);
    assert_ne!(eval, t1);
}

#[test]
fn closed_form_counts_match_instantiated_models() {
    for kind in EncoderKind::ALL {
        for (layers, hidden) in [(1, 6), (3, 12)] {
            let config = EncoderConfig {
                num_layers: layers,
                hidden_size: hidden,
                input_size: hidden,
                num_heads: 3,
                ..EncoderConfig::new(kind, 37)
            };
            assert_eq!(params(&config, 0).num_values(), config.parameter_count(), "{kind}");
        }
    }
}

#[test]
fn parity_configured_birnn_is_within_one_percent() {
    let reference = EncoderConfig::new(EncoderKind::Rnn, 100);
    let bi = parity_config(&reference, EncoderKind::BiRnn).unwrap();
    assert_eq!(bi.kind, EncoderKind::BiRnn);
    assert_eq!(bi.hidden_size, 300);
    assert!(parameter_gap(&bi, &reference) < 0.01);
    // independent route: instantiate both and count tensors
    let count = |c: &EncoderConfig| params(c, 0).num_values() - c.vocab_size * c.input_size;
    let (a, b) = (count(&bi) as f64, count(&reference) as f64);
    assert!((a - b).abs() / b < 0.01);

    let birnn = EncoderConfig::new(EncoderKind::BiRnn, 100);
    let uni = parity_config(&birnn, EncoderKind::Rnn).unwrap();
    assert_eq!(uni.hidden_size, 219);
    assert!(parameter_gap(&uni, &birnn) < 0.01);
}

#[test]
fn config_validation_lists_every_problem() {
    let bad = EncoderConfig {
        hidden_size: 7,
        input_size: 8,
        num_heads: 2,
        residual_cut_layer: Some(4),
        dropout: 1.0,
        ..EncoderConfig::new(EncoderKind::Transformer, 10)
    };
    let v = bad.violations();
    assert_eq!(v.len(), 4, "{v:?}");
    let odd = EncoderConfig {
        hidden_size: 7,
        ..EncoderConfig::new(EncoderKind::BiRnn, 10)
    };
    assert!(odd.validate().is_err());
    let rc_elmo = EncoderConfig {
        residual_cut_layer: Some(1),
        ..EncoderConfig::new(EncoderKind::Elmo, 10)
    };
    assert!(rc_elmo.validate().is_err());
}

fn toy_model(seed: u64) -> TrainedModel {
    let counts = word_counts(["a cat that sits", "the dog of the cat", "to sit on a mat"]);
    let tok = train_wordpiece(&counts, 30).unwrap();
    let config = EncoderConfig {
        vocab_size: tok.vocab_size(),
        ..toy_encoder_config(EncoderKind::Elmo)
    };
    let tasks = [TaskSpec { task: Task::Sgns, dim: 3 }, TaskSpec { task: Task::Char, dim: 2 }];
    TrainedModel::init(config, &tasks, tok, false, seed).unwrap()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let model = toy_model(5);
    let bytes = checkpoint_bytes(&model).unwrap();
    assert_eq!(&bytes[..8], b"RDFORGE1");
    let loaded = model_from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(loaded.config, model.config);
    for ((n1, t1), (n2, t2)) in loaded.params.iter().zip(model.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data());
    }
    assert_eq!(checkpoint_bytes(&loaded).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    rdforge::encoders::save_checkpoint(&model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let again = rdforge::encoders::load_checkpoint(&path).unwrap();
    assert_eq!(checkpoint_bytes(&again).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = checkpoint_bytes(&toy_model(6)).unwrap();
    for cut in [12, 40, bytes.len() / 2, bytes.len() - 3] {
        let err = model_from_checkpoint_bytes(&bytes[..cut]).unwrap_err().to_string();
        assert!(err.contains("corrupt"), "cut {cut}: {err}");
    }
    assert!(model_from_checkpoint_bytes(&bytes[..5]).is_err());

    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    let err = model_from_checkpoint_bytes(&nan).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");

    let mut huge = bytes.clone();
    huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    let err = model_from_checkpoint_bytes(&huge).unwrap_err().to_string();
    assert!(err.contains("header length"), "{err}");

    let key = b"\"version\":1";
    let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
    let mut future = bytes.clone();
    future[at + 10] = b'2';
    let err = model_from_checkpoint_bytes(&future).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}
