use rdforge::encoders::EncoderConfig;
use rdforge::multilingual::{apply_alt, build_shared_vocab, train_multilingual};
use rdforge::synth::synthesize;
use rdforge::tokenizers::{lang_token, CLS};
use rdforge::{
    EncoderKind, MultilingualCorpus, SynthConfig, Task, TaskSpec, TokenizerKind, TokenizerSpec, TrainOptions,
    TrainedModel, Tricks,
};

fn corpus(langs: &[&str], n: usize) -> MultilingualCorpus {
    let cfg = SynthConfig {
        languages: langs.iter().map(|s| s.to_string()).collect(),
        entries_per_language: n,
        dims: 4,
        tasks: vec![Task::Sgns],
        ..SynthConfig::default()
    };
    MultilingualCorpus::from_entries(synthesize(&cfg).unwrap()).unwrap()
}

#[test]
fn shared_vocab_has_a_token_per_language() {
    let c = corpus(&["en", "fr", "ru"], 20);
    let tok = build_shared_vocab(&c, &TokenizerSpec::new(TokenizerKind::WordPiece, 120)).unwrap();
    for l in ["en", "fr", "ru"] {
        let id = tok.vocab().lang_id(l).unwrap();
        assert_eq!(tok.vocab().token(id), Some(lang_token(l).as_str()));
    }
    let one = corpus(&["en"], 5);
    assert!(build_shared_vocab(&one, &TokenizerSpec::new(TokenizerKind::Bpe, 60)).is_err());
}

#[test]
fn alt_prepends_language_token_once() {
    let c = corpus(&["en", "ru"], 10);
    let tok = build_shared_vocab(&c, &TokenizerSpec::new(TokenizerKind::Bpe, 80)).unwrap();
    let v = tok.vocab();
    let ru = v.lang_id("ru").unwrap();
    let out = apply_alt(&[CLS, 7, 9], "ru", v).unwrap();
    assert_eq!(out, vec![ru, CLS, 7, 9]);
    assert!(apply_alt(&out, "ru", v).is_err());
    assert!(apply_alt(&[CLS, 7], "de", v).is_err());
    assert!(apply_alt(&[7, 9], "en", v).is_err());
    assert_eq!(tok.encode("x", Some("ru"), true).unwrap()[..2], [ru, CLS]);
}

#[test]
fn corpus_rejects_unknown_or_empty_languages() {
    let c = corpus(&["en"], 3);
    assert!(MultilingualCorpus::new(vec!["fr".into()], c.entries().to_vec()).is_err());
    assert!(MultilingualCorpus::new(vec!["en".into(), "fr".into()], c.entries().to_vec()).is_err());
    assert!(MultilingualCorpus::new(vec![], vec![]).is_err());
    assert_eq!(c.language_entries("en").len(), 3);
}

#[test]
fn tricks_resolve_to_encoder_configs() {
    let t = EncoderConfig {
        num_layers: 4,
        hidden_size: 16,
        input_size: 16,
        num_heads: 2,
        ..EncoderConfig::new(EncoderKind::Transformer, 30)
    };
    let rc = Tricks { rc: true, ..Tricks::default() };
    assert_eq!(rc.apply(&t).unwrap().residual_cut_layer, Some(2));
    let at = Tricks { rc: true, rc_layer: Some(3), ..Tricks::default() };
    assert_eq!(at.apply(&t).unwrap().residual_cut_layer, Some(3));
    assert!(Tricks { rc: true, rc_layer: Some(4), ..Tricks::default() }.apply(&t).is_err());
    assert!(Tricks { rc_layer: Some(1), ..Tricks::default() }.apply(&t).is_err());
    let lstm = EncoderConfig::new(EncoderKind::Lstm, 30);
    assert!(rc.apply(&lstm).is_err());
    assert_eq!(Tricks::default().apply(&lstm).unwrap(), lstm);
}

#[test]
fn single_language_run_matches_plain_training() {
    let c = corpus(&["en"], 24);
    let tok = rdforge::tokenizers::train(
        &rdforge::tokenizers::word_counts(c.entries().iter().map(|e| e.gloss.as_str())),
        &TokenizerSpec::new(TokenizerKind::WordPiece, 60),
    )
    .unwrap();
    let config = EncoderConfig {
        num_layers: 1,
        hidden_size: 8,
        input_size: 8,
        dropout: 0.1,
        ..EncoderConfig::new(EncoderKind::Lstm, tok.vocab_size())
    };
    let tasks = [TaskSpec { task: Task::Sgns, dim: 4 }];
    let opts = TrainOptions { epochs: 3, batch_size: 8, ..TrainOptions::default() };
    let (_, multi) = train_multilingual(&config, Tricks::default(), &c, &tasks, tok.clone(), None, &opts).unwrap();
    let mut model = TrainedModel::init(config, &tasks, tok, false, opts.seed).unwrap();
    let mono = rdforge::train::train_model(&mut model, c.entries(), None, &opts).unwrap();
    assert_eq!(multi.final_loss(), mono.final_loss());
}

#[test]
fn alt_needs_language_tokens() {
    let c = corpus(&["en"], 6);
    let tok = rdforge::tokenizers::train(
        &rdforge::tokenizers::word_counts(c.entries().iter().map(|e| e.gloss.as_str())),
        &TokenizerSpec::new(TokenizerKind::Bpe, 50),
    )
    .unwrap();
    let config = EncoderConfig {
        num_layers: 1,
        hidden_size: 4,
        input_size: 4,
        ..EncoderConfig::new(EncoderKind::Rnn, tok.vocab_size())
    };
    let tasks = [TaskSpec { task: Task::Sgns, dim: 4 }];
    let alt = Tricks { alt: true, ..Tricks::default() };
    assert!(train_multilingual(&config, alt, &c, &tasks, tok, None, &TrainOptions::default()).is_err());
}
