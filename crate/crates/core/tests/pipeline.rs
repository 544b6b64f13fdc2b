use std::fs;

use pnrnet_core::data::{generate_synthetic, load_corpus, write_corpus, Mention, Sentence, SynthConfig, Vocabulary};
use pnrnet_core::encoder::load_context_vectors;
use pnrnet_core::metrics::evaluate;
use pnrnet_core::model::TrainConfig;
use pnrnet_core::trainer::{predict, predict_dataset, train, train_with, Checkpoint, Dataset};
use pnrnet_core::Error;
use tempfile::TempDir;

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        d_model: 16,
        span_limit: 3,
        num_proposals: 8,
        decoder_layers: 2,
        epochs,
        word_dim: 8,
        pos_dim: 4,
        char_dim: 4,
        context_dim: 4,
        lstm_hidden: 8,
        ..TrainConfig::default()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<Sentence> {
    generate_synthetic(&SynthConfig {
        sentences: n,
        max_entity_len: 3,
        max_sentence_len: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn corpus_and_predictions_survive_files() {
    let dir = TempDir::new().unwrap();
    let data = corpus(20, 1);
    let path = dir.path().join("c.jsonl");
    write_corpus(&path, &data).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), data);

    let ckpt = train(&small_config(1), &data, &[], |_| {}).unwrap().checkpoint;
    let pred = predict(&ckpt, &data).unwrap();
    let pred_path = dir.path().join("p.jsonl");
    write_corpus(&pred_path, &pred).unwrap();
    let back = load_corpus(&pred_path).unwrap();
    assert_eq!(back, pred);
    for (p, g) in back.iter().zip(&data) {
        assert_eq!(p.tokens, g.tokens);
        assert!(p
            .entities
            .iter()
            .all(|m| m.confidence.is_some_and(|c| (0.0..=1.0).contains(&c))));
    }
}

#[test]
fn vocabulary_round_trips() {
    let dir = TempDir::new().unwrap();
    let vocab = Vocabulary::build(&corpus(10, 2));
    let path = dir.path().join("vocab.json");
    vocab.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
}

#[test]
fn malformed_corpus_lines_are_reported_with_line_numbers() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = serde_json::to_string(&corpus(1, 3)[0]).unwrap();
    let bad = r#"{"tokens": ["a", "b"], "entities": [{"start": 1, "length": 5, "type": "PER"}]}"#;
    fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
    match load_corpus(&path) {
        Err(Error::Load { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a load error, got {other:?}"),
    }
}

#[test]
fn context_sidecar_drives_training_and_prediction() {
    let dir = TempDir::new().unwrap();
    let data = corpus(12, 4);
    let cfg = small_config(1);
    let lines: Vec<String> = data
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rows: Vec<Vec<f64>> = (0..s.len())
                .map(|t| {
                    (0..cfg.context_dim)
                        .map(|c| ((i + t + c) as f64 * 0.37).sin())
                        .collect()
                })
                .collect();
            serde_json::json!({ "vectors": rows }).to_string()
        })
        .collect();
    let path = dir.path().join("ctx.jsonl");
    fs::write(&path, lines.join("\n")).unwrap();
    let ctx = load_context_vectors(&path).unwrap();
    assert_eq!(ctx.len(), data.len());

    let set = Dataset::with_context(&data, &ctx).unwrap();
    let outcome = train_with(&cfg, set, Dataset::new(&[]), |_| {}).unwrap();
    let model = outcome.checkpoint.model().unwrap();
    let with_ctx = predict_dataset(&model, &outcome.checkpoint.vocab, set).unwrap();
    assert_eq!(with_ctx.len(), data.len());

    assert!(matches!(Dataset::with_context(&data[1..], &ctx), Err(Error::Data(_))));
    let narrow: Vec<_> = ctx
        .iter()
        .map(|m| pnrnet_core::numerics::Matrix::zeros(m.rows(), 1))
        .collect();
    let bad = Dataset::with_context(&data, &narrow).unwrap();
    assert!(matches!(
        predict_dataset(&model, &outcome.checkpoint.vocab, bad),
        Err(Error::Data(_))
    ));
}

#[test]
fn config_json_fills_defaults_and_rejects_typos() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"span_limit": 4, "decoder_layers": 1}"#).unwrap();
    assert_eq!(cfg.span_limit, 4);
    assert_eq!(cfg.decoder_layers, 1);
    assert_eq!(cfg.num_proposals, TrainConfig::default().num_proposals);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"span_limt": 4}"#).is_err());
}

#[test]
fn defaults_follow_the_reference_setting() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.span_limit, cfg.decoder_layers, cfg.num_proposals), (16, 3, 60));
    assert_eq!((cfg.lambda_cls, cfg.lambda_b), (1.0, 1.0));
    assert_eq!(cfg.heads(), 8);
    assert_eq!(cfg.ffn_dim(), 4 * cfg.d_model);
}

#[test]
fn sweeps_over_span_limit_and_depth_train() {
    let data = corpus(16, 5);
    for (span_limit, decoder_layers) in [(1, 1), (2, 3)] {
        let cfg = TrainConfig {
            span_limit,
            decoder_layers,
            ..small_config(1)
        };
        let out = train(&cfg, &data, &data, |_| {}).unwrap();
        assert_eq!(out.log[0].refine_losses.len(), decoder_layers);
        assert!(out.log[0].total_loss.is_finite());
    }
}

#[test]
fn structural_switches_train() {
    let data = corpus(16, 6);
    for (plain_sublayers, per_level_span_linear) in [(true, false), (false, true)] {
        let cfg = TrainConfig {
            plain_sublayers,
            per_level_span_linear,
            ..small_config(1)
        };
        let out = train(&cfg, &data, &[], |_| {}).unwrap();
        assert!(out.log[0].total_loss.is_finite());
        let names: Vec<&str> = out
            .checkpoint
            .params
            .ids()
            .map(|id| out.checkpoint.params.name(id))
            .collect();
        assert_eq!(names.iter().any(|n| n.contains("norm_")), !plain_sublayers);
        assert_eq!(
            names.iter().any(|n| n.starts_with("pyramid.level")),
            per_level_span_linear
        );
    }
}

#[test]
fn checkpoint_file_reloads_to_identical_scores() {
    let dir = TempDir::new().unwrap();
    let data = corpus(20, 7);
    let ckpt = train(&small_config(2), &data, &data, |_| {}).unwrap().checkpoint;
    let path = dir.path().join("m.json");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let a = evaluate(&data, &predict(&ckpt, &data).unwrap()).unwrap();
    let b = evaluate(&data, &predict(&loaded, &data).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(loaded.epoch, ckpt.epoch);
}

#[test]
fn unseen_words_still_predict() {
    let train_set = corpus(12, 8);
    let ckpt = train(&small_config(1), &train_set, &[], |_| {}).unwrap().checkpoint;
    let novel = Sentence {
        tokens: ["zzz", "qqq", "xyzzy"].map(String::from).to_vec(),
        pos_tags: None,
        entities: vec![Mention::new(0, 2, "PER")],
    };
    let pred = predict(&ckpt, &[novel]).unwrap();
    assert_eq!(pred[0].tokens.len(), 3);
}
