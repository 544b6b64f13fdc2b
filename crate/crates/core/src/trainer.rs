//! Training loop, checkpoints and corpus-level prediction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_sentence, EncodedSentence, Entity, Mention, Sentence, Vocabulary};
use crate::decoder::{export_attention, AttentionExport};
use crate::error::{Error, Result};
use crate::heads::Decoded;
use crate::metrics::evaluate;
use crate::model::{ForwardOptions, Model, Network, TrainConfig};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Graph, Matrix, ParameterStore};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParameterStore, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies the accumulated gradients of `store`.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.first[id.index()].values_mut();
            let v = self.second[id.index()].values_mut();
            for (((w, &g), m), v) in value.values_mut().iter_mut().zip(grad.values()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales the gradients of `store` to norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
    norm
}

/// Mean losses of one epoch and the dev score after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub proposal_loss: f64,
    /// One per decoder layer.
    pub refine_losses: Vec<f64>,
    pub total_loss: f64,
    pub dev_f1: f64,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
    /// Epoch the parameters come from; 0 for untrained parameters.
    pub epoch: usize,
    pub dev_f1: f64,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.config, &self.vocab, self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Data("checkpoint has no format_version".into()))?;
        if found != u64::from(CHECKPOINT_FORMAT_VERSION) {
            return Err(Error::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev F1.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// A corpus with optional precomputed context vectors, one matrix per
/// sentence.
#[derive(Clone, Copy, Debug)]
pub struct Dataset<'a> {
    pub sentences: &'a [Sentence],
    pub context: Option<&'a [Matrix]>,
}

impl<'a> Dataset<'a> {
    pub fn new(sentences: &'a [Sentence]) -> Self {
        Dataset {
            sentences,
            context: None,
        }
    }

    pub fn with_context(sentences: &'a [Sentence], context: &'a [Matrix]) -> Result<Self> {
        if context.len() != sentences.len() {
            return Err(Error::Data(format!(
                "{} context records for {} sentences",
                context.len(),
                sentences.len()
            )));
        }
        Ok(Dataset {
            sentences,
            context: Some(context),
        })
    }

    fn context(&self, i: usize) -> Option<&'a Matrix> {
        self.context.map(|c| &c[i])
    }
}

pub fn train(
    config: &TrainConfig,
    train_set: &[Sentence],
    dev_set: &[Sentence],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    train_with(config, Dataset::new(train_set), Dataset::new(dev_set), on_epoch)
}

/// Per-sentence Adam updates with gradient clipping, keeping the parameters
/// of the best dev epoch. Stops after `patience` epochs without dev
/// improvement; with an empty dev set it runs every epoch and keeps the
/// last.
pub fn train_with(
    config: &TrainConfig,
    train_set: Dataset,
    dev_set: Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = Vocabulary::build(train_set.sentences);
    let mut model = Model::new(config, &vocab)?;
    let encoded: Vec<EncodedSentence> = train_set.sentences.iter().map(|s| encode_sentence(s, &vocab)).collect();
    for (i, s) in encoded.iter().enumerate() {
        if s.entities.len() > config.num_proposals {
            return Err(Error::Data(format!(
                "training sentence {i} has {} mentions, more than num_proposals = {}",
                s.entities.len(),
                config.num_proposals
            )));
        }
    }
    let snapshot = |model: &Model, epoch: usize, dev_f1: f64| Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
        vocab: vocab.clone(),
        params: model.params.clone(),
        epoch,
        dev_f1,
    };
    if config.epochs == 0 {
        let dev_f1 = dev_score(&model, &vocab, dev_set)?;
        return Ok(TrainOutcome {
            checkpoint: snapshot(&model, 0, dev_f1),
            log: Vec::new(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let layers = config.decoder_layers;
        let (mut proposal_sum, mut refine_sum, mut total_sum) = (0.0, vec![0.0; layers], 0.0);
        for &i in &order {
            let grads = {
                let mut g = Graph::new(&model.params);
                let opts = ForwardOptions {
                    context: train_set.context(i),
                    dropout_rng: Some(&mut rng),
                    trace: false,
                };
                let pass = model
                    .network
                    .forward(&mut g, &encoded[i], opts)
                    .map_err(|e| at_sentence(e, i))?;
                let (loss, b) = model
                    .network
                    .loss(&mut g, &encoded[i], &pass)
                    .map_err(|e| at_sentence(e, i))?;
                proposal_sum += b.proposal_loss;
                for (acc, r) in refine_sum.iter_mut().zip(&b.refine_losses) {
                    *acc += r;
                }
                total_sum += b.total;
                g.backward(loss).into_params()
            };
            model.params.zero_grad();
            model.params.accumulate(&grads);
            let norm = clip_gradients(&mut model.params, config.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient norm is {norm} at training sentence {i}"
                )));
            }
            adam.step(&mut model.params);
        }
        let n = encoded.len().max(1) as f64;
        let dev_f1 = dev_score(&model, &vocab, dev_set)?;
        let entry = EpochLog {
            epoch,
            proposal_loss: proposal_sum / n,
            refine_losses: refine_sum.iter().map(|r| r / n).collect(),
            total_loss: total_sum / n,
            dev_f1,
        };
        on_epoch(&entry);
        log.push(entry);
        let improved = best.as_ref().is_none_or(|b| dev_f1 > b.dev_f1);
        if dev_set.sentences.is_empty() || improved {
            best = Some(snapshot(&model, epoch, dev_f1));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        log,
    })
}

fn at_sentence(e: Error, i: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("training sentence {i}: {m}")),
        Error::Data(m) => Error::Data(format!("training sentence {i}: {m}")),
        other => other,
    }
}

fn dev_score(model: &Model, vocab: &Vocabulary, dev: Dataset) -> Result<f64> {
    if dev.sentences.is_empty() {
        return Ok(0.0);
    }
    let pred = predict_dataset(model, vocab, dev)?;
    Ok(evaluate(dev.sentences, &pred)?.f1)
}

fn to_mentions(vocab: &Vocabulary, decoded: impl IntoIterator<Item = (Entity, Option<f64>)>) -> Vec<Mention> {
    decoded
        .into_iter()
        .map(|(e, confidence)| Mention {
            start: e.start,
            length: e.length,
            label: vocab.type_name(e.type_id).unwrap_or("?").to_string(),
            confidence,
        })
        .collect()
}

fn with_entities(s: &Sentence, entities: Vec<Mention>) -> Sentence {
    Sentence {
        tokens: s.tokens.clone(),
        pos_tags: s.pos_tags.clone(),
        entities,
    }
}

/// Predicted mentions, with confidences, for every sentence.
pub fn predict_dataset(model: &Model, vocab: &Vocabulary, data: Dataset) -> Result<Vec<Sentence>> {
    data.sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let decoded: Vec<Decoded> = model.predict(&encode_sentence(s, vocab), data.context(i))?;
            let mentions = to_mentions(vocab, decoded.iter().map(|d| (d.entity, Some(d.confidence))));
            Ok(with_entities(s, mentions))
        })
        .collect()
}

pub fn predict(checkpoint: &Checkpoint, corpus: &[Sentence]) -> Result<Vec<Sentence>> {
    predict_dataset(&checkpoint.model()?, &checkpoint.vocab, Dataset::new(corpus))
}

/// Mentions from the span classifier alone, without refinement.
pub fn predict_spans(checkpoint: &Checkpoint, corpus: &[Sentence]) -> Result<Vec<Sentence>> {
    let model = checkpoint.model()?;
    let vocab = &checkpoint.vocab;
    corpus
        .iter()
        .map(|s| {
            let spans = model.predict_spans(&encode_sentence(s, vocab), None)?;
            Ok(with_entities(
                s,
                to_mentions(vocab, spans.into_iter().map(|e| (e, None))),
            ))
        })
        .collect()
}

/// Cross-attention weights of one decoder head over all spans of
/// `sentence`, per proposal.
pub fn inspect_attention(
    checkpoint: &Checkpoint,
    sentence: &Sentence,
    layer: usize,
    head: usize,
) -> Result<AttentionExport> {
    let model = checkpoint.model()?;
    let encoded = encode_sentence(sentence, &checkpoint.vocab);
    let mut g = Graph::new(&model.params);
    let opts = ForwardOptions {
        trace: true,
        ..ForwardOptions::eval()
    };
    let pass = model.network.forward(&mut g, &encoded, opts)?;
    export_attention(
        pass.decoder.traces.as_deref(),
        layer,
        head,
        &pass.pyramid.indexer,
        &sentence.tokens,
    )
}

/// Small configuration for gradient checks: width 8, span limit 3, four
/// proposals, two decoder layers, no dropout.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        d_model: 8,
        span_limit: 3,
        num_proposals: 4,
        decoder_layers: 2,
        heads: Some(2),
        word_dim: 6,
        pos_dim: 3,
        char_dim: 4,
        context_dim: 4,
        lstm_hidden: 4,
        ffn_dim: Some(16),
        dropout: 0.0,
        ..TrainConfig::default()
    }
}

/// Six tokens with two entity types, one mention nested in another.
pub fn toy_sentence() -> Sentence {
    Sentence {
        tokens: ["ann", "of", "the", "north", "bank", "sang"].map(String::from).to_vec(),
        pos_tags: Some(["NNP", "IN", "DT", "NNP", "NNP", "VB"].map(String::from).to_vec()),
        entities: vec![
            Mention::new(0, 5, "PER"),
            Mention::new(2, 3, "ORG"),
            Mention::new(3, 1, "PER"),
        ],
    }
}

/// Step used when checking the full model. Smaller steps drown the smallest
/// attention gradients in rounding noise of the loss value; larger ones
/// cross ReLU kinks and top-K ties.
pub const MODEL_GRAD_CHECK_EPS: f64 = 1e-4;

/// Options for [`check_model_gradients`]: [`MODEL_GRAD_CHECK_EPS`] and
/// 200 sampled coordinates.
pub fn model_grad_check_options() -> GradCheckOptions {
    GradCheckOptions {
        eps: MODEL_GRAD_CHECK_EPS,
        ..GradCheckOptions::default()
    }
}

/// Compares analytic gradients of the full training loss on `sentence`,
/// at the initial parameters, against central differences.
pub fn check_model_gradients(
    config: &TrainConfig,
    sentence: &Sentence,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let vocab = Vocabulary::build(std::slice::from_ref(sentence));
    let Model { network, mut params } = Model::new(config, &vocab)?;
    let encoded = encode_sentence(sentence, &vocab);
    let loss = |store: &ParameterStore| -> Result<(f64, crate::numerics::Gradients)> {
        let mut g = Graph::new(store);
        let pass = network_forward(&network, &mut g, &encoded)?;
        let (loss, _) = network.loss(&mut g, &encoded, &pass)?;
        Ok((g.value(loss).item(), g.backward(loss).into_params()))
    };
    grad_check(&mut params, loss, options)
}

fn network_forward(network: &Network, g: &mut Graph, s: &EncodedSentence) -> Result<crate::model::ForwardPass> {
    network.forward(g, s, ForwardOptions::eval())
}
