//! The assembled recognizer: encoder, span pyramid, proposer, decoder and
//! prediction heads over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedSentence, Entity, Vocabulary};
use crate::decoder::{default_heads, Decoder, DecoderConfig, DecoderOutput};
use crate::encoder::{Encoder, EncoderConfig, TableSizes};
use crate::error::{Error, Result};
use crate::heads::{decode_predictions, Decoded, Heads, PredictionSet, PredictionVars};
use crate::loss::{proposal_loss_node, span_labels, total_loss, LossBreakdown, LossWeights};
use crate::numerics::{argmax, dropout, Graph, Matrix, ParameterStore, Var};
use crate::proposer::{ProposalSet, Proposer};
use crate::pyramid::{PyramidBuilder, SpanPyramid};

/// Model and training settings. Unknown keys are rejected when read from
/// JSON; missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d_model: usize,
    /// Longest enumerated span.
    pub span_limit: usize,
    /// Proposals per sentence.
    pub num_proposals: usize,
    pub decoder_layers: usize,
    /// Attention heads; by default 8 for `d_model >= 64`, otherwise the
    /// largest divisor of `d_model` not above 8.
    pub heads: Option<usize>,
    pub lambda_cls: f64,
    pub lambda_b: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub clip_norm: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub char_dim: usize,
    pub context_dim: usize,
    pub lstm_hidden: usize,
    /// Feed-forward width inside decoder layers; `4 * d_model` by default.
    pub ffn_dim: Option<usize>,
    pub plain_sublayers: bool,
    pub per_level_span_linear: bool,
    /// Weight of null-labelled spans in the span classification loss.
    pub null_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_model: 64,
            span_limit: 16,
            num_proposals: 60,
            decoder_layers: 3,
            heads: None,
            lambda_cls: 1.0,
            lambda_b: 1.0,
            learning_rate: 1e-3,
            epochs: 20,
            seed: 0,
            dropout: 0.1,
            clip_norm: 5.0,
            patience: 10,
            word_dim: 64,
            pos_dim: 16,
            char_dim: 16,
            context_dim: 32,
            lstm_hidden: 64,
            ffn_dim: None,
            plain_sublayers: false,
            per_level_span_linear: false,
            null_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn heads(&self) -> usize {
        self.heads.unwrap_or_else(|| default_heads(self.d_model))
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.d_model)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.lambda_cls,
            boundary: self.lambda_b,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            word_dim: self.word_dim,
            pos_dim: self.pos_dim,
            char_dim: self.char_dim,
            context_dim: self.context_dim,
            d_model: self.d_model,
            lstm_hidden: self.lstm_hidden,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder_layers,
            heads: self.heads(),
            ffn_dim: self.ffn_dim(),
            plain_sublayers: self.plain_sublayers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("span_limit", self.span_limit),
            ("num_proposals", self.num_proposals),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads()),
            ("ffn_dim", self.ffn_dim()),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads()) {
            return Err(Error::Config(format!(
                "heads: d_model {} is not divisible by {} heads",
                self.d_model,
                self.heads()
            )));
        }
        self.loss_weights().validate()?;
        self.encoder_config().validate()?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
            ("null_weight", self.null_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Parameter-free wiring of the model; every layer refers to parameters by
/// id in a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: TrainConfig,
    num_types: usize,
    encoder: Encoder,
    pyramid: PyramidBuilder,
    proposer: Proposer,
    decoder: Decoder,
    heads: Heads,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `N × d` token features, also level 1 of the pyramid.
    pub tokens: Var,
    pub pyramid: SpanPyramid,
    pub proposals: ProposalSet,
    pub decoder: DecoderOutput,
    /// Head outputs for every decoder layer, first to last.
    pub predictions: Vec<PredictionVars>,
}

/// Per-call switches of a forward pass.
pub struct ForwardOptions<'r> {
    /// Precomputed context vectors replacing the learned context table.
    pub context: Option<&'r Matrix>,
    /// Source of dropout masks; dropout is off without one.
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    pub trace: bool,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            context: None,
            dropout_rng: None,
            trace: false,
        }
    }
}

impl Network {
    pub fn new(
        store: &mut ParameterStore,
        config: &TrainConfig,
        vocab: &Vocabulary,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let c = vocab.num_types();
        let sizes = TableSizes {
            words: vocab.words.len(),
            chars: vocab.chars.len(),
            pos: vocab.pos.len(),
        };
        Ok(Network {
            config: config.clone(),
            num_types: c,
            encoder: Encoder::new(store, &config.encoder_config(), sizes, rng)?,
            pyramid: PyramidBuilder::new(store, d, config.span_limit, config.per_level_span_linear, rng)?,
            proposer: Proposer::new(store, d, c, rng)?,
            decoder: Decoder::new(store, d, &config.decoder_config(), rng)?,
            heads: Heads::new(store, d, c, rng)?,
        })
    }

    pub fn attach(store: &ParameterStore, config: &TrainConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let net = Network {
            config: config.clone(),
            num_types: vocab.num_types(),
            encoder: Encoder::attach(store, &config.encoder_config())?,
            pyramid: PyramidBuilder::attach(store, config.span_limit, config.per_level_span_linear)?,
            proposer: Proposer::attach(store)?,
            decoder: Decoder::attach(store, &config.decoder_config())?,
            heads: Heads::attach(store)?,
        };
        let classes = net.proposer.classifier().out_dim();
        if classes != vocab.num_types() + 1 {
            return Err(Error::Config(format!(
                "parameters predict {} classes, vocabulary has {} types",
                classes.saturating_sub(1),
                vocab.num_types()
            )));
        }
        Ok(net)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn null_class(&self) -> usize {
        self.num_types
    }

    pub fn forward(&self, g: &mut Graph, sentence: &EncodedSentence, opts: ForwardOptions) -> Result<ForwardPass> {
        let rate = self.config.dropout;
        let mut rng = opts.dropout_rng;
        let mut embedded = self.encoder.embed_tokens(g, sentence, opts.context)?;
        if let Some(r) = rng.as_mut() {
            embedded = dropout(g, embedded, rate, r);
        }
        let mut tokens = self.encoder.encode(g, embedded)?;
        if let Some(r) = rng.as_mut() {
            tokens = dropout(g, tokens, rate, r);
        }
        let pyramid = self.pyramid.build(g, tokens, self.config.span_limit)?;
        let proposals = self.proposer.propose(g, &pyramid, self.config.num_proposals)?;
        let decoder = self.decoder.run(g, proposals.features, pyramid.flat, opts.trace)?;
        let predictions = decoder
            .layer_outputs
            .iter()
            .map(|&u| self.heads.predict(g, u, tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardPass {
            tokens,
            pyramid,
            proposals,
            decoder,
            predictions,
        })
    }

    /// Span classification loss plus the set loss of every decoder layer.
    pub fn loss(&self, g: &mut Graph, sentence: &EncodedSentence, pass: &ForwardPass) -> Result<(Var, LossBreakdown)> {
        if sentence.entities.len() > self.config.num_proposals {
            return Err(Error::Data(format!(
                "sentence has {} mentions but only {} proposals",
                sentence.entities.len(),
                self.config.num_proposals
            )));
        }
        let labels = span_labels(&sentence.entities, &pass.pyramid.indexer, self.null_class());
        let proposal = proposal_loss_node(g, pass.proposals.class_probs, &labels, self.config.null_weight)?;
        total_loss(
            g,
            proposal,
            &pass.predictions,
            &sentence.entities,
            &self.config.loss_weights(),
        )
    }

    /// Decoded mentions from the last decoder layer.
    pub fn predict(
        &self,
        store: &ParameterStore,
        sentence: &EncodedSentence,
        context: Option<&Matrix>,
    ) -> Result<Vec<Decoded>> {
        let mut g = Graph::new(store);
        let opts = ForwardOptions {
            context,
            ..ForwardOptions::eval()
        };
        let pass = self.forward(&mut g, sentence, opts)?;
        let last = pass.predictions.last().expect("at least one decoder layer");
        let preds = PredictionSet::from_graph(&g, last);
        if !(preds.class_probs.is_finite() && preds.left.is_finite() && preds.right.is_finite()) {
            return Err(Error::Numeric("prediction probabilities are not finite".into()));
        }
        Ok(decode_predictions(&preds))
    }

    /// Mentions read off the span classifier alone: every enumerated span
    /// whose most likely class is not null.
    pub fn predict_spans(
        &self,
        store: &ParameterStore,
        sentence: &EncodedSentence,
        context: Option<&Matrix>,
    ) -> Result<Vec<Entity>> {
        let mut g = Graph::new(store);
        let opts = ForwardOptions {
            context,
            ..ForwardOptions::eval()
        };
        let pass = self.forward(&mut g, sentence, opts)?;
        let probs = g.value(pass.proposals.class_probs);
        let mut out = Vec::new();
        for (span, row) in pass.pyramid.indexer.iter().zip(probs.row_iter()) {
            let c = argmax(row);
            if c != self.null_class() {
                out.push(Entity {
                    start: span.start,
                    length: span.length,
                    type_id: c,
                });
            }
        }
        Ok(out)
    }
}

/// Network wiring together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub params: ParameterStore,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `config.seed`.
    pub fn new(config: &TrainConfig, vocab: &Vocabulary) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterStore::new();
        let network = Network::new(&mut params, config, vocab, &mut rng)?;
        Ok(Model { network, params })
    }

    pub fn from_params(config: &TrainConfig, vocab: &Vocabulary, params: ParameterStore) -> Result<Self> {
        let network = Network::attach(&params, config, vocab)?;
        Ok(Model { network, params })
    }

    pub fn predict(&self, sentence: &EncodedSentence, context: Option<&Matrix>) -> Result<Vec<Decoded>> {
        self.network.predict(&self.params, sentence, context)
    }

    pub fn predict_spans(&self, sentence: &EncodedSentence, context: Option<&Matrix>) -> Result<Vec<Entity>> {
        self.network.predict_spans(&self.params, sentence, context)
    }
}
