//! Proposal refinement: stacked layers of self-attention among proposals,
//! cross-attention over the span matrix, and a feed-forward block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, LayerNorm, Linear, Matrix, MultiHeadAttention, ParameterStore, Var};
use crate::pyramid::SpanIndexer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Drop the residual connections and layer normalization around each
    /// sublayer.
    pub plain_sublayers: bool,
}

/// 8 heads for widths of at least 64, otherwise the largest divisor of `d`
/// not above 8.
pub fn default_heads(d: usize) -> usize {
    if d >= 64 && d.is_multiple_of(8) {
        return 8;
    }
    (1..=8.min(d)).rev().find(|h| d.is_multiple_of(*h)).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn_in: Linear,
    ffn_out: Linear,
    norms: Option<[LayerNorm; 3]>,
}

/// Per-head attention weights of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// `K × K` per head.
    pub self_attention: Vec<Matrix>,
    /// `K × c` per head.
    pub cross_attention: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `K × d` output of every layer, first to last.
    pub layer_outputs: Vec<Var>,
    pub traces: Option<Vec<LayerTrace>>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
}

fn layer_name(m: usize) -> String {
    format!("decoder.layer{m}")
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        d: usize,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("decoder_layers must be at least 1".into()));
        }
        if cfg.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be at least 1".into()));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for m in 0..cfg.layers {
            let p = layer_name(m);
            let norms = if cfg.plain_sublayers {
                None
            } else {
                Some([
                    LayerNorm::new(store, &format!("{p}.norm_self"), d)?,
                    LayerNorm::new(store, &format!("{p}.norm_cross"), d)?,
                    LayerNorm::new(store, &format!("{p}.norm_ffn"), d)?,
                ])
            };
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, cfg.heads, rng)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, cfg.heads, rng)?,
                ffn_in: Linear::new(store, &format!("{p}.ffn_in"), d, cfg.ffn_dim, rng)?,
                ffn_out: Linear::new(store, &format!("{p}.ffn_out"), cfg.ffn_dim, d, rng)?,
                norms,
            });
        }
        Ok(Decoder { layers })
    }

    pub fn attach(store: &ParameterStore, cfg: &DecoderConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for m in 0..cfg.layers {
            let p = layer_name(m);
            let norms = if cfg.plain_sublayers {
                None
            } else {
                Some([
                    LayerNorm::attach(store, &format!("{p}.norm_self"))?,
                    LayerNorm::attach(store, &format!("{p}.norm_cross"))?,
                    LayerNorm::attach(store, &format!("{p}.norm_ffn"))?,
                ])
            };
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::attach(store, &format!("{p}.self_attn"), cfg.heads)?,
                cross_attn: MultiHeadAttention::attach(store, &format!("{p}.cross_attn"), cfg.heads)?,
                ffn_in: Linear::attach(store, &format!("{p}.ffn_in"))?,
                ffn_out: Linear::attach(store, &format!("{p}.ffn_out"))?,
                norms,
            });
        }
        Ok(Decoder { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Applies layer `m` to `K × d` proposals `u` against `c × d` spans `h`.
    pub fn decoder_layer(
        &self,
        g: &mut Graph,
        m: usize,
        u: Var,
        h: Var,
        trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<Var> {
        let layer = self
            .layers
            .get(m)
            .ok_or_else(|| Error::InvalidArgument(format!("decoder has {} layers, no layer {m}", self.layers.len())))?;
        let sa = layer.self_attn.forward(g, u, u, u)?;
        let u_sa = layer.sublayer(g, 0, u, sa.output);
        let ca = layer.cross_attn.forward(g, u_sa, h, h)?;
        let u_ca = layer.sublayer(g, 1, u_sa, ca.output);
        let inner = layer.ffn_in.forward(g, u_ca)?;
        let inner = g.relu(inner);
        let ff = layer.ffn_out.forward(g, inner)?;
        let out = layer.sublayer(g, 2, u_ca, ff);
        if let Some(traces) = trace {
            traces.push(LayerTrace {
                self_attention: sa.weights.iter().map(|&w| g.value(w).clone()).collect(),
                cross_attention: ca.weights.iter().map(|&w| g.value(w).clone()).collect(),
            });
        }
        Ok(out)
    }

    /// Runs every layer starting from `q`, keeping each layer's output.
    pub fn run(&self, g: &mut Graph, q: Var, h: Var, trace: bool) -> Result<DecoderOutput> {
        let mut traces = trace.then(Vec::new);
        let mut u = q;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for m in 0..self.layers.len() {
            u = self.decoder_layer(g, m, u, h, traces.as_mut())?;
            layer_outputs.push(u);
        }
        Ok(DecoderOutput { layer_outputs, traces })
    }
}

impl DecoderLayer {
    fn sublayer(&self, g: &mut Graph, slot: usize, input: Var, out: Var) -> Var {
        match &self.norms {
            Some(norms) => {
                let sum = g.add(input, out);
                norms[slot].forward(g, sum)
            }
            None => out,
        }
    }
}

/// One attended span of a proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub length: usize,
    pub start: usize,
    pub text: String,
    pub weight: f64,
}

/// Cross-attention of one head, per proposal, spans sorted by weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub layer: usize,
    pub head: usize,
    pub proposals: Vec<Vec<AttentionEntry>>,
}

/// Labels the cross-attention weights of `layer`/`head` with their spans.
/// Indices are 0-based.
pub fn export_attention(
    traces: Option<&[LayerTrace]>,
    layer: usize,
    head: usize,
    indexer: &SpanIndexer,
    tokens: &[String],
) -> Result<AttentionExport> {
    let traces = traces.ok_or_else(|| {
        Error::InvalidArgument("no attention trace recorded; run the decoder with tracing enabled".into())
    })?;
    let trace = traces.get(layer).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "layer {layer} out of range (decoder has {} layers)",
            traces.len()
        ))
    })?;
    let weights = trace.cross_attention.get(head).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "head {head} out of range (layer has {} heads)",
            trace.cross_attention.len()
        ))
    })?;
    if weights.cols() != indexer.len() || tokens.len() != indexer.num_tokens() {
        return Err(Error::InvalidArgument(format!(
            "trace covers {} spans, sentence has {}",
            weights.cols(),
            indexer.len()
        )));
    }
    let proposals = weights
        .row_iter()
        .map(|row| {
            let mut entries: Vec<AttentionEntry> = indexer
                .iter()
                .zip(row)
                .map(|(span, &weight)| AttentionEntry {
                    length: span.length,
                    start: span.start,
                    text: tokens[span.start..span.start + span.length].join(" "),
                    weight,
                })
                .collect();
            // stable: equal weights keep flat order
            entries.sort_by(|a, b| b.weight.total_cmp(&a.weight));
            entries
        })
        .collect();
    Ok(AttentionExport { layer, head, proposals })
}
