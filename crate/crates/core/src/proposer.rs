//! Coarse span classification and top-K proposal selection.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, Linear, ParameterStore, Var};
use crate::pyramid::SpanPyramid;

/// Span classifier over `num_classes` entity types plus the null class,
/// which is the last index.
#[derive(Clone, Debug)]
pub struct Proposer {
    classifier: Linear,
}

/// Proposals selected from one sentence's span matrix.
#[derive(Clone, Debug)]
pub struct ProposalSet {
    /// Flat span indices, best first.
    pub indices: Vec<usize>,
    /// `K × d` span features of the selected spans.
    pub features: Var,
    /// Entityhood of each selected span.
    pub scores: Vec<f64>,
    /// `c × (C + 1)` class distributions for every enumerated span.
    pub class_probs: Var,
}

impl Proposer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, d: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        Ok(Proposer {
            classifier: Linear::new(store, "proposer.classifier", d, num_classes + 1, rng)?,
        })
    }

    pub fn attach(store: &ParameterStore) -> Result<Self> {
        Ok(Proposer {
            classifier: Linear::attach(store, "proposer.classifier")?,
        })
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// Row-wise class distributions for `c × d` span features.
    pub fn classify_spans(&self, g: &mut Graph, flat: Var) -> Result<Var> {
        let logits = self.classifier.forward(g, flat)?;
        Ok(g.softmax_rows(logits))
    }

    /// Classifies every span and gathers the `k` most entity-like as
    /// proposal features.
    pub fn propose(&self, g: &mut Graph, pyramid: &SpanPyramid, k: usize) -> Result<ProposalSet> {
        let class_probs = self.classify_spans(g, pyramid.flat)?;
        let all: Vec<f64> = g.value(class_probs).row_iter().map(entityhood).collect();
        let indices = select_topk(&all, k);
        let features = g.gather_rows(pyramid.flat, &indices);
        let scores = indices.iter().map(|&i| all[i]).collect();
        Ok(ProposalSet {
            indices,
            features,
            scores,
            class_probs,
        })
    }
}

/// Probability that a span is some entity: the mass on every class except
/// the null class (last entry).
pub fn entityhood(dist: &[f64]) -> f64 {
    match dist.split_last() {
        Some((_, types)) => types.iter().sum::<f64>().clamp(0.0, 1.0),
        None => 0.0,
    }
}

/// Indices of the `k` highest scores, best first, ties to the lower index.
/// With fewer than `k` scores, every index is taken and the best one repeats
/// to fill the remaining slots.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    if k <= order.len() {
        order.truncate(k);
    } else if let Some(&best) = order.first() {
        order.resize(k, best);
    }
    order
}
