//! Re-prediction from refined proposals: an entity class and left/right
//! boundary distributions over the sentence's tokens.

use rand::Rng;

use crate::data::Entity;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Graph, Linear, Matrix, ParameterStore, Var};

/// Scores every token as a boundary for every proposal with a two-layer
/// ReLU MLP over `[u_k; x_i]`, normalized across tokens.
#[derive(Clone, Debug)]
pub struct BoundaryMlp {
    hidden: Linear,
    score: Linear,
}

impl BoundaryMlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(BoundaryMlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * d, d, rng)?,
            // the softmax over positions cancels any score bias
            score: Linear::unbiased(store, &format!("{name}.score"), d, 1, rng)?,
        })
    }

    pub fn attach(store: &ParameterStore, name: &str) -> Result<Self> {
        Ok(BoundaryMlp {
            hidden: Linear::attach(store, &format!("{name}.hidden"))?,
            score: Linear::attach(store, &format!("{name}.score"))?,
        })
    }

    /// `K × N` distributions for `K × d` proposals over `N × d` tokens.
    pub fn forward(&self, g: &mut Graph, proposals: Var, tokens: Var) -> Result<Var> {
        let (k, d) = g.shape(proposals);
        let (n, dt) = g.shape(tokens);
        if dt != d || self.hidden.in_dim() != 2 * d {
            return Err(Error::Config(format!(
                "{} expects width {}, got proposals {d} and tokens {dt}",
                self.hidden.name(),
                self.hidden.in_dim()
            )));
        }
        // [u; x]·W = u·W_top + x·W_bottom, evaluated for all K·N pairs
        let w = g.param(self.hidden.weight());
        let top = g.slice_rows(w, 0, d);
        let bottom = g.slice_rows(w, d, d);
        let a = g.matmul(proposals, top);
        let b = g.matmul(tokens, bottom);
        let b = self.hidden.add_bias(g, b);
        let pre = g.pairwise_add(a, b);
        let act = g.relu(pre);
        let scores = self.score.forward(g, act)?;
        let scores = g.reshape(scores, k, n);
        Ok(g.softmax_rows(scores))
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    classifier: Linear,
    left: BoundaryMlp,
    right: BoundaryMlp,
}

/// Graph nodes of one layer's predictions.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `K × (C + 1)`.
    pub class_probs: Var,
    /// `K × N`.
    pub left: Var,
    /// `K × N`.
    pub right: Var,
}

/// Per-proposal class and boundary distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub class_probs: Matrix,
    pub left: Matrix,
    pub right: Matrix,
}

impl PredictionSet {
    pub fn from_graph(g: &Graph, vars: &PredictionVars) -> Self {
        PredictionSet {
            class_probs: g.value(vars.class_probs).clone(),
            left: g.value(vars.left).clone(),
            right: g.value(vars.right).clone(),
        }
    }

    pub fn num_proposals(&self) -> usize {
        self.class_probs.rows()
    }

    pub fn num_tokens(&self) -> usize {
        self.left.cols()
    }

    pub fn null_class(&self) -> usize {
        self.class_probs.cols() - 1
    }
}

/// A decoded mention with its confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub entity: Entity,
    pub confidence: f64,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, d: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        Ok(Heads {
            classifier: Linear::new(store, "heads.classifier", d, num_classes + 1, rng)?,
            left: BoundaryMlp::new(store, "heads.left", d, rng)?,
            right: BoundaryMlp::new(store, "heads.right", d, rng)?,
        })
    }

    pub fn attach(store: &ParameterStore) -> Result<Self> {
        Ok(Heads {
            classifier: Linear::attach(store, "heads.classifier")?,
            left: BoundaryMlp::attach(store, "heads.left")?,
            right: BoundaryMlp::attach(store, "heads.right")?,
        })
    }

    pub fn classify_proposal(&self, g: &mut Graph, proposals: Var) -> Result<Var> {
        let logits = self.classifier.forward(g, proposals)?;
        Ok(g.softmax_rows(logits))
    }

    /// Left and right boundary distributions, `K × N` each.
    pub fn boundary_distributions(&self, g: &mut Graph, proposals: Var, tokens: Var) -> Result<(Var, Var)> {
        Ok((
            self.left.forward(g, proposals, tokens)?,
            self.right.forward(g, proposals, tokens)?,
        ))
    }

    pub fn predict(&self, g: &mut Graph, proposals: Var, tokens: Var) -> Result<PredictionVars> {
        let class_probs = self.classify_proposal(g, proposals)?;
        let (left, right) = self.boundary_distributions(g, proposals, tokens)?;
        Ok(PredictionVars {
            class_probs,
            left,
            right,
        })
    }
}

/// Argmax decoding of each proposal. Null-class and inverted-boundary
/// proposals are dropped; among proposals decoding to the same mention the
/// one with the highest class probability is kept. Output is sorted by
/// mention.
pub fn decode_predictions(preds: &PredictionSet) -> Vec<Decoded> {
    let null = preds.null_class();
    let mut best: Vec<(Decoded, f64)> = Vec::new();
    for k in 0..preds.num_proposals() {
        let cls = preds.class_probs.row(k);
        let c = argmax(cls);
        if c == null {
            continue;
        }
        let (pl, pr) = (preds.left.row(k), preds.right.row(k));
        let (l, r) = (argmax(pl), argmax(pr));
        if l > r {
            continue;
        }
        let entity = Entity {
            start: l,
            length: r - l + 1,
            type_id: c,
        };
        let decoded = Decoded {
            entity,
            confidence: cls[c] * pl[l] * pr[r],
        };
        match best.iter_mut().find(|(d, _)| d.entity == entity) {
            Some(slot) if cls[c] > slot.1 => *slot = (decoded, cls[c]),
            Some(_) => {}
            None => best.push((decoded, cls[c])),
        }
    }
    let mut out: Vec<Decoded> = best.into_iter().map(|(d, _)| d).collect();
    out.sort_by_key(|d| d.entity);
    out
}
