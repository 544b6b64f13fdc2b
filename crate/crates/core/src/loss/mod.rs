//! Training objective: span classification loss over every enumerated span,
//! and a set loss over proposals under a minimum-cost matching with the
//! null-padded gold mentions.

mod hungarian;

pub use hungarian::{assignment_cost, hungarian, Assignment};

use serde::{Deserialize, Serialize};

use crate::data::Entity;
use crate::error::{Error, Result};
use crate::heads::{PredictionSet, PredictionVars};
use crate::numerics::{Graph, Matrix, Pick, Var};
use crate::pyramid::{SpanIndex, SpanIndexer};

/// Probabilities are clamped to this value before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            boundary: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cls", self.cls), ("lambda_b", self.boundary)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Gold mentions followed by null slots up to `k` entries.
pub fn pad_gold(gold: &[Entity], k: usize) -> Result<Vec<Option<Entity>>> {
    if gold.len() > k {
        return Err(Error::InvalidArgument(format!(
            "{} gold mentions exceed the {k} prediction slots",
            gold.len()
        )));
    }
    let mut padded: Vec<Option<Entity>> = gold.iter().copied().map(Some).collect();
    padded.resize(k, None);
    Ok(padded)
}

/// Matching cost of a gold slot against prediction `slot`: the negated sum
/// of the probabilities of its type and boundaries, or 0 for a null slot.
pub fn match_cost(gold: Option<&Entity>, preds: &PredictionSet, slot: usize) -> f64 {
    match gold {
        None => 0.0,
        Some(e) => {
            -(preds.class_probs.get(slot, e.type_id)
                + preds.left.get(slot, e.left())
                + preds.right.get(slot, e.right()))
        }
    }
}

/// `K × K` costs, gold slots by prediction slots.
pub fn cost_matrix(padded: &[Option<Entity>], preds: &PredictionSet) -> Matrix {
    let k = preds.num_proposals();
    let mut m = Matrix::zeros(padded.len(), k);
    for (r, gold) in padded.iter().enumerate() {
        for c in 0..k {
            m.set(r, c, match_cost(gold.as_ref(), preds, c));
        }
    }
    m
}

fn check_gold(padded: &[Option<Entity>], preds: &PredictionSet) -> Result<()> {
    if padded.len() != preds.num_proposals() {
        return Err(Error::InvalidArgument(format!(
            "{} gold slots for {} predictions",
            padded.len(),
            preds.num_proposals()
        )));
    }
    let n = preds.num_tokens();
    let null = preds.null_class();
    for e in padded.iter().flatten() {
        if e.length == 0 || e.right() >= n || e.type_id >= null {
            return Err(Error::InvalidArgument(format!(
                "gold mention (start {}, length {}, type {}) does not fit {n} tokens and {null} types",
                e.start, e.length, e.type_id
            )));
        }
    }
    Ok(())
}

fn refine_picks(
    padded: &[Option<Entity>],
    assignment: &Assignment,
    null: usize,
    w: &LossWeights,
) -> (Vec<Pick>, Vec<Pick>, Vec<Pick>) {
    let mut cls = Vec::with_capacity(padded.len());
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (gold, &slot) in padded.iter().zip(&assignment.mapping) {
        let class = gold.map_or(null, |e| e.type_id);
        cls.push(Pick {
            row: slot,
            col: class,
            weight: w.cls,
        });
        if let Some(e) = gold {
            left.push(Pick {
                row: slot,
                col: e.left(),
                weight: w.boundary,
            });
            right.push(Pick {
                row: slot,
                col: e.right(),
                weight: w.boundary,
            });
        }
    }
    (cls, left, right)
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Set loss of `preds` against padded gold under a given matching.
pub fn refine_loss_value(
    padded: &[Option<Entity>],
    preds: &PredictionSet,
    assignment: &Assignment,
    w: &LossWeights,
) -> f64 {
    let null = preds.null_class();
    padded
        .iter()
        .zip(&assignment.mapping)
        .map(|(gold, &j)| match gold {
            None => w.cls * neg_log(preds.class_probs.get(j, null)),
            Some(e) => {
                w.cls * neg_log(preds.class_probs.get(j, e.type_id))
                    + w.boundary * (neg_log(preds.left.get(j, e.left())) + neg_log(preds.right.get(j, e.right())))
            }
        })
        .sum()
}

/// Matches null-padded gold to predictions and returns the set loss with the
/// matching used.
pub fn refine_loss(gold: &[Entity], preds: &PredictionSet, w: &LossWeights) -> Result<(f64, Assignment)> {
    let padded = pad_gold(gold, preds.num_proposals())?;
    check_gold(&padded, preds)?;
    let assignment = hungarian(&cost_matrix(&padded, preds))?;
    Ok((refine_loss_value(&padded, preds, &assignment, w), assignment))
}

/// Graph form of [`refine_loss`], differentiable in the predictions.
pub fn refine_loss_node(
    g: &mut Graph,
    gold: &[Entity],
    vars: &PredictionVars,
    w: &LossWeights,
) -> Result<(Var, Assignment)> {
    let preds = PredictionSet::from_graph(g, vars);
    let padded = pad_gold(gold, preds.num_proposals())?;
    check_gold(&padded, &preds)?;
    let assignment = hungarian(&cost_matrix(&padded, &preds))?;
    let (cls, left, right) = refine_picks(&padded, &assignment, preds.null_class(), w);
    let mut parts = vec![g.neg_log_pick(vars.class_probs, cls, PROB_FLOOR)];
    if !left.is_empty() {
        parts.push(g.neg_log_pick(vars.left, left, PROB_FLOOR));
        parts.push(g.neg_log_pick(vars.right, right, PROB_FLOOR));
    }
    let loss = if parts.len() == 1 {
        parts[0]
    } else {
        g.sum_scalars(&parts)
    };
    Ok((loss, assignment))
}

/// Class label of every enumerated span: the gold type on an exact match,
/// otherwise `null`. Gold mentions longer than the span limit have no span.
pub fn span_labels(gold: &[Entity], indexer: &SpanIndexer, null: usize) -> Vec<usize> {
    let mut labels = vec![null; indexer.len()];
    for e in gold {
        let span = SpanIndex {
            length: e.length,
            start: e.start,
        };
        if let Ok(flat) = indexer.to_flat(span) {
            labels[flat] = e.type_id;
        }
    }
    labels
}

fn label_weight(label: usize, null: usize, null_weight: f64) -> f64 {
    if label == null {
        null_weight
    } else {
        1.0
    }
}

/// Summed negative log-likelihood of span labels under `c × (C + 1)` class
/// distributions; null-labelled spans are weighted by `null_weight`.
pub fn proposal_loss_value(probs: &Matrix, labels: &[usize], null_weight: f64) -> f64 {
    let null = probs.cols() - 1;
    labels
        .iter()
        .enumerate()
        .map(|(r, &c)| label_weight(c, null, null_weight) * neg_log(probs.get(r, c)))
        .sum()
}

pub fn proposal_loss_node(g: &mut Graph, class_probs: Var, labels: &[usize], null_weight: f64) -> Result<Var> {
    let (rows, cols) = g.shape(class_probs);
    if rows != labels.len() || labels.iter().any(|&c| c >= cols) {
        return Err(Error::InvalidArgument(format!(
            "{} span labels for {rows} spans over {cols} classes",
            labels.len()
        )));
    }
    let null = cols - 1;
    let picks = labels
        .iter()
        .enumerate()
        .map(|(row, &col)| Pick {
            row,
            col,
            weight: label_weight(col, null, null_weight),
        })
        .collect();
    Ok(g.neg_log_pick(class_probs, picks, PROB_FLOOR))
}

/// Loss terms of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub proposal_loss: f64,
    /// One per decoder layer, first to last.
    pub refine_losses: Vec<f64>,
    pub total: f64,
    pub assignments: Vec<Assignment>,
}

/// Proposal loss plus the refine loss of every decoder layer, each layer
/// matched on its own.
pub fn total_loss(
    g: &mut Graph,
    proposal: Var,
    layers: &[PredictionVars],
    gold: &[Entity],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut parts = vec![proposal];
    let mut refine_losses = Vec::with_capacity(layers.len());
    let mut assignments = Vec::with_capacity(layers.len());
    for vars in layers {
        let (loss, a) = refine_loss_node(g, gold, vars, w)?;
        refine_losses.push(g.value(loss).item());
        assignments.push(a);
        parts.push(loss);
    }
    let total = g.sum_scalars(&parts);
    let breakdown = LossBreakdown {
        proposal_loss: g.value(proposal).item(),
        refine_losses,
        total: g.value(total).item(),
        assignments,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", breakdown.total)));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_dists<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let v: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            for (c, x) in v.iter().enumerate() {
                m.set(r, c, x / s);
            }
        }
        m
    }

    fn random_preds<R: Rng>(rng: &mut R, k: usize, n: usize, classes: usize) -> PredictionSet {
        PredictionSet {
            class_probs: random_dists(rng, k, classes + 1),
            left: random_dists(rng, k, n),
            right: random_dists(rng, k, n),
        }
    }

    fn random_gold<R: Rng>(rng: &mut R, g: usize, n: usize, classes: usize) -> Vec<Entity> {
        (0..g)
            .map(|_| {
                let start = rng.gen_range(0..n);
                Entity {
                    start,
                    length: rng.gen_range(1..=n - start),
                    type_id: rng.gen_range(0..classes),
                }
            })
            .collect()
    }

    fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
        let rows: Vec<&[f64]> = perm.iter().map(|&i| m.row(i)).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn match_cost_examples() {
        let mut p = PredictionSet {
            class_probs: Matrix::from_rows(&[[0.5, 0.2, 0.3]]).unwrap(),
            left: Matrix::from_rows(&[[0.4, 0.6]]).unwrap(),
            right: Matrix::from_rows(&[[0.7, 0.3]]).unwrap(),
        };
        let e = Entity {
            start: 0,
            length: 2,
            type_id: 0,
        };
        assert!((match_cost(Some(&e), &p, 0) + 1.2).abs() < 1e-15);
        assert_eq!(match_cost(None, &p, 0), 0.0);
        p.class_probs = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        p.left = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        p.right = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(match_cost(Some(&e), &p, 0), -3.0);
    }

    #[test]
    fn refine_loss_analytic() {
        let p = PredictionSet {
            class_probs: Matrix::from_rows(&[[0.5, 0.5]]).unwrap(),
            left: Matrix::from_rows(&[[0.25, 0.75]]).unwrap(),
            right: Matrix::from_rows(&[[0.875, 0.125]]).unwrap(),
        };
        let gold = [Entity {
            start: 0,
            length: 2,
            type_id: 0,
        }];
        let (loss, _) = refine_loss(&gold, &p, &LossWeights::default()).unwrap();
        assert!((loss - 6.0 * 2f64.ln()).abs() < 1e-12);

        let certain_null = PredictionSet {
            class_probs: Matrix::from_rows(&[[0.0, 1.0], [0.0, 1.0]]).unwrap(),
            left: Matrix::filled(2, 3, 1.0 / 3.0),
            right: Matrix::filled(2, 3, 1.0 / 3.0),
        };
        assert_eq!(refine_loss(&[], &certain_null, &LossWeights::default()).unwrap().0, 0.0);
        assert!(refine_loss(&[gold[0]; 3], &certain_null, &LossWeights::default()).is_err());
    }

    #[test]
    fn uniform_single_span_proposal_loss() {
        let probs = Matrix::filled(1, 4, 0.25);
        let loss = proposal_loss_value(&probs, &[3], 1.0);
        assert!((loss + 0.25f64.ln()).abs() < 1e-12);
        let perfect = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(proposal_loss_value(&perfect, &[1, 0], 1.0), 0.0);
    }

    #[test]
    fn proposal_loss_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let indexer = SpanIndexer::new(3, 2).unwrap();
        let probs = random_dists(&mut rng, 5, 3);
        let gold = [Entity {
            start: 1,
            length: 2,
            type_id: 1,
        }];
        // spans in flat order: (0,1) (1,1) (2,1) (0,2) (1,2)
        let mut want = 0.0;
        for (row, (start, length)) in [(0, 1), (1, 1), (2, 1), (0, 2), (1, 2)].iter().enumerate() {
            let label = if (*start, *length) == (1, 2) { 1 } else { 2 };
            want -= probs.get(row, label).ln();
        }
        let labels = span_labels(&gold, &indexer, 2);
        assert_eq!(labels, vec![2, 2, 2, 2, 1]);
        assert!((proposal_loss_value(&probs, &labels, 1.0) - want).abs() < 1e-12);

        let store = crate::numerics::ParameterStore::new();
        let mut g = Graph::new(&store);
        let pv = g.input(probs);
        let node = proposal_loss_node(&mut g, pv, &labels, 1.0).unwrap();
        assert!((g.value(node).item() - want).abs() < 1e-12);
    }

    #[test]
    fn long_gold_has_no_span_label() {
        let indexer = SpanIndexer::new(6, 2).unwrap();
        let gold = [Entity {
            start: 0,
            length: 4,
            type_id: 0,
        }];
        assert!(span_labels(&gold, &indexer, 1).iter().all(|&l| l == 1));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        permutations(n - 1)
            .into_iter()
            .flat_map(|p| {
                (0..=p.len()).map(move |pos| {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    q
                })
            })
            .collect()
    }

    #[test]
    fn loss_under_matcher_equals_brute_force_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = LossWeights::default();
        for _ in 0..200 {
            let preds = random_preds(&mut rng, 3, 5, 2);
            let gold = random_gold(&mut rng, 2, 5, 2);
            let padded = pad_gold(&gold, 3).unwrap();
            let cost = cost_matrix(&padded, &preds);
            let best = permutations(3)
                .into_iter()
                .min_by(|a, b| assignment_cost(&cost, a).total_cmp(&assignment_cost(&cost, b)))
                .unwrap();
            let oracle = refine_loss_value(
                &padded,
                &preds,
                &Assignment {
                    total_cost: 0.0,
                    mapping: best,
                },
                &w,
            );
            let (loss, _) = refine_loss(&gold, &preds, &w).unwrap();
            assert!((loss - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_loss_matches_value_and_totals_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = LossWeights {
            cls: 0.7,
            boundary: 1.3,
        };
        let store = crate::numerics::ParameterStore::new();
        let mut g = Graph::new(&store);
        let gold = random_gold(&mut rng, 2, 6, 3);
        let mut layers = Vec::new();
        let mut sets = Vec::new();
        for _ in 0..3 {
            let p = random_preds(&mut rng, 4, 6, 3);
            layers.push(PredictionVars {
                class_probs: g.input(p.class_probs.clone()),
                left: g.input(p.left.clone()),
                right: g.input(p.right.clone()),
            });
            sets.push(p);
        }
        let proposal = g.input(Matrix::scalar(1.5));
        let (total, b) = total_loss(&mut g, proposal, &layers, &gold, &w).unwrap();
        let mut sum = 1.5;
        for (p, got) in sets.iter().zip(&b.refine_losses) {
            let (want, _) = refine_loss(&gold, p, &w).unwrap();
            assert!((want - got).abs() < 1e-12);
            sum += want;
        }
        assert!((g.value(total).item() - sum).abs() < 1e-12);
        assert_eq!(b.total, g.value(total).item());
        assert_eq!(b.assignments.len(), 3);
    }

    proptest! {
        #[test]
        fn refine_loss_ignores_slot_order(seed in any::<u64>(), gold_count in 0usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = LossWeights::default();
            let preds = random_preds(&mut rng, 6, 7, 3);
            let gold = random_gold(&mut rng, gold_count, 7, 3);
            let mut perm: Vec<usize> = (0..6).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let shuffled = PredictionSet {
                class_probs: permute_rows(&preds.class_probs, &perm),
                left: permute_rows(&preds.left, &perm),
                right: permute_rows(&preds.right, &perm),
            };
            let (a, _) = refine_loss(&gold, &preds, &w).unwrap();
            let (b, _) = refine_loss(&gold, &shuffled, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn refine_loss_zero_only_when_certain(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gold = random_gold(&mut rng, 2, 5, 2);
            let mut preds = PredictionSet {
                class_probs: Matrix::zeros(3, 3),
                left: Matrix::zeros(3, 5),
                right: Matrix::zeros(3, 5),
            };
            for (k, e) in gold.iter().enumerate() {
                preds.class_probs.set(k, e.type_id, 1.0);
                preds.left.set(k, e.left(), 1.0);
                preds.right.set(k, e.right(), 1.0);
            }
            preds.class_probs.set(2, 2, 1.0);
            preds.left.set(2, 0, 1.0);
            preds.right.set(2, 0, 1.0);
            let w = LossWeights::default();
            prop_assert_eq!(refine_loss(&gold, &preds, &w).unwrap().0, 0.0);
            let noisy = random_preds(&mut rng, 3, 5, 2);
            prop_assert!(refine_loss(&gold, &noisy, &w).unwrap().0 > 0.0);
        }
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(LossWeights {
            cls: 1.0,
            boundary: 0.0
        }
        .validate()
        .unwrap_err()
        .to_string()
        .contains("lambda_b"));
        assert!(LossWeights {
            cls: -1.0,
            boundary: 1.0
        }
        .validate()
        .is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
