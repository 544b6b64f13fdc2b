//! Exact-match, boundary-only and length-bucketed scores.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Mention, Sentence};
use crate::error::{Error, Result};

/// Lower bounds of the default length buckets: 1, 2, 3, 4, 5, 6-8, 9-16, 17-.
pub const DEFAULT_BUCKET_EDGES: [usize; 8] = [1, 2, 3, 4, 5, 6, 9, 17];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    /// Inclusive length range such as `"6-8"`; open ranges end in `-`.
    pub range: String,
    /// Gold mentions in the range.
    pub support: usize,
    /// Predicted mentions in the range.
    pub predicted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// F1 with boundaries alone deciding a match.
    pub loc_f1: f64,
    /// Share of boundary-matched pairs whose types agree.
    pub cls_f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub buckets: Vec<BucketScore>,
}

/// Precision, recall and F1 from counts; each is 0 when undefined.
pub fn prf(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predicted == 0 {
        0.0
    } else {
        correct as f64 / predicted as f64
    };
    let r = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

type Key<'a> = (usize, usize, &'a str);

fn mention_keys(mentions: &[Mention]) -> Vec<Key<'_>> {
    let mut keys: Vec<Key> = mentions.iter().map(|m| (m.start, m.length, m.label.as_str())).collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Number of one-to-one matches between two multisets.
fn overlap<K: std::hash::Hash + Eq>(a: impl Iterator<Item = K>, b: impl Iterator<Item = K>) -> usize {
    let mut counts: HashMap<K, usize> = HashMap::new();
    for k in a {
        *counts.entry(k).or_default() += 1;
    }
    let mut hits = 0;
    for k in b {
        if let Some(c) = counts.get_mut(&k) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    hits
}

fn check_aligned(gold: &[Sentence], pred: &[Sentence]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "gold has {} sentences, predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Scores predicted mentions against gold, sentence by sentence. Repeated
/// predictions of one mention count once.
pub fn evaluate(gold: &[Sentence], pred: &[Sentence]) -> Result<EvalReport> {
    evaluate_with_edges(gold, pred, &DEFAULT_BUCKET_EDGES)
}

pub fn evaluate_with_edges(gold: &[Sentence], pred: &[Sentence], edges: &[usize]) -> Result<EvalReport> {
    check_aligned(gold, pred)?;
    let (mut n_gold, mut n_pred, mut correct, mut loc_correct) = (0, 0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gk = mention_keys(&g.entities);
        let pk = mention_keys(&p.entities);
        n_gold += gk.len();
        n_pred += pk.len();
        correct += overlap(gk.iter().copied(), pk.iter().copied());
        loc_correct += overlap(gk.iter().map(|k| (k.0, k.1)), pk.iter().map(|k| (k.0, k.1)));
    }
    let (precision, recall, f1) = prf(correct, n_pred, n_gold);
    let (_, _, loc_f1) = prf(loc_correct, n_pred, n_gold);
    // over boundary-matched pairs precision and recall coincide
    let (_, _, cls_f1) = prf(correct, loc_correct, loc_correct);
    Ok(EvalReport {
        precision,
        recall,
        f1,
        loc_f1,
        cls_f1,
        gold: n_gold,
        predicted: n_pred,
        correct,
        buckets: length_buckets(gold, pred, edges)?,
    })
}

pub fn bucket_label(edges: &[usize], b: usize) -> String {
    let lo = edges[b];
    match edges.get(b + 1) {
        None => format!("{lo}-"),
        Some(&next) if next == lo + 1 => lo.to_string(),
        Some(&next) => format!("{lo}-{}", next - 1),
    }
}

/// F1 per mention-length range. `edges` are the lower bounds of the ranges,
/// strictly increasing from 1; the last range is open.
pub fn length_buckets(gold: &[Sentence], pred: &[Sentence], edges: &[usize]) -> Result<Vec<BucketScore>> {
    check_aligned(gold, pred)?;
    if edges.first() != Some(&1) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "bucket edges must increase strictly from 1, got {edges:?}"
        )));
    }
    let bucket_of = |len: usize| edges.partition_point(|&e| e <= len) - 1;
    let mut counts = vec![(0usize, 0usize, 0usize); edges.len()];
    for (g, p) in gold.iter().zip(pred) {
        let gk = mention_keys(&g.entities);
        let pk = mention_keys(&p.entities);
        for b in 0..edges.len() {
            let gb = gk.iter().filter(|k| bucket_of(k.1) == b);
            let pb = pk.iter().filter(|k| bucket_of(k.1) == b);
            counts[b].0 += gb.clone().count();
            counts[b].1 += pb.clone().count();
            counts[b].2 += overlap(gb, pb);
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, (support, predicted, correct))| {
            let (precision, recall, f1) = prf(correct, predicted, support);
            BucketScore {
                range: bucket_label(edges, b),
                support,
                predicted,
                correct,
                precision,
                recall,
                f1,
            }
        })
        .collect())
}

impl EvalReport {
    /// Human-readable summary; with `buckets` also the per-length table.
    pub fn to_table(&self, buckets: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "precision {:.4}", self.precision);
        let _ = writeln!(s, "recall    {:.4}", self.recall);
        let _ = writeln!(s, "f1        {:.4}", self.f1);
        let _ = writeln!(s, "loc_f1    {:.4}", self.loc_f1);
        let _ = writeln!(s, "cls_f1    {:.4}", self.cls_f1);
        let _ = writeln!(
            s,
            "gold {}  predicted {}  correct {}",
            self.gold, self.predicted, self.correct
        );
        if buckets {
            let _ = writeln!(
                s,
                "\n{:<8} {:>8} {:>9} {:>8} {:>8}",
                "length", "support", "predicted", "recall", "f1"
            );
            for b in &self.buckets {
                let _ = writeln!(
                    s,
                    "{:<8} {:>8} {:>9} {:>8.4} {:>8.4}",
                    b.range, b.support, b.predicted, b.recall, b.f1
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sent(mentions: &[(usize, usize, &str)]) -> Sentence {
        Sentence {
            tokens: vec!["x".into(); 40],
            pos_tags: None,
            entities: mentions.iter().map(|&(s, l, t)| Mention::new(s, l, t)).collect(),
        }
    }

    #[test]
    fn hand_counted_example() {
        let r = evaluate(&[sent(&[(0, 3, "PER")])], &[sent(&[(0, 3, "PER"), (1, 1, "ORG")])]).unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert_eq!(r.f1, 2.0 / 3.0);
    }

    #[test]
    fn identity_and_boundary_only() {
        let g = [sent(&[(0, 3, "PER"), (1, 1, "ORG")]), sent(&[(2, 9, "LOC")])];
        let r = evaluate(&g, &g).unwrap();
        assert_eq!(
            (r.precision, r.recall, r.f1, r.loc_f1, r.cls_f1),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );

        let r = evaluate(&[sent(&[(0, 3, "PER")])], &[sent(&[(0, 3, "ORG")])]).unwrap();
        assert_eq!((r.f1, r.loc_f1, r.cls_f1), (0.0, 1.0, 0.0));
    }

    #[test]
    fn empty_sides_score_zero() {
        let r = evaluate(&[sent(&[])], &[sent(&[])]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(evaluate(&[sent(&[])], &[]).is_err());
    }

    #[test]
    fn default_buckets() {
        let labels: Vec<String> = (0..8).map(|b| bucket_label(&DEFAULT_BUCKET_EDGES, b)).collect();
        assert_eq!(labels, ["1", "2", "3", "4", "5", "6-8", "9-16", "17-"]);
        let g = [sent(&[(0, 5, "PER")])];
        let r = evaluate(&g, &g).unwrap();
        assert_eq!(r.buckets.len(), 8);
        for b in &r.buckets {
            if b.range == "5" {
                assert_eq!((b.support, b.f1), (1, 1.0));
            } else {
                assert_eq!(b.support, 0);
            }
        }
        let long = [sent(&[(0, 17, "A"), (1, 9, "B"), (2, 16, "C"), (3, 8, "D")])];
        let r = evaluate(&long, &long).unwrap();
        let support: Vec<usize> = r.buckets.iter().map(|b| b.support).collect();
        assert_eq!(support, [0, 0, 0, 0, 0, 1, 2, 1]);
        assert!(length_buckets(&long, &long, &[2, 4]).is_err());
        assert!(length_buckets(&long, &long, &[1, 4, 4]).is_err());
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let g = [sent(&[(0, 1, "A")])];
        let v = serde_json::to_value(evaluate(&g, &g).unwrap()).unwrap();
        for key in ["precision", "recall", "f1", "loc_f1", "cls_f1", "buckets"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(evaluate(&g, &g).unwrap().to_table(true).contains("f1        1.0000"));
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<(usize, usize, u8)>, Vec<(usize, usize, u8)>)>> {
        let mention = (0usize..6, 1usize..5, 0u8..3);
        prop::collection::vec(
            (
                prop::collection::vec(mention.clone(), 0..5),
                prop::collection::vec(mention, 0..5),
            ),
            1..5,
        )
    }

    fn build(side: &[(usize, usize, u8)]) -> Sentence {
        let names = ["A", "B", "C"];
        let ms: Vec<(usize, usize, &str)> = side.iter().map(|&(s, l, t)| (s, l, names[t as usize])).collect();
        sent(&ms)
    }

    proptest! {
        #[test]
        fn score_invariants(pairs in corpus()) {
            let gold: Vec<Sentence> = pairs.iter().map(|(g, _)| build(g)).collect();
            let pred: Vec<Sentence> = pairs.iter().map(|(_, p)| build(p)).collect();
            let r = evaluate(&gold, &pred).unwrap();
            prop_assert!(r.f1 >= 0.0 && r.f1 <= 1.0);
            prop_assert!(r.loc_f1 + 1e-12 >= r.f1);
            prop_assert_eq!(r.buckets.iter().map(|b| b.support).sum::<usize>(), r.gold);
            let swapped = evaluate(&pred, &gold).unwrap();
            prop_assert_eq!(swapped.precision, r.recall);
            prop_assert_eq!(swapped.recall, r.precision);
            let same_sets = gold.iter().zip(&pred).all(|(g, p)| mention_keys(&g.entities) == mention_keys(&p.entities));
            let any_gold = r.gold > 0;
            prop_assert_eq!(r.f1 == 1.0, same_sets && any_gold);
        }
    }
}
