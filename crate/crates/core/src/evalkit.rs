//! Held-out precision, F1, triple classification and ranking metrics.

use std::collections::BTreeSet;
use std::fmt;

use crate::encoders::NA;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("{wanted} ranked predictions requested, only {have} non-NA")]
    TooFewPredictions { wanted: usize, have: usize },
    #[error("empty input")]
    Empty,
    #[error("{0} scores for {1} labels")]
    Count(usize, usize),
    #[error("non-finite confidence at row {0}")]
    Confidence(usize),
    #[error("query {0}: gold candidate missing")]
    GoldMissing(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub predicted: usize,
    pub confidence: f64,
    pub gold: usize,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet(pub Vec<Prediction>);

impl PredictionSet {
    /// Argmax class as prediction; confidence is the largest non-NA
    /// probability.
    pub fn from_probs(probs: &[Vec<f64>], gold: &[usize]) -> Result<Self, EvalError> {
        if probs.len() != gold.len() {
            return Err(EvalError::Count(probs.len(), gold.len()));
        }
        let mut out = Vec::with_capacity(probs.len());
        for (i, (p, &g)) in probs.iter().zip(gold).enumerate() {
            if p.iter().any(|x| !x.is_finite()) || p.is_empty() {
                return Err(EvalError::Confidence(i));
            }
            let predicted = argmax(p);
            let confidence = p.iter().skip(NA + 1).copied().fold(f64::NEG_INFINITY, f64::max);
            out.push(Prediction {
                predicted,
                confidence: if confidence.is_finite() { confidence } else { p[NA] },
                gold: g,
            });
        }
        Ok(Self(out))
    }

    fn ranked(&self) -> Result<Vec<Prediction>, EvalError> {
        if let Some(i) = self.0.iter().position(|p| !p.confidence.is_finite()) {
            return Err(EvalError::Confidence(i));
        }
        let mut v: Vec<Prediction> = self.0.iter().copied().filter(|p| p.predicted != NA).collect();
        // stable: equal confidences keep input order
        v.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(v)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Fraction correct among the `k` most confident non-NA predictions.
pub fn precision_at_k(preds: &PredictionSet, k: usize) -> Result<f64, EvalError> {
    let ranked = preds.ranked()?;
    if k == 0 || k > ranked.len() {
        return Err(EvalError::TooFewPredictions {
            wanted: k,
            have: ranked.len(),
        });
    }
    Ok(ranked[..k].iter().filter(|p| p.correct()).count() as f64 / k as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged scores. With `exclude_na`, NA predictions are not counted
/// as positives and NA gold labels are not counted as misses.
pub fn f1_micro(preds: &PredictionSet, exclude_na: bool) -> Result<Prf, EvalError> {
    if preds.0.is_empty() {
        return Err(EvalError::Empty);
    }
    let counts = |c: usize| !exclude_na || c != NA;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for p in &preds.0 {
        if counts(p.predicted) {
            if p.correct() {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if counts(p.gold) && !p.correct() {
            fneg += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf { precision, recall, f1 })
}

/// `(recall, precision)` after each prefix of the confidence ranking.
pub fn pr_curve(preds: &PredictionSet) -> Result<Vec<(f64, f64)>, EvalError> {
    let total = preds.0.iter().filter(|p| p.gold != NA).count();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    Ok(preds
        .ranked()?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            hits += usize::from(p.correct());
            (hits as f64 / total as f64, hits as f64 / (i + 1) as f64)
        })
        .collect())
}

/// Positive when the score is at least 0.5.
pub fn triple_accuracy(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Count(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let ok = scores.iter().zip(labels).filter(|(s, l)| (**s >= 0.5) == **l).count();
    Ok(ok as f64 / scores.len() as f64)
}

/// One link-prediction query: candidate ids best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingQuery {
    pub ranked: Vec<usize>,
    pub gold: usize,
    /// Candidates forming true triples elsewhere; dropped when filtering.
    pub known_true: BTreeSet<usize>,
}

impl RankingQuery {
    /// Orders candidates by descending score, ties by input order.
    pub fn from_scores(scored: &[(usize, f64)], gold: usize, known_true: BTreeSet<usize>) -> Self {
        let mut v = scored.to_vec();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self {
            ranked: v.into_iter().map(|(c, _)| c).collect(),
            gold,
            known_true,
        }
    }

    pub fn rank(&self, filtered: bool) -> Option<usize> {
        let mut r = 0;
        for &c in &self.ranked {
            if c == self.gold {
                return Some(r + 1);
            }
            if !(filtered && self.known_true.contains(&c)) {
                r += 1;
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingSet {
    pub queries: Vec<RankingQuery>,
    pub filtered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub mr: f64,
    /// `(N, Hits@N)` in the order requested.
    pub hits: Vec<(usize, f64)>,
}

pub fn mrr_mr_hits(set: &RankingSet, ns: &[usize]) -> Result<RankingMetrics, EvalError> {
    if set.queries.is_empty() {
        return Err(EvalError::Empty);
    }
    let ranks: Vec<usize> = set
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| q.rank(set.filtered).ok_or(EvalError::GoldMissing(i)))
        .collect::<Result<_, _>>()?;
    let n = ranks.len() as f64;
    Ok(RankingMetrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        mr: ranks.iter().sum::<usize>() as f64 / n,
        hits: ns
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
            .collect(),
    })
}

/// `metric,name,value` records in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<(String, String, f64)>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: &str, name: &str, value: f64) {
        self.rows.push((metric.to_string(), name.to_string(), value));
    }

    pub fn get(&self, metric: &str, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == metric && r.1 == name).map(|r| r.2)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric,name,value")?;
        for (m, n, v) in &self.rows {
            writeln!(f, "{m},{n},{v:?}")?;
        }
        Ok(())
    }
}

pub fn pr_curve_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("recall,precision\n");
    for (r, p) in curve {
        s.push_str(&format!("{r:?},{p:?}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(rows: &[(usize, f64, usize)]) -> PredictionSet {
        PredictionSet(
            rows.iter()
                .map(|&(predicted, confidence, gold)| Prediction {
                    predicted,
                    confidence,
                    gold,
                })
                .collect(),
        )
    }

    #[test]
    fn precision_examples() {
        let all = set(&[(1, 0.9, 1), (2, 0.8, 2), (3, 0.7, 3)]);
        assert_eq!(precision_at_k(&all, 3).unwrap(), 1.0);
        let alt = set(&[(1, 0.9, 1), (2, 0.8, 1), (3, 0.7, 3), (2, 0.6, 3), (1, 0.1, 1)]);
        let brute = alt.0[..4].iter().filter(|p| p.predicted == p.gold).count() as f64 / 4.0;
        assert_eq!(precision_at_k(&alt, 4).unwrap(), brute);
        assert_eq!(brute, 0.5);
        assert!(matches!(
            precision_at_k(&all, 4),
            Err(EvalError::TooFewPredictions { wanted: 4, have: 3 })
        ));
    }

    #[test]
    fn precision_skips_na_and_keeps_tie_order() {
        let s = set(&[(0, 0.99, 1), (1, 0.5, 2), (2, 0.5, 2)]);
        assert_eq!(precision_at_k(&s, 1).unwrap(), 0.0);
        assert_eq!(precision_at_k(&s, 2).unwrap(), 0.5);
    }

    #[test]
    fn f1_examples() {
        let perfect = set(&[(1, 1.0, 1), (2, 1.0, 2)]);
        assert_eq!(f1_micro(&perfect, true).unwrap().f1, 1.0);
        let all_na = set(&[(0, 1.0, 1), (0, 1.0, 2)]);
        assert_eq!(f1_micro(&all_na, true).unwrap().f1, 0.0);
        // 3 TP, 1 FP (gold NA), 1 FN (predicted NA)
        let mixed = set(&[(1, 1.0, 1), (2, 1.0, 2), (3, 1.0, 3), (2, 1.0, 0), (0, 1.0, 1)]);
        let prf = f1_micro(&mixed, true).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.75, 0.75, 0.75));
        assert_eq!(f1_micro(&PredictionSet::default(), true), Err(EvalError::Empty));
    }

    #[test]
    fn triple_accuracy_examples() {
        let labels = [true; 10];
        let mut scores = [0.9; 10];
        assert_eq!(triple_accuracy(&scores, &labels).unwrap(), 1.0);
        scores[3] = 0.2;
        assert_eq!(triple_accuracy(&scores, &labels).unwrap(), 0.9);
        assert!(triple_accuracy(&scores[..2], &labels).is_err());
    }

    #[test]
    fn ranking_examples() {
        let q = |ranked: Vec<usize>, gold| RankingQuery {
            ranked,
            gold,
            known_true: BTreeSet::new(),
        };
        let top = RankingSet {
            queries: vec![q(vec![5, 1, 2], 5), q(vec![3, 4], 3)],
            filtered: true,
        };
        let m = mrr_mr_hits(&top, &[1]).unwrap();
        assert_eq!((m.mrr, m.mr, m.hits[0].1), (1.0, 1.0, 1.0));

        let two = RankingSet {
            queries: vec![q(vec![7, 1, 2, 3], 7), q(vec![1, 2, 3, 7], 7)],
            filtered: false,
        };
        let m = mrr_mr_hits(&two, &[1, 3]).unwrap();
        assert_eq!(m.mrr, 0.625);
        assert_eq!(m.mr, 2.5);
        assert_eq!(m.hits, vec![(1, 0.5), (3, 0.5)]);

        let mut known = q(vec![1, 2, 7], 7);
        known.known_true.insert(2);
        assert_eq!(known.rank(false), Some(3));
        assert_eq!(known.rank(true), Some(2));

        let missing = RankingSet {
            queries: vec![q(vec![1, 2], 9)],
            filtered: true,
        };
        assert_eq!(mrr_mr_hits(&missing, &[1]), Err(EvalError::GoldMissing(0)));
    }

    #[test]
    fn from_scores_orders_descending_with_stable_ties() {
        let q = RankingQuery::from_scores(&[(4, 0.1), (8, 0.7), (2, 0.7), (6, 0.9)], 2, BTreeSet::new());
        assert_eq!(q.ranked, vec![6, 8, 2, 4]);
        assert_eq!(q.rank(true), Some(3));
    }

    #[test]
    fn from_probs_confidence_ignores_na() {
        let p = PredictionSet::from_probs(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]], &[0, 2]).unwrap();
        assert_eq!(p.0[0].predicted, 0);
        assert_eq!(p.0[0].confidence, 0.2);
        assert_eq!(p.0[1].predicted, 2);
        assert!(PredictionSet::from_probs(&[vec![f64::NAN, 1.0]], &[1]).is_err());
    }

    #[test]
    fn pr_curve_and_report_text() {
        let s = set(&[(1, 0.9, 1), (2, 0.8, 1), (1, 0.7, 1), (0, 0.6, 0)]);
        let curve = pr_curve(&s).unwrap();
        assert_eq!(curve, vec![(1.0 / 3.0, 1.0), (1.0 / 3.0, 0.5), (2.0 / 3.0, 2.0 / 3.0)]);
        assert!(pr_curve_csv(&curve).starts_with("recall,precision\n0.3333333333333333,1.0\n"));
        let mut r = MetricsReport::default();
        r.push("f1", "full", 0.5);
        r.push("p@k", "10", 1.0);
        assert_eq!(r.to_string(), "metric,name,value\nf1,full,0.5\np@k,10,1.0\n");
        assert_eq!(r.get("p@k", "10"), Some(1.0));
    }

    fn arb_set() -> impl Strategy<Value = PredictionSet> {
        prop::collection::vec((0usize..4, 0.0f64..1.0, 0usize..4), 1..40).prop_map(|v| set(&v))
    }

    proptest! {
        #[test]
        fn metrics_in_range(s in arb_set()) {
            let prf = f1_micro(&s, true).unwrap();
            for x in [prf.precision, prf.recall, prf.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let n = s.0.iter().filter(|p| p.predicted != NA).count();
            for k in 1..=n {
                let p = precision_at_k(&s, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }

        #[test]
        fn precision_monotone_in_correctness(s in arb_set(), pick in 0usize..40) {
            let n = s.0.iter().filter(|p| p.predicted != NA).count();
            prop_assume!(n > 0);
            let i = pick % s.0.len();
            let mut better = s.clone();
            let p = &mut better.0[i];
            prop_assume!(p.predicted != NA && p.predicted != p.gold);
            p.gold = p.predicted;
            for k in 1..=n {
                prop_assert!(precision_at_k(&better, k).unwrap() >= precision_at_k(&s, k).unwrap());
            }
        }

        #[test]
        fn f1_permutation_invariant(s in arb_set(), seed in any::<u64>()) {
            let mut shuffled = s.clone();
            crate::rng::Rng::new(seed).shuffle(&mut shuffled.0);
            prop_assert_eq!(f1_micro(&s, true).unwrap(), f1_micro(&shuffled, true).unwrap());
            prop_assert_eq!(f1_micro(&s, false).unwrap(), f1_micro(&shuffled, false).unwrap());
        }

        #[test]
        fn ranking_bounds(ranks in prop::collection::vec(1usize..20, 1..15)) {
            let queries = ranks
                .iter()
                .map(|&r| RankingQuery { ranked: (0..20).collect(), gold: r - 1, known_true: BTreeSet::new() })
                .collect();
            let m = mrr_mr_hits(&RankingSet { queries, filtered: true }, &[1, 3, 10]).unwrap();
            prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
            prop_assert!(m.mr >= 1.0);
            prop_assert!(m.hits.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }
}
