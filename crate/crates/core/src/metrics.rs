//! Attack, utility and probe metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MatchRule;
use crate::model::{DecoderHead, ModelError};
use crate::tensor::Tensor;
use crate::train::is_attack_success;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    Empty,
    #[error("length mismatch: {0} outputs vs {1} targets")]
    Length(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, MetricsError>;

fn check_pair<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricsError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Share of outputs that exhibit the backdoor behaviour under `rule`.
pub fn asr(outputs: &[Vec<usize>], targets: &[Vec<usize>], rule: MatchRule) -> Result<f64> {
    check_pair(outputs, targets)?;
    let hits = outputs
        .iter()
        .zip(targets)
        .filter(|(o, t)| is_attack_success(rule, o, t))
        .count();
    Ok(hits as f64 / outputs.len() as f64)
}

pub fn exact_match(outputs: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<f64> {
    asr(outputs, targets, MatchRule::Exact)
}

/// Length-normalised sequence probability `exp(mean_t log P(y_t))` for one sample.
pub fn normalized_probability(e: &Tensor, head: &DecoderHead, target: &[usize]) -> Result<f64> {
    let lp = head.sequence_logprob(e, target)?;
    let mean = lp.iter().map(|&v| v as f64).sum::<f64>() / lp.len() as f64;
    Ok(mean.exp())
}

/// Mean normalised probability over a batch of embeddings. Serves as both
/// P_bkd and P_clean depending on the targets passed.
pub fn p_bkd(embeddings: &[Tensor], head: &DecoderHead, targets: &[Vec<usize>]) -> Result<f64> {
    check_pair(embeddings, targets)?;
    let mut total = 0.0;
    for (e, t) in embeddings.iter().zip(targets) {
        total += normalized_probability(e, head, t)?;
    }
    Ok(total / embeddings.len() as f64)
}

/// Partial-credit accuracy `min(#matches / 3, 1)`.
pub fn vqa_accuracy<T: PartialEq>(answer: &T, ground_truths: &[T]) -> f64 {
    let hits = ground_truths.iter().filter(|g| *g == answer).count();
    (hits as f64 / 3.0).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiderScore {
    pub score: f64,
    /// Per-level scores for n = 1..4; `None` where the candidate has no n-grams.
    pub levels: [Option<f64>; 4],
    pub empty_candidate: bool,
}

fn ngrams<T: Ord + Clone>(s: &[T], n: usize) -> BTreeMap<Vec<T>, f64> {
    let mut m = BTreeMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Document frequencies of every n-gram (n = 1..4) over a corpus in which each
/// document is the reference set of one item.
#[derive(Debug, Clone)]
pub struct CiderCorpus<T> {
    docs: usize,
    df: BTreeMap<Vec<T>, usize>,
}

impl<T: Ord + Clone> CiderCorpus<T> {
    pub fn new(corpus: &[Vec<Vec<T>>]) -> Self {
        let mut df = BTreeMap::new();
        for doc in corpus {
            let mut seen = BTreeSet::new();
            for sent in doc {
                for n in 1..=4 {
                    seen.extend(ngrams(sent, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        CiderCorpus { docs: corpus.len(), df }
    }

    fn idf(&self, g: &[T]) -> f64 {
        let df = self.df.get(g).copied().unwrap_or(0);
        (self.docs as f64 / (1.0 + df as f64)).ln()
    }

    fn vector(&self, s: &[T], n: usize) -> BTreeMap<Vec<T>, f64> {
        let mut v = ngrams(s, n);
        let total: f64 = v.values().sum();
        for (g, w) in v.iter_mut() {
            *w = *w / total * self.idf(g);
        }
        v
    }

    /// TF-IDF n-gram cosine averaged over references, then over the n levels
    /// at which the candidate has n-grams.
    pub fn score(&self, candidate: &[T], references: &[Vec<T>]) -> CiderScore {
        let mut levels = [None; 4];
        if candidate.is_empty() || references.is_empty() {
            return CiderScore {
                score: 0.0,
                levels,
                empty_candidate: candidate.is_empty(),
            };
        }
        for n in 1..=4 {
            if candidate.len() < n {
                continue;
            }
            let gc = self.vector(candidate, n);
            let nc = gc.values().map(|w| w * w).sum::<f64>().sqrt();
            let mut sum = 0.0;
            for r in references {
                let gr = self.vector(r, n);
                let nr = gr.values().map(|w| w * w).sum::<f64>().sqrt();
                let dot: f64 = gc.iter().filter_map(|(g, w)| gr.get(g).map(|x| w * x)).sum();
                if nc > 0.0 && nr > 0.0 {
                    sum += dot / (nc * nr);
                }
            }
            levels[n - 1] = Some(sum / references.len() as f64);
        }
        let defined: Vec<f64> = levels.iter().flatten().copied().collect();
        CiderScore {
            score: defined.iter().sum::<f64>() / defined.len() as f64,
            levels,
            empty_candidate: false,
        }
    }
}

pub fn cider<T: Ord + Clone>(candidate: &[T], references: &[Vec<T>], corpus: &[Vec<Vec<T>>]) -> CiderScore {
    CiderCorpus::new(corpus).score(candidate, references)
}

fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with β = 1.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A zero denominator occurred somewhere.
    pub degenerate: bool,
}

impl Prf1 {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let mut degenerate = false;
        let mut ratio = |a: usize, b: usize| {
            if b == 0 {
                degenerate = true;
                0.0
            } else {
                a as f64 / b as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate = true;
            0.0
        };
        Prf1 {
            precision,
            recall,
            f1,
            degenerate,
        }
    }
}

/// Precision/recall/F1 with label `true` as the positive class.
pub fn prf1(predictions: &[bool], labels: &[bool]) -> Prf1 {
    assert_eq!(predictions.len(), labels.len(), "prediction/label length mismatch");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Prf1::from_counts(tp, fp, fn_)
}

/// One row of the Table-1-style summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub asr: f64,
    pub p_bkd: f64,
    pub p_clean: f64,
    pub exact_match: f64,
    pub cider: f64,
    pub rouge_l: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asr_counts() {
        let t = vec![vec![1, 2]; 8];
        let mut o = vec![vec![0]; 8];
        o[1] = vec![1, 2];
        o[4] = vec![1, 2];
        o[7] = vec![1, 2];
        assert_eq!(asr(&o, &t, MatchRule::Exact).unwrap(), 0.375);
        assert!(matches!(asr(&[], &[], MatchRule::Exact), Err(MetricsError::Empty)));
    }

    #[test]
    fn vqa_partial_credit() {
        let gts: Vec<&str> = vec!["red", "red", "blue", "blue", "blue", "x", "y", "z", "w", "v"];
        assert!((vqa_accuracy(&"red", &gts) - 2.0 / 3.0).abs() < 1e-15);
        let five = vec!["a"; 5];
        assert_eq!(vqa_accuracy(&"a", &five), 1.0);
        assert_eq!(vqa_accuracy(&"q", &gts), 0.0);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&['a', 'b', 'c', 'd'], &['a', 'c', 'd']), 6.0 / 7.0);
        assert_eq!(rouge_l(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]), 0.0);
    }

    #[test]
    fn prf1_cases() {
        let r = prf1(&[true; 4], &[true, false, true, false]);
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let z = prf1(&[false, false], &[false, false]);
        assert!(z.degenerate && z.f1 == 0.0);
    }
}
