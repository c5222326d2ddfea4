//! Multi-label F1, ROC AUC, corpus BLEU and outcome-class accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Mean over labels that occur in the gold or predicted sets.
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Per-label F1 weighted by gold support.
    pub weighted_f1: f64,
    /// `None` for labels absent from both gold and predictions.
    pub per_label: Vec<Option<f64>>,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// F1 over k-hot rows. Micro F1 is 1 when neither side has any positive.
pub fn f1_scores(gold: &[Vec<bool>], pred: &[Vec<bool>]) -> F1Scores {
    assert_eq!(gold.len(), pred.len(), "gold and predictions differ in length");
    let n_labels = gold.first().map_or(0, Vec::len);
    let mut tp = vec![0usize; n_labels];
    let mut fp = vec![0usize; n_labels];
    let mut fn_ = vec![0usize; n_labels];
    for (g, p) in gold.iter().zip(pred) {
        assert_eq!(g.len(), n_labels);
        assert_eq!(p.len(), n_labels);
        for j in 0..n_labels {
            match (g[j], p[j]) {
                (true, true) => tp[j] += 1,
                (false, true) => fp[j] += 1,
                (true, false) => fn_[j] += 1,
                (false, false) => {}
            }
        }
    }
    let per_label: Vec<Option<f64>> = (0..n_labels).map(|j| f1(tp[j], fp[j], fn_[j])).collect();
    let present: Vec<f64> = per_label.iter().flatten().copied().collect();
    let macro_f1 = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let support: Vec<usize> = (0..n_labels).map(|j| tp[j] + fn_[j]).collect();
    let total: usize = support.iter().sum();
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        (0..n_labels).map(|j| per_label[j].unwrap_or(0.0) * support[j] as f64).sum::<f64>() / total as f64
    };
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum()).unwrap_or(1.0);
    F1Scores { macro_f1, micro_f1, weighted_f1, per_label }
}

/// One-hot rows for single-label classes.
pub fn one_hot(classes: &[usize], n: usize) -> Vec<Vec<bool>> {
    classes
        .iter()
        .map(|&c| {
            let mut v = vec![false; n];
            v[c] = true;
            v
        })
        .collect()
}

/// Area under the ROC curve via the rank-sum statistic with average ranks for
/// ties. `None` when either class is missing.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AucScores {
    /// Mean over labels with both positive and negative instances.
    pub macro_auc: Option<f64>,
    /// AUC over all flattened `(instance, label)` pairs.
    pub micro_auc: Option<f64>,
    pub weighted_auc: Option<f64>,
}

/// One-vs-rest AUC per label over rows of gold k-hot vectors and scores.
pub fn auc_scores(gold: &[Vec<bool>], scores: &[Vec<f64>]) -> AucScores {
    assert_eq!(gold.len(), scores.len());
    let n_labels = gold.first().map_or(0, Vec::len);
    let mut per = Vec::new();
    for j in 0..n_labels {
        let y: Vec<bool> = gold.iter().map(|g| g[j]).collect();
        let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        if let Some(a) = roc_auc(&s, &y) {
            per.push((a, y.iter().filter(|&&b| b).count()));
        }
    }
    let macro_auc = (!per.is_empty()).then(|| per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64);
    let support: usize = per.iter().map(|p| p.1).sum();
    let weighted_auc =
        (!per.is_empty()).then(|| per.iter().map(|&(a, n)| a * n as f64).sum::<f64>() / support as f64);
    let flat_y: Vec<bool> = gold.iter().flatten().copied().collect();
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    AucScores { macro_auc, micro_auc: roc_auc(&flat_s, &flat_y), weighted_auc }
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 on a 0-100 scale, one reference per hypothesis.
/// Precisions for n = 2..4 use add-one smoothing; unigram precision does not.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> f64 {
    assert_eq!(hypotheses.len(), references.len());
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    100.0 * bp * (log_p / 4.0).exp()
}

/// Fraction of positions where `pred == gold`.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Option<f64> {
    assert_eq!(pred.len(), gold.len());
    if gold.is_empty() {
        return None;
    }
    Some(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64)
}
