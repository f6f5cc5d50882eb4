//! Classification and attention-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEPARABILITY_BINS: usize = 50;
pub const DEFAULT_TOP_K: usize = 5;

/// ROC-AUC via the Mann-Whitney rank statistic; tied scores share their
/// average rank. `None` when one class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Fraction of the `k` highest-scoring items that are positive; ties keep
/// the earlier index. `k` is capped at the number of items.
pub fn precision_at_k(scores: &[f64], labels: &[bool], k: usize) -> f64 {
    let k = k.min(scores.len());
    if k == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order[..k].iter().filter(|&&i| labels[i]).count() as f64 / k as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretMetrics {
    /// Pooled over every edge of every graph.
    pub edge_auc: Option<f64>,
    /// Averaged over graphs.
    pub precision_at_k: f64,
}

/// Edge attention against ground-truth masks, one entry per graph.
pub fn interpret_metrics(alpha_e: &[Vec<f64>], masks: &[Option<Vec<bool>>], k: usize) -> Result<InterpretMetrics> {
    if alpha_e.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            op: "interpret_metrics",
            detail: format!("{} attention vectors, {} masks", alpha_e.len(), masks.len()),
        });
    }
    if alpha_e.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut prec = 0.0;
    for (a, m) in alpha_e.iter().zip(masks) {
        let m = m.as_ref().ok_or(Error::MissingMask)?;
        if m.len() != a.len() {
            return Err(Error::MaskLength { expected: a.len(), found: m.len() });
        }
        all_scores.extend_from_slice(a);
        all_labels.extend_from_slice(m);
        prec += precision_at_k(a, m, k);
    }
    Ok(InterpretMetrics {
        edge_auc: roc_auc(&all_scores, &all_labels),
        precision_at_k: prec / alpha_e.len() as f64,
    })
}

/// Attention histograms of background vs explanation edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub background: Vec<usize>,
    pub explanation: Vec<usize>,
    /// `Σ_b min(p_b, q_b)` of the normalised histograms.
    pub overlap: f64,
}

fn bin_of(a: f64) -> usize {
    ((a.clamp(0.0, 1.0) * SEPARABILITY_BINS as f64) as usize).min(SEPARABILITY_BINS - 1)
}

pub fn separability_report(alpha_e: &[Vec<f64>], masks: &[Option<Vec<bool>>]) -> Result<Separability> {
    let mut background = vec![0usize; SEPARABILITY_BINS];
    let mut explanation = vec![0usize; SEPARABILITY_BINS];
    for (a, m) in alpha_e.iter().zip(masks) {
        let m = m.as_ref().ok_or(Error::MissingMask)?;
        if m.len() != a.len() {
            return Err(Error::MaskLength { expected: a.len(), found: m.len() });
        }
        for (&v, &is_gt) in a.iter().zip(m) {
            if is_gt {
                explanation[bin_of(v)] += 1;
            } else {
                background[bin_of(v)] += 1;
            }
        }
    }
    let nb: usize = background.iter().sum();
    let ne: usize = explanation.iter().sum();
    let overlap = if nb == 0 || ne == 0 {
        0.0
    } else {
        background
            .iter()
            .zip(&explanation)
            .map(|(&b, &e)| (b as f64 / nb as f64).min(e as f64 / ne as f64))
            .sum()
    };
    Ok(Separability { background, explanation, overlap })
}

impl Separability {
    /// `bin_left,count_background,count_explanation` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,count_background,count_explanation\n");
        for b in 0..SEPARABILITY_BINS {
            let left = b as f64 / SEPARABILITY_BINS as f64;
            out.push_str(&format!("{left},{},{}\n", self.background[b], self.explanation[b]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    if xs.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Index of the largest entry; ties keep the first.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
