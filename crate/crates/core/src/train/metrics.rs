//! Rank-based average precision.

use crate::tensor::Tensor;

/// All-point average precision: the mean, over positives, of the precision
/// at each positive's rank. Scores are sorted descending; ties keep input
/// order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "scores and labels differ in length");
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Per-class APs and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// Indexed by class. `None` for the background class and for classes
    /// with no positive frame.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes that have an AP; NaN when none do.
    pub mean: f64,
    /// Non-background classes skipped for lack of positives.
    pub skipped: Vec<usize>,
}

/// Class index treated as background and left out of the mean.
pub const BACKGROUND_CLASS: usize = 0;

/// One-vs-rest AP for every non-background class of `scores` (`[N × K]`).
pub fn mean_ap(scores: &Tensor, labels: &[usize]) -> ApReport {
    let (n, k) = scores.as_matrix_dims();
    assert_eq!(n, labels.len(), "one label per score row");
    let mut per_class = vec![None; k];
    let mut skipped = Vec::new();
    let mut column = vec![0.0; n];
    let mut positives = vec![false; n];
    for (class, ap) in per_class.iter_mut().enumerate().skip(BACKGROUND_CLASS + 1) {
        for r in 0..n {
            column[r] = scores.data()[r * k + class];
            positives[r] = labels[r] == class;
        }
        *ap = average_precision(&column, &positives);
        if ap.is_none() {
            skipped.push(class);
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApReport {
        per_class,
        mean,
        skipped,
    }
}
