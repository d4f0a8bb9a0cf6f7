use crate::error::{Error, Result};
use crate::seqdata::EventSequence;

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += avg_rank * idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Distance between two event sequences on the same horizon: the shorter one
/// is padded with the horizon `T`, then sorted times are matched in order
/// and `Σ |a_i − b_i|` is returned.
pub fn wasserstein_seq_distance(a: &EventSequence, b: &EventSequence) -> Result<f64> {
    if a.horizon() != b.horizon() {
        return Err(Error::Validation(format!("horizons differ: {} vs {}", a.horizon(), b.horizon())));
    }
    let t = a.horizon();
    let n = a.len().max(b.len());
    let at = |s: &EventSequence, i: usize| s.times().get(i).copied().unwrap_or(t);
    Ok((0..n).map(|i| (at(a, i) - at(b, i)).abs()).sum())
}

/// Mean and standard error (`sample std / √n`; 0 for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean of the last `ceil(fraction · len)` finite values of a series,
/// counted over the full series length.
pub fn tail_mean(series: &[Option<f64>], fraction: f64) -> Option<f64> {
    let take = ((series.len() as f64) * fraction).ceil() as usize;
    let tail: Vec<f64> = series[series.len() - take.min(series.len())..].iter().filter_map(|v| *v).collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}
