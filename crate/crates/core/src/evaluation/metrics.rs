use std::collections::BTreeSet;

/// Indices of the `k` highest scores, ties broken by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `|top_k ∩ actual| / min(k, |actual|)`; `None` for an empty actual set.
pub fn precision_at_k(scores: &[f64], actual: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if actual.is_empty() || k == 0 {
        return None;
    }
    let hits = top_k(scores, k).iter().filter(|i| actual.contains(i)).count();
    Some(hits as f64 / k.min(actual.len()) as f64)
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}
