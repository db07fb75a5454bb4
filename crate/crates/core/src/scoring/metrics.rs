use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Proportion floor applied before the log ratio in [`psi`].
pub const PSI_FLOOR: f64 = 1e-6;

/// Mann-Whitney ROC AUC with midranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(u8::from(pos > 0)));
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
        // Ranks are 1-based; the tie group i..=j shares their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Score histogram on bins whose inner edges are quantiles of a reference
/// sample. Bin `i` holds scores `s` with `edges[i-1] <= s < edges[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub edges: Vec<f64>,
    pub proportions: Vec<f64>,
}

impl ScoreDistribution {
    /// Reference distribution with `bins` quantile bins (proportions near
    /// `1/bins` unless the sample has ties).
    pub fn reference(scores: &[f64], bins: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("empty reference sample".into()));
        }
        if bins < 2 {
            return Err(Error::Config(format!("psi needs at least 2 bins, got {bins}")));
        }
        check_finite(scores)?;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let edges = (1..bins).map(|i| sorted[(i * n / bins).min(n - 1)]).collect();
        Self::on_edges(edges, scores)
    }

    /// Histogram of `scores` on fixed `edges`.
    pub fn on_edges(edges: Vec<f64>, scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("empty score sample".into()));
        }
        check_finite(scores)?;
        let mut counts = vec![0usize; edges.len() + 1];
        for s in scores {
            counts[edges.partition_point(|e| e <= s)] += 1;
        }
        let n = scores.len() as f64;
        Ok(Self {
            proportions: counts.into_iter().map(|c| c as f64 / n).collect(),
            edges,
        })
    }

    pub fn bins(&self) -> usize {
        self.proportions.len()
    }

    /// PSI of `current` scores against this distribution's bins.
    pub fn psi(&self, current: &[f64]) -> Result<f64> {
        let cur = Self::on_edges(self.edges.clone(), current)?;
        Ok(psi_of_proportions(&self.proportions, &cur.proportions))
    }
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok(())
}

/// `sum (c - r) ln(c / r)` with both proportions floored at [`PSI_FLOOR`].
pub fn psi_of_proportions(reference: &[f64], current: &[f64]) -> f64 {
    reference
        .iter()
        .zip(current)
        .map(|(&r, &c)| {
            let (r, c) = (r.max(PSI_FLOOR), c.max(PSI_FLOOR));
            (c - r) * (c / r).ln()
        })
        .sum()
}

/// Population stability index of `current` against decile-style bins of
/// `reference`.
pub fn psi(reference: &[f64], current: &[f64], bins: usize) -> Result<f64> {
    ScoreDistribution::reference(reference, bins)?.psi(current)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthAuc {
    pub month: u32,
    pub n: usize,
    pub positives: usize,
    /// `None` when the month has a single class.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlyReport {
    pub months: Vec<MonthAuc>,
    /// Unweighted mean over months with both classes.
    pub average: Option<f64>,
    /// Sample standard deviation of the monthly values.
    pub std: Option<f64>,
}

impl MonthlyReport {
    pub fn skipped(&self) -> Vec<u32> {
        self.months.iter().filter(|m| m.auc.is_none()).map(|m| m.month).collect()
    }
}

/// ROC AUC per month plus its unweighted average.
pub fn monthly_auc(scores: &[f64], labels: &[u8], months: &[u32]) -> Result<MonthlyReport> {
    if scores.len() != labels.len() || scores.len() != months.len() {
        return Err(Error::InvalidInput("scores, labels and months differ in length".into()));
    }
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &l), &m) in scores.iter().zip(labels).zip(months) {
        let g = groups.entry(m).or_default();
        g.0.push(s);
        g.1.push(l);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (month, (s, l)) in groups {
        let auc = match roc_auc(&s, &l) {
            Ok(a) => Some(a),
            Err(Error::SingleClass(_)) => {
                tracing::warn!(month, "single-class month skipped");
                None
            }
            Err(e) => return Err(e),
        };
        out.push(MonthAuc {
            month,
            n: l.len(),
            positives: l.iter().filter(|&&x| x != 0).count(),
            auc,
        });
    }
    let vals: Vec<f64> = out.iter().filter_map(|m| m.auc).collect();
    let (average, std) = if vals.is_empty() {
        (None, None)
    } else {
        let (m, s) = crate::evaluation::mean_std(&vals);
        (Some(m), s)
    };
    Ok(MonthlyReport { months: out, average, std })
}
