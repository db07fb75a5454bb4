//! Ridge regression on standardized features with an unpenalized intercept.

use ehrseq_tensor::gemm::matmul;
use serde::{Deserialize, Serialize};

use crate::linalg::solve_spd;
use crate::{Error, Result};

/// Multi-output ridge solution: `y_j = ((x - mean) / std) . w_j + b_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeSolution {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Row-major `width x outputs`.
    pub weights: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub width: usize,
    pub outputs: usize,
}

fn standardize(x: &[f64], n: usize, p: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut means = vec![0.0; p];
    for row in x.chunks(p) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut vars = vec![0.0; p];
    for row in x.chunks(p) {
        for j in 0..p {
            vars[j] += (row[j] - means[j]).powi(2);
        }
    }
    // Zero-variance columns keep unit scale so they standardize to zero.
    let stds: Vec<f64> = vars
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 { s } else { 1.0 }
        })
        .collect();
    let z = x
        .chunks(p)
        .flat_map(|row| (0..p).map(|j| (row[j] - means[j]) / stds[j]).collect::<Vec<_>>())
        .collect();
    (z, means, stds)
}

/// Minimizes `|Z w_j + b_j - y_j|^2 + lambda |w_j|^2` for each output
/// column of `y` (row-major `n x outputs`), where `Z` is `x` (row-major
/// `n x p`) standardized per column. Solved through the Cholesky factor of
/// `Z^T Z + lambda I`.
pub fn fit_ridge(x: &[f64], n: usize, p: usize, y: &[f64], outputs: usize, lambda: f64) -> Result<RidgeSolution> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("ridge lambda must be positive, got {lambda}")));
    }
    if n < 2 || x.len() != n * p || y.len() != n * outputs {
        return Err(Error::InvalidInput(format!(
            "ridge needs at least 2 rows with {p} features and {outputs} outputs"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite ridge input".into()));
    }
    let (z, means, stds) = standardize(x, n, p);
    let mut ymean = vec![0.0; outputs];
    for row in y.chunks(outputs) {
        for (m, v) in ymean.iter_mut().zip(row) {
            *m += v;
        }
    }
    ymean.iter_mut().for_each(|m| *m /= n as f64);
    let yc: Vec<f64> = y
        .chunks(outputs)
        .flat_map(|row| row.iter().zip(&ymean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    let mut gram = vec![0.0; p * p];
    matmul(&z, true, &z, false, &mut gram, p, n, p, false);
    for j in 0..p {
        gram[j * p + j] += lambda;
    }
    let mut rhs = vec![0.0; p * outputs];
    matmul(&z, true, &yc, false, &mut rhs, p, n, outputs, false);
    let weights = solve_spd(&gram, p, &rhs, outputs)?;
    Ok(RidgeSolution {
        means,
        stds,
        weights,
        intercepts: ymean,
        width: p,
        outputs,
    })
}

impl RidgeSolution {
    /// Row-major `rows x outputs` predictions for row-major `x`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.width;
        if p == 0 || x.len() % p != 0 {
            return Err(Error::InvalidInput(format!("rows must have {p} features")));
        }
        let n = x.len() / p;
        let z: Vec<f64> = x
            .chunks(p)
            .flat_map(|row| (0..p).map(|j| (row[j] - self.means[j]) / self.stds[j]).collect::<Vec<_>>())
            .collect();
        let mut out = vec![0.0; n * self.outputs];
        matmul(&z, false, &self.weights, false, &mut out, n, p, self.outputs, false);
        for row in out.chunks_mut(self.outputs) {
            for (v, b) in row.iter_mut().zip(&self.intercepts) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Single-output ridge scorer tied to a feature schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub schema_hash: String,
    /// Identifier of the months the model was fitted on, e.g. `months 0-5`.
    pub period: String,
}

pub fn ridge_fit(x: &[f64], n: usize, labels: &[u8], lambda: f64, schema_hash: &str, period: &str) -> Result<RidgeModel> {
    if let Some(&only) = labels.first() {
        if labels.iter().all(|&l| l == only) {
            return Err(Error::SingleClass(only));
        }
    }
    let p = if n == 0 { 0 } else { x.len() / n };
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let sol = fit_ridge(x, n, p, &y, 1, lambda)?;
    Ok(RidgeModel {
        weights: sol.weights,
        intercept: sol.intercepts[0],
        lambda,
        means: sol.means,
        stds: sol.stds,
        schema_hash: schema_hash.to_string(),
        period: period.to_string(),
    })
}

impl RidgeModel {
    pub fn width(&self) -> usize {
        self.weights.len()
    }

    /// Scores for row-major `x`; refuses features built on another schema.
    pub fn predict(&self, x: &[f64], schema_hash: &str) -> Result<Vec<f64>> {
        if schema_hash != self.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: schema_hash.to_string(),
                found: self.schema_hash.clone(),
            });
        }
        let p = self.width();
        if p == 0 || x.len() % p != 0 {
            return Err(Error::InvalidInput(format!("rows must have {p} features")));
        }
        Ok(x.chunks(p).map(|row| self.score_row(row)).collect())
    }

    pub fn score_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(&self.weights)
                .enumerate()
                .map(|(j, (v, w))| (v - self.means[j]) / self.stds[j] * w)
                .sum::<f64>()
    }
}
