use std::fmt::Write as _;

use serde::Serialize;

use super::mean_std;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalCell {
    /// Cell key such as `th=8` or `k=5`.
    pub key: String,
    pub mean: f64,
    /// Sample standard deviation over folds, present only with 2+ folds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    /// Evaluated samples behind the cell.
    pub count: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<f64>,
}

impl EvalCell {
    pub fn single(key: impl Into<String>, value: f64, count: usize) -> Self {
        Self {
            key: key.into(),
            mean: value,
            std: None,
            count,
            folds: Vec::new(),
        }
    }

    pub fn from_folds(key: impl Into<String>, folds: Vec<f64>, count: usize) -> Self {
        let (mean, std) = mean_std(&folds);
        Self {
            key: key.into(),
            mean,
            std,
            count,
            folds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: String,
    pub variant: String,
    pub cells: Vec<EvalCell>,
}

#[derive(Serialize)]
struct Line<'a> {
    metric: &'a str,
    variant: &'a str,
    #[serde(flatten)]
    cell: &'a EvalCell,
}

impl EvalReport {
    pub fn new(metric: impl Into<String>, variant: impl Into<String>) -> Self {
        Self {
            metric: metric.into(),
            variant: variant.into(),
            cells: Vec::new(),
        }
    }

    pub fn cell(&self, key: &str) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.key == key)
    }

    /// One JSON object per cell.
    pub fn to_jsonl(&self) -> String {
        self.cells
            .iter()
            .map(|cell| {
                serde_json::to_string(&Line {
                    metric: &self.metric,
                    variant: &self.variant,
                    cell,
                })
                .expect("report serializes")
                    + "\n"
            })
            .collect()
    }

    /// Fixed-width table of several reports sharing cell keys, one row per
    /// report.
    pub fn table(reports: &[EvalReport]) -> String {
        let mut keys: Vec<&str> = Vec::new();
        for r in reports {
            for c in &r.cells {
                if !keys.contains(&c.key.as_str()) {
                    keys.push(&c.key);
                }
            }
        }
        let mut out = format!("{:<28}", "variant");
        for k in &keys {
            let _ = write!(out, " {k:>16}");
        }
        out.push('\n');
        for r in reports {
            let _ = write!(out, "{:<28}", r.variant);
            for k in &keys {
                let text = match r.cell(k) {
                    Some(EvalCell { mean, std: Some(s), .. }) => format!("{:.2}±{:.2}", mean * 100.0, s * 100.0),
                    Some(c) => format!("{:.2}", c.mean * 100.0),
                    None => "-".into(),
                };
                let _ = write!(out, " {text:>16}");
            }
            out.push('\n');
        }
        out
    }
}
