//! Insurance risk scoring: feature assembly under the base and replacement
//! schemes, a ridge classifier, monthly ROC AUC and PSI drift monitoring.

mod features;
mod metrics;
mod ridge;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use features::{
    age_decade, assemble_features, pseudo_history, BlockKind, EmbeddingSource, FeatureBlock, FeatureSchema, Scheme,
    MISSING,
};
pub use metrics::{monthly_auc, psi, psi_of_proportions, roc_auc, MonthAuc, MonthlyReport, ScoreDistribution, PSI_FLOOR};
pub use ridge::{fit_ridge, ridge_fit, RidgeModel, RidgeSolution};

use crate::container;
use crate::corpus::ApplicationRecord;
use crate::{Error, Result};

pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
pub const PSI_BINS: usize = 10;
const ARTIFACT_KIND: &str = "ridge-scorer";

/// A fitted scorer: schema, ridge weights and the reference score
/// distribution used for drift monitoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringArtifact {
    pub schema: FeatureSchema,
    pub model: RidgeModel,
    pub reference: ScoreDistribution,
    /// Fingerprint of the encoder behind replacement features.
    pub encoder_hash: Option<String>,
}

impl ScoringArtifact {
    pub fn score(&self, records: &[ApplicationRecord], source: Option<&EmbeddingSource>) -> Result<Vec<f64>> {
        let x = self.schema.assemble(records, source)?;
        self.model.predict(&x, &self.schema.hash())
    }

    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        container::write_container(w, ARTIFACT_KIND, self, &[])
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (a, blobs): (Self, _) = container::read_container(r, ARTIFACT_KIND)?;
        if !blobs.is_empty() {
            return Err(Error::Container("scoring artifact carries unexpected blobs".into()));
        }
        if a.model.width() != a.schema.width() || a.model.schema_hash != a.schema.hash() {
            return Err(Error::SchemaMismatch {
                expected: a.schema.hash(),
                found: a.model.schema_hash.clone(),
            });
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// SHA-256 of the serialized artifact.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Splits applications into months before `boundary` and the rest.
pub fn split_by_month(records: &[ApplicationRecord], boundary: u32) -> (Vec<ApplicationRecord>, Vec<ApplicationRecord>) {
    records.iter().cloned().partition(|r| r.month < boundary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaResult {
    pub lambda: f64,
    pub average_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ScoringFit {
    pub artifact: ScoringArtifact,
    pub lambda: f64,
    pub grid: Vec<LambdaResult>,
    /// Monthly AUC of the selected model on the validation records.
    pub validation: MonthlyReport,
}

fn labels(records: &[ApplicationRecord]) -> Vec<u8> {
    records.iter().map(|r| r.claim).collect()
}

fn months(records: &[ApplicationRecord]) -> Vec<u32> {
    records.iter().map(|r| r.month).collect()
}

fn period_of(records: &[ApplicationRecord]) -> String {
    let lo = records.iter().map(|r| r.month).min().unwrap_or(0);
    let hi = records.iter().map(|r| r.month).max().unwrap_or(0);
    format!("months {lo}-{hi}")
}

/// Fits one ridge model per `lambdas` entry on `train`, keeps the one with
/// the best average monthly AUC on `valid` (first on ties) and records the
/// training-score distribution as the drift reference.
pub fn fit_scoring(
    train: &[ApplicationRecord],
    valid: &[ApplicationRecord],
    scheme: Scheme,
    source: Option<&EmbeddingSource>,
    lambdas: &[f64],
) -> Result<ScoringFit> {
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if valid.is_empty() {
        return Err(Error::InvalidInput("no validation applications".into()));
    }
    let dim = source.map(EmbeddingSource::dim);
    let schema = FeatureSchema::fit(train, scheme, dim)?;
    let hash = schema.hash();
    let xt = schema.assemble(train, source)?;
    let xv = schema.assemble(valid, source)?;
    let (yt, yv, mv) = (labels(train), labels(valid), months(valid));
    let period = period_of(train);
    let mut best: Option<(RidgeModel, MonthlyReport)> = None;
    let mut grid = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let model = ridge_fit(&xt, train.len(), &yt, lambda, &hash, &period)?;
        let report = monthly_auc(&model.predict(&xv, &hash)?, &yv, &mv)?;
        grid.push(LambdaResult {
            lambda,
            average_auc: report.average,
        });
        let better = match (&best, report.average) {
            (None, _) => true,
            (Some((_, b)), Some(a)) => b.average.is_none_or(|b| a > b),
            (Some(_), None) => false,
        };
        if better {
            best = Some((model, report));
        }
    }
    let (model, validation) = best.expect("non-empty grid");
    let reference = ScoreDistribution::reference(&model.predict(&xt, &hash)?, PSI_BINS)?;
    let encoder_hash = source.map(|s| crate::embedding::model_fingerprint(s.model));
    Ok(ScoringFit {
        lambda: model.lambda,
        artifact: ScoringArtifact {
            schema,
            model,
            reference,
            encoder_hash,
        },
        grid,
        validation,
    })
}

/// Monthly AUC of a fitted artifact on `records`.
pub fn monthly_eval(
    artifact: &ScoringArtifact,
    records: &[ApplicationRecord],
    source: Option<&EmbeddingSource>,
) -> Result<MonthlyReport> {
    let scores = artifact.score(records, source)?;
    monthly_auc(&scores, &labels(records), &months(records))
}
