use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::insurance::POLICY_FIELDS;
use crate::corpus::{encode_history, ApplicationRecord, Event, PatientHistory, Vocabulary};
use crate::embedding::{embed_samples, EmbedOptions, GroupAverages};
use crate::encoder::EncoderModel;
use crate::{Error, Result};

pub const MISSING: &str = "missing";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Policy one-hots plus one-hot applicant fields and anamnesis indicators.
    Base,
    /// Policy one-hots plus a patient embedding of the applicant.
    Replacement,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Base => "base",
            Scheme::Replacement => "replacement",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Scheme::Base),
            "replacement" => Ok(Scheme::Replacement),
            _ => Err(Error::Config(format!("unknown scheme {s:?} (base|replacement)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    /// Category levels; the last one is always `missing`.
    OneHot { levels: Vec<String> },
    /// Indicator per level, several may be set; last one is `missing`.
    MultiHot { levels: Vec<String> },
    Embedding { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub name: String,
    #[serde(flatten)]
    pub kind: BlockKind,
}

impl FeatureBlock {
    pub fn width(&self) -> usize {
        match &self.kind {
            BlockKind::OneHot { levels } | BlockKind::MultiHot { levels } => levels.len(),
            BlockKind::Embedding { dim } => *dim,
        }
    }

    fn level_index(&self, value: &str) -> usize {
        match &self.kind {
            BlockKind::OneHot { levels } | BlockKind::MultiHot { levels } => {
                // `missing` is last; levels before it are sorted.
                let known = &levels[..levels.len() - 1];
                known.binary_search_by(|l| l.as_str().cmp(value)).unwrap_or(known.len())
            }
            BlockKind::Embedding { .. } => unreachable!("embedding blocks have no levels"),
        }
    }
}

fn levels(values: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = values.into_iter().collect();
    v.push(MISSING.into());
    v
}

pub fn age_decade(age: u32) -> String {
    format!("{}0s", age.min(99) / 10)
}

/// Ordered feature blocks derived from training applications.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub scheme: Scheme,
    pub blocks: Vec<FeatureBlock>,
}

impl FeatureSchema {
    /// Levels come from `train` only; `embedding_dim` is required for the
    /// replacement scheme.
    pub fn fit(train: &[ApplicationRecord], scheme: Scheme, embedding_dim: Option<usize>) -> Result<Self> {
        for r in train {
            check_policy(r)?;
        }
        let mut blocks = Vec::new();
        for (field, _) in POLICY_FIELDS {
            let seen = train.iter().filter_map(|r| r.policy.get(field).cloned()).collect();
            blocks.push(FeatureBlock {
                name: format!("policy.{field}"),
                kind: BlockKind::OneHot { levels: levels(seen) },
            });
        }
        match scheme {
            Scheme::Base => {
                let genders = train.iter().map(|r| r.gender.as_str().to_string()).collect();
                let decades = train.iter().map(|r| age_decade(r.age_years)).collect();
                let codes = train
                    .iter()
                    .flat_map(|r| r.anamnesis.iter().map(|c| c.as_str().to_string()))
                    .collect();
                blocks.push(FeatureBlock {
                    name: "gender".into(),
                    kind: BlockKind::OneHot { levels: levels(genders) },
                });
                blocks.push(FeatureBlock {
                    name: "age_decade".into(),
                    kind: BlockKind::OneHot { levels: levels(decades) },
                });
                blocks.push(FeatureBlock {
                    name: "anamnesis".into(),
                    kind: BlockKind::MultiHot { levels: levels(codes) },
                });
            }
            Scheme::Replacement => {
                let dim = embedding_dim
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::Config("replacement scheme needs an embedding dimension".into()))?;
                blocks.push(FeatureBlock {
                    name: "embedding".into(),
                    kind: BlockKind::Embedding { dim },
                });
            }
        }
        Ok(Self { scheme, blocks })
    }

    pub fn width(&self) -> usize {
        self.blocks.iter().map(FeatureBlock::width).sum()
    }

    /// Start column of each block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = at;
                at += b.width();
                o
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Row-major feature matrix for `records` on this schema.
    pub fn assemble(&self, records: &[ApplicationRecord], source: Option<&EmbeddingSource>) -> Result<Vec<f64>> {
        let width = self.width();
        let offsets = self.offsets();
        let mut x = vec![0.0; records.len() * width];
        for r in records {
            check_policy(r)?;
        }
        for (block, &off) in self.blocks.iter().zip(&offsets) {
            if let BlockKind::Embedding { dim } = block.kind {
                let source = source
                    .ok_or_else(|| Error::Config("replacement features need an embedding source".into()))?;
                let embs = source.embed(records)?;
                for (i, e) in embs.iter().enumerate() {
                    if e.len() != dim {
                        return Err(Error::SchemaMismatch {
                            expected: format!("embedding dim {dim}"),
                            found: format!("embedding dim {}", e.len()),
                        });
                    }
                    for (j, v) in e.iter().enumerate() {
                        x[i * width + off + j] = f64::from(*v);
                    }
                }
                continue;
            }
            for (i, r) in records.iter().enumerate() {
                let row = &mut x[i * width + off..i * width + off + block.width()];
                match block.name.as_str() {
                    "gender" => row[block.level_index(r.gender.as_str())] = 1.0,
                    "age_decade" => row[block.level_index(&age_decade(r.age_years))] = 1.0,
                    "anamnesis" => {
                        for c in &r.anamnesis {
                            row[block.level_index(c.as_str())] = 1.0;
                        }
                    }
                    name => {
                        let field = name.strip_prefix("policy.").unwrap_or(name);
                        let idx = r
                            .policy
                            .get(field)
                            .map_or(block.width() - 1, |v| block.level_index(v));
                        row[idx] = 1.0;
                    }
                }
            }
        }
        Ok(x)
    }
}

fn check_policy(r: &ApplicationRecord) -> Result<()> {
    match r.policy.keys().find(|k| !POLICY_FIELDS.iter().any(|(f, _)| f == k)) {
        Some(k) => Err(Error::UnknownPolicyField(k.clone())),
        None => Ok(()),
    }
}

/// Derives the schema from `records` and assembles them on it.
pub fn assemble_features(
    records: &[ApplicationRecord],
    scheme: Scheme,
    source: Option<&EmbeddingSource>,
) -> Result<(Vec<f64>, FeatureSchema)> {
    let schema = FeatureSchema::fit(records, scheme, source.map(EmbeddingSource::dim))?;
    let x = schema.assemble(records, source)?;
    Ok((x, schema))
}

/// Applicant embeddings for the replacement scheme: the trained encoder run
/// on a pseudo-history, with group averages standing in for applicants who
/// declare no diseases.
pub struct EmbeddingSource<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
    pub averages: &'a GroupAverages,
}

impl<'a> EmbeddingSource<'a> {
    pub fn new(model: &'a EncoderModel, vocab: &'a Vocabulary, averages: &'a GroupAverages) -> Result<Self> {
        if model.vocab_hash != vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: vocab.hash(),
                found: model.vocab_hash.clone(),
            });
        }
        let d = averages.strategy.dim(model.config.d);
        if averages.dim != d {
            return Err(Error::InvalidInput(format!(
                "group averages have dimension {}, model pools to {d}",
                averages.dim
            )));
        }
        Ok(Self { model, vocab, averages })
    }

    pub fn dim(&self) -> usize {
        self.averages.dim
    }

    pub fn embed(&self, records: &[ApplicationRecord]) -> Result<Vec<Vec<f32>>> {
        let enc = self.model.config.encode_options();
        let mut out: Vec<Option<Vec<f32>>> = vec![None; records.len()];
        let mut idx = Vec::new();
        let mut samples = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.anamnesis.is_empty() {
                out[i] = Some(self.averages.lookup(r.gender, r.age_years).to_vec());
            } else {
                idx.push(i);
                samples.push(encode_history(&pseudo_history(r), self.vocab, enc));
            }
        }
        let embs = embed_samples(self.model, &samples, EmbedOptions::from(self.averages.strategy))?;
        for (i, e) in idx.into_iter().zip(embs) {
            out[i] = Some(e);
        }
        Ok(out.into_iter().map(|e| e.expect("every record embedded")).collect())
    }
}

/// Applications carry no dates, so declared codes are placed on one day in
/// lexicographic order.
pub fn pseudo_history(r: &ApplicationRecord) -> PatientHistory {
    let date = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let mut codes = r.anamnesis.clone();
    codes.sort();
    PatientHistory::new(
        r.app_id.clone(),
        r.gender,
        r.age_years,
        codes.into_iter().map(|code| Event { date, code }).collect(),
    )
}
