//! Patient and token embeddings derived from a trained encoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::corpus::vocab::{TokenClass, Vocabulary};
use crate::corpus::{encode_history, EncodedSample, Gender, IcdCode, PatientHistory};
use crate::encoder::{predict_next_distributions, Batch, EncoderModel};
use crate::{Error, Result};

const EMBED_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    Cls,
    Mean,
    Max,
    ConcatMeanMax,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 4] = [Self::Cls, Self::Mean, Self::Max, Self::ConcatMeanMax];

    pub fn dim(self, d: usize) -> usize {
        match self {
            Self::ConcatMeanMax => 2 * d,
            _ => d,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cls => "cls",
            Self::Mean => "mean",
            Self::Max => "max",
            Self::ConcatMeanMax => "concat_mean_max",
        }
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s || (s == "cmm" && *p == Self::ConcatMeanMax))
            .ok_or_else(|| Error::Config(format!("unknown pooling strategy {s:?}")))
    }
}

/// Pools `vectors` (row-major `positions x d`) over positions whose `mask`
/// entry is set. `Cls` returns position 0 regardless of the mask.
pub fn pool(vectors: &[f32], d: usize, mask: &[bool], strategy: PoolingStrategy) -> Result<Vec<f32>> {
    if d == 0 || vectors.len() != mask.len() * d {
        return Err(Error::InvalidInput(format!(
            "{} values do not form {} rows of {d}",
            vectors.len(),
            mask.len()
        )));
    }
    let rows: Vec<&[f32]> = vectors
        .chunks(d)
        .zip(mask)
        .filter_map(|(r, &m)| m.then_some(r))
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("no non-PAD position to pool".into()));
    }
    let mean = || {
        let mut acc = vec![0f64; d];
        for r in &rows {
            for (a, v) in acc.iter_mut().zip(*r) {
                *a += *v as f64;
            }
        }
        acc.into_iter().map(|a| (a / rows.len() as f64) as f32).collect::<Vec<f32>>()
    };
    let max = || {
        let mut acc = vec![f32::NEG_INFINITY; d];
        for r in &rows {
            for (a, v) in acc.iter_mut().zip(*r) {
                *a = a.max(*v);
            }
        }
        acc
    };
    Ok(match strategy {
        PoolingStrategy::Cls => vectors[..d].to_vec(),
        PoolingStrategy::Mean => mean(),
        PoolingStrategy::Max => max(),
        PoolingStrategy::ConcatMeanMax => {
            let mut v = mean();
            v.extend(max());
            v
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEmbedding {
    pub patient_id: String,
    pub vector: Vec<f32>,
    pub strategy: PoolingStrategy,
    pub model_hash: String,
}

/// SHA-256 of the serialized checkpoint.
pub fn model_fingerprint(model: &EncoderModel) -> String {
    let mut buf = Vec::new();
    model.write_to(&mut buf).expect("writing to memory cannot fail");
    hex::encode(Sha256::digest(&buf))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedOptions {
    pub strategy: PoolingStrategy,
    /// Pool over event positions only, leaving out CLS, gender and age.
    pub events_only: bool,
}

impl From<PoolingStrategy> for EmbedOptions {
    fn from(strategy: PoolingStrategy) -> Self {
        Self {
            strategy,
            events_only: false,
        }
    }
}

/// Pooled vectors for already-encoded samples, one per sample.
pub fn embed_samples(model: &EncoderModel, samples: &[EncodedSample], opts: EmbedOptions) -> Result<Vec<Vec<f32>>> {
    let d = model.config.d;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EMBED_BATCH) {
        let batch = Batch::from_samples(chunk);
        let hidden = model.hidden(&batch)?;
        for (b, s) in chunk.iter().enumerate() {
            let rows = &hidden.data()[b * batch.len * d..(b + 1) * batch.len * d];
            let mask: Vec<bool> = (0..batch.len)
                .map(|i| i < s.length && !(opts.events_only && i < 3))
                .collect();
            let v = pool(rows, d, &mask, opts.strategy)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput("non-finite embedding".into()));
            }
            out.push(v);
        }
    }
    Ok(out)
}

pub fn patient_embeddings(
    model: &EncoderModel,
    patients: &[PatientHistory],
    v: &Vocabulary,
    opts: impl Into<EmbedOptions>,
) -> Result<Vec<PatientEmbedding>> {
    if model.vocab_hash != v.hash() {
        return Err(Error::VocabMismatch {
            expected: v.hash(),
            found: model.vocab_hash.clone(),
        });
    }
    let opts = opts.into();
    let enc = model.config.encode_options();
    let samples: Vec<EncodedSample> = patients.iter().map(|p| encode_history(p, v, enc)).collect();
    let hash = model_fingerprint(model);
    Ok(embed_samples(model, &samples, opts)?
        .into_iter()
        .zip(patients)
        .map(|(vector, p)| PatientEmbedding {
            patient_id: p.patient_id.clone(),
            vector,
            strategy: opts.strategy,
            model_hash: hash.clone(),
        })
        .collect())
}

pub fn patient_embedding(
    model: &EncoderModel,
    p: &PatientHistory,
    v: &Vocabulary,
    opts: impl Into<EmbedOptions>,
) -> Result<PatientEmbedding> {
    Ok(patient_embeddings(model, std::slice::from_ref(p), v, opts)?.remove(0))
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFilter {
    Icd,
    Age,
    Gender,
    Any,
}

impl FromStr for TokenFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icd" => Ok(Self::Icd),
            "age" => Ok(Self::Age),
            "gender" => Ok(Self::Gender),
            "any" => Ok(Self::Any),
            _ => Err(Error::Config(format!("unknown token filter {s:?}"))),
        }
    }
}

/// Tokens most cosine-similar to `query` in the static embedding table,
/// descending, query excluded. Ties keep id order.
pub fn nearest_tokens(
    model: &EncoderModel,
    v: &Vocabulary,
    query: &str,
    top_n: usize,
    restrict: TokenFilter,
) -> Result<Vec<(String, f64)>> {
    let q = v
        .id(query)
        .ok_or_else(|| Error::InvalidInput(format!("token {query:?} not in vocabulary")))?;
    let table = model.token_embeddings();
    let d = model.config.d;
    let row = |i: usize| &table.data()[i * d..(i + 1) * d];
    let qv = row(q);
    if cosine(qv, qv).is_none() {
        return Err(Error::InvalidInput(format!("token {query:?} has a zero embedding")));
    }
    let mut scored = Vec::new();
    let mut zero = 0;
    for i in 0..v.len() {
        let class = v.class_of(i);
        let allowed = match restrict {
            TokenFilter::Any => true,
            TokenFilter::Icd => class == TokenClass::Icd,
            TokenFilter::Age => class == TokenClass::Age,
            TokenFilter::Gender => class == TokenClass::Gender,
        };
        if i == q || !allowed {
            continue;
        }
        match cosine(qv, row(i)) {
            Some(s) => scored.push((i, s)),
            None => zero += 1,
        }
    }
    if zero > 0 {
        tracing::warn!(zero, "skipped zero-norm token embeddings");
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_n);
    Ok(scored
        .into_iter()
        .map(|(i, s)| (v.token(i).unwrap_or_default().to_string(), s))
        .collect())
}

/// Mean embeddings per (gender, age) and per (gender, decade), with a
/// global mean as the last fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAverages {
    pub strategy: PoolingStrategy,
    pub dim: usize,
    pub by_age: BTreeMap<(Gender, u32), Vec<f32>>,
    pub by_decade: BTreeMap<(Gender, u32), Vec<f32>>,
    pub global: Vec<f32>,
}

fn mean_of(vs: &[&[f32]], dim: usize) -> Vec<f32> {
    let mut acc = vec![0f64; dim];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(*v) {
            *a += *x as f64;
        }
    }
    acc.into_iter().map(|a| (a / vs.len() as f64) as f32).collect()
}

#[derive(Serialize, Deserialize)]
struct GroupHeader {
    strategy: PoolingStrategy,
    dim: usize,
    age_keys: Vec<(Gender, u32)>,
    decade_keys: Vec<(Gender, u32)>,
}

impl GroupAverages {
    /// Averages `(gender, age, vector)` items. Empty groups are omitted.
    pub fn from_items<'a>(
        strategy: PoolingStrategy,
        items: impl IntoIterator<Item = (Gender, u32, &'a [f32])>,
    ) -> Result<Self> {
        let mut by_age: BTreeMap<(Gender, u32), Vec<&[f32]>> = BTreeMap::new();
        let mut by_decade: BTreeMap<(Gender, u32), Vec<&[f32]>> = BTreeMap::new();
        let mut all = Vec::new();
        for (g, age, v) in items {
            let age = age.min(99);
            by_age.entry((g, age)).or_default().push(v);
            by_decade.entry((g, age / 10)).or_default().push(v);
            all.push(v);
        }
        let dim = all.first().map(|v| v.len()).ok_or_else(|| Error::InvalidInput("no embeddings to average".into()))?;
        if all.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidInput("embeddings of differing dimension".into()));
        }
        Ok(Self {
            strategy,
            dim,
            by_age: by_age.into_iter().map(|(k, vs)| (k, mean_of(&vs, dim))).collect(),
            by_decade: by_decade.into_iter().map(|(k, vs)| (k, mean_of(&vs, dim))).collect(),
            global: mean_of(&all, dim),
        })
    }

    /// Exact (gender, age) group, else (gender, decade), else global.
    pub fn lookup(&self, gender: Gender, age: u32) -> &[f32] {
        let age = age.min(99);
        self.by_age
            .get(&(gender, age))
            .or_else(|| self.by_decade.get(&(gender, age / 10)))
            .unwrap_or(&self.global)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = GroupHeader {
            strategy: self.strategy,
            dim: self.dim,
            age_keys: self.by_age.keys().copied().collect(),
            decade_keys: self.by_decade.keys().copied().collect(),
        };
        let mut blobs: Vec<&[f32]> = self.by_age.values().map(Vec::as_slice).collect();
        blobs.extend(self.by_decade.values().map(Vec::as_slice));
        blobs.push(&self.global);
        container::save(path, "group-averages", &header, &blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut blobs): (GroupHeader, _) = container::load(path, "group-averages")?;
        if blobs.len() != h.age_keys.len() + h.decade_keys.len() + 1 || blobs.iter().any(|b| b.len() != h.dim) {
            return Err(Error::Container("group average blobs do not match header".into()));
        }
        let global = blobs.pop().expect("checked length");
        let decades = blobs.split_off(h.age_keys.len());
        Ok(Self {
            strategy: h.strategy,
            dim: h.dim,
            by_age: h.age_keys.into_iter().zip(blobs).collect(),
            by_decade: h.decade_keys.into_iter().zip(decades).collect(),
            global,
        })
    }
}

pub fn average_group_embedding(
    model: &EncoderModel,
    patients: &[PatientHistory],
    v: &Vocabulary,
    strategy: PoolingStrategy,
) -> Result<GroupAverages> {
    let embs = patient_embeddings(model, patients, v, strategy)?;
    GroupAverages::from_items(
        strategy,
        patients
            .iter()
            .zip(&embs)
            .map(|(p, e)| (p.gender, p.age_years, e.vector.as_slice())),
    )
}

/// A disease family for risk curves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CodeGroup {
    Prefix(String),
    Codes(Vec<IcdCode>),
}

impl CodeGroup {
    /// In-vocabulary token ids of the group.
    pub fn resolve(&self, v: &Vocabulary) -> Result<BTreeSet<usize>> {
        let ids: BTreeSet<usize> = match self {
            CodeGroup::Prefix(p) => {
                let p = p.trim().to_ascii_uppercase();
                v.icd_range()
                    .filter(|&i| v.token(i).is_some_and(|t| t.starts_with(&p)))
                    .collect()
            }
            CodeGroup::Codes(cs) => cs.iter().filter_map(|c| v.icd_id(c)).collect(),
        };
        if ids.is_empty() {
            return Err(Error::InvalidInput(format!("code group {self:?} has no in-vocabulary code")));
        }
        Ok(ids)
    }
}

impl FromStr for CodeGroup {
    type Err = Error;

    /// A comma-separated list of codes, or a single prefix.
    fn from_str(s: &str) -> Result<Self> {
        if s.contains(',') {
            Ok(CodeGroup::Codes(s.split(',').map(IcdCode::parse).collect::<Result<_>>()?))
        } else {
            Ok(CodeGroup::Prefix(s.to_string()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskCurves {
    pub ages: Vec<u32>,
    pub male: Vec<f64>,
    pub female: Vec<f64>,
    /// Weighted by corpus gender frequencies from the vocabulary counts.
    pub averaged: Vec<f64>,
}

impl RiskCurves {
    pub fn for_gender(&self, g: Gender) -> &[f64] {
        match g {
            Gender::Male => &self.male,
            Gender::Female => &self.female,
        }
    }
}

/// Probability that the next code belongs to `group` for a patient with no
/// recorded events, per gender and age.
pub fn risk_curve(model: &EncoderModel, v: &Vocabulary, group: &CodeGroup, ages: RangeInclusive<u32>) -> Result<RiskCurves> {
    let ids = group.resolve(v)?;
    let ages: Vec<u32> = ages.map(|a| a.min(99)).collect();
    let mut curves = [Vec::new(), Vec::new()];
    for (gi, gender) in [Gender::Male, Gender::Female].into_iter().enumerate() {
        let prefixes: Vec<PatientHistory> = ages
            .iter()
            .map(|&a| PatientHistory::new("risk", gender, a, Vec::new()))
            .collect();
        curves[gi] = predict_next_distributions(model, &prefixes, v)?
            .iter()
            .map(|dist| ids.iter().map(|&i| dist[i]).sum::<f64>().min(1.0))
            .collect();
    }
    let (nm, nf) = (
        v.count(v.gender_id(Gender::Male)) as f64,
        v.count(v.gender_id(Gender::Female)) as f64,
    );
    let wm = if nm + nf > 0.0 { nm / (nm + nf) } else { 0.5 };
    let [male, female] = curves;
    let averaged = male.iter().zip(&female).map(|(m, f)| wm * m + (1.0 - wm) * f).collect();
    Ok(RiskCurves {
        ages,
        male,
        female,
        averaged,
    })
}

/// One exported row: identifier, label, vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorRow {
    pub id: String,
    pub label: String,
    pub vector: Vec<f32>,
}

/// Writes `id<TAB>label<TAB>v0..v{d-1}` with a header row. Values use the
/// shortest decimal form that parses back to the same `f32`.
pub fn write_vectors<W: Write>(mut w: W, rows: &[VectorRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    if rows.iter().any(|r| r.vector.len() != dim) {
        return Err(Error::InvalidInput("vectors of differing dimension".into()));
    }
    let io = |e| Error::io("<vectors>", e);
    let mut header = String::from("id\tlabel");
    for i in 0..dim {
        header.push_str(&format!("\tv{i}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        let clean = |s: &str| s.replace(['\t', '\n'], " ");
        write!(w, "{}\t{}", clean(&r.id), clean(&r.label)).map_err(io)?;
        for x in &r.vector {
            write!(w, "\t{x}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn export_vectors(path: &Path, rows: &[VectorRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_vectors(std::io::BufWriter::new(f), rows).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_vectors<R: BufRead>(r: R) -> Result<Vec<VectorRow>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io("<vectors>", e))?;
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let id = cols.next().ok_or_else(|| bad("missing id"))?.to_string();
        let label = cols.next().ok_or_else(|| bad("missing label"))?.to_string();
        let vector = cols
            .map(|c| c.parse::<f32>().map_err(|_| bad("bad number")))
            .collect::<Result<_>>()?;
        out.push(VectorRow { id, label, vector });
    }
    Ok(out)
}

/// Static token embeddings as export rows, labelled by token class.
pub fn token_vector_rows(model: &EncoderModel, v: &Vocabulary, restrict: TokenFilter) -> Vec<VectorRow> {
    let d = model.config.d;
    let table = model.token_embeddings().data();
    (0..v.len())
        .filter(|&i| match restrict {
            TokenFilter::Any => true,
            TokenFilter::Icd => v.class_of(i) == TokenClass::Icd,
            TokenFilter::Age => v.class_of(i) == TokenClass::Age,
            TokenFilter::Gender => v.class_of(i) == TokenClass::Gender,
        })
        .map(|i| {
            let token = v.token(i).unwrap_or_default();
            let label = match v.class_of(i) {
                TokenClass::Icd => token.get(..1).unwrap_or_default().to_string(),
                other => format!("{other:?}").to_lowercase(),
            };
            VectorRow {
                id: token.to_string(),
                label,
                vector: table[i * d..(i + 1) * d].to_vec(),
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    strategy: PoolingStrategy,
    model_hash: String,
    dim: usize,
    ids: Vec<String>,
}

/// Saves embeddings sharing one strategy and model in the container format.
pub fn save_embeddings(path: &Path, embs: &[PatientEmbedding]) -> Result<()> {
    let first = embs.first().ok_or_else(|| Error::InvalidInput("no embeddings to save".into()))?;
    if embs
        .iter()
        .any(|e| e.strategy != first.strategy || e.model_hash != first.model_hash || e.vector.len() != first.vector.len())
    {
        return Err(Error::InvalidInput("embeddings mix strategies, models or dimensions".into()));
    }
    let header = StoreHeader {
        strategy: first.strategy,
        model_hash: first.model_hash.clone(),
        dim: first.vector.len(),
        ids: embs.iter().map(|e| e.patient_id.clone()).collect(),
    };
    let flat: Vec<f32> = embs.iter().flat_map(|e| e.vector.iter().copied()).collect();
    container::save(path, "patient-embeddings", &header, &[&flat])
}

pub fn load_embeddings(path: &Path) -> Result<Vec<PatientEmbedding>> {
    let (h, blobs): (StoreHeader, _) = container::load(path, "patient-embeddings")?;
    let flat = blobs.into_iter().next().unwrap_or_default();
    if flat.len() != h.dim * h.ids.len() {
        return Err(Error::Container("embedding blob does not match header".into()));
    }
    Ok(h.ids
        .into_iter()
        .zip(flat.chunks(h.dim.max(1)))
        .map(|(patient_id, v)| PatientEmbedding {
            patient_id,
            vector: v.to_vec(),
            strategy: h.strategy,
            model_hash: h.model_hash.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_arithmetic() {
        let v = [1.0, 0.0, 0.0, 1.0];
        let mask = [true, true];
        assert_eq!(pool(&v, 2, &mask, PoolingStrategy::Mean).unwrap(), [0.5, 0.5]);
        assert_eq!(pool(&v, 2, &mask, PoolingStrategy::Max).unwrap(), [1.0, 1.0]);
        assert_eq!(pool(&v, 2, &mask, PoolingStrategy::ConcatMeanMax).unwrap(), [0.5, 0.5, 1.0, 1.0]);
        assert_eq!(pool(&v, 2, &mask, PoolingStrategy::Cls).unwrap(), [1.0, 0.0]);
    }

    #[test]
    fn single_position_and_constant_rows() {
        let v = [3.0, -1.0, 9.0, 9.0];
        let mask = [true, false];
        for s in [PoolingStrategy::Mean, PoolingStrategy::Max] {
            assert_eq!(pool(&v, 2, &mask, s).unwrap(), [3.0, -1.0]);
        }
        let c = [0.25f32; 12];
        for s in [PoolingStrategy::Mean, PoolingStrategy::Max] {
            assert_eq!(pool(&c, 3, &[true; 4], s).unwrap(), [0.25; 3]);
        }
        assert!(pool(&v, 2, &[false, false], PoolingStrategy::Mean).is_err());
    }

    #[test]
    fn group_lookup_falls_back() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        let g = GroupAverages::from_items(
            PoolingStrategy::Mean,
            [(Gender::Male, 31, &a[..]), (Gender::Male, 35, &b[..])],
        )
        .unwrap();
        assert_eq!(g.lookup(Gender::Male, 31), &a);
        assert_eq!(g.lookup(Gender::Male, 38), &[0.5, 0.5]);
        assert_eq!(g.lookup(Gender::Female, 70), &[0.5, 0.5]);
    }

    #[test]
    fn strategies_parse() {
        for s in PoolingStrategy::ALL {
            assert_eq!(s.as_str().parse::<PoolingStrategy>().unwrap(), s);
        }
        assert_eq!("cmm".parse::<PoolingStrategy>().unwrap(), PoolingStrategy::ConcatMeanMax);
    }

    #[test]
    fn vectors_round_trip() {
        let rows: Vec<VectorRow> = (0..3)
            .map(|i| VectorRow {
                id: format!("t{i}"),
                label: "x".into(),
                vector: vec![0.1 * i as f32, -1.0 / 3.0, 1e-7, 12345.678],
            })
            .collect();
        let mut buf = Vec::new();
        write_vectors(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("id\tlabel\tv0\tv1\tv2\tv3\n"));
        assert_eq!(read_vectors(&buf[..]).unwrap(), rows);

        let mut empty = Vec::new();
        write_vectors(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "id\tlabel\n");
    }
}
