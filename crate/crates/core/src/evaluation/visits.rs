use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{precision_at_k, CategoryMap, EvalCell, EvalReport};
use crate::corpus::{group_visits, IcdCode, PatientHistory, Vocabulary};
use crate::embedding::{embed_samples, EmbedOptions};
use crate::corpus::encode_history;
use crate::encoder::{predict_next_distributions, EncoderModel};
use crate::scoring::{fit_ridge, RidgeSolution};
use crate::{Error, Result};

/// Splits a history into the events before its final visit and the codes of
/// that visit; `None` with fewer than two visits.
pub fn split_final_visit(p: &PatientHistory) -> Option<(PatientHistory, Vec<IcdCode>)> {
    let visits = group_visits(p);
    if visits.len() < 2 {
        return None;
    }
    let last = visits.last().expect("two visits");
    let cut = p.events.len() - last.codes.len();
    Some((p.prefix(cut), last.codes.clone()))
}

/// Fold index per item: a seeded shuffle dealt round-robin, so fold sizes
/// differ by at most one.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (i, &idx) in order.iter().enumerate() {
        out[idx] = i % folds.max(1);
    }
    out
}

/// Scores categories (`CategoryMap::n_slots` wide) for the next visit.
pub trait VisitScorer {
    fn name(&self) -> String;

    fn fit(&mut self, inputs: &[PatientHistory], targets: &[BTreeSet<usize>]) -> Result<()>;

    fn score(&self, inputs: &[PatientHistory]) -> Result<Vec<Vec<f64>>>;
}

/// Ranks categories by their frequency among training events.
pub struct FrequencyScorer<'a> {
    cmap: &'a CategoryMap,
    freq: Vec<f64>,
}

impl<'a> FrequencyScorer<'a> {
    pub fn new(cmap: &'a CategoryMap) -> Self {
        Self {
            cmap,
            freq: vec![0.0; cmap.n_slots()],
        }
    }
}

impl VisitScorer for FrequencyScorer<'_> {
    fn name(&self) -> String {
        "global_frequency".into()
    }

    fn fit(&mut self, inputs: &[PatientHistory], targets: &[BTreeSet<usize>]) -> Result<()> {
        self.freq = vec![0.0; self.cmap.n_slots()];
        for c in inputs.iter().flat_map(PatientHistory::codes) {
            self.freq[self.cmap.category_of(c)] += 1.0;
        }
        for t in targets.iter().flatten() {
            self.freq[*t] += 1.0;
        }
        Ok(())
    }

    fn score(&self, inputs: &[PatientHistory]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.freq.clone(); inputs.len()])
    }
}

/// Category score = summed next-code probability of the category's codes.
pub struct ModelMassScorer<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
    pub cmap: &'a CategoryMap,
}

impl VisitScorer for ModelMassScorer<'_> {
    fn name(&self) -> String {
        "model_mass".into()
    }

    fn fit(&mut self, _: &[PatientHistory], _: &[BTreeSet<usize>]) -> Result<()> {
        Ok(())
    }

    fn score(&self, inputs: &[PatientHistory]) -> Result<Vec<Vec<f64>>> {
        let slot: Vec<usize> = (0..self.vocab.len())
            .map(|i| self.cmap.category_of_token(self.vocab, i))
            .collect();
        Ok(predict_next_distributions(self.model, inputs, self.vocab)?
            .into_iter()
            .map(|dist| {
                let mut s = vec![0.0; self.cmap.n_slots()];
                for i in self.vocab.icd_range() {
                    s[slot[i]] += dist[i];
                }
                s
            })
            .collect())
    }
}

/// Pooled patient embeddings of the frozen encoder followed by a
/// multi-output ridge head over category indicators; isolates the effect of
/// the pooling strategy. Embeddings are cached by patient id, so inputs
/// must be stable per id across calls.
pub struct PooledHeadScorer<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
    pub cmap: &'a CategoryMap,
    pub pooling: EmbedOptions,
    pub lambda: f64,
    head: Option<RidgeSolution>,
    // Pooled vectors by patient id; folds re-use them.
    cache: RefCell<HashMap<String, Vec<f64>>>,
}

impl<'a> PooledHeadScorer<'a> {
    pub fn new(model: &'a EncoderModel, vocab: &'a Vocabulary, cmap: &'a CategoryMap, pooling: impl Into<EmbedOptions>, lambda: f64) -> Self {
        Self {
            model,
            vocab,
            cmap,
            pooling: pooling.into(),
            lambda,
            head: None,
            cache: RefCell::default(),
        }
    }

    fn features(&self, inputs: &[PatientHistory]) -> Result<Vec<f64>> {
        let mut cache = self.cache.borrow_mut();
        let missing: Vec<&PatientHistory> = inputs.iter().filter(|p| !cache.contains_key(&p.patient_id)).collect();
        if !missing.is_empty() {
            let opts = self.model.config.encode_options();
            let samples: Vec<_> = missing.iter().map(|p| encode_history(p, self.vocab, opts)).collect();
            for (p, e) in missing.iter().zip(embed_samples(self.model, &samples, self.pooling)?) {
                cache.insert(p.patient_id.clone(), e.into_iter().map(f64::from).collect());
            }
        }
        Ok(inputs.iter().flat_map(|p| cache[&p.patient_id].iter().copied()).collect())
    }
}

impl VisitScorer for PooledHeadScorer<'_> {
    fn name(&self) -> String {
        let mut n = format!("pooled_{}", self.pooling.strategy);
        if self.pooling.events_only {
            n.push_str("_events_only");
        }
        n
    }

    fn fit(&mut self, inputs: &[PatientHistory], targets: &[BTreeSet<usize>]) -> Result<()> {
        let x = self.features(inputs)?;
        let m = self.cmap.n_slots();
        let mut y = vec![0.0; inputs.len() * m];
        for (i, t) in targets.iter().enumerate() {
            for &c in t {
                y[i * m + c] = 1.0;
            }
        }
        let p = x.len() / inputs.len().max(1);
        self.head = Some(fit_ridge(&x, inputs.len(), p, &y, m, self.lambda)?);
        Ok(())
    }

    fn score(&self, inputs: &[PatientHistory]) -> Result<Vec<Vec<f64>>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("pooled head scorer used before fit".into()))?;
        let out = head.predict(&self.features(inputs)?)?;
        Ok(out.chunks(head.outputs).map(<[f64]>::to_vec).collect())
    }
}

/// Cross-validated next-visit Precision@k. Each patient with at least two
/// visits contributes one sample: the final visit's category set predicted
/// from all earlier events. With `folds >= 2` the scorer is fitted on the
/// other folds; with one fold it is fitted and evaluated on everything.
pub fn evaluate_visit_prediction(
    scorer: &mut dyn VisitScorer,
    corpus: &[PatientHistory],
    cmap: &CategoryMap,
    ks: &[usize],
    folds: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut skipped = 0;
    for p in corpus {
        let Some((prefix, codes)) = split_final_visit(p) else {
            skipped += 1;
            continue;
        };
        let t: BTreeSet<usize> = codes.iter().map(|c| cmap.category_of(c)).collect();
        if t.is_empty() {
            skipped += 1;
            continue;
        }
        inputs.push(prefix);
        targets.push(t);
    }
    if skipped > 0 {
        tracing::debug!(skipped, "patients without a usable final visit");
    }
    let folds = folds.max(1);
    if inputs.len() < folds {
        return Err(Error::InvalidInput(format!(
            "{} evaluable patients cannot fill {folds} folds",
            inputs.len()
        )));
    }
    let assignment = assign_folds(inputs.len(), folds, seed);
    let mut per_fold: Vec<Vec<f64>> = vec![Vec::with_capacity(folds); ks.len()];
    for f in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) = if folds == 1 {
            ((0..inputs.len()).collect(), (0..inputs.len()).collect())
        } else {
            (0..inputs.len()).partition(|&i| assignment[i] == f)
        };
        let pick = |idx: &[usize]| -> (Vec<PatientHistory>, Vec<BTreeSet<usize>>) {
            (
                idx.iter().map(|&i| inputs[i].clone()).collect(),
                idx.iter().map(|&i| targets[i].clone()).collect(),
            )
        };
        let (tr_in, tr_t) = pick(&train);
        scorer.fit(&tr_in, &tr_t)?;
        let (te_in, te_t) = pick(&test);
        let scores = scorer.score(&te_in)?;
        for (ki, &k) in ks.iter().enumerate() {
            let vals: Vec<f64> = scores
                .iter()
                .zip(&te_t)
                .filter_map(|(s, t)| precision_at_k(s, t, k))
                .collect();
            per_fold[ki].push(vals.iter().sum::<f64>() / vals.len().max(1) as f64);
        }
    }
    let mut report = EvalReport::new("precision_at_k", scorer.name());
    for (ki, &k) in ks.iter().enumerate() {
        report
            .cells
            .push(EvalCell::from_folds(format!("k={k}"), std::mem::take(&mut per_fold[ki]), inputs.len()));
    }
    Ok(report)
}
