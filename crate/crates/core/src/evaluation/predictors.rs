use std::collections::{BTreeMap, HashMap};

use crate::corpus::{IcdCode, PatientHistory, Vocabulary};
use crate::encoder::{predict_next_distributions, EncoderModel};
use crate::evaluation::report::{EvalCell, EvalReport};
use crate::{Error, Result};

/// Predicts the code that follows a history prefix.
pub trait NextCodePredictor {
    fn name(&self) -> &str;

    fn predict_batch(&self, prefixes: &[PatientHistory]) -> Result<Vec<IcdCode>>;
}

/// Always emits the modal training code; ties go to the lexicographically
/// smallest code.
#[derive(Clone, Debug)]
pub struct MostCommon {
    pub code: IcdCode,
}

impl MostCommon {
    pub fn fit(train: &[PatientHistory]) -> Result<Self> {
        let mut counts: BTreeMap<&IcdCode, usize> = BTreeMap::new();
        for c in train.iter().flat_map(PatientHistory::codes) {
            *counts.entry(c).or_default() += 1;
        }
        let best = counts.values().copied().max().ok_or_else(|| {
            Error::DegenerateCorpus("no events to find the most common code".into())
        })?;
        // BTreeMap iterates in code order, so the first maximum is the smallest.
        let code = counts
            .into_iter()
            .find(|(_, n)| *n == best)
            .map(|(c, _)| c.clone())
            .expect("maximum exists");
        Ok(Self { code })
    }
}

impl NextCodePredictor for MostCommon {
    fn name(&self) -> &str {
        "most_common"
    }

    fn predict_batch(&self, prefixes: &[PatientHistory]) -> Result<Vec<IcdCode>> {
        Ok(vec![self.code.clone(); prefixes.len()])
    }
}

/// Repeats the last code of the prefix.
#[derive(Clone, Copy, Debug, Default)]
pub struct Previous;

impl NextCodePredictor for Previous {
    fn name(&self) -> &str {
        "previous"
    }

    fn predict_batch(&self, prefixes: &[PatientHistory]) -> Result<Vec<IcdCode>> {
        prefixes
            .iter()
            .map(|p| {
                p.events
                    .last()
                    .map(|e| e.code.clone())
                    .ok_or_else(|| Error::InvalidInput(format!("patient {} has an empty prefix", p.patient_id)))
            })
            .collect()
    }
}

/// Argmax of the encoder's next-code distribution (ties to the lowest id).
pub struct ModelPredictor<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
}

impl NextCodePredictor for ModelPredictor<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn predict_batch(&self, prefixes: &[PatientHistory]) -> Result<Vec<IcdCode>> {
        let dists = predict_next_distributions(self.model, prefixes, self.vocab)?;
        dists
            .iter()
            .map(|d| {
                let best = self
                    .vocab
                    .icd_range()
                    .reduce(|a, b| if d[b] > d[a] { b } else { a })
                    .expect("vocabulary has ICD tokens");
                self.vocab
                    .icd_code(best)
                    .ok_or_else(|| Error::InvalidInput(format!("token {best} is not an ICD code")))
            })
            .collect()
    }
}

/// Looks up the true continuation of each prefix by patient id; a
/// correctness fixture whose accuracy is 1 by construction.
pub struct Oracle {
    truth: HashMap<String, PatientHistory>,
}

impl Oracle {
    pub fn new(corpus: &[PatientHistory]) -> Self {
        Self {
            truth: corpus.iter().map(|p| (p.patient_id.clone(), p.clone())).collect(),
        }
    }
}

impl NextCodePredictor for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict_batch(&self, prefixes: &[PatientHistory]) -> Result<Vec<IcdCode>> {
        prefixes
            .iter()
            .map(|p| {
                self.truth
                    .get(&p.patient_id)
                    .and_then(|full| full.events.get(p.events.len()))
                    .map(|e| e.code.clone())
                    .ok_or_else(|| Error::InvalidInput(format!("no continuation for {}", p.patient_id)))
            })
            .collect()
    }
}

/// For each threshold `th`: patients with at least `th` events are
/// eligible, the code at position `th` (1-based) is the target and the first
/// `th - 1` events are the input. Thresholds without eligible patients are
/// omitted.
pub fn next_code_accuracy(
    predictor: &dyn NextCodePredictor,
    corpus: &[PatientHistory],
    thresholds: &[usize],
) -> Result<EvalReport> {
    let mut report = EvalReport::new("next_code_accuracy", predictor.name());
    for &th in thresholds {
        if th < 2 {
            return Err(Error::Config(format!("threshold {th} must be at least 2")));
        }
        let eligible: Vec<&PatientHistory> = corpus.iter().filter(|p| p.events.len() >= th).collect();
        if eligible.is_empty() {
            continue;
        }
        let prefixes: Vec<PatientHistory> = eligible.iter().map(|p| p.prefix(th - 1)).collect();
        let preds = predictor.predict_batch(&prefixes)?;
        let hits = eligible
            .iter()
            .zip(&preds)
            .filter(|(p, pred)| p.events[th - 1].code == **pred)
            .count();
        report.cells.push(EvalCell::single(
            format!("th={th}"),
            hits as f64 / eligible.len() as f64,
            eligible.len(),
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Event, Gender};

    fn p(id: &str, codes: &[&str]) -> PatientHistory {
        let d0 = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        PatientHistory::new(
            id,
            Gender::Female,
            40,
            codes
                .iter()
                .enumerate()
                .map(|(i, c)| Event {
                    date: d0 + chrono::Days::new(i as u64),
                    code: IcdCode::parse(c).unwrap(),
                })
                .collect(),
        )
    }

    #[test]
    fn most_common_breaks_ties_lexicographically() {
        let corpus = [p("a", &["B01", "A01"]), p("b", &["B01", "A01"])];
        assert_eq!(MostCommon::fit(&corpus).unwrap().code.as_str(), "A01");
        let corpus = [p("a", &["J06.9", "J06.9", "A01"])];
        assert_eq!(MostCommon::fit(&corpus).unwrap().code.as_str(), "J06.9");
    }

    #[test]
    fn previous_repeats_last_and_rejects_empty() {
        let out = Previous.predict_batch(&[p("a", &["A01", "B01"]), p("b", &["A01"])]).unwrap();
        assert_eq!(out[0].as_str(), "B01");
        assert_eq!(out[1].as_str(), "A01");
        assert!(Previous.predict_batch(&[p("c", &[])]).is_err());
    }

    #[test]
    fn eligibility_and_oracle() {
        let codes12: Vec<String> = (0..12).map(|i| format!("A{i:02}")).collect();
        let refs: Vec<&str> = codes12.iter().map(String::as_str).collect();
        let corpus = [p("a", &refs[..5]), p("b", &refs), p("c", &refs)];
        let r = next_code_accuracy(&Oracle::new(&corpus), &corpus, &[2, 12, 13]).unwrap();
        assert_eq!(r.cells.len(), 2);
        assert_eq!(r.cells[1].count, 2);
        assert!(r.cells.iter().all(|c| c.mean == 1.0));
    }
}
