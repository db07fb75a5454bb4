use std::collections::HashMap;

use serde::Serialize;

use super::{IcdCode, PatientHistory};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub kept_codes: usize,
    pub kept_patients: usize,
    pub mean_events: f64,
    pub dropped_patients: usize,
    pub removed_events: usize,
}

fn code_counts(patients: &[PatientHistory]) -> HashMap<&IcdCode, usize> {
    let mut counts = HashMap::new();
    for c in patients.iter().flat_map(PatientHistory::codes) {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
}

/// Removes codes seen fewer than `min_code_freq` times and patients left
/// with fewer than `min_events` events. Repeats until neither rule fires, so
/// the result satisfies both thresholds and filtering is idempotent.
pub fn filter_corpus(
    patients: &[PatientHistory],
    min_code_freq: usize,
    min_events: usize,
) -> (Vec<PatientHistory>, CorpusStats) {
    let min_code_freq = min_code_freq.max(1);
    let min_events = min_events.max(1);
    let total_events: usize = patients.iter().map(|p| p.events.len()).sum();
    let mut current = patients.to_vec();
    loop {
        let counts = code_counts(&current);
        let rare: Vec<IcdCode> = counts
            .iter()
            .filter(|(_, n)| **n < min_code_freq)
            .map(|(c, _)| (*c).clone())
            .collect();
        let short = current.iter().any(|p| p.events.len() < min_events);
        if rare.is_empty() && !short {
            break;
        }
        let rare: std::collections::HashSet<IcdCode> = rare.into_iter().collect();
        current = current
            .into_iter()
            .filter_map(|mut p| {
                p.events.retain(|e| !rare.contains(&e.code));
                (p.events.len() >= min_events).then_some(p)
            })
            .collect();
    }
    let kept_events: usize = current.iter().map(|p| p.events.len()).sum();
    let stats = CorpusStats {
        kept_codes: code_counts(&current).len(),
        kept_patients: current.len(),
        mean_events: if current.is_empty() {
            0.0
        } else {
            kept_events as f64 / current.len() as f64
        },
        dropped_patients: patients.len() - current.len(),
        removed_events: total_events - kept_events,
    };
    (current, stats)
}
