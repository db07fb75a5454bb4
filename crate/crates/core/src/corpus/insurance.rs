//! Seeded synthetic insurance applications.
//!
//! Each application pairs an applicant drawn from a patient corpus (gender,
//! age, a declared subset of their diagnoses) with categorical policy
//! fields. The claim label is Bernoulli with
//! `logistic(base + sum of policy effects + gamma * [anamnesis hits a risk prefix])`,
//! where `base` is calibrated so the expected positive rate matches the
//! configured rate. A random share of codes is withheld from anamneses in
//! the first half of the period, so a model trained on early months meets
//! unseen codes later.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Gender, IcdCode, PatientHistory};
use crate::{Error, Result};

/// Declared policy schema: field name and its category values.
pub const POLICY_FIELDS: [(&str, &[&str]); 5] = [
    ("product_type", &["term_life", "whole_life", "accident", "critical_illness"]),
    ("currency", &["RUB", "USD", "EUR"]),
    ("region", &["R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8"]),
    ("sum_band", &["S1", "S2", "S3", "S4", "S5"]),
    ("term_band", &["T1", "T2", "T3", "T4"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApplicationRecord {
    pub app_id: String,
    pub month: u32,
    pub gender: Gender,
    #[serde(rename = "age")]
    pub age_years: u32,
    pub anamnesis: Vec<IcdCode>,
    pub policy: BTreeMap<String, String>,
    pub claim: u8,
}

impl ApplicationRecord {
    pub fn hits_risk(&self, prefixes: &[String]) -> bool {
        self.anamnesis
            .iter()
            .any(|c| prefixes.iter().any(|p| c.as_str().starts_with(p.as_str())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsuranceConfig {
    pub n_apps: usize,
    pub months: u32,
    pub risk_prefixes: Vec<String>,
    /// Log-odds added when the anamnesis contains a risk code.
    pub gamma: f64,
    pub positive_rate: f64,
    pub policy_effect_std: f64,
    pub empty_anamnesis_prob: f64,
    pub max_anamnesis: usize,
    /// Share of codes that only appear in anamneses from month `months / 2` on.
    pub late_code_fraction: f64,
}

impl Default for InsuranceConfig {
    fn default() -> Self {
        Self {
            n_apps: 50_000,
            months: 12,
            risk_prefixes: vec!["I".into(), "C".into()],
            gamma: 2.0,
            positive_rate: 0.05,
            policy_effect_std: 0.4,
            empty_anamnesis_prob: 0.3,
            max_anamnesis: 3,
            late_code_fraction: 0.3,
        }
    }
}

impl InsuranceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.months < 2 {
            return bad("months must be at least 2");
        }
        if self.n_apps == 0 {
            return bad("n_apps must be positive");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 0.5) {
            return bad("positive_rate must lie in (0, 0.5)");
        }
        for p in [self.empty_anamnesis_prob, self.late_code_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.policy_effect_std >= 0.0) || !self.gamma.is_finite() {
            return bad("policy_effect_std and gamma must be finite, std non-negative");
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intercept `b` with `mean(sigmoid(b + z)) == rate`, by bisection.
fn calibrate_base(logits: &[f64], rate: f64) -> f64 {
    let mean_at = |b: f64| logits.iter().map(|z| sigmoid(b + z)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate_synthetic_insurance(
    seed: u64,
    patients: &[PatientHistory],
    cfg: &InsuranceConfig,
) -> Result<Vec<ApplicationRecord>> {
    cfg.validate()?;
    if patients.is_empty() {
        return Err(Error::InvalidInput("no patients to draw applicants from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let effect = Normal::new(0.0, cfg.policy_effect_std).map_err(|e| Error::Config(e.to_string()))?;
    let effects: Vec<Vec<f64>> = POLICY_FIELDS
        .iter()
        .map(|(_, values)| values.iter().map(|_| effect.sample(&mut rng)).collect())
        .collect();

    let all_codes: BTreeSet<&IcdCode> = patients.iter().flat_map(|p| p.codes()).collect();
    let late: BTreeSet<&IcdCode> = all_codes
        .into_iter()
        .filter(|_| rng.random_bool(cfg.late_code_fraction))
        .collect();
    let half = cfg.months / 2;

    let mut apps = Vec::with_capacity(cfg.n_apps);
    let mut logits = Vec::with_capacity(cfg.n_apps);
    for i in 0..cfg.n_apps {
        let p = &patients[rng.random_range(0..patients.len())];
        let month = rng.random_range(0..cfg.months);
        let mut distinct: Vec<&IcdCode> = p.codes().collect::<BTreeSet<_>>().into_iter().collect();
        if month < half {
            distinct.retain(|c| !late.contains(c));
        }
        let mut anamnesis = Vec::new();
        if !distinct.is_empty() && !rng.random_bool(cfg.empty_anamnesis_prob) {
            let k = rng.random_range(1..=cfg.max_anamnesis.max(1)).min(distinct.len());
            let mut picked = sample(&mut rng, distinct.len(), k).into_vec();
            picked.sort_unstable();
            anamnesis = picked.into_iter().map(|j| distinct[j].clone()).collect();
        }
        let mut policy = BTreeMap::new();
        let mut z = 0.0;
        for (f, (name, values)) in POLICY_FIELDS.iter().enumerate() {
            let v = rng.random_range(0..values.len());
            z += effects[f][v];
            policy.insert(name.to_string(), values[v].to_string());
        }
        let app = ApplicationRecord {
            app_id: format!("A{i:07}"),
            month,
            gender: p.gender,
            age_years: p.age_years,
            anamnesis,
            policy,
            claim: 0,
        };
        if app.hits_risk(&cfg.risk_prefixes) {
            z += cfg.gamma;
        }
        logits.push(z);
        apps.push(app);
    }
    let base = calibrate_base(&logits, cfg.positive_rate);
    for (app, z) in apps.iter_mut().zip(&logits) {
        app.claim = rng.random_bool(sigmoid(base + z)) as u8;
    }
    Ok(apps)
}
