//! Seeded synthetic patient corpus.
//!
//! A [`SyntheticWorld`] fixes the code system: disease groups, each a block
//! of codes under one chapter letter with a Zipf popularity profile, an age
//! profile and a gender skew. Patients sample 1 to 3 groups and emit codes
//! from them; consecutive events repeat the previous code with probability
//! `repeat_prob`, otherwise follow the previous code's in-group successor
//! with probability `successor_prob`, otherwise draw a fresh code.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Event, Gender, IcdCode, PatientHistory};
use crate::{Error, Result};

const LETTERS: [&str; 20] = [
    "J", "I", "C", "M", "E", "K", "F", "L", "N", "H", "S", "G", "D", "R", "A", "B", "O", "T", "Z", "Q",
];
const CODES_PER_LETTER: usize = 500;
/// Index of the group whose codes are only emitted for patients aged at
/// least [`LATE_ONSET_AGE`].
pub const LATE_ONSET_GROUP: usize = 1;
pub const LATE_ONSET_AGE: u32 = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_codes: usize,
    pub mean_events: f64,
    /// Probability that an event repeats the previous code (rho).
    pub repeat_prob: f64,
    /// Probability that a non-repeat event is the previous code's successor.
    pub successor_prob: f64,
    pub zipf_exponent: f64,
    pub max_visit_size: usize,
    pub max_gap_days: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 5000,
            n_codes: 200,
            mean_events: 10.0,
            repeat_prob: 0.3,
            successor_prob: 0.6,
            zipf_exponent: 1.0,
            max_visit_size: 3,
            max_gap_days: 90,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be at least 1");
        }
        if self.n_codes < 20 || self.n_codes > LETTERS.len() * CODES_PER_LETTER {
            return bad("n_codes must be in 20..=10000");
        }
        if !(self.mean_events >= 2.0 && self.mean_events.is_finite()) {
            return bad("mean_events must be at least 2");
        }
        for (name, p) in [("repeat_prob", self.repeat_prob), ("successor_prob", self.successor_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.max_visit_size == 0 || self.max_gap_days == 0 {
            return bad("max_visit_size and max_gap_days must be positive");
        }
        if !(self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgeProfile {
    Pediatric,
    Adult,
    Senior,
    Uniform,
    LateOnset,
}

impl AgeProfile {
    fn weight(self, age: u32) -> f64 {
        match self {
            AgeProfile::Pediatric => if age < 18 { 4.0 } else { 0.3 },
            AgeProfile::Adult => if (18..65).contains(&age) { 2.0 } else { 0.4 },
            AgeProfile::Senior => if age >= 60 { 4.0 } else { 0.3 },
            AgeProfile::Uniform => 1.0,
            AgeProfile::LateOnset => if age >= LATE_ONSET_AGE { 2.0 } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiseaseGroup {
    pub codes: Vec<IcdCode>,
    /// Cumulative Zipf weights over `codes`.
    cumulative: Vec<f64>,
    pub age_profile: AgeProfile,
    /// Multiplier on the prior for female patients (inverse for male).
    pub female_bias: f64,
    pub prevalence: f64,
}

impl DiseaseGroup {
    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.codes.len() - 1)
    }

    fn prior(&self, gender: Gender, age: u32) -> f64 {
        let g = match gender {
            Gender::Female => self.female_bias,
            Gender::Male => 1.0 / self.female_bias,
        };
        self.prevalence * g * self.age_profile.weight(age)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    seed: u64,
    pub groups: Vec<DiseaseGroup>,
}

impl SyntheticWorld {
    pub fn new(seed: u64, n_codes: usize, zipf_exponent: f64) -> Result<Self> {
        GeneratorConfig {
            n_codes,
            zipf_exponent,
            ..Default::default()
        }
        .validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_groups = (n_codes / 20).max(4);
        let mut used = [0usize; LETTERS.len()];
        let profiles = [AgeProfile::Uniform, AgeProfile::Pediatric, AgeProfile::Adult, AgeProfile::Senior];
        let mut groups = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let size = n_codes / n_groups + usize::from(g < n_codes % n_groups);
            let letter = g % LETTERS.len();
            let codes: Vec<IcdCode> = (0..size)
                .map(|_| {
                    let c = used[letter];
                    used[letter] += 1;
                    IcdCode::parse(&format!("{}{:02}.{}", LETTERS[letter], c / 5, c % 5))
                })
                .collect::<Result<_>>()?;
            // Popularity rank is a random permutation of code order.
            let mut ranks: Vec<usize> = (0..size).collect();
            for i in (1..size).rev() {
                ranks.swap(i, rng.random_range(0..=i));
            }
            let mut acc = 0.0;
            let cumulative = ranks
                .iter()
                .map(|&r| {
                    acc += 1.0 / ((r + 1) as f64).powf(zipf_exponent);
                    acc
                })
                .collect();
            let age_profile = if g == LATE_ONSET_GROUP {
                AgeProfile::LateOnset
            } else {
                profiles[rng.random_range(0..profiles.len())]
            };
            groups.push(DiseaseGroup {
                codes,
                cumulative,
                age_profile,
                female_bias: (rng.random::<f64>() - 0.5).exp(),
                prevalence: 0.5 + rng.random::<f64>(),
            });
        }
        Ok(Self { seed, groups })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn codes(&self) -> impl Iterator<Item = &IcdCode> {
        self.groups.iter().flat_map(|g| g.codes.iter())
    }

    pub fn group_of(&self, code: &IcdCode) -> Option<usize> {
        self.groups.iter().position(|g| g.codes.contains(code))
    }

    /// Samples `cfg.n_patients` patients on an independent random stream.
    /// Different `stream` values give disjoint samples from the same world.
    pub fn sample(&self, stream: u64, cfg: &GeneratorConfig) -> Result<Vec<PatientHistory>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let extra = cfg.mean_events - 2.0;
        let poisson = (extra > 0.0)
            .then(|| Poisson::new(extra).map_err(|e| Error::Config(e.to_string())))
            .transpose()?;
        let start = NaiveDate::from_ymd_opt(2014, 1, 1).expect("valid date");
        let mut out = Vec::with_capacity(cfg.n_patients);
        for i in 0..cfg.n_patients {
            let gender = if rng.random_bool(0.5) { Gender::Female } else { Gender::Male };
            let age: u32 = rng.random_range(0..=99);
            let groups = self.pick_groups(&mut rng, gender, age);
            let n_events = 2 + poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            let codes = self.emit(&mut rng, &groups, n_events, cfg);
            let dates = visit_dates(&mut rng, n_events, start, cfg);
            let events = dates
                .into_iter()
                .zip(codes)
                .map(|(date, (g, c))| Event {
                    date,
                    code: self.groups[g].codes[c].clone(),
                })
                .collect();
            out.push(PatientHistory::new(format!("s{stream}-{i:06}"), gender, age, events));
        }
        Ok(out)
    }

    fn pick_groups(&self, rng: &mut ChaCha8Rng, gender: Gender, age: u32) -> Vec<usize> {
        let mut weights: Vec<f64> = self.groups.iter().map(|g| g.prior(gender, age)).collect();
        let k = rng.random_range(1..=3usize);
        let mut chosen = Vec::with_capacity(k);
        for _ in 0..k {
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                break;
            }
            let mut u = rng.random::<f64>() * total;
            let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap();
            for (j, &w) in weights.iter().enumerate() {
                if u < w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            chosen.push(pick);
            weights[pick] = 0.0;
        }
        chosen
    }

    /// (group, code index) per event.
    fn emit(
        &self,
        rng: &mut ChaCha8Rng,
        groups: &[usize],
        n: usize,
        cfg: &GeneratorConfig,
    ) -> Vec<(usize, usize)> {
        let fresh = |rng: &mut ChaCha8Rng| {
            let g = groups[rng.random_range(0..groups.len())];
            (g, self.groups[g].draw(rng))
        };
        let mut out: Vec<(usize, usize)> = Vec::with_capacity(n);
        out.push(fresh(rng));
        while out.len() < n {
            let (g, c) = *out.last().unwrap();
            let next = if rng.random_bool(cfg.repeat_prob) {
                (g, c)
            } else if rng.random_bool(cfg.successor_prob) {
                (g, (c + 1) % self.groups[g].codes.len())
            } else {
                loop {
                    let cand = fresh(rng);
                    if cand != (g, c) {
                        break cand;
                    }
                }
            };
            out.push(next);
        }
        out
    }
}

/// Dates for `n` events grouped into visits of 1..=max_visit_size events,
/// with at least two visits whenever `n >= 2`.
fn visit_dates(rng: &mut ChaCha8Rng, n: usize, start: NaiveDate, cfg: &GeneratorConfig) -> Vec<NaiveDate> {
    let mut date = start + Days::new(rng.random_range(0..365));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let remaining = n - out.len();
        let mut size = rng.random_range(1..=cfg.max_visit_size).min(remaining);
        if out.is_empty() && size == n && n >= 2 {
            size = n - 1;
        }
        out.extend(std::iter::repeat_n(date, size));
        date = date + Days::new(rng.random_range(1..=cfg.max_gap_days));
    }
    out
}

/// Builds the world for `seed` and samples the patients on stream 0.
pub fn generate_synthetic_corpus(seed: u64, cfg: &GeneratorConfig) -> Result<Vec<PatientHistory>> {
    SyntheticWorld::new(seed, cfg.n_codes, cfg.zipf_exponent)?.sample(0, cfg)
}
