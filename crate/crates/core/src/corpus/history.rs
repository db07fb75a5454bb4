use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::IcdCode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim() {
            "M" | "m" | "male" => Some(Gender::Male),
            "F" | "f" | "female" => Some(Gender::Female),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub date: NaiveDate,
    pub code: IcdCode,
}

/// One patient's diagnosis history. `age_years` is the age at the last
/// diagnosis event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientHistory {
    pub patient_id: String,
    pub gender: Gender,
    pub age_years: u32,
    pub events: Vec<Event>,
}

impl PatientHistory {
    /// Builds a history with events stably sorted by date.
    pub fn new(patient_id: impl Into<String>, gender: Gender, age_years: u32, mut events: Vec<Event>) -> Self {
        events.sort_by_key(|e| e.date);
        Self {
            patient_id: patient_id.into(),
            gender,
            age_years,
            events,
        }
    }

    pub fn codes(&self) -> impl Iterator<Item = &IcdCode> {
        self.events.iter().map(|e| &e.code)
    }

    /// The same patient restricted to the first `n` events.
    pub fn prefix(&self, n: usize) -> PatientHistory {
        PatientHistory {
            patient_id: self.patient_id.clone(),
            gender: self.gender,
            age_years: self.age_years,
            events: self.events[..n.min(self.events.len())].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Visit {
    pub date: NaiveDate,
    pub codes: Vec<IcdCode>,
}

/// Consecutive events sharing a calendar date form one visit.
pub fn group_visits(p: &PatientHistory) -> Vec<Visit> {
    let mut visits: Vec<Visit> = Vec::new();
    for e in &p.events {
        match visits.last_mut() {
            Some(v) if v.date == e.date => v.codes.push(e.code.clone()),
            _ => visits.push(Visit {
                date: e.date,
                codes: vec![e.code.clone()],
            }),
        }
    }
    visits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, d).unwrap()
    }

    fn ev(d: u32, c: &str) -> Event {
        Event {
            date: day(d),
            code: IcdCode::parse(c).unwrap(),
        }
    }

    #[test]
    fn events_sort_stably_by_date() {
        let p = PatientHistory::new(
            "p",
            Gender::Male,
            40,
            vec![ev(3, "A01"), ev(1, "B02"), ev(3, "C03"), ev(1, "D04")],
        );
        let codes: Vec<_> = p.codes().map(IcdCode::as_str).collect();
        assert_eq!(codes, ["B02", "D04", "A01", "C03"]);
    }

    #[test]
    fn visits_group_same_day_events() {
        let p = PatientHistory::new("p", Gender::Female, 5, vec![ev(1, "A01"), ev(1, "A02"), ev(2, "A03")]);
        let sizes: Vec<_> = group_visits(&p).iter().map(|v| v.codes.len()).collect();
        assert_eq!(sizes, [2, 1]);

        let same = PatientHistory::new("p", Gender::Female, 5, vec![ev(4, "A01"); 3]);
        assert_eq!(group_visits(&same).len(), 1);

        let distinct = PatientHistory::new("p", Gender::Female, 5, (1..=5).map(|d| ev(d, "A01")).collect());
        assert!(group_visits(&distinct).iter().all(|v| v.codes.len() == 1));
        assert_eq!(group_visits(&distinct).len(), 5);
    }

    #[test]
    fn visits_partition_the_event_list() {
        let p = PatientHistory::new(
            "p",
            Gender::Male,
            60,
            vec![ev(1, "A01"), ev(2, "B01"), ev(2, "B02"), ev(9, "C01"), ev(9, "A01")],
        );
        let flat: Vec<IcdCode> = group_visits(&p).into_iter().flat_map(|v| v.codes).collect();
        let orig: Vec<IcdCode> = p.codes().cloned().collect();
        assert_eq!(flat, orig);
    }
}
