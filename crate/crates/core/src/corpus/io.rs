//! JSON-lines readers and writers for patient corpora and insurance
//! applications.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{ApplicationRecord, Event, Gender, IcdCode, PatientHistory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Malformed lines are skipped and counted.
    #[default]
    Jsonl,
    /// The first malformed line aborts ingestion.
    JsonlStrict,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub records: usize,
    pub skipped: usize,
    /// 1-based line numbers of skipped lines.
    pub skipped_lines: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    date: String,
    icd: String,
}

#[derive(Serialize, Deserialize)]
struct PatientRecord {
    patient_id: String,
    gender: String,
    age: i64,
    events: Vec<EventRecord>,
}

fn parse_patient(line: &str) -> std::result::Result<PatientHistory, String> {
    let rec: PatientRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let gender = Gender::parse(&rec.gender).ok_or_else(|| format!("bad gender {:?}", rec.gender))?;
    let events = rec
        .events
        .into_iter()
        .map(|e| {
            let date = NaiveDate::parse_from_str(&e.date, "%Y-%m-%d")
                .map_err(|err| format!("bad date {:?}: {err}", e.date))?;
            let code = IcdCode::parse(&e.icd).map_err(|err| err.to_string())?;
            Ok(Event { date, code })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    // Ages above 99 are kept and clamped at encode time; negatives are noise.
    let age = rec.age.clamp(0, u32::MAX as i64) as u32;
    Ok(PatientHistory::new(rec.patient_id, gender, age, events))
}

fn read_lines<T>(
    path: &Path,
    format: CorpusFormat,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<(Vec<T>, IngestReport)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut report = IngestReport::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse(&line) {
            Ok(v) => out.push(v),
            Err(msg) if format == CorpusFormat::JsonlStrict => {
                return Err(Error::Parse { line: i + 1, msg })
            }
            Err(msg) => {
                tracing::debug!(line = i + 1, %msg, "skipping malformed record");
                report.skipped += 1;
                report.skipped_lines.push(i + 1);
            }
        }
    }
    report.records = out.len();
    Ok((out, report))
}

pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<(Vec<PatientHistory>, IngestReport)> {
    read_lines(path, format, parse_patient)
}

pub fn write_corpus(path: &Path, patients: &[PatientHistory]) -> Result<()> {
    write_jsonl(
        path,
        patients.iter().map(|p| PatientRecord {
            patient_id: p.patient_id.clone(),
            gender: p.gender.as_str().to_string(),
            age: p.age_years as i64,
            events: p
                .events
                .iter()
                .map(|e| EventRecord {
                    date: e.date.format("%Y-%m-%d").to_string(),
                    icd: e.code.to_string(),
                })
                .collect(),
        }),
    )
}

pub fn read_applications(path: &Path, format: CorpusFormat) -> Result<(Vec<ApplicationRecord>, IngestReport)> {
    read_lines(path, format, |line| {
        serde_json::from_str(line).map_err(|e| e.to_string())
    })
}

pub fn write_applications(path: &Path, apps: &[ApplicationRecord]) -> Result<()> {
    write_jsonl(path, apps.iter())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
