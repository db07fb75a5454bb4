use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::Serialize;

use crate::corpus::{IcdCode, Vocabulary};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CategorySource {
    ExternalFile,
    Prefix3Fallback,
}

/// Total map from the vocabulary's ICD tokens to contiguous category ids.
/// Codes without a category (and UNK) go to the extra "other" slot with id
/// `len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMap {
    names: Vec<String>,
    by_code: HashMap<String, usize>,
    pub source: CategorySource,
    /// Vocabulary codes that fell into "other".
    pub unmapped: usize,
    /// Malformed rows skipped while reading an external file.
    pub skipped_rows: usize,
}

impl CategoryMap {
    fn build(v: &Vocabulary, assign: impl Fn(&str) -> Option<String>, source: CategorySource, skipped_rows: usize) -> Self {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut by_code = HashMap::new();
        let mut unmapped = 0;
        let mut cats: Vec<(String, String)> = Vec::new();
        for id in v.icd_range() {
            let code = v.token(id).unwrap_or_default().to_string();
            match assign(&code) {
                Some(cat) => cats.push((code, cat)),
                None => unmapped += 1,
            }
        }
        // Category ids follow sorted category names.
        let mut sorted: Vec<&String> = cats.iter().map(|(_, c)| c).collect();
        sorted.sort();
        sorted.dedup();
        for c in sorted {
            index.insert(c.clone(), names.len());
            names.push(c.clone());
        }
        for (code, cat) in &cats {
            by_code.insert(code.clone(), index[cat]);
        }
        if unmapped > 0 {
            tracing::warn!(unmapped, "codes without a category mapped to \"other\"");
        }
        Self {
            names,
            by_code,
            source,
            unmapped,
            skipped_rows,
        }
    }

    /// Groups codes by their 3-character block.
    pub fn prefix3(v: &Vocabulary) -> Self {
        Self::build(v, |c| Some(c.get(..3).unwrap_or(c).to_string()), CategorySource::Prefix3Fallback, 0)
    }

    /// Reads `code,category` rows; an optional header row is ignored.
    pub fn from_reader<R: BufRead>(r: R, v: &Vocabulary) -> Result<Self> {
        let mut table: HashMap<String, String> = HashMap::new();
        let mut skipped = 0;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<category map>", e))?;
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("code,category")) {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(c, cat)| Some((IcdCode::parse(c.trim().trim_matches('"')).ok()?, cat.trim().trim_matches('"'))))
                .filter(|(_, cat)| !cat.is_empty());
            match parsed {
                Some((code, cat)) => {
                    table.insert(code.to_string(), cat.to_string());
                }
                None => skipped += 1,
            }
        }
        Ok(Self::build(v, |c| table.get(c).cloned(), CategorySource::ExternalFile, skipped))
    }

    /// Number of named categories (excluding "other").
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Width of a category score vector: named categories plus "other".
    pub fn n_slots(&self) -> usize {
        self.names.len() + 1
    }

    pub fn other(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: usize) -> &str {
        self.names.get(id).map_or("other", String::as_str)
    }

    pub fn category_of(&self, code: &IcdCode) -> usize {
        self.by_code.get(code.as_str()).copied().unwrap_or(self.other())
    }

    /// Category of a vocabulary token id; non-ICD tokens map to "other".
    pub fn category_of_token(&self, v: &Vocabulary, id: usize) -> usize {
        v.token(id)
            .and_then(|t| self.by_code.get(t))
            .copied()
            .unwrap_or(self.other())
    }
}

/// External map when `path` is given, else the 3-character fallback.
pub fn load_category_map(path: Option<&Path>, v: &Vocabulary) -> Result<CategoryMap> {
    match path {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            CategoryMap::from_reader(std::io::BufReader::new(f), v)
        }
        None => Ok(CategoryMap::prefix3(v)),
    }
}
