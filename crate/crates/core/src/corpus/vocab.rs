//! Token vocabulary: 8 auxiliary tokens, 2 gender tokens, 100 age tokens,
//! then the ICD codes in lexicographic order.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Gender, IcdCode, PatientHistory};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
/// Placeholder substituted for the gender token when demographics are off.
pub const RES5: usize = 5;
/// Placeholder substituted for the age token when demographics are off.
pub const RES6: usize = 6;
pub const RES7: usize = 7;

pub const AUX_TOKENS: [&str; 8] = [
    "[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]", "[RES5]", "[RES6]", "[RES7]",
];
pub const N_AUX: usize = AUX_TOKENS.len();
pub const GENDER_OFFSET: usize = N_AUX;
pub const AGE_OFFSET: usize = GENDER_OFFSET + 2;
pub const MAX_AGE: u32 = 99;
pub const ICD_OFFSET: usize = AGE_OFFSET + MAX_AGE as usize + 1;

const HEADER: &str = "ehrseq-vocab v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Aux,
    Gender,
    Age,
    Icd,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

fn gender_token(g: Gender) -> String {
    format!("[GENDER:{}]", g.as_str())
}

fn age_token(a: u32) -> String {
    format!("[AGE:{a}]")
}

impl Vocabulary {
    /// Builds the vocabulary over the distinct codes of `patients`. Entry
    /// order depends only on the code set; counts record frequencies.
    pub fn build(patients: &[PatientHistory]) -> Result<Self> {
        let mut code_counts: BTreeMap<&IcdCode, u64> = BTreeMap::new();
        let mut gender_counts = [0u64; 2];
        let mut age_counts = [0u64; MAX_AGE as usize + 1];
        for p in patients {
            for c in p.codes() {
                *code_counts.entry(c).or_default() += 1;
            }
            gender_counts[(p.gender == Gender::Female) as usize] += 1;
            age_counts[p.age_years.min(MAX_AGE) as usize] += 1;
        }
        if code_counts.is_empty() {
            return Err(Error::DegenerateCorpus(
                "no ICD codes to build a vocabulary from".into(),
            ));
        }
        let mut tokens: Vec<String> = AUX_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0u64; N_AUX];
        for (g, n) in [Gender::Male, Gender::Female].into_iter().zip(gender_counts) {
            tokens.push(gender_token(g));
            counts.push(n);
        }
        for (a, n) in age_counts.iter().enumerate() {
            tokens.push(age_token(a as u32));
            counts.push(*n);
        }
        for (c, n) in code_counts {
            tokens.push(c.to_string());
            counts.push(n);
        }
        Ok(Self::from_parts(tokens, counts))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn icd_id(&self, code: &IcdCode) -> Option<usize> {
        self.id(code.as_str()).filter(|&i| i >= ICD_OFFSET)
    }

    pub fn gender_id(&self, g: Gender) -> usize {
        GENDER_OFFSET + (g == Gender::Female) as usize
    }

    /// Age token id; ages above 99 map to the 99 token.
    pub fn age_id(&self, age: u32) -> usize {
        AGE_OFFSET + age.min(MAX_AGE) as usize
    }

    pub fn icd_range(&self) -> Range<usize> {
        ICD_OFFSET..self.tokens.len()
    }

    pub fn n_icd(&self) -> usize {
        self.tokens.len() - ICD_OFFSET
    }

    pub fn icd_code(&self, id: usize) -> Option<IcdCode> {
        if self.icd_range().contains(&id) {
            IcdCode::parse(&self.tokens[id]).ok()
        } else {
            None
        }
    }

    pub fn class_of(&self, id: usize) -> TokenClass {
        match id {
            i if i < GENDER_OFFSET => TokenClass::Aux,
            i if i < AGE_OFFSET => TokenClass::Gender,
            i if i < ICD_OFFSET => TokenClass::Age,
            _ => TokenClass::Icd,
        }
    }

    /// Age in years of an age token.
    pub fn age_of(&self, id: usize) -> Option<u32> {
        (self.class_of(id) == TokenClass::Age).then(|| (id - AGE_OFFSET) as u32)
    }

    /// SHA-256 over the token list in id order (counts excluded): two
    /// vocabularies with the same hash index tokens identically.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{HEADER} {}", self.tokens.len())?;
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            writeln!(w, "{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| parse_err(0, "empty vocabulary file"))?;
        let header = header.map_err(|e| parse_err(0, &e.to_string()))?;
        let count: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| parse_err(0, "expected header `ehrseq-vocab v1 <count>`"))?;
        let mut tokens = Vec::with_capacity(count);
        let mut counts = Vec::with_capacity(count);
        for (i, line) in lines {
            let line = line.map_err(|e| parse_err(i, &e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (tok, n) = line.split_once('\t').unwrap_or((line.as_str(), "0"));
            tokens.push(tok.to_string());
            counts.push(n.trim().parse().map_err(|_| parse_err(i, "bad count"))?);
        }
        if tokens.len() != count || count <= ICD_OFFSET {
            return Err(parse_err(0, &format!("header declares {count} tokens, found {}", tokens.len())));
        }
        for (i, want) in AUX_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(parse_err(i + 1, "auxiliary token layout differs"));
            }
        }
        Ok(Self::from_parts(tokens, counts))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}
