use super::vocab::{self, Vocabulary};
use super::PatientHistory;

/// Layout `[CLS][GENDER][AGE][event_1 .. event_k][PAD ..]` of length
/// `3 + max_events`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    /// Non-PAD positions.
    pub length: usize,
    pub unk_count: usize,
    pub age_clamped: bool,
    /// Oldest events dropped to fit `max_events`.
    pub truncated: usize,
}

impl EncodedSample {
    pub fn event_positions(&self) -> std::ops::Range<usize> {
        3..self.length
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Event slots (H).
    pub max_events: usize,
    /// When false the gender and age tokens are replaced by reserved
    /// placeholders, keeping the sequence geometry.
    pub demographics: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            max_events: 128,
            demographics: true,
        }
    }
}

pub fn encode_history(p: &PatientHistory, v: &Vocabulary, opts: EncodeOptions) -> EncodedSample {
    let h = opts.max_events;
    let mut ids = Vec::with_capacity(3 + h);
    ids.push(vocab::CLS);
    let age_clamped = p.age_years > vocab::MAX_AGE;
    if opts.demographics {
        ids.push(v.gender_id(p.gender));
        ids.push(v.age_id(p.age_years));
    } else {
        ids.push(vocab::RES5);
        ids.push(vocab::RES6);
    }
    let skip = p.events.len().saturating_sub(h);
    let mut unk_count = 0;
    for e in &p.events[skip..] {
        ids.push(v.icd_id(&e.code).unwrap_or_else(|| {
            unk_count += 1;
            vocab::UNK
        }));
    }
    let length = ids.len();
    ids.resize(3 + h, vocab::PAD);
    let attention_mask = ids.iter().map(|&t| (t != vocab::PAD) as u8).collect();
    EncodedSample {
        token_ids: ids,
        attention_mask,
        length,
        unk_count,
        age_clamped,
        truncated: skip,
    }
}

/// Token strings of the non-PAD positions.
pub fn decode_tokens<'v>(s: &EncodedSample, v: &'v Vocabulary) -> Vec<&'v str> {
    s.token_ids[..s.length]
        .iter()
        .map(|&i| v.token(i).unwrap_or("[UNK]"))
        .collect()
}
