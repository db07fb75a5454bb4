use std::ops::Range;

use rand::Rng;

use super::MaskingMode;
use crate::corpus::vocab::{MASK, PAD};
use crate::corpus::EncodedSample;

pub const IGNORE_INDEX: i64 = -100;

/// A batch padded to its longest member. All per-position vectors are
/// row-major `batch x len`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub input_ids: Vec<usize>,
    pub labels: Vec<i64>,
    pub attention_mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl MaskedBatch {
    pub fn masked_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Selects each event position independently with probability `mask_prob`
/// and corrupts it per `mode`. CLS, gender, age and PAD positions are never
/// selected. `icd` is the id range of ICD tokens used for random
/// replacement.
pub fn mlm_mask<R: Rng + ?Sized>(
    samples: &[EncodedSample],
    mask_prob: f64,
    mode: MaskingMode,
    icd: Range<usize>,
    rng: &mut R,
) -> MaskedBatch {
    let len = samples.iter().map(|s| s.length).max().unwrap_or(0);
    let batch = samples.len();
    let mut input_ids = vec![PAD; batch * len];
    let mut labels = vec![IGNORE_INDEX; batch * len];
    let mut attention_mask = vec![false; batch * len];
    let mask_prob = mask_prob.clamp(0.0, 1.0);
    for (b, s) in samples.iter().enumerate() {
        let row = b * len;
        input_ids[row..row + s.length].copy_from_slice(&s.token_ids[..s.length]);
        attention_mask[row..row + s.length].iter_mut().for_each(|m| *m = true);
        for pos in s.event_positions() {
            if !rng.random_bool(mask_prob) {
                continue;
            }
            let original = input_ids[row + pos];
            labels[row + pos] = original as i64;
            input_ids[row + pos] = match mode {
                MaskingMode::Plain => MASK,
                MaskingMode::Bert => {
                    let u: f64 = rng.random();
                    if u < 0.8 {
                        MASK
                    } else if u < 0.9 && !icd.is_empty() {
                        rng.random_range(icd.clone())
                    } else {
                        original
                    }
                }
            };
        }
    }
    MaskedBatch {
        input_ids,
        labels,
        attention_mask,
        batch,
        len,
    }
}
