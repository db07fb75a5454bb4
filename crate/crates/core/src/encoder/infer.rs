use crate::corpus::vocab::{Vocabulary, MASK, PAD};
use crate::corpus::{encode_history, EncodedSample, PatientHistory};
use crate::encoder::{Batch, EncoderModel};
use crate::{Error, Result};

const INFER_BATCH: usize = 64;

/// `[CLS][GENDER][AGE][last <= H-1 events][MASK]` for next-code queries.
pub fn prediction_sample(model: &EncoderModel, prefix: &PatientHistory, v: &Vocabulary) -> EncodedSample {
    let mut opts = model.config.encode_options();
    opts.max_events -= 1;
    let mut s = encode_history(prefix, v, opts);
    s.token_ids.push(PAD);
    s.attention_mask.push(0);
    s.token_ids[s.length] = MASK;
    s.attention_mask[s.length] = 1;
    s.length += 1;
    s
}

/// Probability over the vocabulary of the code following `prefix`, with
/// all mass on ICD tokens.
pub fn predict_next_distribution(model: &EncoderModel, prefix: &PatientHistory, v: &Vocabulary) -> Result<Vec<f64>> {
    Ok(predict_next_distributions(model, std::slice::from_ref(prefix), v)?.remove(0))
}

pub fn predict_next_distributions(
    model: &EncoderModel,
    prefixes: &[PatientHistory],
    v: &Vocabulary,
) -> Result<Vec<Vec<f64>>> {
    if model.vocab_hash != v.hash() {
        return Err(Error::VocabMismatch {
            expected: v.hash(),
            found: model.vocab_hash.clone(),
        });
    }
    let icd = v.icd_range();
    let mut out = Vec::with_capacity(prefixes.len());
    for chunk in prefixes.chunks(INFER_BATCH) {
        let samples: Vec<EncodedSample> = chunk.iter().map(|p| prediction_sample(model, p, v)).collect();
        let batch = Batch::from_samples(&samples);
        let rows: Vec<usize> = samples
            .iter()
            .enumerate()
            .map(|(b, s)| b * batch.len + s.length - 1)
            .collect();
        let logits = model.logits_at(&batch, &rows)?;
        let vsize = model.config.vocab_size;
        for row in logits.data().chunks(vsize) {
            let max = row[icd.clone()].iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
            let mut probs = vec![0.0; vsize];
            let mut total = 0.0;
            for i in icd.clone() {
                let e = (row[i] as f64 - max).exp();
                probs[i] = e;
                total += e;
            }
            probs[icd.clone()].iter_mut().for_each(|p| *p /= total);
            out.push(probs);
        }
    }
    Ok(out)
}
