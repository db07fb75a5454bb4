use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate_visit_prediction, split_final_visit, CategoryMap, EvalReport, PooledHeadScorer};
use crate::corpus::{encode_history, PatientHistory, Vocabulary};
use crate::embedding::PoolingStrategy;
use crate::encoder::{train, EncoderModel, ModelConfig, TrainOptions};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub pooling: PoolingStrategy,
    pub positional: bool,
    pub demographics: bool,
}

impl AblationVariant {
    /// The full grid: {cls, concat_mean_max} x positional x demographics.
    pub fn grid() -> Vec<Self> {
        let mut out = Vec::new();
        for pooling in [PoolingStrategy::Cls, PoolingStrategy::ConcatMeanMax] {
            for positional in [true, false] {
                for demographics in [true, false] {
                    out.push(Self {
                        pooling,
                        positional,
                        demographics,
                    });
                }
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let mut n = self.pooling.as_str().to_string();
        if !self.positional {
            n.push_str("_wo_positional");
        }
        if !self.demographics {
            n.push_str("_wo_gender_age");
        }
        n
    }
}

/// Trains one encoder per distinct (positional, demographics) pair with the
/// same seed, then scores every variant by cross-validated next-visit
/// Precision@k of a ridge head on its pooled embeddings. The encoders are
/// pretrained on histories with each patient's final visit removed, so the
/// evaluation targets never enter pretraining. A failing variant yields an
/// `Err` in its slot and the others still run.
#[allow(clippy::too_many_arguments)]
pub fn ablation_suite(
    corpus: &[PatientHistory],
    vocab: &Vocabulary,
    base: &ModelConfig,
    variants: &[AblationVariant],
    cmap: &CategoryMap,
    ks: &[usize],
    folds: usize,
    seed: u64,
    lambda: f64,
) -> Vec<(AblationVariant, Result<EvalReport>)> {
    let pretrain: Vec<PatientHistory> = corpus
        .iter()
        .map(|p| split_final_visit(p).map_or_else(|| p.clone(), |(prefix, _)| prefix))
        .collect();
    let mut models: BTreeMap<(bool, bool), Result<EncoderModel>> = BTreeMap::new();
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let model = models.entry((v.positional, v.demographics)).or_insert_with(|| {
            let cfg = ModelConfig {
                use_positional: v.positional,
                demographics: v.demographics,
                vocab_size: vocab.len(),
                ..base.clone()
            };
            let mut model = EncoderModel::new(cfg, vocab.hash(), seed)?;
            let enc = model.config.encode_options();
            let samples: Vec<_> = pretrain.iter().map(|p| encode_history(p, vocab, enc)).collect();
            tracing::info!(positional = v.positional, demographics = v.demographics, "pretraining ablation encoder");
            train(&mut model, &samples, &TrainOptions::default(), |_| {})?;
            Ok(model)
        });
        let result = match model {
            Ok(model) => {
                let mut scorer = PooledHeadScorer::new(model, vocab, cmap, v.pooling, lambda);
                evaluate_visit_prediction(&mut scorer, corpus, cmap, ks, folds, seed).map(|mut r| {
                    r.variant = v.name();
                    r
                })
            }
            Err(e) => Err(crate::Error::InvalidInput(format!("training failed: {e}"))),
        };
        if let Err(e) = &result {
            tracing::warn!(variant = %v.name(), error = %e, "ablation variant failed");
        }
        out.push((*v, result));
    }
    out
}
