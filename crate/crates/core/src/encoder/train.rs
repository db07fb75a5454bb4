use std::path::PathBuf;

use ehrseq_tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{mlm_loss_graph, mlm_mask, EncoderModel, MaskedBatch};
use crate::corpus::vocab::ICD_OFFSET;
use crate::corpus::EncodedSample;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Data-parallel workers per batch. Results for a fixed seed depend on
    /// the worker count only through floating-point summation order.
    pub workers: usize,
    /// Writes `epoch_<n>.ckpt` after every epoch when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy per masked token.
    pub mean_loss: f64,
    pub masked_tokens: usize,
    pub batches: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

fn graph_seed(seed: u64, epoch: usize, batch: usize, worker: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (batch as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (worker as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
}

/// Loss and gradients of one micro-batch.
fn micro_step(model: &EncoderModel, mb: &MaskedBatch, seed: u64) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::<f32>::new(seed);
    let vars: Vec<_> = model.params.iter().map(|p| g.param(p.clone())).collect();
    let loss = mlm_loss_graph(&mut g, &model.config, &vars, mb, true)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|v| grads.take(*v).expect("parameter gradient"))
        .collect();
    Ok((value, grads))
}

/// Trains `model` in place on `samples` with masked-token prediction for
/// `model.config.epochs` epochs. Every epoch shuffles the samples with the
/// model's seed, so a fixed seed and worker count reproduce the run exactly.
/// Batches without a masked position are skipped.
pub fn train(
    model: &mut EncoderModel,
    samples: &[EncodedSample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty corpus".into()));
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    let icd = ICD_OFFSET..cfg.vocab_size;
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape().to_vec()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &shapes,
        model.decay_mask(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let workers = opts.workers.max(1);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut tokens, mut batches) = (0.0, 0usize, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<EncodedSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let per = batch.len().div_ceil(workers);
            let micro: Vec<MaskedBatch> = batch
                .chunks(per)
                .map(|c| mlm_mask(c, cfg.mask_prob, cfg.masking, icd.clone(), &mut rng))
                .collect();
            let total: usize = micro.iter().map(MaskedBatch::masked_count).sum();
            if total == 0 {
                continue;
            }
            let model_ref = &*model;
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = if micro.len() == 1 {
                vec![micro_step(model_ref, &micro[0], graph_seed(model.seed, epoch, bi, 0))]
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = micro
                        .iter()
                        .enumerate()
                        .map(|(w, mb)| {
                            let seed = graph_seed(model_ref.seed, epoch, bi, w);
                            s.spawn(move || micro_step(model_ref, mb, seed))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                })
            };
            // Reduce in worker order, weighting by masked-token counts.
            let mut loss = 0.0;
            let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            for (mb, res) in micro.iter().zip(results) {
                let n = mb.masked_count();
                if n == 0 {
                    continue;
                }
                let (l, gs) = match res {
                    Err(Error::Tensor(TensorError::NonFinite { .. })) => {
                        return Err(Error::NonFiniteLoss { epoch, batch: bi })
                    }
                    other => other?,
                };
                let w = n as f64 / total as f64;
                loss += l * w;
                for (acc, g) in grads.iter_mut().zip(gs) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += (*v as f64 * w) as f32;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.params, &grads)?;
            loss_sum += loss * total as f64;
            tokens += total;
            batches += 1;
        }
        model.epochs_completed += 1;
        let er = EpochReport {
            epoch,
            mean_loss: if tokens == 0 { 0.0 } else { loss_sum / tokens as f64 },
            masked_tokens: tokens,
            batches,
            seconds: started.elapsed().as_secs_f64(),
        };
        tracing::info!(epoch, loss = er.mean_loss, secs = er.seconds, "epoch done");
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            model.save(&dir.join(format!("epoch_{epoch}.ckpt")))?;
        }
        on_epoch(&er);
        report.epochs.push(er);
    }
    Ok(report)
}
