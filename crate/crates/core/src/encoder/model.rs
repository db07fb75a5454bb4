use ehrseq_tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MaskedBatch, ModelConfig, IGNORE_INDEX};
use crate::corpus::vocab::PAD;
use crate::corpus::EncodedSample;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const PARAMS_PER_LAYER: usize = 16;

/// Parameter indices into the declared parameter order.
#[derive(Clone, Copy, Debug)]
struct Layout {
    pos: Option<usize>,
    emb_ln: usize,
    first_layer: usize,
    decoder: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let pos = cfg.use_positional.then_some(1);
        let emb_ln = 1 + usize::from(cfg.use_positional);
        let first_layer = emb_ln + 2;
        Self {
            pos,
            emb_ln,
            first_layer,
            decoder: first_layer + cfg.n_layers * PARAMS_PER_LAYER,
        }
    }

    fn layer(&self, l: usize, offset: usize) -> usize {
        self.first_layer + l * PARAMS_PER_LAYER + offset
    }
}

/// Declared parameter names and shapes.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (cfg.d, cfg.ffn_dim, cfg.vocab_size);
    let mut specs = vec![("tok_emb".to_string(), vec![v, d])];
    if cfg.use_positional {
        specs.push(("pos_emb".into(), vec![cfg.max_len, d]));
    }
    specs.push(("emb_ln.g".into(), vec![d]));
    specs.push(("emb_ln.b".into(), vec![d]));
    for l in 0..cfg.n_layers {
        let shapes: [(&str, Vec<usize>); PARAMS_PER_LAYER] = [
            ("q.w", vec![d, d]),
            ("q.b", vec![d]),
            ("k.w", vec![d, d]),
            ("k.b", vec![d]),
            ("v.w", vec![d, d]),
            ("v.b", vec![d]),
            ("o.w", vec![d, d]),
            ("o.b", vec![d]),
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("ff1.w", vec![d, f]),
            ("ff1.b", vec![f]),
            ("ff2.w", vec![f, d]),
            ("ff2.b", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
        ];
        for (name, shape) in shapes {
            specs.push((format!("layer{l}.{name}"), shape));
        }
    }
    specs.push(("decoder.w".into(), vec![d, v]));
    specs.push(("decoder.b".into(), vec![v]));
    specs
}

/// Token ids and key mask of a padded batch, row-major `batch x len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub keep: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    /// Pads every sample to the longest real length in the batch.
    pub fn from_samples(samples: &[EncodedSample]) -> Self {
        let len = samples.iter().map(|s| s.length).max().unwrap_or(0);
        Self::padded(samples, len)
    }

    /// Pads (or cuts the PAD tail) of every sample to exactly `len` slots.
    pub fn padded(samples: &[EncodedSample], len: usize) -> Self {
        let mut ids = Vec::with_capacity(samples.len() * len);
        for s in samples {
            let real = s.length.min(len);
            ids.extend_from_slice(&s.token_ids[..real]);
            ids.extend(std::iter::repeat_n(PAD, len - real));
        }
        let keep = ids.iter().map(|&t| t != PAD).collect();
        Self {
            ids,
            keep,
            batch: samples.len(),
            len,
        }
    }

    pub fn from_masked(mb: &MaskedBatch) -> Self {
        Self {
            ids: mb.input_ids.clone(),
            keep: mb.attention_mask.clone(),
            batch: mb.batch,
            len: mb.len,
        }
    }
}

pub struct ForwardOutput {
    /// `[batch, len, d]`
    pub hidden: Tensor<f32>,
    /// `[batch, len, vocab]`
    pub logits: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub(crate) params: Vec<Tensor<f32>>,
    pub vocab_hash: String,
    pub seed: u64,
    pub epochs_completed: usize,
}

impl EncoderModel {
    pub fn new(config: ModelConfig, vocab_hash: impl Into<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".g") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, config.init_std, &mut rng)
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            vocab_hash: vocab_hash.into(),
            seed,
            epochs_completed: 0,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        param_specs(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Static token embedding table `[vocab, d]`.
    pub fn token_embeddings(&self) -> &Tensor<f32> {
        &self.params[0]
    }

    /// Zeroes the decoder projection and bias, making every prediction
    /// uniform over the vocabulary.
    pub fn zero_decoder(&mut self) {
        let dec = Layout::new(&self.config).decoder;
        for p in &mut self.params[dec..dec + 2] {
            p.data_mut().fill(0.0);
        }
    }

    /// Weight decay applies to matrices and embedding tables, not to biases
    /// and layer-norm gains.
    pub(crate) fn decay_mask(&self) -> Vec<bool> {
        self.param_names()
            .iter()
            .map(|n| !(n.ends_with(".b") || n.ends_with(".g")))
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: batch.len,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn inference_graph(&self) -> (Graph<f32>, Vec<Var>) {
        let mut g = Graph::new(0);
        let vars = self.params.iter().map(|p| g.constant(p.clone())).collect();
        (g, vars)
    }

    /// Contextual vectors `[batch, len, d]` (dropout off).
    pub fn hidden(&self, batch: &Batch) -> Result<Tensor<f32>> {
        self.check_batch(batch)?;
        let (mut g, p) = self.inference_graph();
        let h = encode_graph(&mut g, &self.config, &p, batch, false)?;
        Ok(g.value(h)
            .clone()
            .reshaped(&[batch.batch, batch.len, self.config.d])?)
    }

    /// Logits `[rows.len(), vocab]` at flat positions `rows` (`b * len + i`).
    pub fn logits_at(&self, batch: &Batch, rows: &[usize]) -> Result<Tensor<f32>> {
        self.check_batch(batch)?;
        let (mut g, p) = self.inference_graph();
        let h = encode_graph(&mut g, &self.config, &p, batch, false)?;
        let out = decode_rows(&mut g, &self.config, &p, h, rows)?;
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let (mut g, p) = self.inference_graph();
        let h = encode_graph(&mut g, &self.config, &p, batch, false)?;
        let rows: Vec<usize> = (0..batch.batch * batch.len).collect();
        let logits = decode_rows(&mut g, &self.config, &p, h, &rows)?;
        let (b, l) = (batch.batch, batch.len);
        Ok(ForwardOutput {
            hidden: g.value(h).clone().reshaped(&[b, l, self.config.d])?,
            logits: g.value(logits).clone().reshaped(&[b, l, self.config.vocab_size])?,
        })
    }
}

/// Records the encoder stack on `g`, returning contextual vectors
/// `[batch * len, d]`. `p` holds one variable per declared parameter.
pub(crate) fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &[Var],
    batch: &Batch,
    train: bool,
) -> Result<Var> {
    let lay = Layout::new(cfg);
    let (b, l, d, h) = (batch.batch, batch.len, cfg.d, cfg.n_heads);
    let dh = cfg.head_dim();
    let mut x = g.embedding(p[0], &batch.ids)?;
    if let Some(pos) = lay.pos {
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pe = g.embedding(p[pos], &pos_ids)?;
        x = g.add(x, pe)?;
    }
    x = g.layer_norm(x, p[lay.emb_ln], p[lay.emb_ln + 1], LN_EPS)?;
    x = g.dropout(x, cfg.dropout, train)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    for layer in 0..cfg.n_layers {
        let w = |o: usize| p[lay.layer(layer, o)];
        let heads = |g: &mut Graph<T>, wi: usize| -> Result<Var> {
            let y = g.matmul(x, w(wi))?;
            let y = g.add_bias(y, w(wi + 1))?;
            let y = g.reshape(y, &[b, l, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[b * h, l, dh])?)
        };
        let q = heads(g, 0)?;
        let k = heads(g, 2)?;
        let v = heads(g, 4)?;
        let s = g.bmm(q, k, true)?;
        let s = g.scale(s, scale)?;
        let s = g.reshape(s, &[b, h, l, l])?;
        let s = g.mask_keys(s, &batch.keep)?;
        let a = g.softmax(s, 3)?;
        let a = g.dropout(a, cfg.dropout, train)?;
        let a = g.reshape(a, &[b * h, l, l])?;
        let ctx = g.bmm(a, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * l, d])?;
        let o = g.matmul(ctx, w(6))?;
        let o = g.add_bias(o, w(7))?;
        let o = g.dropout(o, cfg.dropout, train)?;
        let r = g.add(x, o)?;
        x = g.layer_norm(r, w(8), w(9), LN_EPS)?;
        let f = g.matmul(x, w(10))?;
        let f = g.add_bias(f, w(11))?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w(12))?;
        let f = g.add_bias(f, w(13))?;
        let f = g.dropout(f, cfg.dropout, train)?;
        let r = g.add(x, f)?;
        x = g.layer_norm(r, w(14), w(15), LN_EPS)?;
    }
    Ok(x)
}

fn decode_rows<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, p: &[Var], hidden: Var, rows: &[usize]) -> Result<Var> {
    let dec = Layout::new(cfg).decoder;
    let sel = g.select_rows(hidden, rows)?;
    let y = g.matmul(sel, p[dec])?;
    Ok(g.add_bias(y, p[dec + 1])?)
}

/// Mean cross-entropy over the masked positions of `mb`. Logits are only
/// computed at those positions.
pub fn mlm_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &[Var],
    mb: &MaskedBatch,
    train: bool,
) -> Result<Var> {
    let batch = Batch::from_masked(mb);
    let hidden = encode_graph(g, cfg, p, &batch, train)?;
    let rows: Vec<usize> = (0..mb.labels.len()).filter(|&i| mb.labels[i] != IGNORE_INDEX).collect();
    let targets: Vec<i64> = rows.iter().map(|&i| mb.labels[i]).collect();
    let logits = decode_rows(g, cfg, p, hidden, &rows)?;
    Ok(g.cross_entropy(logits, &targets, IGNORE_INDEX)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            max_len: 10,
            vocab_size: 120,
            dropout: 0.0,
            ..ModelConfig::desk(120)
        }
    }

    #[test]
    fn declared_order_and_count() {
        let m = EncoderModel::new(tiny(), "h", 1).unwrap();
        let names = m.param_names();
        assert_eq!(names.len(), 4 + 16 + 2);
        assert_eq!(&names[..3], &["tok_emb", "pos_emb", "emb_ln.g"]);
        assert_eq!(names.last().unwrap(), "decoder.b");
        let no_pos = EncoderModel::new(ModelConfig { use_positional: false, ..tiny() }, "h", 1).unwrap();
        assert!(!no_pos.param_names().iter().any(|n| n == "pos_emb"));
        let mask = m.decay_mask();
        assert!(mask[0] && !mask[2] && mask[names.len() - 2] && !mask[names.len() - 1]);
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let m = EncoderModel::new(tiny(), "h", 3).unwrap();
        let row = [2usize, 8, 20, 110, 115, 111];
        let batch = Batch {
            ids: row.iter().chain(&row).chain(&row).copied().collect(),
            keep: vec![true; 18],
            batch: 3,
            len: 6,
        };
        let out = m.forward(&batch).unwrap();
        let v = m.config.vocab_size;
        let data = out.logits.data();
        assert_eq!(&data[..6 * v], &data[6 * v..12 * v]);
        assert_eq!(&data[..6 * v], &data[12 * v..]);
    }

    #[test]
    fn too_long_sequence_rejected() {
        let m = EncoderModel::new(tiny(), "h", 3).unwrap();
        let batch = Batch {
            ids: vec![2; 11],
            keep: vec![true; 11],
            batch: 1,
            len: 11,
        };
        assert!(matches!(m.forward(&batch), Err(Error::SequenceTooLong { len: 11, max: 10 })));
    }
}
