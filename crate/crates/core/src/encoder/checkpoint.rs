use std::io::{Read, Write};
use std::path::Path;

use ehrseq_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::model::param_specs;
use super::{EncoderModel, ModelConfig};
use crate::container;
use crate::{Error, Result};

pub(crate) const KIND: &str = "encoder";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    seed: u64,
    epochs_completed: usize,
    params: Vec<ParamEntry>,
}

impl EncoderModel {
    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let header = Header {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            seed: self.seed,
            epochs_completed: self.epochs_completed,
            params: param_specs(&self.config)
                .into_iter()
                .map(|(name, shape)| ParamEntry { name, shape })
                .collect(),
        };
        let blobs: Vec<&[f32]> = self.params.iter().map(|p| p.data()).collect();
        container::write_container(w, KIND, &header, &blobs)
    }

    /// Reads a checkpoint. With `expected_vocab_hash` set, a checkpoint
    /// trained on a different vocabulary is refused.
    pub fn read_from<R: Read>(r: R, expected_vocab_hash: Option<&str>) -> Result<Self> {
        let (header, blobs): (Header, _) = container::read_container(r, KIND)?;
        if let Some(expected) = expected_vocab_hash {
            if expected != header.vocab_hash {
                return Err(Error::VocabMismatch {
                    expected: expected.to_string(),
                    found: header.vocab_hash,
                });
            }
        }
        header.config.validate()?;
        let specs = param_specs(&header.config);
        if specs.len() != blobs.len() || specs.len() != header.params.len() {
            return Err(Error::Container(format!(
                "expected {} parameter blobs, found {}",
                specs.len(),
                blobs.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), (entry, data)) in specs.into_iter().zip(header.params.iter().zip(blobs)) {
            if entry.name != name || entry.shape != shape {
                return Err(Error::Container(format!(
                    "parameter {} {:?} does not match declared {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            params.push(Tensor::new(shape, data).map_err(|e| Error::Container(e.to_string()))?);
        }
        Ok(Self {
            config: header.config,
            params,
            vocab_hash: header.vocab_hash,
            seed: header.seed,
            epochs_completed: header.epochs_completed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), expected_vocab_hash)
    }
}
