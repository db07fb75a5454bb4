//! Patient histories, the token vocabulary, and corpus generators.

mod encode;
mod filter;
mod history;
mod icd;
pub mod insurance;
pub mod io;
pub mod synth;
pub mod vocab;

pub use encode::{decode_tokens, encode_history, EncodeOptions, EncodedSample};
pub use filter::{filter_corpus, CorpusStats};
pub use history::{group_visits, Event, Gender, PatientHistory, Visit};
pub use icd::IcdCode;
pub use insurance::{generate_synthetic_insurance, ApplicationRecord, InsuranceConfig};
pub use io::{ingest_corpus, CorpusFormat, IngestReport};
pub use synth::{generate_synthetic_corpus, GeneratorConfig, SyntheticWorld};
pub use vocab::{TokenClass, Vocabulary};
