//! Dataset schema, caption vocabulary, tensor files and the synthetic generator.

pub mod dataset;
pub mod synthetic;
pub mod tensor_file;
pub mod vocab;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dataset::{load_dataset, write_dataset, GroundTruthEvent, TimeStamp, VideoRecord};
pub use synthetic::{generate_synthetic_dataset, SyntheticDataset};
pub use tensor_file::{read_tensor, write_tensor};
pub use vocab::{build_text_vocabulary, detokenize, tokenize, TextVocabulary};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Noun,
    Verb,
    Other,
}

/// Word → part of speech, stored as `{"word": "noun" | "verb" | "other"}`.
pub type PosLexicon = BTreeMap<String, PosTag>;

pub fn read_lexicon(path: &Path) -> Result<PosLexicon> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_lexicon(path: &Path, lexicon: &PosLexicon) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(lexicon)?)?;
    Ok(())
}
