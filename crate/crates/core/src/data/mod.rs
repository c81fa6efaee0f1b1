//! Examples, tokenization, batching and synthetic task generation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod batch;
mod synthetic;
mod tokenizer;
mod tsv;

pub use batch::{batch_order, Batches, EncodedSplit, TokenBatch};
pub use synthetic::{make_synthetic, SyntheticSpec};
pub use tokenizer::{split_words, Vocab, CLS, PAD, SEP, UNK};
pub use tsv::{load_tsv, write_tsv, TsvSchema};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("line {line}: unknown label `{label}`")]
    Label { line: usize, label: String },
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("{0} is empty")]
    Empty(&'static str),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// One labelled sentence or sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextExample {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

/// Train, dev and test splits with the vocabulary built from train.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<TextExample>,
    pub dev: Vec<TextExample>,
    pub test: Vec<TextExample>,
    pub num_classes: usize,
    pub vocab: Vocab,
}

impl DatasetSplits {
    /// Builds the vocabulary from `train` and checks labels and disjointness.
    pub fn new(
        train: Vec<TextExample>,
        dev: Vec<TextExample>,
        test: Vec<TextExample>,
        num_classes: usize,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(DataError::Empty("train split"));
        }
        for (name, split) in [("train", &train), ("dev", &dev), ("test", &test)] {
            if let Some(ex) = split.iter().find(|e| e.label >= num_classes) {
                return Err(DataError::Config(format!(
                    "{name} split has label {} but only {num_classes} classes",
                    ex.label
                )));
            }
            if split.iter().any(|e| e.text_a.trim().is_empty()) {
                return Err(DataError::Config(format!(
                    "{name} split has an empty text_a"
                )));
            }
        }
        let vocab = Vocab::build(train.iter());
        Ok(DatasetSplits {
            train,
            dev,
            test,
            num_classes,
            vocab,
        })
    }

    /// True when no text (a, b) pair appears in more than one split.
    pub fn disjoint(&self) -> bool {
        use std::collections::HashSet;
        let key = |e: &TextExample| (e.text_a.clone(), e.text_b.clone());
        let train: HashSet<_> = self.train.iter().map(key).collect();
        let dev: HashSet<_> = self.dev.iter().map(key).collect();
        self.test
            .iter()
            .map(key)
            .all(|k| !train.contains(&k) && !dev.contains(&k))
            && dev.iter().all(|k| !train.contains(k))
    }

    pub fn encode(&self, max_seq_len: usize) -> (EncodedSplit, EncodedSplit, EncodedSplit) {
        let enc = |s: &[TextExample]| EncodedSplit::encode(s, &self.vocab, max_seq_len);
        (enc(&self.train), enc(&self.dev), enc(&self.test))
    }
}
