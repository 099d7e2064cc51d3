//! Dataset records, text preprocessing, vocabulary, synthetic corpus
//! generation and corpus statistics.

pub mod records;
pub mod synthetic;
pub mod text;
pub mod vocab;

pub use records::{
    corpus_stats, join_records, load_paragraphs, load_records, write_paragraphs, write_records,
    CorpusStats, DatasetRecord, Paragraph, ParagraphRecord, Reference,
};
pub use synthetic::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};
pub use text::{detokenize, preprocess, sentence_count, MAX_TOKENS};
pub use vocab::Vocabulary;

use thiserror::Error;

use crate::jsonl::JsonlError;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty or whitespace-only text")]
    EmptyText,
    #[error("corpus has no paragraphs")]
    EmptyCorpus,
    #[error("pair {0} has no reference paragraphs")]
    MissingReferences(String),
    #[error("token id {0} outside vocabulary")]
    UnknownTokenId(usize),
    #[error("bad synthetic-corpus config: {0}")]
    BadSynthConfig(String),
    #[error("grid synthesis failed: {0}")]
    Grid(String),
    #[error("{0}")]
    Serde(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    File(#[from] JsonlError),
}
