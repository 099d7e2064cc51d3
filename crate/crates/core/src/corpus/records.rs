//! Dataset records: reference paragraphs joined to image pairs, plus
//! corpus statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::{preprocess, sentence_count};
use super::CorpusError;
use crate::jsonl;
use crate::sampler::ImagePair;

/// One annotator paragraph for a pair, as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParagraphRecord {
    pub pair_id: String,
    pub rater_id: String,
    pub text: String,
}

/// A paragraph with its preprocessed token sequence.
#[derive(Debug, Clone)]
pub struct Paragraph {
    pub pair_id: String,
    pub rater_id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Paragraph {
    pub fn from_record(record: ParagraphRecord) -> Result<Self, CorpusError> {
        let tokens = preprocess(&record.text)?;
        Ok(Paragraph {
            pair_id: record.pair_id,
            rater_id: record.rater_id,
            text: record.text,
            tokens,
        })
    }
}

pub fn load_paragraphs(path: &Path) -> Result<Vec<Paragraph>, CorpusError> {
    let records: Vec<ParagraphRecord> = jsonl::read_jsonl(path)?;
    records.into_iter().map(Paragraph::from_record).collect()
}

pub fn write_paragraphs(path: &Path, paragraphs: &[ParagraphRecord]) -> Result<(), CorpusError> {
    Ok(jsonl::write_jsonl(path, paragraphs)?)
}

/// A reference caption inside a joined record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reference {
    pub rater_id: String,
    pub text: String,
}

/// An image pair joined with its reference paragraphs (target five).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub pair: ImagePair,
    pub references: Vec<Reference>,
}

impl DatasetRecord {
    pub fn reference_tokens(&self) -> Result<Vec<Vec<String>>, CorpusError> {
        self.references.iter().map(|r| preprocess(&r.text)).collect()
    }
}

pub fn load_records(path: &Path) -> Result<Vec<DatasetRecord>, CorpusError> {
    let records: Vec<DatasetRecord> = jsonl::read_jsonl(path)?;
    for r in &records {
        if r.references.is_empty() {
            return Err(CorpusError::MissingReferences(r.pair.pair_id.clone()));
        }
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<(), CorpusError> {
    Ok(jsonl::write_jsonl(path, records)?)
}

/// Join pairs with their paragraphs; every pair must have at least one.
pub fn join_records(
    pairs: &[ImagePair],
    paragraphs: &[Paragraph],
) -> Result<Vec<DatasetRecord>, CorpusError> {
    let mut by_pair: BTreeMap<&str, Vec<&Paragraph>> = BTreeMap::new();
    for p in paragraphs {
        by_pair.entry(p.pair_id.as_str()).or_default().push(p);
    }
    pairs
        .iter()
        .map(|pair| {
            let refs = by_pair
                .get(pair.pair_id.as_str())
                .ok_or_else(|| CorpusError::MissingReferences(pair.pair_id.clone()))?;
            Ok(DatasetRecord {
                pair: pair.clone(),
                references: refs
                    .iter()
                    .map(|p| Reference {
                        rater_id: p.rater_id.clone(),
                        text: p.text.clone(),
                    })
                    .collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub paragraphs: usize,
    pub paragraphs_per_pair: f64,
    pub tokens_per_paragraph: f64,
    pub sentences_per_paragraph: f64,
}

/// Means over all paragraphs; sentence counts use terminal-punctuation
/// segmentation on the raw text, token counts use the preprocessed
/// sequences.
pub fn corpus_stats(records: &[DatasetRecord]) -> Result<CorpusStats, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut paragraphs = 0usize;
    let mut tokens = 0usize;
    let mut sentences = 0usize;
    for record in records {
        for reference in &record.references {
            paragraphs += 1;
            tokens += preprocess(&reference.text)?.len();
            sentences += sentence_count(&reference.text);
        }
    }
    Ok(CorpusStats {
        pairs: records.len(),
        paragraphs,
        paragraphs_per_pair: paragraphs as f64 / records.len() as f64,
        tokens_per_paragraph: tokens as f64 / paragraphs as f64,
        sentences_per_paragraph: sentences as f64 / paragraphs as f64,
    })
}
