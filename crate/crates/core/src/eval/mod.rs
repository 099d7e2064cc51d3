//! Automatic caption metrics, the multi-reference evaluation protocol,
//! the one-vs-rest human baseline, and the non-neural baselines.

pub mod baselines;
pub mod metrics;

pub use baselines::{MostFrequentBaseline, NearestNeighborBaseline, TextOnlyBaseline};
pub use metrics::{bleu4, cider_d, human_baseline, rouge_l, score, Metric};

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{preprocess, CorpusError, DatasetRecord};
use crate::grids::GridError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no instances to score")]
    EmptyInstances,
    #[error("instance {pair_id} has {got} references, need more")]
    TooFewReferences { pair_id: String, got: usize },
    #[error("instance {0} has an empty candidate")]
    EmptyCandidate(String),
    #[error("reference corpus too uniform for idf (need >= 2 distinct reference sentences)")]
    DegenerateIdf,
    #[error("no training paragraphs")]
    EmptyTraining,
    #[error("no prediction for pair {0}")]
    MissingPrediction(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// One scored item: a candidate against its reference set, all
/// preprocessed identically.
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub pair_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Join prediction texts with dataset records into instances.
pub fn build_instances(
    records: &[DatasetRecord],
    predictions: &BTreeMap<String, String>,
) -> Result<Vec<EvalInstance>, EvalError> {
    records
        .iter()
        .map(|record| {
            let text = predictions
                .get(&record.pair.pair_id)
                .ok_or_else(|| EvalError::MissingPrediction(record.pair.pair_id.clone()))?;
            Ok(EvalInstance {
                pair_id: record.pair.pair_id.clone(),
                candidate: preprocess(text)?,
                references: record.reference_tokens()?,
            })
        })
        .collect()
}

/// Scores of one system on one split, mirroring the metric columns of the
/// results table.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub per_instance: Vec<InstanceScores>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceScores {
    pub pair_id: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Full report for a prediction set: corpus-level headline numbers plus a
/// per-instance breakdown (per-instance BLEU treats the instance as a
/// one-element corpus).
pub fn metric_report(instances: &[EvalInstance]) -> Result<MetricReport, EvalError> {
    let bleu = bleu4(instances)?;
    let rouge = rouge_l(instances)?;
    let cider = cider_d(instances)?;
    let per_instance = instances
        .iter()
        .map(|one| {
            Ok(InstanceScores {
                pair_id: one.pair_id.clone(),
                bleu4: bleu4(std::slice::from_ref(one))?,
                rouge_l: rouge_l(std::slice::from_ref(one))?,
                cider_d: cider,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    // Per-instance CIDEr-D reuses the split-level idf.
    let mut report = MetricReport {
        bleu4: bleu,
        rouge_l: rouge,
        cider_d: cider,
        per_instance,
    };
    for (scores, one) in report.per_instance.iter_mut().zip(instances) {
        scores.cider_d = cider_d_single(one, instances)?;
    }
    Ok(report)
}
