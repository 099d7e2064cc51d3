//! Non-neural reference generators: most-frequent paragraph, empirical
//! text sampling, and nearest-neighbour caption transfer.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;
use crate::corpus::{preprocess, DatasetRecord};
use crate::grids::GridStore;

fn record_paragraphs(records: &[DatasetRecord]) -> Result<Vec<Vec<String>>, EvalError> {
    let mut out = Vec::new();
    for record in records {
        for reference in &record.references {
            out.push(preprocess(&reference.text)?);
        }
    }
    if out.is_empty() {
        return Err(EvalError::EmptyTraining);
    }
    Ok(out)
}

/// Emits the single most frequent training paragraph for every input, tie
/// broken lexicographically on the canonical token form.
#[derive(Debug, Clone)]
pub struct MostFrequentBaseline {
    paragraph: Vec<String>,
}

impl MostFrequentBaseline {
    pub fn fit(records: &[DatasetRecord]) -> Result<Self, EvalError> {
        let mut counts: BTreeMap<String, (usize, Vec<String>)> = BTreeMap::new();
        for tokens in record_paragraphs(records)? {
            let key = tokens.join(" ");
            counts.entry(key).or_insert((0, tokens)).0 += 1;
        }
        // BTreeMap iteration is lexicographic, so the first maximum is the
        // lexicographically smallest among ties.
        let (_, (_, paragraph)) = counts
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| b.0.cmp(a.0)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .ok_or(EvalError::EmptyTraining)?;
        Ok(MostFrequentBaseline { paragraph })
    }

    pub fn generate(&self) -> Vec<String> {
        self.paragraph.clone()
    }
}

/// Samples a training paragraph with probability proportional to its
/// training frequency.
#[derive(Debug, Clone)]
pub struct TextOnlyBaseline {
    paragraphs: Vec<Vec<String>>,
    rng: ChaCha8Rng,
}

impl TextOnlyBaseline {
    pub fn fit(records: &[DatasetRecord], seed: u64) -> Result<Self, EvalError> {
        Ok(TextOnlyBaseline {
            paragraphs: record_paragraphs(records)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn generate(&mut self) -> Vec<String> {
        let idx = self.rng.gen_range(0..self.paragraphs.len());
        self.paragraphs[idx].clone()
    }
}

/// Embeds both query images by mean-pooling their feature grids, finds
/// the training pair with the lowest total L2 distance, and samples one
/// of its paragraphs. Distance ties break by ascending pair id.
#[derive(Debug, Clone)]
pub struct NearestNeighborBaseline {
    train: Vec<TrainEntry>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
struct TrainEntry {
    pair_id: String,
    e1: Vec<f64>,
    e2: Vec<f64>,
    paragraphs: Vec<Vec<String>>,
}

impl NearestNeighborBaseline {
    pub fn fit(records: &[DatasetRecord], grids: &GridStore, seed: u64) -> Result<Self, EvalError> {
        let mut train = Vec::with_capacity(records.len());
        for record in records {
            let paragraphs: Result<Vec<Vec<String>>, EvalError> = record
                .references
                .iter()
                .map(|r| preprocess(&r.text).map_err(EvalError::from))
                .collect();
            train.push(TrainEntry {
                pair_id: record.pair.pair_id.clone(),
                e1: grids.mean_pooled(&record.pair.i1)?,
                e2: grids.mean_pooled(&record.pair.i2)?,
                paragraphs: paragraphs?,
            });
        }
        if train.is_empty() {
            return Err(EvalError::EmptyTraining);
        }
        train.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        Ok(NearestNeighborBaseline {
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Total distance `||q1 - t1|| + ||q2 - t2||` minimized over training
    /// pairs.
    pub fn generate(&mut self, query1: &[f64], query2: &[f64]) -> Result<Vec<String>, EvalError> {
        let best = self
            .train
            .iter()
            .min_by(|a, b| {
                let da = total_distance(query1, query2, a);
                let db = total_distance(query1, query2, b);
                da.total_cmp(&db).then_with(|| a.pair_id.cmp(&b.pair_id))
            })
            .expect("training set validated nonempty");
        let idx = self.rng.gen_range(0..best.paragraphs.len());
        Ok(best.paragraphs[idx].clone())
    }

    pub fn nearest_pair_id(&self, query1: &[f64], query2: &[f64]) -> &str {
        self.train
            .iter()
            .min_by(|a, b| {
                let da = total_distance(query1, query2, a);
                let db = total_distance(query1, query2, b);
                da.total_cmp(&db).then_with(|| a.pair_id.cmp(&b.pair_id))
            })
            .map(|e| e.pair_id.as_str())
            .expect("training set validated nonempty")
    }
}

fn total_distance(q1: &[f64], q2: &[f64], entry: &TrainEntry) -> f64 {
    l2(q1, &entry.e1) + l2(q2, &entry.e2)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
