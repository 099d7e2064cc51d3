//! Quantized-embedding nearest-neighbour index.
//!
//! Embeddings are scalar-quantized to 8 bits per dimension over the
//! per-dimension data range; queries run an exhaustive scan over the codes,
//! which is exact with respect to the quantized vectors and plenty fast at
//! desk scale.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::taxonomy::TaxonId;

const LEVELS: usize = 256;
/// Upper bound on the number of sampled pairs used to calibrate the
/// similarity scale.
const SCALE_SAMPLE_PAIRS: usize = 10_000;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("no embeddings supplied")]
    Empty,
    #[error("dimension mismatch: expected {expected}, {image_id} has {got}")]
    DimensionMismatch {
        image_id: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding {image_id} component {component} is not finite")]
    NonFinite { image_id: String, component: usize },
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error("image {0} not present in index")]
    UnknownImage(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    File(#[from] JsonlError),
}

/// Per-image dense activation vector tagged with its class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    pub image_id: String,
    pub class_id: TaxonId,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(image_id: impl Into<String>, class_id: impl Into<TaxonId>, vector: Vec<f64>) -> Self {
        Embedding {
            image_id: image_id.into(),
            class_id: class_id.into(),
            vector,
        }
    }

    fn validate(&self, expected_dim: Option<usize>) -> Result<(), IndexError> {
        if let Some(dim) = expected_dim {
            if self.vector.len() != dim {
                return Err(IndexError::DimensionMismatch {
                    image_id: self.image_id.clone(),
                    expected: dim,
                    got: self.vector.len(),
                });
            }
        }
        if let Some(component) = self.vector.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite {
                image_id: self.image_id.clone(),
                component,
            });
        }
        Ok(())
    }
}

/// Load a line-delimited `{image_id, class_id, vector:[...]}` file,
/// validating finiteness and dimensional consistency.
pub fn load_embeddings(path: &Path) -> Result<Vec<Embedding>, IndexError> {
    let embeddings: Vec<Embedding> = jsonl::read_jsonl(path)?;
    let mut dim = None;
    for e in &embeddings {
        e.validate(dim)?;
        dim.get_or_insert(e.vector.len());
    }
    Ok(embeddings)
}

/// Result of a k-NN query; `truncated` is set when fewer than `k`
/// candidates were available.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbors {
    pub ids: Vec<String>,
    pub truncated: bool,
}

/// 8-bit uniform scalar quantizer plus code matrix and id table.
#[derive(Debug, Clone)]
pub struct QuantizedIndex {
    dim: usize,
    mins: Vec<f64>,
    maxs: Vec<f64>,
    codes: Vec<u8>,
    ids: Vec<String>,
    classes: Vec<TaxonId>,
    by_id: BTreeMap<String, usize>,
    scale: f64,
}

impl QuantizedIndex {
    /// Build an index over the given embeddings. Per-dimension ranges come
    /// from the data; the similarity scale is calibrated to the median
    /// pairwise distance over at most [`SCALE_SAMPLE_PAIRS`] sampled pairs.
    pub fn build(embeddings: &[Embedding]) -> Result<Self, IndexError> {
        if embeddings.is_empty() {
            return Err(IndexError::Empty);
        }
        let dim = embeddings[0].vector.len();
        let mut by_id = BTreeMap::new();
        for (row, e) in embeddings.iter().enumerate() {
            e.validate(Some(dim))?;
            if by_id.insert(e.image_id.clone(), row).is_some() {
                return Err(IndexError::DuplicateImage(e.image_id.clone()));
            }
        }

        let mut mins = vec![f64::INFINITY; dim];
        let mut maxs = vec![f64::NEG_INFINITY; dim];
        for e in embeddings {
            for (d, &v) in e.vector.iter().enumerate() {
                mins[d] = mins[d].min(v);
                maxs[d] = maxs[d].max(v);
            }
        }

        let mut codes = Vec::with_capacity(embeddings.len() * dim);
        for e in embeddings {
            for (d, &v) in e.vector.iter().enumerate() {
                codes.push(quantize_component(v, mins[d], maxs[d]));
            }
        }

        let ids: Vec<String> = embeddings.iter().map(|e| e.image_id.clone()).collect();
        let classes: Vec<TaxonId> = embeddings.iter().map(|e| e.class_id.clone()).collect();

        let mut index = QuantizedIndex {
            dim,
            mins,
            maxs,
            codes,
            ids,
            classes,
            by_id,
            scale: 1.0,
        };
        index.scale = index.calibrate_scale();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.by_id.contains_key(image_id)
    }

    pub fn class_of(&self, image_id: &str) -> Option<&TaxonId> {
        self.by_id.get(image_id).map(|&row| &self.classes[row])
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Scale used by [`QuantizedIndex::visual_similarity`]; the median
    /// pairwise distance of the indexed set.
    pub fn calibration_scale(&self) -> f64 {
        self.scale
    }

    /// Reconstruct the quantized vector for a row.
    pub fn dequantized(&self, row: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|d| dequantize_component(self.codes[row * self.dim + d], self.mins[d], self.maxs[d]))
            .collect()
    }

    pub fn row_of(&self, image_id: &str) -> Option<usize> {
        self.by_id.get(image_id).copied()
    }

    /// Squared L2 distance between two rows' quantized vectors.
    fn distance_sq(&self, a: usize, b: usize) -> f64 {
        let ca = &self.codes[a * self.dim..(a + 1) * self.dim];
        let cb = &self.codes[b * self.dim..(b + 1) * self.dim];
        let mut acc = 0.0;
        for d in 0..self.dim {
            let va = dequantize_component(ca[d], self.mins[d], self.maxs[d]);
            let vb = dequantize_component(cb[d], self.mins[d], self.maxs[d]);
            let diff = va - vb;
            acc += diff * diff;
        }
        acc
    }

    /// The `k` nearest images to `query` by quantized L2 distance,
    /// ascending, excluding the query itself and everything in `exclude`.
    /// Ties break by ascending image id.
    pub fn knn(
        &self,
        query: &str,
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Neighbors, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let query_row = self
            .row_of(query)
            .ok_or_else(|| IndexError::UnknownImage(query.to_owned()))?;
        let mut candidates: Vec<(f64, &String)> = Vec::with_capacity(self.len().saturating_sub(1));
        for row in 0..self.len() {
            if row == query_row || exclude.contains(&self.ids[row]) || self.ids[row] == query {
                continue;
            }
            candidates.push((self.distance_sq(query_row, row), &self.ids[row]));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let truncated = candidates.len() < k;
        let ids = candidates
            .into_iter()
            .take(k)
            .map(|(_, id)| id.clone())
            .collect();
        Ok(Neighbors { ids, truncated })
    }

    /// Visual similarity in `[0, 1]`: `exp(-dist / scale)` over the raw
    /// vectors, 1 iff identical, strictly decreasing in distance.
    pub fn visual_similarity(&self, a: &Embedding, b: &Embedding) -> Result<f64, IndexError> {
        visual_similarity_scaled(a, b, self.scale)
    }

    fn calibrate_scale(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 1.0;
        }
        let total_pairs = n * (n - 1) / 2;
        let mut distances = Vec::new();
        if total_pairs <= SCALE_SAMPLE_PAIRS {
            for a in 0..n {
                for b in (a + 1)..n {
                    distances.push(self.distance_sq(a, b).sqrt());
                }
            }
        } else {
            // Fixed internal stream keeps the build deterministic.
            let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1e);
            let rows: Vec<usize> = (0..n).collect();
            while distances.len() < SCALE_SAMPLE_PAIRS {
                let pick: Vec<&usize> = rows.choose_multiple(&mut rng, 2).collect();
                distances.push(self.distance_sq(*pick[0], *pick[1]).sqrt());
            }
        }
        distances.sort_by(f64::total_cmp);
        let mid = distances.len() / 2;
        let median = if distances.len() % 2 == 0 {
            0.5 * (distances[mid - 1] + distances[mid])
        } else {
            distances[mid]
        };
        if median > 0.0 {
            median
        } else {
            1.0
        }
    }
}

/// `exp(-||a - b||_2 / scale)` with an explicit calibration scale.
pub fn visual_similarity_scaled(
    a: &Embedding,
    b: &Embedding,
    scale: f64,
) -> Result<f64, IndexError> {
    if a.vector.len() != b.vector.len() {
        return Err(IndexError::DimensionMismatch {
            image_id: b.image_id.clone(),
            expected: a.vector.len(),
            got: b.vector.len(),
        });
    }
    let dist = l2_distance(&a.vector, &b.vector);
    Ok((-dist / scale).exp())
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn quantize_component(v: f64, min: f64, max: f64) -> u8 {
    if max <= min {
        return 0;
    }
    let step = (max - min) / (LEVELS - 1) as f64;
    let code = ((v - min) / step).round();
    code.clamp(0.0, (LEVELS - 1) as f64) as u8
}

fn dequantize_component(code: u8, min: f64, max: f64) -> f64 {
    if max <= min {
        return min;
    }
    let step = (max - min) / (LEVELS - 1) as f64;
    min + code as f64 * step
}
