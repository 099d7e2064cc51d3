//! Pivot-branch stratified pair sampling.
//!
//! Pivots are drawn uniformly over eligible classes; each pivot branches
//! into `k_visual` nearest-neighbour pairs plus per-level taxonomic pairs
//! sampled round-robin over the disjoint partitions of the taxonomy.
//! Level 1 means "same class, different image"; level `l >= 2` draws from
//! the partition of classes whose lowest common ancestor with the pivot
//! class sits exactly `l - 1` levels up.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{IndexError, QuantizedIndex};
use crate::jsonl::{self, JsonlError};
use crate::taxonomy::{TaxonId, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("only {eligible} classes satisfy the pivot requirements, {required} needed")]
    InsufficientEligibleClasses { eligible: usize, required: usize },
    #[error("class {0} has observations but is not a leaf of the taxonomy")]
    UnknownClass(TaxonId),
    #[error("keep probability must be in (0, 1], got {0}")]
    InvalidKeepProbability(f64),
    #[error("image {0} referenced by pairs has no clarity rating")]
    UnratedImage(String),
    #[error("rating for image {image_id} by {rater_id}: overall flag does not equal the conjunction of the four criteria")]
    RatingInconsistent { image_id: String, rater_id: String },
    #[error("need at least 3 pivot classes to split, got {0}")]
    TooFewClasses(usize),
    #[error("split fractions must be positive and sum below 1, got train={train} dev={dev}")]
    InvalidFractions { train: f64, dev: f64 },
    #[error("branch budget for level {0} outside the taxonomy's level range 1..={1}")]
    BudgetLevelOutOfRange(u32, u32),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    File(#[from] JsonlError),
}

/// Pivot selection knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PivotSpec {
    /// Classes need at least this many recorded observations.
    pub min_observations: usize,
    /// Number of pivot classes to draw.
    pub pivot_count: usize,
    pub seed: u64,
}

impl Default for PivotSpec {
    fn default() -> Self {
        PivotSpec {
            min_observations: 4,
            pivot_count: 405,
            seed: 0,
        }
    }
}

/// Branch budgets: `k = k_visual + sum(k_taxonomic)`. Defaults give the
/// branching factor 12 (2 visual + 2 per taxonomic level 1..=5).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchBudget {
    pub k_visual: usize,
    pub k_taxonomic: BTreeMap<u32, usize>,
}

impl Default for BranchBudget {
    fn default() -> Self {
        BranchBudget {
            k_visual: 2,
            k_taxonomic: (1..=5).map(|l| (l, 2)).collect(),
        }
    }
}

impl BranchBudget {
    pub fn uniform(k_visual: usize, per_level: usize, levels: u32) -> Self {
        BranchBudget {
            k_visual,
            k_taxonomic: (1..=levels).map(|l| (l, per_level)).collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.k_visual + self.k_taxonomic.values().sum::<usize>()
    }
}

/// Where a pair's branch image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    Visual,
    Taxonomic { level: u32 },
}

impl Provenance {
    pub fn level(&self) -> Option<u32> {
        match self {
            Provenance::Visual => None,
            Provenance::Taxonomic { level } => Some(*level),
        }
    }
}

/// A sampled `(i1, i2)` pair with provenance; `i1` is the pivot image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PairWire", into = "PairWire")]
pub struct ImagePair {
    pub pair_id: String,
    pub i1: String,
    pub i2: String,
    pub provenance: Provenance,
    pub pivot_class: TaxonId,
}

#[derive(Serialize, Deserialize)]
struct PairWire {
    pair_id: String,
    i1: String,
    i2: String,
    provenance: String,
    level: Option<u32>,
    pivot_class: TaxonId,
}

impl From<ImagePair> for PairWire {
    fn from(p: ImagePair) -> Self {
        PairWire {
            pair_id: p.pair_id,
            i1: p.i1,
            i2: p.i2,
            provenance: match p.provenance {
                Provenance::Visual => "visual".to_owned(),
                Provenance::Taxonomic { .. } => "taxonomic".to_owned(),
            },
            level: match p.provenance {
                Provenance::Visual => None,
                Provenance::Taxonomic { level } => Some(level),
            },
            pivot_class: p.pivot_class,
        }
    }
}

impl TryFrom<PairWire> for ImagePair {
    type Error = String;

    fn try_from(w: PairWire) -> Result<Self, String> {
        let provenance = match (w.provenance.as_str(), w.level) {
            ("visual", None) => Provenance::Visual,
            ("taxonomic", Some(level)) => Provenance::Taxonomic { level },
            (p, l) => return Err(format!("bad provenance {p:?} with level {l:?}")),
        };
        if w.i1 == w.i2 {
            return Err(format!("pair {} has i1 == i2", w.pair_id));
        }
        Ok(ImagePair {
            pair_id: w.pair_id,
            i1: w.i1,
            i2: w.i2,
            provenance,
            pivot_class: w.pivot_class,
        })
    }
}

pub fn load_pairs(path: &Path) -> Result<Vec<ImagePair>, SamplerError> {
    Ok(jsonl::read_jsonl(path)?)
}

pub fn write_pairs(path: &Path, pairs: &[ImagePair]) -> Result<(), SamplerError> {
    Ok(jsonl::write_jsonl(path, pairs)?)
}

/// One recorded observation of a class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub image_id: String,
    pub class_id: TaxonId,
    /// Pre-vetted clarity flag; stands in for the manual pivot review.
    pub clear: bool,
}

pub type ObservationMap = BTreeMap<TaxonId, Vec<Observation>>;

/// Load `{image_id, class_id, clear}` records grouped by class, each
/// class's list sorted by image id.
pub fn load_observations(path: &Path) -> Result<ObservationMap, SamplerError> {
    let records: Vec<Observation> = jsonl::read_jsonl(path)?;
    Ok(group_observations(records))
}

pub fn group_observations(records: Vec<Observation>) -> ObservationMap {
    let mut map: ObservationMap = BTreeMap::new();
    for record in records {
        map.entry(record.class_id.clone()).or_default().push(record);
    }
    for list in map.values_mut() {
        list.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }
    map
}

/// One rater's four-criterion clarity decision for an image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClarityRating {
    pub image_id: String,
    pub rater_id: String,
    pub single_instance: bool,
    pub animal_itself: bool,
    pub focus: bool,
    pub visibility: bool,
    pub overall: bool,
}

impl ClarityRating {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let conjunction = self.single_instance && self.animal_itself && self.focus && self.visibility;
        if self.overall != conjunction {
            return Err(SamplerError::RatingInconsistent {
                image_id: self.image_id.clone(),
                rater_id: self.rater_id.clone(),
            });
        }
        Ok(())
    }
}

pub fn load_ratings(path: &Path) -> Result<Vec<ClarityRating>, SamplerError> {
    let ratings: Vec<ClarityRating> = jsonl::read_jsonl(path)?;
    for r in &ratings {
        r.validate()?;
    }
    Ok(ratings)
}

/// A selected pivot: a class together with its vetted pivot image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pivot {
    pub class: TaxonId,
    pub image_id: String,
}

/// Draw pivot classes uniformly without replacement from the classes that
/// (a) are taxonomy leaves, (b) meet the observation minimum and (c) have
/// at least one clear image. The pivot image is the first clear image in
/// ascending image-id order. Deterministic given the seed.
pub fn select_pivots(
    taxonomy: &Taxonomy,
    observations: &ObservationMap,
    spec: &PivotSpec,
) -> Result<Vec<Pivot>, SamplerError> {
    for class in observations.keys() {
        if !taxonomy.is_leaf(class) {
            return Err(SamplerError::UnknownClass(class.clone()));
        }
    }
    let mut eligible: Vec<(&TaxonId, &str)> = Vec::new();
    for (class, images) in observations {
        if images.len() < spec.min_observations {
            continue;
        }
        if let Some(first_clear) = images.iter().find(|o| o.clear) {
            eligible.push((class, &first_clear.image_id));
        }
    }
    if eligible.len() < spec.pivot_count {
        return Err(SamplerError::InsufficientEligibleClasses {
            eligible: eligible.len(),
            required: spec.pivot_count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    eligible.shuffle(&mut rng);
    let mut picked: Vec<Pivot> = eligible
        .into_iter()
        .take(spec.pivot_count)
        .map(|(class, image_id)| Pivot {
            class: class.clone(),
            image_id: image_id.to_owned(),
        })
        .collect();
    picked.sort_by(|a, b| a.class.cmp(&b.class));
    Ok(picked)
}

/// Allocates sequential, zero-padded pair ids in generation order.
#[derive(Debug, Default)]
pub struct PairIdAllocator(usize);

impl PairIdAllocator {
    pub fn next_id(&mut self) -> String {
        let id = format!("pair-{:06}", self.0);
        self.0 += 1;
        id
    }
}

/// A branch stratum that came up short of its budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub pivot_class: TaxonId,
    pub provenance: String,
    pub requested: usize,
    pub produced: usize,
}

#[derive(Debug, Default)]
pub struct BranchOutcome {
    pub pairs: Vec<ImagePair>,
    pub shortfalls: Vec<Shortfall>,
}

/// The `k_visual` nearest images to the pivot by quantized L2 distance,
/// excluding the pivot image itself.
pub fn branch_visual(
    pivot: &Pivot,
    index: &QuantizedIndex,
    k_visual: usize,
    ids: &mut PairIdAllocator,
) -> Result<BranchOutcome, SamplerError> {
    let mut outcome = BranchOutcome::default();
    if k_visual == 0 {
        return Ok(outcome);
    }
    let neighbors = index.knn(&pivot.image_id, k_visual, &BTreeSet::new())?;
    if neighbors.truncated {
        outcome.shortfalls.push(Shortfall {
            pivot_class: pivot.class.clone(),
            provenance: "visual".to_owned(),
            requested: k_visual,
            produced: neighbors.ids.len(),
        });
    }
    for i2 in neighbors.ids {
        outcome.pairs.push(ImagePair {
            pair_id: ids.next_id(),
            i1: pivot.image_id.clone(),
            i2,
            provenance: Provenance::Visual,
            pivot_class: pivot.class.clone(),
        });
    }
    Ok(outcome)
}

/// Per-level taxonomic branching. Candidate classes are visited
/// round-robin in seeded shuffled order, one image per class per round,
/// until the level budget is met; underfull strata are recorded as
/// shortfalls rather than borrowed from other levels.
pub fn branch_taxonomic(
    pivot: &Pivot,
    taxonomy: &Taxonomy,
    observations: &ObservationMap,
    budget: &BranchBudget,
    seed: u64,
    ids: &mut PairIdAllocator,
) -> Result<BranchOutcome, SamplerError> {
    let mut outcome = BranchOutcome::default();
    let mut rng = pivot_stream(seed, &pivot.class);

    for (&level, &k) in &budget.k_taxonomic {
        if level < 1 || level > taxonomy.depth() + 1 {
            return Err(SamplerError::BudgetLevelOutOfRange(level, taxonomy.depth() + 1));
        }
        if k == 0 {
            continue;
        }
        let candidate_classes: Vec<TaxonId> = if level == 1 {
            vec![pivot.class.clone()]
        } else {
            taxonomy
                .taxon_partition(&pivot.class, level - 1)?
                .into_iter()
                .filter(|c| observations.get(c).is_some_and(|o| !o.is_empty()))
                .collect()
        };

        // Remaining image pools per class, pre-shuffled so each round-robin
        // visit pops a uniform draw.
        let mut order: Vec<TaxonId> = candidate_classes;
        order.shuffle(&mut rng);
        let mut pools: Vec<Vec<String>> = order
            .iter()
            .map(|class| {
                let mut images: Vec<String> = observations
                    .get(class)
                    .map(|obs| {
                        obs.iter()
                            .map(|o| o.image_id.clone())
                            .filter(|img| *img != pivot.image_id)
                            .collect()
                    })
                    .unwrap_or_default();
                images.shuffle(&mut rng);
                images
            })
            .collect();

        let mut collected = 0usize;
        while collected < k {
            let mut progressed = false;
            for pool in pools.iter_mut() {
                if collected == k {
                    break;
                }
                if let Some(i2) = pool.pop() {
                    outcome.pairs.push(ImagePair {
                        pair_id: ids.next_id(),
                        i1: pivot.image_id.clone(),
                        i2,
                        provenance: Provenance::Taxonomic { level },
                        pivot_class: pivot.class.clone(),
                    });
                    collected += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        if collected < k {
            outcome.shortfalls.push(Shortfall {
                pivot_class: pivot.class.clone(),
                provenance: format!("taxonomic-l{level}"),
                requested: k,
                produced: collected,
            });
        }
    }
    Ok(outcome)
}

/// Independent per-pivot random stream derived from `(seed, pivot class)`,
/// so per-pivot branching could run concurrently without changing output.
fn pivot_stream(seed: u64, class: &TaxonId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(crate::hashing::fnv1a64(class.as_str().as_bytes()));
    rng
}

#[derive(Debug)]
pub struct SampleReport {
    pub pivots: Vec<Pivot>,
    pub pairs: Vec<ImagePair>,
    pub shortfalls: Vec<Shortfall>,
}

/// Full sampling pass: pivots, then visual and taxonomic branches per
/// pivot. With `strict` set, classes that cannot fill every stratum are
/// excluded up front (look-ahead branch sampling).
pub fn sample_pairs(
    taxonomy: &Taxonomy,
    observations: &ObservationMap,
    index: &QuantizedIndex,
    spec: &PivotSpec,
    budget: &BranchBudget,
    strict: bool,
) -> Result<SampleReport, SamplerError> {
    for class in observations.keys() {
        if !taxonomy.is_leaf(class) {
            return Err(SamplerError::UnknownClass(class.clone()));
        }
    }
    // Look-ahead only restricts which classes may pivot; every class's
    // images stay available as branch material either way.
    let pivot_pool: ObservationMap = if strict {
        observations
            .iter()
            .filter(|(class, obs)| {
                full_coverage(taxonomy, observations, class, obs, budget).unwrap_or(false)
            })
            .map(|(c, o)| (c.clone(), o.clone()))
            .collect()
    } else {
        observations.clone()
    };

    let pivots = select_pivots(taxonomy, &pivot_pool, spec)?;
    let mut ids = PairIdAllocator::default();
    let mut pairs = Vec::new();
    let mut shortfalls = Vec::new();
    for pivot in &pivots {
        let visual = branch_visual(pivot, index, budget.k_visual, &mut ids)?;
        pairs.extend(visual.pairs);
        shortfalls.extend(visual.shortfalls);
        let taxo = branch_taxonomic(pivot, taxonomy, observations, budget, spec.seed, &mut ids)?;
        pairs.extend(taxo.pairs);
        shortfalls.extend(taxo.shortfalls);
    }
    Ok(SampleReport {
        pivots,
        pairs,
        shortfalls,
    })
}

fn full_coverage(
    taxonomy: &Taxonomy,
    observations: &ObservationMap,
    class: &TaxonId,
    class_obs: &[Observation],
    budget: &BranchBudget,
) -> Result<bool, SamplerError> {
    if !taxonomy.is_leaf(class) {
        return Err(SamplerError::UnknownClass(class.clone()));
    }
    for (&level, &k) in &budget.k_taxonomic {
        if k == 0 {
            continue;
        }
        let available = if level == 1 {
            class_obs.len().saturating_sub(1)
        } else {
            if level - 1 > taxonomy.depth() {
                return Ok(false);
            }
            taxonomy
                .taxon_partition(class, level - 1)?
                .iter()
                .map(|c| observations.get(c).map_or(0, Vec::len))
                .sum()
        };
        if available < k {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Pair-vetting strategy for the annotation cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostStrategy {
    /// Both images of every pair drawn blind and vetted together.
    Paired,
    /// Pivot images vetted once up front; only branches remain at risk.
    PivotBranch,
}

/// Annotation-cost scale factor as a function of the probability that a
/// drawn image survives clarity vetting. Blind paired sampling pays
/// `1/keep^2` (both images must survive); pivot-branch sampling pays
/// `1/keep` (the pivot side is pre-vetted). A survival rate of 2/3 gives
/// 2.25 versus 1.5.
pub fn annotation_cost(keep_prob: f64, strategy: CostStrategy) -> Result<f64, SamplerError> {
    if !keep_prob.is_finite() || keep_prob <= 0.0 || keep_prob > 1.0 {
        return Err(SamplerError::InvalidKeepProbability(keep_prob));
    }
    Ok(match strategy {
        CostStrategy::Paired => 1.0 / (keep_prob * keep_prob),
        CostStrategy::PivotBranch => 1.0 / keep_prob,
    })
}

#[derive(Debug)]
pub struct GateReport {
    pub kept: Vec<ImagePair>,
    pub total: usize,
    pub retention: f64,
}

/// Keep a pair iff both of its images have a positive clarity-rating
/// fraction at or above `threshold` (default 4/5).
pub fn apply_clarity_gate(
    pairs: &[ImagePair],
    ratings: &[ClarityRating],
    threshold: f64,
) -> Result<GateReport, SamplerError> {
    let mut tallies: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in ratings {
        r.validate()?;
        let entry = tallies.entry(r.image_id.as_str()).or_insert((0, 0));
        entry.1 += 1;
        if r.overall {
            entry.0 += 1;
        }
    }
    let fraction = |image: &str| -> Result<f64, SamplerError> {
        let (pos, total) = tallies
            .get(image)
            .ok_or_else(|| SamplerError::UnratedImage(image.to_owned()))?;
        Ok(*pos as f64 / *total as f64)
    };
    let mut kept = Vec::new();
    for pair in pairs {
        if fraction(&pair.i1)? >= threshold && fraction(&pair.i2)? >= threshold {
            kept.push(pair.clone());
        }
    }
    let total = pairs.len();
    let retention = if total == 0 {
        0.0
    } else {
        kept.len() as f64 / total as f64
    };
    Ok(GateReport {
        kept,
        total,
        retention,
    })
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<ImagePair>,
    pub dev: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
}

/// Split by pivot class: classes are shuffled with the seed, the first
/// `floor(train * n)` go to train, the next `floor(dev * n)` to dev, the
/// remainder to test. All pairs of a class travel together.
pub fn split_dataset(
    pairs: &[ImagePair],
    train_frac: f64,
    dev_frac: f64,
    seed: u64,
) -> Result<Splits, SamplerError> {
    if !(train_frac > 0.0 && dev_frac > 0.0 && train_frac + dev_frac < 1.0) {
        return Err(SamplerError::InvalidFractions {
            train: train_frac,
            dev: dev_frac,
        });
    }
    let mut classes: Vec<&TaxonId> = pairs
        .iter()
        .map(|p| &p.pivot_class)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 3 {
        return Err(SamplerError::TooFewClasses(classes.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);
    let n = classes.len();
    let n_train = (train_frac * n as f64).floor() as usize;
    let n_dev = (dev_frac * n as f64).floor() as usize;
    let train_set: BTreeSet<&TaxonId> = classes[..n_train].iter().copied().collect();
    let dev_set: BTreeSet<&TaxonId> = classes[n_train..n_train + n_dev].iter().copied().collect();

    let mut splits = Splits {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for pair in pairs {
        if train_set.contains(&pair.pivot_class) {
            splits.train.push(pair.clone());
        } else if dev_set.contains(&pair.pivot_class) {
            splits.dev.push(pair.clone());
        } else {
            splits.test.push(pair.clone());
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Embedding;
    use crate::taxonomy::TaxonRecord;

    fn obs(class: &str, image: &str, clear: bool) -> Observation {
        Observation {
            image_id: image.to_owned(),
            class_id: TaxonId::from(class),
            clear,
        }
    }

    fn toy_taxonomy() -> Taxonomy {
        // Same shape as the taxonomy module's toy tree.
        let rec = |id: &str, parent: Option<&str>, rank: u32| TaxonRecord {
            id: TaxonId::from(id),
            parent_id: parent.map(TaxonId::from),
            rank,
            name: id.to_owned(),
        };
        Taxonomy::from_records(vec![
            rec("C", None, 4),
            rec("O1", Some("C"), 3),
            rec("O2", Some("C"), 3),
            rec("F1", Some("O1"), 2),
            rec("F2", Some("O1"), 2),
            rec("F5", Some("O2"), 2),
            rec("G1", Some("F1"), 1),
            rec("G2", Some("F1"), 1),
            rec("G4", Some("F2"), 1),
            rec("G5", Some("F5"), 1),
            rec("s1", Some("G1"), 0),
            rec("s2", Some("G1"), 0),
            rec("s3", Some("G2"), 0),
            rec("s4", Some("G4"), 0),
            rec("s5", Some("G5"), 0),
        ])
        .unwrap()
    }

    /// Observations for the toy taxonomy: 4 images per species, all clear.
    fn toy_observations() -> ObservationMap {
        let mut records = Vec::new();
        for species in ["s1", "s2", "s3", "s4", "s5"] {
            for i in 0..4 {
                records.push(obs(species, &format!("{species}-img{i}"), true));
            }
        }
        group_observations(records)
    }

    fn toy_index(observations: &ObservationMap) -> QuantizedIndex {
        // Deterministic synthetic embeddings: species index sets the
        // coarse location, image index jitters it.
        let mut embeddings = Vec::new();
        for (s_idx, (_, images)) in observations.iter().enumerate() {
            for (i_idx, o) in images.iter().enumerate() {
                embeddings.push(Embedding::new(
                    o.image_id.clone(),
                    o.class_id.clone(),
                    vec![s_idx as f64, 0.1 * i_idx as f64],
                ));
            }
        }
        QuantizedIndex::build(&embeddings).unwrap()
    }

    #[test]
    fn selects_every_class_when_counts_match() {
        let taxonomy = toy_taxonomy();
        let observations = toy_observations();
        let spec = PivotSpec {
            min_observations: 4,
            pivot_count: 5,
            seed: 7,
        };
        let pivots = select_pivots(&taxonomy, &observations, &spec).unwrap();
        let classes: Vec<&str> = pivots.iter().map(|p| p.class.as_str()).collect();
        assert_eq!(classes, vec!["s1", "s2", "s3", "s4", "s5"]);
    }

    #[test]
    fn below_minimum_never_selected() {
        let taxonomy = toy_taxonomy();
        let mut observations = toy_observations();
        observations.get_mut(&TaxonId::from("s3")).unwrap().pop();
        let spec = PivotSpec {
            min_observations: 4,
            pivot_count: 4,
            seed: 3,
        };
        for seed in 0..50 {
            let pivots = select_pivots(
                &taxonomy,
                &observations,
                &PivotSpec { seed, ..spec.clone() },
            )
            .unwrap();
            assert!(pivots.iter().all(|p| p.class.as_str() != "s3"));
        }
        // And with the full count required the shortage is an error.
        let err = select_pivots(
            &taxonomy,
            &observations,
            &PivotSpec {
                pivot_count: 5,
                ..spec
            },
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SamplerError::InsufficientEligibleClasses {
                eligible: 4,
                required: 5
            }
        ));
    }

    #[test]
    fn pivot_image_is_first_clear_by_image_id() {
        let taxonomy = toy_taxonomy();
        let mut records = Vec::new();
        for species in ["s1", "s2", "s3", "s4", "s5"] {
            records.push(obs(species, &format!("{species}-b"), true));
            records.push(obs(species, &format!("{species}-a"), false));
            records.push(obs(species, &format!("{species}-c"), true));
            records.push(obs(species, &format!("{species}-d"), true));
        }
        let observations = group_observations(records);
        let pivots = select_pivots(
            &taxonomy,
            &observations,
            &PivotSpec {
                min_observations: 4,
                pivot_count: 5,
                seed: 0,
            },
        )
        .unwrap();
        for p in pivots {
            assert!(p.image_id.ends_with("-b"), "{p:?}");
        }
    }

    #[test]
    fn selection_uniform_over_equal_classes() {
        // 50 equal classes under one genus chain; chi-square GOF against
        // the uniform law over 10k draws of 5 classes each.
        let mut records = vec![TaxonRecord {
            id: TaxonId::from("root"),
            parent_id: None,
            rank: 1,
            name: "root".into(),
        }];
        let mut observation_records = Vec::new();
        for i in 0..50 {
            let id = format!("c{i:02}");
            records.push(TaxonRecord {
                id: TaxonId::from(id.as_str()),
                parent_id: Some(TaxonId::from("root")),
                rank: 0,
                name: id.clone(),
            });
            for img in 0..4 {
                observation_records.push(obs(&id, &format!("{id}-img{img}"), true));
            }
        }
        let taxonomy = Taxonomy::from_records(records).unwrap();
        let observations = group_observations(observation_records);

        let mut counts = BTreeMap::new();
        for seed in 0..10_000u64 {
            let pivots = select_pivots(
                &taxonomy,
                &observations,
                &PivotSpec {
                    min_observations: 4,
                    pivot_count: 5,
                    seed,
                },
            )
            .unwrap();
            for p in pivots {
                *counts.entry(p.class.clone()).or_insert(0usize) += 1;
            }
        }
        let expected = 10_000.0 * 5.0 / 50.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // Critical value of chi-square with 49 degrees of freedom at the
        // 0.01 level.
        assert!(chi2 < 74.919, "chi2 = {chi2}");
        assert_eq!(counts.len(), 50, "every class selected at least once");
    }

    #[test]
    fn visual_branch_matches_knn() {
        let observations = toy_observations();
        let index = toy_index(&observations);
        let pivot = Pivot {
            class: TaxonId::from("s1"),
            image_id: "s1-img0".to_owned(),
        };
        let mut ids = PairIdAllocator::default();
        let outcome = branch_visual(&pivot, &index, 2, &mut ids).unwrap();
        assert_eq!(outcome.pairs.len(), 2);
        let expected = index.knn("s1-img0", 2, &BTreeSet::new()).unwrap();
        let got: Vec<&str> = outcome.pairs.iter().map(|p| p.i2.as_str()).collect();
        assert_eq!(got, expected.ids.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(outcome.pairs.iter().all(|p| p.i1 == "s1-img0" && p.i1 != p.i2));
        assert!(outcome
            .pairs
            .iter()
            .all(|p| p.provenance == Provenance::Visual));
    }

    #[test]
    fn taxonomic_round_robin_single_class_takes_both() {
        let taxonomy = toy_taxonomy();
        let observations = toy_observations();
        let pivot = Pivot {
            class: TaxonId::from("s1"),
            image_id: "s1-img0".to_owned(),
        };
        // Level 2 partition of s1 is {s2}: both images must come from s2.
        let budget = BranchBudget {
            k_visual: 0,
            k_taxonomic: BTreeMap::from([(2, 2)]),
        };
        let mut ids = PairIdAllocator::default();
        let outcome =
            branch_taxonomic(&pivot, &taxonomy, &observations, &budget, 5, &mut ids).unwrap();
        assert_eq!(outcome.pairs.len(), 2);
        assert!(outcome.pairs.iter().all(|p| p.i2.starts_with("s2-")));
        assert!(outcome.shortfalls.is_empty());
    }

    #[test]
    fn taxonomic_round_robin_spreads_across_classes() {
        // Partition with >= 2 classes: the two samples come from distinct
        // classes because the rotation visits each class once per round.
        let rec = |id: &str, parent: Option<&str>, rank: u32| TaxonRecord {
            id: TaxonId::from(id),
            parent_id: parent.map(TaxonId::from),
            rank,
            name: id.to_owned(),
        };
        let taxonomy = Taxonomy::from_records(vec![
            rec("g", None, 1),
            rec("a", Some("g"), 0),
            rec("b", Some("g"), 0),
            rec("c", Some("g"), 0),
        ])
        .unwrap();
        let observations = group_observations(vec![
            obs("a", "a-0", true),
            obs("a", "a-1", true),
            obs("b", "b-0", true),
            obs("b", "b-1", true),
            obs("c", "c-0", true),
            obs("c", "c-1", true),
        ]);
        let pivot = Pivot {
            class: TaxonId::from("a"),
            image_id: "a-0".to_owned(),
        };
        let budget = BranchBudget {
            k_visual: 0,
            k_taxonomic: BTreeMap::from([(2, 2)]),
        };
        for seed in 0..20 {
            let mut ids = PairIdAllocator::default();
            let outcome =
                branch_taxonomic(&pivot, &taxonomy, &observations, &budget, seed, &mut ids)
                    .unwrap();
            let classes: BTreeSet<char> = outcome
                .pairs
                .iter()
                .map(|p| p.i2.chars().next().unwrap())
                .collect();
            assert_eq!(classes.len(), 2, "seed {seed}: {outcome:?}");
        }
    }

    #[test]
    fn default_budget_yields_twelve_pairs_per_pivot() {
        let taxonomy = toy_taxonomy();
        let observations = toy_observations();
        let index = toy_index(&observations);
        let spec = PivotSpec {
            min_observations: 4,
            pivot_count: 5,
            seed: 11,
        };
        let budget = BranchBudget::default();
        assert_eq!(budget.total(), 12);
        let report =
            sample_pairs(&taxonomy, &observations, &index, &spec, &budget, false).unwrap();
        // The toy tree has enough material at every stratum only for
        // pivots under F1; count per-pivot totals instead of asserting a
        // flat 60.
        let s1_pairs: Vec<&ImagePair> = report
            .pairs
            .iter()
            .filter(|p| p.pivot_class.as_str() == "s1")
            .collect();
        assert_eq!(s1_pairs.len(), 12);
        let visual = s1_pairs
            .iter()
            .filter(|p| p.provenance == Provenance::Visual)
            .count();
        assert_eq!(visual, 2);
        for level in 1..=5u32 {
            let at_level = s1_pairs
                .iter()
                .filter(|p| p.provenance == Provenance::Taxonomic { level })
                .count();
            assert_eq!(at_level, 2, "level {level}");
        }
        // LCA property: level-l pairs share an ancestor exactly l-1 levels
        // above the pivot class (level 1 = same class).
        for pair in &report.pairs {
            if let Provenance::Taxonomic { level } = pair.provenance {
                let branch_class = observations
                    .iter()
                    .find(|(_, images)| images.iter().any(|o| o.image_id == pair.i2))
                    .map(|(c, _)| c.clone())
                    .unwrap();
                let lca = taxonomy.lca_level(&pair.pivot_class, &branch_class).unwrap();
                assert_eq!(lca, level - 1, "{pair:?}");
            }
        }
    }

    #[test]
    fn empty_partition_records_shortfall() {
        let taxonomy = toy_taxonomy();
        let observations = toy_observations();
        let pivot = Pivot {
            class: TaxonId::from("s4"),
            image_id: "s4-img0".to_owned(),
        };
        // s4 has no sibling species: level 2 partition is empty.
        let budget = BranchBudget {
            k_visual: 0,
            k_taxonomic: BTreeMap::from([(2, 2)]),
        };
        let mut ids = PairIdAllocator::default();
        let outcome =
            branch_taxonomic(&pivot, &taxonomy, &observations, &budget, 0, &mut ids).unwrap();
        assert!(outcome.pairs.is_empty());
        assert_eq!(
            outcome.shortfalls,
            vec![Shortfall {
                pivot_class: TaxonId::from("s4"),
                provenance: "taxonomic-l2".to_owned(),
                requested: 2,
                produced: 0,
            }]
        );
    }

    #[test]
    fn cost_model_values() {
        let paired = annotation_cost(2.0 / 3.0, CostStrategy::Paired).unwrap();
        assert!((paired - 2.25).abs() < 1e-12);
        let pivot_branch = annotation_cost(2.0 / 3.0, CostStrategy::PivotBranch).unwrap();
        assert!((pivot_branch - 1.5).abs() < 1e-12);
        // Nothing discarded: both strategies cost 1.
        assert_eq!(annotation_cost(1.0, CostStrategy::Paired).unwrap(), 1.0);
        assert_eq!(annotation_cost(1.0, CostStrategy::PivotBranch).unwrap(), 1.0);
        assert!(annotation_cost(0.0, CostStrategy::Paired).is_err());
        assert!(annotation_cost(1.5, CostStrategy::Paired).is_err());
        assert!(annotation_cost(f64::NAN, CostStrategy::Paired).is_err());
    }

    fn rating(image: &str, rater: usize, positive: bool) -> ClarityRating {
        ClarityRating {
            image_id: image.to_owned(),
            rater_id: format!("r{rater}"),
            single_instance: positive,
            animal_itself: positive,
            focus: positive,
            visibility: positive,
            overall: positive,
        }
    }

    fn pair(n: usize, i1: &str, i2: &str) -> ImagePair {
        ImagePair {
            pair_id: format!("pair-{n:06}"),
            i1: i1.to_owned(),
            i2: i2.to_owned(),
            provenance: Provenance::Visual,
            pivot_class: TaxonId::from("s1"),
        }
    }

    #[test]
    fn clarity_gate_threshold_behaviour() {
        let pairs = vec![pair(0, "good", "borderline"), pair(1, "good", "bad")];
        let mut ratings = Vec::new();
        for r in 0..5 {
            ratings.push(rating("good", r, true));
            ratings.push(rating("borderline", r, r != 0)); // 4/5
            ratings.push(rating("bad", r, r >= 2)); // 3/5
        }
        let report = apply_clarity_gate(&pairs, &ratings, 0.8).unwrap();
        assert_eq!(report.kept.len(), 1);
        assert_eq!(report.kept[0].pair_id, "pair-000000");
        assert!((report.retention - 0.5).abs() < 1e-12);

        let missing = vec![pair(2, "good", "unrated")];
        let err = apply_clarity_gate(&missing, &ratings, 0.8).unwrap_err();
        assert!(matches!(err, SamplerError::UnratedImage(img) if img == "unrated"));
    }

    #[test]
    fn rating_conjunction_enforced() {
        let mut r = rating("x", 0, true);
        r.focus = false; // overall stays true -> inconsistent
        assert!(matches!(
            r.validate(),
            Err(SamplerError::RatingInconsistent { .. })
        ));
    }

    fn pairs_over_classes(n_classes: usize, pairs_per_class: usize) -> Vec<ImagePair> {
        let mut out = Vec::new();
        let mut n = 0;
        for c in 0..n_classes {
            for p in 0..pairs_per_class {
                out.push(ImagePair {
                    pair_id: format!("pair-{n:06}"),
                    i1: format!("c{c}-i{p}a"),
                    i2: format!("c{c}-i{p}b"),
                    provenance: Provenance::Visual,
                    pivot_class: TaxonId::new(format!("class-{c:03}")),
                });
                n += 1;
            }
        }
        out
    }

    #[test]
    fn split_floor_rule() {
        let pairs = pairs_over_classes(10, 3);
        let splits = split_dataset(&pairs, 0.8, 0.1, 99).unwrap();
        let classes = |ps: &[ImagePair]| -> BTreeSet<TaxonId> {
            ps.iter().map(|p| p.pivot_class.clone()).collect()
        };
        assert_eq!(classes(&splits.train).len(), 8);
        assert_eq!(classes(&splits.dev).len(), 1);
        assert_eq!(classes(&splits.test).len(), 1);
        assert_eq!(splits.train.len() + splits.dev.len() + splits.test.len(), 30);

        let pairs = pairs_over_classes(405, 1);
        let splits = split_dataset(&pairs, 0.8, 0.1, 1).unwrap();
        assert_eq!(splits.train.len(), 324);
        assert_eq!(splits.dev.len(), 40);
        assert_eq!(splits.test.len(), 41);
    }

    #[test]
    fn splits_share_no_classes() {
        let pairs = pairs_over_classes(17, 2);
        for seed in 0..30 {
            let splits = split_dataset(&pairs, 0.8, 0.1, seed).unwrap();
            let train: BTreeSet<&TaxonId> = splits.train.iter().map(|p| &p.pivot_class).collect();
            let dev: BTreeSet<&TaxonId> = splits.dev.iter().map(|p| &p.pivot_class).collect();
            let test: BTreeSet<&TaxonId> = splits.test.iter().map(|p| &p.pivot_class).collect();
            assert!(train.is_disjoint(&dev));
            assert!(train.is_disjoint(&test));
            assert!(dev.is_disjoint(&test));
        }
        assert!(matches!(
            split_dataset(&pairs_over_classes(2, 1), 0.8, 0.1, 0),
            Err(SamplerError::TooFewClasses(2))
        ));
    }

    #[test]
    fn sampling_is_deterministic() {
        let taxonomy = toy_taxonomy();
        let observations = toy_observations();
        let index = toy_index(&observations);
        let spec = PivotSpec {
            min_observations: 4,
            pivot_count: 5,
            seed: 123,
        };
        let budget = BranchBudget::default();
        let a = sample_pairs(&taxonomy, &observations, &index, &spec, &budget, false).unwrap();
        let b = sample_pairs(&taxonomy, &observations, &index, &spec, &budget, false).unwrap();
        let render = |pairs: &[ImagePair]| jsonl::to_jsonl_string(pairs).unwrap();
        assert_eq!(render(&a.pairs), render(&b.pairs));
    }

    #[test]
    fn strict_mode_drops_uncovered_classes() {
        let taxonomy = toy_taxonomy();
        let observations = toy_observations();
        let index = toy_index(&observations);
        let spec = PivotSpec {
            min_observations: 4,
            pivot_count: 2,
            seed: 0,
        };
        let budget = BranchBudget::default();
        let report = sample_pairs(&taxonomy, &observations, &index, &spec, &budget, true).unwrap();
        // Only s1 and s2 (under genus G1) can fill every stratum.
        let classes: BTreeSet<&str> = report.pivots.iter().map(|p| p.class.as_str()).collect();
        assert_eq!(classes, BTreeSet::from(["s1", "s2"]));
        assert!(report.shortfalls.is_empty());
    }
}
