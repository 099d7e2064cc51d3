//! Synthetic desk-scale corpus.
//!
//! Each synthetic bird is a four-attribute vector (size, body colour, beak
//! length, wing pattern). Feature grids are deterministic encodings of the
//! attributes plus seeded noise, and captions are template comparisons
//! that mention exactly the differing attributes, so caption content is a
//! pure function of the attribute difference. The templates are parseable;
//! [`parse_caption`] inverts them, which powers the programmatic judge.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{DatasetRecord, Reference};
use super::text::preprocess;
use super::CorpusError;
use crate::grids::FeatureGrid;
use crate::sampler::{ImagePair, Provenance};
use crate::taxonomy::TaxonId;

pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const COLORS: [&str; 6] = ["gray", "white", "brown", "black", "yellow", "red"];
pub const BEAKS: [&str; 3] = ["short", "medium", "long"];
pub const WINGS: [&str; 3] = ["plain", "striped", "spotted"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    Size,
    Color,
    Beak,
    Wing,
}

pub const ATTRIBUTES: [Attribute; 4] = [
    Attribute::Size,
    Attribute::Color,
    Attribute::Beak,
    Attribute::Wing,
];

/// One synthetic bird: value indices into the four attribute tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BirdAttributes {
    pub size: usize,
    pub color: usize,
    pub beak: usize,
    pub wing: usize,
}

impl BirdAttributes {
    pub fn value(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Size => self.size,
            Attribute::Color => self.color,
            Attribute::Beak => self.beak,
            Attribute::Wing => self.wing,
        }
    }

    fn set(&mut self, attribute: Attribute, value: usize) {
        match attribute {
            Attribute::Size => self.size = value,
            Attribute::Color => self.color = value,
            Attribute::Beak => self.beak = value,
            Attribute::Wing => self.wing = value,
        }
    }

    pub fn differing(&self, other: &BirdAttributes) -> Vec<Attribute> {
        ATTRIBUTES
            .into_iter()
            .filter(|&a| self.value(a) != other.value(a))
            .collect()
    }

    /// Pseudo species label: birds with identical attributes share one.
    pub fn class_id(&self) -> TaxonId {
        TaxonId::new(format!(
            "syn-sz{}-co{}-bk{}-wg{}",
            self.size, self.color, self.beak, self.wing
        ))
    }
}

fn cardinality(attribute: Attribute) -> usize {
    match attribute {
        Attribute::Size => SIZES.len(),
        Attribute::Color => COLORS.len(),
        Attribute::Beak => BEAKS.len(),
        Attribute::Wing => WINGS.len(),
    }
}

/// Attribute ground truth stored alongside the synthetic corpus,
/// line-delimited `{image_id, attributes}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageAttributes {
    pub image_id: String,
    pub attributes: BirdAttributes,
}

pub type AttributeMap = BTreeMap<String, BirdAttributes>;

pub fn write_attributes(path: &Path, records: &[ImageAttributes]) -> Result<(), CorpusError> {
    Ok(crate::jsonl::write_jsonl(path, records)?)
}

pub fn load_attributes(path: &Path) -> Result<AttributeMap, CorpusError> {
    let records: Vec<ImageAttributes> = crate::jsonl::read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| (r.image_id, r.attributes))
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pairs: usize,
    /// Feature-grid side length d.
    pub grid_size: usize,
    /// Feature-grid channel count f.
    pub feature_dim: usize,
    pub refs_per_pair: usize,
    /// Fraction of pairs with identical attribute vectors; these dominate
    /// the caption distribution by sharing one exact template.
    pub identical_fraction: f64,
    /// Standard deviation of the per-cell noise layered on the attribute
    /// encoding.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_pairs: 64,
            grid_size: 4,
            feature_dim: 16,
            refs_per_pair: 5,
            identical_fraction: 0.3,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct SyntheticCorpus {
    pub records: Vec<DatasetRecord>,
    pub grids: Vec<FeatureGrid>,
    pub attributes: Vec<ImageAttributes>,
}

/// Deterministic synthetic corpus generation: byte-identical output for
/// identical configs.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SyntheticCorpus, CorpusError> {
    if config.grid_size == 0 || config.feature_dim == 0 {
        return Err(CorpusError::BadSynthConfig(
            "grid_size and feature_dim must be at least 1".to_owned(),
        ));
    }
    if config.refs_per_pair == 0 {
        return Err(CorpusError::BadSynthConfig(
            "refs_per_pair must be at least 1".to_owned(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = SyntheticCorpus {
        records: Vec::with_capacity(config.n_pairs),
        grids: Vec::with_capacity(config.n_pairs * 2),
        attributes: Vec::with_capacity(config.n_pairs * 2),
    };

    for n in 0..config.n_pairs {
        let first = random_bird(&mut rng);
        let diff_count = if rng.gen_bool(config.identical_fraction) {
            0
        } else {
            rng.gen_range(1..=ATTRIBUTES.len())
        };
        let second = mutate_bird(first, diff_count, &mut rng);

        let pair_id = format!("synth-{n:06}");
        let i1 = format!("{pair_id}-a");
        let i2 = format!("{pair_id}-b");
        let caption = render_caption(&first, &second);
        let references: Vec<Reference> = (0..config.refs_per_pair)
            .map(|r| Reference {
                rater_id: format!("synth-{r}"),
                text: caption.clone(),
            })
            .collect();

        let pair = ImagePair {
            pair_id: pair_id.clone(),
            i1: i1.clone(),
            i2: i2.clone(),
            provenance: provenance_for(diff_count, n),
            pivot_class: first.class_id(),
        };
        out.records.push(DatasetRecord { pair, references });
        out.grids.push(encode_grid(&i1, &first, config, &mut rng)?);
        out.grids.push(encode_grid(&i2, &second, config, &mut rng)?);
        out.attributes.push(ImageAttributes {
            image_id: i1,
            attributes: first,
        });
        out.attributes.push(ImageAttributes {
            image_id: i2,
            attributes: second,
        });
    }
    Ok(out)
}

fn random_bird(rng: &mut ChaCha8Rng) -> BirdAttributes {
    BirdAttributes {
        size: rng.gen_range(0..SIZES.len()),
        color: rng.gen_range(0..COLORS.len()),
        beak: rng.gen_range(0..BEAKS.len()),
        wing: rng.gen_range(0..WINGS.len()),
    }
}

fn mutate_bird(base: BirdAttributes, diff_count: usize, rng: &mut ChaCha8Rng) -> BirdAttributes {
    let mut attrs = ATTRIBUTES.to_vec();
    attrs.shuffle(rng);
    let mut out = base;
    for &attribute in attrs.iter().take(diff_count) {
        let n = cardinality(attribute);
        let current = out.value(attribute);
        let offset = rng.gen_range(1..n);
        out.set(attribute, (current + offset) % n);
    }
    out
}

/// Synthetic pairs carry a sampling-category tag derived from their
/// attribute distance so judge reports stratify the same way real data
/// does: identical pairs pose as visual neighbours, and increasing
/// distance maps to increasing taxonomic level (4-attribute differences
/// alternate between the two coarsest levels).
fn provenance_for(diff_count: usize, pair_index: usize) -> Provenance {
    match diff_count {
        0 => Provenance::Visual,
        1..=3 => Provenance::Taxonomic {
            level: diff_count as u32,
        },
        _ => Provenance::Taxonomic {
            level: 4 + (pair_index % 2) as u32,
        },
    }
}

/// Channel `c` of the grid encodes attribute `c mod 4` as a constant
/// plateau `value + 1`, plus Gaussian noise.
fn encode_grid(
    image_id: &str,
    bird: &BirdAttributes,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureGrid, CorpusError> {
    let d = config.grid_size;
    let f = config.feature_dim;
    let mut data = Vec::with_capacity(d * d * f);
    for _cell in 0..d * d {
        for c in 0..f {
            let attribute = ATTRIBUTES[c % ATTRIBUTES.len()];
            let base = bird.value(attribute) as f64 + 1.0;
            let noise = config.noise * gaussian(rng);
            data.push((base + noise) as f32);
        }
    }
    FeatureGrid::new(image_id, d, f, data).map_err(|e| CorpusError::Grid(e.to_string()))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Render the canonical caption for a pair of birds: one sentence per
/// differing attribute in fixed order, or the identical-animals sentence.
pub fn render_caption(first: &BirdAttributes, second: &BirdAttributes) -> String {
    let diffs = first.differing(second);
    if diffs.is_empty() {
        return "Both animals appear exactly the same.".to_owned();
    }
    let mut sentences = Vec::new();
    for attribute in diffs {
        let sentence = match attribute {
            Attribute::Size => {
                let cmp = if first.size > second.size { "larger" } else { "smaller" };
                format!("Animal 1 appears {cmp} than Animal 2.")
            }
            Attribute::Color => format!(
                "Animal 1 has a {} body, while Animal 2 has a {} body.",
                COLORS[first.color], COLORS[second.color]
            ),
            Attribute::Beak => {
                let cmp = if first.beak > second.beak { "longer" } else { "shorter" };
                format!("Animal 1 has a {cmp} beak than Animal 2.")
            }
            Attribute::Wing => format!(
                "Animal 1 has {} wings, while Animal 2 has {} wings.",
                WINGS[first.wing], WINGS[second.wing]
            ),
        };
        sentences.push(sentence);
    }
    sentences.join(" ")
}

/// A parsed comparative statement about the pair, phrased with animal1 as
/// `first`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    SizeCmp { first_larger: bool },
    ColorIs { first: usize, second: usize },
    BeakCmp { first_longer: bool },
    WingIs { first: usize, second: usize },
}

impl Claim {
    pub fn attribute(&self) -> Attribute {
        match self {
            Claim::SizeCmp { .. } => Attribute::Size,
            Claim::ColorIs { .. } => Attribute::Color,
            Claim::BeakCmp { .. } => Attribute::Beak,
            Claim::WingIs { .. } => Attribute::Wing,
        }
    }

    /// Does the claim hold when `first` plays animal 1 and `second` plays
    /// animal 2?
    pub fn holds(&self, first: &BirdAttributes, second: &BirdAttributes) -> bool {
        match *self {
            Claim::SizeCmp { first_larger } => {
                if first_larger {
                    first.size > second.size
                } else {
                    first.size < second.size
                }
            }
            Claim::ColorIs { first: c1, second: c2 } => first.color == c1 && second.color == c2,
            Claim::BeakCmp { first_longer } => {
                if first_longer {
                    first.beak > second.beak
                } else {
                    first.beak < second.beak
                }
            }
            Claim::WingIs { first: w1, second: w2 } => first.wing == w1 && second.wing == w2,
        }
    }
}

/// Parse a preprocessed token sequence into claims, ignoring sentences
/// that match no template. The identical-animals sentence parses to zero
/// claims.
pub fn parse_caption(tokens: &[String]) -> Vec<Claim> {
    split_sentences(tokens)
        .into_iter()
        .filter_map(parse_sentence)
        .flatten()
        .collect()
}

/// Strict variant: `None` unless every sentence matches a template.
/// The caption/attribute bijection tests use this.
pub fn parse_caption_strict(tokens: &[String]) -> Option<Vec<Claim>> {
    let sentences = split_sentences(tokens);
    let mut claims = Vec::new();
    for sentence in sentences {
        claims.extend(parse_sentence(sentence)?);
    }
    Some(claims)
}

fn split_sentences(tokens: &[String]) -> Vec<&[String]> {
    tokens
        .split(|t| t == ".")
        .filter(|s| !s.is_empty())
        .collect()
}

/// Token-level template matching; returns the claims of one sentence
/// (empty for the identical-animals template).
fn parse_sentence(tokens: &[String]) -> Option<Vec<Claim>> {
    let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
    match words.as_slice() {
        ["both", "animals", "appear", "exactly", "the", "same"] => Some(vec![]),
        ["animal1", "appears", cmp, "than", "animal2"] => match *cmp {
            "larger" => Some(vec![Claim::SizeCmp { first_larger: true }]),
            "smaller" => Some(vec![Claim::SizeCmp { first_larger: false }]),
            _ => None,
        },
        ["animal1", "has", "a", c1, "body", ",", "while", "animal2", "has", "a", c2, "body"] => {
            let first = COLORS.iter().position(|c| c == c1)?;
            let second = COLORS.iter().position(|c| c == c2)?;
            Some(vec![Claim::ColorIs { first, second }])
        }
        ["animal1", "has", "a", cmp, "beak", "than", "animal2"] => match *cmp {
            "longer" => Some(vec![Claim::BeakCmp { first_longer: true }]),
            "shorter" => Some(vec![Claim::BeakCmp { first_longer: false }]),
            _ => None,
        },
        ["animal1", "has", w1, "wings", ",", "while", "animal2", "has", w2, "wings"] => {
            let first = WINGS.iter().position(|w| w == w1)?;
            let second = WINGS.iter().position(|w| w == w2)?;
            Some(vec![Claim::WingIs { first, second }])
        }
        _ => None,
    }
}

/// Convenience used by tests and the judge: parse the caption text the
/// same way references are preprocessed.
pub fn parse_caption_text(text: &str) -> Result<Vec<Claim>, CorpusError> {
    Ok(parse_caption(&preprocess(text)?))
}
