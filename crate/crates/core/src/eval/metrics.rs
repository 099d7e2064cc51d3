//! Corpus-level caption metrics: BLEU-4, ROUGE-L, CIDEr-D, and the
//! one-vs-rest human-agreement protocol.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EvalError, EvalInstance};

const BLEU_N: usize = 4;
const BLEU_EPS: f64 = 1e-9;
const ROUGE_BETA: f64 = 1.2;
const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with modified n-gram precision for n = 1..4, geometric
/// mean, and brevity penalty against the closest reference length (ties
/// to the shorter reference). Zero clipped counts are smoothed to 1e-9.
pub fn bleu4(instances: &[EvalInstance]) -> Result<f64, EvalError> {
    ensure_nonempty(instances)?;
    let mut numer = [0usize; BLEU_N];
    let mut denom = [0usize; BLEU_N];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for instance in instances {
        let cand = &instance.candidate;
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), &instance.references);
        for (slot, n) in (1..=BLEU_N).enumerate() {
            let cand_counts = ngram_counts(cand, n);
            let mut clipped = 0usize;
            for (gram, &count) in &cand_counts {
                let max_ref = instance
                    .references
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped += count.min(max_ref);
            }
            numer[slot] += clipped;
            denom[slot] += cand.len().saturating_sub(n - 1);
        }
    }

    let mut log_sum = 0.0f64;
    for slot in 0..BLEU_N {
        let p = if numer[slot] > 0 && denom[slot] > 0 {
            numer[slot] as f64 / denom[slot] as f64
        } else {
            BLEU_EPS / denom[slot].max(1) as f64
        };
        log_sum += p.ln();
    }
    let brevity = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(brevity * (log_sum / BLEU_N as f64).exp())
}

fn closest_ref_len(cand_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| {
            let diff = len.abs_diff(cand_len);
            (diff, len)
        })
        .unwrap_or(0)
}

/// ROUGE-L: per instance the max over references of the LCS F-measure
/// (beta = 1.2), averaged over instances.
pub fn rouge_l(instances: &[EvalInstance]) -> Result<f64, EvalError> {
    ensure_nonempty(instances)?;
    let total: f64 = instances.iter().map(rouge_l_instance).sum();
    Ok(total / instances.len() as f64)
}

pub(crate) fn rouge_l_instance(instance: &EvalInstance) -> f64 {
    instance
        .references
        .iter()
        .map(|reference| {
            let lcs = lcs_len(&instance.candidate, reference) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let recall = lcs / reference.len() as f64;
            let precision = lcs / instance.candidate.len() as f64;
            let beta_sq = ROUGE_BETA * ROUGE_BETA;
            (1.0 + beta_sq) * recall * precision / (recall + beta_sq * precision)
        })
        .fold(0.0, f64::max)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// CIDEr-D: clipped tf-idf n-gram cosine for n = 1..4 with a Gaussian
/// length penalty (sigma = 6), averaged over references and n, scaled by
/// 10, averaged over instances. Document frequencies come from the
/// references of the evaluated split.
pub fn cider_d(instances: &[EvalInstance]) -> Result<f64, EvalError> {
    ensure_nonempty(instances)?;
    let distinct: BTreeSet<&[String]> = instances
        .iter()
        .flat_map(|i| i.references.iter().map(Vec::as_slice))
        .collect();
    if distinct.len() < 2 {
        return Err(EvalError::DegenerateIdf);
    }
    let df = document_frequencies(instances);
    let log_n = (instances.len() as f64).ln();
    let total: f64 = instances
        .iter()
        .map(|i| cider_d_instance(i, &df, log_n))
        .sum();
    Ok(total / instances.len() as f64)
}

type Df = [BTreeMap<Vec<String>, usize>; CIDER_N];

fn document_frequencies(instances: &[EvalInstance]) -> Df {
    let mut df: Df = Default::default();
    for instance in instances {
        for (slot, n) in (1..=CIDER_N).enumerate() {
            let mut seen: BTreeSet<&[String]> = BTreeSet::new();
            for reference in &instance.references {
                for gram in reference.windows(n) {
                    seen.insert(gram);
                }
            }
            for gram in seen {
                *df[slot].entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
    }
    df
}

pub(crate) fn cider_d_instance(instance: &EvalInstance, df: &Df, log_n: f64) -> f64 {
    let mut per_n = [0.0f64; CIDER_N];
    for (slot, n) in (1..=CIDER_N).enumerate() {
        let cand_vec = tfidf_vec(&instance.candidate, n, &df[slot], log_n);
        let cand_norm = vec_norm(&cand_vec);
        let mut acc = 0.0;
        for reference in &instance.references {
            let ref_vec = tfidf_vec(reference, n, &df[slot], log_n);
            let ref_norm = vec_norm(&ref_vec);
            let mut dot = 0.0;
            for (gram, &cw) in &cand_vec {
                if let Some(&rw) = ref_vec.get(gram) {
                    dot += cw.min(rw) * rw;
                }
            }
            let mut sim = if cand_norm > 0.0 && ref_norm > 0.0 {
                dot / (cand_norm * ref_norm)
            } else {
                0.0
            };
            let delta = instance.candidate.len() as f64 - reference.len() as f64;
            sim *= (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            acc += sim;
        }
        per_n[slot] = acc / instance.references.len() as f64;
    }
    10.0 * per_n.iter().sum::<f64>() / CIDER_N as f64
}

fn tfidf_vec(
    tokens: &[String],
    n: usize,
    df: &BTreeMap<Vec<String>, usize>,
    log_n: f64,
) -> BTreeMap<Vec<String>, f64> {
    let mut out = BTreeMap::new();
    for (gram, count) in ngram_counts(tokens, n) {
        let idf = log_n - (df.get(gram).copied().unwrap_or(0).max(1) as f64).ln();
        out.insert(gram.to_vec(), count as f64 * idf);
    }
    out
}

fn vec_norm(v: &BTreeMap<Vec<String>, f64>) -> f64 {
    v.values().map(|w| w * w).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Bleu4,
    RougeL,
    CiderD,
}

pub fn score(metric: Metric, instances: &[EvalInstance]) -> Result<f64, EvalError> {
    match metric {
        Metric::Bleu4 => bleu4(instances),
        Metric::RougeL => rouge_l(instances),
        Metric::CiderD => cider_d(instances),
    }
}

/// One-vs-rest protocol: per run, hold one seeded reference out of each
/// instance as the pseudo-candidate and score it against the rest; report
/// mean and population standard deviation over the runs.
pub fn human_baseline(
    instances: &[EvalInstance],
    metric: Metric,
    runs: usize,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    ensure_nonempty(instances)?;
    if runs == 0 {
        return Err(EvalError::EmptyInstances);
    }
    for instance in instances {
        if instance.references.len() < 2 {
            return Err(EvalError::TooFewReferences {
                pair_id: instance.pair_id.clone(),
                got: instance.references.len(),
            });
        }
    }
    let mut scores = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run as u64);
        let pseudo: Vec<EvalInstance> = instances
            .iter()
            .map(|instance| {
                let held = rng.gen_range(0..instance.references.len());
                let mut references = instance.references.clone();
                let candidate = references.remove(held);
                EvalInstance {
                    pair_id: instance.pair_id.clone(),
                    candidate,
                    references,
                }
            })
            .collect();
        scores.push(score(metric, &pseudo)?);
    }
    let mean = scores.iter().sum::<f64>() / runs as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / runs as f64;
    Ok((mean, var.sqrt()))
}

fn ensure_nonempty(instances: &[EvalInstance]) -> Result<(), EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyInstances);
    }
    for instance in instances {
        if instance.references.is_empty() {
            return Err(EvalError::TooFewReferences {
                pair_id: instance.pair_id.clone(),
                got: 0,
            });
        }
        if instance.candidate.is_empty() {
            return Err(EvalError::EmptyCandidate(instance.pair_id.clone()));
        }
    }
    Ok(())
}
