//! Decoding algorithms over an abstract next-token scorer.
//!
//! The scorer maps a BOS-prefixed token prefix to the logits of the next
//! token; tests drive these routines with hand-built tables and the model
//! wraps its decoder pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub struct DecodeLimits {
    /// Maximum number of emission steps (the terminating EOS counts).
    pub max_len: usize,
    pub bos: usize,
    pub eos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Samples from `softmax(logits / temperature)`; scores still report
    /// the untempered sequence log-probability.
    Multinomial { temperature: f64, seed: u64 },
    /// Width-`width` beam over total log-probability, no length
    /// normalization; finished hypotheses retire and compete on raw
    /// log-probability.
    Beam { width: usize },
}

/// One decoded hypothesis: surface tokens (no BOS, no EOS) and the total
/// log-probability including the terminating EOS when one was emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<S> {
    pub tokens: Vec<usize>,
    pub log_prob: S,
}

/// Run one decoding algorithm against a scorer. Greedy and multinomial
/// return a single hypothesis; beam returns up to `width`, best first.
pub fn decode_with<S, F>(
    step: &mut F,
    mode: &DecodeMode,
    limits: &DecodeLimits,
) -> Result<Vec<Decoded<S>>, ModelError>
where
    S: Real,
    F: FnMut(&[usize]) -> Result<Vec<S>, ModelError>,
{
    if limits.max_len == 0 {
        return Err(ModelError::BadDecode("max_len must be at least 1".into()));
    }
    match mode {
        DecodeMode::Greedy => Ok(vec![greedy(step, limits)?]),
        DecodeMode::Multinomial { temperature, seed } => {
            if !(*temperature > 0.0) {
                return Err(ModelError::BadDecode(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            Ok(vec![multinomial(step, *temperature, *seed, limits)?])
        }
        DecodeMode::Beam { width } => {
            if *width == 0 {
                return Err(ModelError::BadDecode("beam width must be at least 1".into()));
            }
            beam(step, *width, limits)
        }
    }
}

fn greedy<S, F>(step: &mut F, limits: &DecodeLimits) -> Result<Decoded<S>, ModelError>
where
    S: Real,
    F: FnMut(&[usize]) -> Result<Vec<S>, ModelError>,
{
    let mut prefix = vec![limits.bos];
    let mut tokens = Vec::new();
    let mut log_prob = S::zero();
    for _ in 0..limits.max_len {
        let scores = log_softmax(&step(&prefix)?);
        let token = argmax(&scores);
        log_prob = log_prob + scores[token];
        if token == limits.eos {
            break;
        }
        tokens.push(token);
        prefix.push(token);
    }
    Ok(Decoded { tokens, log_prob })
}

fn multinomial<S, F>(
    step: &mut F,
    temperature: f64,
    seed: u64,
    limits: &DecodeLimits,
) -> Result<Decoded<S>, ModelError>
where
    S: Real,
    F: FnMut(&[usize]) -> Result<Vec<S>, ModelError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefix = vec![limits.bos];
    let mut tokens = Vec::new();
    let mut log_prob = S::zero();
    for _ in 0..limits.max_len {
        let logits = step(&prefix)?;
        let scores = log_softmax(&logits);
        let tempered: Vec<S> = logits
            .iter()
            .map(|&l| l / S::cast(temperature))
            .collect();
        let probs = log_softmax(&tempered);
        let draw: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0f64;
        let mut token = probs.len() - 1;
        for (t, &lp) in probs.iter().enumerate() {
            acc += lp.exp().to_f64_lossy();
            if draw < acc {
                token = t;
                break;
            }
        }
        log_prob = log_prob + scores[token];
        if token == limits.eos {
            break;
        }
        tokens.push(token);
        prefix.push(token);
    }
    Ok(Decoded { tokens, log_prob })
}

#[derive(Debug, Clone)]
struct Hypothesis<S> {
    prefix: Vec<usize>,
    log_prob: S,
}

fn beam<S, F>(
    step: &mut F,
    width: usize,
    limits: &DecodeLimits,
) -> Result<Vec<Decoded<S>>, ModelError>
where
    S: Real,
    F: FnMut(&[usize]) -> Result<Vec<S>, ModelError>,
{
    let mut live = vec![Hypothesis {
        prefix: vec![limits.bos],
        log_prob: S::zero(),
    }];
    let mut finished: Vec<Decoded<S>> = Vec::new();

    for _ in 0..limits.max_len {
        if live.is_empty() {
            break;
        }
        // (score, live index, token): the index/token order makes the
        // ranking total, so ties resolve deterministically and beam(1)
        // replays greedy's lowest-id argmax rule.
        let mut candidates: Vec<(S, usize, usize)> = Vec::new();
        for (hyp_idx, hyp) in live.iter().enumerate() {
            let scores = log_softmax(&step(&hyp.prefix)?);
            for (token, &lp) in scores.iter().enumerate() {
                candidates.push((hyp.log_prob + lp, hyp_idx, token));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite log-probabilities")
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });

        let mut next_live = Vec::with_capacity(width);
        for &(score, hyp_idx, token) in candidates.iter().take(width) {
            if token == limits.eos {
                finished.push(Decoded {
                    tokens: live[hyp_idx].prefix[1..].to_vec(),
                    log_prob: score,
                });
            } else {
                let mut prefix = live[hyp_idx].prefix.clone();
                prefix.push(token);
                next_live.push(Hypothesis {
                    prefix,
                    log_prob: score,
                });
            }
        }
        live = next_live;

        // Extensions strictly lower a hypothesis' total log-probability,
        // so anything at or below the best finished score is dead.
        if let Some(best) = finished
            .iter()
            .map(|d| d.log_prob)
            .max_by(|a, b| a.partial_cmp(b).expect("finite"))
        {
            live.retain(|h| h.log_prob > best);
        }
    }

    // Hypotheses still alive at the length limit compete as-is.
    for hyp in live {
        finished.push(Decoded {
            tokens: hyp.prefix[1..].to_vec(),
            log_prob: hyp.log_prob,
        });
    }
    finished.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .expect("finite")
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished.truncate(width);
    Ok(finished)
}

fn log_softmax<S: Real>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .copied()
        .fold(S::neg_infinity(), |acc, v| if v > acc { v } else { acc });
    let total: S = logits.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + total.ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// First index of the maximum (ties to the lowest token id).
fn argmax<S: Real>(scores: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}
