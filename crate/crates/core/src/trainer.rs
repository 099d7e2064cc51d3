//! Adagrad training loop: decayed learning rate, global-norm gradient
//! clipping, seeded shuffled batching, resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{vocab, CorpusError, DatasetRecord, Vocabulary};
use crate::grids::{GridError, GridStore};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointDtype, Model, ModelError};
use crate::numerics::{Graph, NumericsError, Tensor};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite value at step {step} in {label}")]
    NonFinite { step: usize, label: String },
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("checkpoint is missing optimizer state for {0}")]
    MissingAccumulator(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Optimization schedule. The reference schedule decays every 20k steps;
/// desk runs compress the interval proportionally to their step budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub clip_norm: f64,
    /// Batch size counted in sequences.
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Stop at an epoch boundary once the epoch-mean train loss drops
    /// below this value.
    pub target_loss: Option<f64>,
}

impl TrainConfig {
    /// Reference-scale schedule: lr 0.01, decay 0.9 every 20k of 700k
    /// steps, clip 5, batch 2048.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            decay_factor: 0.9,
            decay_interval: 20_000,
            clip_norm: 5.0,
            batch_size: 2048,
            total_steps: 700_000,
            seed: 0,
            target_loss: None,
        }
    }

    /// Desk-scale schedule: same optimizer, 5k-step budget with the decay
    /// interval compressed by the same 700k/20k ratio.
    pub fn desk() -> Self {
        let total_steps = 5_000;
        TrainConfig {
            learning_rate: 0.01,
            decay_factor: 0.9,
            decay_interval: scaled_decay_interval(total_steps),
            clip_norm: 5.0,
            batch_size: 16,
            total_steps,
            seed: 0,
            target_loss: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TrainError::BadConfig("decay factor must be in (0, 1]".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::BadConfig("clip norm must be positive".into()));
        }
        if self.batch_size == 0 || self.decay_interval == 0 {
            return Err(TrainError::BadConfig(
                "batch size and decay interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Keep the reference schedule's 35 decay applications over a compressed
/// step budget.
pub fn scaled_decay_interval(total_steps: usize) -> usize {
    ((total_steps as f64) * 20_000.0 / 700_000.0).round().max(1.0) as usize
}

/// `lr0 * decay^(step / interval)`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    config.learning_rate * config.decay_factor.powi((step / config.decay_interval) as i32)
}

/// Adagrad state: per-parameter accumulated squared gradients plus the
/// global step counter and the in-progress epoch-loss tally (kept here so
/// a resumed run replays early stopping bit-exactly).
#[derive(Debug, Clone)]
pub struct TrainState<S: Real> {
    pub accumulators: BTreeMap<String, Tensor<S>>,
    pub step: usize,
    pub epoch_loss_sum: f64,
    pub epoch_loss_steps: usize,
}

impl<S: Real> TrainState<S> {
    pub fn fresh(model: &Model<S>) -> Self {
        let accumulators = model
            .params()
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
            .collect();
        TrainState {
            accumulators,
            step: 0,
            epoch_loss_sum: 0.0,
            epoch_loss_steps: 0,
        }
    }
}

const ADAGRAD_EPS: f64 = 1e-8;

/// One training example: a pair of image ids and its EOS-terminated
/// target token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub pair_id: String,
    pub i1: String,
    pub i2: String,
    pub target_ids: Vec<usize>,
}

/// Expand joined records into one example per (pair, reference); token
/// sequences are encoded, clipped to the decode limit and terminated with
/// EOS.
pub fn build_examples(
    records: &[DatasetRecord],
    vocabulary: &Vocabulary,
    max_decode_len: usize,
) -> Result<Vec<TrainExample>, TrainError> {
    let mut out = Vec::new();
    for record in records {
        for tokens in record.reference_tokens()? {
            let mut ids = vocabulary.encode(&tokens);
            ids.truncate(max_decode_len.saturating_sub(1));
            ids.push(vocab::EOS);
            out.push(TrainExample {
                pair_id: record.pair.pair_id.clone(),
                i1: record.pair.i1.clone(),
                i2: record.pair.i2.clone(),
                target_ids: ids,
            });
        }
    }
    if out.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    /// Global gradient L2 norm before clipping.
    pub grad_norm: f64,
    /// Global gradient L2 norm after clipping.
    pub post_clip_norm: f64,
}

/// One optimizer step over a batch: token-weighted mean cross entropy,
/// global-norm clipping, Adagrad update.
pub fn train_step<S: Real>(
    model: &mut Model<S>,
    batch: &[&TrainExample],
    grids: &GridStore,
    config: &TrainConfig,
    state: &mut TrainState<S>,
) -> Result<StepOutcome, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let total_tokens: usize = batch.iter().map(|e| e.target_ids.len()).sum();
    let mut grad_sum: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    let mut loss_sum = 0.0f64;

    for example in batch {
        let grid1 = grids.get(&example.i1)?;
        let grid2 = grids.get(&example.i2)?;
        let mut graph = Graph::new();
        let vars = model.bind(&mut graph);
        let step = state.step;
        let (loss, tokens) = model
            .loss_for_example(&mut graph, &vars, grid1, grid2, &example.target_ids)
            .map_err(|e| annotate_nonfinite(e, step))?;
        let loss_value = graph.value(loss).item()?.to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite {
                step: state.step,
                label: graph.label(loss),
            });
        }
        let weight = tokens as f64 / total_tokens as f64;
        loss_sum += loss_value * weight;

        let grads = graph
            .backward(loss, S::cast(weight))
            .map_err(|e| annotate_numerics(e, step))?;
        for (name, grad) in graph.named_grads(&grads) {
            match grad_sum.get_mut(&name) {
                Some(acc) => acc.add_scaled_assign(&grad, S::one()),
                None => {
                    grad_sum.insert(name, grad);
                }
            }
        }
    }

    let (grad_norm, post_clip_norm) = clip_gradients(&mut grad_sum, config.clip_norm);
    let lr = lr_at(state.step, config);
    apply_adagrad(
        model.params_mut(),
        &grad_sum,
        &mut state.accumulators,
        S::cast(lr),
        S::cast(ADAGRAD_EPS),
    )?;
    for (name, tensor) in model.params() {
        if !tensor.is_all_finite() {
            return Err(TrainError::NonFinite {
                step: state.step,
                label: format!("param {name}"),
            });
        }
    }
    state.step += 1;
    Ok(StepOutcome {
        loss: loss_sum,
        lr,
        grad_norm,
        post_clip_norm,
    })
}

fn annotate_nonfinite(e: ModelError, step: usize) -> TrainError {
    match e {
        ModelError::Numerics(n) => annotate_numerics(n, step),
        other => TrainError::Model(other),
    }
}

fn annotate_numerics(e: NumericsError, step: usize) -> TrainError {
    match e {
        NumericsError::NonFinite { label } => TrainError::NonFinite { step, label },
        other => TrainError::Numerics(other),
    }
}

/// Scale all gradients by `clip / norm` when the global L2 norm exceeds
/// `clip`. Returns the pre- and post-clip norms.
pub fn clip_gradients<S: Real>(grads: &mut BTreeMap<String, Tensor<S>>, clip: f64) -> (f64, f64) {
    let norm_sq: f64 = grads
        .values()
        .map(|t| t.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm <= clip || norm == 0.0 {
        return (norm, norm);
    }
    let factor = S::cast(clip / norm);
    for tensor in grads.values_mut() {
        tensor.scale_assign(factor);
    }
    (norm, clip)
}

/// `acc += g^2; theta -= lr * g / (sqrt(acc) + eps)`.
pub fn apply_adagrad<S: Real>(
    params: &mut BTreeMap<String, Tensor<S>>,
    grads: &BTreeMap<String, Tensor<S>>,
    accumulators: &mut BTreeMap<String, Tensor<S>>,
    lr: S,
    eps: S,
) -> Result<(), TrainError> {
    for (name, grad) in grads {
        let param = params
            .get_mut(name)
            .ok_or_else(|| TrainError::MissingAccumulator(name.clone()))?;
        let acc = accumulators
            .get_mut(name)
            .ok_or_else(|| TrainError::MissingAccumulator(name.clone()))?;
        for ((p, g), a) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(acc.data_mut())
        {
            *a = *a + *g * *g;
            *p = *p - lr * *g / (a.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Default)]
pub struct FitOptions {
    /// Manifest path for periodic f64 checkpoints (optimizer state
    /// included); the payload sits next to it.
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every_steps: Option<usize>,
    /// Line-delimited `{step, loss, lr, wall_ms}` log.
    pub log_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct FitReport {
    pub trace: Vec<TraceEntry>,
    pub steps_run: usize,
    pub final_epoch_loss: Option<f64>,
}

/// Run the step loop with per-epoch seeded shuffling. Batch order is a
/// pure function of `(seed, epoch)`, so resuming from a checkpointed step
/// reproduces the uninterrupted run bit-exactly.
pub fn fit<S: Real>(
    model: &mut Model<S>,
    examples: &[TrainExample],
    grids: &GridStore,
    config: &TrainConfig,
    state: &mut TrainState<S>,
    options: &FitOptions,
) -> Result<FitReport, TrainError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let mut trace = Vec::new();
    let mut log = match &options.log_path {
        Some(path) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| TrainError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?,
        ),
        None => None,
    };
    let started = Instant::now();
    let mut final_epoch_loss = None;

    'outer: while state.step < config.total_steps {
        let epoch = state.step / steps_per_epoch;
        let batch_offset = state.step % steps_per_epoch;
        let order = epoch_order(examples.len(), config.seed, epoch as u64);

        for batch_idx in batch_offset..steps_per_epoch {
            if state.step >= config.total_steps {
                break;
            }
            let lo = batch_idx * config.batch_size;
            let hi = (lo + config.batch_size).min(examples.len());
            let batch: Vec<&TrainExample> = order[lo..hi].iter().map(|&i| &examples[i]).collect();
            let outcome = train_step(model, &batch, grids, config, state)?;
            debug_assert!(outcome.post_clip_norm <= config.clip_norm + 1e-9);

            state.epoch_loss_sum += outcome.loss;
            state.epoch_loss_steps += 1;
            let entry = TraceEntry {
                step: state.step,
                loss: outcome.loss,
                lr: outcome.lr,
                wall_ms: started.elapsed().as_millis(),
            };
            if let Some(log) = log.as_mut() {
                let line = serde_json::to_string(&entry).expect("trace serializes");
                writeln!(log, "{line}").map_err(|e| TrainError::Io {
                    path: "training log".into(),
                    source: e,
                })?;
            }
            trace.push(entry);

            if let (Some(path), Some(every)) =
                (&options.checkpoint_path, options.checkpoint_every_steps)
            {
                if state.step % every == 0 {
                    save_train_checkpoint(path, model, state)?;
                }
            }
        }

        if state.epoch_loss_steps > 0 {
            let epoch_mean = state.epoch_loss_sum / state.epoch_loss_steps as f64;
            final_epoch_loss = Some(epoch_mean);
            state.epoch_loss_sum = 0.0;
            state.epoch_loss_steps = 0;
            if let Some(target) = config.target_loss {
                if epoch_mean < target {
                    break 'outer;
                }
            }
        }
    }

    if let Some(path) = &options.checkpoint_path {
        save_train_checkpoint(path, model, state)?;
    }
    Ok(FitReport {
        steps_run: trace.len(),
        trace,
        final_epoch_loss,
    })
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x10000 + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Persist params + Adagrad accumulators + loop counters, full precision.
pub fn save_train_checkpoint<S: Real>(
    manifest_path: &Path,
    model: &Model<S>,
    state: &TrainState<S>,
) -> Result<(), TrainError> {
    let extra: BTreeMap<String, Tensor<S>> = state
        .accumulators
        .iter()
        .map(|(name, t)| (format!("adagrad/{name}"), t.clone()))
        .collect();
    let meta = BTreeMap::from([
        ("step".to_owned(), serde_json::json!(state.step)),
        (
            "epoch_loss_sum".to_owned(),
            serde_json::json!(state.epoch_loss_sum),
        ),
        (
            "epoch_loss_steps".to_owned(),
            serde_json::json!(state.epoch_loss_steps),
        ),
    ]);
    save_checkpoint(manifest_path, model, &extra, &meta, CheckpointDtype::F64)?;
    Ok(())
}

/// Reload a training checkpoint saved by [`save_train_checkpoint`].
pub fn load_train_checkpoint<S: Real>(
    manifest_path: &Path,
) -> Result<(Model<S>, TrainState<S>), TrainError> {
    let loaded = load_checkpoint::<S>(manifest_path)?;
    let mut accumulators = BTreeMap::new();
    for name in loaded.model.params().keys() {
        let acc = loaded
            .extra_tensors
            .get(&format!("adagrad/{name}"))
            .cloned()
            .ok_or_else(|| TrainError::MissingAccumulator(name.clone()))?;
        accumulators.insert(name.clone(), acc);
    }
    let step = loaded.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let epoch_loss_sum = loaded
        .meta
        .get("epoch_loss_sum")
        .and_then(|v| v.as_f64())
        .unwrap_or(0.0);
    let epoch_loss_steps = loaded
        .meta
        .get("epoch_loss_steps")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as usize;
    Ok((
        loaded.model,
        TrainState {
            accumulators,
            step,
            epoch_loss_sum,
            epoch_loss_steps,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};
    use crate::model::{ComparativeSpec, JointEncodingSpec, ModelConfig, Mutation};

    fn tiny_setup(n_pairs: usize) -> (Model<f64>, Vec<TrainExample>, GridStore) {
        let synth = SynthConfig {
            n_pairs,
            grid_size: 2,
            feature_dim: 4,
            refs_per_pair: 1,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&synth).unwrap();
        let token_seqs: Vec<Vec<String>> = corpus
            .records
            .iter()
            .flat_map(|r| r.reference_tokens().unwrap())
            .collect();
        let vocabulary = Vocabulary::build(token_seqs.iter().map(Vec::as_slice), 1).unwrap();
        let config = ModelConfig {
            grid_size: 2,
            feature_dim: 4,
            hidden: 16,
            heads: 2,
            joint: JointEncodingSpec::only(Mutation::Mul),
            comparative: ComparativeSpec::Encoder { layers: 1 },
            decoder_layers: 1,
            vocab_size: vocabulary.len(),
            max_decode_len: 32,
        };
        let model = Model::new_seeded(config.clone(), &vocabulary.content_hash(), 1).unwrap();
        let examples = build_examples(&corpus.records, &vocabulary, config.max_decode_len).unwrap();
        let grids = GridStore::from_grids(corpus.grids).unwrap();
        (model, examples, grids)
    }

    #[test]
    fn lr_schedule_values() {
        let config = TrainConfig::paper();
        assert_eq!(lr_at(0, &config), 0.01);
        assert!((lr_at(20_000, &config) - 0.009).abs() < 1e-15);
        assert!((lr_at(45_000, &config) - 0.0081).abs() < 1e-15);
        assert_eq!(lr_at(19_999, &config), 0.01);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = BTreeMap::from([(
            "w".to_owned(),
            Tensor::<f64>::from_rows(&[vec![1.0, -2.0]]).unwrap(),
        )]);
        let grads = BTreeMap::from([("w".to_owned(), Tensor::zeros(&[1, 2]))]);
        let mut acc = BTreeMap::from([("w".to_owned(), Tensor::zeros(&[1, 2]))]);
        let before = params["w"].clone();
        apply_adagrad(&mut params, &grads, &mut acc, 0.01, 1e-8).unwrap();
        assert_eq!(params["w"], before);
        assert!(acc["w"].data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn clip_scales_norm_ten_by_half() {
        // Two tensors whose concatenated L2 norm is 10.
        let mut grads = BTreeMap::from([
            ("a".to_owned(), Tensor::<f64>::vector(vec![6.0]).unwrap()),
            ("b".to_owned(), Tensor::<f64>::vector(vec![8.0]).unwrap()),
        ]);
        let (norm, post) = clip_gradients(&mut grads, 5.0);
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((post - 5.0).abs() < 1e-12);
        assert!((grads["a"].data()[0] - 3.0).abs() < 1e-12);
        assert!((grads["b"].data()[0] - 4.0).abs() < 1e-12);

        // Under the threshold nothing changes.
        let mut small =
            BTreeMap::from([("a".to_owned(), Tensor::<f64>::vector(vec![3.0]).unwrap())]);
        let (norm, post) = clip_gradients(&mut small, 5.0);
        assert_eq!(norm, post);
        assert_eq!(small["a"].data()[0], 3.0);
    }

    #[test]
    fn accumulators_monotone_and_clip_respected() {
        let (mut model, examples, grids) = tiny_setup(6);
        let config = TrainConfig {
            batch_size: 3,
            total_steps: 8,
            decay_interval: 4,
            ..TrainConfig::desk()
        };
        let mut state = TrainState::fresh(&model);
        let mut prev: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..config.total_steps {
            let batch: Vec<&TrainExample> = examples.iter().take(3).collect();
            let outcome = train_step(&mut model, &batch, &grids, &config, &mut state).unwrap();
            assert!(outcome.post_clip_norm <= config.clip_norm + 1e-9);
            assert!(outcome.loss.is_finite());
            for (name, acc) in &state.accumulators {
                if let Some(old) = prev.get(name) {
                    for (new_v, old_v) in acc.data().iter().zip(old) {
                        assert!(new_v >= old_v, "{name} accumulator decreased");
                    }
                }
                prev.insert(name.clone(), acc.data().to_vec());
            }
        }
        assert_eq!(state.step, 8);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let run = || {
            let (mut model, examples, grids) = tiny_setup(8);
            let config = TrainConfig {
                batch_size: 4,
                total_steps: 100,
                decay_interval: 30,
                ..TrainConfig::desk()
            };
            let mut state = TrainState::fresh(&model);
            fit(
                &mut model,
                &examples,
                &grids,
                &config,
                &mut state,
                &FitOptions::default(),
            )
            .unwrap();
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("train.json");
        let config = TrainConfig {
            batch_size: 4,
            total_steps: 60,
            decay_interval: 25,
            ..TrainConfig::desk()
        };

        // Uninterrupted run.
        let (mut straight, examples, grids) = tiny_setup(8);
        let mut state = TrainState::fresh(&straight);
        fit(
            &mut straight,
            &examples,
            &grids,
            &config,
            &mut state,
            &FitOptions::default(),
        )
        .unwrap();

        // Split run: 30 steps, checkpoint, reload, finish.
        let (mut half, examples2, grids2) = tiny_setup(8);
        let mut half_state = TrainState::fresh(&half);
        let half_config = TrainConfig {
            total_steps: 30,
            ..config.clone()
        };
        fit(
            &mut half,
            &examples2,
            &grids2,
            &half_config,
            &mut half_state,
            &FitOptions::default(),
        )
        .unwrap();
        save_train_checkpoint(&ckpt, &half, &half_state).unwrap();

        let (mut resumed, mut resumed_state) = load_train_checkpoint::<f64>(&ckpt).unwrap();
        assert_eq!(resumed_state.step, 30);
        fit(
            &mut resumed,
            &examples2,
            &grids2,
            &config,
            &mut resumed_state,
            &FitOptions::default(),
        )
        .unwrap();

        assert_eq!(straight.params(), resumed.params());
        assert_eq!(state.step, resumed_state.step);
    }

    #[test]
    fn poisoned_parameter_aborts_with_label() {
        let (mut model, examples, grids) = tiny_setup(4);
        model.params_mut().get_mut("out.b").unwrap().data_mut()[0] = f64::NAN;
        let config = TrainConfig {
            batch_size: 2,
            total_steps: 1,
            ..TrainConfig::desk()
        };
        let mut state = TrainState::fresh(&model);
        let batch: Vec<&TrainExample> = examples.iter().take(2).collect();
        let err = train_step(&mut model, &batch, &grids, &config, &mut state).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
    }

    #[test]
    fn loss_trace_finite_and_decreasing_on_small_run() {
        let (mut model, examples, grids) = tiny_setup(8);
        let config = TrainConfig {
            batch_size: 4,
            total_steps: 40,
            decay_interval: 10,
            ..TrainConfig::desk()
        };
        let mut state = TrainState::fresh(&model);
        let report = fit(
            &mut model,
            &examples,
            &grids,
            &config,
            &mut state,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(report.steps_run, 40);
        assert!(report.trace.iter().all(|t| t.loss.is_finite()));
        assert!(report.trace.last().unwrap().loss < report.trace[0].loss);
    }
}
