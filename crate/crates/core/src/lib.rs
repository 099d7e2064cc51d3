//! Toolkit for building and evaluating comparative image captioning systems.
//!
//! The pipeline has three legs:
//!
//! 1. **Pair construction** — [`taxonomy`], [`index`] and [`sampler`] build
//!    image pairs by pivot-branch sampling: pivots drawn uniformly over
//!    classes, branches drawn by visual nearest-neighbour search and by
//!    walks over disjoint taxonomic partitions.
//! 2. **Modelling** — [`numerics`] is a small reverse-mode autodiff tensor
//!    engine, generic over the scalar type; [`model`] builds the
//!    joint-encoding / comparative-module / transformer-decoder captioner
//!    on top of it and [`trainer`] runs the Adagrad loop.
//! 3. **Evaluation** — [`eval`] implements BLEU-4, ROUGE-L and CIDEr-D with
//!    the multi-reference protocol and the non-neural baselines; [`judge`]
//!    scores rater decisions into per-category scores in `[-1, 1]`.
//!
//! [`corpus`] holds text preprocessing, the vocabulary, dataset records and
//! a synthetic desk-scale corpus generator whose captions are a pure
//! function of attribute differences.

pub mod corpus;
pub mod eval;
pub mod grids;
mod hashing;
pub mod index;
pub mod jsonl;
pub mod judge;
pub mod model;
pub mod numerics;
pub mod real;
pub mod sampler;
pub mod taxonomy;
pub mod trainer;

pub use real::Real;

/// Default scalar for end-to-end runs. Gradient checks are the backbone of
/// the test suite and need f64 headroom; f32 remains available through the
/// generic API and as a checkpoint storage mode.
pub type Scalar = f64;

pub type Tensor = numerics::Tensor<Scalar>;
pub type Graph = numerics::Graph<Scalar>;
pub type Model = model::Model<Scalar>;
pub type TrainState = trainer::TrainState<Scalar>;
