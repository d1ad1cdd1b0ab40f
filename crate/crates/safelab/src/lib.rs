//! Desk-scale laboratory for studying *when* safety interventions should enter
//! language-model pretraining.
//!
//! The crate trains small byte-level decoder-only transformers on corpora where
//! data-level safety interventions (metadata tagging, refusal pairs, rephrased
//! documents) are switched on at a configurable fraction of the token budget,
//! then measures the effect through safety-filtered beam search, overrefusal
//! categorization, adversarial suffix attacks, and linear probes over internal
//! activations.
//!
//! Module map:
//! - [`corpus`] — byte vocabulary, document ingestion, interventions, packing
//! - [`curriculum`] — phase schedules over the token budget, mixture sampling
//! - [`model`] — decoder-only transformer: forward, backward, activations
//! - [`trainer`] — AdamW, LR schedule, pretrain/finetune loops, checkpoints
//! - [`decode`] — top-k sampling, beam search, SafeBeam, shortcircuiting
//! - [`probe`] — logistic-regression probes and AUC over activations
//! - [`attack`] — greedy coordinate gradient adversarial suffix search
//! - [`eval`] — judge, safety/overrefusal harness, report emission
//! - [`config`] — run configuration file parsing and validation
//! - [`fixtures`] — deterministic synthetic corpora and prompt sets

pub mod attack;
mod chart;
pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod decode;
pub mod eval;
pub mod fixtures;
pub mod model;
pub mod probe;
pub mod rng;
pub mod trainer;

pub use corpus::{Corpus, Document, Source, TokenSeq, Variant, Vocab};
pub use curriculum::{CurriculumSchedule, Phase};
pub use model::{Model, ModelConfig};
