//! Training: one loop serving pretraining over a curriculum, instruction
//! tuning, and benign finetuning, plus the optimizer, LR schedule,
//! checkpointing, and run logging they share.

pub mod checkpoint;
pub mod stream;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use stream::{SourceStream, StreamSnapshot};

use crate::corpus::{encode_chat_example, Corpus, Source, TokenId, Vocab};
use crate::curriculum::CurriculumSchedule;
use crate::model::{Model, ModelError, ParamSet, Scalar};
use crate::rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("source {1} has no eligible documents in phase {0}")]
    SourceExhausted(usize, Source),
    #[error("document {id} cannot be tokenized: {reason}")]
    MalformedDocument { id: String, reason: String },
    #[error("non-finite update in {0}")]
    NonFiniteUpdate(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint I/O: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Curriculum(#[from] crate::curriculum::CurriculumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    /// LR-schedule horizon override; derived from the budget or dataset when
    /// absent.
    pub total_steps: Option<u64>,
    /// Finetuning passes over the dataset.
    pub epochs: u64,
    /// Sequences (packed blocks) per optimizer step.
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Steps between periodic checkpoints, if any.
    pub checkpoint_every: Option<u64>,
    /// Safety-score threshold splitting safe from unsafe documents.
    pub unsafe_threshold: f64,
    /// Per-position probability of a metadata tag in tagged documents.
    pub tag_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            min_lr: 3e-5,
            warmup_ratio: 0.03,
            total_steps: None,
            epochs: 1,
            batch_size: 8,
            grad_accum: 1,
            weight_decay: 0.1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: None,
            unsafe_threshold: 0.5,
            tag_rate: 0.05,
        }
    }
}

impl TrainConfig {
    /// Supervised-finetuning defaults: batch 4, lr 2e-5, one epoch.
    pub fn finetune_defaults() -> Self {
        TrainConfig {
            peak_lr: 2e-5,
            min_lr: 0.0,
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::InvalidConfig(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.grad_accum == 0 {
            return Err(TrainError::InvalidConfig("grad_accum must be >= 1".into()));
        }
        if self.peak_lr <= 0.0 || self.peak_lr.is_nan() {
            return Err(TrainError::InvalidConfig(format!("peak_lr {} must be > 0", self.peak_lr)));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(TrainError::InvalidConfig(format!(
                "min_lr {} outside [0, peak_lr]",
                self.min_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.tag_rate) {
            return Err(TrainError::InvalidConfig(format!("tag_rate {} outside [0, 1]", self.tag_rate)));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr` over `ceil(warmup_ratio × total)` steps, then
/// cosine decay to `min_lr` at `step == total`.
pub fn lr_at(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return config.min_lr;
    }
    let step = step.min(total_steps);
    let warmup = (config.warmup_ratio * total_steps as f64).ceil() as u64;
    if warmup > 0 && step < warmup {
        return config.peak_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return config.peak_lr;
    }
    let t = (step - warmup) as f64 / (total_steps - warmup) as f64;
    config.min_lr + 0.5 * (config.peak_lr - config.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First and second Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: ParamSet<S>,
    pub v: ParamSet<S>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: &crate::model::ModelConfig) -> Self {
        AdamState {
            m: ParamSet::zeros_like_config(config),
            v: ParamSet::zeros_like_config(config),
            t: 0,
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_gradients<S: Scalar>(grads: &mut ParamSet<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    grads.for_each(|_, t| {
        for &g in t {
            let g = g.to_f64_c();
            sq += g * g;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64_c(max_norm / norm);
        grads.for_each_mut(|_, t| {
            for g in t.iter_mut() {
                *g *= scale;
            }
        });
    }
    norm
}

/// One decoupled-weight-decay Adam update with bias-corrected moments.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    opt: &mut AdamState<S>,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    opt.t += 1;
    let b1 = S::from_f64_c(config.beta1);
    let b2 = S::from_f64_c(config.beta2);
    let one_m_b1 = S::from_f64_c(1.0 - config.beta1);
    let one_m_b2 = S::from_f64_c(1.0 - config.beta2);
    let bias1 = S::from_f64_c(1.0 - config.beta1.powi(opt.t as i32));
    let bias2 = S::from_f64_c(1.0 - config.beta2.powi(opt.t as i32));
    let eps = S::from_f64_c(config.eps);
    let lr_s = S::from_f64_c(lr);
    let decay = S::from_f64_c(lr * config.weight_decay);

    let mut p_t = params.tensors_mut();
    let g_t = grads.tensors();
    let mut m_t = opt.m.tensors_mut();
    let mut v_t = opt.v.tensors_mut();
    for i in 0..p_t.len() {
        let (p, g, m, v) = (&mut p_t[i], &g_t[i], &mut m_t[i], &mut v_t[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_m_b1 * g[j];
            v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] = p[j] - lr_s * (m_hat / (v_hat.sqrt() + eps)) - decay * p[j];
        }
    }
    drop(p_t);
    if let Err(name) = params.all_finite() {
        return Err(TrainError::NonFiniteUpdate(name));
    }
    Ok(())
}

/// Everything that must survive an interrupt to resume training exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub tokens_seen: u64,
    pub adam: AdamState<f32>,
    pub mixture_rng: ChaCha8Rng,
    pub streams: BTreeMap<(usize, Source), SourceStream>,
    /// Stream positions restored from a checkpoint, hydrated into live
    /// streams once corpora are in hand.
    pub stream_snapshots: BTreeMap<(usize, Source), StreamSnapshot>,
    pub loss_history: Vec<f32>,
    pub accounting: BTreeMap<(usize, Source), u64>,
}

impl TrainState {
    pub fn new(model_config: &crate::model::ModelConfig, seed: u64) -> Self {
        TrainState {
            step: 0,
            tokens_seen: 0,
            adam: AdamState::new(model_config),
            mixture_rng: rng::substream(seed, "mixture"),
            streams: BTreeMap::new(),
            stream_snapshots: BTreeMap::new(),
            loss_history: Vec::new(),
            accounting: BTreeMap::new(),
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub phase: usize,
    pub source: String,
    pub loss: f32,
    pub lr: f64,
}

/// Optional knobs for [`pretrain`] beyond the config.
#[derive(Debug, Default)]
pub struct PretrainOpts<'a> {
    /// Stop (without error) once `state.step` reaches this value.
    pub pause_at_step: Option<u64>,
    /// Directory for periodic checkpoints (cadence from the config).
    pub checkpoint_dir: Option<&'a Path>,
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Pretrain over a curriculum schedule until the token budget is consumed.
///
/// Deterministic given (config, seed, corpora): the loss trace, accounting,
/// and final parameters are reproducible bitwise on the same build, and a
/// run resumed from a checkpoint continues that exact trace.
pub fn pretrain(
    model: &mut Model<f32>,
    schedule: &CurriculumSchedule,
    corpora: &BTreeMap<Source, Corpus>,
    config: &TrainConfig,
    state: &mut TrainState,
    opts: PretrainOpts,
    mut on_record: impl FnMut(&RunRecord),
) -> Result<(), TrainError> {
    config.validate()?;
    let ctx = model.config.context_len;
    let budget = schedule.total_token_budget;
    let tokens_per_step = (config.batch_size * config.grad_accum * ctx) as u64;
    let total_steps = config.total_steps.unwrap_or_else(|| ceil_div(budget, tokens_per_step));

    // Fail fast if any phase references a source with no eligible documents.
    for (pi, phase) in schedule.phases.iter().enumerate() {
        for (&source, &w) in &phase.mixture {
            if w <= 0.0 {
                continue;
            }
            let corpus = corpora
                .get(&source)
                .ok_or(TrainError::SourceExhausted(pi, source))?;
            if !state.streams.contains_key(&(pi, source)) {
                let s = match state.stream_snapshots.get(&(pi, source)) {
                    Some(snap) => SourceStream::from_snapshot(
                        corpus,
                        pi,
                        source,
                        phase.interventions_active,
                        config,
                        snap,
                    )?,
                    None => SourceStream::new(corpus, pi, source, phase.interventions_active, config)?,
                };
                state.streams.insert((pi, source), s);
            }
        }
    }

    while state.tokens_seen < budget {
        if let Some(pause) = opts.pause_at_step {
            if state.step >= pause {
                return Ok(());
            }
        }

        let mut planned = state.tokens_seen;
        let mut grand_loss = 0.0f32;
        let mut accum: Option<ParamSet<f32>> = None;
        let mut batch_phase = None;
        let mut batch_sources: Vec<Source> = Vec::new();
        let mut micro_batches = 0u32;

        for _ in 0..config.grad_accum {
            if planned >= budget {
                break;
            }
            let mut ids: Vec<TokenId> = Vec::with_capacity(config.batch_size * ctx);
            let mut targets: Vec<TokenId> = Vec::with_capacity(config.batch_size * ctx);
            let mut blocks = 0usize;
            for _ in 0..config.batch_size {
                if planned >= budget {
                    break;
                }
                let phase_idx = schedule.phase_index_at(planned)?;
                let phase = &schedule.phases[phase_idx];
                let source = crate::curriculum::sample_source(phase, &mut state.mixture_rng);
                batch_phase.get_or_insert(phase_idx);
                if !batch_sources.contains(&source) {
                    batch_sources.push(source);
                }
                let corpus = corpora
                    .get(&source)
                    .ok_or(TrainError::SourceExhausted(phase_idx, source))?;
                let stream = state
                    .streams
                    .get_mut(&(phase_idx, source))
                    .expect("streams prebuilt for all weighted sources");
                let block = stream.next_block(corpus, ctx, config)?;
                ids.extend_from_slice(&block[..ctx]);
                targets.extend_from_slice(&block[1..]);
                planned += ctx as u64;
                *state.accounting.entry((phase_idx, source)).or_insert(0) += ctx as u64;
                blocks += 1;
            }
            if blocks == 0 {
                break;
            }
            let mask = vec![1u8; blocks * ctx];
            let cache = model.forward(&ids, blocks, ctx)?;
            let (loss, grads) = model.backward(&cache, &targets, &mask)?;
            grand_loss += loss;
            micro_batches += 1;
            match &mut accum {
                None => accum = Some(grads.params),
                Some(acc) => {
                    let mut a_t = acc.tensors_mut();
                    let g_t = grads.params.tensors();
                    for i in 0..a_t.len() {
                        for j in 0..a_t[i].len() {
                            a_t[i][j] += g_t[i][j];
                        }
                    }
                }
            }
        }

        let mut grads = accum.expect("budget not yet consumed implies at least one block");
        if micro_batches > 1 {
            let inv = 1.0f32 / micro_batches as f32;
            grads.for_each_mut(|_, t| {
                for g in t.iter_mut() {
                    *g *= inv;
                }
            });
        }
        let loss = grand_loss / micro_batches as f32;
        clip_gradients(&mut grads, config.grad_clip);
        let lr = lr_at(state.step + 1, total_steps, config);
        adamw_step(&mut model.params, &grads, &mut state.adam, lr, config)?;
        state.step += 1;
        state.tokens_seen = planned;
        state.loss_history.push(loss);

        let record = RunRecord {
            step: state.step,
            tokens_seen: state.tokens_seen,
            phase: batch_phase.unwrap_or(0),
            source: batch_sources.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
            loss,
            lr,
        };
        on_record(&record);

        if let (Some(dir), Some(every)) = (opts.checkpoint_dir, config.checkpoint_every) {
            if every > 0 && state.step.is_multiple_of(every) {
                let path = dir.join(format!("step{:08}.ckpt", state.step));
                save_checkpoint(&path, model, state, config)?;
            }
        }
    }
    Ok(())
}

/// Supervised finetuning on request/response chat pairs for
/// `config.epochs` passes; loss masked to response tokens only.
pub fn finetune(
    model: &mut Model<f32>,
    dataset: &Corpus,
    config: &TrainConfig,
    state: &mut TrainState,
    mut on_record: impl FnMut(&RunRecord),
) -> Result<(), TrainError> {
    config.validate()?;
    let vocab = Vocab;
    let ctx = model.config.context_len;
    let mut examples: Vec<(Vec<TokenId>, std::ops::Range<usize>)> = Vec::with_capacity(dataset.len());
    for doc in dataset.iter() {
        let response = doc.response.as_deref().ok_or_else(|| TrainError::MalformedDocument {
            id: doc.id.clone(),
            reason: "finetuning document without a response".into(),
        })?;
        let (mut ids, mut range) = encode_chat_example(&doc.text, response, &vocab);
        if ids.len() > ctx + 1 {
            ids.truncate(ctx + 1);
            range.end = range.end.min(ids.len());
            range.start = range.start.min(range.end);
        }
        examples.push((ids, range));
    }
    if examples.is_empty() {
        return Err(TrainError::InvalidConfig("empty finetuning dataset".into()));
    }

    let steps_per_epoch = ceil_div(examples.len() as u64, config.batch_size as u64);
    let total_steps = config.total_steps.unwrap_or(config.epochs * steps_per_epoch);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng = rng::substream(config.seed, &format!("finetune-shuffle:{epoch}"));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(config.batch_size) {
            let t = chunk
                .iter()
                .map(|&i| examples[i].0.len() - 1)
                .max()
                .expect("chunks are non-empty")
                .max(1);
            let rows = chunk.len();
            let mut ids = vec![Vocab::PAD; rows * t];
            let mut targets = vec![Vocab::PAD; rows * t];
            let mut mask = vec![0u8; rows * t];
            let mut real_tokens = 0u64;
            for (r, &ex) in chunk.iter().enumerate() {
                let (toks, range) = &examples[ex];
                let len = toks.len() - 1;
                ids[r * t..r * t + len].copy_from_slice(&toks[..len]);
                targets[r * t..r * t + len].copy_from_slice(&toks[1..]);
                for j in 0..len {
                    if range.contains(&(j + 1)) {
                        mask[r * t + j] = 1;
                    }
                }
                real_tokens += len as u64;
            }
            let cache = model.forward(&ids, rows, t)?;
            let (loss, mut grads) = model.backward(&cache, &targets, &mask)?;
            clip_gradients(&mut grads.params, config.grad_clip);
            let lr = lr_at(state.step + 1, total_steps, config);
            adamw_step(&mut model.params, &grads.params, &mut state.adam, lr, config)?;
            state.step += 1;
            state.tokens_seen += real_tokens;
            state.loss_history.push(loss);
            on_record(&RunRecord {
                step: state.step,
                tokens_seen: state.tokens_seen,
                phase: 0,
                source: "finetune".into(),
                loss,
                lr,
            });
        }
    }
    Ok(())
}
