//! Decoding strategies: top-k sampling, length-normalized beam search, the
//! safety-filtered SafeBeam variant, and shortcircuit post-processing.
//!
//! All decoders are pure functions of (scorer, prompt, options, seed): two
//! runs on the same build produce byte-identical [`Generation`]s. The beam
//! decoders additionally return a [`BeamTrace`] auditing every filtering and
//! expansion decision, which is how the "filtered beams never contribute"
//! property is checked from the outside.
//!
//! Scoring is abstracted behind [`TokenScorer`] so the same decoding code
//! runs against the real transformer ([`ModelScorer`]) and against hand-built
//! logits providers in tests.

use crate::corpus::{TokenId, Vocab};
use crate::model::math;
use crate::model::{KvCache, Model, ModelError};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Exponent of the length normalization applied to beam scores:
/// `score = cumulative logprob / length^LENGTH_NORM`.
pub const LENGTH_NORM: f64 = 0.7;

#[derive(Debug, Error)]
pub enum DecodeError {
    /// Safety filtering requires at least two beams so that one can survive.
    #[error(
        "safety filtering with drop_fraction {drop_fraction} needs n_beams >= 2 \
         (got {n_beams}); a single beam would be eliminated outright"
    )]
    AllBeamsFiltered { n_beams: usize, drop_fraction: f64 },
    #[error("invalid decode request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which decoding strategy produced a generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    TopK,
    Beam,
    SafeBeam,
}

/// Why a beam stopped extending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The beam chose the end-of-turn token.
    Eot,
    /// The generation budget was exhausted.
    MaxTokens,
    /// The beam was discarded by safety filtering.
    Filtered,
}

/// One decoding step of the returned generation: the chosen token, its
/// log-probability under the full next-token distribution, and the
/// probability mass the model put on the unsafe tag at that step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub id: TokenId,
    pub logprob: f32,
    pub p_unsafe: f32,
}

/// A decoded continuation with per-step metadata.
///
/// `ids` is the generated continuation only (the prompt is not repeated) and
/// has one entry per step record; `text` is its byte decoding with special
/// tokens stripped, so `ids` always decode to `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub ids: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    pub decoder: DecoderKind,
    /// Sampling seed; `None` for the deterministic beam decoders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub shortcircuited: bool,
}

/// One candidate sequence during beam decoding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Beam {
    /// Prompt plus generated continuation.
    pub ids: Vec<TokenId>,
    /// Sum of chosen-token log-probabilities over the continuation.
    pub cum_logprob: f32,
    /// Probability mass of the unsafe tag as this beam's next token, from the
    /// most recent scoring step.
    pub p_unsafe: f32,
    pub alive: bool,
    pub termination: Option<Termination>,
}

/// Step-by-step audit of a beam decode.
///
/// `steps[0]` always holds the single seed beam (the prompt); later entries
/// hold the live beam set at the start of each step, before filtering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamTrace {
    pub steps: Vec<BeamStepAudit>,
    /// For each step, the index within that step's `beams` of the returned
    /// generation's ancestor; same length as the generation's step records.
    pub winner_path: Vec<usize>,
    /// The beam the returned generation was read from.
    pub winner: Beam,
}

/// The live beams evaluated at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamStepAudit {
    pub beams: Vec<BeamAudit>,
    /// How many beams were expanded after filtering.
    pub expanded: usize,
}

/// Filtering outcome for one live beam at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamAudit {
    /// Index of this beam's ancestor in the previous step's `beams`
    /// (`None` for the seed beam).
    pub parent: Option<usize>,
    pub p_unsafe: f32,
    pub filtered: bool,
}

/// Options for [`beam_decode`], the shared core behind [`beam_search`] and
/// [`safebeam`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamOptions {
    pub n_beams: usize,
    pub max_tokens: usize,
    /// Fraction of live beams discarded each step, most-unsafe first.
    pub drop_fraction: f64,
    /// Whether the unsafe tag is removed from the expansion vocabulary.
    pub mask_unsafe: bool,
}

/// Next-token scoring interface shared by all decoders.
///
/// Implementations must be deterministic: the same sequence of calls yields
/// bitwise-identical log-probabilities. `State` captures one sequence's
/// scoring context; cloning it forks the sequence, which is how beam
/// candidates branch.
pub trait TokenScorer {
    type State: Clone;

    /// Vocabulary size; every returned log-prob vector has this length.
    fn vocab_size(&self) -> usize;

    /// Token id that terminates a sequence.
    fn eot_id(&self) -> TokenId {
        Vocab::EOT
    }

    /// Token id whose next-token probability defines `p_unsafe`. May lie
    /// outside the vocabulary, in which case `p_unsafe` is zero and masking
    /// is a no-op.
    fn unsafe_id(&self) -> TokenId {
        Vocab::UNSAFE_TAG
    }

    /// Longest total sequence (prompt + continuation) the scorer supports,
    /// if bounded. Decoders shrink their budget to fit.
    fn max_context(&self) -> Option<usize> {
        None
    }

    /// Consume the prompt, returning scoring state plus log-probabilities
    /// for the next token.
    fn begin(&self, prompt: &[TokenId]) -> Result<(Self::State, Vec<f32>), DecodeError>;

    /// Append one token, returning log-probabilities for the token after it.
    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f32>, DecodeError>;
}

/// Log-softmax over a logits row.
pub fn log_softmax(logits: &[f32]) -> Vec<f32> {
    let lse = math::log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

/// [`TokenScorer`] backed by a transformer with a per-sequence KV cache.
pub struct ModelScorer<'a> {
    model: &'a Model<f32>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model<f32>) -> Self {
        ModelScorer { model }
    }
}

impl TokenScorer for ModelScorer<'_> {
    type State = KvCache<f32>;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_context(&self) -> Option<usize> {
        Some(self.model.config.context_len)
    }

    fn begin(&self, prompt: &[TokenId]) -> Result<(Self::State, Vec<f32>), DecodeError> {
        let (cache, logits) = self.model.prefill(prompt)?;
        Ok((cache, log_softmax(&logits)))
    }

    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f32>, DecodeError> {
        let logits = self.model.step(state, token)?;
        Ok(log_softmax(&logits))
    }
}

fn p_unsafe_of(logprobs: &[f32], unsafe_idx: usize) -> f32 {
    logprobs.get(unsafe_idx).map_or(0.0, |lp| lp.exp())
}

/// Number of tokens a decoder may generate: `max_tokens`, shrunk so the
/// whole sequence fits the scorer's context if it has one.
fn effective_budget<S: TokenScorer>(scorer: &S, prompt_len: usize, max_tokens: usize) -> usize {
    match scorer.max_context() {
        Some(ctx) => max_tokens.min(ctx.saturating_sub(prompt_len)),
        None => max_tokens,
    }
}

fn empty_generation(decoder: DecoderKind, seed: Option<u64>) -> Generation {
    Generation {
        text: String::new(),
        ids: Vec::new(),
        steps: Vec::new(),
        decoder,
        seed,
        shortcircuited: false,
    }
}

/// Top-k sampling: at each step, renormalize over the `k` most probable
/// tokens (temperature applied) and draw one; stop at EOT or after
/// `max_tokens`. Deterministic given `rng_seed`.
pub fn sample_topk_with<S: TokenScorer>(
    scorer: &S,
    prompt_ids: &[TokenId],
    k: usize,
    max_tokens: usize,
    temperature: f64,
    rng_seed: u64,
) -> Result<Generation, DecodeError> {
    if k == 0 {
        return Err(DecodeError::InvalidRequest("k must be >= 1".into()));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(DecodeError::InvalidRequest(format!(
            "temperature {temperature} must be finite and > 0"
        )));
    }
    let budget = effective_budget(scorer, prompt_ids.len(), max_tokens);
    let mut gen = empty_generation(DecoderKind::TopK, Some(rng_seed));
    if budget == 0 {
        return Ok(gen);
    }

    let unsafe_idx = scorer.unsafe_id() as usize;
    let eot = scorer.eot_id();
    let mut rng = rng::substream(rng_seed, "sample-topk");
    let (mut state, mut logprobs) = scorer.begin(prompt_ids)?;

    loop {
        let chosen = sample_from_topk(&logprobs, k, temperature, &mut rng);
        gen.steps.push(StepRecord {
            id: chosen,
            logprob: logprobs[chosen as usize],
            p_unsafe: p_unsafe_of(&logprobs, unsafe_idx),
        });
        gen.ids.push(chosen);
        if chosen == eot || gen.ids.len() >= budget {
            break;
        }
        logprobs = scorer.advance(&mut state, chosen)?;
    }
    gen.text = Vocab::new().decode(&gen.ids);
    Ok(gen)
}

/// The `k` most probable token ids, ranked by (logprob desc, id asc).
fn topk_ids(logprobs: &[f32], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<usize> = (0..logprobs.len()).collect();
    ids.sort_by(|&a, &b| {
        logprobs[b]
            .partial_cmp(&logprobs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids.into_iter().map(|i| i as TokenId).collect()
}

fn sample_from_topk(
    logprobs: &[f32],
    k: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> TokenId {
    let top = topk_ids(logprobs, k);
    // Renormalize with temperature; subtracting the max keeps exp in range.
    let lp_max = f64::from(logprobs[top[0] as usize]);
    let weights: Vec<f64> = top
        .iter()
        .map(|&id| ((f64::from(logprobs[id as usize]) - lp_max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return top[i];
        }
    }
    *top.last().expect("k >= 1 guarantees a candidate")
}

/// Standard length-normalized beam search; returns the highest-scoring
/// finished beam. `n_beams = 1` reduces to greedy decoding.
pub fn beam_search_with<S: TokenScorer>(
    scorer: &S,
    prompt_ids: &[TokenId],
    n_beams: usize,
    max_tokens: usize,
) -> Result<Generation, DecodeError> {
    let opts = BeamOptions { n_beams, max_tokens, drop_fraction: 0.0, mask_unsafe: false };
    beam_decode(scorer, prompt_ids, &opts).map(|(gen, _)| gen)
}

/// SafeBeam: beam search that each step discards the ⌈`drop_fraction` ×
/// live⌉ beams most likely to emit the unsafe tag next, then expands the
/// survivors with the tag masked out of the vocabulary.
pub fn safebeam_with<S: TokenScorer>(
    scorer: &S,
    prompt_ids: &[TokenId],
    n_beams: usize,
    drop_fraction: f64,
    max_tokens: usize,
) -> Result<Generation, DecodeError> {
    safebeam_traced(scorer, prompt_ids, n_beams, drop_fraction, max_tokens).map(|(gen, _)| gen)
}

/// [`safebeam_with`] plus the full per-step audit trace.
pub fn safebeam_traced<S: TokenScorer>(
    scorer: &S,
    prompt_ids: &[TokenId],
    n_beams: usize,
    drop_fraction: f64,
    max_tokens: usize,
) -> Result<(Generation, BeamTrace), DecodeError> {
    let opts = BeamOptions { n_beams, max_tokens, drop_fraction, mask_unsafe: true };
    beam_decode(scorer, prompt_ids, &opts)
}

/// Convenience wrappers over a transformer model.
pub fn sample_topk(
    model: &Model<f32>,
    prompt_ids: &[TokenId],
    k: usize,
    max_tokens: usize,
    temperature: f64,
    rng_seed: u64,
) -> Result<Generation, DecodeError> {
    sample_topk_with(&ModelScorer::new(model), prompt_ids, k, max_tokens, temperature, rng_seed)
}

pub fn beam_search(
    model: &Model<f32>,
    prompt_ids: &[TokenId],
    n_beams: usize,
    max_tokens: usize,
) -> Result<Generation, DecodeError> {
    beam_search_with(&ModelScorer::new(model), prompt_ids, n_beams, max_tokens)
}

pub fn safebeam(
    model: &Model<f32>,
    prompt_ids: &[TokenId],
    n_beams: usize,
    drop_fraction: f64,
    max_tokens: usize,
) -> Result<Generation, DecodeError> {
    safebeam_with(&ModelScorer::new(model), prompt_ids, n_beams, drop_fraction, max_tokens)
}

/// One in-flight beam plus its bookkeeping.
struct BeamNode<St> {
    beam: Beam,
    /// Scoring state; dropped once the beam finishes.
    state: Option<St>,
    /// Log-probabilities for this beam's next token.
    next_logprobs: Vec<f32>,
    /// Step records along this beam's continuation.
    records: Vec<StepRecord>,
    /// For each step, this beam's ancestor index in that step's audit.
    path: Vec<usize>,
}

/// Shared beam-decoding core.
///
/// Each step: (1) compute each live beam's probability of emitting the
/// unsafe tag next; (2) mark the ⌈`drop_fraction` × live⌉ most unsafe beams
/// filtered — ties at the boundary are resolved in favor of the earlier
/// beam, and at least one beam always survives; (3) expand the survivors
/// over the vocabulary (minus the tag when `mask_unsafe`), keeping the best
/// `n_beams` children by length-normalized score. Beams that choose EOT or
/// exhaust the budget finish; the generation is read off the best finished
/// beam.
///
/// The first step holds only the seed beam (the prompt), so it always
/// expands exactly one beam; filtering proper begins once the beam set is
/// populated.
pub fn beam_decode<S: TokenScorer>(
    scorer: &S,
    prompt_ids: &[TokenId],
    opts: &BeamOptions,
) -> Result<(Generation, BeamTrace), DecodeError> {
    if opts.n_beams == 0 {
        return Err(DecodeError::InvalidRequest("n_beams must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.drop_fraction) {
        return Err(DecodeError::InvalidRequest(format!(
            "drop_fraction {} outside [0, 1]",
            opts.drop_fraction
        )));
    }
    if opts.drop_fraction > 0.0 && opts.n_beams < 2 {
        return Err(DecodeError::AllBeamsFiltered {
            n_beams: opts.n_beams,
            drop_fraction: opts.drop_fraction,
        });
    }
    let decoder = if opts.drop_fraction > 0.0 || opts.mask_unsafe {
        DecoderKind::SafeBeam
    } else {
        DecoderKind::Beam
    };
    let budget = effective_budget(scorer, prompt_ids.len(), opts.max_tokens);
    if budget == 0 {
        let trace = BeamTrace {
            steps: Vec::new(),
            winner_path: Vec::new(),
            winner: Beam {
                ids: prompt_ids.to_vec(),
                cum_logprob: 0.0,
                p_unsafe: 0.0,
                alive: false,
                termination: Some(Termination::MaxTokens),
            },
        };
        return Ok((empty_generation(decoder, None), trace));
    }

    let unsafe_idx = scorer.unsafe_id() as usize;
    let eot = scorer.eot_id();
    let (root_state, root_logprobs) = scorer.begin(prompt_ids)?;
    let mut live: Vec<BeamNode<S::State>> = vec![BeamNode {
        beam: Beam {
            ids: prompt_ids.to_vec(),
            cum_logprob: 0.0,
            p_unsafe: 0.0,
            alive: true,
            termination: None,
        },
        state: Some(root_state),
        next_logprobs: root_logprobs,
        records: Vec::new(),
        path: Vec::new(),
    }];
    let mut finished: Vec<BeamNode<S::State>> = Vec::new();
    let mut audits: Vec<BeamStepAudit> = Vec::new();

    while !live.is_empty() {
        for node in &mut live {
            node.beam.p_unsafe = p_unsafe_of(&node.next_logprobs, unsafe_idx);
        }
        let n_live = live.len();
        let drop_n =
            ((opts.drop_fraction * n_live as f64).ceil() as usize).min(n_live.saturating_sub(1));
        // Rank most-unsafe first; among ties the higher index sorts first and
        // is filtered first, so the lowest index survives.
        let mut order: Vec<usize> = (0..n_live).collect();
        order.sort_by(|&a, &b| {
            live[b]
                .beam
                .p_unsafe
                .partial_cmp(&live[a].beam.p_unsafe)
                .unwrap_or(Ordering::Equal)
                .then(b.cmp(&a))
        });
        let mut is_filtered = vec![false; n_live];
        for &i in order.iter().take(drop_n) {
            is_filtered[i] = true;
            live[i].beam.alive = false;
            live[i].beam.termination = Some(Termination::Filtered);
        }
        audits.push(BeamStepAudit {
            beams: live
                .iter()
                .enumerate()
                .map(|(i, node)| BeamAudit {
                    parent: node.path.last().copied(),
                    p_unsafe: node.beam.p_unsafe,
                    filtered: is_filtered[i],
                })
                .collect(),
            expanded: n_live - drop_n,
        });

        // Candidates over (surviving beam, token); all live beams share the
        // same continuation length, so the normalization is uniform within a
        // step, but keep scores in normalized form for clarity.
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (i, node) in live.iter().enumerate() {
            if is_filtered[i] {
                continue;
            }
            let norm = ((node.records.len() + 1) as f64).powf(LENGTH_NORM);
            for (v, &lp) in node.next_logprobs.iter().enumerate() {
                if opts.mask_unsafe && v == unsafe_idx {
                    continue;
                }
                let cum = f64::from(node.beam.cum_logprob) + f64::from(lp);
                cands.push((cum / norm, i, v as TokenId));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(opts.n_beams);
        if cands.is_empty() {
            break;
        }

        let mut next_live = Vec::with_capacity(cands.len());
        for &(_, i, v) in &cands {
            let parent = &live[i];
            let lp = parent.next_logprobs[v as usize];
            let mut ids = parent.beam.ids.clone();
            ids.push(v);
            let mut records = parent.records.clone();
            records.push(StepRecord { id: v, logprob: lp, p_unsafe: parent.beam.p_unsafe });
            let mut path = parent.path.clone();
            path.push(i);
            let cum_logprob = parent.beam.cum_logprob + lp;
            if v == eot || records.len() >= budget {
                let termination =
                    if v == eot { Termination::Eot } else { Termination::MaxTokens };
                finished.push(BeamNode {
                    beam: Beam {
                        ids,
                        cum_logprob,
                        p_unsafe: parent.beam.p_unsafe,
                        alive: false,
                        termination: Some(termination),
                    },
                    state: None,
                    next_logprobs: Vec::new(),
                    records,
                    path,
                });
            } else {
                let mut state =
                    parent.state.as_ref().expect("live beams keep their state").clone();
                let next_logprobs = scorer.advance(&mut state, v)?;
                next_live.push(BeamNode {
                    beam: Beam {
                        ids,
                        cum_logprob,
                        p_unsafe: 0.0,
                        alive: true,
                        termination: None,
                    },
                    state: Some(state),
                    next_logprobs,
                    records,
                    path,
                });
            }
        }
        live = next_live;
    }

    let winner = finished
        .iter()
        .max_by(|a, b| {
            let sa = f64::from(a.beam.cum_logprob) / (a.records.len() as f64).powf(LENGTH_NORM);
            let sb = f64::from(b.beam.cum_logprob) / (b.records.len() as f64).powf(LENGTH_NORM);
            // max_by keeps the later of equal elements; prefer the earlier
            // finisher on ties for a stable, documented order.
            sa.partial_cmp(&sb).unwrap_or(Ordering::Equal).then(Ordering::Greater)
        })
        .ok_or_else(|| {
            DecodeError::InvalidRequest("vocabulary too small to expand any beam".into())
        })?;

    let ids: Vec<TokenId> = winner.records.iter().map(|r| r.id).collect();
    let gen = Generation {
        text: Vocab::new().decode(&ids),
        ids,
        steps: winner.records.clone(),
        decoder,
        seed: None,
        shortcircuited: false,
    };
    let trace = BeamTrace {
        steps: audits,
        winner_path: winner.path.clone(),
        winner: winner.beam.clone(),
    };
    Ok((gen, trace))
}

/// If the unsafe tag appears in the generation, truncate at its first
/// occurrence and substitute `refusal_text`; otherwise return the
/// generation unchanged.
///
/// The truncated step records (including the tag's own step) are kept as
/// evidence of what the model produced; `ids` are re-encoded from the
/// refusal so they still decode to `text`.
pub fn shortcircuit_postprocess(gen: Generation, refusal_text: &str) -> Generation {
    let Some(pos) = gen.ids.iter().position(|&id| id == Vocab::UNSAFE_TAG) else {
        return gen;
    };
    let vocab = Vocab::new();
    Generation {
        text: refusal_text.to_string(),
        ids: vocab.encode(refusal_text),
        steps: gen.steps[..=pos].to_vec(),
        decoder: gen.decoder,
        seed: gen.seed,
        shortcircuited: true,
    }
}
