//! The three data-level safety interventions.
//!
//! All transforms here are pure given their inputs and seed. Tag placement is
//! keyed by document id upstream (see [`crate::rng::derive_seed`]), so a
//! document's tags do not move when the corpus is reordered.

use super::{Document, TokenId, TokenSeq, Variant, Vocab};
use crate::corpus::label_unsafe;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InterventionError {
    #[error("insertion rate {0} outside [0,1]")]
    InvalidRate(f64),
    #[error("empty {0} segment in refusal pair")]
    EmptySegment(&'static str),
    #[error("metadata tags apply to unsafe documents only (doc {0:?} is labeled safe)")]
    SafeDocTagged(String),
    #[error("no rephrased counterpart for document {0:?}")]
    MissingCounterpart(String),
}

/// Insert an UNSAFE_TAG before each position with independent probability
/// `rate`. Original tokens keep their relative order; deleting every tag
/// recovers the input exactly.
pub fn insert_metadata_tags(
    tokens: &TokenSeq,
    rate: f64,
    rng_seed: u64,
) -> Result<TokenSeq, InterventionError> {
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(InterventionError::InvalidRate(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(tokens.ids.len());
    for &id in &tokens.ids {
        // One draw per position even at rate 0/1 keeps the stream aligned
        // across rates for the same seed.
        if rng.gen::<f64>() < rate {
            out.push(Vocab::UNSAFE_TAG);
        }
        out.push(id);
    }
    Ok(TokenSeq::new(out, tokens.provenance.clone()))
}

/// Format a conversation-style request/refusal pair:
/// `USER · request · EOT · ASSISTANT · refusal · EOT`.
pub fn format_refusal_pair(
    request: &str,
    refusal: &str,
    vocab: &Vocab,
) -> Result<TokenSeq, InterventionError> {
    if request.is_empty() {
        return Err(InterventionError::EmptySegment("request"));
    }
    if refusal.is_empty() {
        return Err(InterventionError::EmptySegment("refusal"));
    }
    let (ids, _) = encode_chat_example(request, refusal, vocab);
    Ok(TokenSeq::new(ids, String::new()))
}

/// Encode a chat example, returning the ids and the half-open target range of
/// response positions (covering the response bytes and the closing EOT).
///
/// Unlike [`format_refusal_pair`] this allows an empty response, which yields
/// an example whose loss mask is empty.
pub fn encode_chat_example(
    request: &str,
    response: &str,
    vocab: &Vocab,
) -> (Vec<TokenId>, std::ops::Range<usize>) {
    let mut ids = vec![Vocab::USER];
    ids.extend(vocab.encode(request));
    ids.push(Vocab::EOT);
    ids.push(Vocab::ASSISTANT);
    let response_start = ids.len();
    ids.extend(vocab.encode(response));
    ids.push(Vocab::EOT);
    let range = if response.is_empty() {
        // Nothing to learn from an empty response; even the closing EOT is
        // excluded so the example contributes zero gradient.
        response_start..response_start
    } else {
        response_start..ids.len()
    };
    (ids, range)
}

/// Prompt prefix for chat-style generation: `USER · text · EOT · ASSISTANT`.
pub fn encode_chat_prompt(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    let mut ids = vec![Vocab::USER];
    ids.extend(vocab.encode(text));
    ids.push(Vocab::EOT);
    ids.push(Vocab::ASSISTANT);
    ids
}

/// Deterministic template rephraser for synthetic corpora. Real rephrased
/// corpora are ingested from sibling files instead.
pub fn rephrase_template(text: &str) -> String {
    format!("[context: the following describes unsafe activity] {text}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionKind {
    Tag,
    Refusal,
    RephraseIngest,
    None,
}

/// Parameters shared by [`apply_intervention`].
pub struct InterventionParams<'a> {
    /// Binarization threshold for safe/unsafe labeling.
    pub unsafe_threshold: f64,
    /// Refusal texts to pair with harmful requests; one is chosen per document.
    pub refusal_templates: &'a [String],
    /// Corpus of pre-rephrased counterparts, keyed by matching document id.
    pub rephrased: Option<&'a super::Corpus>,
}

/// Apply one intervention to a document, returning the transformed copy.
///
/// Tagging only records the variant; the tag tokens themselves are inserted at
/// tokenization time so placement stays keyed to the document id.
pub fn apply_intervention(
    doc: &Document,
    kind: InterventionKind,
    params: &InterventionParams,
    rng_seed: u64,
) -> Result<Document, InterventionError> {
    match kind {
        InterventionKind::None => Ok(doc.clone()),
        InterventionKind::Tag => {
            if !label_unsafe(doc, params.unsafe_threshold) {
                return Err(InterventionError::SafeDocTagged(doc.id.clone()));
            }
            let mut out = doc.clone();
            out.variant = Variant::MetadataTagged;
            Ok(out)
        }
        InterventionKind::Refusal => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let refusal = if params.refusal_templates.is_empty() {
                "I can't help with that.".to_string()
            } else {
                params.refusal_templates[rng.gen_range(0..params.refusal_templates.len())].clone()
            };
            let mut out = doc.clone();
            out.variant = Variant::RefusalPair;
            out.response = Some(refusal);
            Ok(out)
        }
        InterventionKind::RephraseIngest => {
            let counterpart = params
                .rephrased
                .and_then(|c| c.get(&doc.id))
                .ok_or_else(|| InterventionError::MissingCounterpart(doc.id.clone()))?;
            let mut out = doc.clone();
            out.text = counterpart.text.clone();
            out.safety_score = counterpart.safety_score;
            out.variant = Variant::Rephrased;
            Ok(out)
        }
    }
}
