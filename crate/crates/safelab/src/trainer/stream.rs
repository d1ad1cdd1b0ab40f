//! Deterministic token streams, one per (phase, source).
//!
//! A stream walks its eligible documents in a seeded per-epoch permutation,
//! tokenizes each (applying metadata tagging where the document variant asks
//! for it), and concatenates them with DOC_SEP. Its resume state is tiny:
//! epoch, cursor, and the leftover token buffer — the permutation itself is
//! re-derived from `(seed, phase, source, epoch)`.

use super::{TrainConfig, TrainError};
use crate::corpus::{
    format_refusal_pair, insert_metadata_tags, label_unsafe, Corpus, Document, Source, TokenId,
    TokenSeq, Variant, Vocab,
};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// The serialized position of a stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSnapshot {
    pub epoch: u64,
    pub cursor: usize,
    pub buffer: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct SourceStream {
    pub phase: usize,
    pub source: Source,
    /// Indices into the corpus document list, in corpus order.
    eligible: Vec<usize>,
    perm: Vec<u32>,
    epoch: u64,
    cursor: usize,
    buffer: VecDeque<TokenId>,
}

/// Which documents a phase may train on: outside intervention phases only
/// raw safe documents; inside them, everything except raw unsafe documents
/// (those appear in tagged form instead).
fn is_eligible(doc: &Document, interventions_active: bool, unsafe_threshold: f64) -> bool {
    let raw_unsafe = doc.variant == Variant::Raw && label_unsafe(doc, unsafe_threshold);
    if interventions_active {
        !raw_unsafe
    } else {
        doc.variant == Variant::Raw && !raw_unsafe
    }
}

/// Tokenize one document for the training stream.
pub fn tokenize_document(doc: &Document, seed: u64, tag_rate: f64) -> Result<Vec<TokenId>, TrainError> {
    let vocab = Vocab;
    match doc.variant {
        Variant::Raw | Variant::Rephrased => Ok(vocab.encode(&doc.text)),
        Variant::MetadataTagged => {
            let plain = TokenSeq::new(vocab.encode(&doc.text), doc.id.clone());
            let tag_seed = rng::derive_seed(seed, &format!("tag:{}", doc.id));
            let tagged = insert_metadata_tags(&plain, tag_rate, tag_seed)
                .map_err(|e| TrainError::MalformedDocument { id: doc.id.clone(), reason: e.to_string() })?;
            Ok(tagged.ids)
        }
        Variant::RefusalPair => {
            let response = doc.response.as_deref().ok_or_else(|| TrainError::MalformedDocument {
                id: doc.id.clone(),
                reason: "refusal pair without a response".into(),
            })?;
            let pair = format_refusal_pair(&doc.text, response, &vocab)
                .map_err(|e| TrainError::MalformedDocument { id: doc.id.clone(), reason: e.to_string() })?;
            Ok(pair.ids)
        }
    }
}

fn derive_perm(seed: u64, phase: usize, source: Source, epoch: u64, len: usize) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..len as u32).collect();
    let mut rng = rng::substream(seed, &format!("shuffle:{phase}:{source}:{epoch}"));
    perm.shuffle(&mut rng);
    perm
}

impl SourceStream {
    pub fn new(
        corpus: &Corpus,
        phase: usize,
        source: Source,
        interventions_active: bool,
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let eligible: Vec<usize> = corpus
            .documents()
            .iter()
            .enumerate()
            .filter(|(_, d)| is_eligible(d, interventions_active, config.unsafe_threshold))
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(TrainError::SourceExhausted(phase, source));
        }
        let perm = derive_perm(config.seed, phase, source, 0, eligible.len());
        Ok(SourceStream {
            phase,
            source,
            eligible,
            perm,
            epoch: 0,
            cursor: 0,
            buffer: VecDeque::new(),
        })
    }

    /// Pull `block_len + 1` tokens (the extra one is the last next-token
    /// target), consuming `block_len` from the stream.
    pub fn next_block(
        &mut self,
        corpus: &Corpus,
        block_len: usize,
        config: &TrainConfig,
    ) -> Result<Vec<TokenId>, TrainError> {
        while self.buffer.len() <= block_len {
            if self.cursor >= self.perm.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.perm = derive_perm(config.seed, self.phase, self.source, self.epoch, self.eligible.len());
            }
            let doc_idx = self.eligible[self.perm[self.cursor] as usize];
            self.cursor += 1;
            let doc = &corpus.documents()[doc_idx];
            let mut toks = tokenize_document(doc, config.seed, config.tag_rate)?;
            toks.push(Vocab::DOC_SEP);
            self.buffer.extend(toks);
        }
        let out: Vec<TokenId> = self.buffer.iter().take(block_len + 1).copied().collect();
        self.buffer.drain(..block_len);
        Ok(out)
    }

    pub fn snapshot(&self) -> StreamSnapshot {
        StreamSnapshot {
            epoch: self.epoch,
            cursor: self.cursor,
            buffer: self.buffer.iter().copied().collect(),
        }
    }

    pub fn from_snapshot(
        corpus: &Corpus,
        phase: usize,
        source: Source,
        interventions_active: bool,
        config: &TrainConfig,
        snap: &StreamSnapshot,
    ) -> Result<Self, TrainError> {
        let mut stream = SourceStream::new(corpus, phase, source, interventions_active, config)?;
        if snap.cursor > stream.eligible.len() {
            return Err(TrainError::CorruptCheckpoint(format!(
                "stream cursor {} beyond {} eligible documents",
                snap.cursor,
                stream.eligible.len()
            )));
        }
        stream.epoch = snap.epoch;
        stream.cursor = snap.cursor;
        stream.perm = derive_perm(config.seed, phase, source, snap.epoch, stream.eligible.len());
        stream.buffer = snap.buffer.iter().copied().collect();
        Ok(stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str, score: f64, source: Source) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
            safety_score: score,
            source,
            variant: Variant::Raw,
            response: None,
        }
    }

    fn web_corpus() -> Corpus {
        let mut docs = Vec::new();
        for i in 0..6 {
            docs.push(doc(&format!("safe{i}"), &format!("safe document number {i} body"), 0.1, Source::Web));
        }
        let mut tagged = doc("bad0", "gloomspore brewing steps", 0.9, Source::Web);
        tagged.variant = Variant::MetadataTagged;
        docs.push(tagged);
        docs.push(doc("raw-bad", "raw unsafe text", 0.95, Source::Web));
        Corpus::from_documents(docs).unwrap()
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig { seed, ..TrainConfig::default() }
    }

    #[test]
    fn eligibility_respects_phase() {
        let corpus = web_corpus();
        let safe_only = SourceStream::new(&corpus, 0, Source::Web, false, &cfg(1)).unwrap();
        assert_eq!(safe_only.eligible.len(), 6);
        let interventions = SourceStream::new(&corpus, 1, Source::Web, true, &cfg(1)).unwrap();
        // Six safe raw + one tagged; the raw unsafe document never trains.
        assert_eq!(interventions.eligible.len(), 7);
    }

    #[test]
    fn blocks_are_deterministic_and_resumable() {
        let corpus = web_corpus();
        let config = cfg(9);
        let mut a = SourceStream::new(&corpus, 0, Source::Web, false, &config).unwrap();
        let mut b = SourceStream::new(&corpus, 0, Source::Web, false, &config).unwrap();
        for _ in 0..5 {
            assert_eq!(
                a.next_block(&corpus, 16, &config).unwrap(),
                b.next_block(&corpus, 16, &config).unwrap()
            );
        }
        // Snapshot mid-stream, keep going on both; they must stay in lockstep.
        let snap = a.snapshot();
        let mut restored =
            SourceStream::from_snapshot(&corpus, 0, Source::Web, false, &config, &snap).unwrap();
        for _ in 0..40 {
            assert_eq!(
                a.next_block(&corpus, 16, &config).unwrap(),
                restored.next_block(&corpus, 16, &config).unwrap()
            );
        }
        assert!(a.epoch > 0, "40 blocks of 16 must recycle this corpus");
    }

    #[test]
    fn epochs_reshuffle() {
        let corpus = web_corpus();
        let config = cfg(4);
        let s = SourceStream::new(&corpus, 0, Source::Web, false, &config).unwrap();
        let e0 = derive_perm(config.seed, 0, Source::Web, 0, s.eligible.len());
        let e1 = derive_perm(config.seed, 0, Source::Web, 1, s.eligible.len());
        assert_ne!(e0, e1);
        let mut sorted0 = e0.clone();
        sorted0.sort_unstable();
        assert_eq!(sorted0, (0..6).collect::<Vec<u32>>());
    }

    #[test]
    fn consecutive_blocks_share_boundary_token() {
        let corpus = web_corpus();
        let config = cfg(2);
        let mut s = SourceStream::new(&corpus, 0, Source::Web, false, &config).unwrap();
        let b1 = s.next_block(&corpus, 8, &config).unwrap();
        let b2 = s.next_block(&corpus, 8, &config).unwrap();
        assert_eq!(b1.len(), 9);
        assert_eq!(b1[8], b2[0]);
    }

    #[test]
    fn empty_source_is_exhausted() {
        let corpus = Corpus::from_documents(vec![doc("only-bad", "x", 0.9, Source::Web)]).unwrap();
        match SourceStream::new(&corpus, 0, Source::Web, false, &cfg(0)) {
            Err(TrainError::SourceExhausted(0, Source::Web)) => {}
            other => panic!("expected SourceExhausted, got {other:?}"),
        }
    }

    #[test]
    fn tagged_documents_gain_tags_in_stream() {
        let corpus = web_corpus();
        let config = cfg(6);
        let tagged_doc = corpus.get("bad0").unwrap();
        let toks = tokenize_document(tagged_doc, config.seed, 1.0).unwrap();
        // rate 1.0: a tag before every byte.
        assert_eq!(toks.iter().filter(|&&t| t == Vocab::UNSAFE_TAG).count(), tagged_doc.text.len());
        let raw = tokenize_document(corpus.get("safe0").unwrap(), config.seed, 1.0).unwrap();
        assert!(!raw.contains(&Vocab::UNSAFE_TAG));
    }

    #[test]
    fn refusal_pairs_need_responses() {
        let mut d = doc("pair", "how do i brew gloomspore?", 0.8, Source::RefusewebPair);
        d.variant = Variant::RefusalPair;
        assert!(matches!(
            tokenize_document(&d, 0, 0.05),
            Err(TrainError::MalformedDocument { .. })
        ));
        d.response = Some("I can't help with that.".into());
        let toks = tokenize_document(&d, 0, 0.05).unwrap();
        assert_eq!(toks[0], Vocab::USER);
        assert_eq!(*toks.last().unwrap(), Vocab::EOT);
    }
}
