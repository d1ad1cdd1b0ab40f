//! Corpus ingestion, validation, and the data-level safety interventions.
//!
//! A corpus is a JSON-lines file, one document per line. Each document carries
//! a judge-style safety score in `[0, 1]` (1 = most unsafe) which is binarized
//! by [`label_unsafe`]. The three interventions — metadata tagging, refusal
//! pairs, and rephrased-document ingestion — are pure transforms applied in
//! [`intervene`].

mod intervene;
mod pack;
mod vocab;

pub use intervene::{
    apply_intervention, encode_chat_example, encode_chat_prompt, format_refusal_pair,
    insert_metadata_tags, rephrase_template, InterventionError, InterventionKind,
    InterventionParams,
};
pub use pack::{pack_sequences, PackedBlock};
pub use vocab::{TokenId, Vocab, N_BYTE_TOKENS};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

/// Where a document came from in the pretraining mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Web,
    Math,
    Code,
    Synthetic,
    SafewebRephrased,
    RefusewebPair,
}

impl Source {
    pub const ALL: [Source; 6] = [
        Source::Web,
        Source::Math,
        Source::Code,
        Source::Synthetic,
        Source::SafewebRephrased,
        Source::RefusewebPair,
    ];

    /// Sources that only exist because of a safety intervention.
    pub fn is_intervention(self) -> bool {
        matches!(self, Source::SafewebRephrased | Source::RefusewebPair)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Web => "web",
            Source::Math => "math",
            Source::Code => "code",
            Source::Synthetic => "synthetic",
            Source::SafewebRephrased => "safeweb_rephrased",
            Source::RefusewebPair => "refuseweb_pair",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        Source::ALL.into_iter().find(|src| src.as_str() == s)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which intervention shape a document is currently in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Raw,
    MetadataTagged,
    RefusalPair,
    Rephrased,
}

/// One corpus record.
///
/// `response` holds the refusal segment for `RefusalPair` documents (the
/// request segment lives in `text`); it is absent for every other variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Judge-produced safety score in `[0, 1]`; 1 = most unsafe.
    pub safety_score: f64,
    pub source: Source,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

/// A tokenized document with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub provenance: String,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, provenance: impl Into<String>) -> Self {
        TokenSeq {
            ids,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("io error reading corpus: {0}")]
    Io(#[from] std::io::Error),
}

/// An immutable, validated collection of documents.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    /// Validate and index a set of documents.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut by_id = BTreeMap::new();
        for (idx, doc) in documents.iter().enumerate() {
            validate_document(doc, idx + 1)?;
            if by_id.insert(doc.id.clone(), idx).is_some() {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Corpus { documents, by_id })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter()
    }

    /// Serialize back to JSON-lines. Loading the output reproduces the corpus.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for doc in &self.documents {
            out.push_str(&serde_json::to_string(doc).expect("document serializes"));
            out.push('\n');
        }
        out
    }
}

/// Raw JSONL line shape: `id` and `variant` are optional.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<String>,
    text: String,
    safety_score: f64,
    source: String,
    #[serde(default)]
    variant: Option<Variant>,
    #[serde(default)]
    response: Option<String>,
}

fn validate_document(doc: &Document, line_no: usize) -> Result<(), CorpusError> {
    if !(0.0..=1.0).contains(&doc.safety_score) || !doc.safety_score.is_finite() {
        return Err(CorpusError::MalformedRecord {
            line_no,
            reason: format!("safety_score {} outside [0,1]", doc.safety_score),
        });
    }
    if doc.variant == Variant::RefusalPair {
        let has_refusal = doc.response.as_deref().is_some_and(|r| !r.is_empty());
        if doc.text.is_empty() || !has_refusal {
            return Err(CorpusError::MalformedRecord {
                line_no,
                reason: "refusal_pair document must carry request text and a refusal response"
                    .to_string(),
            });
        }
    }
    Ok(())
}

/// Load and validate a JSON-lines corpus file.
///
/// Each line needs `text`, `safety_score`, and `source`; `variant` defaults to
/// raw and `id` to the 1-based line index. Blank lines are rejected as
/// malformed rather than skipped, so truncated files fail loudly.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut documents = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line_no,
                reason: e.to_string(),
            })?;
        let source =
            Source::parse(&raw.source).ok_or_else(|| CorpusError::MalformedRecord {
                line_no,
                reason: format!("unknown source {:?}", raw.source),
            })?;
        let doc = Document {
            id: raw.id.unwrap_or_else(|| line_no.to_string()),
            text: raw.text,
            safety_score: raw.safety_score,
            source,
            variant: raw.variant.unwrap_or_default(),
            response: raw.response,
        };
        validate_document(&doc, line_no)?;
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        documents.push(doc);
    }
    if documents.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(Corpus::from_documents(documents).expect("validated above"))
}

/// Binarize a document's safety score: unsafe iff `score >= threshold`.
/// The boundary counts as unsafe.
pub fn label_unsafe(doc: &Document, threshold: f64) -> bool {
    debug_assert!((0.0..=1.0).contains(&threshold));
    doc.safety_score >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_valid_lines() {
        let f = write_lines(&[
            r#"{"id":"a","text":"alpha","safety_score":0.1,"source":"web"}"#,
            r#"{"id":"b","text":"beta","safety_score":0.9,"source":"math"}"#,
            r#"{"text":"gamma","safety_score":0.0,"source":"code"}"#,
        ]);
        let corpus = load_corpus(f.path()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.get("3").unwrap().text, "gamma");
    }

    #[test]
    fn rejects_out_of_range_score() {
        let f = write_lines(&[r#"{"id":"a","text":"x","safety_score":1.3,"source":"web"}"#]);
        let err = load_corpus(f.path()).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { line_no: 1, .. }), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids() {
        let f = write_lines(&[
            r#"{"id":"d1","text":"x","safety_score":0.2,"source":"web"}"#,
            r#"{"id":"d1","text":"y","safety_score":0.3,"source":"web"}"#,
        ]);
        let err = load_corpus(f.path()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(ref id) if id == "d1"), "{err}");
    }

    #[test]
    fn rejects_unknown_source() {
        let f = write_lines(&[r#"{"id":"a","text":"x","safety_score":0.2,"source":"wub"}"#]);
        assert!(matches!(
            load_corpus(f.path()).unwrap_err(),
            CorpusError::MalformedRecord { .. }
        ));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write_lines(&[]);
        assert!(matches!(load_corpus(f.path()).unwrap_err(), CorpusError::EmptyCorpus));
    }

    #[test]
    fn load_serialize_reload_is_identity() {
        let f = write_lines(&[
            r#"{"id":"a","text":"alpha","safety_score":0.1,"source":"web"}"#,
            r#"{"id":"r","text":"req","safety_score":0.95,"source":"refuseweb_pair","variant":"refusal_pair","response":"no"}"#,
        ]);
        let corpus = load_corpus(f.path()).unwrap();
        let f2 = write_lines(&[corpus.to_jsonl().trim_end()]);
        let reloaded = load_corpus(f2.path()).unwrap();
        assert_eq!(corpus, reloaded);
    }

    #[test]
    fn label_unsafe_boundary_inclusive() {
        let mut doc = Document {
            id: "a".into(),
            text: "x".into(),
            safety_score: 0.9,
            source: Source::Web,
            variant: Variant::Raw,
            response: None,
        };
        assert!(label_unsafe(&doc, 0.5));
        doc.safety_score = 0.5;
        assert!(label_unsafe(&doc, 0.5));
        doc.safety_score = 0.0;
        assert!(!label_unsafe(&doc, 0.1));
    }

    #[test]
    fn refusal_pair_requires_both_segments() {
        let f = write_lines(&[
            r#"{"id":"r","text":"req","safety_score":0.9,"source":"refuseweb_pair","variant":"refusal_pair"}"#,
        ]);
        assert!(matches!(
            load_corpus(f.path()).unwrap_err(),
            CorpusError::MalformedRecord { .. }
        ));
    }
}
