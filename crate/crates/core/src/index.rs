//! Occurrence statistics over the training split.
//!
//! Every context becomes one document. The index keeps exact integer counts
//! (term counts per document, collection counts, document lengths and
//! source-document associations); probabilities are derived on demand,
//! either in `f64` or as exact rationals.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::corpus::{CorpusError, Sample, SourceId};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SRCIDX\0\0";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index from an empty training set")]
    EmptyTrain,
    #[error("document {0} has no tokens")]
    EmptyDocument(String),
    #[error("duplicate document id {0}")]
    DuplicateDocument(String),
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("snapshot I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an index snapshot (bad magic)")]
    BadMagic,
    #[error("snapshot format version {found} is not supported (expected {SNAPSHOT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("snapshot digest mismatch: payload is corrupt")]
    DigestMismatch,
    #[error("snapshot payload: {0}")]
    Payload(#[from] serde_json::Error),
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "have", "he", "her", "his",
    "in", "is", "it", "its", "of", "on", "or", "she", "that", "the", "their", "they", "this", "to", "was",
    "were", "will", "with",
];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub remove_stopwords: bool,
    pub stem: bool,
}

/// Unicode word segmentation followed by case folding, with optional
/// stopword removal and English Snowball stemming.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    let stemmer = cfg.stem.then(|| Stemmer::create(Algorithm::English));
    text.unicode_words()
        .map(str::to_lowercase)
        .filter(|w| !(cfg.remove_stopwords && STOPWORDS.contains(&w.as_str())))
        .map(|w| match &stemmer {
            Some(s) => s.stem(&w).into_owned(),
            None => w,
        })
        .collect()
}

/// A tokenized query: the raw title plus its term multiset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub raw: String,
    pub terms: BTreeMap<String, u32>,
}

impl Query {
    pub fn new(raw: &str, cfg: &TokenizerConfig) -> Self {
        let mut terms = BTreeMap::new();
        for t in tokenize(raw, cfg) {
            *terms.entry(t).or_insert(0) += 1;
        }
        Query {
            raw: raw.to_string(),
            terms,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// How p(d|e) is derived from the Boolean document-source association.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    /// 1/|assoc(e)| for associated documents.
    #[default]
    Uniform,
    /// 1 for associated documents.
    Boolean,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocStats {
    pub id: String,
    pub len: u64,
    pub terms: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Index {
    tokenizer: TokenizerConfig,
    /// Sorted by id; document positions below are indices into this list.
    docs: Vec<DocStats>,
    collection_term_counts: BTreeMap<String, u64>,
    total_tokens: u64,
    assoc: BTreeMap<SourceId, BTreeSet<usize>>,
    source_token_totals: BTreeMap<SourceId, u64>,
    /// Most frequent surface mention per source.
    display_names: BTreeMap<SourceId, String>,
}

pub fn build_index(train: &[Sample], cfg: &TokenizerConfig) -> Result<Index, IndexError> {
    if train.is_empty() {
        return Err(IndexError::EmptyTrain);
    }
    let mut ordered: Vec<&Sample> = train.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let mut docs = Vec::with_capacity(ordered.len());
    let mut collection_term_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut assoc: BTreeMap<SourceId, BTreeSet<usize>> = BTreeMap::new();
    let mut mentions: BTreeMap<SourceId, BTreeMap<String, usize>> = BTreeMap::new();
    let mut total_tokens = 0u64;

    for (pos, sample) in ordered.iter().enumerate() {
        if pos > 0 && ordered[pos - 1].id == sample.id {
            return Err(IndexError::DuplicateDocument(sample.id.clone()));
        }
        let tokens = tokenize(&sample.context, cfg);
        if tokens.is_empty() {
            return Err(IndexError::EmptyDocument(sample.id.clone()));
        }
        let mut terms: BTreeMap<String, u64> = BTreeMap::new();
        for t in tokens {
            *terms.entry(t).or_default() += 1;
        }
        let len: u64 = terms.values().sum();
        for (t, n) in &terms {
            *collection_term_counts.entry(t.clone()).or_default() += n;
        }
        total_tokens += len;
        let source = sample.source()?;
        assoc.entry(source.clone()).or_default().insert(pos);
        *mentions
            .entry(source)
            .or_default()
            .entry(sample.speaker_mention.split_whitespace().collect::<Vec<_>>().join(" "))
            .or_default() += 1;
        docs.push(DocStats {
            id: sample.id.clone(),
            len,
            terms,
        });
    }

    let source_token_totals = assoc
        .iter()
        .map(|(e, ds)| (e.clone(), ds.iter().map(|&d| docs[d].len).sum()))
        .collect();
    let display_names = mentions
        .into_iter()
        .map(|(e, counts)| {
            // highest count, then lexicographically smallest
            let name = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(m, _)| m.clone())
                .unwrap_or_else(|| e.to_string());
            (e, name)
        })
        .collect();

    Ok(Index {
        tokenizer: cfg.clone(),
        docs,
        collection_term_counts,
        total_tokens,
        assoc,
        source_token_totals,
        display_names,
    })
}

impl Index {
    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn query(&self, raw: &str) -> Query {
        Query::new(raw, &self.tokenizer)
    }

    pub fn docs(&self) -> &[DocStats] {
        &self.docs
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_position(&self, doc_id: &str) -> Option<usize> {
        self.docs.binary_search_by(|d| d.id.as_str().cmp(doc_id)).ok()
    }

    pub fn doc(&self, doc_id: &str) -> Result<&DocStats, IndexError> {
        self.doc_position(doc_id)
            .map(|p| &self.docs[p])
            .ok_or_else(|| IndexError::UnknownDocument(doc_id.to_string()))
    }

    pub fn collection_term_counts(&self) -> &BTreeMap<String, u64> {
        &self.collection_term_counts
    }

    /// n(t, C)
    pub fn collection_count(&self, term: &str) -> u64 {
        self.collection_term_counts.get(term).copied().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.total_tokens as f64 / self.docs.len() as f64
    }

    pub fn avg_doc_len_exact(&self) -> BigRational {
        ratio(self.total_tokens, self.docs.len() as u64)
    }

    pub fn sources(&self) -> impl Iterator<Item = &SourceId> {
        self.assoc.keys()
    }

    pub fn n_sources(&self) -> usize {
        self.assoc.len()
    }

    pub fn contains_source(&self, source: &SourceId) -> bool {
        self.assoc.contains_key(source)
    }

    /// Positions of the documents associated with `source`.
    pub fn assoc(&self, source: &SourceId) -> Option<&BTreeSet<usize>> {
        self.assoc.get(source)
    }

    pub fn associations(&self) -> &BTreeMap<SourceId, BTreeSet<usize>> {
        &self.assoc
    }

    /// n(e): total tokens over the documents associated with `source`.
    pub fn source_tokens(&self, source: &SourceId) -> Option<u64> {
        self.source_token_totals.get(source).copied()
    }

    pub fn display_name(&self, source: &SourceId) -> Option<&str> {
        self.display_names.get(source).map(String::as_str)
    }

    pub fn display_names(&self) -> &BTreeMap<SourceId, String> {
        &self.display_names
    }

    /// Training-set occurrence count of each source (one sample per document).
    pub fn popularity(&self) -> BTreeMap<SourceId, u64> {
        self.assoc.iter().map(|(e, ds)| (e.clone(), ds.len() as u64)).collect()
    }

    /// p(t|d) by maximum likelihood.
    pub fn term_prob_doc(&self, doc_id: &str, term: &str) -> Result<f64, IndexError> {
        let d = self.doc(doc_id)?;
        Ok(term_prob_in(d, term))
    }

    pub fn term_prob_doc_exact(&self, doc_id: &str, term: &str) -> Result<BigRational, IndexError> {
        let d = self.doc(doc_id)?;
        Ok(ratio(d.terms.get(term).copied().unwrap_or(0), d.len))
    }

    /// p(t) over the whole collection by maximum likelihood.
    pub fn term_prob_bg(&self, term: &str) -> f64 {
        self.collection_count(term) as f64 / self.total_tokens as f64
    }

    pub fn term_prob_bg_exact(&self, term: &str) -> BigRational {
        ratio(self.collection_count(term), self.total_tokens)
    }

    /// p(d|e) for a document position.
    pub fn doc_given_source(&self, source: &SourceId, doc: usize, association: Association) -> f64 {
        match self.assoc.get(source) {
            Some(ds) if ds.contains(&doc) => match association {
                Association::Uniform => 1.0 / ds.len() as f64,
                Association::Boolean => 1.0,
            },
            _ => 0.0,
        }
    }

    pub fn doc_given_source_exact(&self, source: &SourceId, doc: usize, association: Association) -> BigRational {
        match self.assoc.get(source) {
            Some(ds) if ds.contains(&doc) => match association {
                Association::Uniform => ratio(1, ds.len() as u64),
                Association::Boolean => ratio(1, 1),
            },
            _ => BigRational::zero(),
        }
    }

    fn payload(&self) -> Result<Vec<u8>, IndexError> {
        Ok(serde_json::to_vec(self)?)
    }

    /// SHA-256 over the canonical serialized statistics.
    pub fn digest(&self) -> Result<String, IndexError> {
        Ok(hex::encode(Sha256::digest(self.payload()?)))
    }

    /// Writes `magic | version (u32 LE) | length (u64 LE) | payload | sha256(payload)`.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let payload = self.payload()?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(payload.len() as u64).to_le_bytes())?;
        out.write_all(&payload)?;
        out.write_all(&Sha256::digest(&payload))?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Index, IndexError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Index::from_snapshot(&bytes)
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Index, IndexError> {
        let header = SNAPSHOT_MAGIC.len() + 4 + 8;
        if bytes.len() < header || &bytes[..SNAPSHOT_MAGIC.len()] != SNAPSHOT_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let mut word = [0u8; 4];
        word.copy_from_slice(&bytes[8..12]);
        let version = u32::from_le_bytes(word);
        if version != SNAPSHOT_VERSION {
            return Err(IndexError::UnsupportedVersion { found: version });
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[12..20]);
        let len = u64::from_le_bytes(len) as usize;
        if bytes.len() != header + len + 32 {
            return Err(IndexError::DigestMismatch);
        }
        let payload = &bytes[header..header + len];
        if Sha256::digest(payload).as_slice() != &bytes[header + len..] {
            return Err(IndexError::DigestMismatch);
        }
        Ok(serde_json::from_slice(payload)?)
    }
}

pub(crate) fn term_prob_in(d: &DocStats, term: &str) -> f64 {
    d.terms.get(term).copied().unwrap_or(0) as f64 / d.len as f64
}

pub(crate) fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SpeakerType;
    use chrono::{TimeZone, Utc};
    use num_traits::One;

    fn sample(id: &str, speaker: &str, context: &str) -> Sample {
        Sample {
            id: id.into(),
            context: context.into(),
            quote: context.split_whitespace().next().unwrap_or("").into(),
            speaker_mention: speaker.into(),
            speaker_link: None,
            speaker_type: SpeakerType::Person,
            published_at: Utc.timestamp_opt(0, 0).unwrap(),
            title: String::new(),
            domain: String::new(),
            categories: vec![],
            keywords: vec![],
        }
    }

    #[test]
    fn tokenizer_examples() {
        let cfg = TokenizerConfig::default();
        assert_eq!(tokenize("The WHO said", &cfg), ["the", "who", "said"]);
        assert!(tokenize("", &cfg).is_empty());
        assert_eq!(tokenize("COVID-19 cases", &cfg), ["covid", "19", "cases"]);
        let cfg = TokenizerConfig {
            remove_stopwords: true,
            stem: true,
        };
        assert_eq!(tokenize("The cases were rising", &cfg), ["case", "rise"]);
    }

    #[test]
    fn single_doc_bookkeeping() {
        let idx = build_index(&[sample("d1", "A", "one two three four five")], &TokenizerConfig::default()).unwrap();
        let a = SourceId::new("a").unwrap();
        assert_eq!(idx.doc_count(), 1);
        assert_eq!(idx.doc("d1").unwrap().len, 5);
        assert_eq!(idx.assoc(&a).unwrap().len(), 1);
        assert_eq!(idx.avg_doc_len(), 5.0);
        assert_eq!(idx.display_name(&a), Some("A"));
    }

    #[test]
    fn shared_speaker_and_average_length() {
        let idx = build_index(
            &[sample("d1", "A", "w w w w"), sample("d2", "A", "x x x x x x")],
            &TokenizerConfig::default(),
        )
        .unwrap();
        let a = SourceId::new("a").unwrap();
        assert_eq!(idx.assoc(&a).unwrap().len(), 2);
        assert_eq!(idx.source_tokens(&a), Some(10));
        assert_eq!(idx.avg_doc_len(), 5.0);
        assert_eq!(idx.avg_doc_len_exact(), ratio(5, 1));
    }

    #[test]
    fn probabilities() {
        let idx = build_index(
            &[
                sample("d1", "A", "t t u u u u u u"),
                sample("d2", "B", "v v v w w w w w w w w w w w w w w w w w"),
            ],
            &TokenizerConfig::default(),
        )
        .unwrap();
        assert_eq!(idx.term_prob_doc("d1", "t").unwrap(), 0.25);
        assert_eq!(idx.term_prob_doc("d1", "zzz").unwrap(), 0.0);
        assert!(matches!(idx.term_prob_doc("nope", "t"), Err(IndexError::UnknownDocument(_))));
        let sum: BigRational = idx.docs()[0]
            .terms
            .keys()
            .map(|t| idx.term_prob_doc_exact("d1", t).unwrap())
            .sum();
        assert!(sum.is_one());
        // n(v, C) = 3 of 28 tokens
        assert_eq!(idx.term_prob_bg_exact("v"), ratio(3, 28));
        assert_eq!(idx.term_prob_bg("unseen"), 0.0);
        let bg: BigRational = idx.collection_term_counts().keys().map(|t| idx.term_prob_bg_exact(t)).sum();
        assert!(bg.is_one());
    }

    #[test]
    fn errors() {
        assert!(matches!(build_index(&[], &TokenizerConfig::default()), Err(IndexError::EmptyTrain)));
        assert!(matches!(
            build_index(&[sample("d1", "A", "...")], &TokenizerConfig::default()),
            Err(IndexError::EmptyDocument(_))
        ));
        assert!(matches!(
            build_index(&[sample("d1", "A", "x"), sample("d1", "B", "y")], &TokenizerConfig::default()),
            Err(IndexError::DuplicateDocument(_))
        ));
    }

    #[test]
    fn display_name_prefers_most_frequent_mention() {
        let mut s1 = sample("1", "Dr Fauci", "a b");
        let mut s2 = sample("2", "Anthony Fauci", "c d");
        let mut s3 = sample("3", "Anthony  Fauci", "e f");
        for s in [&mut s1, &mut s2, &mut s3] {
            s.speaker_link = Some("dbpedia:Anthony_Fauci".into());
        }
        let idx = build_index(&[s1, s2, s3], &TokenizerConfig::default()).unwrap();
        let e = SourceId::new("dbpedia:Anthony_Fauci").unwrap();
        assert_eq!(idx.display_name(&e), Some("Anthony Fauci"));
        assert_eq!(idx.popularity()[&e], 3);
    }

    #[test]
    fn snapshot_round_trip_and_corruption() {
        let idx = build_index(
            &[sample("d1", "A", "a b a"), sample("d2", "B", "c c")],
            &TokenizerConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        idx.save(&path).unwrap();
        let loaded = Index::load(&path).unwrap();
        assert_eq!(loaded, idx);
        assert_eq!(loaded.digest().unwrap(), idx.digest().unwrap());

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Index::from_snapshot(&bytes), Err(IndexError::DigestMismatch) | Err(IndexError::Payload(_))));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        assert!(matches!(Index::from_snapshot(&bytes), Err(IndexError::UnsupportedVersion { found: 9 })));
        assert!(matches!(Index::from_snapshot(b"nope"), Err(IndexError::BadMagic)));
    }
}
