//! Quote-speaker samples: ingest, rule-based filtering, quote typing,
//! temporal splitting and speaker resolution.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{bad} of {total} records malformed (limit {limit_pct}%); first error at line {first_line}: {first_message}")]
    TooManyMalformed {
        bad: usize,
        total: usize,
        limit_pct: f64,
        first_line: usize,
        first_message: String,
    },
    #[error("speaker mention is empty")]
    EmptyMention,
    #[error("minimum count must be at least 1")]
    InvalidMinCount,
    #[error("cannot split {available} samples into {n_test} test + {n_valid} valid with a non-empty train set")]
    InsufficientSamples {
        available: usize,
        n_test: usize,
        n_valid: usize,
    },
    #[error("trigger lexicon is empty")]
    EmptyLexicon,
    #[error("unpaired quotation marks in sentence")]
    UnpairedQuoteMarks,
    #[error("object span not found in sentence")]
    ObjectNotInSentence,
}

/// Canonical identity of a speaker entity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SourceId(String);

impl SourceId {
    pub fn new(canonical: impl Into<String>) -> Result<Self, CorpusError> {
        let canonical = canonical.into();
        if canonical.trim().is_empty() {
            return Err(CorpusError::EmptyMention);
        }
        Ok(SourceId(canonical))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SourceId {
    type Error = CorpusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        SourceId::new(value)
    }
}

impl From<SourceId> for String {
    fn from(value: SourceId) -> Self {
        value.0
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerType {
    Person,
    Organization,
    Other,
}

/// One context / quote / speaker / metadata record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Primary sentence plus its preceding and following sentence.
    pub context: String,
    pub quote: String,
    pub speaker_mention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_link: Option<String>,
    pub speaker_type: SpeakerType,
    pub published_at: DateTime<Utc>,
    pub title: String,
    pub domain: String,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
}

impl Sample {
    pub fn source(&self) -> Result<SourceId, CorpusError> {
        resolve_source(&self.speaker_mention, self.speaker_link.as_deref())
    }

    /// Checks the per-record invariants, returning a reason code on failure.
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.id.trim().is_empty() {
            return Err("empty-id");
        }
        if self.quote.trim().is_empty() {
            return Err("empty-quote");
        }
        if self.speaker_mention.trim().is_empty() {
            return Err("empty-speaker-mention");
        }
        if !self.context.contains(self.quote.trim()) {
            return Err("quote-not-in-context");
        }
        Ok(())
    }
}

/// Resolves a speaker mention to its canonical source. An entity link wins
/// over the surface form; otherwise the mention is case-folded and its
/// whitespace collapsed.
pub fn resolve_source(mention: &str, link: Option<&str>) -> Result<SourceId, CorpusError> {
    if mention.trim().is_empty() {
        return Err(CorpusError::EmptyMention);
    }
    if let Some(link) = link.map(str::trim).filter(|l| !l.is_empty()) {
        return SourceId::new(link);
    }
    let normalized = mention
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ");
    SourceId::new(normalized)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Fraction of malformed records above which ingest fails outright.
    pub max_malformed_fraction: f64,
    /// The fraction rule only applies to files with at least this many records.
    pub min_records_for_fraction: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            max_malformed_fraction: 0.10,
            min_records_for_fraction: 10,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub samples: Vec<Sample>,
    pub errors: Vec<LineError>,
}

pub fn ingest(path: &Path) -> Result<IngestReport, CorpusError> {
    ingest_with(path, &IngestOptions::default())
}

pub fn ingest_with(path: &Path, options: &IngestOptions) -> Result<IngestReport, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut report = IngestReport::default();
    let mut seen_ids = HashSet::new();
    let mut total = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let sample: Sample = match serde_json::from_str(&line) {
            Ok(s) => s,
            Err(e) => {
                report.errors.push(LineError {
                    line: line_no,
                    reason: "invalid-record".into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Err(reason) = sample.validate() {
            report.errors.push(LineError {
                line: line_no,
                reason: reason.into(),
                message: format!("sample {}: {}", sample.id, reason),
            });
            continue;
        }
        if !seen_ids.insert(sample.id.clone()) {
            report.errors.push(LineError {
                line: line_no,
                reason: "duplicate-id".into(),
                message: format!("sample id {} already seen", sample.id),
            });
            continue;
        }
        report.samples.push(sample);
    }
    let bad = report.errors.len();
    if total >= options.min_records_for_fraction
        && bad as f64 > options.max_malformed_fraction * total as f64
    {
        let first = &report.errors[0];
        return Err(CorpusError::TooManyMalformed {
            bad,
            total,
            limit_pct: options.max_malformed_fraction * 100.0,
            first_line: first.line,
            first_message: first.message.clone(),
        });
    }
    Ok(report)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

// ---------------------------------------------------------------------------
// Trigger-word filtering over semantic-role tuples

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRef {
    pub uri: String,
    pub kind: SpeakerType,
}

/// Predicate / subject / object extracted from one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrlTuple {
    pub sentence: String,
    pub predicate: String,
    pub subject_span: String,
    pub object_span: String,
    #[serde(default)]
    pub subject_entity: Option<EntityRef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    NotTrigger,
    MissingSubject,
    ObjectTooShort,
    UnpairedQuoteMarks,
    UntypedSubject,
    SubjectNotPersonOrOrganization,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::NotTrigger => "not-trigger",
            RejectReason::MissingSubject => "missing-subject",
            RejectReason::ObjectTooShort => "object-too-short",
            RejectReason::UnpairedQuoteMarks => "unpaired-quote-marks",
            RejectReason::UntypedSubject => "untyped-subject",
            RejectReason::SubjectNotPersonOrOrganization => "subject-not-person-or-organization",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon(BTreeSet<String>);

impl Lexicon {
    pub fn new<I, S>(words: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if set.is_empty() {
            return Err(CorpusError::EmptyLexicon);
        }
        Ok(Lexicon(set))
    }

    /// Parses the one-word-per-line format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Lexicon::new(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or_default())
                .filter(|l| !l.trim().is_empty()),
        )
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Lexicon::parse(&text)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.trim().to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::parse(include_str!("../data/trigger_words.txt")).expect("bundled lexicon is non-empty")
    }
}

/// Whitespace tokens that still contain something after trimming punctuation.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace()
        .filter(|tok| tok.chars().any(char::is_alphanumeric))
        .count()
}

pub fn filter_candidate(tuple: &SrlTuple, lexicon: &Lexicon) -> Result<(), RejectReason> {
    if !lexicon.contains(&tuple.predicate) {
        return Err(RejectReason::NotTrigger);
    }
    if tuple.subject_span.trim().is_empty() {
        return Err(RejectReason::MissingSubject);
    }
    if word_count(&tuple.object_span) <= 3 {
        return Err(RejectReason::ObjectTooShort);
    }
    if quote_regions(&tuple.sentence).is_err() {
        return Err(RejectReason::UnpairedQuoteMarks);
    }
    match &tuple.subject_entity {
        None => Err(RejectReason::UntypedSubject),
        Some(EntityRef {
            kind: SpeakerType::Other,
            ..
        }) => Err(RejectReason::SubjectNotPersonOrOrganization),
        Some(_) => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Quote marks and quote types

/// Byte ranges of paired quote regions, marks included. Straight double
/// quotes, curly double quotes and guillemets delimit; single quotes do not.
pub fn quote_regions(sentence: &str) -> Result<Vec<Range<usize>>, CorpusError> {
    let mut regions = Vec::new();
    let mut open: Option<(char, usize)> = None;
    for (pos, c) in sentence.char_indices() {
        let closer = match c {
            '"' => '"',
            '\u{201C}' => '\u{201D}',
            '\u{00AB}' => '\u{00BB}',
            '\u{201D}' | '\u{00BB}' => {
                match open {
                    Some((want, start)) if want == c => {
                        regions.push(start..pos + c.len_utf8());
                        open = None;
                    }
                    _ => return Err(CorpusError::UnpairedQuoteMarks),
                }
                continue;
            }
            _ => continue,
        };
        match open {
            None => open = Some((closer, pos)),
            Some(('"', start)) if c == '"' => {
                regions.push(start..pos + 1);
                open = None;
            }
            Some(_) => return Err(CorpusError::UnpairedQuoteMarks),
        }
    }
    if open.is_some() {
        return Err(CorpusError::UnpairedQuoteMarks);
    }
    Ok(regions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuoteType {
    Direct,
    Indirect,
    Mixed,
}

pub fn classify_quote_type(primary_sentence: &str, object_span: &str) -> Result<QuoteType, CorpusError> {
    let regions = quote_regions(primary_sentence)?;
    if regions.is_empty() {
        return Ok(QuoteType::Indirect);
    }
    let object = object_span.trim();
    let start = primary_sentence
        .find(object)
        .ok_or(CorpusError::ObjectNotInSentence)?;
    let end = start + object.len();
    if regions.iter().any(|r| r.start <= start && end <= r.end) {
        return Ok(QuoteType::Direct);
    }
    if regions.iter().any(|r| start < r.end && r.start < end) {
        Ok(QuoteType::Mixed)
    } else {
        Ok(QuoteType::Indirect)
    }
}

// ---------------------------------------------------------------------------
// Corpus-level operations

/// Drops samples whose source occurs fewer than `min_count` times, repeating
/// until no further sample is removed.
pub fn enforce_min_frequency(samples: Vec<Sample>, min_count: usize) -> Result<Vec<Sample>, CorpusError> {
    if min_count == 0 {
        return Err(CorpusError::InvalidMinCount);
    }
    let mut keyed = samples
        .into_iter()
        .map(|s| Ok((s.source()?, s)))
        .collect::<Result<Vec<_>, CorpusError>>()?;
    loop {
        let mut counts: BTreeMap<&SourceId, usize> = BTreeMap::new();
        for (src, _) in &keyed {
            *counts.entry(src).or_default() += 1;
        }
        let rare: HashSet<SourceId> = counts
            .into_iter()
            .filter(|&(_, n)| n < min_count)
            .map(|(s, _)| s.clone())
            .collect();
        if rare.is_empty() {
            break;
        }
        keyed.retain(|(src, _)| !rare.contains(src));
    }
    Ok(keyed.into_iter().map(|(_, s)| s).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Orders samples by (timestamp, id); the newest `n_test` form the test set,
/// the `n_valid` before them the validation set, and the rest training.
pub fn temporal_split(mut samples: Vec<Sample>, n_test: usize, n_valid: usize) -> Result<CorpusSplit, CorpusError> {
    if n_test + n_valid >= samples.len() {
        return Err(CorpusError::InsufficientSamples {
            available: samples.len(),
            n_test,
            n_valid,
        });
    }
    samples.sort_by(|a, b| a.published_at.cmp(&b.published_at).then_with(|| a.id.cmp(&b.id)));
    let test = samples.split_off(samples.len() - n_test);
    let valid = samples.split_off(samples.len() - n_valid);
    Ok(CorpusSplit {
        train: samples,
        valid,
        test,
    })
}
