//! Seeded synthetic news corpora with planted gold sources.
//!
//! Sources get a home topic, a few personal terms from that topic and a
//! Zipf popularity weight. Each article picks a topic and one or more
//! speakers, who are mostly, but not only, sources at home in the topic.
//! Article titles reuse the first speaker's personal terms, so that speaker's
//! documents share query terms with the title.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_samples, Sample, SourceId, SpeakerType};
use crate::metrics::{EmbeddingTable, GoldSet, MetricsError, PopularityTable};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_sources: usize,
    pub n_docs: usize,
    pub vocab_size: usize,
    pub n_topics: usize,
    pub terms_per_topic: usize,
    /// Personal terms per source, drawn from its home topic.
    pub source_terms: usize,
    /// Personal terms of the first speaker planted in each title.
    pub shared_terms: usize,
    /// Zipf exponent of source popularity; 0 is uniform.
    pub popularity_skew: f64,
    /// Relative weight of a source speaking outside its home topic.
    pub off_topic_weight: f64,
    pub max_speakers_per_article: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_sources: 300,
            n_docs: 3000,
            vocab_size: 1500,
            n_topics: 25,
            terms_per_topic: 20,
            source_terms: 4,
            shared_terms: 2,
            popularity_skew: 1.0,
            off_topic_weight: 0.05,
            max_speakers_per_article: 2,
            embedding_dim: 16,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        for (name, v) in [
            ("n_sources", self.n_sources),
            ("n_docs", self.n_docs),
            ("vocab_size", self.vocab_size),
            ("n_topics", self.n_topics),
            ("terms_per_topic", self.terms_per_topic),
            ("source_terms", self.source_terms),
            ("shared_terms", self.shared_terms),
            ("max_speakers_per_article", self.max_speakers_per_article),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.n_topics * self.terms_per_topic >= self.vocab_size {
            return bad("topic terms must leave room for general vocabulary".into());
        }
        if self.source_terms > self.terms_per_topic || self.shared_terms > self.source_terms {
            return bad("need shared_terms <= source_terms <= terms_per_topic".into());
        }
        if !(self.popularity_skew >= 0.0 && self.off_topic_weight >= 0.0) {
            return bad("popularity_skew and off_topic_weight must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub samples: Vec<Sample>,
    /// Planted gold per article, keyed by the article's smallest sample id.
    pub gold: GoldSet,
    pub queries: Vec<QueryRecord>,
    pub embeddings: EmbeddingTable,
    /// Sample count per source over the whole corpus.
    pub popularity: PopularityTable,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const GOLD_FILE: &str = "gold.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const POPULARITY_FILE: &str = "popularity.csv";

impl SyntheticCorpus {
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        write_samples(&dir.join(CORPUS_FILE), &self.samples)?;
        self.gold.write(&dir.join(GOLD_FILE))?;
        write_queries(&dir.join(QUERIES_FILE), &self.queries)?;
        self.embeddings.write(&dir.join(EMBEDDINGS_FILE))?;
        self.popularity.write_csv(&dir.join(POPULARITY_FILE))?;
        Ok(())
    }
}

pub fn write_queries(path: &Path, queries: &[QueryRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for q in queries {
        text.push_str(&serde_json::to_string(q)?);
        text.push('\n');
    }
    std::fs::write(path, text)
}

pub fn read_queries(path: &Path) -> std::io::Result<Vec<QueryRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::from))
        .collect()
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "sa", "no", "vi", "da", "pe", "zu", "ho", "bi", "ge", "fa", "tu",
];

/// The i-th pseudo-word: i written in base 16 with syllables as digits.
pub fn pseudo_word(mut i: usize) -> String {
    let mut digits = Vec::new();
    for _ in 0..3 {
        digits.push(SYLLABLES[i % 16]);
        i /= 16;
    }
    while i > 0 {
        digits.push(SYLLABLES[i % 16]);
        i /= 16;
    }
    digits.reverse();
    digits.concat()
}

const FIRST: [&str; 40] = [
    "Amara", "Bruno", "Chen", "Dalia", "Emil", "Farah", "Goran", "Hana", "Ivo", "Jonas", "Kiri", "Lena", "Mateo",
    "Nadia", "Omar", "Priya", "Quinn", "Rosa", "Soren", "Tala", "Umar", "Vera", "Wen", "Ximena", "Yusuf", "Zora",
    "Aiko", "Bela", "Cyrus", "Dina", "Eero", "Femi", "Greta", "Hugo", "Ines", "Jalen", "Kofi", "Lior", "Mina",
    "Nils",
];

const LAST: [&str; 40] = [
    "Abara", "Brandt", "Castillo", "Demir", "Eriksen", "Fontaine", "Gallo", "Haddad", "Ito", "Jovanovic", "Kowalski",
    "Lindqvist", "Mbeki", "Novak", "Okafor", "Petrov", "Quispe", "Rahman", "Silva", "Tanaka", "Usman", "Varga",
    "Weber", "Xu", "Yilmaz", "Zeller", "Alvarez", "Bianchi", "Cohen", "Dubois", "Esposito", "Fischer", "Garcia",
    "Horvat", "Iqbal", "Jensen", "Kaur", "Laine", "Moreau", "Nakamura",
];

const ORG_KINDS: [&str; 8] = [
    "Institute", "Council", "Agency", "Foundation", "Association", "Bureau", "Coalition", "Society",
];

struct SourceProfile {
    name: String,
    id: SourceId,
    kind: SpeakerType,
    home: usize,
    terms: Vec<usize>,
}

fn source_profiles(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<SourceProfile> {
    let mut pairs: Vec<(usize, usize)> = (0..FIRST.len()).flat_map(|f| (0..LAST.len()).map(move |l| (f, l))).collect();
    pairs.shuffle(rng);
    let mut used = BTreeSet::new();
    (0..spec.n_sources)
        .map(|i| {
            let (f, l) = pairs[i % pairs.len()];
            let (base, kind) = if i % 5 == 4 {
                (format!("{} {}", LAST[l], ORG_KINDS[f % ORG_KINDS.len()]), SpeakerType::Organization)
            } else {
                (format!("{} {}", FIRST[f], LAST[l]), SpeakerType::Person)
            };
            let mut name = base.clone();
            let mut n = 2;
            while !used.insert(name.clone()) {
                name = format!("{base} {n}");
                n += 1;
            }
            let home = rng.gen_range(0..spec.n_topics);
            let mut topic: Vec<usize> = (0..spec.terms_per_topic).collect();
            topic.shuffle(rng);
            let terms = topic[..spec.source_terms]
                .iter()
                .map(|t| home * spec.terms_per_topic + t)
                .collect();
            SourceProfile {
                id: SourceId::new(name.replace(' ', "_")).expect("generated names are non-empty"),
                name,
                kind,
                home,
                terms,
            }
        })
        .collect()
}

fn capitalize(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_uppercase();
        s.replace_range(0..1, &upper);
    }
    s
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab: Vec<String> = (0..spec.vocab_size).map(pseudo_word).collect();
    let general_start = spec.n_topics * spec.terms_per_topic;
    let topic_word = |t: usize, j: usize| &vocab[t * spec.terms_per_topic + j];

    let sources = source_profiles(spec, &mut rng);
    let popularity_weight: Vec<f64> = (0..spec.n_sources)
        .map(|r| 1.0 / ((r + 1) as f64).powf(spec.popularity_skew))
        .collect();
    let speaker_dists: Vec<WeightedIndex<f64>> = (0..spec.n_topics)
        .map(|t| {
            let w = sources
                .iter()
                .zip(&popularity_weight)
                .map(|(s, p)| if s.home == t { *p } else { p * spec.off_topic_weight });
            WeightedIndex::new(w).map_err(|e| SynthError::InvalidSpec(e.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let general = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n).map(|_| vocab[rng.gen_range(general_start..spec.vocab_size)].clone()).collect()
    };
    let pick_topic = |rng: &mut ChaCha8Rng, t: usize, n: usize| -> Vec<String> {
        (0..n).map(|_| topic_word(t, rng.gen_range(0..spec.terms_per_topic)).clone()).collect()
    };

    let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let mut samples = Vec::with_capacity(spec.n_docs);
    let mut gold = GoldSet::default();
    let mut queries = Vec::new();
    let mut titles = BTreeSet::new();
    let mut article = 0usize;
    while samples.len() < spec.n_docs {
        let topic = rng.gen_range(0..spec.n_topics);
        let n_speakers = rng.gen_range(1..=spec.max_speakers_per_article).min(spec.n_docs - samples.len());
        let mut speakers: Vec<usize> = Vec::new();
        for _ in 0..n_speakers {
            let s = speaker_dists[topic].sample(&mut rng);
            if !speakers.contains(&s) {
                speakers.push(s);
            }
        }
        let lead = &sources[speakers[0]];
        let mut personal = lead.terms.clone();
        personal.shuffle(&mut rng);
        let mut title_words: Vec<String> = personal[..spec.shared_terms].iter().map(|&t| vocab[t].clone()).collect();
        title_words.extend(pick_topic(&mut rng, topic, 2));
        title_words.extend(general(&mut rng, 2));
        title_words.shuffle(&mut rng);
        let mut title = capitalize(&title_words);
        while !titles.insert(title.clone()) {
            title_words.push(general(&mut rng, 1).remove(0));
            title = capitalize(&title_words);
        }
        let published_at = start + Duration::hours(article as i64);
        let domain = format!("news{}.example", article % 7);
        let mut ids = BTreeSet::new();
        for &s in &speakers {
            let src = &sources[s];
            let id = format!("s{:06}", samples.len());
            let mut quote_words: Vec<String> = src
                .terms
                .choose_multiple(&mut rng, spec.source_terms.min(3))
                .map(|&t| vocab[t].clone())
                .collect();
            quote_words.extend(pick_topic(&mut rng, topic, 3));
            quote_words.extend(general(&mut rng, 4));
            quote_words.shuffle(&mut rng);
            let quote = quote_words.join(" ");
            let mut before = pick_topic(&mut rng, topic, 3);
            before.extend(general(&mut rng, 5));
            before.shuffle(&mut rng);
            let mut after = pick_topic(&mut rng, topic, 2);
            after.extend(general(&mut rng, 6));
            after.shuffle(&mut rng);
            let context = format!(
                "{}. {} said \"{}\". {}.",
                capitalize(&before),
                src.name,
                quote,
                capitalize(&after)
            );
            samples.push(Sample {
                id: id.clone(),
                context,
                quote,
                speaker_mention: src.name.clone(),
                speaker_link: Some(src.id.to_string()),
                speaker_type: src.kind,
                published_at,
                title: title.clone(),
                domain: domain.clone(),
                categories: vec![format!("topic-{topic}")],
                keywords: vec![topic_word(topic, 0).clone()],
            });
            ids.insert(id);
        }
        let query_id = ids.first().expect("article has a speaker").clone();
        gold.insert(query_id.clone(), speakers.iter().map(|&s| sources[s].id.clone()).collect())?;
        queries.push(QueryRecord {
            query_id,
            query: title,
            categories: vec![format!("topic-{topic}")],
        });
        article += 1;
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids: Vec<Vec<f64>> = (0..spec.n_topics)
        .map(|_| (0..spec.embedding_dim).map(|_| 3.0 * normal.sample(&mut rng)).collect())
        .collect();
    let mut embeddings = EmbeddingTable::new(spec.embedding_dim);
    for s in &sources {
        let v = centroids[s.home].iter().map(|c| c + normal.sample(&mut rng)).collect();
        embeddings.insert(&s.id, v)?;
    }

    let mut counts: BTreeMap<SourceId, u64> = BTreeMap::new();
    for s in &samples {
        *counts.entry(s.source().expect("generated mentions are non-empty")).or_default() += 1;
    }
    Ok(SyntheticCorpus {
        samples,
        gold,
        queries,
        embeddings,
        popularity: PopularityTable(counts),
    })
}
