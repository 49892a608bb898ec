#![allow(dead_code)]

use chrono::{TimeZone, Utc};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use sourcerank::corpus::{Sample, SourceId, SpeakerType};

pub fn sample(id: &str, speaker: &str, context: &str) -> Sample {
    Sample {
        id: id.into(),
        context: context.into(),
        quote: context.into(),
        speaker_mention: speaker.into(),
        speaker_link: None,
        speaker_type: SpeakerType::Person,
        published_at: Utc.timestamp_opt(0, 0).unwrap(),
        title: String::new(),
        domain: "example.com".into(),
        categories: vec![],
        keywords: vec![],
    }
}

pub fn sid(s: &str) -> SourceId {
    SourceId::new(s).unwrap()
}

/// A brute-force restatement of both query-likelihood models, working from
/// raw token lists with exact rationals.
pub struct OracleCorpus {
    /// (source, tokens) per document.
    pub docs: Vec<(String, Vec<String>)>,
}

fn q(n: usize, d: usize) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

impl OracleCorpus {
    fn total(&self) -> usize {
        self.docs.iter().map(|(_, t)| t.len()).sum()
    }

    fn count(tokens: &[String], term: &str) -> usize {
        tokens.iter().filter(|t| *t == term).count()
    }

    fn p_bg(&self, term: &str) -> BigRational {
        let n: usize = self.docs.iter().map(|(_, t)| Self::count(t, term)).sum();
        q(n, self.total())
    }

    fn sources(&self) -> Vec<&str> {
        let mut s: Vec<&str> = self.docs.iter().map(|(e, _)| e.as_str()).collect();
        s.sort();
        s.dedup();
        s
    }

    fn docs_of<'a>(&'a self, source: &'a str) -> impl Iterator<Item = &'a Vec<String>> + 'a {
        self.docs.iter().filter(move |(e, _)| e == source).map(|(_, t)| t)
    }

    fn avg_len(&self) -> BigRational {
        q(self.total(), self.docs.len())
    }

    fn p_d_given_e(&self, source: &str, boolean: bool) -> BigRational {
        if boolean {
            BigRational::one()
        } else {
            q(1, self.docs_of(source).count())
        }
    }

    pub fn cer(&self, source: &str, query: &[String], boolean: bool) -> BigRational {
        let n_assoc: usize = self.sources().iter().map(|e| self.docs_of(e).count()).sum();
        let beta = self.avg_len() * q(n_assoc, self.sources().len());
        let n_e: usize = self.docs_of(source).map(|t| t.len()).sum();
        let lambda = beta.clone() / (beta + BigRational::from_integer(BigInt::from(n_e)));
        let pde = self.p_d_given_e(source, boolean);
        let mut p = BigRational::one();
        for term in query {
            let mut model = BigRational::zero();
            for t in self.docs_of(source) {
                model += q(Self::count(t, term), t.len()) * &pde;
            }
            p *= (BigRational::one() - &lambda) * model + &lambda * self.p_bg(term);
        }
        p
    }

    pub fn der(&self, source: &str, query: &[String], boolean: bool) -> BigRational {
        let beta = self.avg_len();
        let pde = self.p_d_given_e(source, boolean);
        let mut total = BigRational::zero();
        for t in self.docs_of(source) {
            let lambda = beta.clone() / (&beta + BigRational::from_integer(BigInt::from(t.len())));
            let mut p = pde.clone();
            for term in query {
                p *= (BigRational::one() - &lambda) * q(Self::count(t, term), t.len()) + &lambda * self.p_bg(term);
            }
            total += p;
        }
        total
    }
}

pub fn ln_exact(p: &BigRational) -> f64 {
    if p.is_zero() {
        return f64::NEG_INFINITY;
    }
    ln_big(p.numer()) - ln_big(p.denom())
}

fn ln_big(n: &BigInt) -> f64 {
    let shift = n.bits().saturating_sub(60);
    (n >> shift as usize).to_f64().unwrap().ln() + shift as f64 * std::f64::consts::LN_2
}

pub struct RandomCorpus {
    pub samples: Vec<Sample>,
    pub oracle: OracleCorpus,
    pub query: Vec<String>,
}

/// Up to 10 documents over a vocabulary of at most 20 terms, spread over up
/// to 4 speakers. The query may contain repeated and unseen terms.
pub fn random_corpus<R: Rng>(rng: &mut R) -> RandomCorpus {
    let vocab = rng.gen_range(1..=20);
    let n_docs = rng.gen_range(1..=10);
    let n_speakers = rng.gen_range(1..=4);
    let mut samples = Vec::new();
    let mut docs = Vec::new();
    for d in 0..n_docs {
        let len = rng.gen_range(1..=12);
        let tokens: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect();
        let speaker = format!("s{}", rng.gen_range(0..n_speakers));
        samples.push(sample(&format!("d{d:02}"), &speaker, &tokens.join(" ")));
        docs.push((speaker, tokens));
    }
    let q_len = rng.gen_range(1..=5);
    let query = (0..q_len)
        .map(|_| {
            if rng.gen_bool(0.1) {
                "zz".to_string()
            } else {
                format!("w{}", rng.gen_range(0..vocab))
            }
        })
        .collect();
    RandomCorpus {
        samples,
        oracle: OracleCorpus { docs },
        query,
    }
}

impl RandomCorpus {
    pub fn sources(&self) -> Vec<String> {
        self.oracle.sources().into_iter().map(String::from).collect()
    }
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
