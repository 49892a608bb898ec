mod common;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::sid;
use sourcerank::corpus::{temporal_split, SourceId};
use sourcerank::index::{build_index, TokenizerConfig};
use sourcerank::metrics::recall_at_k;
use sourcerank::mlrf::{run_filter, shuffle, FilterConfig, RerankContext};
use sourcerank::pipeline::{queries_from_test, retrieve_queries, RetrievalConfig};
use sourcerank::reranker::{Exemplar, NoiseBias, NoisyOracleRanker};
use sourcerank::synth::{generate, SyntheticSpec};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_sources: 50,
        n_docs: 500,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn synth_is_deterministic() {
    let a = generate(&small_spec(7)).unwrap();
    let b = generate(&small_spec(7)).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.gold, b.gold);
    assert_eq!(a.embeddings, b.embeddings);
    assert_ne!(a.samples, generate(&small_spec(8)).unwrap().samples);
}

#[test]
fn zero_skew_gives_near_uniform_popularity() {
    let c = generate(&SyntheticSpec {
        popularity_skew: 0.0,
        ..small_spec(3)
    })
    .unwrap();
    let counts: Vec<f64> = c.popularity.0.values().map(|&n| n as f64).collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let max = counts.iter().cloned().fold(0.0, f64::max);
    assert!(max < 3.0 * mean, "max {max}, mean {mean}");

    let skewed = generate(&small_spec(3)).unwrap();
    let top = skewed.popularity.0.values().max().copied().unwrap() as f64;
    assert!(top > 3.0 * mean);
}

#[test]
fn retrieval_beats_a_random_ranking() {
    let mut der = Vec::new();
    let mut random = Vec::new();
    for seed in 0..5 {
        let c = generate(&small_spec(seed)).unwrap();
        let split = temporal_split(c.samples, 60, 20).unwrap();
        let (queries, gold) = queries_from_test(&split.test).unwrap();
        let index = build_index(&split.train, &TokenizerConfig::default()).unwrap();
        let ranked = retrieve_queries(&index, &queries, &RetrievalConfig::default()).unwrap();
        let all: Vec<SourceId> = index.sources().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (qid, list) in ranked {
            let g = gold.get(&qid).unwrap();
            der.push(recall_at_k(&list.to_sources(), g, 20).unwrap());
            let mut order = all.clone();
            shuffle(&mut order, &mut rng);
            random.push(recall_at_k(&order, g, 20).unwrap());
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean(&der) > mean(&random) + 0.2, "DER {} vs random {}", mean(&der), mean(&random));
}

#[test]
fn golden_survival_falls_with_error_rate() {
    let pool: Vec<SourceId> = (0..100).map(|i| sid(&format!("c{i:03}"))).collect();
    let names: BTreeMap<SourceId, String> = pool.iter().map(|s| (s.clone(), format!("Name {s}"))).collect();
    let popularity: BTreeMap<SourceId, u64> = pool.iter().enumerate().map(|(i, s)| (s.clone(), i as u64)).collect();
    let exemplar = Exemplar::default();
    let ctx = RerankContext {
        query: "q",
        names: &names,
        exemplar: &exemplar,
    };
    let mut survival = Vec::new();
    for rate in [0.0, 0.2, 0.4] {
        let mut kept = 0usize;
        let mut total = 0usize;
        for trial in 0..200u64 {
            let golden = pool[(trial as usize * 37) % pool.len()].clone();
            let ranker = NoisyOracleRanker {
                relevance: [(golden.clone(), 1.0)].into(),
                error_rate: rate,
                seed: trial,
                bias: NoiseBias::Popularity(popularity.clone()),
            };
            let config = FilterConfig {
                repetitions: 5,
                seed: trial,
                parallel: false,
                ..FilterConfig::default()
            };
            let trace = run_filter(&pool, &config, &ranker, &ctx).unwrap();
            for rep in &trace.repetitions {
                total += 1;
                kept += rep.layers.last().unwrap().retained.contains(&golden) as usize;
            }
        }
        survival.push(kept as f64 / total as f64);
    }
    assert_eq!(survival[0], 1.0);
    assert!(survival[0] >= survival[1] && survival[1] >= survival[2], "{survival:?}");
}
