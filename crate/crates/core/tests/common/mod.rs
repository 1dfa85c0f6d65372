//! Fixtures and independent reference implementations shared by the
//! integration tests. Nothing here calls into the code under test except to
//! build inputs.

#![allow(dead_code)]

use std::collections::HashMap;

use backtrans::corpus::{
    generate_source_monolingual, generate_synthetic_language, split, MonolingualCorpus, ParallelCorpus, Sentence,
    SentenceShape, SyntheticLanguageSpec,
};
use backtrans::model::{BackendConfig, StatSettings, TrainingSchedule};
use backtrans::pipelines::PipelineData;

pub fn sentence(text: &str) -> Sentence {
    Sentence::from_tokens(text.split_whitespace())
}

pub fn sentences(texts: &[&str]) -> Vec<Sentence> {
    texts.iter().map(|t| sentence(t)).collect()
}

pub fn small_spec(seed: u64) -> SyntheticLanguageSpec {
    SyntheticLanguageSpec {
        vocab_size_src: 60,
        vocab_size_tgt: 60,
        reorder_window: 0,
        noise_rate: 0.1,
        rng_seed: seed,
        shape: SentenceShape {
            min_len: 3,
            max_len: 6,
            branching: 4,
            zipf_exponent: 1.0,
        },
    }
}

/// A small generated language split into authentic/dev/test plus target and
/// source monolingual text.
pub fn small_data(seed: u64, n_parallel: usize, n_mono: usize) -> PipelineData {
    let spec = small_spec(seed);
    let (parallel, mono, oracle) = generate_synthetic_language(&spec, n_parallel, n_mono).unwrap();
    let (train, dev, test) = split(&parallel, 0.1, 0.1, seed).unwrap();
    let mono_source = generate_source_monolingual(&spec, n_mono, &parallel).unwrap();
    PipelineData {
        authentic: train,
        dev,
        test: Some(test),
        mono_target: mono,
        mono_source: Some(mono_source),
        oracle: Some(oracle),
    }
}

pub fn fast_schedule() -> TrainingSchedule {
    TrainingSchedule {
        eval_every: 1,
        max_steps: 4,
        stop_window: 2,
        ..TrainingSchedule::default()
    }
}

pub fn statistical() -> BackendConfig {
    BackendConfig::Statistical(StatSettings::default())
}

/// BLEU straight from the textbook definition: clipped n-gram precisions
/// counted with hash maps, a plain geometric mean, no smoothing.
pub fn reference_bleu(cands: &[Vec<&str>], refs: &[Vec<&str>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let grams = |s: &Vec<&str>| {
                let mut m: HashMap<Vec<String>, usize> = HashMap::new();
                if s.len() >= n {
                    for w in s.windows(n) {
                        *m.entry(w.iter().map(|x| x.to_string()).collect()).or_default() += 1;
                    }
                }
                m
            };
            let cg = grams(c);
            let rg = grams(r);
            for (g, count) in &cg {
                matched[n - 1] += (*count).min(*rg.get(g).unwrap_or(&0));
                total[n - 1] += count;
            }
        }
    }
    if c_len == 0 || matched.iter().any(|&m| m == 0) {
        return 0.0;
    }
    let log_mean: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    100.0 * bp * log_mean.exp()
}

/// Dense IBM-1 style EM (no NULL word) over string keys, written without
/// any of the library's index structures. Returns t(output | input) after
/// `iterations` steps from uniform initialization over co-occurrences.
pub fn reference_em(pairs: &[(&str, &str)], iterations: usize) -> HashMap<(String, String), f64> {
    let split = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    let data: Vec<(Vec<String>, Vec<String>)> = pairs.iter().map(|(i, o)| (split(i), split(o))).collect();
    let mut t: HashMap<(String, String), f64> = HashMap::new();
    let mut outs_of: HashMap<String, std::collections::BTreeSet<String>> = HashMap::new();
    for (i, o) in &data {
        for a in i {
            outs_of.entry(a.clone()).or_default().extend(o.iter().cloned());
        }
    }
    for (a, outs) in &outs_of {
        for b in outs {
            t.insert((a.clone(), b.clone()), 1.0 / outs.len() as f64);
        }
    }
    for _ in 0..iterations {
        let mut counts: HashMap<(String, String), f64> = HashMap::new();
        for (i, o) in &data {
            for b in o {
                let z: f64 = i.iter().map(|a| t[&(a.clone(), b.clone())]).sum();
                for a in i {
                    *counts.entry((a.clone(), b.clone())).or_default() += t[&(a.clone(), b.clone())] / z;
                }
            }
        }
        let mut totals: HashMap<String, f64> = HashMap::new();
        for ((a, _), c) in &counts {
            *totals.entry(a.clone()).or_default() += c;
        }
        t = counts
            .into_iter()
            .map(|((a, b), c)| {
                let z = totals[&a];
                ((a, b), c / z)
            })
            .collect();
    }
    t
}

/// Log-likelihood of the output sides under `t`, each output word explained
/// by a uniform mixture over the input words.
pub fn reference_log_likelihood(pairs: &[(&str, &str)], t: &HashMap<(String, String), f64>) -> f64 {
    pairs
        .iter()
        .map(|(i, o)| {
            let ins: Vec<&str> = i.split_whitespace().collect();
            o.split_whitespace()
                .map(|b| {
                    let p: f64 = ins
                        .iter()
                        .map(|a| t.get(&(a.to_string(), b.to_string())).copied().unwrap_or(0.0))
                        .sum::<f64>()
                        / ins.len() as f64;
                    p.ln()
                })
                .sum::<f64>()
        })
        .sum()
}

pub fn parallel(name: &str, pairs: &[(&str, &str)]) -> ParallelCorpus {
    let src: Vec<Sentence> = pairs.iter().map(|p| sentence(p.0)).collect();
    let tgt: Vec<Sentence> = pairs.iter().map(|p| sentence(p.1)).collect();
    ParallelCorpus::from_sides(name, src, tgt, backtrans::corpus::Provenance::Authentic).unwrap()
}

pub fn mono(texts: &[&str]) -> MonolingualCorpus {
    MonolingualCorpus::new("tgt", sentences(texts)).unwrap()
}
