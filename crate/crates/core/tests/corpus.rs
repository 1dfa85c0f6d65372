mod common;

use std::collections::{BTreeMap, HashSet};

use backtrans::corpus::{
    clean, concat, generate_synthetic_language, load_monolingual, load_parallel, split, CleanOptions, ParallelCorpus,
    Provenance, ProvenanceKind, Sentence, SentencePair, SyntheticLanguageSpec, TokenizeOptions,
};
use common::sentence;
use proptest::prelude::*;

fn arb_corpus() -> impl Strategy<Value = ParallelCorpus> {
    let side = prop::collection::vec("[a-f]{1,3}", 1..15).prop_map(Sentence::from_tokens);
    let prov = prop_oneof![Just(Provenance::Authentic), (0u32..3).prop_map(|i| Provenance::synthetic("g", i))];
    prop::collection::vec((side.clone(), side, prov), 0..40).prop_map(|v| {
        let pairs = v
            .into_iter()
            .map(|(source, target, provenance)| SentencePair {
                source,
                target,
                provenance,
            })
            .collect();
        ParallelCorpus::new("p", pairs).unwrap()
    })
}

fn multiset(c: &ParallelCorpus) -> BTreeMap<(String, String), usize> {
    let mut m = BTreeMap::new();
    for p in c.pairs() {
        *m.entry((p.source.text(), p.target.text())).or_insert(0) += 1;
    }
    m
}

fn kinds(c: &ParallelCorpus) -> (usize, usize) {
    (c.count_kind(ProvenanceKind::Authentic), c.count_kind(ProvenanceKind::Synthetic))
}

proptest! {
    #[test]
    fn split_partitions_the_pairs(c in arb_corpus(), dev in 0.0f64..0.45, test in 0.0f64..0.45, seed: u64) {
        let (a, b, t) = split(&c, dev, test, seed).unwrap();
        prop_assert_eq!(a.len() + b.len() + t.len(), c.len());
        let mut joined = multiset(&a);
        for part in [&b, &t] {
            for (k, n) in multiset(part) {
                *joined.entry(k).or_insert(0) += n;
            }
        }
        prop_assert_eq!(joined, multiset(&c));
        let (a2, b2, t2) = split(&c, dev, test, seed).unwrap();
        prop_assert_eq!((a2, b2, t2), (a, b, t));
    }

    #[test]
    fn clean_matches_a_direct_filter_and_is_idempotent(
        c in arb_corpus(), lo in 1usize..5, span in 0usize..12, ratio in 1.0f64..4.0,
    ) {
        let opts = CleanOptions::new(lo, lo + span, ratio).unwrap();
        let once = clean(&c, &opts);
        let expected: Vec<&SentencePair> = c
            .pairs()
            .iter()
            .filter(|p| {
                let (x, y) = (p.source.len() as f64, p.target.len() as f64);
                [x, y].iter().all(|&n| n >= lo as f64 && n <= (lo + span) as f64) && x.max(y) <= ratio * x.min(y)
            })
            .collect();
        prop_assert_eq!(once.pairs().iter().collect::<Vec<_>>(), expected);
        prop_assert_eq!(clean(&once, &opts), once);
    }

    #[test]
    fn provenance_is_conserved(a in arb_corpus(), b in arb_corpus(), seed: u64) {
        let joined = concat(&a, &b);
        let (ka, kb, kj) = (kinds(&a), kinds(&b), kinds(&joined));
        prop_assert_eq!(kj, (ka.0 + kb.0, ka.1 + kb.1));
        let (x, y, z) = split(&joined, 0.2, 0.2, seed).unwrap();
        let parts = [kinds(&x), kinds(&y), kinds(&z)];
        prop_assert_eq!(parts.iter().map(|k| k.0).sum::<usize>(), kj.0);
        prop_assert_eq!(parts.iter().map(|k| k.1).sum::<usize>(), kj.1);
    }
}

#[test]
fn generated_monolingual_text_is_disjoint_from_parallel_targets() {
    let spec = SyntheticLanguageSpec {
        rng_seed: 21,
        ..SyntheticLanguageSpec::default()
    };
    let (par, mono, oracle) = generate_synthetic_language(&spec, 5000, 20000).unwrap();
    assert_eq!((par.len(), mono.len()), (5000, 20000));
    let mut targets: HashSet<String> = par.targets().map(Sentence::text).collect();
    targets.extend(par.sources().map(|s| oracle.translate_source(s).text()));
    assert!(mono.sentences().iter().all(|s| !targets.contains(&s.text())));
    assert!(par.all_kind(ProvenanceKind::Authentic));
}

#[test]
fn files_roundtrip_through_load() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt, mono) = (dir.path().join("a.src"), dir.path().join("a.tgt"), dir.path().join("m.txt"));
    std::fs::write(&src, "Das Haus\n\n das  Buch \r\n").unwrap();
    std::fs::write(&tgt, "the house\nblank source\nthe book\n").unwrap();
    let (c, report) = load_parallel(&src, &tgt, Provenance::Authentic, TokenizeOptions::default()).unwrap();
    assert_eq!((report.loaded, report.dropped), (2, 1));
    assert_eq!(c.pairs()[0].source.tokens(), sentence("das haus").tokens());
    assert_eq!(c.pairs()[1].source.tokens(), ["das", "buch"]);

    let (out_src, out_tgt) = (dir.path().join("b.src"), dir.path().join("b.tgt"));
    c.write_files(&out_src, &out_tgt).unwrap();
    let (back, _) = load_parallel(&out_src, &out_tgt, Provenance::Authentic, TokenizeOptions::default()).unwrap();
    assert_eq!(multiset(&back), multiset(&c));

    std::fs::write(&mono, "one two\n   \nthree\n").unwrap();
    let (m, report) = load_monolingual(&mono, "tgt", TokenizeOptions::default()).unwrap();
    assert_eq!((m.len(), report.dropped), (2, 1));

    std::fs::write(&tgt, "only one line\n").unwrap();
    assert!(load_parallel(&src, &tgt, Provenance::Authentic, TokenizeOptions::default()).is_err());
}

#[test]
fn tokenization_normalizes_composed_characters() {
    let composed = Sentence::parse("Caf\u{e9}", TokenizeOptions::default());
    let decomposed = Sentence::parse("Cafe\u{301}", TokenizeOptions::default());
    assert_eq!(composed.tokens(), decomposed.tokens());
    let kept = Sentence::parse("Caf\u{e9}", TokenizeOptions { lowercase: false });
    assert_eq!(kept.tokens(), ["Caf\u{e9}"]);
}
