//! Synthetic languages and vocabulary overlap.

use std::collections::BTreeSet;

use unseen_nmt::corpus::{ParallelCorpus, Sentence, SentencePair, Split};
use unseen_nmt::embeddings::parse_vector_file;
use unseen_nmt::synthetic::*;

fn corpora_of(d: &SyntheticData) -> Vec<&ParallelCorpus> {
    d.corpora.values().collect()
}

fn brute_jaccard(a: &[&str], b: &[&str]) -> (f64, usize) {
    let a: BTreeSet<&str> = a.iter().copied().collect();
    let b: BTreeSet<&str> = b.iter().copied().collect();
    let inter = a.iter().filter(|t| b.contains(*t)).count();
    let union = a.len() + b.len() - inter;
    (inter as f64 / union as f64, inter)
}

#[test]
fn measured_overlap_tracks_the_requested_value() {
    for overlap in [0.0, 0.2, 0.5, 0.7, 1.0] {
        for seed in 1..=3 {
            let spec = SynthSpec { overlap, seed, ..Default::default() };
            let d = generate_synthetic_languages(&spec).unwrap();
            let stats = vocab_overlap_stats(&d.languages, &corpora_of(&d));
            let got = stats.jaccard[2][3];
            assert!((got - overlap).abs() <= 0.05, "overlap {overlap} seed {seed}: measured {got}");
        }
    }
}

#[test]
fn overlap_matches_set_arithmetic_on_a_toy_corpus() {
    let pair = |a: &str, b: &str| SentencePair { source: Sentence::from_line("xa", a), target: Sentence::from_line("xb", b) };
    let corpus = ParallelCorpus {
        split: Split::Train,
        pairs: vec![pair("the dog runs", "le chien court"), pair("dog eats", "chien mange le"), pair("a <unk>", "un")],
    };
    let langs = vec!["xa".to_string(), "xb".to_string()];
    let stats = vocab_overlap_stats(&langs, &[&corpus]);
    let a = ["the", "dog", "runs", "eats", "a"];
    let b = ["le", "chien", "court", "mange", "un"];
    let (j, inter) = brute_jaccard(&a, &b);
    assert_eq!(stats.jaccard[0][1], j);
    assert_eq!(stats.shared[0][1], inter);
    assert_eq!(stats.jaccard[0][0], 1.0);
    assert_eq!(stats.sizes, vec![5, 5]);

    let shared = ParallelCorpus { split: Split::Train, pairs: vec![pair("x y z", "x y w")] };
    let stats = vocab_overlap_stats(&langs, &[&shared]);
    assert_eq!(stats.jaccard[1][0], 0.5);
    assert_eq!(stats.shared[0][1], 2);
}

#[test]
fn shared_count_inverts_the_jaccard_formula() {
    for n in [10, 40, 100] {
        for o in [0.0, 0.3, 0.7, 1.0] {
            let k = shared_count(n, o) as f64;
            let j = k / (2.0 * n as f64 - k);
            assert!((j - o).abs() < 1.5 / n as f64, "n {n} o {o}");
        }
    }
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let spec = SynthSpec { train_sentences: 30, ..Default::default() };
    let a = generate_synthetic_languages(&spec).unwrap();
    let b = generate_synthetic_languages(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic_languages(&SynthSpec { seed: 2, ..spec }).unwrap();
    assert_ne!(a.corpora, c.corpora);
}

#[test]
fn unseen_language_only_appears_in_test_data() {
    let d = generate_synthetic_languages(&SynthSpec::default()).unwrap();
    let unseen = &d.spec.test_languages()[0];
    for ((split, src, tgt), c) in &d.corpora {
        if src == unseen || tgt == unseen {
            assert_eq!(*split, Split::Test);
            assert_eq!(src, unseen);
            assert!(!c.is_empty());
        }
    }
}

#[test]
fn written_vectors_parse_back_unchanged() {
    let spec = SynthSpec { train_sentences: 10, dev_sentences: 2, test_sentences: 2, ..Default::default() };
    let d = generate_synthetic_languages(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.write(dir.path()).unwrap();
    for e in &d.embeddings {
        let back = parse_vector_file(&dir.path().join(embedding_file_name(&e.language)), &e.language).unwrap();
        assert_eq!(back.dim, e.dim);
        assert_eq!(back.entries, e.entries);
    }
}

#[test]
fn invalid_overlap_is_a_config_error() {
    for overlap in [-0.1, 1.5, f64::NAN] {
        assert!(generate_synthetic_languages(&SynthSpec { overlap, ..Default::default() }).is_err());
    }
}

#[test]
fn copy_task_targets_equal_sources() {
    let c = copy_task(20, 50, 3, 8, 4, "cp");
    assert_eq!(c.len(), 50);
    for p in &c.pairs {
        assert_eq!(p.source.tokens, p.target.tokens);
        assert!((3..=8).contains(&p.source.len()));
    }
}
