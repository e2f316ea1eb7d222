//! Toy languages over a shared concept inventory, a copy task, and
//! vocabulary overlap statistics.
//!
//! Every language renders the same concept sequences with its own surface
//! forms, so translation is a word-for-word mapping that attention can learn
//! quickly. Designated language pairs share a fraction of their forms
//! verbatim; aligned word vectors are concept vectors plus per-language noise.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_parallel, CorpusError, ParallelCorpus, Sentence, SentencePair, Split, UNK};
use crate::embeddings::{write_vector_file, EmbeddingError, WordVectorFile};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Concepts per language (= lexicon size).
    pub vocab_size: usize,
    pub n_languages: usize,
    /// Target Jaccard overlap of the lexicons of each pair in `share_pairs`.
    pub overlap: f64,
    /// Language index pairs that share forms; by default the last language
    /// shares with the one before it.
    pub share_pairs: Vec<[usize; 2]>,
    /// How many of the last languages are held out as test languages.
    pub n_test_languages: usize,
    pub seed: u64,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    /// Per-language noise added to concept vectors, relative to their scale.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            n_languages: 4,
            overlap: 0.7,
            share_pairs: Vec::new(),
            n_test_languages: 1,
            seed: 1,
            train_sentences: 300,
            dev_sentences: 40,
            test_sentences: 60,
            min_len: 3,
            max_len: 7,
            embed_dim: 16,
            noise: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if self.vocab_size < 3 || self.n_languages < 2 {
            return bad("need at least 3 concepts and 2 languages".into());
        }
        if self.n_test_languages >= self.n_languages {
            return bad("at least one training language is required".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.embed_dim == 0 || !(self.noise >= 0.0) {
            return bad("embed_dim must be positive and noise non-negative".into());
        }
        if self.share_pairs.iter().flatten().any(|&l| l >= self.n_languages) {
            return bad("share_pairs refers to an unknown language".into());
        }
        Ok(())
    }

    pub fn language_codes(&self) -> Vec<String> {
        (0..self.n_languages).map(|i| format!("l{i}")).collect()
    }

    pub fn train_languages(&self) -> Vec<String> {
        self.language_codes()[..self.n_languages - self.n_test_languages].to_vec()
    }

    pub fn test_languages(&self) -> Vec<String> {
        self.language_codes()[self.n_languages - self.n_test_languages..].to_vec()
    }

    fn resolved_share_pairs(&self) -> Vec<[usize; 2]> {
        if self.share_pairs.is_empty() {
            vec![[self.n_languages - 2, self.n_languages - 1]]
        } else {
            self.share_pairs.clone()
        }
    }
}

/// Number of shared forms giving Jaccard overlap `o` between two lexicons of
/// size `n`: `k / (2n - k) = o`.
pub fn shared_count(n: usize, o: f64) -> usize {
    ((2 * n) as f64 * o / (1.0 + o)).round() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SynthSpec,
    pub languages: Vec<String>,
    /// `lexicons[l][c]`: surface form of concept `c` in language `l`.
    pub lexicons: Vec<Vec<String>>,
    /// Part-of-speech class of each concept.
    pub classes: Vec<usize>,
    /// Corpora keyed by `(split, source language, target language)`.
    pub corpora: BTreeMap<(Split, String, String), ParallelCorpus>,
    pub embeddings: Vec<WordVectorFile>,
}

const SYLLABLES: [&str; 24] = [
    "ka", "ri", "mo", "te", "su", "na", "lo", "pe", "vi", "da", "go", "ze", "bu", "fa", "ki", "to", "me", "ra", "no",
    "si", "lu", "ve", "ha", "jo",
];

const NUM_CLASSES: usize = 3;

fn fresh_form(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let form: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if used.insert(form.clone()) {
            return form;
        }
    }
}

/// Concept sequence from a bigram model over part-of-speech classes.
fn sample_sequence(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    start: &WeightedIndex<f64>,
    transitions: &[WeightedIndex<f64>],
    by_class: &[Vec<usize>],
) -> Vec<usize> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let mut class = start.sample(rng);
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 {
            class = transitions[class].sample(rng);
        }
        out.push(*by_class[class].choose(rng).expect("every class has concepts"));
    }
    out
}

fn render(seq: &[usize], lexicon: &[String], lang: &str) -> Sentence {
    Sentence::new(lang, seq.iter().map(|&c| lexicon[c].clone()).collect())
}

pub fn generate_synthetic_languages(spec: &SynthSpec) -> Result<SyntheticData, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.vocab_size;
    let languages = spec.language_codes();

    let mut classes: Vec<usize> = (0..n).map(|c| c % NUM_CLASSES).collect();
    classes.shuffle(&mut rng);
    let by_class: Vec<Vec<usize>> =
        (0..NUM_CLASSES).map(|k| (0..n).filter(|&c| classes[c] == k).collect()).collect();
    let start = WeightedIndex::new((0..NUM_CLASSES).map(|_| rng.gen_range(0.5..1.5))).expect("positive weights");
    let transitions: Vec<WeightedIndex<f64>> = (0..NUM_CLASSES)
        .map(|_| WeightedIndex::new((0..NUM_CLASSES).map(|_| rng.gen_range(0.1..1.0))).expect("positive weights"))
        .collect();

    let mut used = HashSet::new();
    let mut lexicons: Vec<Vec<String>> =
        (0..spec.n_languages).map(|_| (0..n).map(|_| fresh_form(&mut rng, &mut used)).collect()).collect();
    let k = shared_count(n, spec.overlap).min(n);
    for [a, b] in spec.resolved_share_pairs() {
        let mut concepts: Vec<usize> = (0..n).collect();
        concepts.shuffle(&mut rng);
        for &c in &concepts[..k] {
            lexicons[b][c] = lexicons[a][c].clone();
        }
    }

    // Unit-scale concept vectors; noise is relative to that scale.
    let scale = 1.0 / (spec.embed_dim as f64).sqrt();
    let concept_vecs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..spec.embed_dim).map(|_| rng.gen_range(-1.0..1.0) * scale * 3f64.sqrt()).collect())
        .collect();
    let embeddings = languages
        .iter()
        .enumerate()
        .map(|(l, lang)| {
            let entries = (0..n)
                .map(|c| {
                    let v = concept_vecs[c]
                        .iter()
                        .map(|&x| x + spec.noise * scale * 3f64.sqrt() * rng.gen_range(-1.0..1.0))
                        .collect();
                    (lexicons[l][c].clone(), v)
                })
                .collect();
            WordVectorFile { language: lang.clone(), dim: spec.embed_dim, entries, warnings: Vec::new() }
        })
        .collect();

    let n_train = spec.n_languages - spec.n_test_languages;
    let mut corpora = BTreeMap::new();
    for a in 0..spec.n_languages {
        for b in (a + 1)..spec.n_languages {
            let test_pair = b >= n_train;
            let splits: &[(Split, usize)] = if test_pair {
                &[(Split::Test, spec.test_sentences)]
            } else {
                &[(Split::Train, spec.train_sentences), (Split::Dev, spec.dev_sentences), (Split::Test, spec.test_sentences)]
            };
            // Test-language pairs get the held-out language as source side.
            let (src, tgt) = if test_pair { (b, a) } else { (a, b) };
            for &(split, count) in splits {
                let mut corpus = ParallelCorpus::new(split);
                for _ in 0..count {
                    let seq = sample_sequence(&mut rng, spec, &start, &transitions, &by_class);
                    corpus.pairs.push(SentencePair {
                        source: render(&seq, &lexicons[src], &languages[src]),
                        target: render(&seq, &lexicons[tgt], &languages[tgt]),
                    });
                }
                corpora.insert((split, languages[src].clone(), languages[tgt].clone()), corpus);
            }
        }
    }
    Ok(SyntheticData { spec: spec.clone(), languages, lexicons, classes, corpora, embeddings })
}

pub fn embedding_file_name(lang: &str) -> String {
    format!("emb.{lang}.vec")
}

impl SyntheticData {
    /// Writes every corpus as a file pair and every language's vectors.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        let mut written = Vec::new();
        for ((_, src, tgt), corpus) in &self.corpora {
            written.extend(write_parallel(dir, corpus, src, tgt)?);
        }
        for e in &self.embeddings {
            let p = dir.join(embedding_file_name(&e.language));
            write_vector_file(&p, &e.entries, e.dim)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Identity-translation corpus over `vocab_size` word types.
pub fn copy_task(vocab_size: usize, n_pairs: usize, min_len: usize, max_len: usize, seed: u64, lang: &str) -> ParallelCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..vocab_size).map(|i| format!("w{i}")).collect();
    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let toks: Vec<String> = (0..len).map(|_| words.choose(&mut rng).expect("non-empty").clone()).collect();
            SentencePair { source: Sentence::new(lang, toks.clone()), target: Sentence::new(lang, toks) }
        })
        .collect();
    ParallelCorpus { split: Split::Train, pairs }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub languages: Vec<String>,
    pub sizes: Vec<usize>,
    /// Jaccard overlap of surface-form vocabularies; symmetric.
    pub jaccard: Vec<Vec<f64>>,
    pub shared: Vec<Vec<usize>>,
}

impl OverlapStats {
    pub fn tsv(&self) -> String {
        let mut out = String::from("lang_a\tlang_b\tjaccard\tshared\tsize_a\tsize_b\n");
        for i in 0..self.languages.len() {
            for j in 0..self.languages.len() {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    self.languages[i], self.languages[j], self.jaccard[i][j], self.shared[i][j], self.sizes[i], self.sizes[j]
                ));
            }
        }
        out
    }
}

/// Pairwise overlap of the surface vocabularies seen in `corpora`, per
/// language. `<unk>` is not a word of any language.
pub fn vocab_overlap_stats(languages: &[String], corpora: &[&ParallelCorpus]) -> OverlapStats {
    let mut vocabs: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); languages.len()];
    for c in corpora {
        for s in c.sentences() {
            if let Some(i) = languages.iter().position(|l| *l == s.language) {
                vocabs[i].extend(s.tokens.iter().map(String::as_str).filter(|t| *t != UNK));
            }
        }
    }
    let k = languages.len();
    let mut jaccard = vec![vec![0.0; k]; k];
    let mut shared = vec![vec![0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let inter = vocabs[i].intersection(&vocabs[j]).count();
            let union = vocabs[i].union(&vocabs[j]).count();
            shared[i][j] = inter;
            jaccard[i][j] = if union == 0 { if i == j { 1.0 } else { 0.0 } } else { inter as f64 / union as f64 };
        }
    }
    OverlapStats { languages: languages.to_vec(), sizes: vocabs.iter().map(BTreeSet::len).collect(), jaccard, shared }
}
