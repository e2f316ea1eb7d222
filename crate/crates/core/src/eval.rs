//! Corpus BLEU with per-order modified precisions.
//!
//! Single reference per hypothesis. Counts are accumulated over the whole
//! corpus before any ratio is taken.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::model::Seq2Seq;
use crate::parallel::{map_ordered, Parallelism};
use crate::search::{translate, SearchConfig, SearchError};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty evaluation corpus")]
    EmptyCorpus,
    #[error("n-gram order must be in 1..=4, got {0}")]
    Order(usize),
    #[error(transparent)]
    Search(#[from] SearchError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// Add one to numerator and denominator for orders 2 and above.
    AddOne,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NgramPrecision {
    pub precision: f64,
    pub clipped: u64,
    pub total: u64,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped and total hypothesis n-gram counts of one sentence, plus the
/// reference n-gram count.
fn sentence_stats<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (u64, u64, u64) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let clipped = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    let total = hyp.len().saturating_sub(n - 1) as u64;
    let ref_total = reference.len().saturating_sub(n - 1) as u64;
    (clipped, total, ref_total)
}

fn ratio(clipped: u64, total: u64, ref_total: u64, n: usize, smoothing: Smoothing) -> f64 {
    if smoothing == Smoothing::AddOne && n >= 2 {
        return (clipped + 1) as f64 / (total + 1) as f64;
    }
    match total {
        // Neither side has n-grams of this order: nothing was missed.
        0 if ref_total == 0 => 1.0,
        0 => 0.0,
        _ => clipped as f64 / total as f64,
    }
}

fn check_lengths<T>(hyps: &[T], refs: &[T]) -> Result<(), EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    Ok(())
}

/// Corpus-level modified n-gram precision.
///
/// When no hypothesis has an n-gram of order `n`, the precision is 1 if the
/// references have none either and 0 otherwise.
pub fn ngram_precision<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<NgramPrecision, EvalError> {
    check_lengths(hyps, refs)?;
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(EvalError::Order(n));
    }
    let (mut clipped, mut total, mut ref_total) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (c, t, rt) = sentence_stats(h, r, n);
        clipped += c;
        total += t;
        ref_total += rt;
    }
    Ok(NgramPrecision { precision: ratio(clipped, total, ref_total, n, Smoothing::None), clipped, total })
}

/// 1 when the hypothesis is at least as long as the reference, otherwise
/// `exp(1 - r/h)`; an empty hypothesis gets 0 and an empty reference 1.
pub fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub direction: String,
    /// In `[0, 1]`.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub sentences: usize,
    pub smoothing: Smoothing,
}

/// Per-sentence sufficient statistics; summing them in order gives the
/// corpus statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct BleuStats {
    clipped: [u64; MAX_ORDER],
    total: [u64; MAX_ORDER],
    ref_total: [u64; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn of<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats { hyp_len: hyp.len(), ref_len: reference.len(), ..Default::default() };
        for n in 1..=MAX_ORDER {
            let (c, t, rt) = sentence_stats(hyp, reference, n);
            s.clipped[n - 1] = c;
            s.total[n - 1] = t;
            s.ref_total[n - 1] = rt;
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.clipped[n] += o.clipped[n];
            self.total[n] += o.total[n];
            self.ref_total[n] += o.ref_total[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    fn record(&self, direction: &str, sentences: usize, smoothing: Smoothing) -> EvalRecord {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 1..=MAX_ORDER {
            precisions[n - 1] = ratio(self.clipped[n - 1], self.total[n - 1], self.ref_total[n - 1], n, smoothing);
        }
        let bp = brevity_penalty(self.hyp_len, self.ref_len);
        let bleu = if precisions.iter().any(|&p| p == 0.0) || bp == 0.0 {
            0.0
        } else {
            bp * precisions.iter().map(|p| p.ln() / MAX_ORDER as f64).sum::<f64>().exp()
        };
        EvalRecord {
            direction: direction.to_string(),
            bleu,
            precisions,
            bp,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
            sentences,
            smoothing,
        }
    }
}

pub fn corpus_bleu<T: Eq + Hash + Sync>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    smoothing: Smoothing,
    par: Parallelism,
) -> Result<EvalRecord, EvalError> {
    corpus_bleu_named("", hyps, refs, smoothing, par)
}

pub fn corpus_bleu_named<T: Eq + Hash + Sync>(
    direction: &str,
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    smoothing: Smoothing,
    par: Parallelism,
) -> Result<EvalRecord, EvalError> {
    check_lengths(hyps, refs)?;
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let pairs: Vec<(&Vec<T>, &Vec<T>)> = hyps.iter().zip(refs).collect();
    let per = map_ordered(&pairs, par, |(h, r)| BleuStats::of(h, r));
    let mut total = BleuStats::default();
    per.iter().for_each(|s| total.add(s));
    Ok(total.record(direction, hyps.len(), smoothing))
}

/// Encoded sources with their tokenized references for one direction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSet {
    pub direction: String,
    pub sources: Vec<Vec<usize>>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionResult {
    pub record: EvalRecord,
    pub hypotheses: Vec<Vec<String>>,
    /// Language-tag tokens emitted by the decoder.
    pub tag_emissions: usize,
}

/// Beam-decodes every source and scores against the references. Hypotheses
/// are compared as surface forms, so language prefixes never count.
pub fn evaluate_direction(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    set: &EvalSet,
    search: &SearchConfig,
    smoothing: Smoothing,
    par: Parallelism,
) -> Result<DirectionResult, EvalError> {
    let decoded = map_ordered(&set.sources, par, |src| translate(model, src, search));
    let mut hypotheses = Vec::with_capacity(decoded.len());
    let mut tag_emissions = 0;
    for d in decoded {
        let t = d?;
        tag_emissions += t.tokens.iter().filter(|&&id| vocab.is_tag(id)).count();
        hypotheses.push(vocab.decode(&t.tokens));
    }
    let record = corpus_bleu_named(&set.direction, &hypotheses, &set.references, smoothing, par)?;
    Ok(DirectionResult { record, hypotheses, tag_emissions })
}

pub fn mean_bleu(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.bleu).sum::<f64>() / records.len() as f64
}

pub const TSV_HEADER: &str = "direction\tbleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len";

/// Machine-readable report: a header line then one record per line.
/// Floats use the shortest representation that round-trips.
pub fn records_tsv(records: &[EvalRecord]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.direction, r.bleu, r.precisions[0], r.precisions[1], r.precisions[2], r.precisions[3], r.bp, r.hyp_len, r.ref_len
        );
    }
    out
}

/// Aligned table with BLEU and 1-3 gram precisions scaled by 100.
pub fn records_table(title: &str, records: &[EvalRecord]) -> String {
    let width = records.iter().map(|r| r.direction.chars().count()).max().unwrap_or(0).max("Direction".len());
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "Direction", "BLEU", "1gram", "2gram", "3gram");
    for r in records {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}",
            r.direction,
            100.0 * r.bleu,
            100.0 * r.precisions[0],
            100.0 * r.precisions[1],
            100.0 * r.precisions[2]
        );
    }
    out
}
