//! End-to-end runs: data preparation, embeddings, training, evaluation and
//! report writing inside a locked run directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{EmbeddingMode, ExperimentConfig};
use super::pipeline::{encode_pairs, eval_set};
use crate::corpus::{
    build_vocabulary, load_parallel, preprocess_corpus, ExtraLexicon, ParallelCorpus, Split, Vocabulary,
};
use crate::embeddings::{build_embedding_table, parse_vector_file, random_table, EmbeddingTable, WordVectorFile};
use crate::eval::{corpus_bleu_named, evaluate_direction, records_table, records_tsv, EvalRecord, EvalSet, Smoothing, MAX_ORDER};
use crate::model::Seq2Seq;
use crate::search::SearchConfig;
use crate::synthetic::{generate_synthetic_languages, vocab_overlap_stats};
use crate::trainer::{Checkpoint, EpochRecord, TrainError, Trainer, LOG_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Lock,
    Synth,
    Preprocess,
    Embeddings,
    Train,
    Evaluate,
    Translate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Lock => "lock",
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Embeddings => "build-embeddings",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Translate => "translate",
            Stage::Report => "report",
        })
    }
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct HarnessError {
    pub stage: Stage,
    pub message: String,
}

impl HarnessError {
    pub fn new(stage: Stage, cause: impl fmt::Display) -> Self {
        let message = cause.to_string().replace(['\t', '\n', '\r'], " ");
        Self { stage, message }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={}\t{}", self.stage, self.message)
    }
}

impl std::error::Error for HarnessError {}

pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, HarnessError>;
}

impl<T, E: fmt::Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, HarnessError> {
        self.map_err(|e| HarnessError::new(stage, e))
    }
}

/// `runs/<name>` held exclusively through a lockfile for the lifetime of
/// this value.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(run_root: &Path, name: &str) -> Result<Self, HarnessError> {
        let root = run_root.join(name);
        for sub in ["checkpoints", "reports", "embeddings", "vocab"] {
            fs::create_dir_all(root.join(sub)).stage(Stage::Lock)?;
        }
        let lock = root.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| HarnessError::new(Stage::Lock, format!("{}: run directory is in use ({e})", lock.display())))?;
        Ok(Self { root, lock })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// One input file, the stage that read it and its digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub stage: Stage,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputLedger {
    pub inputs: Vec<InputRecord>,
}

impl InputLedger {
    pub fn record(&mut self, stage: Stage, path: &Path) -> Result<(), HarnessError> {
        let bytes = fs::read(path).map_err(|e| HarnessError::new(stage, format!("{}: {e}", path.display())))?;
        self.inputs.push(InputRecord {
            stage,
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSizeRow {
    pub split: Split,
    pub pair: String,
    pub raw_pairs: usize,
    pub kept_pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub version: String,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub corpus_sizes: Vec<CorpusSizeRow>,
    pub inputs: Vec<InputRecord>,
    /// Seconds per stage; the only nondeterministic content of a run.
    pub wall_clock: BTreeMap<String, f64>,
    pub config: Option<ExperimentConfig>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let text = toml::to_string(self).stage(Stage::Report)?;
        fs::write(path, text).stage(Stage::Report)
    }
}

/// Writes the synthetic corpus into `<run>/data` and points the config at it.
pub fn materialize_synthetic(cfg: &ExperimentConfig, run: &RunDir) -> Result<ExperimentConfig, HarnessError> {
    let Some(spec) = &cfg.synthetic else {
        return Ok(cfg.clone());
    };
    let data = generate_synthetic_languages(spec).stage(Stage::Synth)?;
    let dir = run.path("data");
    data.write(&dir).stage(Stage::Synth)?;
    let mut out = cfg.clone();
    out.data.corpus_dir = dir;
    out.data.embedding_files.clear();
    out.data.train_languages = spec.train_languages();
    out.data.test_languages = spec.test_languages();
    out.synthetic = None;
    Ok(out)
}

/// Training-side data: everything the model may see before evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub languages: Vec<String>,
    pub train_languages: Vec<String>,
    pub test_languages: Vec<String>,
    /// Preprocessed, both directions.
    pub train: ParallelCorpus,
    /// Dev corpora per direction.
    pub dev: Vec<(String, ParallelCorpus)>,
    pub vocab: Vocabulary,
    pub vectors: Vec<WordVectorFile>,
    pub sizes: Vec<CorpusSizeRow>,
}

fn direction(src: &str, tgt: &str) -> String {
    format!("{src}->{tgt}")
}

fn load_vectors(cfg: &ExperimentConfig, langs: &[String], ledger: &mut InputLedger) -> Result<Vec<WordVectorFile>, HarnessError> {
    let mut out = Vec::new();
    for l in langs {
        let p = cfg.embedding_file(l);
        ledger.record(Stage::Embeddings, &p)?;
        out.push(parse_vector_file(&p, l).stage(Stage::Embeddings)?);
    }
    Ok(out)
}

/// Loads and preprocesses training and dev data, reads every language's
/// vectors and builds the vocabulary. Test-split files are not touched.
pub fn prepare(cfg: &ExperimentConfig, ledger: &mut InputLedger) -> Result<Prepared, HarnessError> {
    let (train_languages, test_languages) = cfg.languages();
    let languages: Vec<String> = train_languages.iter().chain(&test_languages).cloned().collect();
    let dir = &cfg.data.corpus_dir;

    let mut raw = ParallelCorpus::new(Split::Train);
    let mut sizes = Vec::new();
    let mut raw_counts = Vec::new();
    for [a, b] in cfg.train_pairs() {
        let (c, paths) = load_parallel(dir, Split::Train, &a, &b).stage(Stage::Preprocess)?;
        for p in &paths {
            ledger.record(Stage::Train, p)?;
        }
        raw_counts.push((a.clone(), b.clone(), c.len()));
        raw.extend(c);
    }
    let pre = preprocess_corpus(&raw, &cfg.preprocess);
    if pre.corpus.is_empty() {
        return Err(HarnessError::new(Stage::Preprocess, "training corpus is empty after preprocessing"));
    }
    for (a, b, n) in raw_counts {
        let kept = pre.corpus.pairs.iter().filter(|p| p.source.language == a && p.target.language == b).count();
        sizes.push(CorpusSizeRow { split: Split::Train, pair: format!("{a}-{b}"), raw_pairs: n, kept_pairs: kept });
    }

    let mut dev = Vec::new();
    for [a, b] in cfg.train_pairs() {
        let (c, paths) = load_parallel(dir, Split::Dev, &a, &b).stage(Stage::Preprocess)?;
        for p in &paths {
            ledger.record(Stage::Train, p)?;
        }
        let kept = preprocess_corpus(&c, &cfg.preprocess).corpus;
        sizes.push(CorpusSizeRow { split: Split::Dev, pair: format!("{a}-{b}"), raw_pairs: c.len(), kept_pairs: kept.len() });
        let both = kept.bidirectional();
        let (fwd, bwd): (Vec<_>, Vec<_>) = both.pairs.into_iter().partition(|p| p.source.language == *a);
        dev.push((direction(&a, &b), ParallelCorpus { split: Split::Dev, pairs: fwd }));
        dev.push((direction(&b, &a), ParallelCorpus { split: Split::Dev, pairs: bwd }));
    }

    let vectors = load_vectors(cfg, &languages, ledger)?;
    // Unseen languages contribute their embedding lexicon so that their words
    // have rows at all; training languages use corpus words only.
    let extra: Vec<ExtraLexicon> = vectors
        .iter()
        .filter(|v| test_languages.contains(&v.language))
        .map(|v| ExtraLexicon { language: v.language.clone(), tokens: v.tokens().map(str::to_string).collect() })
        .collect();
    let train = pre.corpus.bidirectional();
    let vocab = build_vocabulary(&[&train], &languages, cfg.data.vocab_mode, &extra);
    Ok(Prepared { languages, train_languages, test_languages, train, dev, vocab, vectors, sizes })
}

pub fn build_table(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<EmbeddingTable, HarnessError> {
    let dim = prepared.vectors.first().map(|v| v.dim).unwrap_or(cfg.model.embed_dim);
    match cfg.data.embedding_mode {
        EmbeddingMode::Pretrained => {
            build_embedding_table(&prepared.vectors, &prepared.vocab, cfg.seed, cfg.data.init_range).stage(Stage::Embeddings)
        }
        EmbeddingMode::Random => {
            Ok(random_table(&prepared.vocab, dim, cfg.seed, cfg.data.init_range, cfg.data.random_frozen))
        }
    }
}

fn pooled_dev(prepared: &Prepared, cap: Option<usize>) -> Result<EvalSet, HarnessError> {
    let mut pooled = ParallelCorpus::new(Split::Dev);
    for (_, c) in &prepared.dev {
        pooled.pairs.extend(c.pairs.iter().cloned());
    }
    if let Some(n) = cap {
        // Interleave directions so a cap keeps every direction represented.
        let mut rows: Vec<_> = Vec::new();
        let longest = prepared.dev.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
        for i in 0..longest {
            for (_, c) in &prepared.dev {
                if let Some(p) = c.pairs.get(i) {
                    rows.push(p.clone());
                }
            }
        }
        rows.truncate(n);
        pooled.pairs = rows;
    }
    eval_set("dev", &pooled, &prepared.vocab).stage(Stage::Train)
}

pub struct Trained {
    pub model: Seq2Seq,
    pub trainer: Trainer,
    pub log: Vec<EpochRecord>,
}

/// Trains (or resumes from `checkpoints/last.json`) and writes the training
/// log and the final checkpoint.
pub fn train_stage(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    table: EmbeddingTable,
    run: &RunDir,
    resume: bool,
) -> Result<Trained, HarnessError> {
    let last = run.path("checkpoints/last.json");
    let log_path = run.path("reports/train_log.tsv");
    let (mut model, mut trainer, mut log_text) = if resume && last.is_file() {
        let ck = Checkpoint::load(&last, Some(prepared.vocab.len())).stage(Stage::Train)?;
        let (model, trainer, _) = ck.restore().stage(Stage::Train)?;
        let text = fs::read_to_string(&log_path).unwrap_or_else(|_| format!("{LOG_HEADER}\n"));
        (model, trainer, text)
    } else {
        let mcfg = cfg.seeded_model_config(prepared.vocab.len(), table.dim());
        let model = Seq2Seq::new(mcfg, table).stage(Stage::Train)?;
        let trainer = Trainer::new(&model, cfg.seeded_train_config()).stage(Stage::Train)?;
        (model, trainer, format!("{LOG_HEADER}\n"))
    };
    let data = encode_pairs(&prepared.train, &prepared.vocab).stage(Stage::Train)?;
    let dev_set = pooled_dev(prepared, cfg.eval.dev_max_sentences)?;
    let dev_search = SearchConfig { beam_size: cfg.eval.dev_beam_size, ..cfg.search.clone() };
    let (vocab, smoothing, par) = (&prepared.vocab, cfg.eval.dev_smoothing, cfg.parallelism);
    let scorer = |m: &Seq2Seq| -> Result<f64, TrainError> {
        if dev_set.sources.is_empty() {
            return Ok(0.0);
        }
        evaluate_direction(m, vocab, &dev_set, &dev_search, smoothing, par)
            .map(|r| r.record.bleu)
            .map_err(|e| TrainError::Eval(e.to_string()))
    };
    let dev: Option<&dyn Fn(&Seq2Seq) -> Result<f64, TrainError>> = Some(&scorer);
    let log = trainer
        .fit(&mut model, &data, dev, par, |rec, m, t| {
            log::info!("{}", rec.log_line());
            log_text.push_str(&rec.log_line());
            log_text.push('\n');
            fs::write(&log_path, &log_text).map_err(|e| TrainError::Eval(e.to_string()))?;
            Checkpoint::capture(m, t, vocab).save(&last)?;
            Ok(())
        })
        .stage(Stage::Train)?;
    Checkpoint::capture(&model, &trainer, vocab).save(&run.path("checkpoints/final.json")).stage(Stage::Train)?;
    Ok(Trained { model, trainer, log })
}

/// Evaluation records in both smoothing modes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub unsmoothed: Vec<EvalRecord>,
    pub smoothed: Vec<EvalRecord>,
    /// Language-tag tokens emitted per direction.
    pub tag_emissions: BTreeMap<String, usize>,
    pub train_rows: Vec<String>,
    pub transfer_rows: Vec<String>,
}

impl ExperimentReport {
    pub fn get(&self, direction: &str, smoothing: Smoothing) -> Option<&EvalRecord> {
        let rows = match smoothing {
            Smoothing::None => &self.unsmoothed,
            Smoothing::AddOne => &self.smoothed,
        };
        rows.iter().find(|r| r.direction == direction)
    }
}

/// Arithmetic mean of BLEU, precisions and BP; lengths are summed.
pub fn mean_record(name: &str, rows: &[&EvalRecord]) -> EvalRecord {
    let k = rows.len().max(1) as f64;
    let mut precisions = [0.0; MAX_ORDER];
    for r in rows {
        for n in 0..MAX_ORDER {
            precisions[n] += r.precisions[n] / k;
        }
    }
    EvalRecord {
        direction: name.to_string(),
        bleu: rows.iter().map(|r| r.bleu).sum::<f64>() / k,
        precisions,
        bp: rows.iter().map(|r| r.bp).sum::<f64>() / k,
        hyp_len: rows.iter().map(|r| r.hyp_len).sum(),
        ref_len: rows.iter().map(|r| r.ref_len).sum(),
        sentences: rows.iter().map(|r| r.sentences).sum(),
        smoothing: rows.first().map(|r| r.smoothing).unwrap_or_default(),
    }
}

struct Decoded {
    direction: String,
    hyps: Vec<Vec<String>>,
    refs: Vec<Vec<String>>,
}

/// Name of the transfer summary row for one unseen language.
pub fn transfer_row(lang: &str) -> String {
    format!("{lang}<->train (mean)")
}

pub fn unseen_to_train_row(lang: &str) -> String {
    format!("{lang}->train (pooled)")
}

pub fn train_to_unseen_row(lang: &str) -> String {
    format!("train->{lang} (pooled)")
}

/// Decodes the test split of every training direction and of every unseen
/// language in both directions, and writes hypotheses and reports.
pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    model: &Seq2Seq,
    run: &RunDir,
    ledger: &mut InputLedger,
    sizes: &mut Vec<CorpusSizeRow>,
) -> Result<ExperimentReport, HarnessError> {
    let dir = &cfg.data.corpus_dir;
    let vocab = &prepared.vocab;
    let mut test_corpora: Vec<ParallelCorpus> = Vec::new();
    let mut jobs: Vec<(String, String, ParallelCorpus)> = Vec::new();
    for [a, b] in cfg.train_pairs() {
        let (c, paths) = load_parallel(dir, Split::Test, &a, &b).stage(Stage::Evaluate)?;
        for p in &paths {
            ledger.record(Stage::Evaluate, p)?;
        }
        let kept = preprocess_corpus(&c, &cfg.preprocess).corpus;
        sizes.push(CorpusSizeRow { split: Split::Test, pair: format!("{a}-{b}"), raw_pairs: c.len(), kept_pairs: kept.len() });
        let rev = ParallelCorpus {
            split: Split::Test,
            pairs: kept.bidirectional().pairs.into_iter().skip(1).step_by(2).collect(),
        };
        jobs.push((a.clone(), b.clone(), kept.clone()));
        jobs.push((b.clone(), a.clone(), rev));
        test_corpora.push(kept);
    }
    let n_train_jobs = jobs.len();
    for u in &prepared.test_languages {
        for t in &prepared.train_languages {
            let (c, paths) = load_parallel(dir, Split::Test, u, t).stage(Stage::Evaluate)?;
            for p in &paths {
                ledger.record(Stage::Evaluate, p)?;
            }
            let kept = preprocess_corpus(&c, &cfg.preprocess).corpus;
            sizes.push(CorpusSizeRow { split: Split::Test, pair: format!("{u}-{t}"), raw_pairs: c.len(), kept_pairs: kept.len() });
            let rev = ParallelCorpus {
                split: Split::Test,
                pairs: kept.bidirectional().pairs.into_iter().skip(1).step_by(2).collect(),
            };
            jobs.push((u.clone(), t.clone(), kept.clone()));
            jobs.push((t.clone(), u.clone(), rev));
            test_corpora.push(kept);
        }
    }

    let mut report = ExperimentReport::default();
    let mut decoded = Vec::new();
    for (src, tgt, corpus) in &jobs {
        let name = direction(src, tgt);
        let set = eval_set(&name, corpus, vocab).stage(Stage::Evaluate)?;
        let res = evaluate_direction(model, vocab, &set, &cfg.search, Smoothing::None, cfg.parallelism).stage(Stage::Evaluate)?;
        let mut hyp_text = String::new();
        for h in &res.hypotheses {
            hyp_text.push_str(&h.join(" "));
            hyp_text.push('\n');
        }
        fs::write(run.path(&format!("reports/hyp.{src}-{tgt}.txt")), hyp_text).stage(Stage::Report)?;
        report.tag_emissions.insert(name.clone(), res.tag_emissions);
        decoded.push(Decoded { direction: name, hyps: res.hypotheses, refs: set.references });
    }

    for smoothing in [Smoothing::None, Smoothing::AddOne] {
        let score = |name: &str, parts: &[&Decoded]| -> Result<EvalRecord, HarnessError> {
            let hyps: Vec<Vec<String>> = parts.iter().flat_map(|d| d.hyps.iter().cloned()).collect();
            let refs: Vec<Vec<String>> = parts.iter().flat_map(|d| d.refs.iter().cloned()).collect();
            corpus_bleu_named(name, &hyps, &refs, smoothing, cfg.parallelism).stage(Stage::Evaluate)
        };
        let mut rows = Vec::new();
        let mut train_rows = Vec::new();
        let per_train: Vec<EvalRecord> =
            decoded[..n_train_jobs].iter().map(|d| score(&d.direction, &[d])).collect::<Result<_, _>>()?;
        train_rows.extend(per_train.iter().map(|r| r.direction.clone()));
        rows.extend(per_train.iter().cloned());
        if !per_train.is_empty() {
            let all: Vec<&Decoded> = decoded[..n_train_jobs].iter().collect();
            rows.push(score("train (pooled)", &all)?);
            rows.push(mean_record("train (mean)", &per_train.iter().collect::<Vec<_>>()));
            train_rows.extend(["train (pooled)".to_string(), "train (mean)".to_string()]);
        }
        let mut transfer_rows = Vec::new();
        for u in &prepared.test_languages {
            let from: Vec<&Decoded> = decoded[n_train_jobs..].iter().filter(|d| d.direction.starts_with(&format!("{u}->"))).collect();
            let to: Vec<&Decoded> = decoded[n_train_jobs..].iter().filter(|d| d.direction.ends_with(&format!("->{u}"))).collect();
            let per_from: Vec<EvalRecord> = from.iter().map(|d| score(&d.direction, &[d])).collect::<Result<_, _>>()?;
            let per_to: Vec<EvalRecord> = to.iter().map(|d| score(&d.direction, &[d])).collect::<Result<_, _>>()?;
            let mut block = per_from.clone();
            block.extend(per_to.iter().cloned());
            block.push(score(&unseen_to_train_row(u), &from)?);
            block.push(score(&train_to_unseen_row(u), &to)?);
            block.push(mean_record(&format!("{u}->train (mean)"), &per_from.iter().collect::<Vec<_>>()));
            block.push(mean_record(&format!("train->{u} (mean)"), &per_to.iter().collect::<Vec<_>>()));
            let both: Vec<&EvalRecord> = per_from.iter().chain(&per_to).collect();
            block.push(mean_record(&transfer_row(u), &both));
            transfer_rows.extend(block.iter().map(|r| r.direction.clone()));
            rows.extend(block);
        }
        match smoothing {
            Smoothing::None => report.unsmoothed = rows,
            Smoothing::AddOne => report.smoothed = rows,
        }
        report.train_rows = train_rows;
        report.transfer_rows = transfer_rows;
    }

    write_reports(&report, run)?;
    let langs = prepared.languages.clone();
    let mut all: Vec<&ParallelCorpus> = vec![&prepared.train];
    all.extend(test_corpora.iter());
    let overlap = vocab_overlap_stats(&langs, &all);
    fs::write(run.path("reports/overlap.tsv"), overlap.tsv()).stage(Stage::Report)?;
    Ok(report)
}

fn select<'a>(rows: &'a [EvalRecord], names: &[String]) -> Vec<EvalRecord> {
    names.iter().filter_map(|n| rows.iter().find(|r| &r.direction == n).cloned()).collect()
}

pub fn write_reports(report: &ExperimentReport, run: &RunDir) -> Result<(), HarnessError> {
    fs::write(run.path("reports/eval.tsv"), records_tsv(&report.unsmoothed)).stage(Stage::Report)?;
    fs::write(run.path("reports/eval_smoothed.tsv"), records_tsv(&report.smoothed)).stage(Stage::Report)?;
    let mut tables = String::new();
    tables.push_str(&records_table(
        "Training languages (BLEU add-one smoothed for n >= 2, x100)",
        &select(&report.smoothed, &report.train_rows),
    ));
    tables.push('\n');
    tables.push_str(&records_table(
        "Unseen languages (BLEU add-one smoothed for n >= 2, x100)",
        &select(&report.smoothed, &report.transfer_rows),
    ));
    tables.push('\n');
    tables.push_str(&records_table("Unseen languages (unsmoothed BLEU, x100)", &select(&report.unsmoothed, &report.transfer_rows)));
    tables.push_str("\nLanguage tags emitted by the decoder\n");
    for (d, n) in &report.tag_emissions {
        tables.push_str(&format!("{d}\t{n}\n"));
    }
    fs::write(run.path("reports/tables.txt"), tables).stage(Stage::Report)
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub report: ExperimentReport,
    pub log: Vec<EpochRecord>,
}

fn timed<T>(clock: &mut BTreeMap<String, f64>, key: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    clock.insert(key.to_string(), t.elapsed().as_secs_f64());
    out
}

/// Full protocol: (synthesize) → preprocess → vocabulary → embeddings →
/// train → evaluate → reports and manifest.
pub fn run_experiment(cfg: &ExperimentConfig, run_root: &Path) -> Result<ExperimentOutcome, HarnessError> {
    cfg.validate().stage(Stage::Config)?;
    let run = RunDir::open(run_root, &cfg.name)?;
    let mut clock = BTreeMap::new();
    let mut manifest = RunManifest {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: Some(cfg.clone()),
        ..Default::default()
    };
    let result = (|| {
        let cfg = timed(&mut clock, "synth", || materialize_synthetic(cfg, &run))?;
        fs::write(run.path("config.toml"), cfg.to_toml()).stage(Stage::Config)?;
        let mut ledger = InputLedger::default();
        let prepared = timed(&mut clock, "preprocess", || prepare(&cfg, &mut ledger))?;
        prepared.vocab.write(&run.path("vocab/vocab.tsv")).stage(Stage::Preprocess)?;
        let table = timed(&mut clock, "build-embeddings", || build_table(&cfg, &prepared))?;
        table
            .write(&prepared.vocab, &run.path("embeddings/table.vec"), &run.path("embeddings/provenance.tsv"))
            .stage(Stage::Embeddings)?;
        manifest.vocab_size = prepared.vocab.len();
        manifest.embedding_dim = table.dim();
        let trained = timed(&mut clock, "train", || train_stage(&cfg, &prepared, table, &run, false))?;
        let mut sizes = prepared.sizes.clone();
        let report = timed(&mut clock, "evaluate", || evaluate_stage(&cfg, &prepared, &trained.model, &run, &mut ledger, &mut sizes))?;
        manifest.epochs = trained.log.len();
        manifest.corpus_sizes = sizes;
        manifest.inputs = ledger.inputs;
        Ok::<_, HarnessError>((report, trained.log))
    })();
    manifest.wall_clock = clock;
    manifest.write(&run.path("manifest.toml"))?;
    let (report, log) = result?;
    Ok(ExperimentOutcome { run_dir: run.root.clone(), manifest, report, log })
}
