//! Mini-batch Adam training with dev-BLEU learning-rate decay and early
//! stopping, plus JSON checkpoints.
//!
//! Every random choice in an epoch (batch order, dropout masks) is derived
//! from `(seed, epoch)`, so a resumed run replays exactly what an
//! uninterrupted one would have done.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::embeddings::EmbeddingTable;
use crate::model::{Gradients, ModelConfig, ModelError, Seq2Seq, Session};
use crate::numerics::{Mode, Tensor};
use crate::parallel::{map_ordered, Parallelism};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("gradient for {name} has {found} values, parameter has {expected}")]
    Shape { name: String, expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dev evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed checkpoint: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: checkpoint format {found}, expected {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("checkpoint vocabulary has {found} entries, expected {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Batching {
    /// Shuffle, sort pools of batches by source length, shuffle batch order.
    #[default]
    LengthBucketed,
    /// Plain shuffle, consecutive chunks.
    Shuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Without early stopping the run lasts exactly `max_epochs` and the
    /// learning rate stays constant.
    pub early_stopping: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` or a non-positive value
    /// disables clipping.
    pub clip_norm: Option<f64>,
    pub batching: Batching,
    /// Batches per length-sorted pool.
    pub bucket_pool: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.0002,
            decay_factor: 0.5,
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            early_stopping: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            batching: Batching::LengthBucketed,
            bucket_pool: 20,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.initial_lr > 0.0) {
            return bad("initial_lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must be in (0, 1]");
        }
        if self.patience == 0 || self.bucket_pool == 0 {
            return bad("patience and bucket_pool must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            lr: self.initial_lr,
            initial_lr: self.initial_lr,
            decay_factor: self.decay_factor,
            patience: self.patience,
            best_dev_bleu: None,
            bad_epochs: 0,
            epochs_done: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr: f64,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub best_dev_bleu: Option<f64>,
    /// Consecutive epochs without dev improvement.
    pub bad_epochs: usize,
    pub epochs_done: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Continue,
    Decay,
    Stop,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Continue => "continue",
            Decision::Decay => "decay",
            Decision::Stop => "stop",
        })
    }
}

/// Improvement keeps the learning rate; anything else decays it and counts
/// towards patience.
pub fn end_of_epoch(dev_bleu: f64, schedule: &mut TrainSchedule) -> Decision {
    if schedule.best_dev_bleu.map_or(true, |best| dev_bleu > best) {
        schedule.best_dev_bleu = Some(dev_bleu);
        schedule.bad_epochs = 0;
        return Decision::Continue;
    }
    schedule.lr *= schedule.decay_factor;
    schedule.bad_epochs += 1;
    if schedule.bad_epochs >= schedule.patience {
        Decision::Stop
    } else {
        Decision::Decay
    }
}

/// Adam moments for every dense parameter and every trainable embedding row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub source_rows: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
    pub target_rows: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

fn row_moments(table: &EmbeddingTable) -> BTreeMap<usize, (Vec<f64>, Vec<f64>)> {
    table.trainable_rows().map(|r| (r, (vec![0.0; table.dim()], vec![0.0; table.dim()]))).collect()
}

impl OptimizerState {
    pub fn new(model: &Seq2Seq, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().map(|(_, p)| vec![0.0; p.len()]).collect();
        let (src, tgt) = (model.embeddings(), model.target_embeddings());
        let shared = std::ptr::eq(src, tgt);
        Self {
            step: 0,
            lr: cfg.initial_lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: zeros.clone(),
            v: zeros,
            source_rows: row_moments(src),
            target_rows: if shared { BTreeMap::new() } else { row_moments(tgt) },
        }
    }
}

struct AdamCoeffs {
    lr: f64,
    b1: f64,
    b2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
}

impl AdamCoeffs {
    #[inline]
    fn update(&self, theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]) {
        for i in 0..theta.len() {
            m[i] = self.b1 * m[i] + (1.0 - self.b1) * g[i];
            v[i] = self.b2 * v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mh = m[i] / self.bc1;
            let vh = v[i] / self.bc2;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn update_rows(
    c: &AdamCoeffs,
    table: &mut EmbeddingTable,
    grads: &BTreeMap<usize, Vec<f64>>,
    moments: &mut BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
) -> Result<(), TrainError> {
    let zero = vec![0.0; table.dim()];
    for (&row, (m, v)) in moments.iter_mut() {
        let g = grads.get(&row).unwrap_or(&zero);
        if g.len() != table.dim() {
            return Err(TrainError::Shape { name: format!("embedding row {row}"), expected: table.dim(), found: g.len() });
        }
        c.update(table.row_mut(row), g, m, v);
    }
    // Gradients on rows without state belong to frozen rows and are ignored.
    Ok(())
}

/// One bias-corrected Adam update. Frozen embedding rows are never touched.
pub fn adam_step(model: &mut Seq2Seq, grads: &Gradients, state: &mut OptimizerState) -> Result<(), TrainError> {
    if grads.dense.len() != model.num_params() || state.m.len() != model.num_params() {
        return Err(TrainError::Shape {
            name: "parameter list".into(),
            expected: model.num_params(),
            found: grads.dense.len().min(state.m.len()),
        });
    }
    let names: Vec<String> = model.param_names().to_vec();
    for (i, p) in model.params_mut().iter().enumerate() {
        for found in [grads.dense[i].len(), state.m[i].len(), state.v[i].len()] {
            if found != p.len() {
                return Err(TrainError::Shape { name: names[i].clone(), expected: p.len(), found });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c = AdamCoeffs {
        lr: state.lr,
        b1: state.beta1,
        b2: state.beta2,
        bc1: 1.0 - state.beta1.powi(t),
        bc2: 1.0 - state.beta2.powi(t),
        eps: state.eps,
    };
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        c.update(p.data_mut(), &grads.dense[i], &mut state.m[i], &mut state.v[i]);
    }
    let (src, tgt) = model.embeddings_mut();
    update_rows(&c, src, &grads.source_rows, &mut state.source_rows)?;
    if let Some(tgt) = tgt {
        update_rows(&c, tgt, &grads.target_rows, &mut state.target_rows)?;
    }
    Ok(())
}

/// Source ids and target ids (with BOS and EOS) of one training example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the dropout masks for example `index` in `epoch`.
fn dropout_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    splitmix(splitmix(seed ^ splitmix(epoch as u64)) ^ index as u64)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Example indices grouped into batches for one epoch.
pub fn epoch_batches(data: &[EncodedPair], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    match cfg.batching {
        Batching::Shuffle => order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect(),
        Batching::LengthBucketed => {
            let mut batches = Vec::new();
            for pool in order.chunks(cfg.batch_size * cfg.bucket_pool) {
                let mut pool = pool.to_vec();
                pool.sort_by_key(|&i| data[i].source.len());
                batches.extend(pool.chunks(cfg.batch_size).map(<[usize]>::to_vec));
            }
            batches.shuffle(&mut rng);
            batches
        }
    }
}

/// Summed cross-entropy gradient, summed loss and token count of one pair.
pub fn pair_gradients(model: &Seq2Seq, pair: &EncodedPair, dropout_seed: u64) -> Result<(Gradients, f64, usize), TrainError> {
    let mut s = Session::new(model, Mode::Train, true, dropout_seed);
    let (loss, n) = s.sentence_loss(&pair.source, &pair.target)?;
    s.tape.backward(loss).map_err(ModelError::from)?;
    Ok((s.gradients(), s.tape.value(loss)[0], n))
}

/// Gradient of the token-weighted mean loss of a batch, reduced in example
/// order so the result does not depend on the thread count.
pub fn batch_gradients(
    model: &Seq2Seq,
    data: &[EncodedPair],
    batch: &[usize],
    seed: u64,
    epoch: usize,
    par: Parallelism,
) -> Result<(Gradients, f64, usize), TrainError> {
    let per = map_ordered(batch, par, |&i| pair_gradients(model, &data[i], dropout_seed(seed, epoch, i)));
    let mut total = Gradients::zeros(model);
    let (mut loss, mut tokens) = (0.0, 0);
    for r in per {
        let (g, l, n) = r?;
        total.add_assign(&g);
        loss += l;
        tokens += n;
    }
    total.scale(1.0 / tokens as f64);
    Ok((total, loss, tokens))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Token-weighted mean cross-entropy.
    pub mean_loss: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

/// One pass over `data`: batch, accumulate, clip, update.
pub fn train_epoch(
    model: &mut Seq2Seq,
    data: &[EncodedPair],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    epoch: usize,
    par: Parallelism,
) -> Result<EpochStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let start = Instant::now();
    let (mut loss, mut tokens) = (0.0, 0);
    for batch in epoch_batches(data, cfg, epoch) {
        let (mut g, l, n) = batch_gradients(model, data, &batch, cfg.seed, epoch, par)?;
        if let Some(max) = cfg.clip_norm.filter(|&m| m > 0.0) {
            g.clip(max);
        }
        adam_step(model, &g, state)?;
        loss += l;
        tokens += n;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(EpochStats {
        mean_loss: loss / tokens as f64,
        tokens,
        tokens_per_sec: if secs > 0.0 { tokens as f64 / secs } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub dev_bleu: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub decision: Decision,
    pub tokens_per_sec: f64,
}

impl EpochRecord {
    /// `epoch<TAB>loss<TAB>dev_bleu<TAB>lr<TAB>decision`; a missing dev
    /// score is written as `-`.
    pub fn log_line(&self) -> String {
        let bleu = self.dev_bleu.map_or_else(|| "-".to_string(), |b| format!("{b:.6}"));
        format!("{}\t{:.6}\t{}\t{:e}\t{}", self.epoch, self.loss, bleu, self.lr, self.decision)
    }
}

pub const LOG_HEADER: &str = "epoch\tloss\tdev_bleu\tlr\tdecision";

/// Training state that outlives a single epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerState,
}

impl Trainer {
    pub fn new(model: &Seq2Seq, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self { schedule: config.schedule(), optimizer: OptimizerState::new(model, &config), config })
    }

    pub fn finished(&self) -> bool {
        self.schedule.epochs_done >= self.config.max_epochs
            || (self.config.early_stopping && self.schedule.bad_epochs >= self.schedule.patience)
    }

    /// Trains one epoch, scores the dev set if a scorer is given, and applies
    /// the schedule.
    pub fn run_epoch(
        &mut self,
        model: &mut Seq2Seq,
        data: &[EncodedPair],
        dev: Option<&dyn Fn(&Seq2Seq) -> Result<f64, TrainError>>,
        par: Parallelism,
    ) -> Result<EpochRecord, TrainError> {
        let epoch = self.schedule.epochs_done;
        let lr = self.schedule.lr;
        self.optimizer.lr = lr;
        let stats = train_epoch(model, data, &self.config, &mut self.optimizer, epoch, par)?;
        self.schedule.epochs_done += 1;
        let dev_bleu = dev.map(|f| f(model)).transpose()?;
        let mut decision = match dev_bleu {
            Some(b) if self.config.early_stopping => end_of_epoch(b, &mut self.schedule),
            _ => Decision::Continue,
        };
        if self.schedule.epochs_done >= self.config.max_epochs {
            decision = Decision::Stop;
        }
        Ok(EpochRecord { epoch: epoch + 1, loss: stats.mean_loss, dev_bleu, lr, decision, tokens_per_sec: stats.tokens_per_sec })
    }

    /// Runs epochs until the schedule stops; `after_epoch` sees each record
    /// and the current model.
    pub fn fit(
        &mut self,
        model: &mut Seq2Seq,
        data: &[EncodedPair],
        dev: Option<&dyn Fn(&Seq2Seq) -> Result<f64, TrainError>>,
        par: Parallelism,
        mut after_epoch: impl FnMut(&EpochRecord, &Seq2Seq, &Trainer) -> Result<(), TrainError>,
    ) -> Result<Vec<EpochRecord>, TrainError> {
        let mut records = Vec::new();
        while !self.finished() {
            let r = self.run_epoch(model, data, dev, par)?;
            after_epoch(&r, model, self)?;
            let stop = r.decision == Decision::Stop;
            records.push(r);
            if stop {
                break;
            }
        }
        Ok(records)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub params: Vec<(String, Tensor<f64>)>,
    pub embeddings: EmbeddingTable,
    pub target_embeddings: Option<EmbeddingTable>,
    pub train_config: TrainConfig,
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerState,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn capture(model: &Seq2Seq, trainer: &Trainer, vocab: &Vocabulary) -> Self {
        let (src, tgt) = (model.embeddings(), model.target_embeddings());
        Self {
            format_version: CHECKPOINT_VERSION,
            model_config: model.config().clone(),
            params: model.params().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            embeddings: src.clone(),
            target_embeddings: (!std::ptr::eq(src, tgt)).then(|| tgt.clone()),
            train_config: trainer.config.clone(),
            schedule: trainer.schedule.clone(),
            optimizer: trainer.optimizer.clone(),
            vocab: vocab.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let f = fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self).map_err(|source| CheckpointError::Json { path: path.to_path_buf(), source })?;
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)
    }

    /// Reads a checkpoint; `expected_vocab` is the size the caller's
    /// vocabulary requires, if any.
    pub fn load(path: &Path, expected_vocab: Option<usize>) -> Result<Self, CheckpointError> {
        let f = fs::File::open(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        let mut ck: Checkpoint = serde_json::from_reader(BufReader::new(f))
            .map_err(|source| CheckpointError::Json { path: path.to_path_buf(), source })?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { path: path.to_path_buf(), found: ck.format_version, expected: CHECKPOINT_VERSION });
        }
        ck.vocab.rebuild_index();
        if let Some(expected) = expected_vocab {
            if expected != ck.vocab.len() || expected != ck.model_config.vocab_size {
                return Err(CheckpointError::VocabMismatch { expected, found: ck.model_config.vocab_size });
            }
        }
        Ok(ck)
    }

    /// Rebuilds the model and trainer exactly as captured.
    pub fn restore(self) -> Result<(Seq2Seq, Trainer, Vocabulary), CheckpointError> {
        let bad = |m: String| CheckpointError::Inconsistent(m);
        if self.vocab.len() != self.model_config.vocab_size {
            return Err(CheckpointError::VocabMismatch { expected: self.model_config.vocab_size, found: self.vocab.len() });
        }
        let mut model = Seq2Seq::new(self.model_config, self.embeddings).map_err(|e| bad(e.to_string()))?;
        if model.num_params() != self.params.len() {
            return Err(bad(format!("{} tensors stored, model has {}", self.params.len(), model.num_params())));
        }
        for (name, t) in self.params {
            let slot = model.param_by_name_mut(&name).map_err(|e| bad(e.to_string()))?;
            if slot.shape() != t.shape() {
                return Err(bad(format!("{name}: stored shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        match (model.embeddings_mut().1, self.target_embeddings) {
            (Some(slot), Some(t)) => *slot = t,
            (None, None) => {}
            _ => return Err(bad("target embedding table does not match share_embeddings".into())),
        }
        let trainer = Trainer { config: self.train_config, schedule: self.schedule, optimizer: self.optimizer };
        Ok((model, trainer, self.vocab))
    }
}
