//! Beam search, plus greedy and exhaustive decoders used as references.
//!
//! Scores are summed log-probabilities. Candidates are ranked by score and
//! then by the lexicographically smaller token-id sequence, so every decoder
//! here is deterministic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BOS_ID, EOS_ID, PAD_ID};
use crate::model::{DecoderState, Encoded, ModelError, Seq2Seq, Session};
use crate::numerics::Mode;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("empty source sequence")]
    EmptySource,
    #[error("exhaustive search over {vocab}^{max_len} sequences exceeds the limit of {limit}")]
    TooLarge { vocab: usize, max_len: usize, limit: u64 },
    #[error("invalid search setting: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Incremental next-token distribution.
///
/// A state carries everything needed to score the next token, including the
/// token that was just emitted.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> usize;

    /// Tokens that may never be emitted.
    fn banned(&self, _id: usize) -> bool {
        false
    }

    fn initial(&mut self) -> Result<Self::State, SearchError>;

    /// Log-probabilities of every next token, and the state after consuming
    /// the pending token (to be completed by [`StepModel::with_token`]).
    fn step(&mut self, state: &Self::State) -> Result<(Vec<f64>, Self::State), SearchError>;

    fn with_token(&self, state: &Self::State, token: usize) -> Self::State;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthNorm {
    #[default]
    None,
    ByLength,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub length_norm: LengthNorm,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { beam_size: 5, max_len: 70, length_norm: LengthNorm::None }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted ids; ends with EOS once finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    pub fn score(&self, norm: LengthNorm) -> f64 {
        match norm {
            LengthNorm::None => self.log_prob,
            LengthNorm::ByLength => self.log_prob / self.tokens.len().max(1) as f64,
        }
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((_, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

fn sort_finished<S>(finished: &mut [Hypothesis<S>], norm: LengthNorm) {
    finished.sort_by(|a, b| rank(a.score(norm), &a.tokens, b.score(norm), &b.tokens));
}

/// Beam search returning all finished hypotheses, best first.
///
/// Hypotheses still alive after `max_len` tokens are finished by appending
/// EOS without scoring it.
pub fn beam_search_nbest<M: StepModel>(
    model: &mut M,
    cfg: &SearchConfig,
) -> Result<Vec<Hypothesis<M::State>>, SearchError> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(SearchError::Config("beam_size and max_len must be positive".into()));
    }
    let eos = model.eos();
    let vocab = model.vocab_size();
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, state: model.initial()?, finished: false }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();

    for step in 1..=cfg.max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut candidates: Vec<(usize, usize, f64)> = Vec::with_capacity(live.len() * vocab);
        for (h, hyp) in live.iter().enumerate() {
            let (lp, next) = model.step(&hyp.state)?;
            for (tok, &l) in lp.iter().enumerate() {
                if !model.banned(tok) {
                    candidates.push((h, tok, hyp.log_prob + l));
                }
            }
            expanded.push(next);
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| live[a.0].tokens.iter().chain([&a.1]).cmp(live[b.0].tokens.iter().chain([&b.1])))
        });
        candidates.truncate(cfg.beam_size);

        let mut next_live = Vec::with_capacity(cfg.beam_size);
        for (h, tok, log_prob) in candidates {
            let mut tokens = live[h].tokens.clone();
            tokens.push(tok);
            if tok == eos {
                finished.push(Hypothesis { tokens, log_prob, state: expanded[h].clone(), finished: true });
            } else if step == cfg.max_len {
                tokens.push(eos);
                finished.push(Hypothesis { tokens, log_prob, state: model.with_token(&expanded[h], tok), finished: true });
            } else {
                next_live.push(Hypothesis { tokens, log_prob, state: model.with_token(&expanded[h], tok), finished: false });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        // Log-probabilities only decrease, so no live hypothesis can overtake
        // a strictly better finished one.
        if cfg.length_norm == LengthNorm::None {
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done > best_live {
                break;
            }
        }
    }
    sort_finished(&mut finished, cfg.length_norm);
    Ok(finished)
}

pub fn beam_search<M: StepModel>(model: &mut M, cfg: &SearchConfig) -> Result<Hypothesis<M::State>, SearchError> {
    beam_search_nbest(model, cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| SearchError::Config("search produced no hypothesis".into()))
}

/// Argmax decoding; ties go to the lower id.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Hypothesis<M::State>, SearchError> {
    let eos = model.eos();
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, state: model.initial()?, finished: false };
    for step in 1..=max_len {
        let (lp, next) = model.step(&hyp.state)?;
        let (tok, l) = lp
            .iter()
            .enumerate()
            .filter(|(t, _)| !model.banned(*t))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (t, &l)| if l > best.1 { (t, l) } else { best });
        hyp.tokens.push(tok);
        hyp.log_prob += l;
        if tok == eos {
            hyp.state = next;
            hyp.finished = true;
            return Ok(hyp);
        }
        hyp.state = model.with_token(&next, tok);
        if step == max_len {
            hyp.tokens.push(eos);
            hyp.finished = true;
        }
    }
    Ok(hyp)
}

pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;

/// Enumerates every EOS-terminated sequence of at most `max_len` emitted
/// tokens and returns the best one.
pub fn exhaustive_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Hypothesis<M::State>, SearchError> {
    let vocab = model.vocab_size();
    let too_large = SearchError::TooLarge { vocab, max_len, limit: EXHAUSTIVE_LIMIT };
    let total = (vocab as u64).checked_pow(max_len as u32).ok_or(too_large)?;
    if total > EXHAUSTIVE_LIMIT {
        return Err(SearchError::TooLarge { vocab, max_len, limit: EXHAUSTIVE_LIMIT });
    }
    if max_len == 0 {
        return Err(SearchError::Config("max_len must be positive".into()));
    }
    let root = Hypothesis { tokens: Vec::new(), log_prob: 0.0, state: model.initial()?, finished: false };
    let mut best: Option<Hypothesis<M::State>> = None;
    let mut stack = vec![root];
    while let Some(hyp) = stack.pop() {
        let (lp, next) = model.step(&hyp.state)?;
        for (tok, &l) in lp.iter().enumerate() {
            if model.banned(tok) {
                continue;
            }
            let mut tokens = hyp.tokens.clone();
            tokens.push(tok);
            let log_prob = hyp.log_prob + l;
            let done = if tok == model.eos() {
                Some(Hypothesis { tokens, log_prob, state: next.clone(), finished: true })
            } else if tokens.len() == max_len {
                tokens.push(model.eos());
                Some(Hypothesis { tokens, log_prob, state: model.with_token(&next, tok), finished: true })
            } else {
                stack.push(Hypothesis { tokens, log_prob, state: model.with_token(&next, tok), finished: false });
                None
            };
            if let Some(d) = done {
                let better = match &best {
                    None => true,
                    Some(b) => rank(d.log_prob, &d.tokens, b.log_prob, &b.tokens) == Ordering::Less,
                };
                if better {
                    best = Some(d);
                }
            }
        }
    }
    best.ok_or_else(|| SearchError::Config("no sequence enumerated".into()))
}

/// Decoder state of the encoder-decoder plus the token it consumes next.
#[derive(Clone, Copy, Debug)]
pub struct Seq2SeqState {
    pub decoder: DecoderState,
    pub pending: usize,
}

/// Inference-mode [`StepModel`] over one encoded source sentence.
pub struct Seq2SeqStepper<'a> {
    session: Session<'a>,
    encoded: Encoded,
}

impl<'a> Seq2SeqStepper<'a> {
    pub fn new(model: &'a Seq2Seq, source: &[usize]) -> Result<Self, SearchError> {
        if source.is_empty() {
            return Err(SearchError::EmptySource);
        }
        let mut session = Session::new(model, Mode::Infer, false, 0);
        let encoded = session.encode(source)?;
        Ok(Self { session, encoded })
    }
}

impl StepModel for Seq2SeqStepper<'_> {
    type State = Seq2SeqState;

    fn vocab_size(&self) -> usize {
        self.session.model().vocab_size()
    }

    fn eos(&self) -> usize {
        EOS_ID
    }

    fn banned(&self, id: usize) -> bool {
        id == PAD_ID || id == BOS_ID
    }

    fn initial(&mut self) -> Result<Seq2SeqState, SearchError> {
        Ok(Seq2SeqState { decoder: self.encoded.initial, pending: BOS_ID })
    }

    fn step(&mut self, state: &Seq2SeqState) -> Result<(Vec<f64>, Seq2SeqState), SearchError> {
        let (logits, dec) = self.session.decode_step(state.pending, state.decoder, &self.encoded)?;
        let lp = self.session.tape.log_softmax(logits, 0).map_err(ModelError::from)?;
        Ok((self.session.tape.value(lp).to_vec(), Seq2SeqState { decoder: dec, pending: EOS_ID }))
    }

    fn with_token(&self, state: &Seq2SeqState, token: usize) -> Seq2SeqState {
        Seq2SeqState { decoder: state.decoder, pending: token }
    }
}

/// A decoded sentence detached from the decoder graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// Beam search for one source sentence; returns the n-best list, best first.
pub fn translate_nbest(model: &Seq2Seq, source: &[usize], cfg: &SearchConfig) -> Result<Vec<Translation>, SearchError> {
    let mut stepper = Seq2SeqStepper::new(model, source)?;
    Ok(beam_search_nbest(&mut stepper, cfg)?
        .into_iter()
        .map(|h| Translation { tokens: h.output().to_vec(), log_prob: h.log_prob })
        .collect())
}

pub fn translate(model: &Seq2Seq, source: &[usize], cfg: &SearchConfig) -> Result<Translation, SearchError> {
    translate_nbest(model, source, cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| SearchError::Config("search produced no hypothesis".into()))
}
