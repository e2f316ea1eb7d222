//! Attentional encoder-decoder.
//!
//! Encoder: stacked bidirectional LSTMs over frozen cross-lingual
//! embeddings. Decoder: one LSTM layer with additive attention and an
//! untied softmax output layer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingTable;
use crate::numerics::{Mode, NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("target must hold at least BOS and EOS, got {0} ids")]
    ShortTarget(usize),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("no parameter named {0:?}")]
    UnknownParam(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Bidirectional encoder layers.
    pub encoder_layers: usize,
    pub attention_dim: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
    pub seed: u64,
    pub init_range: f64,
    pub forget_bias: f64,
    /// One table for encoder and decoder lookups; otherwise the decoder gets
    /// its own copy with the same frozen rows.
    pub share_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            hidden_dim: 256,
            encoder_layers: 2,
            attention_dim: 256,
            dropout_p: 0.1,
            vocab_size: 0,
            seed: 1,
            init_range: 0.08,
            forget_bias: 1.0,
            share_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("attention_dim", self.attention_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights of one LSTM: `w: [4h × (input + h)]`, `b: [4h]`, gates ordered
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoder: Vec<[LstmParams; 2]>,
    bridge_h: (ParamId, ParamId),
    bridge_c: (ParamId, ParamId),
    decoder: LstmParams,
    att_enc: ParamId,
    att_dec: ParamId,
    att_v: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f64>>,
    layout: Layout,
    embeddings: EmbeddingTable,
    target_embeddings: Option<EmbeddingTable>,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor<f64>>,
    rng: ChaCha8Rng,
    range: f64,
}

impl Builder {
    fn weight(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-self.range..=self.range)).collect();
        self.push(name, Tensor::new(shape, data).expect("positive dims"))
    }

    fn bias(&mut self, name: String, len: usize) -> ParamId {
        self.push(name, Tensor::zeros(&[len]).expect("positive dims"))
    }

    fn push(&mut self, name: String, t: Tensor<f64>) -> ParamId {
        self.names.push(name);
        self.params.push(t);
        ParamId(self.params.len() - 1)
    }

    fn lstm(&mut self, prefix: &str, input_dim: usize, hidden_dim: usize, forget_bias: f64) -> LstmParams {
        let w = self.weight(format!("{prefix}.w"), &[4 * hidden_dim, input_dim + hidden_dim]);
        let b = self.bias(format!("{prefix}.b"), 4 * hidden_dim);
        self.params[b.0].data_mut()[hidden_dim..2 * hidden_dim].iter_mut().for_each(|v| *v = forget_bias);
        LstmParams { w, b, input_dim, hidden_dim }
    }
}

impl Seq2Seq {
    /// Builds a model with seeded uniform weights, zero biases and a
    /// positive forget-gate bias.
    pub fn new(config: ModelConfig, embeddings: EmbeddingTable) -> Result<Self, ModelError> {
        config.validate()?;
        if embeddings.rows() != config.vocab_size || embeddings.dim() != config.embed_dim {
            return Err(ModelError::Config(format!(
                "embedding table is {}x{}, config expects {}x{}",
                embeddings.rows(),
                embeddings.dim(),
                config.vocab_size,
                config.embed_dim
            )));
        }
        let h = config.hidden_dim;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            range: config.init_range,
        };
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let input = if l == 0 { config.embed_dim } else { 2 * h };
            encoder.push([
                b.lstm(&format!("encoder.{l}.fwd"), input, h, config.forget_bias),
                b.lstm(&format!("encoder.{l}.bwd"), input, h, config.forget_bias),
            ]);
        }
        let bridge_h = (b.weight("bridge.h.w".into(), &[h, 2 * h]), b.bias("bridge.h.b".into(), h));
        let bridge_c = (b.weight("bridge.c.w".into(), &[h, 2 * h]), b.bias("bridge.c.b".into(), h));
        let decoder = b.lstm("decoder", config.embed_dim + 2 * h, h, config.forget_bias);
        let att_enc = b.weight("attention.enc".into(), &[2 * h, config.attention_dim]);
        let att_dec = b.weight("attention.dec".into(), &[config.attention_dim, h]);
        let att_v = b.weight("attention.v".into(), &[config.attention_dim]);
        let out_w = b.weight("output.w".into(), &[config.vocab_size, 3 * h]);
        let out_b = b.bias("output.b".into(), config.vocab_size);
        let layout = Layout { encoder, bridge_h, bridge_c, decoder, att_enc, att_dec, att_v, out_w, out_b };
        let target_embeddings = (!config.share_embeddings).then(|| embeddings.clone());
        Ok(Self { config, names: b.names, params: b.params, layout, embeddings, target_embeddings })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn target_embeddings(&self) -> &EmbeddingTable {
        self.target_embeddings.as_ref().unwrap_or(&self.embeddings)
    }

    pub fn embeddings_mut(&mut self) -> (&mut EmbeddingTable, Option<&mut EmbeddingTable>) {
        (&mut self.embeddings, self.target_embeddings.as_mut())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, id: ParamId) -> &Tensor<f64> {
        &self.params[id.0]
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.params
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<f64>, ModelError> {
        let idx = self.names.iter().position(|n| n == name).ok_or_else(|| ModelError::UnknownParam(name.into()))?;
        Ok(&mut self.params[idx])
    }

    /// Sets every dense parameter (not the embeddings) to `value`.
    pub fn fill_params(&mut self, value: f64) {
        for p in &mut self.params {
            p.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn encoder_layer(&self, layer: usize, backward: bool) -> LstmParams {
        self.layout.encoder[layer][backward as usize]
    }

    pub fn decoder_lstm(&self) -> LstmParams {
        self.layout.decoder
    }

    /// Teacher-forced loss of one pair without dropout.
    pub fn forward_loss(&self, source: &[usize], target: &[usize]) -> Result<f64, ModelError> {
        let mut s = Session::new(self, Mode::Infer, false, 0);
        let loss = s.forward_loss(source, target)?;
        Ok(s.tape.value(loss)[0])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[T × 2h]` top-layer states.
    pub annotations: Var,
    /// `annotations · W_enc`, reused at every decoder step.
    pub projected: Var,
    pub len: usize,
    pub initial: DecoderState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedSide {
    Source,
    Target,
}

/// Gradient of a loss with respect to every dense parameter and the
/// trainable embedding rows it touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub dense: Vec<Vec<f64>>,
    pub source_rows: BTreeMap<usize, Vec<f64>>,
    pub target_rows: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn zeros(model: &Seq2Seq) -> Self {
        Self {
            dense: model.params.iter().map(|p| vec![0.0; p.len()]).collect(),
            source_rows: BTreeMap::new(),
            target_rows: BTreeMap::new(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (mine, theirs) in [(&mut self.source_rows, &other.source_rows), (&mut self.target_rows, &other.target_rows)] {
            for (id, g) in theirs {
                let row = mine.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
                row.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.dense
            .iter_mut()
            .flatten()
            .chain(self.source_rows.values_mut().flatten())
            .chain(self.target_rows.values_mut().flatten())
    }

    pub fn scale(&mut self, c: f64) {
        self.values_mut().for_each(|v| *v *= c);
    }

    pub fn global_norm(&self) -> f64 {
        self.dense
            .iter()
            .flatten()
            .chain(self.source_rows.values().flatten())
            .chain(self.target_rows.values().flatten())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales to `max_norm` when the global norm exceeds it; returns the
    /// norm before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// One forward computation over a model: a tape plus the leaves bound to
/// the model's parameters.
///
/// Dropout masks are drawn from a generator seeded at construction, in the
/// order dropout sites are reached.
pub struct Session<'a> {
    pub tape: Tape<'a>,
    model: &'a Seq2Seq,
    dense: Vec<Var>,
    source_rows: BTreeMap<usize, Var>,
    target_rows: BTreeMap<usize, Var>,
    mode: Mode,
    track: bool,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a Seq2Seq, mode: Mode, track_grads: bool, dropout_seed: u64) -> Self {
        let mut tape = Tape::new();
        let dense = model
            .params
            .iter()
            .map(|p| tape.leaf_slice(p.data(), p.shape(), track_grads).expect("valid param shape"))
            .collect();
        Self {
            tape,
            model,
            dense,
            source_rows: BTreeMap::new(),
            target_rows: BTreeMap::new(),
            mode,
            track: track_grads,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn model(&self) -> &'a Seq2Seq {
        self.model
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.dense[id.0]
    }

    pub fn embed(&mut self, side: EmbedSide, id: usize) -> Result<Var, ModelError> {
        let vocab = self.model.vocab_size();
        if id >= vocab {
            return Err(ModelError::IdOutOfRange { id, vocab });
        }
        let (table, cache) = match side {
            EmbedSide::Target if self.model.target_embeddings.is_some() => {
                (self.model.target_embeddings.as_ref().unwrap(), &mut self.target_rows)
            }
            _ => (&self.model.embeddings, &mut self.source_rows),
        };
        if let Some(&v) = cache.get(&id) {
            return Ok(v);
        }
        let rg = self.track && table.is_trainable(id);
        let v = self.tape.leaf_slice(table.row(id), &[table.dim()], rg)?;
        cache.insert(id, v);
        Ok(v)
    }

    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let p = self.model.config.dropout_p;
        if self.mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let n = self.tape.value(x).len();
        let mask = (0..n).map(|_| self.rng.gen::<f64>() >= p).collect();
        Ok(self.tape.dropout(x, p, mask, self.mode)?)
    }

    /// One LSTM recurrence step.
    pub fn lstm_cell_step(&mut self, p: &LstmParams, x: Var, h: Var, c: Var) -> Result<(Var, Var), ModelError> {
        let hd = p.hidden_dim;
        let xh = self.tape.concat(&[x, h])?;
        let gates = self.tape.affine(self.dense[p.w.0], xh, self.dense[p.b.0])?;
        let i = self.tape.slice(gates, 0, hd)?;
        let f = self.tape.slice(gates, hd, hd)?;
        let g = self.tape.slice(gates, 2 * hd, hd)?;
        let o = self.tape.slice(gates, 3 * hd, hd)?;
        let i = self.tape.sigmoid(i)?;
        let f = self.tape.sigmoid(f)?;
        let g = self.tape.tanh(g)?;
        let o = self.tape.sigmoid(o)?;
        let fc = self.tape.mul(f, c)?;
        let ig = self.tape.mul(i, g)?;
        let c_new = self.tape.add(fc, ig)?;
        let tc = self.tape.tanh(c_new)?;
        let h_new = self.tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    fn zeros(&mut self, n: usize) -> Var {
        self.tape.constant(Tensor::zeros(&[n]).expect("positive length"))
    }

    /// Runs one LSTM over `xs` in the given direction. Returns per-position
    /// states in input order and the final `(h, c)`.
    fn run_lstm(&mut self, p: &LstmParams, xs: &[Var], reverse: bool) -> Result<(Vec<Var>, Var, Var), ModelError> {
        let mut h = self.zeros(p.hidden_dim);
        let mut c = self.zeros(p.hidden_dim);
        let mut out = vec![h; xs.len()];
        let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
        for t in order {
            (h, c) = self.lstm_cell_step(p, xs[t], h, c)?;
            out[t] = h;
        }
        Ok((out, h, c))
    }

    pub fn encode(&mut self, ids: &[usize]) -> Result<Encoded, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let model = self.model;
        let mut xs = ids.iter().map(|&id| self.embed(EmbedSide::Source, id)).collect::<Result<Vec<_>, _>>()?;
        let layers = model.layout.encoder.len();
        let (mut hf, mut cf, mut hb, mut cb) = (xs[0], xs[0], xs[0], xs[0]);
        for (l, [fwd, bwd]) in model.layout.encoder.iter().enumerate() {
            let (fs, hf_last, cf_last) = self.run_lstm(fwd, &xs, false)?;
            let (bs, hb_last, cb_last) = self.run_lstm(bwd, &xs, true)?;
            (hf, cf, hb, cb) = (hf_last, cf_last, hb_last, cb_last);
            xs = fs.iter().zip(&bs).map(|(&f, &b)| self.tape.concat(&[f, b])).collect::<Result<_, _>>()?;
            if l + 1 < layers {
                xs = xs.into_iter().map(|x| self.dropout(x)).collect::<Result<_, _>>()?;
            }
        }
        let h_cat = self.tape.concat(&[hf, hb])?;
        let c_cat = self.tape.concat(&[cf, cb])?;
        let (bhw, bhb) = model.layout.bridge_h;
        let (bcw, bcb) = model.layout.bridge_c;
        let h0 = self.tape.affine(self.dense[bhw.0], h_cat, self.dense[bhb.0])?;
        let h0 = self.tape.tanh(h0)?;
        let c0 = self.tape.affine(self.dense[bcw.0], c_cat, self.dense[bcb.0])?;
        let c0 = self.tape.tanh(c0)?;
        let annotations = self.tape.stack(&xs)?;
        let projected = self.tape.matmul(annotations, self.dense[model.layout.att_enc.0])?;
        Ok(Encoded { annotations, projected, len: ids.len(), initial: DecoderState { h: h0, c: c0 } })
    }

    /// Additive attention: `score_t = vᵀ tanh(W_enc a_t + W_dec s)`.
    pub fn attention(&mut self, dec_h: Var, enc: &Encoded) -> Result<(Var, Var), ModelError> {
        let l = &self.model.layout;
        let q = self.tape.matvec(self.dense[l.att_dec.0], dec_h)?;
        let pre = self.tape.add_row(enc.projected, q)?;
        let z = self.tape.tanh(pre)?;
        let scores = self.tape.matvec(z, self.dense[l.att_v.0])?;
        let weights = self.tape.softmax(scores, 0)?;
        let context = self.tape.matvec_t(enc.annotations, weights)?;
        Ok((context, weights))
    }

    /// Logits for the token following `prev_id`, and the next decoder state.
    pub fn decode_step(&mut self, prev_id: usize, state: DecoderState, enc: &Encoded) -> Result<(Var, DecoderState), ModelError> {
        let e = self.embed(EmbedSide::Target, prev_id)?;
        let (context, _) = self.attention(state.h, enc)?;
        let x = self.tape.concat(&[e, context])?;
        let dec = self.model.layout.decoder;
        let (h, c) = self.lstm_cell_step(&dec, x, state.h, state.c)?;
        let o = self.tape.concat(&[h, context])?;
        let o = self.dropout(o)?;
        let l = &self.model.layout;
        let logits = self.tape.affine(self.dense[l.out_w.0], o, self.dense[l.out_b.0])?;
        Ok((logits, DecoderState { h, c }))
    }

    /// Teacher-forced summed cross-entropy over the target positions after
    /// BOS, and the number of predicted tokens.
    pub fn sentence_loss(&mut self, source: &[usize], target: &[usize]) -> Result<(Var, usize), ModelError> {
        if target.len() < 2 {
            return Err(ModelError::ShortTarget(target.len()));
        }
        let enc = self.encode(source)?;
        let mut state = enc.initial;
        let mut losses = Vec::with_capacity(target.len() - 1);
        for w in target.windows(2) {
            let (logits, next) = self.decode_step(w[0], state, &enc)?;
            if w[1] >= self.model.vocab_size() {
                return Err(ModelError::IdOutOfRange { id: w[1], vocab: self.model.vocab_size() });
            }
            losses.push(self.tape.cross_entropy(logits, w[1])?);
            state = next;
        }
        let all = self.tape.concat(&losses)?;
        Ok((self.tape.sum(all)?, losses.len()))
    }

    /// Mean per-token loss.
    pub fn forward_loss(&mut self, source: &[usize], target: &[usize]) -> Result<Var, ModelError> {
        let (sum, n) = self.sentence_loss(source, target)?;
        Ok(self.tape.scale(sum, 1.0 / n as f64)?)
    }

    /// Collects leaf gradients after [`Tape::backward`].
    pub fn gradients(&self) -> Gradients {
        let dense = self
            .dense
            .iter()
            .zip(&self.model.params)
            .map(|(&v, p)| self.tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        let rows = |cache: &BTreeMap<usize, Var>| {
            cache.iter().filter_map(|(&id, &v)| self.tape.grad(v).map(|g| (id, g.to_vec()))).collect()
        };
        Gradients { dense, source_rows: rows(&self.source_rows), target_rows: rows(&self.target_rows) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, ParallelCorpus, VocabMode};
    use crate::embeddings::random_table;

    pub(crate) fn tiny_model(vocab_extra: usize, embed: usize, hidden: usize) -> Seq2Seq {
        let c = ParallelCorpus::new(crate::corpus::Split::Train);
        let extra = crate::corpus::ExtraLexicon {
            language: "en".into(),
            tokens: (0..vocab_extra).map(|i| format!("w{i}")).collect(),
        };
        let v = build_vocabulary(&[&c], &["en".into()], VocabMode::SharedForm, &[extra]);
        let table = random_table(&v, embed, 3, 0.5, false);
        let cfg = ModelConfig {
            embed_dim: embed,
            hidden_dim: hidden,
            attention_dim: hidden,
            vocab_size: v.len(),
            dropout_p: 0.0,
            ..Default::default()
        };
        Seq2Seq::new(cfg, table).unwrap()
    }

    #[test]
    fn lstm_zero_weights_zero_state() {
        let mut m = tiny_model(3, 4, 3);
        m.fill_params(0.0);
        let mut s = Session::new(&m, Mode::Infer, false, 0);
        let p = m.encoder_layer(0, false);
        let x = s.tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let z = s.zeros(3);
        let (h, c) = s.lstm_cell_step(&p, x, z, z).unwrap();
        assert_eq!(s.tape.value(h), &[0.0; 3]);
        assert_eq!(s.tape.value(c), &[0.0; 3]);
    }

    #[test]
    fn lstm_zero_weights_halve_cell() {
        let mut m = tiny_model(3, 4, 3);
        m.fill_params(0.0);
        let mut s = Session::new(&m, Mode::Infer, false, 0);
        let p = m.encoder_layer(0, false);
        let x = s.tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let h = s.zeros(3);
        let c = s.tape.constant(Tensor::vector(vec![2.0, -1.0, 0.4]).unwrap());
        let (h2, c2) = s.lstm_cell_step(&p, x, h, c).unwrap();
        for (k, &cp) in [2.0, -1.0, 0.4].iter().enumerate() {
            assert!((s.tape.value(c2)[k] - 0.5 * cp).abs() < 1e-15);
            assert!((s.tape.value(h2)[k] - 0.5 * (0.5 * cp as f64).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_shapes_and_zero_case() {
        let mut m = tiny_model(5, 4, 3);
        {
            let mut s = Session::new(&m, Mode::Infer, false, 0);
            for len in [1, 2, 7] {
                let ids: Vec<usize> = (0..len).map(|i| 5 + i % 5).collect();
                let enc = s.encode(&ids).unwrap();
                assert_eq!(s.tape.shape(enc.annotations), &[len, 6]);
            }
            assert!(matches!(s.encode(&[]), Err(ModelError::EmptySequence)));
        }
        m.fill_params(0.0);
        let mut s = Session::new(&m, Mode::Infer, false, 0);
        let enc = s.encode(&[5, 6, 7]).unwrap();
        assert!(s.tape.value(enc.annotations).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_bidirectional() {
        let m = tiny_model(5, 4, 3);
        let first = |ids: &[usize]| {
            let mut s = Session::new(&m, Mode::Infer, false, 0);
            let enc = s.encode(ids).unwrap();
            s.tape.value(enc.annotations)[..6].to_vec()
        };
        assert_ne!(first(&[5, 6, 7]), first(&[5, 6, 8]));
    }

    #[test]
    fn attention_cases() {
        let m = tiny_model(5, 4, 3);
        let mut s = Session::new(&m, Mode::Infer, false, 0);
        let enc = s.encode(&[5]).unwrap();
        let (ctx, w) = s.attention(enc.initial.h, &enc).unwrap();
        assert_eq!(s.tape.value(w), &[1.0]);
        assert_eq!(s.tape.value(ctx), s.tape.value(enc.annotations));

        // identical annotations: repeat the same token under a zero recurrence
        let mut z = tiny_model(5, 4, 3);
        for name in ["encoder.1.fwd.w", "encoder.1.bwd.w"] {
            let w = z.param_by_name_mut(name).unwrap();
            let cols = w.shape()[1];
            for r in 0..w.shape()[0] {
                w.row_mut(r)[..cols].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut s = Session::new(&z, Mode::Infer, false, 0);
        let enc = s.encode(&[5, 6, 7, 8]).unwrap();
        let (_, w) = s.attention(enc.initial.h, &enc).unwrap();
        for &x in s.tape.value(w) {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_step_shapes_and_uniform_zero_case() {
        let mut m = tiny_model(6, 4, 3);
        let n = m.vocab_size();
        {
            let mut s = Session::new(&m, Mode::Infer, false, 0);
            let enc = s.encode(&[5, 6]).unwrap();
            let (logits, _) = s.decode_step(2, enc.initial, &enc).unwrap();
            assert_eq!(s.tape.value(logits).len(), n);
            assert!(matches!(s.decode_step(n, enc.initial, &enc), Err(ModelError::IdOutOfRange { .. })));
        }
        m.fill_params(0.0);
        let mut s = Session::new(&m, Mode::Infer, false, 0);
        let enc = s.encode(&[5, 6]).unwrap();
        let (logits, _) = s.decode_step(2, enc.initial, &enc).unwrap();
        let p = s.tape.softmax(logits, 0).unwrap();
        for &x in s.tape.value(p) {
            assert!((x - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_loss_is_log_vocab() {
        let mut m = tiny_model(6, 4, 3);
        m.fill_params(0.0);
        let n = m.vocab_size() as f64;
        let loss = m.forward_loss(&[4, 7, 8], &[2, 9, 10, 6, 3]).unwrap();
        assert!((loss - n.ln()).abs() < 1e-12);
        assert!(matches!(m.forward_loss(&[4], &[2]), Err(ModelError::ShortTarget(1))));
    }

    #[test]
    fn loss_is_deterministic_and_non_negative() {
        let m = tiny_model(6, 4, 3);
        let a = m.forward_loss(&[4, 7, 8], &[2, 9, 3]).unwrap();
        let b = m.forward_loss(&[4, 7, 8], &[2, 9, 3]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a >= 0.0);
    }

    #[test]
    fn dropout_changes_train_loss_only() {
        let mut m = tiny_model(6, 4, 8);
        m.config.dropout_p = 0.5;
        let infer = m.forward_loss(&[4, 7, 8], &[2, 9, 3]).unwrap();
        let mut s = Session::new(&m, Mode::Train, true, 9);
        let l = s.forward_loss(&[4, 7, 8], &[2, 9, 3]).unwrap();
        assert_ne!(s.tape.value(l)[0], infer);
        let mut s2 = Session::new(&m, Mode::Train, true, 9);
        let l2 = s2.forward_loss(&[4, 7, 8], &[2, 9, 3]).unwrap();
        assert_eq!(s.tape.value(l)[0].to_bits(), s2.tape.value(l2)[0].to_bits());
    }

    #[test]
    fn frozen_rows_get_no_gradient() {
        let c = ParallelCorpus::new(crate::corpus::Split::Train);
        let extra = crate::corpus::ExtraLexicon { language: "en".into(), tokens: vec!["a".into(), "b".into()] };
        let v = build_vocabulary(&[&c], &["en".into()], VocabMode::SharedForm, &[extra]);
        let file = crate::embeddings::WordVectorFile {
            language: "en".into(),
            dim: 2,
            entries: vec![("a".into(), vec![0.3, -0.2])],
            warnings: vec![],
        };
        let table = crate::embeddings::build_embedding_table(&[file], &v, 1, 0.1).unwrap();
        let cfg = ModelConfig { embed_dim: 2, hidden_dim: 3, attention_dim: 3, vocab_size: v.len(), dropout_p: 0.0, ..Default::default() };
        let m = Seq2Seq::new(cfg, table).unwrap();
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        let mut s = Session::new(&m, Mode::Train, true, 0);
        let loss = s.forward_loss(&[4, a, b], &[2, a, b, 3]).unwrap();
        s.tape.backward(loss).unwrap();
        let g = s.gradients();
        assert!(!g.source_rows.contains_key(&a));
        assert!(g.source_rows.contains_key(&b));
        assert!(g.source_rows.contains_key(&4));
    }

    #[test]
    fn gradient_clip_rescales() {
        let m = tiny_model(2, 2, 2);
        let mut g = Gradients::zeros(&m);
        g.dense[0][0] = 3.0;
        g.dense[1][0] = 4.0;
        assert_eq!(g.clip(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
