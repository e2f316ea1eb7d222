//! Helpers shared by the integration tests and the acceptance suite.
//!
//! Every reference implementation in here is written independently of the
//! library code it checks.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unseen_nmt::corpus::{build_vocabulary, ExtraLexicon, ParallelCorpus, Split, VocabMode, Vocabulary};
use unseen_nmt::embeddings::random_table;
use unseen_nmt::model::{ModelConfig, Seq2Seq, Session};
use unseen_nmt::numerics::{Mode, NumericsError, Tape, Tensor, Var};
use unseen_nmt::search::{SearchError, StepModel};

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

type Build = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var, NumericsError>>;

/// One differentiable operation with randomly drawn inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(rng, n, lo, hi)).unwrap()
}

/// Names of every op exercised by [`op_case`].
pub const OP_NAMES: &[&str] = &[
    "matmul", "matvec", "matvec_t", "add", "sub", "mul", "scale", "add_row", "concat", "stack", "slice", "sigmoid",
    "tanh", "exp", "log", "dropout", "softmax", "log_softmax", "cross_entropy", "sum", "dot", "affine",
];

pub fn op_case(name: &'static str, rng: &mut ChaCha8Rng) -> OpCase {
    let m = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=4);
    let (inputs, build): (Vec<Tensor<f64>>, Build) = match name {
        "matmul" => (
            vec![tensor(rng, &[m, k], -1.0, 1.0), tensor(rng, &[k, n], -1.0, 1.0)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "matvec" => (
            vec![tensor(rng, &[m, k], -1.0, 1.0), tensor(rng, &[k], -1.0, 1.0)],
            Box::new(|t, v| t.matvec(v[0], v[1])),
        ),
        "matvec_t" => (
            vec![tensor(rng, &[m, k], -1.0, 1.0), tensor(rng, &[m], -1.0, 1.0)],
            Box::new(|t, v| t.matvec_t(v[0], v[1])),
        ),
        "add" | "sub" | "mul" => {
            let shape = if rng.gen_bool(0.5) { vec![m] } else { vec![m, n] };
            let f: Build = match name {
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (vec![tensor(rng, &shape, -2.0, 2.0), tensor(rng, &shape, -2.0, 2.0)], f)
        }
        "scale" => {
            let c = rng.gen_range(-3.0..3.0);
            (vec![tensor(rng, &[m, n], -2.0, 2.0)], Box::new(move |t, v| t.scale(v[0], c)))
        }
        "add_row" => (
            vec![tensor(rng, &[m, n], -2.0, 2.0), tensor(rng, &[n], -2.0, 2.0)],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        "concat" => (
            vec![tensor(rng, &[m], -2.0, 2.0), tensor(rng, &[k], -2.0, 2.0), tensor(rng, &[n], -2.0, 2.0)],
            Box::new(|t, v| t.concat(v)),
        ),
        "stack" => (
            (0..m).map(|_| tensor(rng, &[n], -2.0, 2.0)).collect(),
            Box::new(|t, v| t.stack(v)),
        ),
        "slice" => {
            let len = m + n;
            let start = rng.gen_range(0..len);
            let take = rng.gen_range(1..=len - start);
            (vec![tensor(rng, &[len], -2.0, 2.0)], Box::new(move |t, v| t.slice(v[0], start, take)))
        }
        "sigmoid" => (vec![tensor(rng, &[m, n], -3.0, 3.0)], Box::new(|t, v| t.sigmoid(v[0]))),
        "tanh" => (vec![tensor(rng, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.tanh(v[0]))),
        "exp" => (vec![tensor(rng, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.exp(v[0]))),
        "log" => (vec![tensor(rng, &[m, n], 0.5, 3.0)], Box::new(|t, v| t.log(v[0]))),
        "dropout" => {
            let p = rng.gen_range(0.1..0.6);
            let mask: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.5)).collect();
            (
                vec![tensor(rng, &[m, n], -2.0, 2.0)],
                Box::new(move |t, v| t.dropout(v[0], p, mask.clone(), Mode::Train)),
            )
        }
        "softmax" | "log_softmax" => {
            let (shape, axis) = match rng.gen_range(0..3) {
                0 => (vec![m + 1], 0),
                1 => (vec![m, n + 1], 1),
                _ => (vec![m + 1, n], 0),
            };
            let f: Build = if name == "softmax" {
                Box::new(move |t, v| t.softmax(v[0], axis))
            } else {
                Box::new(move |t, v| t.log_softmax(v[0], axis))
            };
            (vec![tensor(rng, &shape, -3.0, 3.0)], f)
        }
        "cross_entropy" => {
            let len = m + n;
            let target = rng.gen_range(0..len);
            (vec![tensor(rng, &[len], -3.0, 3.0)], Box::new(move |t, v| t.cross_entropy(v[0], target)))
        }
        "sum" => (vec![tensor(rng, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.sum(v[0]))),
        "dot" => (
            vec![tensor(rng, &[m + n], -2.0, 2.0), tensor(rng, &[m + n], -2.0, 2.0)],
            Box::new(|t, v| t.dot(v[0], v[1])),
        ),
        "affine" => (
            vec![tensor(rng, &[m, k], -1.0, 1.0), tensor(rng, &[k], -1.0, 1.0), tensor(rng, &[m], -1.0, 1.0)],
            Box::new(|t, v| t.affine(v[0], v[1], v[2])),
        ),
        other => panic!("no gradient case for {other}"),
    };
    OpCase { name, inputs, build }
}

/// Scalar probe `sum(w * op(inputs))` with fixed random weights `w`, so
/// every output element contributes to the gradient.
fn probe_value(case: &OpCase, inputs: &[Tensor<f64>], weights: &[f64], grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad(grads))).collect();
    let y = (case.build)(&mut tape, &vars).unwrap();
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::new(&shape, weights.to_vec()).unwrap());
    let wy = tape.mul(y, w).unwrap();
    let loss = tape.sum(wy).unwrap();
    let value = tape.value(loss)[0];
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();
    (value, g)
}

/// Largest relative error between tape and central-difference gradients.
pub fn op_case_error(case: &OpCase, rng: &mut ChaCha8Rng) -> f64 {
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = (case.build)(&mut tape, &vars).unwrap();
        tape.value(y).len()
    };
    let weights = uniform(rng, out_len, -1.0, 1.0);
    let (_, analytic) = probe_value(case, &case.inputs, &weights, true);
    let mut worst = 0.0f64;
    for (i, x) in case.inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut shifted = case.inputs.clone();
            shifted[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let up = probe_value(case, &shifted, &weights, false).0;
            shifted[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let down = probe_value(case, &shifted, &weights, false).0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    worst
}

/// Worst error per op over `trials` random cases each.
pub fn op_gradient_errors(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OP_NAMES
        .iter()
        .map(|&name| {
            let worst = (0..trials).map(|_| op_case_error(&op_case(name, &mut rng), &mut rng)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Vocabulary of 12 ids: 4 specials, one language tag and 7 words.
pub fn small_vocab() -> Vocabulary {
    let extra = ExtraLexicon { language: "xx".into(), tokens: (0..7).map(|i| format!("v{i}")).collect() };
    let v = build_vocabulary(&[&ParallelCorpus::new(Split::Train)], &["xx".into()], VocabMode::SharedForm, &[extra]);
    assert_eq!(v.len(), 12);
    v
}

/// Embed 8, hidden 8, vocab 12, trainable embedding rows, no dropout.
pub fn gradcheck_model(seed: u64, share_embeddings: bool) -> Seq2Seq {
    let vocab = small_vocab();
    let table = random_table(&vocab, 8, seed, 0.5, false);
    let cfg = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        attention_dim: 8,
        encoder_layers: 2,
        dropout_p: 0.0,
        vocab_size: vocab.len(),
        seed,
        init_range: 0.3,
        share_embeddings,
        ..Default::default()
    };
    Seq2Seq::new(cfg, table).unwrap()
}

fn model_loss(model: &Seq2Seq, source: &[usize], target: &[usize]) -> f64 {
    let mut s = Session::new(model, Mode::Infer, false, 0);
    let l = s.forward_loss(source, target).unwrap();
    s.tape.value(l)[0]
}

fn central(model: &mut Seq2Seq, get: impl Fn(&mut Seq2Seq) -> &mut f64, source: &[usize], target: &[usize]) -> f64 {
    let x = *get(model);
    *get(model) = x + FD_STEP;
    let up = model_loss(model, source, target);
    *get(model) = x - FD_STEP;
    let down = model_loss(model, source, target);
    *get(model) = x;
    (up - down) / (2.0 * FD_STEP)
}

/// Worst relative error over every dense parameter and every embedding row
/// the example touches, for one random sentence pair of length ≤ 4.
pub fn model_gradient_error(seed: u64, share_embeddings: bool) -> f64 {
    let mut model = gradcheck_model(seed, share_embeddings);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let words = 5..12;
    let src_len = rng.gen_range(1..=4);
    let tgt_len = rng.gen_range(1..=4);
    let mut source = vec![4];
    source.extend((0..src_len - 1).map(|_| rng.gen_range(words.clone())));
    let mut target = vec![2];
    target.extend((0..tgt_len).map(|_| rng.gen_range(words.clone())));
    target.push(3);

    let analytic = {
        let mut s = Session::new(&model, Mode::Train, true, 0);
        let l = s.forward_loss(&source, &target).unwrap();
        s.tape.backward(l).unwrap();
        s.gradients()
    };
    let mut worst = 0.0f64;
    for p in 0..analytic.dense.len() {
        for j in 0..analytic.dense[p].len() {
            let n = central(&mut model, |m| &mut m.params_mut()[p].data_mut()[j], &source, &target);
            worst = worst.max(relative_error(analytic.dense[p][j], n));
        }
    }
    let used: BTreeSet<usize> = source.iter().chain(&target).copied().collect();
    for id in used {
        for d in 0..8 {
            let n = central(&mut model, |m| &mut m.embeddings_mut().0.row_mut(id)[d], &source, &target);
            let a = analytic.source_rows.get(&id).map_or(0.0, |g| g[d]);
            worst = worst.max(relative_error(a, n));
            if !share_embeddings {
                let n = central(&mut model, |m| &mut m.embeddings_mut().1.unwrap().row_mut(id)[d], &source, &target);
                let a = analytic.target_rows.get(&id).map_or(0.0, |g| g[d]);
                worst = worst.max(relative_error(a, n));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Toy decoders

/// Next-token distributions drawn from a hash of the prefix, so every
/// prefix has its own fixed distribution.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub vocab: usize,
    pub eos: usize,
    pub seed: u64,
    /// Larger values make distributions peakier.
    pub temperature: f64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl ToyModel {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let vocab = rng.gen_range(2..=5);
        Self { vocab, eos: rng.gen_range(0..vocab), seed: rng.gen(), temperature: rng.gen_range(0.5..3.0) }
    }

    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let h = prefix.iter().fold(splitmix(self.seed), |h, &t| splitmix(h ^ (t as u64 + 1)));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-1.0..1.0) * self.temperature).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }
}

impl StepModel for ToyModel {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn eos(&self) -> usize {
        self.eos
    }

    fn initial(&mut self) -> Result<Vec<usize>, SearchError> {
        Ok(Vec::new())
    }

    fn step(&mut self, state: &Vec<usize>) -> Result<(Vec<f64>, Vec<usize>), SearchError> {
        Ok((self.log_probs(state), state.clone()))
    }

    fn with_token(&self, state: &Vec<usize>, token: usize) -> Vec<usize> {
        let mut s = state.clone();
        s.push(token);
        s
    }
}

/// Brute-force argmax over every output: each is either a sequence ending
/// in EOS within `max_len` tokens, or `max_len` non-EOS tokens followed by
/// an unscored EOS. Ties go to the lexicographically smaller sequence.
pub fn brute_force_best(model: &ToyModel, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider = |seq: Vec<usize>, score: f64| {
        let better = match &best {
            None => true,
            Some((s, b)) => score > *b || (score == *b && seq < *s),
        };
        if better {
            best = Some((seq, score));
        }
    };
    for len in 1..=max_len {
        let total = model.vocab.pow(len as u32);
        for code in 0..total {
            let mut seq = Vec::with_capacity(len + 1);
            let mut c = code;
            for _ in 0..len {
                seq.push(c % model.vocab);
                c /= model.vocab;
            }
            seq.reverse();
            let body_has_eos = seq[..len - 1].contains(&model.eos);
            if body_has_eos {
                continue;
            }
            let score: f64 = (0..len).map(|i| model.log_probs(&seq[..i])[seq[i]]).sum();
            if seq[len - 1] == model.eos {
                consider(seq, score);
            } else if len == max_len {
                seq.push(model.eos);
                consider(seq, score);
            }
        }
    }
    best.unwrap()
}

/// Independent greedy argmax, lowest id on ties.
pub fn reference_greedy(model: &ToyModel, max_len: usize) -> Vec<usize> {
    let mut seq = Vec::new();
    while seq.len() < max_len {
        let lp = model.log_probs(&seq);
        let mut arg = 0;
        for t in 1..lp.len() {
            if lp[t] > lp[arg] {
                arg = t;
            }
        }
        seq.push(arg);
        if arg == model.eos {
            return seq;
        }
    }
    seq.push(model.eos);
    seq
}

// ---------------------------------------------------------------------------
// BLEU

/// Hand-computed corpus BLEU fixtures: (name, hyps, refs, unsmoothed BLEU).
pub fn bleu_fixtures() -> Vec<(&'static str, Vec<Vec<&'static str>>, Vec<Vec<&'static str>>, f64)> {
    let w = |s: &'static str| s.split_whitespace().collect::<Vec<_>>();
    vec![
        // p1 = p2 = p3 = p4 = 1, equal lengths.
        ("identical", vec![w("a b c d e")], vec![w("a b c d e")], 1.0),
        // Hyp "a b c d e f" vs ref "a b c d e g": p1 = 5/6, p2 = 4/5, p3 = 3/4,
        // p4 = 2/3, BP = 1 -> (5/6 * 4/5 * 3/4 * 2/3)^(1/4) = (1/3)^(1/4).
        ("one substitution", vec![w("a b c d e f")], vec![w("a b c d e g")], 0.759_835_685_651_592_5),
        // Hyp is the first 5 of a 10-token ref: all p_n = 1, BP = exp(1 - 10/5) = e^-1.
        ("short hypothesis", vec![w("a b c d e")], vec![w("a b c d e f g h i j")], 0.367_879_441_171_442_33),
        // Clipping: "the" x7 against a ref with two "the": p1 = 2/7, no bigram
        // "the the" in the ref so p2 = 0 -> BLEU 0.
        (
            "clipped counts",
            vec![w("the the the the the the the")],
            vec![w("the cat is on the mat too")],
            0.0,
        ),
        // Two sentences pooled at corpus level.
        // s1: hyp "a b c d" ref "a b c d": 4/4, 3/3, 2/2, 1/1
        // s2: hyp "x y z w" ref "x y q w": 3/4, 1/3, 0/2, 0/1
        // totals p1 = 7/8, p2 = 4/6, p3 = 2/4, p4 = 1/2; BP = 1
        // BLEU = (7/8 * 2/3 * 1/2 * 1/2)^(1/4) = (7/48)^(1/4)
        (
            "pooled corpus",
            vec![w("a b c d"), w("x y z w")],
            vec![w("a b c d"), w("x y q w")],
            0.617_965_458_511_223_5,
        ),
        // Three sentences, longer reference total.
        // s1: hyp "k l m n o" ref "k l m n o p" -> 5/5, 4/4, 3/3, 2/2
        // s2: hyp "a a b b" ref "a b b a": p1 clipped 4/4, bigrams aa ab bb
        //     vs ref ab bb ba -> 2/3, trigrams aab abb vs abb bba -> 1/2, p4 0/1
        // s3: hyp "q r s t" ref "q r s t" -> 4/4, 3/3, 2/2, 1/1
        // p1 = 13/13, p2 = 9/10, p3 = 6/7, p4 = 3/4; hyp 13, ref 14
        // BLEU = exp(1 - 14/13) * (1 * 9/10 * 6/7 * 3/4)^(1/4)
        (
            "three sentences",
            vec![w("k l m n o"), w("a a b b"), w("q r s t")],
            vec![w("k l m n o p"), w("a b b a"), w("q r s t")],
            0.807_573_348_538_333_6,
        ),
    ]
}

/// Recomputes BLEU from the formula with naive counting (used to check the
/// literal constants above).
pub fn naive_bleu(hyps: &[Vec<&str>], refs: &[Vec<&str>]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut clipped, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let hg: Vec<&[&str]> = if h.len() >= n { h.windows(n).collect() } else { Vec::new() };
            let rg: Vec<&[&str]> = if r.len() >= n { r.windows(n).collect() } else { Vec::new() };
            let mut seen: Vec<&[&str]> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let ch = hg.iter().filter(|x| *x == g).count();
                let cr = rg.iter().filter(|x| *x == g).count();
                clipped += ch.min(cr);
            }
            total += hg.len();
        }
        if clipped == 0 {
            return 0.0;
        }
        log_p += (clipped as f64 / total as f64).ln() / 4.0;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

// ---------------------------------------------------------------------------
// Copy task

pub struct CopySetup {
    pub vocab: Vocabulary,
    pub model: Seq2Seq,
    pub train: Vec<unseen_nmt::trainer::EncodedPair>,
    pub test: unseen_nmt::eval::EvalSet,
}

/// Vocab 20, 500 training pairs of length 3–8, embed 16, hidden 32, frozen
/// random word vectors.
pub fn copy_setup(n_train: usize, embed_seed: u64, model_seed: u64) -> CopySetup {
    use unseen_nmt::harness::pipeline::{encode_pairs, eval_set};
    use unseen_nmt::synthetic::copy_task;
    let train = copy_task(20, n_train, 3, 8, 11, "cp");
    let mut test = copy_task(20, 100, 3, 8, 12, "cp");
    test.split = Split::Test;
    let langs = vec!["cp".to_string()];
    let vocab = build_vocabulary(&[&train], &langs, VocabMode::SharedForm, &[]);
    let table = random_table(&vocab, 16, embed_seed, 0.5, true);
    let cfg = ModelConfig {
        embed_dim: 16,
        hidden_dim: 32,
        attention_dim: 32,
        vocab_size: vocab.len(),
        dropout_p: 0.0,
        seed: model_seed,
        ..Default::default()
    };
    let model = Seq2Seq::new(cfg, table).unwrap();
    let data = encode_pairs(&train, &vocab).unwrap();
    let set = eval_set("cp->cp", &test, &vocab).unwrap();
    CopySetup { vocab, model, train: data, test: set }
}

/// Training settings used for the copy task.
pub fn copy_train_config() -> unseen_nmt::trainer::TrainConfig {
    unseen_nmt::trainer::TrainConfig {
        initial_lr: 0.005,
        batch_size: 8,
        max_epochs: 30,
        early_stopping: false,
        batching: unseen_nmt::trainer::Batching::Shuffle,
        ..Default::default()
    }
}
