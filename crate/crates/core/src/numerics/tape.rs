use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::tensor::{check_shape, Real, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode enables dropout; infer mode makes it the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

/// Elementwise functions accepted by [`Tape::apply_unary`].
#[derive(Clone, Debug, PartialEq)]
pub enum UnaryFn {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    /// `mask[i] == true` keeps element `i` (scaled by `1/(1-p)`).
    Dropout { p: f64, mask: Vec<bool>, mode: Mode },
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatVec { w: Var, x: Var },
    MatVecT { w: Var, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow { mat: Var, row: Var },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Dropout { x: Var, scale: Vec<T> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, target: usize },
    Sum(Var),
    Dot(Var, Var),
}

struct Node<'a, T: Real> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and a single reverse sweep visits each node once. Leaves can
/// borrow their values (model weights) for the lifetime `'a` of the tape.
///
/// Leaf gradients accumulate across calls to [`Tape::backward`] until
/// [`Tape::zero_grad`] is called.
pub struct Tape<'a, T: Real = f64> {
    nodes: Vec<Node<'a, T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_along<T: Real>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..len).map(|j| (x[idx(j)] - max).exp()).sum();
            if log {
                let lse = max + total.ln();
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] - lse;
                }
            } else {
                for j in 0..len {
                    out[idx(j)] = (x[idx(j)] - max).exp() / total;
                }
            }
        }
    }
    out
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_result(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(shape, Cow::Owned(data), op, requires_grad))
    }

    /// Records a leaf that borrows `tensor`'s storage; gradient tracking follows
    /// `tensor.requires_grad()`.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor.shape().to_vec(), Cow::Borrowed(tensor.data()), Op::Leaf, rg)
    }

    /// Records a leaf that takes ownership of `tensor`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, false)
    }

    /// Records a leaf over a borrowed slice, e.g. one row of an embedding matrix.
    pub fn leaf_slice(&mut self, data: &'a [T], shape: &[usize], requires_grad: bool) -> Result<Var> {
        check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), Cow::Borrowed(data), Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.to_vec()).expect("recorded shapes are valid")
    }

    /// Accumulated gradient of a leaf, `None` if it does not require grad or
    /// no backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(NumericsError::Rank { op, expected: rank, shape: self.shape(v).to_vec() });
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bpj;
                }
            }
        }
        self.push_result("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `w · x` for `w: [m×k]`, `x: [k]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(NumericsError::Shape { op: "matvec", lhs: sw, rhs: sx });
        }
        let (m, k) = (sw[0], sw[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let out: Vec<T> = (0..m)
            .map(|i| wv[i * k..(i + 1) * k].iter().zip(xv).map(|(&a, &b)| a * b).sum())
            .collect();
        self.push_result("matvec", vec![m], out, Op::MatVec { w, x }, &[w, x])
    }

    /// `wᵀ · x` for `w: [m×k]`, `x: [m]`.
    pub fn matvec_t(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 2 || sx.len() != 1 || sw[0] != sx[0] {
            return Err(NumericsError::Shape { op: "matvec_t", lhs: sw, rhs: sx });
        }
        let (m, k) = (sw[0], sw[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let mut out = vec![T::zero(); k];
        for i in 0..m {
            for (o, &wij) in out.iter_mut().zip(&wv[i * k..(i + 1) * k]) {
                *o = *o + wij * xv[i];
            }
        }
        self.push_result("matvec_t", vec![k], out, Op::MatVecT { w, x }, &[w, x])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push_result(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_result("scale", shape, out, Op::Scale(a, c), &[a])
    }

    /// Adds `row: [c]` to every row of `mat: [r×c]`.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (sm, sr) = (self.shape(mat).to_vec(), self.shape(row).to_vec());
        if sm.len() != 2 || sr.len() != 1 || sm[1] != sr[0] {
            return Err(NumericsError::Shape { op: "add_row", lhs: sm, rhs: sr });
        }
        let c = sm[1];
        let rv = self.value(row);
        let out = self.value(mat).iter().enumerate().map(|(i, &x)| x + rv[i % c]).collect();
        self.push_result("add_row", sm, out, Op::AddRow { mat, row }, &[mat, row])
    }

    /// Flattens and joins `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Precondition { op: "concat", detail: "no inputs".into() });
        }
        let out: Vec<T> = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        let n = out.len();
        self.push_result("concat", vec![n], out, Op::Concat(parts.to_vec()), parts)
    }

    /// Stacks equal-length vectors into a `[rows.len() × len]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| NumericsError::Precondition { op: "stack", detail: "no inputs".into() })?;
        let s0 = self.shape(*first).to_vec();
        for &r in rows {
            self.expect_rank("stack", r, 1)?;
            if self.shape(r) != s0.as_slice() {
                return Err(NumericsError::Shape { op: "stack", lhs: s0, rhs: self.shape(r).to_vec() });
            }
        }
        let out: Vec<T> = rows.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push_result("stack", vec![rows.len(), s0[0]], out, Op::Concat(rows.to_vec()), rows)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.expect_rank("slice", x, 1)?;
        let n = self.shape(x)[0];
        if len == 0 || start + len > n {
            return Err(NumericsError::Index { op: "slice", index: start + len, len: n });
        }
        let out = self.value(x)[start..start + len].to_vec();
        self.push_result("slice", vec![len], out, Op::Slice { x, start }, &[x])
    }

    pub fn apply_unary(&mut self, x: Var, f: UnaryFn) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xv = self.value(x);
        match f {
            UnaryFn::Sigmoid => {
                let out = xv.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
                self.push_result("sigmoid", shape, out, Op::Sigmoid(x), &[x])
            }
            UnaryFn::Tanh => {
                let out = xv.iter().map(|&v| v.tanh()).collect();
                self.push_result("tanh", shape, out, Op::Tanh(x), &[x])
            }
            UnaryFn::Exp => {
                let out = xv.iter().map(|&v| v.exp()).collect();
                self.push_result("exp", shape, out, Op::Exp(x), &[x])
            }
            UnaryFn::Log => {
                if let Some(bad) = xv.iter().find(|&&v| v <= T::zero()) {
                    return Err(NumericsError::Domain { op: "log", detail: format!("non-positive element {bad}") });
                }
                let out = xv.iter().map(|&v| v.ln()).collect();
                self.push_result("log", shape, out, Op::Log(x), &[x])
            }
            UnaryFn::Dropout { p, mask, mode } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(NumericsError::Domain { op: "dropout", detail: format!("p = {p} outside [0, 1)") });
                }
                if mode == Mode::Infer {
                    return Ok(x);
                }
                if mask.len() != xv.len() {
                    return Err(NumericsError::Shape { op: "dropout", lhs: shape, rhs: vec![mask.len()] });
                }
                let keep = T::lit(1.0 / (1.0 - p));
                let scale: Vec<T> = mask.iter().map(|&m| if m { keep } else { T::zero() }).collect();
                let out = xv.iter().zip(&scale).map(|(&v, &s)| v * s).collect();
                self.push_result("dropout", shape, out, Op::Dropout { x, scale }, &[x])
            }
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply_unary(x, UnaryFn::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply_unary(x, UnaryFn::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply_unary(x, UnaryFn::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply_unary(x, UnaryFn::Log)
    }

    pub fn dropout(&mut self, x: Var, p: f64, mask: Vec<bool>, mode: Mode) -> Result<Var> {
        self.apply_unary(x, UnaryFn::Dropout { p, mask, mode })
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(NumericsError::Shape { op, lhs: shape.to_vec(), rhs: vec![axis] });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x), &shape, axis, false);
        self.push_result("softmax", shape, out, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x), &shape, axis, true);
        self.push_result("log_softmax", shape, out, Op::LogSoftmax { x, axis }, &[x])
    }

    /// `-log softmax(logits)[target]`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.expect_rank("cross_entropy", logits, 1)?;
        let lv = self.value(logits);
        if target >= lv.len() {
            return Err(NumericsError::Index { op: "cross_entropy", index: target, len: lv.len() });
        }
        let max = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + lv.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - lv[target];
        self.push_result("cross_entropy", vec![1], vec![loss], Op::CrossEntropy { logits, target }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push_result("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).sum();
        self.push_result("dot", vec![1], vec![s], Op::Dot(a, b), &[a, b])
    }

    /// `w · x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }

    /// Reverse sweep from a scalar `loss`, adding d(loss)/d(leaf) into every
    /// reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::Shape { op: "backward", lhs: self.shape(loss).to_vec(), rhs: vec![1] });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let Tape { nodes, leaf_grads } = self;
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            // Fetches (allocating on first use) the adjoint buffer of an input.
            macro_rules! acc {
                ($v:expr) => {{
                    let v: Var = $v;
                    if nodes[v.0].requires_grad {
                        let len = nodes[v.0].value.len();
                        Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); len]))
                    } else {
                        None
                    }
                }};
            }
            match &node.op {
                Op::Leaf => {
                    let buf = leaf_grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                    for (b, &d) in buf.iter_mut().zip(&g) {
                        *b = *b + d;
                    }
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    if let Some(da) = acc!(a) {
                        for i in 0..m {
                            for p in 0..k {
                                let s: T = (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum();
                                da[i * k + p] = da[i * k + p] + s;
                            }
                        }
                    }
                    if let Some(db) = acc!(b) {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + aip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                &Op::MatVec { w, x } => {
                    let k = nodes[x.0].value.len();
                    let wv = &nodes[w.0].value;
                    let xv = &nodes[x.0].value;
                    if let Some(dw) = acc!(w) {
                        for (i, &gi) in g.iter().enumerate() {
                            for (d, &xj) in dw[i * k..(i + 1) * k].iter_mut().zip(xv.iter()) {
                                *d = *d + gi * xj;
                            }
                        }
                    }
                    if let Some(dx) = acc!(x) {
                        for (i, &gi) in g.iter().enumerate() {
                            for (d, &wij) in dx.iter_mut().zip(&wv[i * k..(i + 1) * k]) {
                                *d = *d + wij * gi;
                            }
                        }
                    }
                }
                &Op::MatVecT { w, x } => {
                    let k = g.len();
                    let wv = &nodes[w.0].value;
                    let xv = &nodes[x.0].value;
                    if let Some(dw) = acc!(w) {
                        for (i, &xi) in xv.iter().enumerate() {
                            for (d, &gj) in dw[i * k..(i + 1) * k].iter_mut().zip(&g) {
                                *d = *d + xi * gj;
                            }
                        }
                    }
                    if let Some(dx) = acc!(x) {
                        for (i, d) in dx.iter_mut().enumerate() {
                            let s: T = wv[i * k..(i + 1) * k].iter().zip(&g).map(|(&a, &b)| a * b).sum();
                            *d = *d + s;
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(d) = acc!(v) {
                            d.iter_mut().zip(&g).for_each(|(d, &gi)| *d = *d + gi);
                        }
                    }
                }
                &Op::Sub(a, b) => {
                    if let Some(d) = acc!(a) {
                        d.iter_mut().zip(&g).for_each(|(d, &gi)| *d = *d + gi);
                    }
                    if let Some(d) = acc!(b) {
                        d.iter_mut().zip(&g).for_each(|(d, &gi)| *d = *d - gi);
                    }
                }
                &Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    if let Some(d) = acc!(a) {
                        for ((d, &gi), &bi) in d.iter_mut().zip(&g).zip(bv.iter()) {
                            *d = *d + gi * bi;
                        }
                    }
                    if let Some(d) = acc!(b) {
                        for ((d, &gi), &ai) in d.iter_mut().zip(&g).zip(av.iter()) {
                            *d = *d + gi * ai;
                        }
                    }
                }
                &Op::Scale(a, c) => {
                    if let Some(d) = acc!(a) {
                        d.iter_mut().zip(&g).for_each(|(d, &gi)| *d = *d + gi * c);
                    }
                }
                &Op::AddRow { mat, row } => {
                    if let Some(d) = acc!(mat) {
                        d.iter_mut().zip(&g).for_each(|(d, &gi)| *d = *d + gi);
                    }
                    if let Some(d) = acc!(row) {
                        let c = d.len();
                        for (idx, &gi) in g.iter().enumerate() {
                            d[idx % c] = d[idx % c] + gi;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        if let Some(d) = acc!(p) {
                            d.iter_mut().zip(&g[off..off + len]).for_each(|(d, &gi)| *d = *d + gi);
                        }
                        off += len;
                    }
                }
                &Op::Slice { x, start } => {
                    if let Some(d) = acc!(x) {
                        d[start..start + g.len()].iter_mut().zip(&g).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
                &Op::Sigmoid(x) => {
                    if let Some(d) = acc!(x) {
                        for ((d, &gi), &yi) in d.iter_mut().zip(&g).zip(y.iter()) {
                            *d = *d + gi * yi * (T::one() - yi);
                        }
                    }
                }
                &Op::Tanh(x) => {
                    if let Some(d) = acc!(x) {
                        for ((d, &gi), &yi) in d.iter_mut().zip(&g).zip(y.iter()) {
                            *d = *d + gi * (T::one() - yi * yi);
                        }
                    }
                }
                &Op::Exp(x) => {
                    if let Some(d) = acc!(x) {
                        for ((d, &gi), &yi) in d.iter_mut().zip(&g).zip(y.iter()) {
                            *d = *d + gi * yi;
                        }
                    }
                }
                &Op::Log(x) => {
                    let xv = &nodes[x.0].value;
                    if let Some(d) = acc!(x) {
                        for ((d, &gi), &xi) in d.iter_mut().zip(&g).zip(xv.iter()) {
                            *d = *d + gi / xi;
                        }
                    }
                }
                Op::Dropout { x, scale } => {
                    if let Some(d) = acc!(*x) {
                        for ((d, &gi), &s) in d.iter_mut().zip(&g).zip(scale) {
                            *d = *d + gi * s;
                        }
                    }
                }
                &Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_layout(&node.shape, axis);
                    if let Some(d) = acc!(x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * len + j) * inner + i;
                                let dotp: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                                for j in 0..len {
                                    d[idx(j)] = d[idx(j)] + y[idx(j)] * (g[idx(j)] - dotp);
                                }
                            }
                        }
                    }
                }
                &Op::LogSoftmax { x, axis } => {
                    let (outer, len, inner) = axis_layout(&node.shape, axis);
                    if let Some(d) = acc!(x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * len + j) * inner + i;
                                let gsum: T = (0..len).map(|j| g[idx(j)]).sum();
                                for j in 0..len {
                                    d[idx(j)] = d[idx(j)] + g[idx(j)] - y[idx(j)].exp() * gsum;
                                }
                            }
                        }
                    }
                }
                &Op::CrossEntropy { logits, target } => {
                    let lv = &nodes[logits.0].value;
                    if let Some(d) = acc!(logits) {
                        let max = lv.iter().copied().fold(T::neg_infinity(), T::max);
                        let total: T = lv.iter().map(|&v| (v - max).exp()).sum();
                        for (j, d) in d.iter_mut().enumerate() {
                            let p = (lv[j] - max).exp() / total;
                            let onehot = if j == target { T::one() } else { T::zero() };
                            *d = *d + g[0] * (p - onehot);
                        }
                    }
                }
                &Op::Sum(x) => {
                    if let Some(d) = acc!(x) {
                        d.iter_mut().for_each(|d| *d = *d + g[0]);
                    }
                }
                &Op::Dot(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    if let Some(d) = acc!(a) {
                        d.iter_mut().zip(bv.iter()).for_each(|(d, &bi)| *d = *d + g[0] * bi);
                    }
                    if let Some(d) = acc!(b) {
                        d.iter_mut().zip(av.iter()).for_each(|(d, &ai)| *d = *d + g[0] * ai);
                    }
                }
            }
        }
        Ok(())
    }
}
