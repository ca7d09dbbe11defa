//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! A [`Tape`] borrows the [`ParamStore`] it reads parameters from; parameter
//! nodes refer to the store instead of copying weights. `backprop` returns
//! [`Gradients`] which the caller folds into the store with
//! [`ParamStore::accumulate`] once the tape is dropped.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{shape_err, NumError, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{checked_mode, gemm, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);
static EMPTY_STORE: ParamStore = ParamStore::new();

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-12;
const PROB_EPS: f64 = 1e-12;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    SignSte(Var),
    BinaryEntropyLogits(Var),
    BinaryEntropyProb(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumCols(Var),
    RepeatRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Tensor),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'s> {
    id: u32,
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl Tape<'static> {
    /// A tape with no parameters, for pure tensor computations.
    pub fn detached() -> Self {
        Tape::new(&EMPTY_STORE)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Tanh-approximated GELU, the activation behind [`Tape::gelu`].
pub fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NumError::NoForward);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        let node = &self.nodes[v.idx];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if checked_mode() && !value.all_finite() {
            return Err(NumError::NonFinite { op: name.into() });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(
            id.0 < self.store.len(),
            "parameter {id:?} not in this tape's store"
        );
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn unary(&mut self, a: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f);
        self.push(out, op, name)
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?}", self.shape(a)),
                self.shape(b),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, op, name)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.value(a).require_2d("matmul")?;
        let (k2, n) = self.value(b).require_2d("matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{k}, _] right operand"),
                self.shape(b),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    /// Adds a length-`n` bias to every row of `[m,n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (m, n) = self.value(x).require_2d("add_bias")?;
        if self.value(b).len() != n {
            return Err(shape_err(
                "add_bias",
                format!("bias of {n} values"),
                self.shape(b),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Tensor::raw(vec![m, n], out), Op::AddBias(x, b), "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |p, q| p / q, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, "scale", |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt(a))
    }

    /// `sign` in the forward pass (`0 → −1`), identity in the backward pass.
    pub fn sign_ste(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            "sign_ste",
            |x| if x > 0.0 { 1.0 } else { -1.0 },
            Op::SignSte(a),
        )
    }

    /// Entropy in nats of `Bernoulli(sigmoid(x))`, elementwise.
    pub fn binary_entropy_logits(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            "binary_entropy_logits",
            |x| softplus(x) - x * sigmoid(x),
            Op::BinaryEntropyLogits(a),
        )
    }

    /// Entropy in nats of `Bernoulli(p)`, elementwise, `p` clamped away from {0,1}.
    pub fn binary_entropy_prob(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            "binary_entropy_prob",
            |p| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
            },
            Op::BinaryEntropyProb(a),
        )
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::Invalid("concat_cols: no inputs".into()));
        }
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(p)?;
            let (r, c) = self.value(p).require_2d("concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(shape_err(
                    "concat_cols",
                    format!("{} rows", rows.unwrap()),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let rows = rows.unwrap();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::raw(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.value(a).require_2d("slice_cols")?;
        if start >= end || end > n {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{end}"),
                self.shape(a),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        self.push(
            Tensor::raw(vec![m, end - start], out),
            Op::SliceCols(a, start),
            "slice_cols",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.value(a).require_2d("transpose")?;
        let out = transpose(self.value(a).data(), m, n);
        self.push(Tensor::raw(vec![n, m], out), Op::Transpose(a), "transpose")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), "mean_all")
    }

    /// Mean over the row axis: `[m,n] → [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.value(a).require_2d("mean_rows")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Tensor::raw(vec![1, n], out), Op::MeanRows(a), "mean_rows")
    }

    /// Sum over the column axis: `[m,n] → [m,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.value(a).require_2d("sum_cols")?;
        let src = self.value(a).data();
        let out = (0..m)
            .map(|r| src[r * n..(r + 1) * n].iter().sum())
            .collect();
        self.push(Tensor::raw(vec![m, 1], out), Op::SumCols(a), "sum_cols")
    }

    /// Broadcasts a `[1,n]` row to `[m,n]`.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        self.check(a)?;
        let (r, n) = self.value(a).require_2d("repeat_rows")?;
        if r != 1 {
            return Err(shape_err("repeat_rows", "[1, n]", self.shape(a)));
        }
        let row = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(row);
        }
        self.push(
            Tensor::raw(vec![m, n], out),
            Op::RepeatRows(a),
            "repeat_rows",
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.value(a).require_2d("l2_normalize_rows")?;
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        self.push(
            Tensor::raw(vec![m, n], out),
            Op::L2NormalizeRows(a, norms),
            "l2_normalize_rows",
        )
    }

    /// Mean softmax cross-entropy of `[m,n]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (m, n) = self.value(logits).require_2d("cross_entropy")?;
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(shape_err(
                "cross_entropy",
                format!("{m} targets below {n}"),
                self.shape(logits),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(m * n);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor::raw(vec![m, n], probs);
        self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            "cross_entropy",
        )
    }

    /// Batched 1-D cross-correlation.
    ///
    /// `x: [B, C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]` → `[B, C_out, L_out]`
    /// with zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (bs, cin, len) = match self.shape(x) {
            [bs, c, l] => (*bs, *c, *l),
            s => return Err(shape_err("conv1d", "input [batch, channels, length]", s)),
        };
        let (cout, kw) = match self.shape(w) {
            [o, c, k] if *c == cin => (*o, *k),
            s => {
                return Err(shape_err(
                    "conv1d",
                    format!("kernel [out, {cin}, width]"),
                    s,
                ))
            }
        };
        if self.value(b).len() != cout {
            return Err(shape_err(
                "conv1d",
                format!("bias of {cout}"),
                self.shape(b),
            ));
        }
        let lout = conv_out_len(len, kw, stride, pad).ok_or_else(|| {
            shape_err(
                "conv1d",
                format!("padded length ≥ kernel width {kw}"),
                &[bs, cin, len],
            )
        })?;
        let (xs, ws, bsv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; bs * cout * lout];
        for n in 0..bs {
            for o in 0..cout {
                let orow = &mut out[(n * cout + o) * lout..(n * cout + o + 1) * lout];
                orow.fill(bsv[o]);
                for c in 0..cin {
                    let xrow = &xs[(n * cin + c) * len..(n * cin + c + 1) * len];
                    let wrow = &ws[(o * cin + c) * kw..(o * cin + c + 1) * kw];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        let base = (t * stride) as isize - pad as isize;
                        for (k, wv) in wrow.iter().enumerate() {
                            let i = base + k as isize;
                            if i >= 0 && (i as usize) < len {
                                *ov += wv * xrow[i as usize];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::raw(vec![bs, cout, lout], out),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "conv1d",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Backpropagates `seed` (∂loss/∂out) from `out` and returns parameter gradients.
    pub fn backprop(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        self.check(out)?;
        if seed.shape() != self.shape(out) && seed.len() != self.value(out).len() {
            return Err(shape_err(
                "backprop",
                format!("{:?}", self.shape(out)),
                seed.shape(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.idx + 1];
        grads[out.idx] = Some(Tensor::raw(self.shape(out).to_vec(), seed.data().to_vec()));
        let mut param_grads = Gradients::with_len(self.store.len());

        for i in (0..=out.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.as_ref();
            match &node.op {
                Op::Input => {}
                Op::Param(id) => param_grads.add(*id, &g),
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).require_2d("matmul")?;
                    let n = self.value(*b).cols();
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        &mut ga,
                        0.0,
                    );
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        g.data(),
                        false,
                        &mut gb,
                        0.0,
                    );
                    acc(&mut grads, *a, Tensor::raw(vec![m, k], ga));
                    acc(&mut grads, *b, Tensor::raw(vec![k, n], gb));
                }
                Op::AddBias(x, b) => {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (o, v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    let bshape = self.shape(*b).to_vec();
                    acc(&mut grads, *b, Tensor::raw(bshape, gb));
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |gv, bv| gv * bv);
                    let gb = zip_map(&g, self.value(*a), |gv, av| gv * av);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, bv, |gv, q| gv / q);
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(gv, (p, q))| -gv * p / (q * q))
                        .collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, Tensor::raw(bv.shape().to_vec(), data));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::AddScalar(a) | Op::SignSte(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, y.unwrap(), |gv, t| gv * (1.0 - t * t)),
                ),
                Op::Sigmoid(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, y.unwrap(), |gv, s| gv * s * (1.0 - s)),
                ),
                Op::Exp(a) => acc(&mut grads, *a, zip_map(&g, y.unwrap(), |gv, e| gv * e)),
                Op::Log(a) => acc(&mut grads, *a, zip_map(&g, self.value(*a), |gv, x| gv / x)),
                Op::Square(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, self.value(*a), |gv, x| 2.0 * gv * x),
                ),
                Op::Sqrt(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, y.unwrap(), |gv, r| gv * 0.5 / r),
                ),
                Op::BinaryEntropyLogits(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        -gv * x * s * (1.0 - s)
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::BinaryEntropyProb(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, p| {
                        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        gv * ((1.0 - p) / p).ln()
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (m, w) = self.value(p).require_2d("concat_cols")?;
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        offset += w;
                        acc(&mut grads, p, Tensor::raw(vec![m, w], gp));
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.value(*a).require_2d("slice_cols")?;
                    let w = g.cols();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        ga[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, Tensor::raw(vec![m, n], ga));
                }
                Op::Transpose(a) => {
                    let (m, n) = self.value(*a).require_2d("transpose")?;
                    acc(
                        &mut grads,
                        *a,
                        Tensor::raw(vec![m, n], transpose(g.data(), n, m)),
                    );
                }
                Op::SumAll(a) => {
                    let s = g.item();
                    acc(&mut grads, *a, Tensor::full(self.shape(*a), s));
                }
                Op::MeanAll(a) => {
                    let s = g.item() / self.value(*a).len() as f64;
                    acc(&mut grads, *a, Tensor::full(self.shape(*a), s));
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).require_2d("mean_rows")?;
                    let mut ga = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        ga.extend(g.data().iter().map(|v| v / m as f64));
                    }
                    acc(&mut grads, *a, Tensor::raw(vec![m, n], ga));
                }
                Op::SumCols(a) => {
                    let (m, n) = self.value(*a).require_2d("sum_cols")?;
                    let mut ga = Vec::with_capacity(m * n);
                    for r in 0..m {
                        ga.extend(std::iter::repeat_n(g.data()[r], n));
                    }
                    acc(&mut grads, *a, Tensor::raw(vec![m, n], ga));
                }
                Op::RepeatRows(a) => {
                    let n = g.cols();
                    let mut ga = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (o, v) in ga.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, Tensor::raw(vec![1, n], ga));
                }
                Op::L2NormalizeRows(a, norms) => {
                    let yv = y.unwrap();
                    let n = yv.cols();
                    let mut ga = Vec::with_capacity(yv.len());
                    for (r, norm) in norms.iter().enumerate() {
                        let (yr, gr) = (yv.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        ga.extend((0..n).map(|j| (gr[j] - yr[j] * dot) / norm));
                    }
                    acc(&mut grads, *a, Tensor::raw(yv.shape().to_vec(), ga));
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let m = targets.len() as f64;
                    let s = g.item() / m;
                    let n = probs.cols();
                    let mut gl: Vec<f64> = probs.data().iter().map(|p| p * s).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * n + t] -= s;
                    }
                    acc(&mut grads, *logits, Tensor::raw(probs.shape().to_vec(), gl));
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (bs, cin, len) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                    let (cout, kw) = (wt.shape()[0], wt.shape()[2]);
                    let lout = g.shape()[2];
                    let (xs, ws, gs) = (xt.data(), wt.data(), g.data());
                    let mut gx = vec![0.0; xs.len()];
                    let mut gw = vec![0.0; ws.len()];
                    let mut gb = vec![0.0; cout];
                    for n in 0..bs {
                        for o in 0..cout {
                            let grow = &gs[(n * cout + o) * lout..(n * cout + o + 1) * lout];
                            gb[o] += grow.iter().sum::<f64>();
                            for c in 0..cin {
                                let xoff = (n * cin + c) * len;
                                let woff = (o * cin + c) * kw;
                                for (t, gv) in grow.iter().enumerate() {
                                    let base = (t * stride) as isize - *pad as isize;
                                    for k in 0..kw {
                                        let i = base + k as isize;
                                        if i >= 0 && (i as usize) < len {
                                            let i = i as usize;
                                            gx[xoff + i] += gv * ws[woff + k];
                                            gw[woff + k] += gv * xs[xoff + i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let bshape = self.shape(*b).to_vec();
                    acc(&mut grads, *x, Tensor::raw(xt.shape().to_vec(), gx));
                    acc(&mut grads, *w, Tensor::raw(wt.shape().to_vec(), gw));
                    acc(&mut grads, *b, Tensor::raw(bshape, gb));
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    acc(&mut grads, *a, g.reshape(shape)?);
                }
            }
        }
        Ok(param_grads)
    }

    /// Backprop from a scalar output with seed 1.
    pub fn backprop_scalar(&self, out: Var) -> Result<Gradients> {
        self.backprop(out, &Tensor::scalar(1.0))
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::raw(x.shape().to_vec(), data)
}

fn transpose(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = src[r * n + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_grad_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let grads = {
            let mut tape = Tape::new(&store);
            let xv = tape.param(x);
            let y = tape.square(xv).unwrap();
            tape.backprop_scalar(y).unwrap()
        };
        store.accumulate(&grads);
        assert_eq!(store.get(x).grad.item(), 6.0);
    }

    #[test]
    fn unused_param_has_zero_grad() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let unused = store.add("unused", Tensor::scalar(1.0));
        let grads = {
            let mut tape = Tape::new(&store);
            let xv = tape.param(x);
            let _ = tape.param(unused);
            let y = tape.square(xv).unwrap();
            tape.backprop_scalar(y).unwrap()
        };
        store.accumulate(&grads);
        assert_eq!(store.get(unused).grad.item(), 0.0);
    }

    #[test]
    fn backprop_from_foreign_var_fails() {
        let mut a = Tape::detached();
        let v = a.input(Tensor::scalar(1.0));
        let b = Tape::detached();
        assert!(matches!(b.backprop_scalar(v), Err(NumError::NoForward)));
    }

    #[test]
    fn conv_adjacent_pairs() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.input(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv_rejects_wide_kernel() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::zeros(&[1, 1, 2]));
        let w = tape.input(Tensor::zeros(&[1, 1, 3]));
        let b = tape.input(Tensor::zeros(&[1]));
        assert!(tape.conv1d(x, w, b, 1, 0).is_err());
        assert!(tape.conv1d(x, w, b, 1, 1).is_ok());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::detached();
        let l = tape.input(Tensor::zeros(&[3, 256]));
        let ce = tape.cross_entropy(l, &[0, 5, 255]).unwrap();
        assert!((tape.value(ce).item() - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sign_maps_zero_to_minus_one() {
        let mut tape = Tape::detached();
        let z = tape.input(Tensor::new(vec![1, 3], vec![0.0, 1e-300, -2.0]).unwrap());
        let s = tape.sign_ste(z).unwrap();
        assert_eq!(tape.value(s).data(), &[-1.0, 1.0, -1.0]);
    }
}
