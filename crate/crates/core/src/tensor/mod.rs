//! Dense tensor math with reverse-mode automatic differentiation.
//!
//! Values are 32-bit floats; reductions and inner products accumulate in
//! 64-bit so sums are reproducible across platforms. A [`Tape`] records the
//! forward graph of one rollout; [`Tape::backward`] walks it once in reverse
//! creation order and deposits parameter gradients into a [`ParamStore`].
//!
//! Only the shapes the models need are supported: vectors and matrices.
//! There is no broadcasting beyond matrix-vector products.

mod ckpt;
mod gradcheck;
mod nn;
mod store;

pub use ckpt::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use nn::{attention, bilstm_encode, lstm_cell, LstmWeights};
pub use store::{adam_step, rmsprop_step, AdamConfig, ParamStore, RmsPropConfig};

use thiserror::Error;

/// Errors raised by tensor construction, graph ops, and optimizers.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target index {index} out of range for {classes} classes")]
    BadTarget { index: usize, classes: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("no gradient populated for `{0}`")]
    MissingGrad(String),
    #[error("{0}")]
    Invalid(String),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// A plain value: shape plus flat row-major f32 data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns for 2-D tensors.
    pub fn dims2(&self) -> TensorResult<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Invalid(format!("expected 2-D, got {other:?}"))),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(Var, Var),
    MatVec(Var, Var),
    /// W^T * x for W of shape [m, n] and x of shape [m].
    MatVecT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    CrossEntropy(Var, usize),
    Slice(Var, usize, usize),
    Concat(Vec<Var>),
    /// Rows stacked into a matrix [k, n].
    Stack(Vec<Var>),
    EmbedRow(Var, usize),
    Dropout(Var, Vec<f32>),
    Sum(Var),
    Mean(Var),
    Detach,
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    /// f64 view of scalar outputs, kept so finite-difference checks are not
    /// limited by the final f32 rounding of a long reduction.
    value64: Option<f64>,
    needs_grad: bool,
}

/// Records one forward pass. Confined to a single rollout; parameters enter
/// through [`Tape::param`] and gradients leave through [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: std::collections::BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: std::collections::BTreeMap::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> Var {
        self.push64(op, shape, data, None, needs_grad)
    }

    fn push64(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f32>,
        value64: Option<f64>,
        needs_grad: bool,
    ) -> Var {
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            shape,
            data,
            value64,
            needs_grad: needs_grad && self.grad_enabled,
        });
        id
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx()].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.idx()].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx()];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
        }
    }

    /// Scalar value, using the f64 accumulation when the op tracked one.
    pub fn scalar64(&self, v: Var) -> TensorResult<f64> {
        let n = &self.nodes[v.idx()];
        if n.data.len() != 1 {
            return Err(TensorError::NotScalar(n.shape.clone()));
        }
        Ok(n.value64.unwrap_or(n.data[0] as f64))
    }

    fn check_finite(&self, v: Var, op: &'static str) -> TensorResult<Var> {
        if self.nodes[v.idx()].data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t.shape, t.data, false)
    }

    /// Lease a named parameter onto the tape. Repeated calls for the same
    /// name return the same node so gradients accumulate once.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> TensorResult<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            t.shape.clone(),
            t.data.clone(),
            true,
        );
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (m, k) = self.value_dims2(a, "matmul")?;
        let (k2, n) = self.value_dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let da = &self.nodes[a.idx()].data;
        let db = &self.nodes[b.idx()].data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += da[i * k + t] as f64 * db[t * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(Op::MatMul(a, b), vec![m, n], out, needs);
        self.check_finite(v, "matmul")
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> TensorResult<Var> {
        let (m, n) = self.value_dims2(w, "matvec")?;
        if self.nodes[x.idx()].shape != [n] {
            return Err(self.mismatch("matvec", w, x));
        }
        let dw = &self.nodes[w.idx()].data;
        let dx = &self.nodes[x.idx()].data;
        let mut out = vec![0.0f32; m];
        for i in 0..m {
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += dw[i * n + j] as f64 * dx[j] as f64;
            }
            out[i] = acc as f32;
        }
        let needs = self.needs(w) || self.needs(x);
        let v = self.push(Op::MatVec(w, x), vec![m], out, needs);
        self.check_finite(v, "matvec")
    }

    /// `W^T x`: weights [m, n], input [m], output [n].
    pub fn matvec_t(&mut self, w: Var, x: Var) -> TensorResult<Var> {
        let (m, n) = self.value_dims2(w, "matvec_t")?;
        if self.nodes[x.idx()].shape != [m] {
            return Err(self.mismatch("matvec_t", w, x));
        }
        let dw = &self.nodes[w.idx()].data;
        let dx = &self.nodes[x.idx()].data;
        let mut out = vec![0.0f32; n];
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += dw[i * n + j] as f64 * dx[i] as f64;
            }
            out[j] = acc as f32;
        }
        let needs = self.needs(w) || self.needs(x);
        let v = self.push(Op::MatVecT(w, x), vec![n], out, needs);
        self.check_finite(v, "matvec_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> TensorResult<Var> {
        if self.nodes[a.idx()].shape != self.nodes[b.idx()].shape {
            return Err(self.mismatch(name, a, b));
        }
        let out: Vec<f32> = self.nodes[a.idx()]
            .data
            .iter()
            .zip(&self.nodes[b.idx()].data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.idx()].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        let v64 = if out.len() == 1 {
            let xa = self.nodes[a.idx()].value64.unwrap_or(self.nodes[a.idx()].data[0] as f64);
            let xb = self.nodes[b.idx()].value64.unwrap_or(self.nodes[b.idx()].data[0] as f64);
            Some(match name {
                "add" => xa + xb,
                "sub" => xa - xb,
                _ => xa * xb,
            })
        } else {
            None
        };
        let v = self.push64(op, shape, out, v64, needs);
        self.check_finite(v, name)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> TensorResult<Var> {
        let out: Vec<f32> = self.nodes[a.idx()].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.idx()].shape.clone();
        let needs = self.needs(a);
        let v64 = if out.len() == 1 {
            Some(self.nodes[a.idx()].value64.unwrap_or(self.nodes[a.idx()].data[0] as f64) * c as f64)
        } else {
            None
        };
        let v = self.push64(Op::Scale(a, c), shape, out, v64, needs);
        self.check_finite(v, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> TensorResult<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> TensorResult<Var> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> TensorResult<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f32) -> f32,
        op: Op,
        name: &'static str,
    ) -> TensorResult<Var> {
        let out: Vec<f32> = self.nodes[a.idx()].data.iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.idx()].shape.clone();
        let needs = self.needs(a);
        let v = self.push(op, shape, out, needs);
        self.check_finite(v, name)
    }

    /// Softmax over a vector, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> TensorResult<Var> {
        if self.nodes[a.idx()].shape.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "softmax expects a vector, got {:?}",
                self.nodes[a.idx()].shape
            )));
        }
        let d = &self.nodes[a.idx()].data;
        let out = softmax_f32(d);
        let shape = self.nodes[a.idx()].shape.clone();
        let needs = self.needs(a);
        let v = self.push(Op::Softmax(a), shape, out, needs);
        self.check_finite(v, "softmax")
    }

    /// `-log softmax(logits)[target]`, computed via a stabilized
    /// log-sum-exp in f64.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> TensorResult<Var> {
        let d = &self.nodes[logits.idx()].data;
        if self.nodes[logits.idx()].shape.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "cross_entropy expects a logit vector, got {:?}",
                self.nodes[logits.idx()].shape
            )));
        }
        if target >= d.len() {
            return Err(TensorError::BadTarget {
                index: target,
                classes: d.len(),
            });
        }
        let loss = cross_entropy_f64(d, target);
        let needs = self.needs(logits);
        let v = self.push64(
            Op::CrossEntropy(logits, target),
            vec![1],
            vec![loss as f32],
            Some(loss),
            needs,
        );
        self.check_finite(v, "cross_entropy")
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> TensorResult<Var> {
        let node = &self.nodes[a.idx()];
        if node.shape.len() != 1 || start + len > node.data.len() {
            return Err(TensorError::Invalid(format!(
                "slice [{start}, {start}+{len}) out of bounds for shape {:?}",
                node.shape
            )));
        }
        let out = node.data[start..start + len].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Slice(a, start, len), vec![len], out, needs))
    }

    pub fn concat(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        let mut needs = false;
        for p in parts {
            let n = &self.nodes[p.idx()];
            if n.shape.len() != 1 {
                return Err(TensorError::Invalid(format!(
                    "concat expects vectors, got {:?}",
                    n.shape
                )));
            }
            out.extend_from_slice(&n.data);
            needs |= n.needs_grad;
        }
        let len = out.len();
        Ok(self.push(Op::Concat(parts.to_vec()), vec![len], out, needs))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> TensorResult<Var> {
        if rows.is_empty() {
            return Err(TensorError::Invalid("stack of zero rows".into()));
        }
        let width = self.nodes[rows[0].idx()].data.len();
        let mut out = Vec::with_capacity(rows.len() * width);
        let mut needs = false;
        for r in rows {
            let n = &self.nodes[r.idx()];
            if n.shape.len() != 1 || n.data.len() != width {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: n.shape.clone(),
                });
            }
            out.extend_from_slice(&n.data);
            needs |= n.needs_grad;
        }
        Ok(self.push(Op::Stack(rows.to_vec()), vec![rows.len(), width], out, needs))
    }

    /// Row lookup into an embedding table [rows, width].
    pub fn embed_row(&mut self, table: Var, row: usize) -> TensorResult<Var> {
        let (rows, width) = self.value_dims2(table, "embed_row")?;
        if row >= rows {
            return Err(TensorError::BadTarget {
                index: row,
                classes: rows,
            });
        }
        let out = self.nodes[table.idx()].data[row * width..(row + 1) * width].to_vec();
        let needs = self.needs(table);
        Ok(self.push(Op::EmbedRow(table, row), vec![width], out, needs))
    }

    /// Inverted dropout: at train time zeroes with probability `p` and
    /// scales survivors by 1/(1-p); identity when `train` is false or p = 0.
    pub fn dropout<R: rand::Rng>(
        &mut self,
        a: Var,
        p: f32,
        train: bool,
        rng: &mut R,
    ) -> TensorResult<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout p={p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.nodes[a.idx()].data.len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f32> = self.nodes[a.idx()]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.nodes[a.idx()].shape.clone();
        let needs = self.needs(a);
        Ok(self.push(Op::Dropout(a, mask), shape, out, needs))
    }

    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        let acc: f64 = self.nodes[a.idx()].data.iter().map(|x| *x as f64).sum();
        let needs = self.needs(a);
        let v = self.push64(Op::Sum(a), vec![1], vec![acc as f32], Some(acc), needs);
        self.check_finite(v, "sum")
    }

    pub fn mean(&mut self, a: Var) -> TensorResult<Var> {
        let n = self.nodes[a.idx()].data.len().max(1) as f64;
        let acc: f64 = self.nodes[a.idx()].data.iter().map(|x| *x as f64).sum::<f64>() / n;
        let needs = self.needs(a);
        let v = self.push64(Op::Mean(a), vec![1], vec![acc as f32], Some(acc), needs);
        self.check_finite(v, "mean")
    }

    /// Identity forward, zero backward.
    pub fn detach(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.idx()];
        let (shape, data, v64) = (node.shape.clone(), node.data.clone(), node.value64);
        self.push64(Op::Detach, shape, data, v64, false)
    }

    fn value_dims2(&self, v: Var, op: &'static str) -> TensorResult<(usize, usize)> {
        match self.nodes[v.idx()].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Invalid(format!(
                "{op} expects a matrix, got {other:?}"
            ))),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.nodes[a.idx()].shape.clone(),
            rhs: self.nodes[b.idx()].shape.clone(),
        }
    }

    /// Reverse pass from a scalar loss. Parameter gradients are added into
    /// the store (repeated calls accumulate; the optimizer step zeroes).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> TensorResult<()> {
        let ln = &self.nodes[loss.idx()];
        if ln.data.len() != 1 {
            return Err(TensorError::NotScalar(ln.shape.clone()));
        }
        if !self.grad_enabled {
            return Err(TensorError::Invalid(
                "backward on a tape created without gradients".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.idx()] = Some(vec![1.0]);

        for i in (0..=loss.idx()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            if let Op::Leaf { param: Some(name) } = &self.nodes[i].op {
                store.add_grad(name, &g)?;
            }
        }
        Ok(())
    }

    fn accumulate_parents(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let mut add = |v: Var, contrib: Vec<f32>| {
            if !self.nodes[v.idx()].needs_grad {
                return;
            }
            match &mut grads[v.idx()] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(&contrib) {
                        *b += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf { .. } | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (m, k) = match self.nodes[a.idx()].shape.as_slice() {
                    [m, k] => (*m, *k),
                    _ => unreachable!(),
                };
                let n = self.nodes[b.idx()].shape[1];
                let da = &self.nodes[a.idx()].data;
                let db = &self.nodes[b.idx()].data;
                let mut ga = vec![0.0f32; m * k];
                for i2 in 0..m {
                    for t in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += g[i2 * n + j] as f64 * db[t * n + j] as f64;
                        }
                        ga[i2 * k + t] = acc as f32;
                    }
                }
                add(*a, ga);
                let mut gb = vec![0.0f32; k * n];
                for t in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i2 in 0..m {
                            acc += da[i2 * k + t] as f64 * g[i2 * n + j] as f64;
                        }
                        gb[t * n + j] = acc as f32;
                    }
                }
                add(*b, gb);
            }
            Op::MatVec(w, x) => {
                let (m, n) = match self.nodes[w.idx()].shape.as_slice() {
                    [m, n] => (*m, *n),
                    _ => unreachable!(),
                };
                let dw = &self.nodes[w.idx()].data;
                let dx = &self.nodes[x.idx()].data;
                let mut gw = vec![0.0f32; m * n];
                for i2 in 0..m {
                    for j in 0..n {
                        gw[i2 * n + j] = g[i2] * dx[j];
                    }
                }
                add(*w, gw);
                let mut gx = vec![0.0f32; n];
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for i2 in 0..m {
                        acc += dw[i2 * n + j] as f64 * g[i2] as f64;
                    }
                    gx[j] = acc as f32;
                }
                add(*x, gx);
            }
            Op::MatVecT(w, x) => {
                let (m, n) = match self.nodes[w.idx()].shape.as_slice() {
                    [m, n] => (*m, *n),
                    _ => unreachable!(),
                };
                let dw = &self.nodes[w.idx()].data;
                let dx = &self.nodes[x.idx()].data;
                let mut gw = vec![0.0f32; m * n];
                for i2 in 0..m {
                    for j in 0..n {
                        gw[i2 * n + j] = dx[i2] * g[j];
                    }
                }
                add(*w, gw);
                let mut gx = vec![0.0f32; m];
                for i2 in 0..m {
                    let mut acc = 0.0f64;
                    for j in 0..n {
                        acc += dw[i2 * n + j] as f64 * g[j] as f64;
                    }
                    gx[i2] = acc as f32;
                }
                add(*x, gx);
            }
            Op::Add(a, b) => {
                add(*a, g.to_vec());
                add(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                add(*a, g.to_vec());
                add(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da = &self.nodes[a.idx()].data;
                let db = &self.nodes[b.idx()].data;
                add(*a, g.iter().zip(db).map(|(x, y)| x * y).collect());
                add(*b, g.iter().zip(da).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => {
                add(*a, g.iter().map(|x| x * c).collect());
            }
            Op::Tanh(a) => {
                let y = &node.data;
                add(*a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
            }
            Op::Sigmoid(a) => {
                let y = &node.data;
                add(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect());
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.idx()].data;
                add(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let y = &node.data;
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| *gi as f64 * *yi as f64).sum();
                add(
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(gi, yi)| yi * (gi - dot as f32))
                        .collect(),
                );
            }
            Op::CrossEntropy(logits, target) => {
                let d = &self.nodes[logits.idx()].data;
                let p = softmax_f32(d);
                let gl: Vec<f32> = p
                    .iter()
                    .enumerate()
                    .map(|(j, pj)| {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        g[0] * (pj - onehot)
                    })
                    .collect();
                add(*logits, gl);
            }
            Op::Slice(a, start, len) => {
                let mut ga = vec![0.0f32; self.nodes[a.idx()].data.len()];
                ga[*start..*start + *len].copy_from_slice(g);
                add(*a, ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.idx()].data.len();
                    add(*p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Stack(rows) => {
                let width = self.nodes[rows[0].idx()].data.len();
                for (r, row) in rows.iter().enumerate() {
                    add(*row, g[r * width..(r + 1) * width].to_vec());
                }
            }
            Op::EmbedRow(table, row) => {
                let (_, width) = self.nodes[table.idx()].shape[..]
                    .try_into()
                    .map(|[r, c]: [usize; 2]| (r, c))
                    .unwrap();
                let mut gt = vec![0.0f32; self.nodes[table.idx()].data.len()];
                gt[row * width..(row + 1) * width].copy_from_slice(g);
                add(*table, gt);
            }
            Op::Dropout(a, mask) => {
                add(*a, g.iter().zip(mask).map(|(gi, m)| gi * m).collect());
            }
            Op::Sum(a) => {
                add(*a, vec![g[0]; self.nodes[a.idx()].data.len()]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.idx()].data.len().max(1) as f32;
                add(*a, vec![g[0] / n; self.nodes[a.idx()].data.len()]);
            }
        }
    }
}

/// `-log softmax(logits)[target]` as a plain f64, for scoring outside the
/// graph (sampling log-probs, confidence).
pub fn cross_entropy_scalar(logits: &[f32], target: usize) -> f64 {
    cross_entropy_f64(logits, target)
}

/// Parameter-initialization helpers shared by the models.
pub mod nn_init {
    use super::nn::{init_lstm, init_uniform};
    use super::{ParamStore, Tensor, TensorResult};
    use rand::Rng;

    pub fn insert_uniform<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        shape: Vec<usize>,
    ) -> TensorResult<()> {
        let fan_in = shape.last().copied().unwrap_or(1);
        let t = init_uniform(rng, shape, fan_in);
        store.insert(name, t)
    }

    pub fn insert_zeros(store: &mut ParamStore, name: &str, shape: Vec<usize>) -> TensorResult<()> {
        store.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_lstm<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> TensorResult<()> {
        init_lstm(store, rng, prefix, input, hidden)
    }
}

pub(crate) fn softmax_f32(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|x| ((x - m) as f64).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / z) as f32).collect()
}

pub(crate) fn cross_entropy_f64(logits: &[f32], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|x| (*x as f64 - m).exp()).sum();
    m + z.ln() - logits[target] as f64
}
