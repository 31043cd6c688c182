//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and enough
//! bookkeeping to push gradients back to its inputs. Nodes only reference
//! earlier nodes, so the tape is always in topological order and a single
//! reverse sweep visits each operation once.
//!
//! Parameters are read in place from a [`ParamStore`]; their gradients come
//! back from [`Tape::backward`] as a [`Gradients`] map and never touch the
//! store until the caller decides which group to update.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Id reserved for padding tokens. Gathered padding rows are constant.
pub const PAD_ID: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv1d { input: Var, filters: Var, bias: Var },
    Map { input: Var, act: Activation },
    ConcatRows(Vec<Var>),
    Concat(Vec<Var>),
    // flat input offsets of the selected entries, `k` per output column
    TopKMean { input: Var, k: usize, picks: Vec<usize> },
    Dense { input: Var, weight: Var, bias: Var, act: Activation },
    Gather { table: Var, ids: Vec<usize> },
    SumRows(Var),
    Softmax(Var),
    SoftmaxXent { logits: Var, gold: usize, probs: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    LogClamped { input: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Vec<Var>),
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    // rows known to be constant zero with no gradient (gathered padding)
    frozen_rows: Option<Vec<bool>>,
}

#[derive(Debug)]
pub struct Tape<'a> {
    params: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    // one node per parameter, so its gradient accumulates in one buffer
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A tape with no parameter store; inputs come from [`Tape::input`].
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_params(params: &'a ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            frozen_rows: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.expect("param node without store").get(id).values(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Gradient of the last backward sweep's loss with respect to `v`.
    /// Unreachable nodes report zeros.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.value(v).len()],
        }
    }

    /// A differentiable input owned by the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Input, true)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Vec::new(),
            op: Op::Param(id),
            needs_grad: true,
            frozen_rows: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Valid (unpadded) convolution over the time axis, full width over
    /// the embedding axis: `out[t,f] = bias[f] + sum_{w,d} x[t+w,d] * k[f,w,d]`.
    pub fn conv1d(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(filters), self.shape(bias));
        if xs.len() != 2 || ks.len() != 3 || bs.len() != 1 || ks[2] != xs[1] || bs[0] != ks[0] {
            return Err(Error::invalid(format!(
                "conv1d shape mismatch: input {xs:?}, filters {ks:?}, bias {bs:?}"
            )));
        }
        let (t_len, dim) = (xs[0], xs[1]);
        let (n_f, width) = (ks[0], ks[1]);
        if t_len < width {
            return Err(Error::invalid(format!(
                "conv1d shape mismatch: input {xs:?} shorter than filters {ks:?}"
            )));
        }
        let t_out = t_len - width + 1;
        let x = self.value(input);
        let k = self.value(filters);
        let b = self.value(bias);
        let mut out = Vec::with_capacity(t_out * n_f);
        for _ in 0..t_out {
            out.extend_from_slice(b);
        }
        for r in 0..t_len {
            let row = &x[r * dim..(r + 1) * dim];
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            for w in 0..width.min(r + 1) {
                let t = r - w;
                if t >= t_out {
                    continue;
                }
                let dst = &mut out[t * n_f..(t + 1) * n_f];
                for (f, o) in dst.iter_mut().enumerate() {
                    let kf = &k[(f * width + w) * dim..(f * width + w + 1) * dim];
                    *o += dot(row, kf);
                }
            }
        }
        let needs = self.needs(input) || self.needs(filters) || self.needs(bias);
        Ok(self.push(
            vec![t_out, n_f],
            out,
            Op::Conv1d {
                input,
                filters,
                bias,
            },
            needs,
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Activation::Sigmoid)
    }

    fn map(&mut self, input: Var, act: Activation) -> Var {
        let value = self.value(input).iter().map(|&z| act.apply(z)).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(shape, value, Op::Map { input, act }, needs)
    }

    /// Joins `[T_i x F]` matrices along the time axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of zero parts"))?;
        let cols = match self.shape(*first) {
            [_, c] => *c,
            s => return Err(Error::invalid(format!("concat_rows expects matrices, got {s:?}"))),
        };
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            match self.shape(p) {
                [r, c] if *c == cols => rows += r,
                s => {
                    return Err(Error::invalid(format!(
                        "concat_rows shape mismatch: {s:?} vs [_, {cols}]"
                    )))
                }
            }
            value.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, cols], value, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Flattens and joins any number of tensors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero parts"));
        }
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![value.len()], value, Op::Concat(parts.to_vec()), needs))
    }

    /// Column-wise max over the time axis of a `[T x F]` matrix.
    /// Ties go to the lowest time index.
    pub fn max_pool(&mut self, input: Var) -> Result<Var> {
        self.top_k_mean(input, 1, "max_pool")
    }

    /// Column-wise mean of the `k` largest entries of a `[T x F]` matrix.
    pub fn avg_kmax_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        self.top_k_mean(input, k, "avg_kmax_pool")
    }

    fn top_k_mean(&mut self, input: Var, k: usize, what: &str) -> Result<Var> {
        let (t_len, cols) = match self.shape(input) {
            [t, f] => (*t, *f),
            s => return Err(Error::invalid(format!("{what} expects [T x F], got {s:?}"))),
        };
        if k < 1 || k > t_len {
            return Err(Error::invalid(format!(
                "{what}: k must lie in [1, {t_len}], got {k}"
            )));
        }
        let x = self.value(input);
        let mut picks = Vec::with_capacity(cols * k);
        let mut out = Vec::with_capacity(cols);
        let mut best: Vec<usize> = Vec::with_capacity(k);
        for f in 0..cols {
            best.clear();
            for t in 0..t_len {
                let v = x[t * cols + f];
                // strict comparison keeps earlier indices ahead on ties
                let pos = best
                    .iter()
                    .position(|&b| v > x[b * cols + f])
                    .unwrap_or(best.len());
                if pos < k {
                    if best.len() == k {
                        best.pop();
                    }
                    best.insert(pos, t);
                }
            }
            let mut sum = 0.0;
            for &t in &best {
                sum += x[t * cols + f];
                picks.push(t * cols + f);
            }
            out.push(sum / k as f64);
        }
        let needs = self.needs(input);
        Ok(self.push(vec![cols], out, Op::TopKMean { input, k, picks }, needs))
    }

    /// `act(weight * input + bias)` for a vector input.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var, act: Activation) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let n = self.value(input).len();
        if ws.len() != 2 || ws[1] != n || bs.len() != 1 || bs[0] != ws[0] {
            return Err(Error::invalid(format!(
                "dense shape mismatch: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let m = ws[0];
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let out = (0..m)
            .map(|i| act.apply(b[i] + dot(&w[i * n..(i + 1) * n], x)))
            .collect();
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![m],
            out,
            Op::Dense {
                input,
                weight,
                bias,
                act,
            },
            needs,
        ))
    }

    /// Row lookup into a `[V x D]` table. Rows for [`PAD_ID`] are treated as
    /// constants and never receive gradient.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => return Err(Error::invalid(format!("gather expects a [V x D] table, got {s:?}"))),
        };
        if ids.is_empty() {
            return Err(Error::invalid("gather of an empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of size {vocab}"
            )));
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            value.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let needs = self.needs(table);
        let frozen = ids.iter().map(|&i| i == PAD_ID).collect();
        let v = self.push(
            vec![ids.len(), dim],
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        );
        self.nodes[v.0].frozen_rows = Some(frozen);
        Ok(v)
    }

    pub fn sum_rows(&mut self, input: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(input) {
            [r, c] => (*r, *c),
            s => return Err(Error::invalid(format!("sum_rows expects a matrix, got {s:?}"))),
        };
        let x = self.value(input);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let needs = self.needs(input);
        Ok(self.push(vec![cols], out, Op::SumRows(input), needs))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let probs = softmax(self.value(logits));
        if probs.len() < 2 {
            return Err(Error::invalid("softmax needs at least two classes"));
        }
        let needs = self.needs(logits);
        Ok(self.push(vec![probs.len()], probs, Op::Softmax(logits), needs))
    }

    /// Cross-entropy `-ln softmax(logits)[gold]` as a scalar node.
    pub fn softmax_xent(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let probs = softmax(self.value(logits));
        if probs.len() < 2 {
            return Err(Error::invalid("softmax needs at least two classes"));
        }
        if gold >= probs.len() {
            return Err(Error::invalid(format!(
                "gold class {gold} out of range for {} classes",
                probs.len()
            )));
        }
        let loss = -log_softmax_at(self.value(logits), gold);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                gold,
                probs,
            },
            needs,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, value, Op::Scale(x, c), needs)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| 1.0 - v).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, value, Op::OneMinus(x), needs)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|v| v.clamp(lo, hi).ln())
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, value, Op::LogClamped { input: x, lo, hi }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("mean of an empty batch"));
        }
        let mut s = 0.0;
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(Error::invalid(format!(
                    "mean expects scalars, got shape {:?}",
                    self.shape(x)
                )));
            }
            s += self.value(x)[0];
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(vec![1], vec![s / xs.len() as f64], Op::Mean(xs.to_vec()), needs))
    }

    /// Squared Euclidean distance between two equal-shape tensors.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sq_dist")?;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![s], Op::SqDist(a, b), needs))
    }

    /// Reverse sweep from a scalar `loss`. Node gradients stay readable via
    /// [`Tape::grad`]; parameter gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.add(*id, g),
            Op::Conv1d {
                input,
                filters,
                bias,
            } => {
                let (t_len, dim) = (self.shape(*input)[0], self.shape(*input)[1]);
                let (n_f, width) = (self.shape(*filters)[0], self.shape(*filters)[1]);
                let t_out = t_len - width + 1;
                let x = self.value(*input);
                let k = self.value(*filters);
                if self.needs(*bias) {
                    let gb = slot(grads, *bias, n_f);
                    for t in 0..t_out {
                        for f in 0..n_f {
                            gb[f] += g[t * n_f + f];
                        }
                    }
                }
                let frozen = self.node(*input).frozen_rows.as_deref();
                let want_x = self.needs(*input);
                let want_k = self.needs(*filters);
                let mut gx = if want_x { Some(vec![0.0; t_len * dim]) } else { None };
                let mut gk = if want_k { Some(vec![0.0; n_f * width * dim]) } else { None };
                for r in 0..t_len {
                    let row = &x[r * dim..(r + 1) * dim];
                    let row_zero = row.iter().all(|&v| v == 0.0);
                    let row_frozen = frozen.is_some_and(|fr| fr[r]);
                    let do_k = want_k && !row_zero;
                    let do_x = want_x && !row_frozen;
                    if !do_k && !do_x {
                        continue;
                    }
                    for w in 0..width.min(r + 1) {
                        let t = r - w;
                        if t >= t_out {
                            continue;
                        }
                        for f in 0..n_f {
                            let go = g[t * n_f + f];
                            if go == 0.0 {
                                continue;
                            }
                            let off = (f * width + w) * dim;
                            if do_k {
                                let gk = gk.as_mut().unwrap();
                                axpy(go, row, &mut gk[off..off + dim]);
                            }
                            if do_x {
                                let gx = gx.as_mut().unwrap();
                                axpy(go, &k[off..off + dim], &mut gx[r * dim..(r + 1) * dim]);
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    add_into(slot(grads, *input, t_len * dim), &gx);
                }
                if let Some(gk) = gk {
                    add_into(slot(grads, *filters, n_f * width * dim), &gk);
                }
            }
            Op::Map { input, act } => {
                if self.needs(*input) {
                    let y = &node.value;
                    let gi = slot(grads, *input, y.len());
                    for j in 0..y.len() {
                        gi[j] += g[j] * act.slope(y[j]);
                    }
                }
            }
            Op::ConcatRows(parts) | Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::TopKMean { input, k, picks } => {
                if self.needs(*input) {
                    let n = self.value(*input).len();
                    let gi = slot(grads, *input, n);
                    let scale = 1.0 / *k as f64;
                    for (f, chunk) in picks.chunks(*k).enumerate() {
                        for &p in chunk {
                            gi[p] += g[f] * scale;
                        }
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                act,
            } => {
                let y = &node.value;
                let m = y.len();
                let x = self.value(*input);
                let n = x.len();
                let gz: Vec<f64> = (0..m).map(|j| g[j] * act.slope(y[j])).collect();
                if self.needs(*bias) {
                    add_into(slot(grads, *bias, m), &gz);
                }
                if self.needs(*weight) {
                    let gw = slot(grads, *weight, m * n);
                    for j in 0..m {
                        if gz[j] != 0.0 {
                            axpy(gz[j], x, &mut gw[j * n..(j + 1) * n]);
                        }
                    }
                }
                if self.needs(*input) {
                    let w = self.value(*weight);
                    let gx = slot(grads, *input, n);
                    for j in 0..m {
                        if gz[j] != 0.0 {
                            axpy(gz[j], &w[j * n..(j + 1) * n], gx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let (v, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                    let gt = slot(grads, *table, v * d);
                    for (r, &id) in ids.iter().enumerate() {
                        if id == PAD_ID {
                            continue;
                        }
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SumRows(input) => {
                if self.needs(*input) {
                    let cols = g.len();
                    let n = self.value(*input).len();
                    let gi = slot(grads, *input, n);
                    for row in gi.chunks_mut(cols) {
                        add_into(row, g);
                    }
                }
            }
            Op::Softmax(logits) => {
                if self.needs(*logits) {
                    let p = &node.value;
                    let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    let gl = slot(grads, *logits, p.len());
                    for j in 0..p.len() {
                        gl[j] += p[j] * (g[j] - inner);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                gold,
                probs,
            } => {
                if self.needs(*logits) {
                    let gl = slot(grads, *logits, probs.len());
                    for j in 0..probs.len() {
                        let target = if j == *gold { 1.0 } else { 0.0 };
                        gl[j] += g[0] * (probs[j] - target);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.needs(*b) {
                    axpy(-1.0, g, slot(grads, *b, g.len()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    axpy(*c, g, slot(grads, *x, g.len()));
                }
            }
            Op::OneMinus(x) => {
                if self.needs(*x) {
                    axpy(-1.0, g, slot(grads, *x, g.len()));
                }
            }
            Op::LogClamped { input, lo, hi } => {
                if self.needs(*input) {
                    let xv = self.value(*input);
                    let gi = slot(grads, *input, g.len());
                    for j in 0..g.len() {
                        if xv[j] > *lo && xv[j] < *hi {
                            gi[j] += g[j] / xv[j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    slot(grads, *x, n).iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(xs) => {
                let share = g[0] / xs.len() as f64;
                for &x in xs {
                    if self.needs(x) {
                        slot(grads, x, 1)[0] += share;
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| 2.0 * g[0] * (x - y)).collect();
                if self.needs(*a) {
                    add_into(slot(grads, *a, diff.len()), &diff);
                }
                if self.needs(*b) {
                    axpy(-1.0, &diff, slot(grads, *b, diff.len()));
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], j: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln() + m;
    logits[j] - lse
}
