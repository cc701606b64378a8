//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Tape`] borrows the [`ParamStore`] immutably, records every operation
//! performed through it and, on [`Tape::backward`], returns the gradients of
//! a scalar with respect to every trainable parameter it touched. Tapes are
//! rebuilt for every training example; nothing persists between steps.
//!
//! Frozen parameters and constants do not require gradients, and neither does
//! anything computed only from them, so a frozen language model costs no
//! backward work.

use crate::ctc;
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { w: Var, b: Var, x: Var },
    MatVec { w: Var, x: Var },
    MatTVec { w: Var, x: Var },
    MatMulT { x: Var, w: Var },
    Add(Var, Var),
    AddRowBroadcast { m: Var, v: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    StackRows(Vec<Var>),
    Row { m: Var, index: usize },
    LogSoftmax(Var),
    Softmax(Var),
    Pick { x: Var, index: usize },
    WeightedSum(Vec<(Var, f64)>),
    Conv1d { filter: Var, x: Var },
    /// Loss whose gradient with respect to `logp` was computed eagerly.
    Precomputed { input: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates; nothing requires gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut t = Tape::new(store);
        t.grad_enabled = false;
        t
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let requires_grad = self.grad_enabled && !self.store.get(id).frozen;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn vec_len(&self, v: Var, op: &'static str) -> Result<usize> {
        match self.shape(v) {
            &[n] => Ok(n),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, self.shape(v), &[]))
    }

    /// `W x + b`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let out = tensor::linear(self.value(w), self.value(b), self.value(x))?;
        Ok(self.push(out, Op::Linear { w, b, x }, &[w, b, x]))
    }

    /// `W x` with `W: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(w, "matvec")?;
        if self.shape(x) != [n] {
            return Err(Error::shape("matvec", self.shape(w), self.shape(x)));
        }
        let mut out = vec![0.0; m];
        tensor::matvec_acc(self.data(w), m, n, self.data(x), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::MatVec { w, x }, &[w, x]))
    }

    /// `Wᵀ x` with `W: [m, n]`, `x: [m]`.
    pub fn mat_t_vec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(w, "mat_t_vec")?;
        if self.shape(x) != [m] {
            return Err(Error::shape("mat_t_vec", self.shape(w), self.shape(x)));
        }
        let mut out = vec![0.0; n];
        for (row, &xi) in self.data(w).chunks_exact(n).zip(self.data(x)) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r * xi;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::MatTVec { w, x }, &[w, x]))
    }

    /// `X Wᵀ` with `X: [t, n]`, `W: [m, n]`, giving `[t, m]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, n) = self.mat_dims(x, "matmul_t")?;
        let (m, n2) = self.mat_dims(w, "matmul_t")?;
        if n != n2 {
            return Err(Error::shape("matmul_t", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; t * m];
        let wd = self.data(w);
        for (orow, xrow) in out.chunks_exact_mut(m).zip(self.data(x).chunks_exact(n)) {
            for (o, wrow) in orow.iter_mut().zip(wd.chunks_exact(n)) {
                *o = tensor::dot(xrow, wrow);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![t, m], out), Op::MatMulT { x, w }, &[x, w]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Adds the vector `v` to every row of `m`.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (_, k) = self.mat_dims(m, "add_row_broadcast")?;
        if self.shape(v) != [k] {
            return Err(Error::shape("add_row_broadcast", self.shape(m), self.shape(v)));
        }
        let vd = self.data(v);
        let mut out = self.data(m).to_vec();
        for row in out.chunks_exact_mut(k) {
            row.iter_mut().zip(vd).for_each(|(o, x)| *o += x);
        }
        let shape = self.shape(m).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRowBroadcast { m, v }, &[m, v]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), &[x])
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.scalar(s);
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::ScaleBy { x, s }, &[x, s]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, tensor::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            self.vec_len(p, "concat")?;
            out.extend_from_slice(self.data(p));
        }
        let n = out.len();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.vec_len(x, "slice")?;
        if start + len > n || len == 0 {
            return Err(Error::shape("slice", &[n], &[start, len]));
        }
        let out = self.data(x)[start..start + len].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len], out), Op::Slice { x, start }, &[x]))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::Argument("stack_rows of nothing".into()))?;
        let n = self.vec_len(first, "stack_rows")?;
        let mut out = Vec::with_capacity(n * rows.len());
        for &r in rows {
            if self.shape(r) != [n] {
                return Err(Error::shape("stack_rows", &[n], self.shape(r)));
            }
            out.extend_from_slice(self.data(r));
        }
        let t = rows.len();
        Ok(self.push(Tensor::from_parts(vec![t, n], out), Op::StackRows(rows.to_vec()), rows))
    }

    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(m, "row")?;
        if index >= r {
            return Err(Error::Argument(format!("row {index} out of range for {r} rows")));
        }
        let out = self.value(m).row(index).to_vec();
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::Row { m, index }, &[m]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = tensor::activation(tensor::Activation::LogSoftmax, self.value(x));
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = tensor::activation(tensor::Activation::Softmax, self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// The single element `x[index]` of a vector, as a `[1]` tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.vec_len(x, "pick")?;
        if index >= n {
            return Err(Error::Argument(format!("index {index} out of range for length {n}")));
        }
        let v = self.data(x)[index];
        Ok(self.push(Tensor::from_parts(vec![1], vec![v]), Op::Pick { x, index }, &[x]))
    }

    /// `Σ cᵢ xᵢ` over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Argument("weighted_sum of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(v)));
            }
            out.iter_mut().zip(self.data(v)).for_each(|(o, x)| *o += c * x);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::WeightedSum(terms.to_vec()), &inputs))
    }

    /// Same-padded 1-D convolution of a length-`t` signal with `c` filters of
    /// odd width `w`, giving `[t, c]`.
    pub fn conv1d(&mut self, filter: Var, x: Var) -> Result<Var> {
        let (c, w) = self.mat_dims(filter, "conv1d")?;
        if w % 2 == 0 {
            return Err(Error::Argument(format!("conv1d width {w} must be odd")));
        }
        let t = self.vec_len(x, "conv1d")?;
        let pad = w / 2;
        let fd = self.data(filter);
        let xd = self.data(x);
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..w {
                    let src = i + k;
                    if src >= pad && src - pad < t {
                        acc += fd[ch * w + k] * xd[src - pad];
                    }
                }
                out[i * c + ch] = acc;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![t, c], out), Op::Conv1d { filter, x }, &[filter, x]))
    }

    /// CTC negative log-likelihood of `labels` under per-frame log
    /// probabilities `logp: [T, K]`.
    pub fn ctc_loss(&mut self, logp: Var, labels: &[usize], blank: usize) -> Result<Var> {
        let value = self.value(logp);
        let (loss, grad) = ctc::loss_and_grad(value, labels, blank)?;
        let need = self.requires_grad(logp);
        let grad = if need { grad } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::Precomputed { input: logp, grad },
            &[logp],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = ParamGrads::with_len(self.store.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut ParamGrads,
    ) {
        let node = &self.nodes[i];
        let y = self.value(Var(i)).data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.add(*id, g),
            Op::Linear { w, b, x } => {
                let (m, n) = self.value(*w).dims2().unwrap();
                self.accum(grads, *b, |gb| add_into(gb, g));
                self.accum_outer(grads, *w, g, self.data(*x));
                let wd = self.data(*w);
                self.accum(grads, *x, |gx| mat_t_vec_acc(wd, m, n, g, gx));
            }
            Op::MatVec { w, x } => {
                let (m, n) = self.value(*w).dims2().unwrap();
                self.accum_outer(grads, *w, g, self.data(*x));
                let wd = self.data(*w);
                self.accum(grads, *x, |gx| mat_t_vec_acc(wd, m, n, g, gx));
            }
            Op::MatTVec { w, x } => {
                // y = Wᵀx: dW[r][c] += x[r] g[c], dx[r] += W[r]·g
                let (_, n) = self.value(*w).dims2().unwrap();
                self.accum_outer(grads, *w, self.data(*x), g);
                let wd = self.data(*w);
                self.accum(grads, *x, |gx| {
                    for (o, row) in gx.iter_mut().zip(wd.chunks_exact(n)) {
                        *o += tensor::dot(row, g);
                    }
                });
            }
            Op::MatMulT { x, w } => {
                let (t, n) = self.value(*x).dims2().unwrap();
                let (m, _) = self.value(*w).dims2().unwrap();
                let xd = self.data(*x);
                let wd = self.data(*w);
                self.accum(grads, *x, |gx| {
                    for r in 0..t {
                        let grow = &g[r * m..(r + 1) * m];
                        let gxr = &mut gx[r * n..(r + 1) * n];
                        for (gj, wrow) in grow.iter().zip(wd.chunks_exact(n)) {
                            gxr.iter_mut().zip(wrow).for_each(|(o, wv)| *o += gj * wv);
                        }
                    }
                });
                self.accum(grads, *w, |gw| {
                    for r in 0..t {
                        let grow = &g[r * m..(r + 1) * m];
                        let xrow = &xd[r * n..(r + 1) * n];
                        for (gj, gwrow) in grow.iter().zip(gw.chunks_exact_mut(n)) {
                            gwrow.iter_mut().zip(xrow).for_each(|(o, xv)| *o += gj * xv);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| add_into(ga, g));
                self.accum(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddRowBroadcast { m, v } => {
                let k = self.value(*v).len();
                self.accum(grads, *m, |gm| add_into(gm, g));
                self.accum(grads, *v, |gv| {
                    for row in g.chunks_exact(k) {
                        add_into(gv, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                self.accum(grads, *a, |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(x, c) => self.accum(grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
            }),
            Op::ScaleBy { x, s } => {
                let c = self.scalar(*s);
                let xd = self.data(*x);
                self.accum(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
                });
                self.accum(grads, *s, |gs| gs[0] += tensor::dot(g, xd));
            }
            Op::Sigmoid(x) => self.accum(grads, *x, |gx| {
                for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }),
            Op::Tanh(x) => self.accum(grads, *x, |gx| {
                for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }),
            Op::Relu(x) => self.accum(grads, *x, |gx| {
                for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *o += gi;
                    }
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accum(grads, p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                self.accum(grads, *x, |gx| add_into(&mut gx[*start..*start + g.len()], g));
            }
            Op::StackRows(rows) => {
                let n = self.value(rows[0]).len();
                for (r, &v) in rows.iter().enumerate() {
                    self.accum(grads, v, |gv| add_into(gv, &g[r * n..(r + 1) * n]));
                }
            }
            Op::Row { m, index } => {
                let n = g.len();
                self.accum(grads, *m, |gm| add_into(&mut gm[index * n..(index + 1) * n], g));
            }
            Op::LogSoftmax(x) => {
                let k = *self.shape(*x).last().unwrap();
                self.accum(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(y.chunks_exact(k)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let k = *self.shape(*x).last().unwrap();
                self.accum(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(y.chunks_exact(k)) {
                        let inner = tensor::dot(gr, yr);
                        for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - inner);
                        }
                    }
                });
            }
            Op::Pick { x, index } => self.accum(grads, *x, |gx| gx[*index] += g[0]),
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accum(grads, v, |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
                    });
                }
            }
            Op::Conv1d { filter, x } => {
                let (c, w) = self.value(*filter).dims2().unwrap();
                let t = self.value(*x).len();
                let pad = w / 2;
                let fd = self.data(*filter);
                let xd = self.data(*x);
                self.accum(grads, *filter, |gf| {
                    for i in 0..t {
                        for ch in 0..c {
                            let gi = g[i * c + ch];
                            for k in 0..w {
                                let src = i + k;
                                if src >= pad && src - pad < t {
                                    gf[ch * w + k] += gi * xd[src - pad];
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *x, |gx| {
                    for i in 0..t {
                        for ch in 0..c {
                            let gi = g[i * c + ch];
                            for k in 0..w {
                                let src = i + k;
                                if src >= pad && src - pad < t {
                                    gx[src - pad] += gi * fd[ch * w + k];
                                }
                            }
                        }
                    }
                });
            }
            Op::Precomputed { input, grad } => {
                let s = g[0];
                self.accum(grads, *input, |gi| {
                    gi.iter_mut().zip(grad).for_each(|(o, d)| *o += s * d);
                });
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(slot);
    }

    /// `dW += a ⊗ b` for `W: [len(a), len(b)]`.
    fn accum_outer(&self, grads: &mut [Option<Vec<f64>>], w: Var, a: &[f64], b: &[f64]) {
        self.accum(grads, w, |gw| {
            for (row, ai) in gw.chunks_exact_mut(b.len()).zip(a) {
                if *ai != 0.0 {
                    row.iter_mut().zip(b).for_each(|(o, bj)| *o += ai * bj);
                }
            }
        });
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `out += Wᵀ g` for `W: [m, n]`.
#[inline]
fn mat_t_vec_acc(w: &[f64], _m: usize, n: usize, g: &[f64], out: &mut [f64]) {
    for (row, gi) in w.chunks_exact(n).zip(g) {
        if *gi != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, wv)| *o += gi * wv);
        }
    }
}
