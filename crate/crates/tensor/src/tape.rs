//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the pullback. Nodes are only ever appended, so tape order is a
//! topological order and `backward` is a single reverse sweep.

use crate::array::numel;
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Value, b: Value },
    Transpose { a: Value },
    Add { a: Value, b: Value },
    Scale { a: Value, factor: F },
    ConcatLast { parts: Vec<Value> },
    SliceLast { a: Value, start: usize },
    ConcatFirst { parts: Vec<Value> },
    Reshape { a: Value },
    Relu { a: Value },
    Gelu { a: Value, tanh: Vec<F> },
    Map { a: Value, derivative: fn(F) -> F },
    Softmax { a: Value },
    LayerNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding { table: Value, indices: Vec<usize> },
    CrossEntropy {
        logits: Value,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    Sum { a: Value },
    Mean { a: Value },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    op: Op<F>,
    trainable: bool,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `tanh` through one `exp`, stable for large `|x|`.
fn fast_tanh<F: Scalar>(x: F) -> F {
    let e = (F::lit(-2.0) * x.abs()).exp();
    let t = (F::one() - e) / (F::one() + e);
    if x < F::zero() {
        -t
    } else {
        t
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, requires_grad: bool) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            trainable: false,
            requires_grad,
        });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn node(&self, v: Value) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf; its gradient is populated by `backward`.
    pub fn param(&mut self, t: &Tensor<F>) -> Value {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Value) -> &[F] {
        &self.node(v).data
    }

    pub fn to_tensor(&self, v: Value) -> Tensor<F> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node invariant")
    }

    pub fn grad(&self, v: Value) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Drops all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Matrix product. `a: [.., m, k]` with `b: [k, n]` contracts the last
    /// axis of `a`; `a: [p, m, k]` with `b: [p, k, n]` is a batched product.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (out_shape, data) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch("matmul", &sa, &sb));
            }
            let rows = numel(&sa) / k.max(1);
            let n = sb[1];
            let mut out = vec![F::zero(); rows * n];
            F::gemm(
                rows,
                k,
                n,
                F::one(),
                (self.data(a), k as isize, 1),
                (self.data(b), n as isize, 1),
                F::zero(),
                (&mut out, n as isize, 1),
            );
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (shape, out)
        } else {
            let batched = sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2];
            if !batched || sb[sb.len() - 2] != k {
                return Err(mismatch("matmul", &sa, &sb));
            }
            let m = sa[sa.len() - 2];
            let n = sb[sb.len() - 1];
            let batch = numel(&sa[..sa.len() - 2]);
            let mut out = vec![F::zero(); batch * m * n];
            let (da, db) = (self.data(a), self.data(b));
            for p in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    (&da[p * m * k..(p + 1) * m * k], k as isize, 1),
                    (&db[p * k * n..(p + 1) * k * n], n as isize, 1),
                    F::zero(),
                    (&mut out[p * m * n..(p + 1) * m * n], n as isize, 1),
                );
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (shape, out)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, data, Op::MatMul { a, b }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("rank {} < 2", s.len()),
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let src = self.data(a);
        let mut out = vec![F::zero(); src.len()];
        for p in 0..batch {
            let off = p * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Transpose { a }, rg))
    }

    /// Elementwise sum; `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let shape = sa.to_vec();
        let db = self.data(b);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_exact_mut(db.len().max(1)) {
            chunk.iter_mut().zip(db).for_each(|(x, &y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, a: Value, factor: F) -> Value {
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Scale { a, factor }, rg)
    }

    pub fn concat_last_dim(&mut self, parts: &[Value]) -> Result<Value> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_last_dim",
            reason: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        let lead = &s0[..s0.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[..s.len() - 1] != *lead {
                return Err(mismatch("concat_last_dim", &s0, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = s0.clone();
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_last_dim(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let s = self.shape(a).to_vec();
        let w = *s.last().unwrap();
        if start + len > w {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_last_dim",
                index: start + len,
                bound: w,
            });
        }
        let rows = numel(&s) / w.max(1);
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::SliceLast { a, start }, rg))
    }

    /// Concatenates along the leading axis.
    pub fn concat_first_dim(&mut self, parts: &[Value]) -> Result<Value> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_first_dim",
            reason: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[1..] != s0[1..] {
                return Err(mismatch("concat_first_dim", &s0, s));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = s0;
        shape[0] = lead;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::ConcatFirst {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        if numel(shape) != self.data(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, rg))
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let data = self.data(a).iter().map(|&x| x.max(F::zero())).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Relu { a }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Value) -> Value {
        let (c, k, half) = (F::lit(GELU_C), F::lit(GELU_K), F::lit(0.5));
        let src = self.data(a);
        let tanh: Vec<F> = src.iter().map(|&x| fast_tanh(c * (x + k * x * x * x))).collect();
        let data = src.iter().zip(&tanh).map(|(&x, &t)| half * x * (F::one() + t)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Gelu { a, tanh }, rg)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, a: Value, f: fn(F) -> F, derivative: fn(F) -> F) -> Value {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Map { a, derivative }, rg)
    }

    pub fn softmax_last_dim(&mut self, a: Value) -> Value {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(w.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(shape, out, Op::Softmax { a }, rg)
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = numel(&shape) / w;
        let wf = F::lit(w as f64);
        let eps = F::lit(LN_EPS);
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * w..(r + 1) * w];
            let mean = row.iter().copied().sum::<F>() / wf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / wf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let xh = (row[j] - mean) * rs;
                xhat[r * w + j] = xh;
                out[r * w + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table: [V, D]`, giving `[indices.len(), D]`.
    pub fn embedding_lookup(&mut self, table: Value, indices: &[usize]) -> Result<Value> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding_lookup",
                reason: format!("table must be rank 2, got {s:?}"),
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding_lookup",
                index: bad,
                bound: v,
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over the rows of `logits: [N, C]` whose
    /// target is `Some`. Zero when no row carries a target.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: Value,
        targets: &[Option<usize>],
    ) -> Result<Value> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(mismatch("cross_entropy_with_logits", &s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_with_logits",
                index: *bad,
                bound: c,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![F::zero(); src.len()];
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let p = &mut probs[r * c..(r + 1) * c];
                p.copy_from_slice(&src[r * c..(r + 1) * c]);
                let lse = log_sum_exp(p);
                total += lse - p[t];
                softmax_in_place(p);
                count += 1;
            }
        }
        let value = if count > 0 {
            total / F::lit(count as f64)
        } else {
            F::zero()
        };
        let rg = self.rg(logits) && count > 0;
        Ok(self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let total = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![total], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let d = self.data(a);
        let total = d.iter().copied().sum::<F>() / F::lit(d.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(vec![1], vec![total], Op::Mean { a }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.pullback(i, &g);
            self.grads[i] = Some(g);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.trainable && grad.is_none() {
                *grad = Some(vec![F::zero(); node.data.len()]);
            }
        }
        Ok(())
    }

    fn pullback(&mut self, i: usize, g: &[F]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                let k = sa[sa.len() - 1];
                if sb.len() == 2 {
                    let rows = da.len() / k.max(1);
                    let n = sb[1];
                    if nodes[a.0].requires_grad {
                        let ga = accumulate(&mut grads[a.0], da.len());
                        // dA = G · Bᵀ
                        F::gemm(
                            rows,
                            n,
                            k,
                            F::one(),
                            (g, n as isize, 1),
                            (db, 1, n as isize),
                            F::one(),
                            (ga, k as isize, 1),
                        );
                    }
                    if nodes[b.0].requires_grad {
                        let gb = accumulate(&mut grads[b.0], db.len());
                        // dB = Aᵀ · G
                        F::gemm(
                            k,
                            rows,
                            n,
                            F::one(),
                            (da, 1, k as isize),
                            (g, n as isize, 1),
                            F::one(),
                            (gb, n as isize, 1),
                        );
                    }
                } else {
                    let m = sa[sa.len() - 2];
                    let n = sb[sb.len() - 1];
                    let batch = numel(&sa[..sa.len() - 2]);
                    if nodes[a.0].requires_grad {
                        let ga = accumulate(&mut grads[a.0], da.len());
                        for p in 0..batch {
                            F::gemm(
                                m,
                                n,
                                k,
                                F::one(),
                                (&g[p * m * n..(p + 1) * m * n], n as isize, 1),
                                (&db[p * k * n..(p + 1) * k * n], 1, n as isize),
                                F::one(),
                                (&mut ga[p * m * k..(p + 1) * m * k], k as isize, 1),
                            );
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let gb = accumulate(&mut grads[b.0], db.len());
                        for p in 0..batch {
                            F::gemm(
                                k,
                                m,
                                n,
                                F::one(),
                                (&da[p * m * k..(p + 1) * m * k], 1, k as isize),
                                (&g[p * m * n..(p + 1) * m * n], n as isize, 1),
                                F::one(),
                                (&mut gb[p * k * n..(p + 1) * k * n], n as isize, 1),
                            );
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                if nodes[a.0].requires_grad {
                    let s = &nodes[a.0].shape;
                    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch = numel(&s[..s.len() - 2]);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for p in 0..batch {
                        let off = p * m * n;
                        for r in 0..m {
                            for c in 0..n {
                                ga[off + r * n + c] += g[off + c * m + r];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if nodes[a.0].requires_grad {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if nodes[b.0].requires_grad {
                    let bl = nodes[b.0].data.len();
                    let gb = accumulate(&mut grads[b.0], bl);
                    for chunk in g.chunks(bl) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if nodes[a.0].requires_grad {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *factor);
                }
            }
            Op::ConcatLast { parts } => {
                let total = *node.shape.last().unwrap();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = *nodes[p.0].shape.last().unwrap();
                    if nodes[p.0].requires_grad {
                        let gp = accumulate(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast { a, start } => {
                if nodes[a.0].requires_grad {
                    let w = *nodes[a.0].shape.last().unwrap();
                    let len = *node.shape.last().unwrap();
                    let ga = accumulate(&mut grads[a.0], nodes[a.0].data.len());
                    for (r, chunk) in g.chunks(len.max(1)).enumerate() {
                        ga[r * w + start..r * w + start + len]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::ConcatFirst { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].data.len();
                    if nodes[p.0].requires_grad {
                        let gp = accumulate(&mut grads[p.0], len);
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, &y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::Reshape { a } => {
                if nodes[a.0].requires_grad {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Relu { a } => {
                if nodes[a.0].requires_grad {
                    let src = &nodes[a.0].data;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((x, &y), &s) in ga.iter_mut().zip(g).zip(src) {
                        if s > F::zero() {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                if nodes[a.0].requires_grad {
                    let (c, k, half) = (F::lit(GELU_C), F::lit(GELU_K), F::lit(0.5));
                    let three = F::lit(3.0);
                    let src = &nodes[a.0].data;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (((x, &y), &s), &t) in ga.iter_mut().zip(g).zip(src).zip(tanh) {
                        let d = half * (F::one() + t)
                            + half * s * (F::one() - t * t) * c * (F::one() + three * k * s * s);
                        *x += y * d;
                    }
                }
            }
            Op::Map { a, derivative } => {
                if nodes[a.0].requires_grad {
                    let src = &nodes[a.0].data;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((x, &y), &s) in ga.iter_mut().zip(g).zip(src) {
                        *x += y * derivative(s);
                    }
                }
            }
            Op::Softmax { a } => {
                if nodes[a.0].requires_grad {
                    let w = *node.shape.last().unwrap();
                    let y = &node.data;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((gr, yr), out) in g.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: F = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..w {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let w = *node.shape.last().unwrap();
                let wf = F::lit(w as f64);
                let gam = &nodes[gamma.0].data;
                if nodes[gamma.0].requires_grad {
                    let gg = accumulate(&mut grads[gamma.0], w);
                    for (gr, xr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if nodes[beta.0].requires_grad {
                    let gb = accumulate(&mut grads[beta.0], w);
                    for gr in g.chunks(w) {
                        for j in 0..w {
                            gb[j] += gr[j];
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    let mut gxh = vec![F::zero(); w];
                    for (r, (gr, xr)) in g.chunks(w).zip(xhat.chunks(w)).enumerate() {
                        for j in 0..w {
                            gxh[j] = gr[j] * gam[j];
                        }
                        let s1: F = gxh.iter().copied().sum();
                        let s2: F = gxh.iter().zip(xr).map(|(&p, &q)| p * q).sum();
                        let scale = rstd[r] / wf;
                        for j in 0..w {
                            gx[r * w + j] += scale * (wf * gxh[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                if nodes[table.0].requires_grad {
                    let d = nodes[table.0].shape[1];
                    let gt = accumulate(&mut grads[table.0], nodes[table.0].data.len());
                    for (r, &ix) in indices.iter().enumerate() {
                        gt[ix * d..(ix + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if nodes[logits.0].requires_grad && *count > 0 {
                    let c = nodes[logits.0].shape[1];
                    let scale = g[0] / F::lit(*count as f64);
                    let gl = accumulate(&mut grads[logits.0], probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..c {
                                let onehot = if j == t { F::one() } else { F::zero() };
                                gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if nodes[a.0].requires_grad {
                    let len = nodes[a.0].data.len();
                    let ga = accumulate(&mut grads[a.0], len);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a } => {
                if nodes[a.0].requires_grad {
                    let len = nodes[a.0].data.len();
                    let share = g[0] / F::lit(len.max(1) as f64);
                    let ga = accumulate(&mut grads[a.0], len);
                    ga.iter_mut().for_each(|x| *x += share);
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2, 4], &[3.0; 8]));
        let y = tape.softmax_last_dim(x);
        assert!(tape.data(y).iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2, 5], &[1.0, 2.0, 4.0, 8.0, 16.0, -3.0, 0.0, 0.5, 9.0, 2.0]));
        let g = tape.constant(&Tensor::full(vec![5], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![5]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.data(y).chunks(5) {
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let bad = tape.constant(&Tensor::zeros(vec![4, 4]));
        assert!(matches!(tape.matmul(a, bad), Err(TensorError::ShapeMismatch { .. })));
        let x = tape.constant(&Tensor::zeros(vec![5, 2, 3]));
        let y = tape.constant(&Tensor::zeros(vec![5, 3, 7]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.shape(z), &[5, 2, 7]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(&t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let mut tape = Tape::<f64>::new();
        let logits = [0.3, -1.2, 2.0, 0.1];
        let p = tape.param(&t(&[1, 4], &logits));
        let loss = tape.cross_entropy_with_logits(p, &[Some(2)]).unwrap();
        tape.backward(loss).unwrap();
        let mut soft = logits.to_vec();
        softmax_in_place(&mut soft);
        let grad = tape.grad(p).unwrap();
        for j in 0..4 {
            let want = soft[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((grad[j] - want).abs() < 1e-14);
        }
        assert!((tape.data(loss)[0] + soft[2].ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_without_targets_is_zero() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(&t(&[2, 3], &[1.0; 6]));
        let loss = tape.cross_entropy_with_logits(p, &[None, None]).unwrap();
        assert_eq!(tape.data(loss), &[0.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn out_of_range_indices_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param(&Tensor::zeros(vec![4, 2]));
        assert!(matches!(
            tape.embedding_lookup(table, &[0, 4]),
            Err(TensorError::IndexOutOfRange { index: 4, .. })
        ));
        let logits = tape.param(&Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            tape.cross_entropy_with_logits(logits, &[Some(3)]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(&Tensor::zeros(vec![3]));
        assert_eq!(
            tape.backward(p),
            Err(TensorError::NotScalar(vec![3]))
        );
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::DoubleBackward));
        tape.zero_grad();
        tape.backward(s).unwrap();
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(&Tensor::full(vec![2], 1.0));
        let unused = tape.param(&Tensor::full(vec![3], 1.0));
        let s = tape.sum(used);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut tape = Tape::<f64>::new();
        let x0 = t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 1.5, -0.25]);
        let x = tape.param(&x0);
        let y = tape.softmax_last_dim(x);
        let z = tape.gelu(y);
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.data(x), x0.data());
    }
}
