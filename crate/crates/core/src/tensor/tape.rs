use super::gemm::{gemm, MatView, MatViewMut};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records whole-tensor operations in execution order so that
/// [`Tape::backward`] can replay them in reverse.
///
/// Values are copied onto the tape; parameters stay owned by their model and
/// receive gradients through [`Tensor::accumulate_grad`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor (typically a parameter). Gradient tracking follows
    /// the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push_unchecked(shape, data, false, Op::Leaf))
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
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well formed")
    }

    /// Gradient computed by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t` (no-op for frozen tensors).
    pub fn pull_grad(&self, v: Var, t: &mut Tensor<T>) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    /// Sign pattern (`x > 0`) of every ReLU input on the tape, in order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.iter().map(|&y| y > T::zero()))
            .collect()
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(shape, value, requires_grad, op))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.split_last() {
            Some((&c, lead)) => (lead.iter().product(), c),
            None => (1, 1),
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (br, bc) = self.matrix("matmul", b)?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatView::new(&self.nodes[a.0].value, m, k);
            let bv = MatView::new(&self.nodes[b.0].value, br, bc);
            let bv = if transpose_b { bv.t() } else { bv };
            gemm(T::one(), av, bv, T::zero(), MatViewMut::new(&mut out, m, n));
        }
        self.push("matmul", vec![m, n], out, &[a, b], Op::MatMul { a, b, transpose_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("add", shape, out, &[a, b], Op::Add(a, b))
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.dims2(x);
        if self.nodes[bias.0].value.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let b = &self.nodes[bias.0].value;
        let out = self.nodes[x.0]
            .value
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push("add_bias", shape, out, &[x, bias], Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.nodes[x.0].value.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push("scale", shape, out, &[x], Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push("relu", shape, out, &[x], Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.iter().copied().sum();
        self.push("sum", vec![1], vec![s], &[x], Op::Sum(x))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x);
        let mut out = self.nodes[x.0].value.clone();
        if n > 0 {
            out.chunks_mut(n).for_each(softmax_in_place);
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push("softmax_rows", shape, out, &[x], Op::SoftmaxRows(x))
    }

    /// Per-row normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x);
        if d == 0 || self.nodes[gain.0].value.len() != d || self.nodes[bias.0].value.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[gain.0].shape.clone(),
            });
        }
        let eps = T::of(LN_EPS);
        let dt = T::of(d as f64);
        let xs = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push("layer_norm", shape, out, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix("embedding_lookup", table)?;
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::VocabOutOfRange {
                op: "embedding_lookup",
                id,
                vocab,
            });
        }
        let t = &self.nodes[table.0].value;
        let out = ids.iter().flat_map(|&id| t[id * d..(id + 1) * d].iter().copied()).collect();
        self.push(
            "embedding_lookup",
            vec![ids.len(), d],
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let (_, d) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![r, c],
                    right: vec![0, d],
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push("concat_rows", vec![rows, d], out, parts, Op::ConcatRows(parts.to_vec()))
    }

    /// Multi-head scaled dot-product attention where position `i` attends to
    /// positions `0..=i`. `q`, `k`, `v` are `[n×d]` with `d` split evenly
    /// across `heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.matrix("causal_attention", q)?;
        for other in [k, v] {
            if self.nodes[other.0].shape != [n, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "causal_attention",
                    left: vec![n, d],
                    right: self.nodes[other.0].shape.clone(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "causal_attention",
                msg: format!("{d} columns cannot be split into {heads} heads"),
            });
        }
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        causal_attention_forward(
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            n,
            d,
            heads,
            &mut probs,
            &mut out,
        );
        self.push("causal_attention", vec![n, d], out, &[q, k, v], Op::CausalAttention { q, k, v, heads, probs })
    }

    /// Mean negative log-likelihood of `targets` over positions where `mask`
    /// is true. Targets at unmasked positions are ignored.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, vocab) = self.matrix("masked_cross_entropy", logits)?;
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_cross_entropy",
                left: vec![n, vocab],
                right: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::DegenerateMask);
        }
        let xs = &self.nodes[logits.0].value;
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for r in (0..n).filter(|&r| mask[r]) {
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::VocabOutOfRange {
                    op: "masked_cross_entropy",
                    id: t,
                    vocab,
                });
            }
            let row = &xs[r * vocab..(r + 1) * vocab];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in p.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            p.iter_mut().for_each(|x| *x = *x / z);
            total += max + z.ln() - row[t];
        }
        let loss = total / T::of(count as f64);
        self.push(
            "masked_cross_entropy",
            vec![1],
            vec![loss],
            &[logits],
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Populates gradients of every tracked value with respect to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let Tape { nodes, grads } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            backward_node(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / z);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    heads: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    for h in 0..heads {
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        let qh = MatView::new(q, n, d).cols_range(h * dh, dh);
        let kh = MatView::new(k, n, d).cols_range(h * dh, dh);
        gemm(scale, qh, kh.t(), T::zero(), MatViewMut::new(p, n, n));
        for i in 0..n {
            let row = &mut p[i * n..(i + 1) * n];
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
        }
        let vh = MatView::new(v, n, d).cols_range(h * dh, dh);
        gemm(
            T::one(),
            MatView::new(p, n, n),
            vh,
            T::zero(),
            MatViewMut::new(out, n, d).cols_range(h * dh, dh),
        );
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn backward_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let tracked = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, transpose_b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let (br, bc) = (nodes[b.0].shape[0], nodes[b.0].shape[1]);
            let n = if *transpose_b { br } else { bc };
            let gv = MatView::new(g, m, n);
            if tracked(*a) {
                let bv = MatView::new(&nodes[b.0].value, br, bc);
                // dA = dC·Bᵀ, or dC·B when C = A·Bᵀ
                let bt = if *transpose_b { bv } else { bv.t() };
                let ga = grad_slot(grads, *a, m * k);
                gemm(T::one(), gv, bt, T::one(), MatViewMut::new(ga, m, k));
            }
            if tracked(*b) {
                let av = MatView::new(&nodes[a.0].value, m, k);
                let gb = grad_slot(grads, *b, br * bc);
                if *transpose_b {
                    gemm(T::one(), gv.t(), av, T::one(), MatViewMut::new(gb, br, bc));
                } else {
                    gemm(T::one(), av.t(), gv, T::one(), MatViewMut::new(gb, br, bc));
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if tracked(v) {
                    let s = grad_slot(grads, v, g.len());
                    s.iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                }
            }
        }
        Op::AddBias { x, bias } => {
            if tracked(*x) {
                let s = grad_slot(grads, *x, g.len());
                s.iter_mut().zip(g).for_each(|(s, &x)| *s += x);
            }
            if tracked(*bias) {
                let d = nodes[bias.0].value.len();
                let s = grad_slot(grads, *bias, d);
                for row in g.chunks(d) {
                    s.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                }
            }
        }
        Op::Scale { x, factor } => {
            if tracked(*x) {
                let s = grad_slot(grads, *x, g.len());
                s.iter_mut().zip(g).for_each(|(s, &x)| *s += x * *factor);
            }
        }
        Op::Relu(x) => {
            if tracked(*x) {
                let s = grad_slot(grads, *x, g.len());
                for ((s, &gy), &y) in s.iter_mut().zip(g).zip(&node.value) {
                    if y > T::zero() {
                        *s += gy;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if tracked(*x) {
                let len = nodes[x.0].value.len();
                let s = grad_slot(grads, *x, len);
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::SoftmaxRows(x) => {
            if tracked(*x) {
                let n = *node.shape.last().unwrap_or(&1);
                let s = grad_slot(grads, *x, g.len());
                for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((s, &gy), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += y * (gy - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[gain.0].value.len();
            let gw = &nodes[gain.0].value;
            if tracked(*gain) {
                let s = grad_slot(grads, *gain, d);
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        s[j] += grow[j] * hrow[j];
                    }
                }
            }
            if tracked(*bias) {
                let s = grad_slot(grads, *bias, d);
                for grow in g.chunks(d) {
                    s.iter_mut().zip(grow).for_each(|(s, &x)| *s += x);
                }
            }
            if tracked(*x) {
                let dt = T::of(d as f64);
                let s = grad_slot(grads, *x, g.len());
                for (r, ((srow, grow), hrow)) in s.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = grow[j] * gw[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j];
                    }
                    mean_dh = mean_dh / dt;
                    mean_dh_h = mean_dh_h / dt;
                    for j in 0..d {
                        let dh = grow[j] * gw[j];
                        srow[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if tracked(*table) {
                let d = nodes[table.0].shape[1];
                let len = nodes[table.0].value.len();
                let s = grad_slot(grads, *table, len);
                for (row, &id) in g.chunks(d.max(1)).zip(ids) {
                    s[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                if tracked(p) {
                    let s = grad_slot(grads, p, len);
                    s.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, &x)| *s += x);
                }
                offset += len;
            }
        }
        Op::CausalAttention { q, k, v, heads, probs } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let dh = d / heads;
            let scale = T::one() / T::of(dh as f64).sqrt();
            let need_qk = tracked(*q) || tracked(*k);
            let mut dp = vec![T::zero(); n * n];
            for h in 0..*heads {
                let p = &probs[h * n * n..(h + 1) * n * n];
                let go = MatView::new(g, n, d).cols_range(h * dh, dh);
                if tracked(*v) {
                    let gv = grad_slot(grads, *v, n * d);
                    gemm(
                        T::one(),
                        MatView::new(p, n, n).t(),
                        go,
                        T::one(),
                        MatViewMut::new(gv, n, d).cols_range(h * dh, dh),
                    );
                }
                if !need_qk {
                    continue;
                }
                let vh = MatView::new(&nodes[v.0].value, n, d).cols_range(h * dh, dh);
                gemm(T::one(), go, vh.t(), T::zero(), MatViewMut::new(&mut dp, n, n));
                for i in 0..n {
                    let prow = &p[i * n..(i + 1) * n];
                    let drow = &mut dp[i * n..(i + 1) * n];
                    let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                    drow[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                if tracked(*q) {
                    let kh = MatView::new(&nodes[k.0].value, n, d).cols_range(h * dh, dh);
                    let gq = grad_slot(grads, *q, n * d);
                    gemm(
                        T::one(),
                        MatView::new(&dp, n, n),
                        kh,
                        T::one(),
                        MatViewMut::new(gq, n, d).cols_range(h * dh, dh),
                    );
                }
                if tracked(*k) {
                    let qh = MatView::new(&nodes[q.0].value, n, d).cols_range(h * dh, dh);
                    let gk = grad_slot(grads, *k, n * d);
                    gemm(
                        T::one(),
                        MatView::new(&dp, n, n).t(),
                        qh,
                        T::one(),
                        MatViewMut::new(gk, n, d).cols_range(h * dh, dh),
                    );
                }
            }
        }
        Op::MaskedCrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            if tracked(*logits) {
                let (n, vocab) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                let w = g[0] / T::of(*count as f64);
                let s = grad_slot(grads, *logits, n * vocab);
                for r in (0..n).filter(|&r| mask[r]) {
                    let srow = &mut s[r * vocab..(r + 1) * vocab];
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        srow[j] += w * prow[j];
                    }
                    srow[targets[r]] += -w;
                }
            }
        }
    }
}
