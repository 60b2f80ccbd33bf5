use std::sync::Arc;

use super::kernels::{gemm, softmax_row, Layout};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    EmbeddingMean {
        table: Var,
        ids: Vec<usize>,
        bag: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    MaskedFill {
        x: Var,
        mask: Arc<[bool]>,
    },
    Softmax(Var),
    CausalSoftmax(Var),
    LogSumExp(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Silu(Var),
    Rope {
        x: Var,
        cos: Arc<[T]>,
        sin: Arc<[T]>,
        heads: usize,
    },
    Loss {
        logits: Var,
        dlogits: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a valid topological order, so
/// the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy a node out as a standalone tensor (with its gradient, if any).
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: n.grad.clone(),
            requires_grad: n.requires_grad,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor.shape, tensor.data, Op::Leaf, rg)
    }

    /// Insert a trainable copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape.clone(), tensor.data.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), rg)
    }

    /// `a + bias`, with `bias` broadcast along every axis but the last.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.shape(a).last().copied().unwrap_or(1);
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} for last dim {n}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(self.shape(a).to_vec(), value, Op::AddBias(a, bias), rg))
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        rows_gemm(
            m,
            k,
            n,
            self.value(a),
            Layout::row_major(k),
            self.value(b),
            Layout::row_major(n),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched product: `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(format!(
                "bmm: inner dims {k} vs {kb} (trans_b={trans_b})"
            )));
        }
        let lb = if trans_b {
            Layout::transposed(k)
        } else {
            Layout::row_major(n)
        };
        let mut out = vec![T::zero(); bs * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        par::for_each_chunk_mut(&mut out, (m * n).max(1), m * n * k, |i, c| {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                Layout::row_major(k),
                &bv[i * k * n..],
                lb,
                T::zero(),
                c,
                Layout::row_major(n),
            );
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![bs, m, n], out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!("permute {perm:?} of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let (src, run) = permuted_runs(&shape, perm);
        let v = self.value(a);
        let mut value = Vec::with_capacity(v.len());
        for &s in &src {
            value.extend_from_slice(&v[s..s + run]);
        }
        let rg = self.rg(a);
        Ok(self.push(out_shape, value, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose needs at least 2 dims"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// Row gather from a `[V,d]` table; output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.table_dims(table)?;
        check_ids(ids, vocab)?;
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of `bag` consecutive embedding rows per output row.
    ///
    /// The sum is accumulated in `f64` and the mean cast back to `T`.
    pub fn embedding_mean(&mut self, table: Var, ids: &[usize], bag: usize) -> Result<Var> {
        let (vocab, d) = self.table_dims(table)?;
        if bag == 0 || ids.len() % bag != 0 {
            return Err(Error::contract(format!(
                "embedding_mean: {} ids not divisible into bags of {bag}",
                ids.len()
            )));
        }
        check_ids(ids, vocab)?;
        let t = self.value(table);
        let rows = ids.len() / bag;
        let mut out = Vec::with_capacity(rows * d);
        let mut acc = vec![0f64; d];
        for r in 0..rows {
            let bag_ids = &ids[r * bag..(r + 1) * bag];
            for (a, &x) in acc.iter_mut().zip(&t[bag_ids[0] * d..(bag_ids[0] + 1) * d]) {
                *a = x.as_f64();
            }
            for &id in &bag_ids[1..] {
                for (a, &x) in acc.iter_mut().zip(&t[id * d..(id + 1) * d]) {
                    *a += x.as_f64();
                }
            }
            out.extend(acc.iter().map(|&a| T::of_f64(a / bag as f64)));
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::EmbeddingMean {
                table,
                ids: ids.to_vec(),
                bag,
            },
            rg,
        ))
    }

    fn table_dims(&self, table: Var) -> Result<(usize, usize)> {
        match self.shape(table) {
            [v, d] => Ok((*v, *d)),
            s => Err(Error::shape(format!("embedding table must be 2-D, got {s:?}"))),
        }
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("mean_axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let inv = T::one() / T::of_f64(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        for x in out.iter_mut() {
            *x *= inv;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::MeanAxis { x: a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of_f64(n.max(1) as f64))
    }

    /// Replace entries where `mask` is true by `fill`.
    ///
    /// `mask` covers the trailing block of the tensor and repeats over the
    /// leading axes; its length must divide the element count.
    pub fn masked_fill(&mut self, a: Var, mask: Arc<[bool]>, fill: T) -> Result<Var> {
        let v = self.value(a);
        if mask.is_empty() || v.len() % mask.len() != 0 {
            return Err(Error::shape(format!(
                "masked_fill: mask of {} over {} elements",
                mask.len(),
                v.len()
            )));
        }
        let m = mask.len();
        let mut value = Vec::with_capacity(v.len());
        for chunk in v.chunks(m) {
            value.extend(chunk.iter().zip(mask.iter()).map(|(&x, &k)| if k { fill } else { x }));
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::MaskedFill { x: a, mask }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax of scalar"))?;
        let v = self.value(a);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax: non-finite input".into()));
        }
        let mut out = vec![T::zero(); v.len()];
        par::for_each_chunk_mut(&mut out, n.max(1) * 64, n * 64 * 8, |i, c| {
            let base = i * n * 64;
            for (r, o) in c.chunks_mut(n).enumerate() {
                let off = base + r * n;
                softmax_row(&v[off..off + n], o);
            }
        });
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax(a), rg))
    }

    /// Softmax of each row of trailing `[l, l]` blocks over its first `i + 1`
    /// entries (row `i`); entries above the diagonal come out as exactly 0.
    ///
    /// Equivalent to filling the strict upper triangle with -inf and taking
    /// the softmax, without touching the masked entries.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        if nd < 2 || shape[nd - 1] != shape[nd - 2] {
            return Err(Error::shape(format!(
                "causal_softmax needs square trailing blocks, got {shape:?}"
            )));
        }
        let l = shape[nd - 1];
        let v = self.value(a);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("causal_softmax: non-finite input".into()));
        }
        let mut out = vec![T::zero(); v.len()];
        let block = (l * l).max(1);
        par::for_each_chunk_mut(&mut out, block, block * 8, |bi, c| {
            for (i, o) in c.chunks_mut(l).enumerate() {
                let off = bi * block + i * l;
                softmax_row(&v[off..off + i + 1], &mut o[..i + 1]);
            }
        });
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::CausalSoftmax(a), rg))
    }

    /// Log-sum-exp over the last axis (the axis is removed).
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("logsumexp of scalar"))?;
        let v = self.value(a);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("logsumexp: non-finite input".into()));
        }
        let mut scratch = vec![T::zero(); n];
        let out = v
            .chunks(n)
            .map(|row| softmax_row(row, &mut scratch))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(shape[..shape.len() - 1].to_vec(), out, Op::LogSumExp(a), rg))
    }

    /// RMS normalisation over the last axis with a learned gain `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("rms_norm of scalar"))?;
        if self.shape(w) != [n] {
            return Err(Error::shape(format!(
                "rms_norm: gain {:?} for last dim {n}",
                self.shape(w)
            )));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let rows = xv.len() / n;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(n) {
            let ms = row.iter().map(|&a| a.as_f64() * a.as_f64()).sum::<f64>() / n as f64;
            let r = T::of_f64(1.0 / (ms + eps).sqrt());
            inv_rms.push(r);
            out.extend(row.iter().zip(wv).map(|(&a, &g)| a * r * g));
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(shape, out, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .iter()
            .map(|&x| x / (T::one() + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Silu(a), rg)
    }

    /// Rotary position encoding on `[B, l, heads, head_dim]`.
    ///
    /// `positions[j]` is the rotation index for sequence slot `j`; pairs
    /// `(2i, 2i+1)` rotate by `positions[j] * base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [_, l, heads, hd] = shape[..] else {
            return Err(Error::shape(format!("rope expects 4-D input, got {shape:?}")));
        };
        if hd % 2 != 0 || positions.len() != l {
            return Err(Error::shape(format!(
                "rope: head_dim {hd} must be even and positions ({}) match length {l}",
                positions.len()
            )));
        }
        let half = hd / 2;
        let mut cos = Vec::with_capacity(l * half);
        let mut sin = Vec::with_capacity(l * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                cos.push(T::of_f64(theta.cos()));
                sin.push(T::of_f64(theta.sin()));
            }
        }
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for (idx, (o, xi)) in out.chunks_mut(hd).zip(v.chunks(hd)).enumerate() {
            let j = (idx / heads) % l;
            let (c, s) = (&cos[j * half..(j + 1) * half], &sin[j * half..(j + 1) * half]);
            for i in 0..half {
                let (x0, x1) = (xi[2 * i], xi[2 * i + 1]);
                o[2 * i] = x0 * c[i] - x1 * s[i];
                o[2 * i + 1] = x0 * s[i] + x1 * c[i];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::Rope {
                x,
                cos: cos.into(),
                sin: sin.into(),
                heads,
            },
            rg,
        ))
    }

    /// Attach an externally computed scalar loss of `logits`.
    ///
    /// `dlogits` must be the gradient of `value` with respect to `logits`.
    pub fn loss(&mut self, logits: Var, value: T, dlogits: Vec<T>) -> Result<Var> {
        if dlogits.len() != self.value(logits).len() {
            return Err(Error::shape(format!(
                "loss gradient has {} entries for {} logits",
                dlogits.len(),
                self.value(logits).len()
            )));
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![], vec![value], Op::Loss { logits, dlogits }, rg))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every leaf with `requires_grad` ends up holding the derivative of the
    /// root; contributions from multiple uses are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &dy);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(dy);
        }
        Ok(())
    }

    /// Run `f` against the (zero-initialised) gradient buffer of `v`.
    fn accum<F>(&mut self, v: Var, f: F)
    where
        F: FnOnce(&[Node<T>], &mut [T]),
    {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let mut g = self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![T::zero(); len]);
        f(&self.nodes, &mut g);
        self.nodes[v.0].grad = Some(g);
    }

    fn backprop(&mut self, i: usize, op: &Op<T>, dy: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, |_, g| add_into(g, dy));
                self.accum(b, |_, g| add_into(g, dy));
            }
            Op::Mul(a, b) => {
                self.accum(a, |n, g| {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(&n[b.0].value) {
                        *g += d * y;
                    }
                });
                self.accum(b, |n, g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(&n[a.0].value) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, c) => self.accum(a, |_, g| {
                for (g, &d) in g.iter_mut().zip(dy) {
                    *g += d * c;
                }
            }),
            Op::AddBias(a, bias) => {
                self.accum(a, |_, g| add_into(g, dy));
                self.accum(bias, |_, g| {
                    let n = g.len();
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                // dA = dC · Bᵀ
                self.accum(a, |nodes, g| {
                    rows_gemm_acc(
                        m,
                        n,
                        k,
                        dy,
                        Layout::row_major(n),
                        &nodes[b.0].value,
                        Layout::transposed(n),
                        g,
                    );
                });
                // dB = Aᵀ · dC
                self.accum(b, |nodes, g| {
                    rows_gemm_acc(
                        k,
                        m,
                        n,
                        &nodes[a.0].value,
                        Layout::transposed(k),
                        dy,
                        Layout::row_major(n),
                        g,
                    );
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = &self.nodes[a.0].shape;
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.nodes[i].shape[2];
                self.accum(a, |nodes, g| {
                    let bv = &nodes[b.0].value;
                    // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                    let lb = if trans_b {
                        Layout::row_major(k)
                    } else {
                        Layout::transposed(n)
                    };
                    par::for_each_chunk_mut(g, (m * k).max(1), m * n * k, |bi, gc| {
                        gemm(
                            m,
                            n,
                            k,
                            &dy[bi * m * n..],
                            Layout::row_major(n),
                            &bv[bi * k * n..],
                            lb,
                            T::one(),
                            gc,
                            Layout::row_major(k),
                        );
                    });
                });
                self.accum(b, |nodes, g| {
                    let av = &nodes[a.0].value;
                    par::for_each_chunk_mut(g, (k * n).max(1), m * n * k, |bi, gc| {
                        let (a_b, dy_b) = (&av[bi * m * k..], &dy[bi * m * n..]);
                        if trans_b {
                            // dBᵀ = dCᵀ · A, stored as [n,k]
                            gemm(
                                n,
                                m,
                                k,
                                dy_b,
                                Layout::transposed(n),
                                a_b,
                                Layout::row_major(k),
                                T::one(),
                                gc,
                                Layout::row_major(k),
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                a_b,
                                Layout::transposed(k),
                                dy_b,
                                Layout::row_major(n),
                                T::one(),
                                gc,
                                Layout::row_major(n),
                            );
                        }
                    });
                });
                let _ = bs;
            }
            Op::Reshape(a) => self.accum(a, |_, g| add_into(g, dy)),
            Op::Permute(a, ref perm) => {
                let (src, run) = permuted_runs(&self.nodes[a.0].shape, perm);
                self.accum(a, |_, g| {
                    for (&s, d) in src.iter().zip(dy.chunks(run.max(1))) {
                        add_into(&mut g[s..s + run], d);
                    }
                });
            }
            Op::Embedding { table, ref ids } => {
                let d = self.nodes[table.0].shape[1];
                self.accum(table, |_, g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::EmbeddingMean {
                table,
                ref ids,
                bag,
            } => {
                let d = self.nodes[table.0].shape[1];
                let inv = T::one() / T::of_f64(bag as f64);
                self.accum(table, |_, g| {
                    for (p, &id) in ids.iter().enumerate() {
                        let r = p / bag;
                        for (g, &dv) in g[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&dy[r * d..(r + 1) * d])
                        {
                            *g += dv * inv;
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = split_axis(&self.nodes[x.0].shape, axis);
                let inv = T::one() / T::of_f64(n as f64);
                self.accum(x, |_, g| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for k in 0..inner {
                                g[base + k] += dy[o * inner + k] * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => self.accum(a, |_, g| {
                for g in g.iter_mut() {
                    *g += dy[0];
                }
            }),
            Op::MaskedFill { x, ref mask } => {
                let m = mask.len();
                self.accum(x, |_, g| {
                    for (g, d) in g.chunks_mut(m).zip(dy.chunks(m)) {
                        for ((g, &d), &k) in g.iter_mut().zip(d).zip(mask.iter()) {
                            if !k {
                                *g += d;
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *self.nodes[i].shape.last().unwrap();
                let y = std::mem::take(&mut self.nodes[i].value);
                self.accum(a, |_, g| {
                    for ((g, y), d) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                        let dot = y.iter().zip(d).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for ((g, &p), &q) in g.iter_mut().zip(y).zip(d) {
                            *g += p * (q - dot);
                        }
                    }
                });
                self.nodes[i].value = y;
            }
            Op::CausalSoftmax(a) => {
                let l = *self.nodes[i].shape.last().unwrap();
                let y = std::mem::take(&mut self.nodes[i].value);
                self.accum(a, |_, g| {
                    let rows = g.chunks_mut(l).zip(y.chunks(l)).zip(dy.chunks(l));
                    for (r, ((g, y), d)) in rows.enumerate() {
                        let w = r % l + 1;
                        let (g, y, d) = (&mut g[..w], &y[..w], &d[..w]);
                        let dot = y.iter().zip(d).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for ((g, &p), &q) in g.iter_mut().zip(y).zip(d) {
                            *g += p * (q - dot);
                        }
                    }
                });
                self.nodes[i].value = y;
            }
            Op::LogSumExp(a) => {
                let n = *self.nodes[a.0].shape.last().unwrap();
                let lse = std::mem::take(&mut self.nodes[i].value);
                self.accum(a, |nodes, g| {
                    let x = &nodes[a.0].value;
                    for (r, (g, x)) in g.chunks_mut(n).zip(x.chunks(n)).enumerate() {
                        for (g, &xv) in g.iter_mut().zip(x) {
                            *g += (xv - lse[r]).exp() * dy[r];
                        }
                    }
                });
                self.nodes[i].value = lse;
            }
            Op::RmsNorm { x, w, ref inv_rms } => {
                let n = *self.nodes[x.0].shape.last().unwrap();
                let nt = T::of_f64(n as f64);
                self.accum(x, |nodes, g| {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    for (r, ((g, xr), dr)) in g
                        .chunks_mut(n)
                        .zip(xv.chunks(n))
                        .zip(dy.chunks(n))
                        .enumerate()
                    {
                        let ir = inv_rms[r];
                        let dot = xr
                            .iter()
                            .zip(dr)
                            .zip(wv)
                            .fold(T::zero(), |s, ((&a, &d), &gw)| s + a * d * gw);
                        let c = ir * ir * ir * dot / nt;
                        for (((g, &a), &d), &gw) in g.iter_mut().zip(xr).zip(dr).zip(wv) {
                            *g += ir * d * gw - a * c;
                        }
                    }
                });
                self.accum(w, |nodes, g| {
                    let xv = &nodes[x.0].value;
                    for (r, (xr, dr)) in xv.chunks(n).zip(dy.chunks(n)).enumerate() {
                        let ir = inv_rms[r];
                        for ((g, &a), &d) in g.iter_mut().zip(xr).zip(dr) {
                            *g += d * a * ir;
                        }
                    }
                });
            }
            Op::Silu(a) => self.accum(a, |nodes, g| {
                for ((g, &x), &d) in g.iter_mut().zip(&nodes[a.0].value).zip(dy) {
                    let s = T::one() / (T::one() + (-x).exp());
                    *g += d * s * (T::one() + x * (T::one() - s));
                }
            }),
            Op::Rope {
                x,
                ref cos,
                ref sin,
                heads,
            } => {
                let shape = &self.nodes[x.0].shape;
                let (l, hd) = (shape[1], shape[3]);
                let half = hd / 2;
                self.accum(x, |_, g| {
                    for (idx, (g, d)) in g.chunks_mut(hd).zip(dy.chunks(hd)).enumerate() {
                        let j = (idx / heads) % l;
                        let (c, s) = (&cos[j * half..(j + 1) * half], &sin[j * half..(j + 1) * half]);
                        for i in 0..half {
                            let (d0, d1) = (d[2 * i], d[2 * i + 1]);
                            g[2 * i] += d0 * c[i] + d1 * s[i];
                            g[2 * i + 1] += d1 * c[i] - d0 * s[i];
                        }
                    }
                });
            }
            Op::Loss { logits, ref dlogits } => {
                let up = dy[0];
                self.accum(logits, |_, g| {
                    for (g, &d) in g.iter_mut().zip(dlogits) {
                        *g += d * up;
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(g: &mut [T], d: &[T]) {
    for (g, &d) in g.iter_mut().zip(d) {
        *g += d;
    }
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Index(format!("token id {bad} >= vocab {vocab}")));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source offsets of the contiguous runs that make up `permute(shape, perm)`,
/// and the run length. Trailing axes left in place form one run.
fn permuted_runs(shape: &[usize], perm: &[usize]) -> (Vec<usize>, usize) {
    let mut j = perm.len();
    while j > 0 && perm[j - 1] == j - 1 && perm[..j - 1].iter().all(|&p| p < j - 1) {
        j -= 1;
    }
    let run: usize = shape[j..].iter().product();
    let offsets = permuted_offsets(&shape[..j], &perm[..j]);
    (offsets.into_iter().map(|o| o * run).collect(), run)
}

/// For each output element of `permute(shape, perm)`, its flat input offset.
fn permuted_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

const ROW_BLOCK: usize = 64;

/// `c = a·b` with `c` row-major `[m,n]`, split into row blocks.
#[allow(clippy::too_many_arguments)]
fn rows_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
) {
    gemm_blocks(m, k, n, a, la, b, lb, T::zero(), c);
}

/// `c += a·b`, same blocking as [`rows_gemm`].
#[allow(clippy::too_many_arguments)]
fn rows_gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
) {
    gemm_blocks(m, k, n, a, la, b, lb, T::one(), c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_blocks<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    par::for_each_chunk_mut(c, ROW_BLOCK * n, ROW_BLOCK * n * k, |blk, cc| {
        let r0 = blk * ROW_BLOCK;
        let rows = cc.len() / n;
        gemm(rows, k, n, &a[r0 * la.rs..], la, b, lb, beta, cc, Layout::row_major(n));
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap().with_grad()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i2 = g.leaf(t(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.leaf(t(vec![2, 2], &[3.0, -1.0, 0.5, 7.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), g.value(m));
    }

    #[test]
    fn hand_matmul() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(vec![2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(vec![3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_square_grad() {
        let mut g = Graph::<f64>::new();
        let xs = [1.0, -2.0, 5.0, 0.5];
        let x = g.leaf(t(vec![4], &xs));
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq);
        g.backward(m).unwrap();
        for (gx, &xv) in g.grad(x).unwrap().iter().zip(&xs) {
            assert!((gx - 2.0 * xv / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(vec![2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(vec![2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.leaf(t(vec![2, 3, 4], &data));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(g.value(p)[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), &data[..]);
    }

    #[test]
    fn embedding_mean_equal_rows() {
        let mut g = Graph::<f32>::new();
        let table = g.leaf(Tensor::from_f64(vec![3, 2], &[0.1, 0.7, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.embedding_mean(table, &[0, 0, 0, 1, 2, 2], 3).unwrap();
        assert_eq!(&g.value(m)[..2], &[0.1f32, 0.7]);
        let m2 = g.embedding_mean(table, &[1, 2], 2).unwrap();
        assert_eq!(g.value(m2), &[0.5f32, 0.5]);
    }

    #[test]
    fn embedding_rejects_large_ids() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(Tensor::zeros(vec![3, 2]));
        assert!(matches!(g.embedding(table, &[3]), Err(Error::Index(_))));
        assert!(matches!(g.embedding_mean(table, &[0, 5], 2), Err(Error::Index(_))));
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mask: Arc<[bool]> = vec![false, true].into();
        let y = g.masked_fill(x, mask, -7.0).unwrap();
        assert_eq!(g.value(y), &[1.0, -7.0, 3.0, -7.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
