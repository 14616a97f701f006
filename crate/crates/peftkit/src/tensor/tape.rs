//! Eager define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output tensor and enough
//! saved state to compute vector-Jacobian products. [`Tape::backward`]
//! replays the records in reverse, accumulating gradients into each
//! `requires_grad` leaf. A tape is built per forward pass and dropped
//! after its gradients have been read back.
//!
//! Broadcasting is restricted to trailing-dimension bias addition
//! ([`Tape::add_bias`]); everything else requires exact shapes.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<E> {
    tensor: Tensor<E>,
    op: Op<E>,
}

enum Op<E> {
    Leaf,
    /// out = A @ B, A: [.., k] viewed as m rows, B: [k, n]
    Matmul { a: Var, b: Var },
    /// out = A @ B^T, A: [.., k], B: [n, k]
    MatmulNt { a: Var, b: Var },
    /// out[i] = A[i] @ B[i], batched over leading extent
    Bmm { a: Var, b: Var },
    /// out[i] = A[i] @ B[i]^T
    BmmNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: E },
    /// a: [.., n] plus row vector b: [n]
    AddBias { a: Var, b: Var },
    Gelu { a: Var },
    /// Per-row mean/rstd over the last dimension, saved for backward.
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<E> },
    /// Row softmax over kept keys only; dropped keys get exact zero.
    /// `keep` is per (batch, key); scores are [batch*heads, q, k].
    /// With `causal`, key j additionally requires j <= query index.
    AttnSoftmax { scores: Var, keep: Vec<bool>, heads: usize, causal: bool },
    /// Plain softmax over the last dimension; saves the output.
    SoftmaxLastDim { a: Var },
    /// Per-row inner product over the last dimension: [.., h] x [.., h] -> [.., 1].
    RowDot { a: Var, b: Var },
    /// out[r, c] = a[r, 0] * b[r, c]; a: [.., 1], b: [.., h].
    MulBroadcastLast { a: Var, b: Var },
    /// Rows of `a` (viewed [rows, w]) at `indices`.
    GatherRows { a: Var, indices: Vec<usize> },
    /// Mean negative log-softmax over non-ignored rows; saves probabilities.
    SoftmaxXent { logits: Var, targets: Vec<i64>, ignore_index: i64, probs: Vec<E>, count: usize },
    /// out rows = table rows at `ids`; backward scatter-adds per index.
    EmbedLookup { table: Var, ids: Vec<u32> },
    /// [B, T, H] -> [B*heads, T, H/heads]
    SplitHeads { a: Var, heads: usize },
    /// [B*heads, T, H/heads] -> [B, T, H]
    MergeHeads { a: Var, heads: usize },
    Reshape { a: Var },
    /// [m, n] -> [n, m]
    Transpose { a: Var },
    ConcatLastDim { parts: Vec<Var> },
    SliceLastDim { a: Var, start: usize, len: usize },
    SumAll { a: Var },
    /// Inverted dropout; `kept` was drawn outside the tape.
    Dropout { a: Var, kept: Vec<bool>, scale: E },
}

pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf. Its `requires_grad` flag decides whether backward
    /// fills its gradient slot.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor<E>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].tensor
    }

    /// Gradient of a node after [`Tape::backward`]; `None` when no gradient
    /// was produced (non-leaf or `requires_grad == false`).
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor<E>, op: Op<E>) -> Var {
        #[cfg(debug_assertions)]
        {
            for x in tensor.values() {
                debug_assert!(
                    x.is_finite(),
                    "non-finite value produced by tape op at node {}",
                    self.nodes.len()
                );
            }
        }
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn out_requires(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].tensor.requires_grad())
    }

    fn values(&self, v: Var) -> &[E] {
        self.nodes[v.0].tensor.values()
    }

    // ── Matrix products ─────────────────────────────────────────────

    /// `a`: any shape with last dim k (viewed as m rows), `b`: [k, n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if bsh.len() != 2 || ash.last() != Some(&bsh[0]) {
            return Err(Error::Dimension(format!("matmul: {ash:?} @ {bsh:?}")));
        }
        let (k, n) = (bsh[0], bsh[1]);
        let m = self.value(a).leading();
        let mut out = vec![E::zero(); m * n];
        matmul_mk_kn(self.values(a), self.values(b), m, k, n, &mut out);
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        let rg = self.out_requires(&[a, b]);
        let t = Tensor::from_values(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    /// `a`: [.., k], `b`: [n, k]; out = a @ b^T without materializing b^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if bsh.len() != 2 || ash.last() != Some(&bsh[1]) {
            return Err(Error::Dimension(format!("matmul_nt: {ash:?} @ {bsh:?}^T")));
        }
        let (n, k) = (bsh[0], bsh[1]);
        let m = self.value(a).leading();
        let mut out = vec![E::zero(); m * n];
        matmul_mk_nk(self.values(a), self.values(b), m, k, n, &mut out);
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        let rg = self.out_requires(&[a, b]);
        let t = Tensor::from_values(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::MatmulNt { a, b }))
    }

    /// Batched product: a [batch, m, k] @ b [batch, k, n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::Dimension(format!("bmm: {ash:?} @ {bsh:?}")));
        }
        let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![E::zero(); batch * m * n];
        for i in 0..batch {
            matmul_mk_kn(
                &self.values(a)[i * m * k..(i + 1) * m * k],
                &self.values(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.out_requires(&[a, b]);
        let t = Tensor::from_values(vec![batch, m, n], out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Bmm { a, b }))
    }

    /// Batched product with transposed right factor: a [batch, m, k] @ b [batch, n, k]^T.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[2] {
            return Err(Error::Dimension(format!("bmm_nt: {ash:?} @ {bsh:?}^T")));
        }
        let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[1]);
        let mut out = vec![E::zero(); batch * m * n];
        for i in 0..batch {
            matmul_mk_nk(
                &self.values(a)[i * m * k..(i + 1) * m * k],
                &self.values(b)[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.out_requires(&[a, b]);
        let t = Tensor::from_values(vec![batch, m, n], out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::BmmNt { a, b }))
    }

    // ── Elementwise and affine ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape(a, b, |x, y| x + y, |a, b| Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape(a, b, |x, y| x - y, |a, b| Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same_shape(a, b, |x, y| x * y, |a, b| Op::Mul { a, b }, "mul")
    }

    fn zip_same_shape(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        op: impl FnOnce(Var, Var) -> Op<E>,
        name: &str,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let vals: Vec<E> =
            self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.out_requires(&[a, b]);
        let t = Tensor::from_values(shape, vals)?.with_requires_grad(rg);
        Ok(self.push(t, op(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let vals: Vec<E> = self.values(a).iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.out_requires(&[a]);
        let t = Tensor::from_values(shape, vals).unwrap().with_requires_grad(rg);
        self.push(t, Op::Scale { a, c })
    }

    /// Trailing-dimension broadcast add: a [.., n] + b [n].
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(b).shape() != [n] {
            return Err(Error::Dimension(format!(
                "add_bias: last dim {n} vs bias {:?}",
                self.value(b).shape()
            )));
        }
        let bvals = self.values(b).to_vec();
        let vals: Vec<E> = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bvals[i % n])
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.out_requires(&[a, b]);
        let t = Tensor::from_values(shape, vals)?.with_requires_grad(rg);
        Ok(self.push(t, Op::AddBias { a, b }))
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    /// GELU, tanh approximation: 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³))).
    pub fn gelu(&mut self, a: Var) -> Var {
        let vals: Vec<E> = self.values(a).iter().map(|&x| gelu_forward(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.out_requires(&[a]);
        let t = Tensor::from_values(shape, vals).unwrap().with_requires_grad(rg);
        self.push(t, Op::Gelu { a })
    }

    /// Per-row normalization over the last dimension, then `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Result<Var> {
        let h = self.value(x).last_dim();
        if self.value(gamma).shape() != [h] || self.value(beta).shape() != [h] {
            return Err(Error::Dimension(format!(
                "layer_norm: hidden {h} vs gamma {:?} beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let rows = self.value(x).leading();
        let xv = self.values(x);
        let gv = self.values(gamma);
        let bv = self.values(beta);
        let mut out = vec![E::zero(); rows * h];
        let mut stats = vec![E::zero(); rows * 2];
        let hn = E::from_usize(h);
        for r in 0..rows {
            let row = &xv[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<E>() / hn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / hn;
            let rstd = E::one() / (var + eps).sqrt();
            stats[r * 2] = mean;
            stats[r * 2 + 1] = rstd;
            for c in 0..h {
                out[r * h + c] = gv[c] * ((row[c] - mean) * rstd) + bv[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.out_requires(&[x, gamma, beta]);
        let t = Tensor::from_values(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, stats }))
    }

    // ── Attention pieces ────────────────────────────────────────────

    /// Row softmax over kept keys. `scores`: [batch*heads, q, k];
    /// `keep[b*k_len + j]` decides whether key j of batch row b participates;
    /// `causal` additionally restricts key j to j <= query index.
    /// Dropped keys get probability exactly zero.
    pub fn attn_softmax(
        &mut self,
        scores: Var,
        keep: &[bool],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let sh = self.value(scores).shape().to_vec();
        if sh.len() != 3 || sh[0] % heads != 0 {
            return Err(Error::Dimension(format!("attn_softmax: scores {sh:?}, heads {heads}")));
        }
        let (bh, q_len, k_len) = (sh[0], sh[1], sh[2]);
        let batch = bh / heads;
        if keep.len() != batch * k_len {
            return Err(Error::Dimension(format!(
                "attn_softmax: keep length {} vs batch {batch} × keys {k_len}",
                keep.len()
            )));
        }
        let sv = self.values(scores);
        let mut out = vec![E::zero(); sv.len()];
        for i in 0..bh {
            let b = i / heads;
            let krow = &keep[b * k_len..(b + 1) * k_len];
            for qi in 0..q_len {
                let base = i * q_len * k_len + qi * k_len;
                let row = &sv[base..base + k_len];
                let live = |j: usize| krow[j] && (!causal || j <= qi);
                let mut maxv = E::neg_infinity();
                for j in 0..k_len {
                    if live(j) && row[j] > maxv {
                        maxv = row[j];
                    }
                }
                if maxv == E::neg_infinity() {
                    continue; // no kept keys: leave the row at exact zero
                }
                let mut denom = E::zero();
                for j in 0..k_len {
                    if live(j) {
                        let e = (row[j] - maxv).exp();
                        out[base + j] = e;
                        denom += e;
                    }
                }
                for j in 0..k_len {
                    out[base + j] /= denom;
                }
            }
        }
        let rg = self.out_requires(&[scores]);
        let t = Tensor::from_values(sh, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::AttnSoftmax { scores, keep: keep.to_vec(), heads, causal }))
    }

    /// Softmax over the last dimension.
    pub fn softmax_last_dim(&mut self, a: Var) -> Var {
        let w = self.value(a).last_dim();
        let rows = self.value(a).leading();
        let av = self.values(a);
        let mut out = vec![E::zero(); av.len()];
        for r in 0..rows {
            let row = &av[r * w..(r + 1) * w];
            let maxv = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for j in 0..w {
                let e = (row[j] - maxv).exp();
                out[r * w + j] = e;
                denom += e;
            }
            for j in 0..w {
                out[r * w + j] /= denom;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.out_requires(&[a]);
        let t = Tensor::from_values(shape, out).unwrap().with_requires_grad(rg);
        self.push(t, Op::SoftmaxLastDim { a })
    }

    /// Per-row inner product over the last dimension: [.., h] ⊙ [.., h] -> [.., 1].
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "row_dot: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let h = self.value(a).last_dim();
        let rows = self.value(a).leading();
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![E::zero(); rows];
        for r in 0..rows {
            let mut acc = E::zero();
            for c in 0..h {
                acc += av[r * h + c] * bv[r * h + c];
            }
            out[r] = acc;
        }
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.out_requires(&[a, b]);
        let t = Tensor::from_values(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::RowDot { a, b }))
    }

    /// Broadcast multiply: a [.., 1] times b [.., h].
    pub fn mul_broadcast_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let rows = self.value(b).leading();
        if self.value(a).last_dim() != 1 || self.value(a).numel() != rows {
            return Err(Error::Dimension(format!(
                "mul_broadcast_last: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let h = self.value(b).last_dim();
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![E::zero(); bv.len()];
        for r in 0..rows {
            for c in 0..h {
                out[r * h + c] = av[r] * bv[r * h + c];
            }
        }
        let shape = self.value(b).shape().to_vec();
        let rg = self.out_requires(&[a, b]);
        let t = Tensor::from_values(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::MulBroadcastLast { a, b }))
    }

    /// Rows of `a` (viewed [rows, w]) at `indices`; output [indices.len(), w]
    /// reshaped to `out_shape`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize], out_shape: Vec<usize>) -> Result<Var> {
        let w = self.value(a).last_dim();
        let rows = self.value(a).leading();
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() * w {
            return Err(Error::Dimension(format!(
                "gather_rows: out shape {out_shape:?} vs {} rows × width {w}",
                indices.len()
            )));
        }
        let av = self.values(a);
        let mut out = vec![E::zero(); indices.len() * w];
        for (i, &r) in indices.iter().enumerate() {
            if r >= rows {
                return Err(Error::Input(format!("gather_rows: row {r} of {rows}")));
            }
            out[i * w..(i + 1) * w].copy_from_slice(&av[r * w..(r + 1) * w]);
        }
        let rg = self.out_requires(&[a]);
        let t = Tensor::from_values(out_shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::GatherRows { a, indices: indices.to_vec() }))
    }

    // ── Loss ────────────────────────────────────────────────────────

    /// Mean negative log-softmax over rows whose target is not `ignore_index`.
    /// `logits` is viewed as [rows, vocab] over its last dimension.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).leading();
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let lv = self.values(logits);
        let mut probs = vec![E::zero(); rows * v];
        let mut total = E::zero();
        let mut count = 0usize;
        for r in 0..rows {
            let t = targets[r];
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= v {
                return Err(Error::Input(format!("target {t} outside vocab of size {v}")));
            }
            let row = &lv[r * v..(r + 1) * v];
            let maxv = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for j in 0..v {
                let e = (row[j] - maxv).exp();
                probs[r * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[r * v + j] /= denom;
            }
            let lse = maxv + denom.ln();
            total += lse - row[t as usize];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input(
                "softmax_cross_entropy: every target is ignored, mean undefined".into(),
            ));
        }
        let loss = total / E::from_usize(count);
        let rg = self.out_requires(&[logits]);
        let t = Tensor::scalar(loss).with_requires_grad(rg);
        Ok(self.push(
            t,
            Op::SoftmaxXent { logits, targets: targets.to_vec(), ignore_index, probs, count },
        ))
    }

    // ── Lookups and shape ───────────────────────────────────────────

    /// Rows of `table` ([vocab, width]) at `ids`; output shape is
    /// `out_shape` and must equal [ids.len(), width] in element count.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32], out_shape: Vec<usize>) -> Result<Var> {
        let tsh = self.value(table).shape().to_vec();
        if tsh.len() != 2 {
            return Err(Error::Dimension(format!("embedding_lookup: table {tsh:?}")));
        }
        let (vocab, width) = (tsh[0], tsh[1]);
        let numel: usize = out_shape.iter().product();
        if numel != ids.len() * width {
            return Err(Error::Dimension(format!(
                "embedding_lookup: out shape {out_shape:?} vs {} ids × width {width}",
                ids.len()
            )));
        }
        let tv = self.values(table);
        let mut out = vec![E::zero(); ids.len() * width];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Input(format!("id {id} outside table of {vocab} rows")));
            }
            out[i * width..(i + 1) * width].copy_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let rg = self.out_requires(&[table]);
        let t = Tensor::from_values(out_shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::EmbedLookup { table, ids: ids.to_vec() }))
    }

    /// [B, T, H] -> [B*heads, T, H/heads].
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 3 || sh[2] % heads != 0 {
            return Err(Error::Dimension(format!("split_heads: {sh:?} into {heads} heads")));
        }
        let (b, t, h) = (sh[0], sh[1], sh[2]);
        let dh = h / heads;
        let av = self.values(a);
        let mut out = vec![E::zero(); av.len()];
        for bi in 0..b {
            for hh in 0..heads {
                for ti in 0..t {
                    let src = bi * t * h + ti * h + hh * dh;
                    let dst = (bi * heads + hh) * t * dh + ti * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        let rg = self.out_requires(&[a]);
        let tn = Tensor::from_values(vec![b * heads, t, dh], out)?.with_requires_grad(rg);
        Ok(self.push(tn, Op::SplitHeads { a, heads }))
    }

    /// [B*heads, T, H/heads] -> [B, T, H].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 3 || sh[0] % heads != 0 {
            return Err(Error::Dimension(format!("merge_heads: {sh:?} from {heads} heads")));
        }
        let (bh, t, dh) = (sh[0], sh[1], sh[2]);
        let b = bh / heads;
        let h = dh * heads;
        let av = self.values(a);
        let mut out = vec![E::zero(); av.len()];
        for bi in 0..b {
            for hh in 0..heads {
                for ti in 0..t {
                    let src = (bi * heads + hh) * t * dh + ti * dh;
                    let dst = bi * t * h + ti * h + hh * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        let rg = self.out_requires(&[a]);
        let tn = Tensor::from_values(vec![b, t, h], out)?.with_requires_grad(rg);
        Ok(self.push(tn, Op::MergeHeads { a, heads }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {shape:?}",
                self.value(a).shape()
            )));
        }
        let vals = self.values(a).to_vec();
        let rg = self.out_requires(&[a]);
        let t = Tensor::from_values(shape, vals)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::Dimension(format!("transpose: {sh:?} is not 2-D")));
        }
        let (m, n) = (sh[0], sh[1]);
        let av = self.values(a);
        let mut out = vec![E::zero(); av.len()];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.out_requires(&[a]);
        let t = Tensor::from_values(vec![n, m], out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Transpose { a }))
    }

    /// Concatenate along the last dimension; leading dims must agree.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_last_dim: no parts".into()));
        }
        let lead_shape: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::Dimension(format!(
                    "concat_last_dim: leading dims {:?} vs {:?}",
                    &s[..s.len() - 1],
                    lead_shape
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead_shape.iter().product::<usize>().max(1);
        let mut out = vec![E::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.values(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead_shape;
        shape.push(total);
        let rg = self.out_requires(parts);
        let t = Tensor::from_values(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::ConcatLastDim { parts: parts.to_vec() }))
    }

    /// Contiguous slice `[start, start+len)` of the last dimension.
    pub fn slice_last_dim(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.value(a).shape().to_vec();
        let w = *sh.last().unwrap();
        if start + len > w || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_last_dim: [{start}, {}) of width {w}",
                start + len
            )));
        }
        let rows = self.value(a).leading();
        let av = self.values(a);
        let mut out = vec![E::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&av[r * w + start..r * w + start + len]);
        }
        let mut shape = sh;
        *shape.last_mut().unwrap() = len;
        let rg = self.out_requires(&[a]);
        let t = Tensor::from_values(shape, out)?.with_requires_grad(rg);
        Ok(self.push(t, Op::SliceLastDim { a, start, len }))
    }

    /// Split the last dimension in two at `at`.
    pub fn split_last_dim(&mut self, a: Var, at: usize) -> Result<(Var, Var)> {
        let w = self.value(a).last_dim();
        if at == 0 || at >= w {
            return Err(Error::Dimension(format!("split_last_dim: at {at} of width {w}")));
        }
        let left = self.slice_last_dim(a, 0, at)?;
        let right = self.slice_last_dim(a, at, w - at)?;
        Ok((left, right))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: E = self.values(a).iter().copied().sum();
        let rg = self.out_requires(&[a]);
        let t = Tensor::scalar(s).with_requires_grad(rg);
        self.push(t, Op::SumAll { a })
    }

    /// Inverted dropout with a pre-drawn keep mask (seeded outside the tape).
    pub fn dropout(&mut self, a: Var, kept: &[bool], keep_prob: E) -> Result<Var> {
        if kept.len() != self.value(a).numel() {
            return Err(Error::Dimension(format!(
                "dropout: mask {} vs tensor {}",
                kept.len(),
                self.value(a).numel()
            )));
        }
        let scale = E::one() / keep_prob;
        let vals: Vec<E> = self
            .values(a)
            .iter()
            .zip(kept)
            .map(|(&x, &k)| if k { x * scale } else { E::zero() })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.out_requires(&[a]);
        let t = Tensor::from_values(shape, vals)?.with_requires_grad(rg);
        Ok(self.push(t, Op::Dropout { a, kept: kept.to_vec(), scale }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Afterwards every `requires_grad`
    /// leaf holds its gradient (zeros when the loss does not depend on it);
    /// leaves with `requires_grad == false` keep an empty gradient slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Dimension(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for i in 0..n {
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            if node.tensor.requires_grad() {
                let g = grads[i].take().unwrap_or_else(|| vec![E::zero(); node.tensor.numel()]);
                node.tensor.set_grad(Some(g));
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<E>>], v: Var, delta: &[E]) {
        if !self.nodes[v.0].tensor.requires_grad() {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, idx: usize, g: &[E], grads: &mut Vec<Option<Vec<E>>>) {
        // The op is moved out and restored to appease the borrow checker;
        // saved state inside the variant stays intact.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let k = self.value(*b).shape()[0];
                let n = self.value(*b).shape()[1];
                let m = self.value(*a).leading();
                if self.nodes[a.0].tensor.requires_grad() {
                    // dA = dOut @ B^T
                    let mut da = vec![E::zero(); m * k];
                    matmul_mk_nk(g, self.values(*b), m, n, k, &mut da);
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad() {
                    // dB = A^T @ dOut
                    let mut db = vec![E::zero(); k * n];
                    matmul_tm_kn(self.values(*a), g, m, k, n, &mut db);
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatmulNt { a, b } => {
                let n = self.value(*b).shape()[0];
                let k = self.value(*b).shape()[1];
                let m = self.value(*a).leading();
                if self.nodes[a.0].tensor.requires_grad() {
                    // dA = dOut @ B
                    let mut da = vec![E::zero(); m * k];
                    matmul_mk_kn(g, self.values(*b), m, n, k, &mut da);
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad() {
                    // dB = dOut^T @ A
                    let mut db = vec![E::zero(); n * k];
                    matmul_tm_kn(g, self.values(*a), m, n, k, &mut db);
                    self.accum(grads, *b, &db);
                }
            }
            Op::Bmm { a, b } => {
                let ash = self.value(*a).shape().to_vec();
                let bsh = self.value(*b).shape().to_vec();
                let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
                if self.nodes[a.0].tensor.requires_grad() {
                    let mut da = vec![E::zero(); batch * m * k];
                    for i in 0..batch {
                        matmul_mk_nk(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.values(*b)[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad() {
                    let mut db = vec![E::zero(); batch * k * n];
                    for i in 0..batch {
                        matmul_tm_kn(
                            &self.values(*a)[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::BmmNt { a, b } => {
                let ash = self.value(*a).shape().to_vec();
                let bsh = self.value(*b).shape().to_vec();
                let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[1]);
                if self.nodes[a.0].tensor.requires_grad() {
                    // dA_i = dOut_i @ B_i
                    let mut da = vec![E::zero(); batch * m * k];
                    for i in 0..batch {
                        matmul_mk_kn(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.values(*b)[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad() {
                    // dB_i = dOut_i^T @ A_i
                    let mut db = vec![E::zero(); batch * n * k];
                    for i in 0..batch {
                        matmul_tm_kn(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.values(*a)[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut db[i * n * k..(i + 1) * n * k],
                        );
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g);
                if self.nodes[b.0].tensor.requires_grad() {
                    let neg: Vec<E> = g.iter().map(|&x| -x).collect();
                    self.accum(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let da: Vec<E> =
                        g.iter().zip(self.values(*b)).map(|(&gi, &bi)| gi * bi).collect();
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad() {
                    let db: Vec<E> =
                        g.iter().zip(self.values(*a)).map(|(&gi, &ai)| gi * ai).collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let da: Vec<E> = g.iter().map(|&x| x * *c).collect();
                    self.accum(grads, *a, &da);
                }
            }
            Op::AddBias { a, b } => {
                self.accum(grads, *a, g);
                if self.nodes[b.0].tensor.requires_grad() {
                    let n = self.value(*b).numel();
                    let mut db = vec![E::zero(); n];
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Gelu { a } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let da: Vec<E> = self
                        .values(*a)
                        .iter()
                        .zip(g)
                        .map(|(&x, &gi)| gi * gelu_backward(x))
                        .collect();
                    self.accum(grads, *a, &da);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let h = self.value(*x).last_dim();
                let rows = self.value(*x).leading();
                let xv = self.values(*x);
                let gv = self.values(*gamma);
                let hn = E::from_usize(h);
                let need_dx = self.nodes[x.0].tensor.requires_grad();
                let need_dg = self.nodes[gamma.0].tensor.requires_grad();
                let need_db = self.nodes[beta.0].tensor.requires_grad();
                let mut dx = if need_dx { vec![E::zero(); rows * h] } else { Vec::new() };
                let mut dg = if need_dg { vec![E::zero(); h] } else { Vec::new() };
                let mut dbta = if need_db { vec![E::zero(); h] } else { Vec::new() };
                for r in 0..rows {
                    let mean = stats[r * 2];
                    let rstd = stats[r * 2 + 1];
                    let xrow = &xv[r * h..(r + 1) * h];
                    let grow = &g[r * h..(r + 1) * h];
                    if need_dg || need_db {
                        for c in 0..h {
                            let xhat = (xrow[c] - mean) * rstd;
                            if need_dg {
                                dg[c] += grow[c] * xhat;
                            }
                            if need_db {
                                dbta[c] += grow[c];
                            }
                        }
                    }
                    if need_dx {
                        let mut sum_dy = E::zero();
                        let mut sum_dy_xhat = E::zero();
                        for c in 0..h {
                            let dy = grow[c] * gv[c];
                            let xhat = (xrow[c] - mean) * rstd;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                        for c in 0..h {
                            let dy = grow[c] * gv[c];
                            let xhat = (xrow[c] - mean) * rstd;
                            dx[r * h + c] =
                                rstd * (dy - sum_dy / hn - xhat * sum_dy_xhat / hn);
                        }
                    }
                }
                if need_dx {
                    self.accum(grads, *x, &dx);
                }
                if need_dg {
                    self.accum(grads, *gamma, &dg);
                }
                if need_db {
                    self.accum(grads, *beta, &dbta);
                }
            }
            Op::AttnSoftmax { scores, keep, heads, causal } => {
                if self.nodes[scores.0].tensor.requires_grad() {
                    let sh = self.nodes[idx].tensor.shape().to_vec();
                    let (bh, q_len, k_len) = (sh[0], sh[1], sh[2]);
                    let pv = self.nodes[idx].tensor.values();
                    let mut ds = vec![E::zero(); pv.len()];
                    for i in 0..bh {
                        let b = i / heads;
                        let krow = &keep[b * k_len..(b + 1) * k_len];
                        for qi in 0..q_len {
                            let base = i * q_len * k_len + qi * k_len;
                            let live = |j: usize| krow[j] && (!causal || j <= qi);
                            let mut dot = E::zero();
                            for j in 0..k_len {
                                if live(j) {
                                    dot += pv[base + j] * g[base + j];
                                }
                            }
                            for j in 0..k_len {
                                if live(j) {
                                    ds[base + j] = pv[base + j] * (g[base + j] - dot);
                                }
                            }
                        }
                    }
                    self.accum(grads, *scores, &ds);
                }
            }
            Op::SoftmaxLastDim { a } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let w = self.nodes[idx].tensor.last_dim();
                    let rows = self.nodes[idx].tensor.leading();
                    let pv = self.nodes[idx].tensor.values();
                    let mut da = vec![E::zero(); pv.len()];
                    for r in 0..rows {
                        let mut dot = E::zero();
                        for j in 0..w {
                            dot += pv[r * w + j] * g[r * w + j];
                        }
                        for j in 0..w {
                            da[r * w + j] = pv[r * w + j] * (g[r * w + j] - dot);
                        }
                    }
                    self.accum(grads, *a, &da);
                }
            }
            Op::RowDot { a, b } => {
                let h = self.value(*a).last_dim();
                let rows = self.value(*a).leading();
                if self.nodes[a.0].tensor.requires_grad() {
                    let bv = self.values(*b);
                    let mut da = vec![E::zero(); rows * h];
                    for r in 0..rows {
                        for c in 0..h {
                            da[r * h + c] = g[r] * bv[r * h + c];
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad() {
                    let av = self.values(*a);
                    let mut db = vec![E::zero(); rows * h];
                    for r in 0..rows {
                        for c in 0..h {
                            db[r * h + c] = g[r] * av[r * h + c];
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::MulBroadcastLast { a, b } => {
                let h = self.value(*b).last_dim();
                let rows = self.value(*b).leading();
                if self.nodes[a.0].tensor.requires_grad() {
                    let bv = self.values(*b);
                    let mut da = vec![E::zero(); rows];
                    for r in 0..rows {
                        for c in 0..h {
                            da[r] += g[r * h + c] * bv[r * h + c];
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad() {
                    let av = self.values(*a);
                    let mut db = vec![E::zero(); rows * h];
                    for r in 0..rows {
                        for c in 0..h {
                            db[r * h + c] = av[r] * g[r * h + c];
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::GatherRows { a, indices } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let w = self.value(*a).last_dim();
                    let mut da = vec![E::zero(); self.value(*a).numel()];
                    for (i, &r) in indices.iter().enumerate() {
                        for c in 0..w {
                            da[r * w + c] += g[i * w + c];
                        }
                    }
                    self.accum(grads, *a, &da);
                }
            }
            Op::SoftmaxXent { logits, targets, ignore_index, probs, count } => {
                if self.nodes[logits.0].tensor.requires_grad() {
                    let v = self.value(*logits).last_dim();
                    let rows = self.value(*logits).leading();
                    let scale = g[0] / E::from_usize(*count);
                    let mut dl = vec![E::zero(); rows * v];
                    for r in 0..rows {
                        let t = targets[r];
                        if t == *ignore_index {
                            continue;
                        }
                        for j in 0..v {
                            dl[r * v + j] = probs[r * v + j] * scale;
                        }
                        dl[r * v + t as usize] -= scale;
                    }
                    self.accum(grads, *logits, &dl);
                }
            }
            Op::EmbedLookup { table, ids } => {
                if self.nodes[table.0].tensor.requires_grad() {
                    let width = self.value(*table).shape()[1];
                    let mut dt = vec![E::zero(); self.value(*table).numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = id as usize * width;
                        for c in 0..width {
                            dt[dst + c] += g[i * width + c];
                        }
                    }
                    self.accum(grads, *table, &dt);
                }
            }
            Op::SplitHeads { a, heads } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let sh = self.value(*a).shape().to_vec();
                    let (b, t, h) = (sh[0], sh[1], sh[2]);
                    let dh = h / heads;
                    let mut da = vec![E::zero(); b * t * h];
                    for bi in 0..b {
                        for hh in 0..*heads {
                            for ti in 0..t {
                                let dst = bi * t * h + ti * h + hh * dh;
                                let src = (bi * heads + hh) * t * dh + ti * dh;
                                da[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    self.accum(grads, *a, &da);
                }
            }
            Op::MergeHeads { a, heads } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let sh = self.value(*a).shape().to_vec();
                    let (bh, t, dh) = (sh[0], sh[1], sh[2]);
                    let b = bh / heads;
                    let h = dh * heads;
                    let mut da = vec![E::zero(); bh * t * dh];
                    for bi in 0..b {
                        for hh in 0..*heads {
                            for ti in 0..t {
                                let src = bi * t * h + ti * h + hh * dh;
                                let dst = (bi * heads + hh) * t * dh + ti * dh;
                                da[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    self.accum(grads, *a, &da);
                }
            }
            Op::Reshape { a } => {
                self.accum(grads, *a, g);
            }
            Op::Transpose { a } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let sh = self.value(*a).shape().to_vec();
                    let (m, n) = (sh[0], sh[1]);
                    let mut da = vec![E::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    self.accum(grads, *a, &da);
                }
            }
            Op::ConcatLastDim { parts } => {
                let total = self.nodes[idx].tensor.last_dim();
                let rows = self.nodes[idx].tensor.leading();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.nodes[p.0].tensor.requires_grad() {
                        let mut dp = vec![E::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accum(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::SliceLastDim { a, start, len } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let w = self.value(*a).last_dim();
                    let rows = self.value(*a).leading();
                    let mut da = vec![E::zero(); rows * w];
                    for r in 0..rows {
                        da[r * w + start..r * w + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accum(grads, *a, &da);
                }
            }
            Op::SumAll { a } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let da = vec![g[0]; self.value(*a).numel()];
                    self.accum(grads, *a, &da);
                }
            }
            Op::Dropout { a, kept, scale } => {
                if self.nodes[a.0].tensor.requires_grad() {
                    let da: Vec<E> = g
                        .iter()
                        .zip(kept)
                        .map(|(&gi, &k)| if k { gi * *scale } else { E::zero() })
                        .collect();
                    self.accum(grads, *a, &da);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

// ── Kernels ─────────────────────────────────────────────────────────

/// out += A @ B with A: [m, k], B: [k, n]. ikj order for cache locality.
fn matmul_mk_kn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == E::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out += A @ B^T with A: [m, k], B: [n, k]. Row-dot-row form.
fn matmul_mk_nk<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += A^T @ B with A: [m, k], B: [m, n]; out: [k, n].
fn matmul_tm_kn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == E::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_forward<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (E::one() + inner.tanh())
}

fn gelu_backward<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(tape: &mut Tape<f64>, shape: Vec<usize>, vals: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_values(shape, vals).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity_times_any() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = leaf64(
            &mut tape,
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let a = leaf64(&mut tape, vec![3, 3], (1..=9).map(f64::from).collect());
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).values(), tape.value(a).values());
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] @ [[5],[6]] = [[17],[39]]
        let mut tape: Tape<f64> = Tape::new();
        let a = leaf64(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf64(&mut tape, vec![2, 1], vec![5.0, 6.0]);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).values(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape: Tape<f64> = Tape::new();
        let a = leaf64(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf64(&mut tape, vec![2, 3], vec![0.0; 6]);
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![1, 4], vec![3.0; 4]);
        let gamma = leaf64(&mut tape, vec![4], vec![1.0; 4]);
        let beta = leaf64(&mut tape, vec![4], vec![0.0; 4]);
        let out = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for &v in tape.value(out).values() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // row [1, 3] with eps -> 0 normalizes to [-1, 1]
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![1, 2], vec![1.0, 3.0]);
        let gamma = leaf64(&mut tape, vec![2], vec![1.0; 2]);
        let beta = leaf64(&mut tape, vec![2], vec![0.0; 2]);
        let out = tape.layer_norm(x, gamma, beta, 1e-15).unwrap();
        let v = tape.value(out).values();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_gamma_broadcasts_beta() {
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![2, 3], vec![1.0, -2.0, 0.5, 7.0, 7.5, -1.0]);
        let gamma = leaf64(&mut tape, vec![3], vec![0.0; 3]);
        let beta = leaf64(&mut tape, vec![3], vec![0.25, -0.5, 4.0]);
        let out = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let v = tape.value(out).values();
        assert_eq!(&v[0..3], &[0.25, -0.5, 4.0]);
        assert_eq!(&v[3..6], &[0.25, -0.5, 4.0]);
    }

    #[test]
    fn xent_uniform_logits_is_ln_v() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = leaf64(&mut tape, vec![2, 4], vec![0.7; 8]);
        let loss = tape.softmax_cross_entropy(logits, &[1, 3], -100).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_dominant_logit_drives_loss_to_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = leaf64(&mut tape, vec![1, 3], vec![50.0, 0.0, 0.0]);
        let loss = tape.softmax_cross_entropy(logits, &[0], -100).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn xent_hand_case() {
        // logits [0, ln 3], target 0: p0 = 1/4, loss = ln 4
        let mut tape: Tape<f64> = Tape::new();
        let logits = leaf64(&mut tape, vec![1, 2], vec![0.0, 3.0f64.ln()]);
        let loss = tape.softmax_cross_entropy(logits, &[0], -100).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_all_ignored_is_error() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = leaf64(&mut tape, vec![2, 3], vec![0.0; 6]);
        assert!(tape.softmax_cross_entropy(logits, &[-100, -100], -100).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum(x^2), x = [1, 2] -> grad [2, 4]
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        let frozen = tape.constant(Tensor::from_values(vec![2], vec![3.0, 4.0]).unwrap());
        let prod = tape.mul(x, frozen).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(frozen).is_none());
    }

    #[test]
    fn non_participating_leaf_holds_zeros() {
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        let unused = leaf64(&mut tape, vec![3], vec![1.0; 3]);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gelu_at_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![1], vec![0.0]);
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).values(), &[0.0]);
    }

    #[test]
    fn split_concat_roundtrip() {
        let mut tape: Tape<f64> = Tape::new();
        let x = leaf64(&mut tape, vec![2, 4], (1..=8).map(f64::from).collect());
        let (l, r) = tape.split_last_dim(x, 2).unwrap();
        let back = tape.concat_last_dim(&[l, r]).unwrap();
        assert_eq!(tape.value(back).values(), tape.value(x).values());
        assert_eq!(tape.value(back).shape(), tape.value(x).shape());
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut tape: Tape<f64> = Tape::new();
        let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let x = leaf64(&mut tape, vec![2, 3, 4], vals);
        let s = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.value(s).shape(), &[4, 3, 2]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m).values(), tape.value(x).values());
    }

    #[test]
    fn embedding_lookup_accumulates_repeated_ids() {
        let mut tape: Tape<f64> = Tape::new();
        let table = leaf64(&mut tape, vec![3, 2], vec![0.0; 6]);
        let out = tape.embedding_lookup(table, &[1, 1, 2], vec![3, 2]).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        // row 1 used twice, row 2 once, row 0 never
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_lookup_rejects_out_of_range() {
        let mut tape: Tape<f64> = Tape::new();
        let table = leaf64(&mut tape, vec![3, 2], vec![0.0; 6]);
        assert!(matches!(
            tape.embedding_lookup(table, &[3], vec![1, 2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn attn_softmax_rows_sum_to_one_over_kept() {
        let mut tape: Tape<f64> = Tape::new();
        let scores = leaf64(&mut tape, vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.3).collect());
        // one batch row (2 heads), keys 0 and 2 kept
        let keep = vec![true, false, true];
        let probs = tape.attn_softmax(scores, &keep, 2, false).unwrap();
        let pv = tape.value(probs).values();
        for q in 0..4 {
            let row = &pv[q * 3..(q + 1) * 3];
            assert_eq!(row[1], 0.0);
            assert!((row[0] + row[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let mut tape: Tape<f64> = Tape::new();
            let x = leaf64(&mut tape, vec![2, 3], vec![0.3, -1.2, 0.7, 2.2, -0.4, 0.05]);
            let w = leaf64(&mut tape, vec![3, 2], vec![0.1, -0.2, 0.4, 0.9, -1.1, 0.6]);
            let y = tape.matmul(x, w).unwrap();
            let z = tape.gelu(y);
            let loss = tape.sum_all(z);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item().to_bits(),
                tape.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
