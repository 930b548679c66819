use super::tensor::{logsumexp, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

const LAYER_NORM_EPS: f64 = 1e-10;

enum Op {
    Leaf,
    /// a[m,k] @ b[k,n]
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// a[m,k] @ b[n,k]^T
    MatmulNT {
        a: NodeId,
        b: NodeId,
    },
    /// Batched matmul; rank-2 operands broadcast over the batch axis.
    Bmm {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Elementwise product.
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    /// x[n,d] + bias[d] broadcast over rows.
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    /// a[l,n,n] + bias[n,l] broadcast over the last axis.
    AddPairBias {
        a: NodeId,
        bias: NodeId,
    },
    /// x + constant tensor (no gradient to the constant).
    AddConst {
        x: NodeId,
    },
    /// x ⊙ constant mask (dropout / padding-row masks).
    MulMask {
        x: NodeId,
        mask: Tensor,
    },
    Relu {
        x: NodeId,
    },
    /// Softmax over the last axis, max-shifted.
    Softmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Same-length 1-d convolution over rows with zero padding.
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        width: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// log Σ exp over a fixed set of flat indices; yields a scalar.
    LogSumExpGather {
        x: NodeId,
        idxs: Vec<usize>,
    },
    /// Packs scalar nodes into one tensor in row-major order.
    StackScalars {
        parts: Vec<NodeId>,
    },
    Sum {
        x: NodeId,
    },
    /// Mean softmax cross-entropy over unmasked rows; yields a scalar.
    SoftmaxCrossEntropy {
        logits: NodeId,
        gold: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Record of executed primitives enabling reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it; a reverse index walk therefore visits each node after all of its
/// consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]. Nodes the loss never touched
/// have no entry and read as zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// a[m,k] @ b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::MatmulNT { a, b }))
    }

    /// Batched matmul `[B,m,k] @ [B,k,n] -> [B,m,n]`. A rank-2 operand is
    /// broadcast across the batch. With `transpose_b`, `b` is `[B,n,k]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || shape_err("bmm", &sa, &sb);
        let batch = match (sa.len(), sb.len()) {
            (3, 3) if sa[0] == sb[0] => sa[0],
            (3, 2) => sa[0],
            (2, 3) => sb[0],
            _ => return Err(err()),
        };
        let (m, k) = match sa.len() {
            3 => (sa[1], sa[2]),
            _ => (sa[0], sa[1]),
        };
        let (bk, n) = {
            let s = if sb.len() == 3 { &sb[1..] } else { &sb[..] };
            if transpose_b {
                (s[1], s[0])
            } else {
                (s[0], s[1])
            }
        };
        if k != bk {
            return Err(err());
        }
        let mut out = Tensor::zeros(&[batch, m, n]);
        for t in 0..batch {
            let a_dat = self.batch_slice(a, t, m * k);
            let b_dat = self.batch_slice(b, t, k * n);
            let o = &mut out.data_mut()[t * m * n..(t + 1) * m * n];
            if transpose_b {
                matmul_nt_acc(a_dat, b_dat, o, m, k, n);
            } else {
                matmul_acc(a_dat, b_dat, o, m, k, n);
            }
        }
        Ok(self.push(out, Op::Bmm { a, b, transpose_b }))
    }

    fn batch_slice(&self, id: NodeId, t: usize, per: usize) -> &[f64] {
        let v = self.value(id);
        if v.shape().len() == 3 {
            &v.data()[t * per..(t + 1) * per]
        } else {
            v.data()
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(sa, data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(sa, data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale { x, c })
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let d = sx[1];
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    /// a[l,n,n] + bias[n,l]: adds bias[i,r] to every a[r,i,j].
    pub fn add_pair_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 3 || sb.len() != 2 || sb != [sa[1], sa[0]] {
            return Err(shape_err("add_pair_bias", &sa, &sb));
        }
        let (l, n) = (sa[0], sa[1]);
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..l {
            for i in 0..n {
                let bv = b[i * l + r];
                for v in &mut out.data_mut()[(r * n + i) * n..(r * n + i + 1) * n] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(out, Op::AddPairBias { a, bias }))
    }

    /// x + constant; the constant receives no gradient.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("add_const", self.shape(x), c.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor::from_vec(c.shape(), data)?;
        Ok(self.push(out, Op::AddConst { x }))
    }

    /// x ⊙ constant mask; used for dropout and padding-row masking.
    pub fn mul_mask(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        if self.shape(x) != mask.shape() {
            return Err(shape_err("mul_mask", self.shape(x), mask.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::from_vec(mask.shape(), data)?;
        Ok(self.push(
            out,
            Op::MulMask {
                x,
                mask: mask.clone(),
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { x })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(shape_err("softmax", s, &[]));
        }
        let k = *s.last().unwrap();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(k) {
            softmax_row_in_place(row);
        }
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// Per-row layer normalization followed by elementwise gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        if sx.len() != 2 || sg != [sx[1]] || sb != [sx[1]] {
            return Err(shape_err("layer_norm", sx, sg));
        }
        let d = sx[1];
        let mut out = self.value(x).clone();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(d) {
            let (mean, inv_std) = row_moments(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }))
    }

    /// Same-length 1-d convolution over rows: `x[n,cin] * kernel[w,cin,cout]
    /// + bias[cout] -> [n,cout]`, zero padded by (w-1)/2 on each side.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 || sk.len() != 3 || sk[1] != sx[1] || sk[0] % 2 == 0 || sb != [sk[2]] {
            return Err(shape_err("conv1d", &sx, &sk));
        }
        let (n, cin) = (sx[0], sx[1]);
        let (width, cout) = (sk[0], sk[2]);
        let pad = (width - 1) / 2;
        let mut out = Tensor::zeros(&[n, cout]);
        {
            let xd = self.value(x).data();
            let kd = self.value(kernel).data();
            let bd = self.value(bias).data();
            let od = out.data_mut();
            for i in 0..n {
                let o_row = &mut od[i * cout..(i + 1) * cout];
                o_row.copy_from_slice(bd);
                for t in 0..width {
                    let s = i + t;
                    if s < pad || s - pad >= n {
                        continue;
                    }
                    let x_row = &xd[(s - pad) * cin..(s - pad + 1) * cin];
                    for (ci, &xv) in x_row.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let k_row = &kd[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                        for (ov, &kv) in o_row.iter_mut().zip(k_row) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
            },
        ))
    }

    /// Concatenates `[n, d_i]` tensors along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let n = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat_cols", self.shape(parts[0]), s));
            }
            total += s[1];
        }
        let mut out = Tensor::zeros(&[n, total]);
        let mut col = 0;
        for &p in parts {
            let d = self.shape(p)[1];
            let src = self.value(p).data().to_vec();
            for i in 0..n {
                out.data_mut()[i * total + col..i * total + col + d]
                    .copy_from_slice(&src[i * d..(i + 1) * d]);
            }
            col += d;
        }
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Concatenates `[r_i, d]` tensors along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let d = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(shape_err("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[rows, d], data)?;
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Copies columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err("slice_cols", &s, &[start, len]));
        }
        let (n, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.value(x).data()[i * d + start..i * d + start + len]);
        }
        let out = Tensor::from_vec(&[n, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    /// Gathers rows of `table[v,d]` by id.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err("embedding_lookup", &s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// log Σ exp over the given flat indices of `x`; returns a scalar node.
    pub fn logsumexp_gather(&mut self, x: NodeId, idxs: &[usize]) -> Result<NodeId> {
        if idxs.is_empty() {
            return Err(Error::Contract("logsumexp over an empty set".into()));
        }
        let numel = self.value(x).numel();
        if let Some(&bad) = idxs.iter().find(|&&i| i >= numel) {
            return Err(Error::Contract(format!(
                "logsumexp index {bad} out of range for {numel} elements"
            )));
        }
        let xs: Vec<f64> = idxs.iter().map(|&i| self.value(x).data()[i]).collect();
        let out = Tensor::scalar(logsumexp(&xs));
        Ok(self.push(
            out,
            Op::LogSumExpGather {
                x,
                idxs: idxs.to_vec(),
            },
        ))
    }

    /// Packs scalar nodes into a tensor of the given shape, row-major.
    pub fn stack_scalars(&mut self, parts: &[NodeId], shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != parts.len() {
            return Err(shape_err("stack_scalars", &[parts.len()], shape));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(shape_err("stack_scalars", self.shape(p), &[1]));
            }
            data.push(self.value(p).item());
        }
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(
            out,
            Op::StackScalars {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Sum of all elements; returns a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum { x })
    }

    /// Mean softmax cross-entropy of `logits[n,k]` against `gold` over
    /// unmasked rows; returns a scalar node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        gold: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || gold.len() != s[0] || mask.len() != s[0] {
            return Err(shape_err("softmax_cross_entropy", &s, &[gold.len()]));
        }
        let (n, k) = (s[0], s[1]);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract(
                "cross-entropy with every row masked".into(),
            ));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= k) {
            return Err(Error::Contract(format!(
                "gold class {bad} out of range for {k} classes"
            )));
        }
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = &self.value(logits).data()[i * k..(i + 1) * k];
            total += logsumexp(row) - row[gold[i]];
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                gold: gold.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// leaves the loss never touched carry no entry (gradient zero).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        // Ensures a gradient buffer exists for an input node.
        macro_rules! grad_of {
            ($id:expr) => {{
                let slot = &mut grads[$id.0];
                if slot.is_none() {
                    *slot = Some(Tensor::zeros(self.nodes[$id.0].value.shape()));
                }
                slot.as_mut().unwrap()
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA += dC @ B^T
                matmul_nt_acc(
                    gout.data(),
                    self.value(*b).data(),
                    grad_of!(a).data_mut(),
                    m,
                    n,
                    k,
                );
                // dB += A^T @ dC
                matmul_tn_acc(
                    self.value(*a).data(),
                    gout.data(),
                    grad_of!(b).data_mut(),
                    m,
                    k,
                    n,
                );
            }
            Op::MatmulNT { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                // C = A @ B^T: dA += dC @ B, dB += dC^T @ A
                matmul_acc(
                    gout.data(),
                    self.value(*b).data(),
                    grad_of!(a).data_mut(),
                    m,
                    n,
                    k,
                );
                matmul_tn_acc(
                    gout.data(),
                    self.value(*a).data(),
                    grad_of!(b).data_mut(),
                    m,
                    n,
                    k,
                );
            }
            Op::Bmm { a, b, transpose_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let batch = self.shape(NodeId(idx))[0];
                let m = self.shape(NodeId(idx))[1];
                let n = self.shape(NodeId(idx))[2];
                let k = if sa.len() == 3 { sa[2] } else { sa[1] };
                let (a_per, b_per) = (m * k, k * n);
                for t in 0..batch {
                    let a_dat = self.batch_slice(*a, t, a_per);
                    let b_dat = self.batch_slice(*b, t, b_per);
                    let go = &gout.data()[t * m * n..(t + 1) * m * n];
                    {
                        let ga = grad_of!(a);
                        let ga = if sa.len() == 3 {
                            &mut ga.data_mut()[t * a_per..(t + 1) * a_per]
                        } else {
                            &mut ga.data_mut()[..]
                        };
                        if *transpose_b {
                            matmul_acc(go, b_dat, ga, m, n, k);
                        } else {
                            matmul_nt_acc(go, b_dat, ga, m, n, k);
                        }
                    }
                    let gb = grad_of!(b);
                    let gb = if sb.len() == 3 {
                        &mut gb.data_mut()[t * b_per..(t + 1) * b_per]
                    } else {
                        &mut gb.data_mut()[..]
                    };
                    if *transpose_b {
                        // dB += dC^T @ A
                        matmul_tn_acc(go, a_dat, gb, m, n, k);
                    } else {
                        // dB += A^T @ dC
                        matmul_tn_acc(a_dat, go, gb, m, k, n);
                    }
                }
            }
            Op::Add { a, b } => {
                axpy(grad_of!(a), gout, 1.0);
                axpy(grad_of!(b), gout, 1.0);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (
                    self.value(*a).data().to_vec(),
                    self.value(*b).data().to_vec(),
                );
                for ((g, &go), &x) in grad_of!(a).data_mut().iter_mut().zip(gout.data()).zip(&bv) {
                    *g += go * x;
                }
                for ((g, &go), &x) in grad_of!(b).data_mut().iter_mut().zip(gout.data()).zip(&av) {
                    *g += go * x;
                }
            }
            Op::Scale { x, c } => axpy(grad_of!(x), gout, *c),
            Op::AddBias { x, bias } => {
                axpy(grad_of!(x), gout, 1.0);
                let d = self.shape(*bias)[0];
                let gb = grad_of!(bias);
                for row in gout.data().chunks_exact(d) {
                    for (g, &go) in gb.data_mut().iter_mut().zip(row) {
                        *g += go;
                    }
                }
            }
            Op::AddPairBias { a, bias } => {
                axpy(grad_of!(a), gout, 1.0);
                let s = self.shape(*a).to_vec();
                let (l, n) = (s[0], s[1]);
                let gb = grad_of!(bias);
                for r in 0..l {
                    for i in 0..n {
                        let sum: f64 = gout.data()[(r * n + i) * n..(r * n + i + 1) * n]
                            .iter()
                            .sum();
                        gb.data_mut()[i * l + r] += sum;
                    }
                }
            }
            Op::AddConst { x } => axpy(grad_of!(x), gout, 1.0),
            Op::MulMask { x, mask } => {
                for ((g, &go), &mv) in grad_of!(x)
                    .data_mut()
                    .iter_mut()
                    .zip(gout.data())
                    .zip(mask.data())
                {
                    *g += go * mv;
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data().to_vec();
                for ((g, &go), &x) in grad_of!(x).data_mut().iter_mut().zip(gout.data()).zip(&xv) {
                    if x > 0.0 {
                        *g += go;
                    }
                }
            }
            Op::Softmax { x } => {
                let k = *self.shape(*x).last().unwrap();
                let y = node.value.data();
                let gx = grad_of!(x);
                for (r, (y_row, go_row)) in y
                    .chunks_exact(k)
                    .zip(gout.data().chunks_exact(k))
                    .enumerate()
                {
                    let dot: f64 = y_row.iter().zip(go_row).map(|(a, b)| a * b).sum();
                    let g_row = &mut gx.data_mut()[r * k..(r + 1) * k];
                    for ((g, &yv), &go) in g_row.iter_mut().zip(y_row).zip(go_row) {
                        *g += yv * (go - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = self.shape(*x)[1];
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gain).data().to_vec();
                let inv_d = 1.0 / d as f64;
                for (r, (x_row, go_row)) in xv
                    .chunks_exact(d)
                    .zip(gout.data().chunks_exact(d))
                    .enumerate()
                {
                    let (mean, inv_std) = row_moments(x_row);
                    let xhat: Vec<f64> = x_row.iter().map(|&v| (v - mean) * inv_std).collect();
                    {
                        let gb = grad_of!(bias);
                        for (g, &go) in gb.data_mut().iter_mut().zip(go_row) {
                            *g += go;
                        }
                    }
                    {
                        let gg = grad_of!(gain);
                        for ((g, &go), &xh) in gg.data_mut().iter_mut().zip(go_row).zip(&xhat) {
                            *g += go * xh;
                        }
                    }
                    let dxhat: Vec<f64> = go_row.iter().zip(&gv).map(|(&go, &g)| go * g).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() * inv_d;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() * inv_d;
                    let gx = grad_of!(x);
                    let g_row = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for ((g, &dxh), &xh) in g_row.iter_mut().zip(&dxhat).zip(&xhat) {
                        *g += inv_std * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
            } => {
                let sx = self.shape(*x).to_vec();
                let (n, cin) = (sx[0], sx[1]);
                let cout = self.shape(*kernel)[2];
                let pad = (width - 1) / 2;
                let xv = self.value(*x).data().to_vec();
                let kv = self.value(*kernel).data().to_vec();
                {
                    let gb = grad_of!(bias);
                    for row in gout.data().chunks_exact(cout) {
                        for (g, &go) in gb.data_mut().iter_mut().zip(row) {
                            *g += go;
                        }
                    }
                }
                {
                    let gk = grad_of!(kernel);
                    for i in 0..n {
                        let go_row = &gout.data()[i * cout..(i + 1) * cout];
                        for t in 0..*width {
                            let s = i + t;
                            if s < pad || s - pad >= n {
                                continue;
                            }
                            let x_row = &xv[(s - pad) * cin..(s - pad + 1) * cin];
                            for (ci, &xval) in x_row.iter().enumerate() {
                                if xval == 0.0 {
                                    continue;
                                }
                                let k_row = &mut gk.data_mut()
                                    [(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                                for (g, &go) in k_row.iter_mut().zip(go_row) {
                                    *g += xval * go;
                                }
                            }
                        }
                    }
                }
                let gx = grad_of!(x);
                for i in 0..n {
                    let go_row = &gout.data()[i * cout..(i + 1) * cout];
                    for t in 0..*width {
                        let s = i + t;
                        if s < pad || s - pad >= n {
                            continue;
                        }
                        let gx_row = &mut gx.data_mut()[(s - pad) * cin..(s - pad + 1) * cin];
                        for (ci, g) in gx_row.iter_mut().enumerate() {
                            let k_row = &kv[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                            let mut acc = 0.0;
                            for (&go, &k) in go_row.iter().zip(k_row) {
                                acc += go * k;
                            }
                            *g += acc;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let n = self.shape(NodeId(idx))[0];
                let total = self.shape(NodeId(idx))[1];
                let mut col = 0;
                for &p in parts {
                    let d = self.shape(p)[1];
                    let gp = grad_of!(p);
                    for i in 0..n {
                        let src = &gout.data()[i * total + col..i * total + col + d];
                        for (g, &go) in gp.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                            *g += go;
                        }
                    }
                    col += d;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let count = self.value(p).numel();
                    let gp = grad_of!(p);
                    for (g, &go) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(&gout.data()[offset..offset + count])
                    {
                        *g += go;
                    }
                    offset += count;
                }
            }
            Op::SliceCols { x, start, len } => {
                let d = self.shape(*x)[1];
                let n = self.shape(*x)[0];
                let gx = grad_of!(x);
                for i in 0..n {
                    let src = &gout.data()[i * len..(i + 1) * len];
                    for (g, &go) in gx.data_mut()[i * d + start..i * d + start + len]
                        .iter_mut()
                        .zip(src)
                    {
                        *g += go;
                    }
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                let d = self.shape(*table)[1];
                let gt = grad_of!(table);
                for (i, &id) in ids.iter().enumerate() {
                    let src = &gout.data()[i * d..(i + 1) * d];
                    for (g, &go) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *g += go;
                    }
                }
            }
            Op::LogSumExpGather { x, idxs } => {
                let go = gout.item();
                let out = node.value.item();
                let xv = self.value(*x).data().to_vec();
                let gx = grad_of!(x);
                for &i in idxs {
                    gx.data_mut()[i] += go * (xv[i] - out).exp();
                }
            }
            Op::StackScalars { parts } => {
                for (&p, &go) in parts.iter().zip(gout.data()) {
                    grad_of!(p).data_mut()[0] += go;
                }
            }
            Op::Sum { x } => axpy_scalar(grad_of!(x), gout.item()),
            Op::SoftmaxCrossEntropy { logits, gold, mask } => {
                let k = self.shape(*logits)[1];
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let go = gout.item() / count;
                let lv = self.value(*logits).data().to_vec();
                let gl = grad_of!(logits);
                for (i, row) in lv.chunks_exact(k).enumerate() {
                    if !mask[i] {
                        continue;
                    }
                    let mut probs = row.to_vec();
                    softmax_row_in_place(&mut probs);
                    let g_row = &mut gl.data_mut()[i * k..(i + 1) * k];
                    for (j, (g, &p)) in g_row.iter_mut().zip(&probs).enumerate() {
                        let indicator = if j == gold[i] { 1.0 } else { 0.0 };
                        *g += go * (p - indicator);
                    }
                }
            }
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn axpy(dst: &mut Tensor, src: &Tensor, c: f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += c * s;
    }
}

fn axpy_scalar(dst: &mut Tensor, c: f64) {
    for d in dst.data_mut() {
        *d += c;
    }
}

fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean and 1/sqrt(var + eps) of one feature vector.
fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}
