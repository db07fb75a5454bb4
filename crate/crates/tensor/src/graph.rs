use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gemm::matmul;
use crate::{Result, Scalar, Tensor, TensorError};

/// Additive penalty applied to masked attention keys. Large enough that the
/// softmax weight underflows to exactly zero in both precisions.
const MASK_PENALTY: f64 = -1e4;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    AddBias,
    Scale,
    Embedding,
    LayerNorm,
    Gelu,
    Softmax,
    Dropout,
    CrossEntropy,
    Sum,
    Reshape,
    Permute,
    MaskKeys,
    SelectRows,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        w: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    MaskKeys {
        x: Var,
        keep: Vec<bool>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale { .. } => OpKind::Scale,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::MaskKeys { .. } => OpKind::MaskKeys,
            Op::SelectRows { .. } => OpKind::SelectRows,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, w } => vec![*a, *w],
            Op::BatchMatMul { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Softmax { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::MaskKeys { x, .. }
            | Op::SelectRows { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape: every op appends one node, and [`Graph::backward`] visits the
/// nodes in exact reverse order of recording.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
    fault: Option<OpKind>,
}

/// Gradients indexed by [`Var`]. Only leaves keep their gradient.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    /// `seed` drives the stochastic ops (dropout).
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            fault: None,
        }
    }

    /// Test hook: the backward rule of `kind` will return gradients scaled
    /// by 1.5. Used as a negative control for the gradient checker.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Parameter leaf (gradient tracked).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.kind() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(op: OpKind, lhs: &[usize], rhs: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    fn invalid(op: OpKind, msg: impl Into<String>) -> TensorError {
        TensorError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    /// `x [.., k] @ w [k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Self::mismatch(OpKind::MatMul, &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            m,
            k,
            n,
            false,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a: x, w })
    }

    /// Batched product `a [B, m, k] @ b [B, k, n] -> [B, m, n]`, or against
    /// `b [B, n, k]` transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Self::mismatch(OpKind::BatchMatMul, &as_, &bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if transpose_b {
            (bs[2], bs[1])
        } else {
            (bs[1], bs[2])
        };
        if bk != k {
            return Err(Self::mismatch(OpKind::BatchMatMul, &as_, &bs));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            matmul(
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(OpKind::Add, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Add { a, b })
    }

    /// Adds `bias [n]` along the last axis of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Self::mismatch(OpKind::AddBias, xs, bs));
        }
        let n = bs[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[i % n])
            .collect();
        let t = Tensor::new(xs.to_vec(), data)?;
        self.push(t, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| *v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Scale { x, factor })
    }

    /// Rows of `table [V, d]` gathered by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Self::invalid(OpKind::Embedding, "table must be rank 2"));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Self::invalid(
                OpKind::Embedding,
                format!("id {bad} out of range for table of {v} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Self::mismatch(OpKind::LayerNorm, &xs, self.shape(gamma)));
        }
        let eps = T::from_f64(eps);
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
                xhat,
                inv_std,
            },
        )
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| {
                let z = v.as_f64();
                T::from_f64(0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2)))
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Gelu { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Self::invalid(
                OpKind::Softmax,
                format!("axis {axis} out of range for shape {xs:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n)
                    .map(|j| src[at(j)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push(t, Op::Softmax { x, axis })
    }

    /// Inverted dropout. Identity (no node recorded) when `p == 0` or when
    /// `train` is false.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Self::invalid(OpKind::Dropout, format!("p={p} not in [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| *v * *m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Dropout { x, mask })
    }

    /// Mean token cross-entropy of `logits [N, V]` against `targets`.
    /// Rows whose target equals `ignore_index` do not contribute; if every
    /// row is ignored the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Self::mismatch(
                OpKind::CrossEntropy,
                &ls,
                &[targets.len()],
            ));
        }
        let (rows, v) = (ls[0], ls[1]);
        let mut parsed = Vec::with_capacity(rows);
        for &t in targets {
            if t == ignore_index {
                parsed.push(None);
            } else if t < 0 || t as usize >= v {
                return Err(Self::invalid(
                    OpKind::CrossEntropy,
                    format!("target {t} out of range for {v} classes"),
                ));
            } else {
                parsed.push(Some(t as usize));
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, target) in parsed.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|x| (*x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total = total + lse - row[t];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_f64(count as f64)
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: parsed,
                probs,
                count,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Self::mismatch(OpKind::Reshape, self.shape(x), shape));
        }
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        self.push(t, Op::Reshape { x })
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Self::invalid(
                OpKind::Permute,
                format!("{perm:?} is not a permutation of {} axes", xs.len()),
            ));
        }
        let map = permute_map(&xs, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let shape = perm.iter().map(|&p| xs[p]).collect();
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Additive key mask for attention scores `x [B, H, Lq, Lk]`: keys with
    /// `keep[b * Lk + k] == false` receive a large negative penalty.
    pub fn mask_keys(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || keep.len() != xs[0] * xs[3] {
            return Err(Self::mismatch(OpKind::MaskKeys, &xs, &[keep.len()]));
        }
        let (h, lq, lk) = (xs[1], xs[2], xs[3]);
        let penalty = T::from_f64(MASK_PENALTY);
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let b = i / (h * lq * lk);
                if keep[b * lk + i % lk] {
                    *v
                } else {
                    *v + penalty
                }
            })
            .collect();
        let t = Tensor::new(xs, data)?;
        self.push(
            t,
            Op::MaskKeys {
                x,
                keep: keep.to_vec(),
            },
        )
    }

    /// Treats `x` as `[N, d]` (last axis kept) and gathers `rows`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs.last().unwrap_or(&0);
        let n = if d == 0 { 0 } else { self.value(x).numel() / d };
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Self::invalid(
                OpKind::SelectRows,
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_from(loss, Tensor::full(shape, T::one()))
    }

    /// Reverse-mode sweep seeded with an arbitrary upstream gradient.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Self::mismatch(OpKind::Leaf, seed.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(data) => Tensor::new(node.value.shape().to_vec(), data)
                        .expect("gradient shape matches value"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<T>>], var: Var) -> Option<&'a mut [T]> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let n = self.nodes[var.0].value.numel();
        Some(grads[var.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let faulty = self.fault == Some(node.op.kind());
        // A faulty rule is emulated by scaling the upstream gradient it sees.
        let scaled;
        let g = if faulty {
            scaled = g.iter().map(|v| *v * T::from_f64(1.5)).collect::<Vec<_>>();
            &scaled[..]
        } else {
            g
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, w } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = self.value(*a).numel() / k.max(1);
                let wv = self.value(*w).data();
                let av = self.value(*a).data();
                if let Some(da) = self.accumulate(grads, *a) {
                    matmul(g, false, wv, true, da, m, n, k, true);
                }
                if let Some(dw) = self.accumulate(grads, *w) {
                    matmul(av, true, g, false, dw, k, m, n, true);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let as_ = self.shape(*a);
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = node.value.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.accumulate(grads, *a) {
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &bv[t * k * n..(t + 1) * k * n];
                        let das = &mut da[t * m * k..(t + 1) * m * k];
                        // C = A B -> dA = dC B^T ; C = A B^T -> dA = dC B
                        matmul(gs, false, bs, !*transpose_b, das, m, n, k, true);
                    }
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let dbs = &mut db[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            matmul(gs, true, as_, false, dbs, n, m, k, true);
                        } else {
                            matmul(as_, true, gs, false, dbs, k, m, n, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.accumulate(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.accumulate(grads, *bias) {
                    let n = db.len();
                    for (j, v) in g.iter().enumerate() {
                        db[j % n] = db[j % n] + *v;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d = *d + *v * *factor;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = self.accumulate(grads, *table) {
                    let d = self.shape(*table)[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                let rows = inv_std.len();
                if let Some(dg) = self.accumulate(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, *beta) {
                    for r in 0..rows {
                        add_into(db, &g[r * d..(r + 1) * d]);
                    }
                }
                if let Some(dx) = self.accumulate(grads, *x) {
                    let dn = T::from_f64(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            mean_dh = mean_dh + dxhat[j];
                            mean_dh_h = mean_dh_h + dxhat[j] * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let h = xhat[r * d + j];
                            dx[r * d + j] =
                                dx[r * d + j] + inv_std[r] * (dxhat[j] - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    let xv = self.value(*x).data();
                    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                    for ((d, v), up) in dx.iter_mut().zip(xv).zip(g) {
                        let z = v.as_f64();
                        let cdf = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
                        let pdf = inv_sqrt_2pi * (-0.5 * z * z).exp();
                        *d = *d + *up * T::from_f64(cdf + z * pdf);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                let k = at(j);
                                dx[k] = dx[k] + y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, m), v) in dx.iter_mut().zip(mask).zip(g) {
                        *d = *d + *v * *m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(dl) = self.accumulate(grads, *logits) {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / T::from_f64(*count as f64);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let k = r * v + j;
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[k] = dl[k] + (probs[k] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    let map = permute_map(self.shape(*x), perm);
                    for (o, &src) in map.iter().enumerate() {
                        dx[src] = dx[src] + g[o];
                    }
                }
            }
            Op::MaskKeys { x, .. } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    let d = node.value.shape()[1];
                    for (o, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * d..(r + 1) * d], &g[o * d..(o + 1) * d]);
                    }
                }
            }
        }
    }

    /// Tensor inputs of a recorded node, in op-argument order.
    pub fn inputs_of(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    /// Re-executes the op recorded at `var` on fresh leaf inputs (all
    /// requiring grad) in a new graph that shares this graph's fault setting.
    /// Returns the new graph, its input leaves, and the output.
    pub fn replay(&self, var: Var, inputs: Vec<Tensor<T>>) -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new(0);
        g.fault = self.fault;
        let leaves: Vec<Var> = inputs.into_iter().map(|t| g.param(t)).collect();
        let out = match &self.nodes[var.0].op {
            Op::Leaf => leaves[0],
            Op::MatMul { .. } => g.matmul(leaves[0], leaves[1])?,
            Op::BatchMatMul { transpose_b, .. } => g.bmm(leaves[0], leaves[1], *transpose_b)?,
            Op::Add { .. } => g.add(leaves[0], leaves[1])?,
            Op::AddBias { .. } => g.add_bias(leaves[0], leaves[1])?,
            Op::Scale { factor, .. } => g.scale(leaves[0], *factor)?,
            Op::Embedding { ids, .. } => g.embedding(leaves[0], ids)?,
            Op::LayerNorm { eps, .. } => {
                g.layer_norm(leaves[0], leaves[1], leaves[2], eps.as_f64())?
            }
            Op::Gelu { .. } => g.gelu(leaves[0])?,
            Op::Softmax { axis, .. } => g.softmax(leaves[0], *axis)?,
            Op::Dropout { mask, .. } => g.dropout_with_mask(leaves[0], mask.clone())?,
            Op::CrossEntropy { targets, .. } => {
                let t: Vec<i64> = targets
                    .iter()
                    .map(|t| t.map_or(-1, |v| v as i64))
                    .collect();
                g.cross_entropy(leaves[0], &t, -1)?
            }
            Op::Sum { .. } => g.sum(leaves[0])?,
            Op::Reshape { .. } => {
                let shape = self.shape(var).to_vec();
                g.reshape(leaves[0], &shape)?
            }
            Op::Permute { perm, .. } => g.permute(leaves[0], perm)?,
            Op::MaskKeys { keep, .. } => g.mask_keys(leaves[0], keep)?,
            Op::SelectRows { rows, .. } => g.select_rows(leaves[0], rows)?,
        };
        Ok((g, leaves, out))
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each output linear index of the permuted tensor, the source index.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}
