use std::collections::{BTreeMap, HashMap};

use super::gemm::{gemm, Layout};
use super::{ensure_finite, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `out[r] = a[r] + b[r % period]`
    AddTiled {
        a: Var,
        b: Var,
        period: usize,
    },
    Scale(Var, f32),
    ScaleBy {
        a: Var,
        s: Var,
    },
    Exp(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        n_valid: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Overwrite {
        base: Var,
        rows: Var,
        positions: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f32>,
    },
    ColScale {
        x: Var,
        s: Var,
        col: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_seq: usize,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// f64 value of scalar reductions, kept so finite-difference checks see
    /// the loss without a final f32 rounding.
    exact: Option<f64>,
}

/// Single-use tape. Build the forward pass with the op methods, then call
/// [`backward`](Graph::backward) on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        ensure_finite(value.data(), name)?;
        Ok(self.push(value, op, requires_grad))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a named store entry; requires grad iff the entry is trainable.
    /// Repeated calls with the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store
            .entry(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let v = self.push(entry.tensor.clone(), Op::Leaf, entry.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes later `param(_, name)` calls return `v` instead of reading the store.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value, using the f64 accumulator when the node is a reduction.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or(n.value.data()[0] as f64)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    // ---- operators -----------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · bᵀ` with `b: n×k`; the shape convention for linear weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 {
            return Err(Error::shape(format!("matmul: rhs must be 2-D, got {:?}", bv.shape())));
        }
        let (bk, n, lb) = if trans_b {
            (bv.cols(), bv.rows(), Layout::transposed(bv.cols()))
        } else {
            (bv.rows(), bv.cols(), Layout::row_major(bv.cols()))
        };
        if k != bk {
            return Err(Error::shape(format!(
                "matmul: inner dimensions {k} and {bk} disagree"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            av.data(),
            Layout::row_major(k),
            bv.data(),
            lb,
            0.0,
            &mut out,
            Layout::row_major(n),
        );
        let rg = self.rg(&[a, b]);
        self.push_checked(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
            "matmul",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        let exact = match (self.nodes[a.0].exact, self.nodes[b.0].exact) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        let v = self.push_checked(Tensor::new(shape, data)?, Op::Add(a, b), rg, "add")?;
        self.nodes[v.0].exact = exact;
        Ok(v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push_checked(Tensor::new(shape, data)?, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push_checked(Tensor::new(shape, data)?, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.add_tiled(a, row, 1)
    }

    /// `out[r] = a[r] + b[r % period]`; `b` needs at least `period` rows of
    /// `a`'s width. Used for position embeddings over a packed batch.
    pub fn add_tiled(&mut self, a: Var, b: Var, period: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.cols();
        if bv.cols() != d || bv.numel() / d.max(1) < period || period == 0 {
            return Err(Error::shape(format!(
                "add_tiled: {:?} + {:?} with period {period}",
                av.shape(),
                bv.shape()
            )));
        }
        if av.rows() % period != 0 {
            return Err(Error::shape("add_tiled: rows not a multiple of period"));
        }
        let bd = bv.data();
        let mut out = av.data().to_vec();
        for (r, row) in out.chunks_exact_mut(d).enumerate() {
            let src = &bd[(r % period) * d..(r % period + 1) * d];
            for (o, s) in row.iter_mut().zip(src) {
                *o += s;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push_checked(
            Tensor::new(shape, out)?,
            Op::AddTiled { a, b, period },
            rg,
            "add_tiled",
        )
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let shape = av.shape().to_vec();
        let exact = self.nodes[a.0].exact.map(|x| x * c as f64);
        let rg = self.rg(&[a]);
        let v = self.push_checked(Tensor::new(shape, data)?, Op::Scale(a, c), rg, "scale")?;
        self.nodes[v.0].exact = exact;
        Ok(v)
    }

    /// Multiplies `a` by the single value held in scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by: multiplier must be a scalar"));
        }
        let c = self.value(s).data()[0];
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, s]);
        self.push_checked(Tensor::new(shape, data)?, Op::ScaleBy { a, s }, rg, "scale_by")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.exp()).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push_checked(Tensor::new(shape, data)?, Op::Exp(a), rg, "exp")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * sigmoid(x)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push_checked(Tensor::new(shape, data)?, Op::Silu(a), rg, "silu")
    }

    /// Row-wise layer normalization over the trailing axis.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(format!(
                "layernorm: gain/bias must have length {d}"
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        self.push_checked(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layernorm",
        )
    }

    /// Softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push_checked(Tensor::new(shape, out)?, Op::Softmax(x), rg, "softmax")
    }

    /// Mean token-level cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        let n_valid = targets.iter().filter(|t| t.is_some()).count();
        if n_valid == 0 {
            return Err(Error::UndefinedLoss("every position is ignored".into()));
        }
        let mut probs = vec![0.0f32; n * vocab];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::shape(format!("target {t} outside vocabulary {vocab}")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t] as f64;
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = ((v as f64 - lse).exp()) as f32;
            }
        }
        let loss = total / n_valid as f64;
        let rg = self.rg(&[logits]);
        let v = self.push_checked(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                n_valid,
            },
            rg,
            "cross_entropy",
        )?;
        self.nodes[v.0].exact = Some(loss);
        Ok(v)
    }

    /// Row lookup into a `V × d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape(format!("token id {id} outside table of {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        self.push_checked(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Copy of `base` with row `positions[j]` replaced by row `j` of `rows`.
    pub fn overwrite_rows(&mut self, base: Var, rows: Var, positions: &[usize]) -> Result<Var> {
        let (bv, rv) = (self.value(base), self.value(rows));
        let d = bv.cols();
        if rv.cols() != d || rv.rows() != positions.len() {
            return Err(Error::shape(format!(
                "overwrite_rows: {} positions for rows {:?} into {:?}",
                positions.len(),
                rv.shape(),
                bv.shape()
            )));
        }
        let mut out = bv.data().to_vec();
        for (j, &p) in positions.iter().enumerate() {
            if p >= bv.rows() {
                return Err(Error::shape(format!("overwrite_rows: position {p} out of range")));
            }
            out[p * d..(p + 1) * d].copy_from_slice(rv.row(j));
        }
        let shape = bv.shape().to_vec();
        let rg = self.rg(&[base, rows]);
        self.push_checked(
            Tensor::new(shape, out)?,
            Op::Overwrite {
                base,
                rows,
                positions: positions.to_vec(),
            },
            rg,
            "overwrite_rows",
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= xv.rows() {
                return Err(Error::shape(format!("gather_rows: row {i} out of range")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(&[x]);
        self.push_checked(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Scales every row to unit L2 norm. A zero row is a degenerate input.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_exact_mut(d).enumerate() {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32;
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push_checked(
            Tensor::new(shape, out)?,
            Op::NormalizeRows { x, norms },
            rg,
            "normalize_rows",
        )
    }

    /// `out[i, :] = x[i, :] · s[i, col]`.
    pub fn col_scale(&mut self, x: Var, s: Var, col: usize) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.rows() != xv.rows() || col >= sv.cols() {
            return Err(Error::shape(format!(
                "col_scale: weights {:?} for rows {:?}",
                sv.shape(),
                xv.shape()
            )));
        }
        let d = xv.cols();
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_exact_mut(d).enumerate() {
            let w = sv.at(r, col);
            row.iter_mut().for_each(|v| *v *= w);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, s]);
        self.push_checked(
            Tensor::new(shape, out)?,
            Op::ColScale { x, s, col },
            rg,
            "col_scale",
        )
    }

    /// Multi-head causal self-attention over `n_seq` packed sequences of
    /// `seq_len` rows each. `q`, `k`, `v` are `(n_seq·seq_len) × d` with the
    /// heads laid out as contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_seq: usize,
        seq_len: usize,
        n_heads: usize,
    ) -> Result<Var> {
        let d = self.value(q).cols();
        for x in [q, k, v] {
            let t = self.value(x);
            if t.cols() != d || t.rows() != n_seq * seq_len {
                return Err(Error::shape(format!(
                    "attention: operand {:?} for {n_seq}×{seq_len} rows of width {d}",
                    t.shape()
                )));
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape(format!("width {d} not divisible by {n_heads} heads")));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let tt = seq_len * seq_len;
        let mut probs = vec![0.0f32; n_seq * n_heads * tt];
        let mut out = vec![0.0f32; n_seq * seq_len * d];
        for s in 0..n_seq {
            for h in 0..n_heads {
                let off = s * seq_len * d + h * dh;
                let p = &mut probs[(s * n_heads + h) * tt..(s * n_heads + h + 1) * tt];
                gemm(
                    seq_len,
                    dh,
                    seq_len,
                    scale,
                    qd,
                    Layout::row_major(d).at(off),
                    kd,
                    Layout::transposed(d).at(off),
                    0.0,
                    p,
                    Layout::row_major(seq_len),
                );
                for (i, row) in p.chunks_exact_mut(seq_len).enumerate() {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm(
                    seq_len,
                    seq_len,
                    dh,
                    1.0,
                    p,
                    Layout::row_major(seq_len),
                    vd,
                    Layout::row_major(d).at(off),
                    0.0,
                    &mut out,
                    Layout::row_major(d).at(off),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push_checked(
            Tensor::new(vec![n_seq * seq_len, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                n_seq,
                seq_len,
                n_heads,
                probs,
            },
            rg,
            "attention",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[a]);
        let v = self.push_checked(Tensor::scalar(s as f32), Op::Sum(a), rg, "sum")?;
        self.nodes[v.0].exact = Some(s);
        Ok(v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let rg = self.rg(&[a]);
        let v = self.push_checked(Tensor::scalar(s as f32), Op::Mean(a), rg, "mean")?;
        self.nodes[v.0].exact = Some(s);
        Ok(v)
    }

    // ---- reverse pass --------------------------------------------------

    /// Reverse-mode sweep from scalar `root`. Gradients are kept only for leaves.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let mut leaf = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true) = (&node.op, node.requires_grad) {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                ensure_finite(&g, "backward")?;
                leaf.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        let names = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        Ok(Gradients { leaf, names })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if needs(*a) {
                    // dA = dC · op(b)ᵀ
                    let lb = if *trans_b {
                        Layout::row_major(k)
                    } else {
                        Layout::transposed(n)
                    };
                    let acc = grad_slot(grads, *a, m * k);
                    gemm(m, n, k, 1.0, g, Layout::row_major(n), bv.data(), lb, 1.0, acc, Layout::row_major(k));
                }
                if needs(*b) {
                    let acc = grad_slot(grads, *b, k * n);
                    if *trans_b {
                        // dB (n×k) = dCᵀ · a
                        gemm(n, m, k, 1.0, g, Layout::transposed(n), av.data(), Layout::row_major(k), 1.0, acc, Layout::row_major(k));
                    } else {
                        // dB (k×n) = aᵀ · dC
                        gemm(k, m, n, 1.0, av.data(), Layout::transposed(k), g, Layout::row_major(n), 1.0, acc, Layout::row_major(n));
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if needs(x) {
                        axpy(grad_slot(grads, x, g.len()), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    axpy(grad_slot(grads, *a, g.len()), g, 1.0);
                }
                if needs(*b) {
                    axpy(grad_slot(grads, *b, g.len()), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let acc = grad_slot(grads, *a, g.len());
                    for ((o, gi), bi) in acc.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if needs(*b) {
                    let acc = grad_slot(grads, *b, g.len());
                    for ((o, gi), ai) in acc.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddTiled { a, b, period } => {
                if needs(*a) {
                    axpy(grad_slot(grads, *a, g.len()), g, 1.0);
                }
                if needs(*b) {
                    let d = node.value.cols();
                    let acc = grad_slot(grads, *b, self.value(*b).numel());
                    for (r, row) in g.chunks_exact(d).enumerate() {
                        let dst = &mut acc[(r % period) * d..(r % period + 1) * d];
                        axpy(dst, row, 1.0);
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    axpy(grad_slot(grads, *a, g.len()), g, *c);
                }
            }
            Op::ScaleBy { a, s } => {
                let c = self.value(*s).data()[0];
                if needs(*a) {
                    axpy(grad_slot(grads, *a, g.len()), g, c);
                }
                if needs(*s) {
                    let dot: f64 = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| *x as f64 * *y as f64)
                        .sum();
                    grad_slot(grads, *s, 1)[0] += dot as f32;
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let acc = grad_slot(grads, *a, g.len());
                    for ((o, gi), y) in acc.iter_mut().zip(g).zip(node.value.data()) {
                        *o += gi * y;
                    }
                }
            }
            Op::Silu(a) => {
                if needs(*a) {
                    let ad = self.value(*a).data();
                    let acc = grad_slot(grads, *a, g.len());
                    for ((o, gi), &x) in acc.iter_mut().zip(g).zip(ad) {
                        let s = sigmoid(x);
                        *o += gi * (s + x * s * (1.0 - s));
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
                let d = node.value.cols();
                let gd = self.value(*gain).data();
                if needs(*gain) {
                    let acc = grad_slot(grads, *gain, d);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            acc[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if needs(*bias) {
                    let acc = grad_slot(grads, *bias, d);
                    for grow in g.chunks_exact(d) {
                        axpy(acc, grow, 1.0);
                    }
                }
                if needs(*x) {
                    let acc = grad_slot(grads, *x, g.len());
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..d {
                            let dh = (grow[j] * gd[j]) as f64;
                            m1 += dh;
                            m2 += dh * hrow[j] as f64;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let rs = rstd[r] as f64;
                        let dst = &mut acc[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = (grow[j] * gd[j]) as f64;
                            dst[j] += (rs * (dh - m1 - hrow[j] as f64 * m2)) as f32;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let d = node.value.cols();
                    let acc = grad_slot(grads, *x, g.len());
                    for ((grow, yrow), dst) in g
                        .chunks_exact(d)
                        .zip(node.value.data().chunks_exact(d))
                        .zip(acc.chunks_exact_mut(d))
                    {
                        let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                n_valid,
            } => {
                if needs(*logits) {
                    let vocab = self.value(*logits).cols();
                    let c = g[0] / *n_valid as f32;
                    let acc = grad_slot(grads, *logits, probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let dst = &mut acc[r * vocab..(r + 1) * vocab];
                        axpy(dst, &probs[r * vocab..(r + 1) * vocab], c);
                        dst[t] -= c;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = node.value.cols();
                    let acc = grad_slot(grads, *table, self.value(*table).numel());
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        axpy(&mut acc[id * d..(id + 1) * d], row, 1.0);
                    }
                }
            }
            Op::Overwrite {
                base,
                rows,
                positions,
            } => {
                let d = node.value.cols();
                if needs(*base) {
                    let mut gb = g.to_vec();
                    for &p in positions {
                        gb[p * d..(p + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    }
                    axpy(grad_slot(grads, *base, g.len()), &gb, 1.0);
                }
                if needs(*rows) {
                    let acc = grad_slot(grads, *rows, positions.len() * d);
                    for (j, &p) in positions.iter().enumerate() {
                        axpy(&mut acc[j * d..(j + 1) * d], &g[p * d..(p + 1) * d], 1.0);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(*x) {
                    let d = node.value.cols();
                    let acc = grad_slot(grads, *x, self.value(*x).numel());
                    for (row, &i) in g.chunks_exact(d).zip(idx) {
                        axpy(&mut acc[i * d..(i + 1) * d], row, 1.0);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if needs(*x) {
                    let d = node.value.cols();
                    let acc = grad_slot(grads, *x, g.len());
                    for (r, (grow, yrow)) in g
                        .chunks_exact(d)
                        .zip(node.value.data().chunks_exact(d))
                        .enumerate()
                    {
                        let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        let dst = &mut acc[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::ColScale { x, s, col } => {
                let d = node.value.cols();
                let sv = self.value(*s);
                if needs(*x) {
                    let acc = grad_slot(grads, *x, g.len());
                    for (r, (grow, dst)) in g.chunks_exact(d).zip(acc.chunks_exact_mut(d)).enumerate() {
                        axpy(dst, grow, sv.at(r, *col));
                    }
                }
                if needs(*s) {
                    let k = sv.cols();
                    let xd = self.value(*x).data();
                    let acc = grad_slot(grads, *s, sv.numel());
                    for (r, (grow, xrow)) in g.chunks_exact(d).zip(xd.chunks_exact(d)).enumerate() {
                        let dot: f32 = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        acc[r * k + col] += dot;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_seq,
                seq_len,
                n_heads,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, *n_seq, *seq_len, *n_heads, probs, grads);
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = self.value(*a).numel();
                    grad_slot(grads, *a, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = self.value(*a).numel();
                    let c = g[0] / n as f32;
                    grad_slot(grads, *a, n).iter_mut().for_each(|o| *o += c);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f32],
        q: Var,
        k: Var,
        v: Var,
        n_seq: usize,
        seq_len: usize,
        n_heads: usize,
        probs: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let d = self.value(q).cols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let tt = seq_len * seq_len;
        let numel = n_seq * seq_len * d;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (need_q, need_k, need_v) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let mut dq = if need_q { vec![0.0; numel] } else { Vec::new() };
        let mut dk = if need_k { vec![0.0; numel] } else { Vec::new() };
        let mut dv = if need_v { vec![0.0; numel] } else { Vec::new() };
        let mut dp = vec![0.0f32; tt];
        for s in 0..n_seq {
            for h in 0..n_heads {
                let off = s * seq_len * d + h * dh;
                let lay = Layout::row_major(d).at(off);
                let p = &probs[(s * n_heads + h) * tt..(s * n_heads + h + 1) * tt];
                if need_v {
                    gemm(seq_len, seq_len, dh, 1.0, p, Layout::transposed(seq_len), g, lay, 1.0, &mut dv, lay);
                }
                if !(need_q || need_k) {
                    continue;
                }
                gemm(seq_len, dh, seq_len, 1.0, g, lay, vd, Layout::transposed(d).at(off), 0.0, &mut dp, Layout::row_major(seq_len));
                for (i, (drow, prow)) in dp.chunks_exact_mut(seq_len).zip(p.chunks_exact(seq_len)).enumerate() {
                    let dot: f32 = drow[..=i].iter().zip(&prow[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                    drow[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                if need_q {
                    gemm(seq_len, seq_len, dh, scale, &dp, Layout::row_major(seq_len), kd, lay, 1.0, &mut dq, lay);
                }
                if need_k {
                    gemm(seq_len, seq_len, dh, scale, &dp, Layout::transposed(seq_len), qd, lay, 1.0, &mut dk, lay);
                }
            }
        }
        for (var, buf, need) in [(q, dq, need_q), (k, dk, need_k), (v, dv, need_v)] {
            if need {
                axpy(grad_slot(grads, var, numel), &buf, 1.0);
            }
        }
    }
}

/// Leaf gradients from one reverse sweep.
pub struct Gradients {
    leaf: BTreeMap<Var, Tensor>,
    names: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaf.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|v| self.leaf.get(v))
    }

    /// Gradients of every trainable named parameter that appeared in the graph.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .filter_map(|(k, v)| self.leaf.get(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}

/// Cosine similarity of two vectors; a zero-norm operand is degenerate.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0) as f32)
}

fn grad_slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f32], src: &[f32], c: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}
