//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. Inputs always precede
//! outputs, so walking the tape backwards visits nodes in reverse topological
//! order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bucket that forward multiply-accumulates are charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Attention,
    Ffn,
    Router,
    Head,
    Other,
}

impl Category {
    const COUNT: usize = 5;

    fn slot(self) -> usize {
        match self {
            Category::Attention => 0,
            Category::Ffn => 1,
            Category::Router => 2,
            Category::Head => 3,
            Category::Other => 4,
        }
    }
}

/// Instrumented counter of forward multiply-accumulates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    macs: [u64; Category::COUNT],
    /// Token rows pushed through an expert FFN, per modality group tag.
    pub expert_rows: std::collections::BTreeMap<String, u64>,
}

impl OpCounter {
    pub fn macs(&self, cat: Category) -> u64 {
        self.macs[cat.slot()]
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum()
    }

    pub fn flops(&self, cat: Category) -> u64 {
        2 * self.macs(cat)
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }
}

/// Precomputed rotary cos/sin tables, `[max_pos, head_dim / 2]`.
#[derive(Debug)]
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(max_pos: usize, head_dim: usize, base: f64) -> Self {
        assert!(head_dim.is_multiple_of(2), "rotary head dim must be even");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for p in 0..max_pos {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(T::from_f64_lossy(theta.cos()));
                sin.push(T::from_f64_lossy(theta.sin()));
            }
        }
        RopeTable { half, cos, sin }
    }

    pub fn max_pos(&self) -> usize {
        self.cos.len().checked_div(self.half).unwrap_or(0)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherFlat {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        gate: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        heads: usize,
        table: Arc<RopeTable<T>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf; `None` when the leaf does not require grad or the
    /// loss does not depend on it through any recorded op.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Recording of a forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    validate: bool,
    category: Category,
    counter: OpCounter,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            validate: false,
            category: Category::Other,
            counter: OpCounter::default(),
        }
    }

    /// Reject non-finite op outputs instead of propagating them.
    pub fn set_validate(&mut self, on: bool) {
        self.validate = on;
    }

    /// Charge subsequent multiply-accumulates to `cat`; returns the previous
    /// category.
    pub fn set_category(&mut self, cat: Category) -> Category {
        std::mem::replace(&mut self.category, cat)
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut OpCounter {
        &mut self.counter
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn charge(&mut self, macs: u64) {
        self.counter.macs[self.category.slot()] += macs;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        if self.validate && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if self.validate && !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `a[.., p, q] x b[q, r] -> [.., p, r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Layout::N,
            self.value(b).data(),
            Layout::N,
            T::zero(),
            &mut out,
        );
        self.charge((m * k * n) as u64);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a], "silu")
    }

    /// Row-wise normalisation over the last axis with a learnable `[d]` scale.
    pub fn layer_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(scale) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let eps = T::from_f64_lossy(eps);
        let xv = self.value(x);
        let sv = self.value(scale).data();
        let rows = xv.rows();
        let dn = T::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            out.extend(row.iter().zip(sv).map(|(&v, &s)| (v - mean) * rs * s));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, scale, rstd }, &[x, scale], "layer_norm")
    }

    /// Row-wise softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.numel());
        for r in 0..av.rows() {
            softmax_row(av.row(r), &mut out);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(a), &[a], "softmax")
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("token id {bad} out of range for vocab {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    /// Mean next-token negative log-likelihood of `logits[N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!("target {bad} out of range for vocab {v}")));
        }
        let mut probs = Vec::with_capacity(n * v);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let start = probs.len();
            softmax_row(lv.row(r), &mut probs);
            total += -probs[start + t].max(T::min_positive_value()).ln();
        }
        let mean = total / T::from_usize(n.max(1)).unwrap();
        self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != labels.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = T::zero();
        for (&z, &y) in lv.data().iter().zip(labels) {
            total += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        let mean = total / T::from_usize(labels.len().max(1)).unwrap();
        self.push(
            Tensor::scalar(mean),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
            "bce_with_logits",
        )
    }

    /// Rows of `x[N, d]` at `idx`, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("gather_rows index {bad} >= {n}")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
            "gather_rows",
        )
    }

    /// Flat elements of `x` at `idx`, giving `[idx.len()]`.
    pub fn gather_flat(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.numel()) {
            return Err(Error::Contract(format!(
                "gather_flat index {bad} >= {}",
                xv.numel()
            )));
        }
        let out = idx.iter().map(|&i| xv.data()[i]).collect();
        let t = Tensor::new(vec![idx.len()], out)?;
        self.push(
            t,
            Op::GatherFlat {
                x,
                idx: idx.to_vec(),
            },
            &[x],
            "gather_flat",
        )
    }

    /// Copy of `base[N, d]` with `src[i]` added onto row `idx[i]`.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let bv = self.value(base);
        let sv = self.value(src);
        let d = bv.cols();
        if sv.cols() != d || sv.rows() != idx.len() {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: bv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= bv.rows()) {
            return Err(Error::Contract(format!(
                "scatter_add_rows index {bad} >= {}",
                bv.rows()
            )));
        }
        let mut out = bv.clone();
        {
            let od = out.data_mut();
            for (s, &row) in idx.iter().enumerate() {
                for (o, &v) in od[row * d..(row + 1) * d].iter_mut().zip(sv.row(s)) {
                    *o += v;
                }
            }
        }
        self.push(
            out,
            Op::ScatterAddRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            &[base, src],
            "scatter_add_rows",
        )
    }

    /// `x[N, d]` with row `i` multiplied by `gate[i]`.
    pub fn scale_rows(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gate);
        if gv.numel() != xv.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let d = xv.cols();
        let mut out = Vec::with_capacity(xv.numel());
        for (r, &g) in gv.data().iter().enumerate() {
            out.extend(xv.data()[r * d..(r + 1) * d].iter().map(|&v| v * g));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::ScaleRows { x, gate }, &[x, gate], "scale_rows")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let block = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::new(oshape, out)?;
        self.push(t, Op::Slice { x, axis, start }, &[x], "slice")
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        if start != self.shape(x)[axis] {
            return Err(Error::Contract(format!(
                "split sizes {sizes:?} do not cover axis {axis}"
            )));
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = T::from_usize(xv.numel().max(1)).unwrap();
        let s = xv.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Rotary position encoding of `x[N, heads * head_dim]`; row `r` sits
    /// at sequence position `positions[r]`.
    pub fn rope(
        &mut self,
        x: Var,
        positions: &[usize],
        heads: usize,
        table: &Arc<RopeTable<T>>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if xv.rows() != positions.len() || d != heads * 2 * table.half {
            return Err(Error::Shape {
                op: "rope",
                lhs: xv.shape().to_vec(),
                rhs: vec![positions.len(), heads, 2 * table.half],
            });
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= table.max_pos()) {
            return Err(Error::Contract(format!(
                "rope position {bad} beyond table of {}",
                table.max_pos()
            )));
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, d, positions, heads, table, false);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                heads,
                table: Arc::clone(table),
            },
            &[x],
            "rope",
        )
    }

    /// Multi-head causal attention over packed rows. Each `(start, len)`
    /// segment is one sequence in position order; a row attends to rows of
    /// its own segment at or before it.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("hidden {d} not divisible by {heads} heads")));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered != n || segments.iter().any(|&(s, l)| s + l > n) {
            return Err(Error::Contract(format!(
                "attention segments cover {covered} of {n} rows"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); n * d];
        let tri: usize = segments.iter().map(|&(_, l)| l * (l + 1) / 2).sum();
        let mut probs = Vec::with_capacity(tri * heads);
        let mut macs = 0u64;
        let mut scores = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qd[(start + i) * d + off..(start + i) * d + off + dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kd[(start + j) * d + off..(start + j) * d + off + dh];
                        let s: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        scores.push(s * scale);
                    }
                    let base = probs.len();
                    softmax_row(&scores, &mut probs);
                    let oi = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for j in 0..=i {
                        let p = probs[base + j];
                        let vj = &vd[(start + j) * d + off..(start + j) * d + off + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    macs += 2 * (i as u64 + 1) * dh as u64;
                }
            }
        }
        self.charge(macs);
        let t = Tensor::new(vec![n, d], out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
            "causal_attention",
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            g[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(up) = g[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(id, &up, &mut g);
            if let Op::Leaf = node.op {
                out[id] = Some(Tensor::new(node.value.shape().to_vec(), up)?);
            }
        }
        Ok(Grads { grads: out })
    }

    fn buf<'a>(&self, g: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(g[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, id: usize, up: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.numel() / k.max(1);
                if let Some(ga) = self.buf(g, *a) {
                    gemm(m, n, k, T::one(), up, Layout::N, bv.data(), Layout::T, T::one(), ga);
                }
                if let Some(gb) = self.buf(g, *b) {
                    gemm(k, m, n, T::one(), av.data(), Layout::T, up, Layout::N, T::one(), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.buf(g, v) {
                        gv.iter_mut().zip(up).for_each(|(x, &u)| *x += u);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.buf(g, *a) {
                    ga.iter_mut().zip(up).for_each(|(x, &u)| *x += u);
                }
                if let Some(gb) = self.buf(g, *b) {
                    gb.iter_mut().zip(up).for_each(|(x, &u)| *x -= u);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.buf(g, *a) {
                    for ((x, &u), &o) in ga.iter_mut().zip(up).zip(bv) {
                        *x += u * o;
                    }
                }
                if let Some(gb) = self.buf(g, *b) {
                    for ((x, &u), &o) in gb.iter_mut().zip(up).zip(av) {
                        *x += u * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.buf(g, *a) {
                    ga.iter_mut().zip(up).for_each(|(x, &u)| *x += u * *c);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.buf(g, *a) {
                    for ((x, &u), &s) in ga.iter_mut().zip(up).zip(y) {
                        *x += u * s * (T::one() - s);
                    }
                }
            }
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.buf(g, *a) {
                    for ((x, &u), &z) in ga.iter_mut().zip(up).zip(xv) {
                        let s = sigmoid(z);
                        *x += u * s * (T::one() + z * (T::one() - s));
                    }
                }
            }
            Op::LayerNorm { x, scale, rstd } => {
                let xv = self.value(*x);
                let sv = self.value(*scale).data();
                let d = xv.cols();
                let dn = T::from_usize(d).unwrap();
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                let mut gscale = self.nodes[scale.0]
                    .requires_grad
                    .then(|| vec![T::zero(); d]);
                let mut gx_all = self.nodes[x.0]
                    .requires_grad
                    .then(|| vec![T::zero(); xv.numel()]);
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = xv.row(r);
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let u = &up[r * d..(r + 1) * d];
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * rs;
                        dxhat[i] = u[i] * sv[i];
                    }
                    if let Some(gs) = gscale.as_mut() {
                        for i in 0..d {
                            gs[i] += u[i] * xhat[i];
                        }
                    }
                    if let Some(gx) = gx_all.as_mut() {
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for i in 0..d {
                            gx[r * d + i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
                if let (Some(src), Some(dst)) = (gscale, self.buf(g, *scale)) {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                if let (Some(src), Some(dst)) = (gx_all, self.buf(g, *x)) {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = y.cols();
                if let Some(ga) = self.buf(g, *a) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let u = &up[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(u).map(|(&p, &q)| p * q).sum();
                        for i in 0..d {
                            ga[r * d + i] += yr[i] * (u[i] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(gt) = self.buf(g, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        for (x, &u) in gt[i * d..(i + 1) * d].iter_mut().zip(&up[r * d..]) {
                            *x += u;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = up[0] / T::from_usize(targets.len().max(1)).unwrap();
                if let Some(gl) = self.buf(g, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (x, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *x += p * scale;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = self.value(*logits).data();
                let scale = up[0] / T::from_usize(labels.len().max(1)).unwrap();
                if let Some(gl) = self.buf(g, *logits) {
                    for ((x, &z), &y) in gl.iter_mut().zip(lv).zip(labels) {
                        *x += (sigmoid(z) - y) * scale;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let d = self.value(*x).cols();
                if let Some(gx) = self.buf(g, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, &u) in gx[i * d..(i + 1) * d].iter_mut().zip(&up[r * d..]) {
                            *a += u;
                        }
                    }
                }
            }
            Op::GatherFlat { x, idx } => {
                if let Some(gx) = self.buf(g, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[i] += up[r];
                    }
                }
            }
            Op::ScatterAddRows { base, src, idx } => {
                let d = self.value(*base).cols();
                if let Some(gb) = self.buf(g, *base) {
                    gb.iter_mut().zip(up).for_each(|(a, &u)| *a += u);
                }
                if let Some(gs) = self.buf(g, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, &u) in gs[r * d..(r + 1) * d].iter_mut().zip(&up[i * d..]) {
                            *a += u;
                        }
                    }
                }
            }
            Op::ScaleRows { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate).data();
                let d = xv.cols();
                if let Some(gx) = self.buf(g, *x) {
                    for (r, &s) in gv.iter().enumerate() {
                        for (a, &u) in gx[r * d..(r + 1) * d].iter_mut().zip(&up[r * d..]) {
                            *a += u * s;
                        }
                    }
                }
                if let Some(gg) = self.buf(g, *gate) {
                    for (r, a) in gg.iter_mut().enumerate() {
                        let dot: T = xv.row(r).iter().zip(&up[r * d..(r + 1) * d]).map(|(&p, &q)| p * q).sum();
                        *a += dot;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.value(p).shape()[*axis] * inner;
                    if let Some(gp) = self.buf(g, p) {
                        for o in 0..outer {
                            let src = &up[o * total + offset..o * total + offset + block];
                            gp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &u)| *a += u);
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.value(*x).shape().to_vec();
                let len = node.value.shape()[*axis];
                let (outer, inner) = outer_inner(&shape, *axis);
                if let Some(gx) = self.buf(g, *x) {
                    for o in 0..outer {
                        let base = o * shape[*axis] * inner + start * inner;
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&up[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(a, &u)| *a += u);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.buf(g, *x) {
                    gx.iter_mut().zip(up).for_each(|(a, &u)| *a += u);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.buf(g, *x) {
                    gx.iter_mut().for_each(|a| *a += up[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel().max(1)).unwrap();
                if let Some(gx) = self.buf(g, *x) {
                    gx.iter_mut().for_each(|a| *a += up[0] / n);
                }
            }
            Op::Rope {
                x,
                positions,
                heads,
                table,
            } => {
                let d = node.value.cols();
                if let Some(gx) = self.buf(g, *x) {
                    let mut back = up.to_vec();
                    rotate(&mut back, d, positions, *heads, table, true);
                    gx.iter_mut().zip(back).for_each(|(a, u)| *a += u);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, up, g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
        probs: &[T],
        up: &[T],
        g: &mut [Option<Vec<T>>],
    ) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut gq = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); n * d];
        let mut gv = vec![T::zero(); n * d];
        let mut dp = Vec::new();
        let mut pos = 0;
        for &(start, len) in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let p = &probs[pos..pos + i + 1];
                    pos += i + 1;
                    let ri = (start + i) * d + off;
                    let doi = &up[ri..ri + dh];
                    dp.clear();
                    for j in 0..=i {
                        let rj = (start + j) * d + off;
                        let vj = &vd[rj..rj + dh];
                        dp.push(doi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>());
                        for (a, &o) in gv[rj..rj + dh].iter_mut().zip(doi) {
                            *a += p[j] * o;
                        }
                    }
                    let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let rj = (start + j) * d + off;
                        for t in 0..dh {
                            gq[ri + t] += ds * kd[rj + t];
                            gk[rj + t] += ds * qd[ri + t];
                        }
                    }
                }
            }
        }
        for (var, src) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(dst) = self.buf(g, var) {
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut sum = T::zero();
    for &v in row {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e /= sum;
    }
}

fn rotate<T: Scalar>(
    data: &mut [T],
    d: usize,
    positions: &[usize],
    heads: usize,
    table: &RopeTable<T>,
    inverse: bool,
) {
    let half = table.half;
    let dh = 2 * half;
    for (r, &p) in positions.iter().enumerate() {
        let cos = &table.cos[p * half..(p + 1) * half];
        let sin = &table.sin[p * half..(p + 1) * half];
        for h in 0..heads {
            let base = r * d + h * dh;
            for i in 0..half {
                let (x0, x1) = (data[base + 2 * i], data[base + 2 * i + 1]);
                let s = if inverse { -sin[i] } else { sin[i] };
                data[base + 2 * i] = x0 * cos[i] - x1 * s;
                data[base + 2 * i + 1] = x0 * s + x1 * cos[i];
            }
        }
    }
}

/// Element-wise logistic function on raw values.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    sigmoid(x)
}
