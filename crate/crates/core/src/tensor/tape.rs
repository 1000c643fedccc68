use super::gemm::{gemm, gemm_into, MatRef};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ScaleBy { a: Var, s: Var },
    /// `sig` caches the forward sigmoid when a gradient is needed.
    Silu { a: Var, sig: Vec<f64> },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    RmsNorm { a: Var, gain: Var, rows: usize, n: usize, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize>, d: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64>, v: usize, denom: f64 },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64>, batch: usize, seq: usize, heads: usize },
    GatherRows { src: Var, idx: Vec<usize>, d: usize },
    ConcatRows { a: Var, b: Var },
    GalScale { alpha: Var, p: Var, beta: Var, rank: f64 },
    TopKGates { scores: Var, sel: Vec<bool>, n: usize, norm: Vec<f64> },
    MulColumn { x: Var, g: Var, col: usize, d: usize, n: usize },
    WeightedSum { a: Var, w: Vec<f64> },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!("constant shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulates the gradient of `v` into `t` (no-op for frozen tensors).
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    /// `a[m×k] · b[k×n]`; leading extents of `a` are flattened into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · bᵀ` with `b` stored as `[n×k]` (the usual linear-layer layout).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::dim(format!("matmul needs matrix operands, got {sa:?} and {sb:?}")));
        }
        let k = last_dim(&sa);
        let m = numel(&sa) / k;
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim(format!("matmul inner extents {k} vs {kb} ({sa:?} · {sb:?})")));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = MatRef::rm(self.value(a), m, k);
            let bv = if trans_b {
                MatRef::rm_t(self.value(b), k, n)
            } else {
                MatRef::rm(self.value(b), k, n)
            };
            gemm(av, bv, &mut out, 0.0);
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::MatMul { a, b, trans_b, m, k, n }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }))
    }

    /// Adds a vector `bias[n]` to every row of `a[…×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.shape(bias) != [n] {
            return Err(Error::dim(format!("bias {:?} for rows of width {n}", self.shape(bias))));
        }
        let bv = self.value(bias).to_vec();
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale { a, c })
    }

    /// Multiplies by a differentiable scalar.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(format!("scale_by needs a scalar, got {:?}", self.shape(s))));
        }
        let c = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::ScaleBy { a, s }))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let rg = self.rg(a);
        let sig: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let out = self.value(a).iter().zip(&sig).map(|(x, s)| x * s).collect();
        let sig = if rg { sig } else { Vec::new() };
        self.push(self.shape(a).to_vec(), out, rg, Op::Silu { a, sig })
    }

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(Error::input(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = Self::axis_split(self.shape(a), axis)?;
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Softmax { a, outer, len, inner }))
    }

    /// RMS normalisation over `axis` (must be the last axis) with gain `gain[n]`.
    pub fn rmsnorm(&mut self, a: Var, gain: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || axis != shape.len() - 1 {
            return Err(Error::input(format!("rmsnorm supports only the last axis, got {axis} for {shape:?}")));
        }
        if eps <= 0.0 {
            return Err(Error::input("rmsnorm eps must be positive"));
        }
        let n = shape[axis];
        if self.shape(gain) != [n] {
            return Err(Error::dim(format!("rmsnorm gain {:?} vs width {n}", self.shape(gain))));
        }
        let rows = numel(&shape) / n;
        let x = self.value(a);
        let g = self.value(gain);
        let mut out = vec![0.0; x.len()];
        let mut inv_rms = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let ir = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = ir;
            for j in 0..n {
                out[r * n + j] = row[j] * ir * g[j];
            }
        }
        let rg = self.rg(a) || self.rg(gain);
        Ok(self.push(shape, out, rg, Op::RmsNorm { a, gain, rows, n, inv_rms }))
    }

    /// Rows of `table[V×d]` selected by `ids`, giving `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim(format!("embedding table must be 2-D, got {ts:?}")));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::input(format!("token id {bad} out of range for vocabulary {v}")));
        }
        if ids.is_empty() {
            return Err(Error::input("embedding lookup of zero ids"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Embedding { table, ids: ids.to_vec(), d }))
    }

    /// Mean token negative log-likelihood over rows with `mask == 1`.
    ///
    /// `logits` is `[…×V]`; `targets` and `mask` have one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
        let v = last_dim(self.shape(logits));
        let rows = self.value(logits).len() / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {rows} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let denom: f64 = mask.iter().sum();
        if denom <= 0.0 {
            return Err(Error::usage("cross_entropy mask selects no positions"));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::input(format!("target id {} out of range for {v} classes", targets[r])));
            }
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|y| (y - mx).exp()).sum();
            let lz = mx + z.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lz).exp();
            }
            total += mask[r] * (lz - row[targets[r]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![total / denom],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: mask.to_vec(),
                probs,
                v,
                denom,
            },
        ))
    }

    /// Causal multi-head self-attention over `[batch·seq × d]` projections.
    ///
    /// Query `i` attends to keys `j ≤ i` with `key_mask[b·seq + j] == 1`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[u8],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let d = last_dim(&shape);
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim("attention q/k/v shapes differ"));
        }
        if numel(&shape) != batch * seq * d || key_mask.len() != batch * seq {
            return Err(Error::dim(format!("attention layout {batch}×{seq}×{d} vs {shape:?}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("{d} not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            let base = b * seq * d;
            for h in 0..heads {
                let off = base + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let qm = MatRef { data: &qv[off..], rows: seq, cols: dh, rs: d, cs: 1 };
                let km_t = MatRef { data: &kv[off..], rows: dh, cols: seq, rs: 1, cs: d };
                gemm(qm, km_t, p, 0.0);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        if j <= i && key_mask[b * seq + j] != 0 {
                            *s *= scale;
                            mx = mx.max(*s);
                        }
                    }
                    let mut z = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        if j <= i && key_mask[b * seq + j] != 0 {
                            *s = (*s - mx).exp();
                            z += *s;
                        } else {
                            *s = 0.0;
                        }
                    }
                    if z > 0.0 {
                        row.iter_mut().for_each(|s| *s /= z);
                    }
                }
                let pm = MatRef::rm(p, seq, seq);
                let vm = MatRef { data: &vv[off..], rows: seq, cols: dh, rs: d, cs: 1 };
                gemm_into(pm, vm, &mut out[off..], d, 1, 0.0);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(shape, out, rg, Op::Attention { q, k, v, probs, batch, seq, heads }))
    }

    /// Selects rows of `src[R×d]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let d = last_dim(self.shape(src));
        let rows = self.value(src).len() / d;
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::input(format!("row {bad} out of range for {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::input("gather of zero rows"));
        }
        let sv = self.value(src);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&sv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(src);
        Ok(self.push(vec![idx.len(), d], out, rg, Op::GatherRows { src, idx: idx.to_vec(), d }))
    }

    /// Stacks the rows of `a[Ra×d]` over those of `b[Rb×d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = last_dim(self.shape(a));
        if last_dim(self.shape(b)) != d {
            return Err(Error::dim("concat_rows width mismatch"));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let rows = out.len() / d;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![rows, d], out, rg, Op::ConcatRows { a, b }))
    }

    /// The adapter scale `alpha / rank^p + beta` from three scalar leaves.
    pub fn gal_scale(&mut self, alpha: Var, p: Var, beta: Var, rank: usize) -> Result<Var> {
        for s in [alpha, p, beta] {
            if self.value(s).len() != 1 {
                return Err(Error::dim("gal_scale operands must be scalars"));
            }
        }
        let r = rank as f64;
        let val = self.scalar(alpha) * r.powf(-self.scalar(p)) + self.scalar(beta);
        let rg = self.rg(alpha) || self.rg(p) || self.rg(beta);
        Ok(self.push(vec![], vec![val], rg, Op::GalScale { alpha, p, beta, rank: r }))
    }

    /// Routing gates: `scores[M×N]` restricted to `selected` and renormalised
    /// per row, zero elsewhere.
    pub fn topk_gates(&mut self, scores: Var, selected: &[bool]) -> Result<Var> {
        let n = last_dim(self.shape(scores));
        let sv = self.value(scores);
        if selected.len() != sv.len() {
            return Err(Error::dim("topk_gates selection mask size"));
        }
        let rows = sv.len() / n;
        let mut out = vec![0.0; sv.len()];
        let mut norm = vec![0.0; rows];
        for r in 0..rows {
            let z: f64 = (0..n).filter(|&j| selected[r * n + j]).map(|j| sv[r * n + j]).sum();
            norm[r] = z;
            if z > 0.0 {
                for j in 0..n {
                    if selected[r * n + j] {
                        out[r * n + j] = sv[r * n + j] / z;
                    }
                }
            }
        }
        let rg = self.rg(scores);
        Ok(self.push(
            self.shape(scores).to_vec(),
            out,
            rg,
            Op::TopKGates { scores, sel: selected.to_vec(), n, norm },
        ))
    }

    /// Scales row `m` of `x[M×d]` by `g[m, col]` where `g` is `[M×N]`.
    pub fn mul_column(&mut self, x: Var, g: Var, col: usize) -> Result<Var> {
        let d = last_dim(self.shape(x));
        let n = last_dim(self.shape(g));
        let rows = self.value(x).len() / d;
        if self.value(g).len() / n != rows || col >= n {
            return Err(Error::dim("mul_column row count or column index"));
        }
        let (xv, gv) = (self.value(x), self.value(g));
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let c = gv[r * n + col];
            for j in 0..d {
                out[r * d + j] = xv[r * d + j] * c;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::MulColumn { x, g, col, d, n }))
    }

    /// `Σ a ⊙ w` for a constant weight buffer.
    pub fn weighted_sum(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(a).len() {
            return Err(Error::dim("weighted_sum weight length"));
        }
        let s = self.value(a).iter().zip(w).map(|(x, y)| x * y).sum();
        let rg = self.rg(a);
        Ok(self.push(vec![], vec![s], rg, Op::WeightedSum { a, w: w.to_vec() }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], rg, Op::Sum { a })
    }

    fn take_grad(&mut self, v: Var) -> Vec<f64> {
        let n = &mut self.nodes[v.0];
        n.grad.take().unwrap_or_else(|| vec![0.0; n.value.len()])
    }

    fn put_grad(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tape)) {
        if !self.rg(v) {
            return;
        }
        let mut g = self.take_grad(v);
        f(&mut g, self);
        self.put_grad(v, g);
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape: a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::usage("tape already consumed by a previous backward"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(Var(i), &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        for n in self.nodes[..=loss.0].iter_mut() {
            if n.requires_grad && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(())
    }

    fn backprop(&mut self, out: Var, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b, m, k, n } => {
                self.acc(a, |ga, t| {
                    let dc = MatRef::rm(g, m, n);
                    // C = A·B → dA = dC·Bᵀ ; C = A·Bᵀ → dA = dC·B
                    let bv = if trans_b {
                        MatRef::rm(t.value(b), n, k)
                    } else {
                        MatRef::rm_t(t.value(b), n, k)
                    };
                    gemm(dc, bv, ga, 1.0);
                });
                self.acc(b, |gb, t| {
                    let at = MatRef::rm_t(t.value(a), k, m);
                    if trans_b {
                        // dB[n×k] = dCᵀ·A
                        gemm(MatRef::rm_t(g, n, m), MatRef::rm(t.value(a), m, k), gb, 1.0);
                    } else {
                        // dB[k×n] = Aᵀ·dC
                        gemm(at, MatRef::rm(g, m, n), gb, 1.0);
                    }
                });
            }
            &Op::Add { a, b } => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::AddBias { a, bias } => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(bias, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Mul { a, b } => {
                self.acc(a, |ga, t| {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(t.value(b)) {
                        *x += gy * bv;
                    }
                });
                self.acc(b, |gb, t| {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(t.value(a)) {
                        *x += gy * av;
                    }
                });
            }
            &Op::Scale { a, c } => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            &Op::ScaleBy { a, s } => {
                self.acc(a, |ga, t| {
                    let c = t.value(s)[0];
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                });
                self.acc(s, |gs, t| {
                    gs[0] += g.iter().zip(t.value(a)).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Silu { a, sig } => {
                self.acc(*a, |ga, t| {
                    for (((x, gy), &xv), &s) in ga.iter_mut().zip(g).zip(t.value(*a)).zip(sig) {
                        *x += gy * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            &Op::Softmax { a, outer, len, inner } => {
                self.acc(a, |ga, t| {
                    let y = t.value(out);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::RmsNorm { a, gain, rows, n, inv_rms } => {
                let (a, gain, rows, n) = (*a, *gain, *rows, *n);
                self.acc(a, |ga, t| {
                    let x = t.value(a);
                    let gv = t.value(gain);
                    for r in 0..rows {
                        let ir = inv_rms[r];
                        let row = &x[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = (0..n).map(|j| gr[j] * gv[j] * row[j]).sum();
                        let c = ir * ir * ir * dot / n as f64;
                        for j in 0..n {
                            ga[r * n + j] += ir * gv[j] * gr[j] - c * row[j];
                        }
                    }
                });
                self.acc(gain, |gg, t| {
                    let x = t.value(a);
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * x[r * n + j] * inv_rms[r];
                        }
                    }
                });
            }
            Op::Embedding { table, ids, d } => {
                let d = *d;
                self.acc(*table, |gt, _| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs, v, denom } => {
                let v = *v;
                let scale = g[0] / denom;
                self.acc(*logits, |gl, _| {
                    for (r, (&w, &tgt)) in weights.iter().zip(targets).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            gl[r * v + j] += scale * w * probs[r * v + j];
                        }
                        gl[r * v + tgt] -= scale * w;
                    }
                });
            }
            Op::Attention { q, k, v, probs, batch, seq, heads } => {
                self.attention_backward(*q, *k, *v, probs, *batch, *seq, *heads, g);
            }
            Op::GatherRows { src, idx, d } => {
                let d = *d;
                self.acc(*src, |gs, _| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gs[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            &Op::ConcatRows { a, b } => {
                let split = self.value(a).len();
                self.acc(a, |ga, _| ga.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y));
                self.acc(b, |gb, _| gb.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y));
            }
            &Op::GalScale { alpha, p, beta, rank } => {
                let (av, pv) = (self.scalar(alpha), self.scalar(p));
                let rp = rank.powf(-pv);
                self.acc(alpha, |x, _| x[0] += g[0] * rp);
                self.acc(p, |x, _| x[0] += g[0] * (-av * rank.ln() * rp));
                self.acc(beta, |x, _| x[0] += g[0]);
            }
            Op::TopKGates { scores, sel, n, norm } => {
                let n = *n;
                self.acc(*scores, |gs, t| {
                    let y = t.value(out);
                    for (r, &z) in norm.iter().enumerate() {
                        if z <= 0.0 {
                            continue;
                        }
                        let dot: f64 = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum();
                        for j in 0..n {
                            if sel[r * n + j] {
                                gs[r * n + j] += (g[r * n + j] - dot) / z;
                            }
                        }
                    }
                });
            }
            &Op::MulColumn { x, g: gate, col, d, n } => {
                self.acc(x, |gx, t| {
                    let gv = t.value(gate);
                    for (r, row) in gx.chunks_mut(d).enumerate() {
                        let c = gv[r * n + col];
                        row.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += c * b);
                    }
                });
                self.acc(gate, |gg, t| {
                    let xv = t.value(x);
                    for r in 0..gg.len() / n {
                        gg[r * n + col] += (0..d).map(|j| g[r * d + j] * xv[r * d + j]).sum::<f64>();
                    }
                });
            }
            Op::WeightedSum { a, w } => {
                self.acc(*a, |ga, _| ga.iter_mut().zip(w).for_each(|(x, y)| *x += g[0] * y));
            }
            &Op::Sum { a } => {
                self.acc(a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[f64],
        batch: usize,
        seq: usize,
        heads: usize,
        g: &[f64],
    ) {
        let d = last_dim(self.shape(q));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // dS for every (b, h), computed once and shared by dQ and dK.
        let mut ds = vec![0.0; probs.len()];
        let need_qk = self.rg(q) || self.rg(k);
        if need_qk {
            let vv = self.value(v);
            let mut dp = vec![0.0; seq * seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * dh;
                    let blk = (b * heads + h) * seq * seq;
                    let dom = MatRef { data: &g[off..], rows: seq, cols: dh, rs: d, cs: 1 };
                    let vt = MatRef { data: &vv[off..], rows: dh, cols: seq, rs: 1, cs: d };
                    gemm(dom, vt, &mut dp, 0.0);
                    let p = &probs[blk..blk + seq * seq];
                    for i in 0..seq {
                        let dot: f64 = (0..seq).map(|j| dp[i * seq + j] * p[i * seq + j]).sum();
                        for j in 0..seq {
                            ds[blk + i * seq + j] = p[i * seq + j] * (dp[i * seq + j] - dot) * scale;
                        }
                    }
                }
            }
        }
        self.acc(q, |gq, t| {
            let kv = t.value(k);
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * dh;
                    let blk = (b * heads + h) * seq * seq;
                    let dsm = MatRef::rm(&ds[blk..blk + seq * seq], seq, seq);
                    let km = MatRef { data: &kv[off..], rows: seq, cols: dh, rs: d, cs: 1 };
                    gemm_into(dsm, km, &mut gq[off..], d, 1, 1.0);
                }
            }
        });
        self.acc(k, |gk, t| {
            let qv = t.value(q);
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * dh;
                    let blk = (b * heads + h) * seq * seq;
                    let dst = MatRef::rm_t(&ds[blk..blk + seq * seq], seq, seq);
                    let qm = MatRef { data: &qv[off..], rows: seq, cols: dh, rs: d, cs: 1 };
                    gemm_into(dst, qm, &mut gk[off..], d, 1, 1.0);
                }
            }
        });
        self.acc(v, |gv, _| {
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * dh;
                    let blk = (b * heads + h) * seq * seq;
                    let pt = MatRef::rm_t(&probs[blk..blk + seq * seq], seq, seq);
                    let dom = MatRef { data: &g[off..], rows: seq, cols: dh, rs: d, cs: 1 };
                    gemm_into(pt, dom, &mut gv[off..], d, 1, 1.0);
                }
            }
        });
    }
}
