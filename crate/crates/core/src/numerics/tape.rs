//! Eager reverse-mode tape.
//!
//! Every operation computes its value immediately and records a node with
//! whatever it needs for the backward rule. [`Tape::backward`] replays the
//! nodes in reverse creation order, which is a valid topological order.

use crate::error::{Error, Result};

use super::kernels;
use super::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Scale(Var, T),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<T>,
    },
    Rotary {
        x: Var,
        positions: Vec<usize>,
        n_heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<T>,
    },
    SwiGlu(Var, Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        count: usize,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Accumulated gradients of leaf nodes; survives repeated `backward`.
    leaf_grads: Vec<Option<Vec<T>>>,
    params: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to parameter slot `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Tensor<T>, requires_grad: bool) -> Var {
        if self.params.len() <= id {
            self.params.resize(id + 1, None);
        }
        if let Some(v) = self.params[id] {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.params[id] = Some(v);
        v
    }

    /// Gradients of every bound parameter, indexed by parameter slot.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Vec<T>>> {
        (0..n_params)
            .map(|id| {
                self.params
                    .get(id)
                    .copied()
                    .flatten()
                    .and_then(|v| self.leaf_grads[v.0].clone())
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Row-broadcast bias: `x[r, :] + b`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vx.cols();
        if vb.numel() != n {
            return Err(Error::dim("add_bias", vx.shape(), vb.shape()));
        }
        let bias = vb.data();
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(&a, &c)| a + c))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * c).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = vx.cols();
        if d == 0 || vg.numel() != d {
            return Err(Error::dim("rms_norm", vx.shape(), vg.shape()));
        }
        let (y, inv) = kernels::rms_norm_forward(vx.data(), vg.data(), d);
        let t = Tensor::new(vx.shape().to_vec(), y)?;
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv }, ng))
    }

    /// Rotary position encoding on an `L × (n_heads·dh)` matrix.
    pub fn rotary(&mut self, x: Var, positions: &[usize], n_heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if n_heads == 0 || !d.is_multiple_of(n_heads) || !(d / n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary needs an even head dimension (width {d}, {n_heads} heads)"
            )));
        }
        if vx.rows() != positions.len() {
            return Err(Error::dim("rotary", vx.shape(), &[positions.len()]));
        }
        let mut data = vx.data().to_vec();
        kernels::rotary_in_place(&mut data, positions, n_heads, d / n_heads, false);
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::Rotary {
                x,
                positions: positions.to_vec(),
                n_heads,
            },
            ng,
        ))
    }

    /// Masked multi-head attention; see [`kernels::attention_forward`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        visible: &dyn Fn(usize, usize) -> bool,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.cols() != vk.cols() || vk.shape() != vv.shape() || vq.cols() % n_heads != 0 {
            return Err(Error::dim("attention", vq.shape(), vk.shape()));
        }
        let (nq, nk) = (vq.rows(), vk.rows());
        let (out, probs) = kernels::attention_forward(vq.data(), vk.data(), vv.data(), nq, nk, n_heads, visible)?;
        let t = Tensor::new(vec![nq, vq.cols()], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
            ng,
        ))
    }

    pub fn swiglu(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("swiglu", va.shape(), vb.shape()));
        }
        let t = Tensor::new(va.shape().to_vec(), kernels::swiglu_forward(va.data(), vb.data()))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::SwiGlu(a, b), ng))
    }

    /// Embedding lookup: rows `ids` of a `V × d` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != d {
                return Err(Error::dim("concat_rows", &[d], vp.shape()));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Contract("concat_cols row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= vx.rows() {
                return Err(Error::Index {
                    what: "row selection",
                    index: r,
                    bound: vx.rows(),
                });
            }
            data.extend_from_slice(vx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    /// Mean cross-entropy of `logits: L × V` against `targets`; rows whose
    /// target equals `ignore` are skipped. All-ignored input gives 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let (loss, probs, count) = kernels::cross_entropy_forward(vl.data(), vl.cols(), targets, ignore)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            ng,
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::Contract("weighted_sum expects scalars".into()));
            }
            s += w * self.scalar(v);
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Back-propagates from a scalar node, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Vec<T>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(cur) => cur.iter_mut().zip(&delta).for_each(|(c, &d)| *c += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => match &mut self.leaf_grads[i] {
                Some(cur) => cur.iter_mut().zip(&g).for_each(|(c, &d)| *c += d),
                slot @ None => *slot = Some(g),
            },
            &Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(&g, val(b), &mut da, m, n, k);
                    acc(a, da);
                }
                if nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(val(a), &g, &mut db, m, k, n);
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g);
            }
            &Op::AddBias(x, b) => {
                let n = nodes[b.0].value.numel();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                }
                acc(b, db);
                acc(x, g);
            }
            &Op::Mul(a, b) => {
                let da = g.iter().zip(val(b)).map(|(&gg, &y)| gg * y).collect();
                let db = g.iter().zip(val(a)).map(|(&gg, &x)| gg * x).collect();
                acc(a, da);
                acc(b, db);
            }
            &Op::Sum(x) => {
                acc(x, vec![g[0]; nodes[x.0].value.numel()]);
            }
            &Op::Scale(x, c) => {
                acc(x, g.iter().map(|&v| v * c).collect());
            }
            Op::RmsNorm { x, gain, inv } => {
                let d = nodes[x.0].value.cols();
                let (dx, dg) = kernels::rms_norm_backward(&g, val(*x), val(*gain), inv, d);
                acc(*x, dx);
                acc(*gain, dg);
            }
            Op::Rotary { x, positions, n_heads } => {
                let d = nodes[x.0].value.cols();
                let mut dx = g;
                kernels::rotary_in_place(&mut dx, positions, *n_heads, d / n_heads, true);
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let (nq, nk) = (nodes[q.0].value.rows(), nodes[k.0].value.rows());
                let (dq, dk, dv) = kernels::attention_backward(&g, val(*q), val(*k), val(*v), probs, nq, nk, *n_heads);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            &Op::SwiGlu(a, b) => {
                let (da, db) = kernels::swiglu_backward(&g, val(a), val(b));
                acc(a, da);
                acc(b, db);
            }
            Op::GatherRows { table, ids } => {
                let d = nodes[table.0].value.cols();
                let mut dt = vec![T::zero(); nodes[table.0].value.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
                acc(*table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = nodes[parts[0].0].value.rows();
                let total: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                    }
                    acc(p, dp);
                    col += w;
                }
            }
            &Op::Reshape(x) => acc(x, g),
            Op::SelectRows { x, rows } => {
                let d = nodes[x.0].value.cols();
                let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
                acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let vocab = nodes[logits.0].value.cols();
                let mut dl = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let s = g[0] / T::from_usize(*count).expect("count");
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d = p * s;
                        }
                        row[t] -= s;
                    }
                }
                acc(*logits, dl);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, vec![g[0] * w]);
                }
            }
        }
    }
}
