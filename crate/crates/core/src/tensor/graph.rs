use std::collections::HashMap;

use rand::Rng;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Guard added to the norm in the squash denominator.
pub(crate) const SQUASH_EPS: f64 = 1e-9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
        pad: Option<usize>,
    },
    /// Elementwise product with a constant mask (dropout, row masking).
    MaskMul(Var, Vec<F>),
    Softmax {
        x: Var,
        axis: usize,
    },
    Squash(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv1d(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
    PairSum(Var, Var),
    BroadcastRows(Var),
    WeightedSources(Var, Var),
    Agreement(Var, Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A single-use computation tape.
///
/// Nodes are appended in execution order, so the tape is topologically sorted
/// by construction. Leaves keep accumulated gradients across repeated
/// [`backward`](Graph::backward) calls.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    corrupt_squash: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn as_rows(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d] => (1, *d),
        [n, d] => (*n, *d),
        _ => {
            let d = *shape.last().unwrap();
            (shape.iter().product::<usize>() / d, d)
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            corrupt_squash: false,
        }
    }

    /// Replaces the squash backward rule with a deliberately wrong one. Only
    /// used to demonstrate that gradient checking catches broken rules.
    pub fn set_corrupt_squash(&mut self, on: bool) {
        self.corrupt_squash = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_grad(false)))
    }

    /// Binds a named parameter as a gradient-tracking leaf; repeated calls
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        let mut t = t.clone();
        t.zero_grad();
        let v = self.leaf(t.with_grad(true));
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`backward`](Graph::backward).
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == F::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o = *o + x * y;
                }
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// `x[n×d] + b[d]`, the bias half of an affine map.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = as_rows(self.shape(x));
        if self.shape(b) != [d] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let _ = n;
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let data = self.data(x).iter().map(|&v| v * k).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Scale(x, k), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Relu(x), &[x])
    }

    /// Which side of zero every ReLU input lies on, in tape order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.data(x).iter().map(|&v| v > F::zero()));
            }
        }
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| F::one() / (F::one() + (-v).exp()))
            .collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(F::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::lit(self.value(x).numel() as f64);
        let s = self.data(x).iter().fold(F::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.data(x).to_vec())
            .map_err(|_| Error::shape("reshape", self.shape(x), shape))?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Gathers rows of `table` for every id. Gradient is scatter-added back,
    /// except into the `pad` row, which stays frozen.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize], pad: Option<usize>) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Contract("embedding table must be 2-D".into()));
        }
        let (rows, d) = (shape[0], shape[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                pad,
            },
            &[table],
        ))
    }

    /// Inverted dropout with an explicit Bernoulli mask. Identity when
    /// `train` is false or `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate {p} must be < 1")));
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        Ok(self.mask_mul(x, mask))
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = as_rows(self.shape(x));
        if mask.len() != n {
            return Err(Error::shape("mask_rows", self.shape(x), &[mask.len()]));
        }
        if mask.iter().all(|&m| m) {
            return Ok(x);
        }
        let m: Vec<F> = (0..n * d)
            .map(|i| if mask[i / d] { F::one() } else { F::zero() })
            .collect();
        Ok(self.mask_mul(x, m))
    }

    fn mask_mul(&mut self, x: Var, mask: Vec<F>) -> Var {
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::MaskMul(x, mask), &[x])
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` where positions with a false `mask` entry get
    /// probability exactly zero. `mask` is indexed along `axis`.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        if let Some(m) = mask {
            if m.len() != len {
                return Err(Error::shape("softmax mask", &shape, &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Contract("softmax over a fully masked axis".into()));
            }
        }
        let on = |k: usize| mask.map_or(true, |m| m[k]);
        let xd = self.data(x);
        let mut out = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut mx = F::neg_infinity();
                for k in (0..len).filter(|&k| on(k)) {
                    mx = mx.max(xd[idx(k)]);
                }
                let mut z = F::zero();
                for k in (0..len).filter(|&k| on(k)) {
                    let e = (xd[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    z = z + e;
                }
                for k in (0..len).filter(|&k| on(k)) {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Row-wise squash: `|s|² / (1 + |s|²) · s / |s|`, with `squash(0) = 0`.
    pub fn squash(&mut self, s: Var) -> Var {
        let (n, d) = as_rows(self.shape(s));
        let sd = self.data(s);
        let mut out = vec![F::zero(); n * d];
        for r in 0..n {
            let row = &sd[r * d..(r + 1) * d];
            let q = row.iter().fold(F::zero(), |a, &v| a + v * v);
            let f = squash_factor(q);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = f * v;
            }
        }
        let t = Tensor::new(self.shape(s), out).expect("same shape");
        self.push(t, Op::Squash(s), &[s])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = lanes(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Same-length 1-D convolution over the sequence axis:
    /// `x[n×d_in] ⊛ k[w×d_in×d_out] → [n×d_out]`, zero padded symmetrically.
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sk.len() != 3 {
            return Err(Error::Config(format!("conv kernel must be 3-D, got {sk:?}")));
        }
        if sk[0] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv kernel width must be odd, got {}",
                sk[0]
            )));
        }
        if sx.len() != 2 || sx[1] != sk[1] {
            return Err(Error::shape("conv1d", sx, sk));
        }
        let (n, din) = (sx[0], sx[1]);
        let (w, dout) = (sk[0], sk[2]);
        let half = w / 2;
        let (xd, kd) = (self.data(x), self.data(k));
        let mut out = vec![F::zero(); n * dout];
        for t in 0..n {
            let row = &mut out[t * dout..(t + 1) * dout];
            for s in 0..w {
                let src = t + s;
                if src < half || src - half >= n {
                    continue;
                }
                let xrow = &xd[(src - half) * din..(src - half + 1) * din];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == F::zero() {
                        continue;
                    }
                    let krow = &kd[(s * din + c) * dout..(s * din + c + 1) * dout];
                    for (o, &kv) in row.iter_mut().zip(krow) {
                        *o = *o + xv * kv;
                    }
                }
            }
        }
        let t = Tensor::new(&[n, dout], out)?;
        Ok(self.push(t, Op::Conv1d(x, k), &[x, k]))
    }

    /// Sum over rows of `-log softmax(logits_row)[target]`, skipping rows
    /// whose target is `None`. A 1-D `logits` is a single row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, k) = as_rows(self.shape(logits));
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let ld = self.data(logits);
        let mut total = F::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= k {
                return Err(Error::Index {
                    what: "cross-entropy classes",
                    index: t,
                    len: k,
                });
            }
            let row = &ld[r * k..(r + 1) * k];
            total = total + log_sum_exp(row) - row[t];
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// `out[i, j, :] = a[i, :] + b[j, :]` for `a[n×r]`, `b[m×r]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("pair_sum", sa, sb));
        }
        let (n, m, r) = (sa[0], sb[0], sa[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * m * r);
        for i in 0..n {
            for j in 0..m {
                out.extend(
                    ad[i * r..(i + 1) * r]
                        .iter()
                        .zip(&bd[j * r..(j + 1) * r])
                        .map(|(&x, &y)| x + y),
                );
            }
        }
        let t = Tensor::new(&[n, m, r], out)?;
        Ok(self.push(t, Op::PairSum(a, b), &[a, b]))
    }

    /// Repeats a vector `x[d]` as `n` rows.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 || n == 0 {
            return Err(Error::shape("broadcast_rows", s, &[n]));
        }
        let d = s[0];
        let row = self.data(x).to_vec();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(t, Op::BroadcastRows(x), &[x]))
    }

    /// `s[j, :] = Σ_i c[i, j] · u[i, j, :]` for `c[n×m]`, `u[n×m×r]`.
    pub fn weighted_sources(&mut self, c: Var, u: Var) -> Result<Var> {
        let (sc, su) = (self.shape(c), self.shape(u));
        if sc.len() != 2 || su.len() != 3 || sc[0] != su[0] || sc[1] != su[1] {
            return Err(Error::shape("weighted_sources", sc, su));
        }
        let (n, m, r) = (su[0], su[1], su[2]);
        let (cd, ud) = (self.data(c), self.data(u));
        let mut out = vec![F::zero(); m * r];
        for i in 0..n {
            for j in 0..m {
                let w = cd[i * m + j];
                if w == F::zero() {
                    continue;
                }
                let urow = &ud[(i * m + j) * r..(i * m + j + 1) * r];
                for (o, &uv) in out[j * r..(j + 1) * r].iter_mut().zip(urow) {
                    *o = *o + w * uv;
                }
            }
        }
        let t = Tensor::new(&[m, r], out)?;
        Ok(self.push(t, Op::WeightedSources(c, u), &[c, u]))
    }

    /// `a[i, j] = u[i, j, :] · v[j, :]` for `u[n×m×r]`, `v[m×r]`.
    pub fn agreement(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u), self.shape(v));
        if su.len() != 3 || sv.len() != 2 || su[1] != sv[0] || su[2] != sv[1] {
            return Err(Error::shape("agreement", su, sv));
        }
        let (n, m, r) = (su[0], su[1], su[2]);
        let (ud, vd) = (self.data(u), self.data(v));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let urow = &ud[(i * m + j) * r..(i * m + j + 1) * r];
                let vrow = &vd[j * r..(j + 1) * r];
                out.push(urow.iter().zip(vrow).fold(F::zero(), |a, (&x, &y)| a + x * y));
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::Agreement(u, v), &[u, v]))
    }

    /// Affine map `x·w + b`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, adding into every leaf gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<F>>], to: Var, f: impl FnOnce(&mut [F])) {
        let node = &self.nodes[to.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[to.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]);
        f(buf);
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.send(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = F::zero();
                            for j in 0..n {
                                acc = acc + g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + acc;
                        }
                    }
                });
                self.send(grads, *b, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = ad[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.send(grads, *a, |ga| add_into(ga, g));
                self.send(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddRow(x, b) => {
                let d = self.shape(*b)[0];
                self.send(grads, *x, |gx| add_into(gx, g));
                self.send(grads, *b, |gb| {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % d] = gb[i % d] + v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.send(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                });
                self.send(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                });
            }
            Op::Scale(x, k) => {
                self.send(grads, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * *k;
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.send(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > F::zero() {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.send(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * out[i] * (F::one() - out[i]);
                    }
                });
            }
            Op::Sum(x) => {
                self.send(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = F::lit(self.value(*x).numel() as f64);
                self.send(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o = *o + g[0] / n;
                    }
                });
            }
            Op::Reshape(x) => self.send(grads, *x, |gx| add_into(gx, g)),
            Op::Embedding { table, ids, pad } => {
                let d = self.shape(*table)[1];
                self.send(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *pad {
                            continue;
                        }
                        for c in 0..d {
                            gt[id * d + c] = gt[id * d + c] + g[r * d + c];
                        }
                    }
                });
            }
            Op::MaskMul(x, mask) => {
                self.send(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * mask[i];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = lanes(node.value.shape(), *axis);
                self.send(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot = (0..len).fold(F::zero(), |a, k| a + g[idx(k)] * out[idx(k)]);
                            for k in 0..len {
                                let y = out[idx(k)];
                                gx[idx(k)] = gx[idx(k)] + y * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Squash(s) => {
                let (n, d) = as_rows(self.shape(*s));
                let sd = self.data(*s);
                let corrupt = self.corrupt_squash;
                self.send(grads, *s, |gs| {
                    for r in 0..n {
                        let row = &sd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let q = row.iter().fold(F::zero(), |a, &v| a + v * v);
                        let f = squash_factor(q);
                        let dfdq = if corrupt { F::zero() } else { squash_factor_dq(q) };
                        let gdot = row.iter().zip(grow).fold(F::zero(), |a, (&x, &y)| a + x * y);
                        let two = F::lit(2.0);
                        for c in 0..d {
                            gs[r * d + c] = gs[r * d + c] + f * grow[c] + gdot * dfdq * two * row[c];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = lanes(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    self.send(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            add_into(&mut gp[o * len..(o + 1) * len], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Conv1d(x, k) => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (w, dout) = (self.shape(*k)[0], self.shape(*k)[2]);
                let half = w / 2;
                let (xd, kd) = (self.data(*x), self.data(*k));
                self.send(grads, *x, |gx| {
                    for t in 0..n {
                        let grow = &g[t * dout..(t + 1) * dout];
                        for s in 0..w {
                            let src = t + s;
                            if src < half || src - half >= n {
                                continue;
                            }
                            for c in 0..din {
                                let krow = &kd[(s * din + c) * dout..(s * din + c + 1) * dout];
                                let acc = krow.iter().zip(grow).fold(F::zero(), |a, (&kv, &gv)| a + kv * gv);
                                gx[(src - half) * din + c] = gx[(src - half) * din + c] + acc;
                            }
                        }
                    }
                });
                self.send(grads, *k, |gk| {
                    for t in 0..n {
                        let grow = &g[t * dout..(t + 1) * dout];
                        for s in 0..w {
                            let src = t + s;
                            if src < half || src - half >= n {
                                continue;
                            }
                            for c in 0..din {
                                let xv = xd[(src - half) * din + c];
                                if xv == F::zero() {
                                    continue;
                                }
                                let base = (s * din + c) * dout;
                                for (o, &gv) in gk[base..base + dout].iter_mut().zip(grow) {
                                    *o = *o + xv * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let (_, k) = as_rows(self.shape(*logits));
                let ld = self.data(*logits);
                self.send(grads, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &ld[r * k..(r + 1) * k];
                        let lse = log_sum_exp(row);
                        for c in 0..k {
                            let p = (row[c] - lse).exp();
                            let y = if c == t { F::one() } else { F::zero() };
                            gl[r * k + c] = gl[r * k + c] + g[0] * (p - y);
                        }
                    }
                });
            }
            Op::PairSum(a, b) => {
                let (n, r) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                self.send(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            let src = &g[(i * m + j) * r..(i * m + j + 1) * r];
                            add_into(&mut ga[i * r..(i + 1) * r], src);
                        }
                    }
                });
                self.send(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            let src = &g[(i * m + j) * r..(i * m + j + 1) * r];
                            add_into(&mut gb[j * r..(j + 1) * r], src);
                        }
                    }
                });
            }
            Op::BroadcastRows(x) => {
                let d = self.shape(*x)[0];
                self.send(grads, *x, |gx| {
                    for (i, &v) in g.iter().enumerate() {
                        gx[i % d] = gx[i % d] + v;
                    }
                });
            }
            Op::WeightedSources(c, u) => {
                let su = self.shape(*u);
                let (n, m, r) = (su[0], su[1], su[2]);
                let (cd, ud) = (self.data(*c), self.data(*u));
                self.send(grads, *c, |gc| {
                    for i in 0..n {
                        for j in 0..m {
                            let urow = &ud[(i * m + j) * r..(i * m + j + 1) * r];
                            let grow = &g[j * r..(j + 1) * r];
                            let acc = urow.iter().zip(grow).fold(F::zero(), |a, (&x, &y)| a + x * y);
                            gc[i * m + j] = gc[i * m + j] + acc;
                        }
                    }
                });
                self.send(grads, *u, |gu| {
                    for i in 0..n {
                        for j in 0..m {
                            let w = cd[i * m + j];
                            let grow = &g[j * r..(j + 1) * r];
                            for (o, &gv) in gu[(i * m + j) * r..(i * m + j + 1) * r].iter_mut().zip(grow) {
                                *o = *o + w * gv;
                            }
                        }
                    }
                });
            }
            Op::Agreement(u, v) => {
                let su = self.shape(*u);
                let (n, m, r) = (su[0], su[1], su[2]);
                let (ud, vd) = (self.data(*u), self.data(*v));
                self.send(grads, *u, |gu| {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            let vrow = &vd[j * r..(j + 1) * r];
                            for (o, &x) in gu[(i * m + j) * r..(i * m + j + 1) * r].iter_mut().zip(vrow) {
                                *o = *o + gv * x;
                            }
                        }
                    }
                });
                self.send(grads, *v, |gvv| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            let urow = &ud[(i * m + j) * r..(i * m + j + 1) * r];
                            for (o, &x) in gvv[j * r..(j + 1) * r].iter_mut().zip(urow) {
                                *o = *o + gij * x;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let z = row.iter().fold(F::zero(), |a, &v| a + (v - mx).exp());
    mx + z.ln()
}

/// `q / ((1 + q)(√q + ε))`, the multiplier applied to `s` where `q = |s|²`.
fn squash_factor<F: Scalar>(q: F) -> F {
    let eps = F::lit(SQUASH_EPS);
    q / ((F::one() + q) * (q.sqrt() + eps))
}

fn squash_factor_dq<F: Scalar>(q: F) -> F {
    if q == F::zero() {
        return F::zero();
    }
    let eps = F::lit(SQUASH_EPS);
    let r = q.sqrt();
    let den = (F::one() + q) * (r + eps);
    let dden = (r + eps) + (F::one() + q) / (F::lit(2.0) * r);
    (den - q * dden) / (den * den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 4.0, 5.0, 6.0]);
        let r = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let col = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let p = g.matmul(r, col).unwrap();
        assert_eq!(g.data(p), &[11.0]);
        let e = g.matmul(r, r).unwrap_err();
        assert!(e.to_string().contains("[1, 2]"), "{e}");
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[3, 2], vec![1.0, -2.0, 0.5, 4.0, 3.0, 0.0]).unwrap();
        let id = g.constant(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = g.conv1d(x, id).unwrap();
        assert_eq!(g.data(y), g.data(x));
        let zero = g.constant(&[3, 2, 4], vec![0.0; 24]).unwrap();
        let z = g.conv1d(x, zero).unwrap();
        assert!(g.data(z).iter().all(|&v| v == 0.0));
        let even = g.constant(&[2, 2, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(g.conv1d(x, even), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[3], vec![0.0; 3]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert!(close(g.data(s), &[1.0 / 3.0; 3], 1e-15));
        let big = g.constant(&[2], vec![1e4, 0.0]).unwrap();
        let s = g.softmax(big, 0).unwrap();
        assert!(close(g.data(s), &[1.0, 0.0], 1e-12));
        let masked = g.constant(&[3], vec![5.0, 1.0, 1.0]).unwrap();
        let s = g.softmax_masked(masked, 0, Some(&[false, true, true])).unwrap();
        assert_eq!(g.data(s), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn squash_closed_forms() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(&[1, 2], vec![0.6, 0.8]).unwrap();
        let s = g.squash(u);
        assert!(close(g.data(s), &[0.3, 0.4], 1e-9));
        let z = g.constant(&[1, 3], vec![0.0; 3]).unwrap();
        let s = g.squash(z);
        assert_eq!(g.data(s), &[0.0; 3]);
        let three = g.constant(&[1, 2], vec![0.0, 3.0]).unwrap();
        let s = g.squash(three);
        assert!(close(g.data(s), &[0.0, 0.9], 1e-9));
    }

    #[test]
    fn concat_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad(true));
        let b = g.leaf(Tensor::new(&[1], vec![3.0]).unwrap().with_grad(true));
        let single = g.concat(&[a], 0).unwrap();
        assert_eq!(g.data(single), g.data(a));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0]);
        let m = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let n = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(g.concat(&[m, n], 1).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(&[3], vec![0.0; 3]).unwrap();
        let l = g.cross_entropy(u, &[Some(1)]).unwrap();
        assert!((g.scalar_value(l) - 3f64.ln()).abs() < 1e-12);
        let sure = g.constant(&[3], vec![10.0, 0.0, 0.0]).unwrap();
        let l = g.cross_entropy(sure, &[Some(0)]).unwrap();
        assert!(g.scalar_value(l) < 1e-4);
        assert!(matches!(g.cross_entropy(sure, &[Some(3)]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap().with_grad(true));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 3]);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0).with_grad(true));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        let v = g.constant(&[2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad(true));
        let l = g.sum(x);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(g.data(y), g.data(x));
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(x)) {
            assert!(*a == 0.0 || *a == 2.0 * b);
        }
    }

    #[test]
    fn relu_pattern_tracks_signs() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let _ = g.relu(x);
        let y = g.constant(&[1], vec![0.5]).unwrap();
        let _ = g.relu(y);
        assert_eq!(g.relu_pattern(), vec![false, false, true, true]);
    }
}
