//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] owns every intermediate tensor of one forward pass. Operations
//! append nodes and return lightweight [`Var`] handles; [`Graph::backward`]
//! walks the nodes in reverse creation order, which is always a valid
//! topological order because an op can only reference earlier nodes.
//!
//! Gradients are accumulated additively: a tensor consumed by several ops
//! receives the sum of every path's contribution, and repeated calls to
//! `backward` keep adding into the leaf gradient slots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Dropout { x: Var, scale_mask: Vec<f64> },
    Sum(Var),
    Embedding { table: Var, indices: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Interleave(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording graph for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Batch layout of a matmul: `batch` independent `[n, k] x [k, m]` products.
#[derive(Debug, Clone, Copy)]
struct MatMulLayout {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<(MatMulLayout, Vec<usize>)> {
    let mismatch = || Error::dim("matmul", format!("cannot multiply {a:?} by {b:?}"));
    if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
        return Err(mismatch());
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, m) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let layout = match (a.len(), b.len()) {
        (2, 2) => (MatMulLayout { batch: 1, n, k, m, a_batched: false, b_batched: false }, vec![n, m]),
        // A batched left operand against a shared matrix is one tall product.
        (3, 2) => (
            MatMulLayout { batch: 1, n: a[0] * n, k, m, a_batched: false, b_batched: false },
            vec![a[0], n, m],
        ),
        (2, 3) => (
            MatMulLayout { batch: b[0], n, k, m, a_batched: false, b_batched: true },
            vec![b[0], n, m],
        ),
        _ => {
            if a[0] != b[0] {
                return Err(mismatch());
            }
            (
                MatMulLayout { batch: a[0], n, k, m, a_batched: true, b_batched: true },
                vec![a[0], n, m],
            )
        }
    };
    Ok(layout)
}

/// `out[n,m] += a[n,k] * b[k,m]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[n,k] += d[n,m] * b[k,m]^T`
fn gemm_bt_acc(d: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let d_row = &d[i * m..(i + 1) * m];
        for p in 0..k {
            let b_row = &b[p * m..(p + 1) * m];
            let dot: f64 = d_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k,m] += a[n,k]^T * d[n,m]`
fn gemm_at_acc(a: &[f64], d: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let d_row = &d[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &dv) in out_row.iter_mut().zip(d_row) {
                *o += aip * dv;
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
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

    /// Inserts a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, values: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let value = Tensor::new(shape, values)?;
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (l, shape) = matmul_layout(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; shape.iter().product()];
        let (av, bv) = (self.vals(a), self.vals(b));
        for bi in 0..l.batch {
            let a_off = if l.a_batched { bi * l.n * l.k } else { 0 };
            let b_off = if l.b_batched { bi * l.k * l.m } else { 0 };
            gemm_acc(
                &av[a_off..a_off + l.n * l.k],
                &bv[b_off..b_off + l.k * l.m],
                &mut out[bi * l.n * l.m..(bi + 1) * l.n * l.m],
                l.n,
                l.k,
                l.m,
            );
        }
        self.push("matmul", shape, out, Op::MatMul(a, b), &[a, b])
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", format!("need rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s.iter().take(s.len() - 2).product::<usize>();
        let v = self.vals(x);
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = v[base + i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.push("transpose", shape, out, Op::Transpose(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x - y).collect();
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    /// `x + 1 b^T`: adds a vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::dim("add_bias", format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x))));
        }
        let b = self.vals(bias);
        let out = self.vals(x).chunks(d).flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b)).collect();
        self.push("add_bias", self.shape(x).to_vec(), out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.vals(x).iter().map(|v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    /// `x W + 1 b^T`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    /// Softmax over the last dimension, stabilised by subtracting the row max.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut out = self.vals(x).to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push("softmax_last", self.shape(x).to_vec(), out, Op::Softmax(x), &[x])
    }

    /// Per-position normalisation over the last (hidden) dimension followed by
    /// the affine map `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for hidden size {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xs = self.vals(x);
        let (g, b) = (self.vals(gamma), self.vals(beta));
        let rows = xs.len() / d;
        let mut normalized = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let nh = (row[j] - mean) * inv;
                normalized[r * d + j] = nh;
                out[r * d + j] = g[j] * nh + b[j];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, normalized, inv_std };
        self.push("layer_norm", self.shape(x).to_vec(), out, op, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.vals(x).iter().map(|v| v.max(0.0)).collect();
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Evaluation mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale_mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.vals(x).iter().zip(&scale_mask).map(|(v, m)| v * m).collect();
        self.push("dropout", self.shape(x).to_vec(), out, Op::Dropout { x, scale_mask }, &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.vals(x).iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(x), &[x])
    }

    /// Row lookup into `table` (`[rows, d]`); output shape is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim("embedding", format!("table must be 2-D, got {ts:?}")));
        }
        if prefix.iter().product::<usize>() != indices.len() {
            return Err(Error::dim("embedding", format!("{} indices for prefix {prefix:?}", indices.len())));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { index: bad, bound: rows });
        }
        let tv = self.vals(table);
        let out = indices.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let mut shape = prefix.to_vec();
        shape.push(d);
        let op = Op::Embedding { table, indices: indices.to_vec() };
        self.push("embedding", shape, out, op, &[table])
    }

    /// Selects sequence positions from a `[batch, len, d]` tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("select_rows", format!("need [batch, len, d], got {s:?}")));
        }
        let (batch, len, d) = (s[0], s[1], s[2]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= len) {
            return Err(Error::Index { index: bad, bound: len });
        }
        let v = self.vals(x);
        let mut out = Vec::with_capacity(batch * rows.len() * d);
        for b in 0..batch {
            for &r in rows {
                let off = (b * len + r) * d;
                out.extend_from_slice(&v[off..off + d]);
            }
        }
        let op = Op::SelectRows { x, rows: rows.to_vec() };
        self.push("select_rows", vec![batch, rows.len(), d], out, op, &[x])
    }

    /// Interleaves `k` equally shaped `[batch, len, d]` streams along the
    /// sequence axis: `s0[0], s1[0], .., s0[1], s1[1], ..`.
    pub fn interleave(&mut self, streams: &[Var]) -> Result<Var> {
        let first = *streams.first().ok_or_else(|| Error::dim("interleave", "no streams"))?;
        let s = self.shape(first).to_vec();
        if s.len() != 3 || streams.iter().any(|&v| self.shape(v) != s.as_slice()) {
            return Err(Error::dim("interleave", "streams must share one [batch, len, d] shape"));
        }
        let (batch, len, d) = (s[0], s[1], s[2]);
        let k = streams.len();
        let mut out = Vec::with_capacity(batch * len * k * d);
        for b in 0..batch {
            for t in 0..len {
                for &v in streams {
                    let off = (b * len + t) * d;
                    out.extend_from_slice(&self.vals(v)[off..off + d]);
                }
            }
        }
        self.push("interleave", vec![batch, len * k, d], out, Op::Interleave(streams.to_vec()), streams)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.vals(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), &[x])
    }

    /// Back-propagates from a scalar (shape `[1]`) loss, adding into the
    /// gradient slot of every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss of shape [1], got {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = add_into(&mut self.grads[idx], upstream.len());
                slot.iter_mut().zip(&upstream).for_each(|(g, u)| *g += u);
                continue;
            }
            self.propagate(idx, &upstream, &mut local);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, up: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (l, _) = matmul_layout(self.shape(*a), self.shape(*b)).expect("validated in forward");
                let (av, bv) = (self.vals(*a), self.vals(*b));
                if self.wants(*a) {
                    let ga = add_into(&mut local[a.0], numel(*a));
                    for bi in 0..l.batch {
                        let a_off = if l.a_batched { bi * l.n * l.k } else { 0 };
                        let b_off = if l.b_batched { bi * l.k * l.m } else { 0 };
                        gemm_bt_acc(
                            &up[bi * l.n * l.m..(bi + 1) * l.n * l.m],
                            &bv[b_off..b_off + l.k * l.m],
                            &mut ga[a_off..a_off + l.n * l.k],
                            l.n,
                            l.k,
                            l.m,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = add_into(&mut local[b.0], numel(*b));
                    for bi in 0..l.batch {
                        let a_off = if l.a_batched { bi * l.n * l.k } else { 0 };
                        let b_off = if l.b_batched { bi * l.k * l.m } else { 0 };
                        gemm_at_acc(
                            &av[a_off..a_off + l.n * l.k],
                            &up[bi * l.n * l.m..(bi + 1) * l.n * l.m],
                            &mut gb[b_off..b_off + l.k * l.m],
                            l.n,
                            l.k,
                            l.m,
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = up.len() / (r * c);
                let gx = add_into(&mut local[x.0], up.len());
                for b in 0..batch {
                    let base = b * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[base + i * c + j] += up[base + j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(v) {
                        let g = add_into(&mut local[v.0], up.len());
                        g.iter_mut().zip(up).for_each(|(g, u)| *g += sign * u);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(v) {
                        let g = add_into(&mut local[v.0], up.len());
                        g.iter_mut().zip(up).for_each(|(g, u)| *g += sign * u);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let ov = self.vals(other);
                        let g = add_into(&mut local[v.0], up.len());
                        for ((g, u), o) in g.iter_mut().zip(up).zip(ov) {
                            *g += u * o;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    let g = add_into(&mut local[x.0], up.len());
                    g.iter_mut().zip(up).for_each(|(g, u)| *g += u);
                }
                if self.wants(*bias) {
                    let d = numel(*bias);
                    let g = add_into(&mut local[bias.0], d);
                    for row in up.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                    }
                }
            }
            Op::Scale(x, c) => {
                let g = add_into(&mut local[x.0], up.len());
                g.iter_mut().zip(up).for_each(|(g, u)| *g += c * u);
            }
            Op::Softmax(x) => {
                let y = node.value.values();
                let d = node.value.last_dim();
                let g = add_into(&mut local[x.0], up.len());
                for ((gr, ur), yr) in g.chunks_mut(d).zip(up.chunks(d)).zip(y.chunks(d)) {
                    let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                    for j in 0..d {
                        gr[j] += yr[j] * (ur[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                let d = numel(*gamma);
                let gv = self.vals(*gamma);
                if self.wants(*gamma) {
                    let g = add_into(&mut local[gamma.0], d);
                    for (ur, nr) in up.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            g[j] += ur[j] * nr[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let g = add_into(&mut local[beta.0], d);
                    for ur in up.chunks(d) {
                        g.iter_mut().zip(ur).for_each(|(g, u)| *g += u);
                    }
                }
                if self.wants(*x) {
                    let g = add_into(&mut local[x.0], up.len());
                    let df = d as f64;
                    for (r, ((gr, ur), nr)) in g.chunks_mut(d).zip(up.chunks(d)).zip(normalized.chunks(d)).enumerate() {
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for j in 0..d {
                            let dn = ur[j] * gv[j];
                            sum_dn += dn;
                            sum_dn_n += dn * nr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dn = ur[j] * gv[j];
                            gr[j] += inv / df * (df * dn - sum_dn - nr[j] * sum_dn_n);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.vals(*x);
                let g = add_into(&mut local[x.0], up.len());
                for ((g, u), v) in g.iter_mut().zip(up).zip(xv) {
                    if *v > 0.0 {
                        *g += u;
                    }
                }
            }
            Op::Dropout { x, scale_mask } => {
                let g = add_into(&mut local[x.0], up.len());
                for ((g, u), m) in g.iter_mut().zip(up).zip(scale_mask) {
                    *g += u * m;
                }
            }
            Op::Sum(x) => {
                let g = add_into(&mut local[x.0], numel(*x));
                g.iter_mut().for_each(|g| *g += up[0]);
            }
            Op::Embedding { table, indices } => {
                let d = self.value(*table).last_dim();
                let g = add_into(&mut local[table.0], numel(*table));
                for (row, &i) in up.chunks(d).zip(indices) {
                    g[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(g, u)| *g += u);
                }
            }
            Op::SelectRows { x, rows } => {
                let s = self.shape(*x);
                let (len, d) = (s[1], s[2]);
                let g = add_into(&mut local[x.0], numel(*x));
                for (chunk_idx, row) in up.chunks(d).enumerate() {
                    let b = chunk_idx / rows.len();
                    let r = rows[chunk_idx % rows.len()];
                    let off = (b * len + r) * d;
                    g[off..off + d].iter_mut().zip(row).for_each(|(g, u)| *g += u);
                }
            }
            Op::Interleave(streams) => {
                let s = self.shape(streams[0]);
                let (len, d) = (s[1], s[2]);
                let k = streams.len();
                for (si, &v) in streams.iter().enumerate() {
                    if !self.wants(v) {
                        continue;
                    }
                    let g = add_into(&mut local[v.0], numel(v));
                    for (pos, gr) in g.chunks_mut(d).enumerate() {
                        let (b, t) = (pos / len, pos % len);
                        let off = ((b * len + t) * k + si) * d;
                        gr.iter_mut().zip(&up[off..off + d]).for_each(|(g, u)| *g += u);
                    }
                }
            }
            Op::Reshape(x) => {
                let g = add_into(&mut local[x.0], up.len());
                g.iter_mut().zip(up).for_each(|(g, u)| *g += u);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Central-difference gradient of `f` with respect to every element of `inputs[which]`.
    fn finite_diff(inputs: &[Tensor], which: usize, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> Vec<f64> {
        let h = 1e-5;
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|x| g.constant(x.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).values()[0]
        };
        (0..inputs[which].numel())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].values_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].values_mut()[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.backward(out).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
            let numeric = finite_diff(inputs, i, f);
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {i}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).values(), &[3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.constant(b.clone());
        let c = g.matmul(av, bv).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        // ones(3,2) x b^T: every row equals the row sums of b.
        let row_sums: Vec<f64> = b.values().chunks(2).map(|r| r[0] + r[1]).collect();
        let expected: Vec<f64> = (0..3).flat_map(|_| row_sums.clone()).collect();
        for (x, y) in g.grad(av).unwrap().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        check_grads(&[a, b], &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c).unwrap()
        });
    }

    #[test]
    fn batched_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 4, 2], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let weights = random(&[2, 3, 2], &mut rng);
        check_grads(&[a.clone(), b, weights.clone()], &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            let c = g.mul(c, v[2]).unwrap();
            g.sum(c).unwrap()
        });
        check_grads(&[a, w, weights], &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            let c = g.mul(c, v[2]).unwrap();
            g.sum(c).unwrap()
        });
        let lhs = random(&[3, 4], &mut rng);
        let rhs = random(&[2, 4, 2], &mut rng);
        let weights = random(&[2, 3, 2], &mut rng);
        check_grads(&[lhs, rhs, weights], &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            let c = g.mul(c, v[2]).unwrap();
            g.sum(c).unwrap()
        });
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax_last(x).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, 0.5]);

        let a = 123.456;
        let x = g.constant(t(&[3], &[a, a, a]));
        let y = g.softmax_last(x).unwrap();
        for v in g.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // A -1e4 mask on one position: its weight is exp(-1e4) / normaliser.
        let x = g.constant(t(&[3], &[0.3, -1e4 + 0.1, -0.2]));
        let y = g.softmax_last(x).unwrap();
        let masked = g.value(y).values()[1];
        let direct = (-1e4_f64 + 0.1 - 0.3).exp() / (1.0 + (-0.5_f64).exp());
        assert!(masked < 1e-40);
        assert_eq!(masked, direct);
    }

    #[test]
    fn softmax_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4], &mut rng);
        let w = random(&[2, 3, 4], &mut rng);
        check_grads(&[x, w], &|g, v| {
            let y = g.softmax_last(v[0]).unwrap();
            let y = g.mul(y, v[1]).unwrap();
            g.sum(y).unwrap()
        });
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let h = g.constant(t(&[2], &[1.0, 3.0]));
        let one = g.constant(t(&[2], &[1.0, 1.0]));
        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.layer_norm(h, one, zero, 1e-12).unwrap();
        for (v, e) in g.value(y).values().iter().zip([-1.0, 1.0]) {
            assert!((v - e).abs() < 1e-9);
        }
        let h = g.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 4.0, 9.0]));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let fives = g.constant(Tensor::filled(&[3], 5.0));
        let y = g.layer_norm(h, zeros, fives, 1e-5).unwrap();
        assert!(g.value(y).values().iter().all(|&v| v == 5.0));

        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.layer_norm(h, bad, fives, 1e-5), Err(Error::Dimension { .. })));
        assert!(matches!(g.layer_norm(h, zeros, fives, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 5], &mut rng);
        let gamma = random(&[5], &mut rng);
        let beta = random(&[5], &mut rng);
        let w = random(&[3, 5], &mut rng);
        check_grads(&[x, gamma, beta, w], &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let y = g.mul(y, v[3]).unwrap();
            g.sum(y).unwrap()
        });
    }

    #[test]
    fn relu_and_dropout() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 2.0]);
        let d = g.dropout(x, 0.1, false, 0).unwrap();
        assert_eq!(g.value(d).values(), g.value(x).values());
        assert!(matches!(g.dropout(x, 1.0, true, 0), Err(Error::Config(_))));
        assert!(matches!(g.dropout(x, -0.1, true, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_monte_carlo() {
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n], input.clone()).unwrap());
        let y = g.dropout(x, 0.1, true, 42).unwrap();
        let out = g.value(y).values();
        let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.9).abs() < 0.003, "survivor fraction {survivors}");
        let mean_in = input.iter().sum::<f64>() / n as f64;
        let mean_out = out.iter().sum::<f64>() / n as f64;
        assert!(((mean_out - mean_in) / mean_in).abs() < 0.01);

        let y2 = g.dropout(x, 0.1, true, 42).unwrap();
        assert_eq!(g.value(y).values(), g.value(y2).values());
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&[2, 3, 2], &mut rng);
        let b = random(&[2, 3, 2], &mut rng);
        let table = random(&[5, 2], &mut rng);
        let w = random(&[2, 6, 2], &mut rng);
        check_grads(&[a.clone(), b.clone(), w], &|g, v| {
            let x = g.interleave(&[v[0], v[1]]).unwrap();
            let x = g.mul(x, v[2]).unwrap();
            g.sum(x).unwrap()
        });
        let w = random(&[2, 2, 2], &mut rng);
        check_grads(&[a, w], &|g, v| {
            let x = g.select_rows(v[0], &[2, 0]).unwrap();
            let x = g.transpose(x).unwrap();
            let x = g.relu(x).unwrap();
            let x = g.mul(x, v[1]).unwrap();
            g.sum(x).unwrap()
        });
        let w = random(&[2, 2, 2], &mut rng);
        check_grads(&[table, w], &|g, v| {
            let e = g.embedding(v[0], &[1, 4, 1, 0], &[2, 2]).unwrap();
            let e = g.mul(e, v[1]).unwrap();
            let e = g.scale(e, 0.5).unwrap();
            g.sum(e).unwrap()
        });
    }

    #[test]
    fn embedding_index_error() {
        let mut g = Graph::new();
        let tab = g.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.embedding(tab, &[3], &[1]), Err(Error::Index { index: 3, bound: 3 })));
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }
}
