//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`] walks
//! the nodes in reverse and accumulates exact adjoints; parameters loaded with
//! [`Tape::param`] route their adjoints back into the owning [`ParamStore`].

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::numerics::tensor::{gemm, MatRef};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Linear { x: usize, w: usize, bias: Option<usize>, rows: usize, din: usize, dout: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Reshape(usize),
    SwapAxes { a: usize, i: usize, j: usize },
    MeanAxis { a: usize, outer: usize, n: usize, inner: usize, mean: bool },
    Sum(usize),
    Concat { a: usize, b: usize, da: usize, db: usize },
    Softmax(usize),
    Silu(usize),
    Relu(usize),
    RmsNorm { x: usize, gain: usize, eps: f64, inv_rms: Vec<f64> },
    MaskedFill { a: usize, mask: Vec<bool> },
    Dropout { a: usize, scale: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Repeat { a: usize, times: usize },
    Index { a: usize, at: usize },
    Gather { a: usize, idx: Vec<usize> },
    SelectRows { a: usize, idx: Vec<usize>, block: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Adjoints of every node reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[pre, si, mid, sj, post]` -> `[pre, sj, mid, si, post]`.
fn swap_block(data: &[f64], dims: [usize; 5]) -> Vec<f64> {
    let [pre, si, mid, sj, post] = dims;
    let mut out = vec![0.0; data.len()];
    for p in 0..pre {
        for b in 0..sj {
            for m in 0..mid {
                for a in 0..si {
                    let src = (((p * si + a) * mid + m) * sj + b) * post;
                    let dst = (((p * sj + b) * mid + m) * si + a) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    out
}

fn swap_dims(shape: &[usize], i: usize, j: usize) -> [usize; 5] {
    let p = |r: &[usize]| r.iter().product::<usize>();
    [p(&shape[..i]), shape[i], p(&shape[i + 1..j]), shape[j], p(&shape[j + 1..])]
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A constant input; receives adjoints but routes them nowhere.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the
    /// batch) or `[.., k, n]` with the same batch dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if kb != k || (!shared_rhs && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                let am = MatRef::row_major(&da[bi * m * k..(bi + 1) * m * k], k);
                let boff = if shared_rhs { 0 } else { bi * k * n };
                let bm = MatRef::row_major(&db[boff..boff + k * n], n);
                gemm(m, k, n, am, bm, &mut out[bi * m * n..(bi + 1) * m * n], false);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, batch, m, k, n, shared_rhs }))
    }

    /// `x W + bias` over the last axis of `x`; `w` is `[in, out]`, `bias` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(mismatch("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = bias {
            let bd = self.data(b);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        gemm(
            rows,
            din,
            dout,
            MatRef::row_major(self.data(x), din),
            MatRef::row_major(self.data(w), dout),
            &mut out,
            bias.is_some(),
        );
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(dout);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x: x.0, w: w.0, bias: bias.map(|b| b.0), rows, din, dout }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a.0)))
    }

    pub fn swap_axes(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if i >= shape.len() || j >= shape.len() {
            return Err(mismatch("swap_axes", &shape, &[i, j]));
        }
        if i == j {
            return Ok(a);
        }
        let (i, j) = (i.min(j), i.max(j));
        let data = swap_block(self.data(a), swap_dims(&shape, i, j));
        let mut out_shape = shape;
        out_shape.swap(i, j);
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::SwapAxes { a: a.0, i, j }))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(if mean { "mean" } else { "sum_axis" }, &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for r in 0..n {
                let src = &d[(o * n + r) * inner..(o * n + r + 1) * inner];
                for (x, y) in dst.iter_mut().zip(src) {
                    *x += y;
                }
            }
            if mean {
                let inv = 1.0 / n as f64;
                dst.iter_mut().for_each(|x| *x *= inv);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(v, Op::MeanAxis { a: a.0, outer, n, inner, mean }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat", &sa, &sb));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).numel() / da.max(1);
        let mut out = Vec::with_capacity(rows * (da + db));
        {
            let (xa, xb) = (self.data(a), self.data(b));
            for r in 0..rows {
                out.extend_from_slice(&xa[r * da..(r + 1) * da]);
                out.extend_from_slice(&xb[r * db..(r + 1) * db]);
            }
        }
        let mut shape = sa;
        *shape.last_mut().expect("rank >= 1") = da + db;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Concat { a: a.0, b: b.0, da, db }))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let n = self.value(a).last_dim();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let v = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(v, Op::Softmax(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.map(a, silu);
        self.push(v, Op::Silu(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    /// `x / max(sqrt(mean(x^2)), eps) * gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(mismatch("rms_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.data(gain).to_vec();
        let mut out = self.data(x).to_vec();
        let mut inv_rms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / ms.sqrt().max(eps);
            for (v, gv) in row.iter_mut().zip(&g) {
                *v *= inv * gv;
            }
            inv_rms.push(inv);
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(v, Op::RmsNorm { x: x.0, gain: gain.0, eps, inv_rms }))
    }

    /// Sets entries where `mask` is true to `value`. The mask covers the trailing block of
    /// `a` and repeats over the leading entries.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let numel = self.value(a).numel();
        if mask.is_empty() || !numel.is_multiple_of(mask.len()) {
            return Err(mismatch("masked_fill", self.shape(a), &[mask.len()]));
        }
        let mut out = self.data(a).to_vec();
        for (i, x) in out.iter_mut().enumerate() {
            if mask[i % mask.len()] {
                *x = value;
            }
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::MaskedFill { a: a.0, mask: mask.to_vec() }))
    }

    /// Inverted dropout. With `p == 0` or no generator this is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(a) };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(a).numel()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data = self.data(a).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { a: a.0, scale }))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)` over the last axis.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let n = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / n.max(1);
        if shape.is_empty() || targets.len() != rows || targets.iter().any(|&t| t >= n) {
            return Err(mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        let mut probs = self.data(logits).to_vec();
        let mut out = Vec::with_capacity(rows);
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            out.push(lse - row[t]);
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let v = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        Ok(self.push(v, Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs }))
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(a));
        let data = self.data(a).repeat(times);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Repeat { a: a.0, times }))
    }

    /// The flat element `at` as a scalar.
    pub fn index(&mut self, a: Var, at: usize) -> Result<Var> {
        if at >= self.value(a).numel() {
            return Err(mismatch("index", self.shape(a), &[at]));
        }
        let v = Tensor::scalar(self.data(a)[at]);
        Ok(self.push(v, Op::Index { a: a.0, at }))
    }

    /// Picks `a[r, idx[r]]` from each row of the last axis.
    pub fn gather_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = self.value(a).last_dim();
        let rows = self.value(a).numel() / n.max(1);
        if shape.is_empty() || idx.len() != rows || idx.iter().any(|&i| i >= n) {
            return Err(mismatch("gather", &shape, &[idx.len()]));
        }
        let d = self.data(a);
        let out = idx.iter().enumerate().map(|(r, &i)| d[r * n + i]).collect();
        let v = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        Ok(self.push(v, Op::Gather { a: a.0, idx: idx.to_vec() }))
    }

    /// Picks entries of the leading axis: `[r, ..]` -> `[idx.len(), ..]`. Indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
            return Err(invalid(format!("select_rows: index out of range for shape {shape:?}")));
        }
        let block: usize = shape[1..].iter().product();
        let d = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * block);
        for &i in idx {
            out.extend_from_slice(&d[i * block..(i + 1) * block]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let v = Tensor::new(new_shape, out)?;
        Ok(self.push(v, Op::SelectRows { a: a.0, idx: idx.to_vec(), block }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter adjoints into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate(*id, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                let (da, db) = (nodes[a].value.data(), nodes[b].value.data());
                {
                    let ga = slot(grads, nodes, a);
                    for bi in 0..batch {
                        let boff = if shared_rhs { 0 } else { bi * k * n };
                        let gm = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n);
                        let bt = MatRef::row_major(&db[boff..boff + k * n], n).transposed();
                        gemm(m, n, k, gm, bt, &mut ga[bi * m * k..(bi + 1) * m * k], true);
                    }
                }
                let gb = slot(grads, nodes, b);
                for bi in 0..batch {
                    let boff = if shared_rhs { 0 } else { bi * k * n };
                    let at = MatRef::row_major(&da[bi * m * k..(bi + 1) * m * k], k).transposed();
                    let gm = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n);
                    gemm(k, m, n, at, gm, &mut gb[boff..boff + k * n], true);
                }
            }
            &Op::Linear { x, w, bias, rows, din, dout } => {
                let (dx, dw) = (nodes[x].value.data(), nodes[w].value.data());
                let gm = MatRef::row_major(g, dout);
                gemm(rows, dout, din, gm, MatRef::row_major(dw, dout).transposed(), slot(grads, nodes, x), true);
                gemm(din, rows, dout, MatRef::row_major(dx, din).transposed(), gm, slot(grads, nodes, w), true);
                if let Some(b) = bias {
                    let gb = slot(grads, nodes, b);
                    for row in g.chunks(dout) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                add_into(slot(grads, nodes, a), g);
                add_into(slot(grads, nodes, b), g);
            }
            &Op::Sub(a, b) => {
                add_into(slot(grads, nodes, a), g);
                slot(grads, nodes, b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            &Op::Mul(a, b) => {
                let (da, db) = (nodes[a].value.data(), nodes[b].value.data());
                slot(grads, nodes, a).iter_mut().zip(g.iter().zip(db)).for_each(|(x, (y, v))| *x += y * v);
                slot(grads, nodes, b).iter_mut().zip(g.iter().zip(da)).for_each(|(x, (y, v))| *x += y * v);
            }
            &Op::Scale(a, s) => slot(grads, nodes, a).iter_mut().zip(g).for_each(|(x, y)| *x += s * y),
            &Op::Reshape(a) => add_into(slot(grads, nodes, a), g),
            &Op::SwapAxes { a, i, j } => {
                let in_shape = nodes[a].value.shape();
                let [pre, si, mid, sj, post] = swap_dims(in_shape, i, j);
                let back = swap_block(g, [pre, sj, mid, si, post]);
                add_into(slot(grads, nodes, a), &back);
            }
            &Op::MeanAxis { a, outer, n, inner, mean } => {
                let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                let ga = slot(grads, nodes, a);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for r in 0..n {
                        let dst = &mut ga[(o * n + r) * inner..(o * n + r + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += scale * y);
                    }
                }
            }
            &Op::Sum(a) => {
                let s = g[0];
                slot(grads, nodes, a).iter_mut().for_each(|x| *x += s);
            }
            &Op::Concat { a, b, da, db } => {
                let w = da + db;
                {
                    let ga = slot(grads, nodes, a);
                    for (dst, row) in ga.chunks_mut(da.max(1)).zip(g.chunks(w)) {
                        add_into(dst, &row[..da]);
                    }
                }
                let gb = slot(grads, nodes, b);
                for (dst, row) in gb.chunks_mut(db.max(1)).zip(g.chunks(w)) {
                    add_into(dst, &row[da..]);
                }
            }
            &Op::Softmax(a) => {
                let n = nodes[i].value.last_dim();
                let ga = slot(grads, nodes, a);
                for ((dst, p), gr) in ga.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((d, pv), gv) in dst.iter_mut().zip(p).zip(gr) {
                        *d += pv * (gv - dot);
                    }
                }
            }
            &Op::Silu(a) => {
                let da = nodes[a].value.data();
                slot(grads, nodes, a).iter_mut().zip(g.iter().zip(da)).for_each(|(x, (y, &v))| {
                    let s = sigmoid(v);
                    *x += y * s * (1.0 + v * (1.0 - s));
                });
            }
            &Op::Relu(a) => {
                let da = nodes[a].value.data();
                slot(grads, nodes, a).iter_mut().zip(g.iter().zip(da)).for_each(|(x, (y, &v))| {
                    if v > 0.0 {
                        *x += y;
                    }
                });
            }
            Op::RmsNorm { x, gain, eps, inv_rms } => {
                let (x, gain, eps) = (*x, *gain, *eps);
                let d = nodes[x].value.last_dim();
                let dx = nodes[x].value.data();
                let gv = nodes[gain].value.data();
                {
                    let gg = slot(grads, nodes, gain);
                    for ((xr, gr), &inv) in dx.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j] * inv;
                        }
                    }
                }
                let gx = slot(grads, nodes, x);
                for (((dst, xr), gr), &inv) in gx.chunks_mut(d).zip(dx.chunks(d)).zip(g.chunks(d)).zip(inv_rms) {
                    // a floored row has a constant scale
                    let dot = if 1.0 / inv <= eps {
                        0.0
                    } else {
                        (0..d).map(|j| gv[j] * gr[j] * xr[j] * inv).sum::<f64>() / d as f64
                    };
                    for j in 0..d {
                        dst[j] += inv * (gv[j] * gr[j] - xr[j] * inv * dot);
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                let ga = slot(grads, nodes, *a);
                for (j, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                    if !mask[j % mask.len()] {
                        *x += y;
                    }
                }
            }
            Op::Dropout { a, scale } => {
                slot(grads, nodes, *a).iter_mut().zip(g.iter().zip(scale)).for_each(|(x, (y, s))| *x += y * s);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = nodes[*logits].value.last_dim();
                let gl = slot(grads, nodes, *logits);
                for (r, (&t, &gr)) in targets.iter().zip(g).enumerate() {
                    for j in 0..n {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * n + j] += gr * (probs[r * n + j] - onehot);
                    }
                }
            }
            &Op::Repeat { a, times } => {
                let ga = slot(grads, nodes, a);
                let n = ga.len();
                for t in 0..times {
                    add_into(ga, &g[t * n..(t + 1) * n]);
                }
            }
            &Op::Index { a, at } => slot(grads, nodes, a)[at] += g[0],
            Op::Gather { a, idx } => {
                let n = nodes[*a].value.last_dim();
                let ga = slot(grads, nodes, *a);
                for (r, (&j, &gr)) in idx.iter().zip(g).enumerate() {
                    ga[r * n + j] += gr;
                }
            }
            Op::SelectRows { a, idx, block } => {
                let block = *block;
                let ga = slot(grads, nodes, *a);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * block..(i + 1) * block], &g[r * block..(r + 1) * block]);
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], idx: usize) -> &'a mut Vec<f64> {
    let n = nodes[idx].value.numel();
    grads[idx].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}
