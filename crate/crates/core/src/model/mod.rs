//! The in-context proposer network.
//!
//! A context of `C` labeled sequences is a `(C, L)` grid of tokens with three
//! input channels: normalized task id, prefix utility and normalized position.
//! The encoder alternates attention across the context axis (sequence
//! attention) and along positions (task attention), then mean-pools over the
//! context. A separate causal decoder reads the partial target sequence, and a
//! feed-forward head maps both streams to next-task logits.
//!
//! Axis convention: "task attention" runs along `L` because the decoder applies
//! causally masked task attention to a single sequence, which only makes sense
//! along positions. Sequence attention therefore runs along `C`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::LabeledSequence;
use crate::error::{invalid, Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var, RMS_EPS};
use crate::prior::{Sequence, TaskId};
use crate::rng::{seeded, Rng};

/// Input value of the similarity channel for decoder tokens, whose utility is unknown.
pub const UNKNOWN_SIMILARITY: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_tasks: usize,
    pub seq_len: usize,
    pub d_emb: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Width of the feed-forward layers in the blocks and the output head.
    pub hidden: usize,
    pub dropout: f64,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_tasks: 8,
            seq_len: 8,
            d_emb: 64,
            num_blocks: 12,
            num_heads: 8,
            hidden: 256,
            dropout: 0.05,
            temperature: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.num_tasks == 0 || self.seq_len == 0 {
            return fail("num_tasks and seq_len must be positive".into());
        }
        if self.num_tasks >= u16::MAX as usize {
            return fail(format!("num_tasks {} too large", self.num_tasks));
        }
        if self.num_heads == 0 || self.d_emb == 0 || !self.d_emb.is_multiple_of(self.num_heads) {
            return fail(format!("d_emb {} must be a positive multiple of num_heads {}", self.d_emb, self.num_heads));
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be at least 1".into());
        }
        if self.hidden < self.d_emb {
            return fail(format!("hidden {} must be at least d_emb {}", self.hidden, self.d_emb));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_emb / self.num_heads
    }

    /// The begin-of-sequence id.
    pub fn bos(&self) -> usize {
        self.num_tasks
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm_pre: ParamId,
    norm_post: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    w3: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
struct EncBlock {
    seq: AttnIds,
    task: AttnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecBlock {
    task: AttnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    w_in: ParamId,
    b_in: ParamId,
    enc: Vec<EncBlock>,
    enc_norm: ParamId,
    dec: Vec<DecBlock>,
    dec_norm: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(self.rng)).collect();
        self.store.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    fn fill(&mut self, name: String, n: usize, value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(&[n], value))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.weight(format!("{prefix}.wq"), d, d)?,
            wk: self.weight(format!("{prefix}.wk"), d, d)?,
            wv: self.weight(format!("{prefix}.wv"), d, d)?,
            wo: self.weight(format!("{prefix}.wo"), d, d)?,
            norm_pre: self.fill(format!("{prefix}.norm_pre"), d, 1.0)?,
            norm_post: self.fill(format!("{prefix}.norm_post"), d, 1.0)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, h: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.weight(format!("{prefix}.w1"), d, h)?,
            w3: self.weight(format!("{prefix}.w3"), d, h)?,
            w2: self.weight(format!("{prefix}.w2"), h, d)?,
        })
    }
}

/// Model weights plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct Pftsn {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Pftsn {
    /// Fresh weights: normal with std `1/sqrt(fan_in)`, unit norm gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let (d, h, n) = (config.d_emb, config.hidden, config.num_tasks);
        let w_in = b.weight("in.w".into(), 3, d)?;
        let b_in = b.fill("in.b".into(), d, 0.0)?;
        let mut enc = Vec::with_capacity(config.num_blocks);
        for k in 0..config.num_blocks {
            enc.push(EncBlock {
                seq: b.attn(&format!("enc.{k}.seq"), d)?,
                task: b.attn(&format!("enc.{k}.task"), d)?,
                ffn: b.ffn(&format!("enc.{k}.ffn"), d, h)?,
            });
        }
        let enc_norm = b.fill("enc.norm".into(), d, 1.0)?;
        let mut dec = Vec::with_capacity(config.num_blocks);
        for k in 0..config.num_blocks {
            dec.push(DecBlock { task: b.attn(&format!("dec.{k}.task"), d)?, ffn: b.ffn(&format!("dec.{k}.ffn"), d, h)? });
        }
        let dec_norm = b.fill("dec.norm".into(), d, 1.0)?;
        let head_w1 = b.weight("head.w1".into(), 2 * d, h)?;
        let head_b1 = b.fill("head.b1".into(), h, 0.0)?;
        let head_w2 = b.weight("head.w2".into(), h, n)?;
        let head_b2 = b.fill("head.b2".into(), n, 0.0)?;
        let layout = Layout { w_in, b_in, enc, enc_norm, dec, dec_norm, head_w1, head_b1, head_w2, head_b2 };
        Ok(Self { config, params: b.store, layout })
    }

    /// Rebuilds the architecture for `config` and installs `params`, which must match it
    /// name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.copy_values_from(params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets every weight and bias of the output head to zero, making all logits zero.
    pub fn zero_head(&mut self) {
        let l = &self.layout;
        for id in [l.head_w1, l.head_b1, l.head_w2, l.head_b2] {
            self.params.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    /// Binds the model's own weights to `tape`. Passing `rng` enables dropout.
    pub fn bind<'m>(&'m self, tape: &mut Tape, rng: Option<Rng>) -> Forward<'m> {
        self.bind_with(tape, &self.params, rng)
    }

    /// Binds substitute weights (same layout) to `tape`; used for finite differences.
    pub fn bind_with<'m>(&'m self, tape: &mut Tape, params: &ParamStore, rng: Option<Rng>) -> Forward<'m> {
        let vars = (0..params.len()).map(|i| tape.param(params, ParamId(i))).collect();
        Forward { config: &self.config, layout: &self.layout, vars, rng }
    }

    /// `X_att` for a batch of equally sized contexts, shape `(B, L, d_emb)`.
    pub fn encoded_context(&self, contexts: &[&[LabeledSequence]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = encode_inputs(contexts, self.config.num_tasks, self.config.seq_len)?;
        let mut f = self.bind(&mut tape, None);
        let xv = tape.leaf(x);
        let out = f.encode_context(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Decoder output `T_att` for BOS-prefixed id rows, shape `(R, L, d_emb)`.
    pub fn encoded_target(&self, prefixes: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut f = self.bind(&mut tape, None);
        let out = f.encode_target(&mut tape, prefixes)?;
        Ok(tape.value(out).clone())
    }

    /// `-log p(target | context)` under teacher forcing, summed over positions.
    pub fn nll_of_target(&self, context: &[LabeledSequence], target: &[TaskId]) -> Result<f64> {
        let mut tape = Tape::new();
        let x = encode_inputs(&[context], self.config.num_tasks, self.config.seq_len)?;
        let mut f = self.bind(&mut tape, None);
        let xv = tape.leaf(x);
        let x_att = f.encode_context(&mut tape, xv)?;
        let nll = f.nll(&mut tape, x_att, &[0], &[target])?;
        Ok(tape.value(nll).data()[0])
    }

    /// Samples one sequence autoregressively. Logits are divided by `temperature` before
    /// the softmax; `greedy` takes the arg-max instead (lowest id on ties).
    pub fn generate(&self, context: &[LabeledSequence], temperature: f64, greedy: bool, rng: &mut Rng) -> Result<Sequence> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(invalid(format!("temperature must be positive, got {temperature}")));
        }
        let (n, l) = (self.config.num_tasks, self.config.seq_len);
        let mut tape = Tape::new();
        let x = encode_inputs(&[context], n, l)?;
        let mut f = self.bind(&mut tape, None);
        let xv = tape.leaf(x);
        let x_att = f.encode_context(&mut tape, xv)?;
        let mut out: Sequence = Vec::with_capacity(l);
        for k in 0..l {
            let mut prefix = vec![0; l];
            prefix[0] = self.config.bos();
            for (j, t) in out.iter().enumerate() {
                prefix[j + 1] = t.index();
            }
            let t_att = f.encode_target(&mut tape, &[prefix])?;
            let logits = f.predict_logits(&mut tape, t_att, x_att)?;
            let row = &tape.value(logits).data()[k * n..(k + 1) * n];
            let pick = if greedy { argmax(row) } else { sample_softmax(row, temperature, rng) };
            out.push(TaskId(pick as u16));
        }
        Ok(out)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Position `k` (0-based) scaled to `[0, 1]`.
fn position(k: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        k as f64 / (len - 1) as f64
    }
}

/// Stacks contexts into `(B, C, L, 3)`: channel 0 is `id / N`, channel 1 the prefix
/// utility and channel 2 the normalized position. All contexts must have the same size.
pub fn encode_inputs(contexts: &[&[LabeledSequence]], num_tasks: usize, seq_len: usize) -> Result<Tensor> {
    let Some(first) = contexts.first() else {
        return Err(invalid("encode_inputs: empty batch"));
    };
    let c = first.len();
    if c == 0 {
        return Err(invalid("encode_inputs: empty context"));
    }
    let mut data = Vec::with_capacity(contexts.len() * c * seq_len * 3);
    for (b, ctx) in contexts.iter().enumerate() {
        if ctx.len() != c {
            return Err(invalid(format!("encode_inputs: context {b} has {} sequences, expected {c}", ctx.len())));
        }
        for s in ctx.iter() {
            if s.tasks.len() != seq_len || s.utility.len() != seq_len {
                return Err(invalid(format!(
                    "encode_inputs: sequence of length {} (utility {}), expected {seq_len}",
                    s.tasks.len(),
                    s.utility.len()
                )));
            }
            for (k, (t, u)) in s.tasks.iter().zip(s.utility.values()).enumerate() {
                if t.index() >= num_tasks {
                    return Err(invalid(format!("encode_inputs: task id {} >= {num_tasks}", t.index())));
                }
                data.extend([t.index() as f64 / num_tasks as f64, *u, position(k, seq_len)]);
            }
        }
    }
    Tensor::new(vec![contexts.len(), c, seq_len, 3], data)
}

/// Decoder input `(R, L, 3)` for BOS-prefixed id rows.
pub fn encode_prefixes(prefixes: &[Vec<usize>], num_tasks: usize) -> Result<Tensor> {
    let Some(first) = prefixes.first() else {
        return Err(invalid("encode_target: empty batch"));
    };
    let l = first.len();
    let mut data = Vec::with_capacity(prefixes.len() * l * 3);
    for p in prefixes {
        if p.len() != l || l == 0 {
            return Err(invalid(format!("encode_target: prefix of length {}, expected {l}", p.len())));
        }
        if p[0] != num_tasks {
            return Err(invalid(format!("encode_target: prefix must start with BOS id {num_tasks}, got {}", p[0])));
        }
        for (k, &id) in p.iter().enumerate() {
            if id > num_tasks || (k > 0 && id == num_tasks) {
                return Err(invalid(format!("encode_target: bad id {id} at position {k}")));
            }
            data.extend([id as f64 / num_tasks as f64, UNKNOWN_SIMILARITY, position(k, l)]);
        }
    }
    Tensor::new(vec![prefixes.len(), l, 3], data)
}

/// Teacher-forcing prefix: BOS followed by the target without its last task.
pub fn teacher_prefix(target: &[TaskId], num_tasks: usize) -> Vec<usize> {
    let mut p = Vec::with_capacity(target.len());
    p.push(num_tasks);
    p.extend(target.iter().take(target.len().saturating_sub(1)).map(|t| t.index()));
    p
}

/// Causal mask for `len` tokens: `true` marks a future key.
fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len > i / len).collect()
}

/// Model weights bound to one tape, with the forward building blocks.
pub struct Forward<'m> {
    config: &'m ModelConfig,
    layout: &'m Layout,
    vars: Vec<Var>,
    rng: Option<Rng>,
}

impl Forward<'_> {
    fn p(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dropout(x, self.config.dropout, self.rng.as_mut())
    }

    /// Multi-head self-attention over the middle axis of `x: (G, T, d)`.
    fn mha(&mut self, tape: &mut Tape, x: Var, ids: &AttnIds, mask: Option<&[bool]>) -> Result<Var> {
        let (g, t) = (tape.shape(x)[0], tape.shape(x)[1]);
        let (h, dh, d) = (self.config.num_heads, self.config.d_head(), self.config.d_emb);
        let heads = |tape: &mut Tape, w: Var| -> Result<Var> {
            let y = tape.linear(x, w, None)?;
            let y = tape.reshape(y, &[g, t, h, dh])?;
            let y = tape.swap_axes(y, 1, 2)?;
            tape.reshape(y, &[g * h, t, dh])
        };
        let q = heads(tape, self.p(ids.wq))?;
        let k = heads(tape, self.p(ids.wk))?;
        let v = heads(tape, self.p(ids.wv))?;
        let kt = tape.swap_axes(k, 1, 2)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.masked_fill(scores, m, f64::NEG_INFINITY)?;
        }
        let attn = tape.softmax_last(scores);
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.reshape(ctx, &[g, h, t, dh])?;
        let ctx = tape.swap_axes(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &[g, t, d])?;
        let out = tape.linear(ctx, self.p(ids.wo), None)?;
        self.dropout(tape, out)
    }

    /// `RMSNorm(x + MHA(RMSNorm(x)))`.
    fn attn_sublayer(&mut self, tape: &mut Tape, x: Var, ids: &AttnIds, mask: Option<&[bool]>) -> Result<Var> {
        let pre = tape.rms_norm(x, self.p(ids.norm_pre), RMS_EPS)?;
        let a = self.mha(tape, pre, ids, mask)?;
        let r = tape.add(x, a)?;
        tape.rms_norm(r, self.p(ids.norm_post), RMS_EPS)
    }

    /// `x + W2(SiLU(W1 x) * W3 x)` over the last axis.
    fn ffn(&mut self, tape: &mut Tape, x: Var, ids: &FfnIds) -> Result<Var> {
        let a = tape.linear(x, self.p(ids.w1), None)?;
        let a = tape.silu(a);
        let b = tape.linear(x, self.p(ids.w3), None)?;
        let gated = tape.mul(a, b)?;
        let out = tape.linear(gated, self.p(ids.w2), None)?;
        let out = self.dropout(tape, out)?;
        tape.add(x, out)
    }

    /// One encoder block on `(B, C, L, d)`: sequence attention along `C`, task attention
    /// along `L`, then the gated feed-forward layer.
    pub fn axial_block(&mut self, tape: &mut Tape, x: Var, index: usize) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.config.d_emb {
            return Err(Error::ShapeMismatch { op: "axial_block", left: shape, right: vec![0, 0, 0, self.config.d_emb] });
        }
        let layout = self.layout;
        let block = layout.enc.get(index).ok_or_else(|| invalid(format!("no encoder block {index}")))?;
        let (b, c, l, d) = (shape[0], shape[1], shape[2], shape[3]);
        let xs = tape.swap_axes(x, 1, 2)?;
        let xs = tape.reshape(xs, &[b * l, c, d])?;
        let xs = self.attn_sublayer(tape, xs, &block.seq, None)?;
        let xs = tape.reshape(xs, &[b, l, c, d])?;
        let xt = tape.swap_axes(xs, 1, 2)?;
        let xt = tape.reshape(xt, &[b * c, l, d])?;
        let xt = self.attn_sublayer(tape, xt, &block.task, None)?;
        let y = self.ffn(tape, xt, &block.ffn)?;
        tape.reshape(y, &[b, c, l, d])
    }

    /// `(B, C, L, 3)` inputs to `X_att: (B, L, d)`.
    pub fn encode_context(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != 3 || shape[2] != self.config.seq_len {
            return Err(Error::ShapeMismatch { op: "encode_context", left: shape, right: vec![0, 0, self.config.seq_len, 3] });
        }
        let mut h = tape.linear(x, self.p(self.layout.w_in), Some(self.p(self.layout.b_in)))?;
        for k in 0..self.config.num_blocks {
            h = self.axial_block(tape, h, k)?;
        }
        let h = tape.rms_norm(h, self.p(self.layout.enc_norm), RMS_EPS)?;
        tape.mean_axis(h, 1)
    }

    /// BOS-prefixed id rows `(R, L)` to `T_att: (R, L, d)` through the causal stack.
    pub fn encode_target(&mut self, tape: &mut Tape, prefixes: &[Vec<usize>]) -> Result<Var> {
        let t = encode_prefixes(prefixes, self.config.num_tasks)?;
        let l = t.shape()[1];
        let t = tape.leaf(t);
        let mask = causal_mask(l);
        let mut h = tape.linear(t, self.p(self.layout.w_in), Some(self.p(self.layout.b_in)))?;
        let layout = self.layout;
        for block in &layout.dec {
            h = self.attn_sublayer(tape, h, &block.task, Some(&mask))?;
            h = self.ffn(tape, h, &block.ffn)?;
        }
        tape.rms_norm(h, self.p(self.layout.dec_norm), RMS_EPS)
    }

    /// Concatenates `T_att` and `X_att` per position and maps them to `(R, L, N)` logits.
    pub fn predict_logits(&mut self, tape: &mut Tape, t_att: Var, x_att: Var) -> Result<Var> {
        let (st, sx) = (tape.shape(t_att), tape.shape(x_att));
        if st != sx {
            return Err(Error::ShapeMismatch { op: "predict_logits", left: st.to_vec(), right: sx.to_vec() });
        }
        let z = tape.concat_last(t_att, x_att)?;
        let h = tape.linear(z, self.p(self.layout.head_w1), Some(self.p(self.layout.head_b1)))?;
        let h = tape.silu(h);
        tape.linear(h, self.p(self.layout.head_w2), Some(self.p(self.layout.head_b2)))
    }

    /// Teacher-forced NLL of each target, shape `(R)`. Target `r` is scored against
    /// context row `rows[r]` of `x_att`.
    pub fn nll(&mut self, tape: &mut Tape, x_att: Var, rows: &[usize], targets: &[&[TaskId]]) -> Result<Var> {
        if rows.len() != targets.len() || targets.is_empty() {
            return Err(invalid("nll: rows and targets must be nonempty and of equal length"));
        }
        let (n, l) = (self.config.num_tasks, self.config.seq_len);
        let mut ids = Vec::with_capacity(targets.len() * l);
        for t in targets {
            if t.len() != l {
                return Err(invalid(format!("nll: target of length {}, expected {l}", t.len())));
            }
            ids.extend(t.iter().map(|t| t.index()));
        }
        let prefixes: Vec<Vec<usize>> = targets.iter().map(|t| teacher_prefix(t, n)).collect();
        let t_att = self.encode_target(tape, &prefixes)?;
        let x_rows = tape.select_rows(x_att, rows)?;
        let logits = self.predict_logits(tape, t_att, x_rows)?;
        let flat = tape.reshape(logits, &[targets.len() * l, n])?;
        let ce = tape.cross_entropy(flat, &ids)?;
        let ce = tape.reshape(ce, &[targets.len(), l])?;
        tape.sum_axis(ce, 1)
    }
}

#[cfg(test)]
mod tests;
