//! Meta-training over a stream of sampled problems.
//!
//! Every step draws a fresh batch of problems from the prior, builds one
//! context per problem with a context size shared across the batch, and
//! minimizes the teacher-forced negative log-likelihood of the closest optimal
//! sequence. Work is split into micro-batches whose gradients are summed in a
//! fixed order, so results do not depend on the worker count.

use std::time::Instant;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::context::{build_context_of_size, LabeledSequence};
use crate::error::{invalid, Error, Result};
use crate::model::{encode_inputs, Pftsn};
use crate::numerics::{warmup_lr, AdamW, AdamWConfig, ParamStore, Tape, Var};
use crate::prior::{sample_problem, PriorConfig, Sequence, TaskId, TsProblem};
use crate::rng::{derive_seed, derived, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub c_min: usize,
    pub c_max: usize,
    /// Upper bound on the optimal sequences scored per problem (`M`).
    pub min_over_optimal_cap: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Problems per gradient tape; bounds memory, not the effective batch.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 1024,
            lr: 1e-3,
            warmup_steps: 500,
            weight_decay: 1e-3,
            c_min: 4,
            c_max: 16,
            min_over_optimal_cap: 8,
            seed: 0,
            checkpoint_every: 1000,
            micro_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return fail("steps must be at least 1");
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return fail("batch_size and micro_batch must be positive");
        }
        if self.min_over_optimal_cap == 0 {
            return fail("min_over_optimal_cap must be at least 1");
        }
        if self.c_min == 0 || self.c_max < self.c_min {
            return fail("need 1 <= c_min <= c_max");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("lr and weight_decay must be non-negative");
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1");
        }
        Ok(())
    }
}

/// One training example: a context and the optimal set it was drawn for.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub context: &'a [LabeledSequence],
    pub optimal: &'a [Sequence],
}

/// Indices into `optimal` scored for one problem: all of them when at most `m`, else `m`
/// distinct uniform draws.
pub fn candidate_indices(num_optimal: usize, m: usize, rng: &mut Rng) -> Vec<usize> {
    if num_optimal <= m {
        (0..num_optimal).collect()
    } else {
        index::sample(rng, num_optimal, m).into_vec()
    }
}

/// Batch loss: the mean over examples of the minimum teacher-forced NLL across each
/// example's candidate optimal sequences.
///
/// The context is encoded once on `tape`. Candidates are then decoded without dropout
/// on a scratch tape, and only the arg-min (lowest candidate index on ties) is rebuilt
/// on `tape`, so gradients flow only through the selected branch. Returns the loss variable and the per-example minima.
pub fn loss_min_over_optimal(
    model: &Pftsn,
    params: &ParamStore,
    tape: &mut Tape,
    examples: &[Example<'_>],
    m: usize,
    rng: &mut Rng,
    dropout: Option<Rng>,
) -> Result<(Var, Vec<f64>)> {
    if examples.is_empty() {
        return Err(invalid("loss_min_over_optimal: empty batch"));
    }
    let cfg = model.config();
    let contexts: Vec<&[LabeledSequence]> = examples.iter().map(|e| e.context).collect();
    let x = encode_inputs(&contexts, cfg.num_tasks, cfg.seq_len)?;

    let mut rows = Vec::new();
    let mut cands: Vec<&[TaskId]> = Vec::new();
    let mut spans = Vec::with_capacity(examples.len());
    for (b, e) in examples.iter().enumerate() {
        if e.optimal.is_empty() {
            return Err(invalid(format!("loss_min_over_optimal: example {b} has no optimal sequence")));
        }
        let start = cands.len();
        for i in candidate_indices(e.optimal.len(), m, rng) {
            rows.push(b);
            cands.push(&e.optimal[i]);
        }
        spans.push(start..cands.len());
    }

    let mut f = model.bind_with(tape, params, dropout);
    let xv = tape.leaf(x);
    let x_att = f.encode_context(tape, xv)?;

    let chosen: Vec<usize> = if cands.len() == examples.len() {
        spans.iter().map(|s| s.start).collect()
    } else {
        let mut scratch = Tape::new();
        let mut g = model.bind_with(&mut scratch, params, None);
        let xs = scratch.leaf(tape.value(x_att).clone());
        let nll = g.nll(&mut scratch, xs, &rows, &cands)?;
        let values = scratch.value(nll).data();
        spans
            .iter()
            .map(|s| {
                let mut best = s.start;
                for i in s.clone() {
                    if values[i] < values[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    };

    let targets: Vec<&[TaskId]> = chosen.iter().map(|&i| cands[i]).collect();
    let own_rows: Vec<usize> = (0..examples.len()).collect();
    let nll = f.nll(tape, x_att, &own_rows, &targets)?;
    let minima = tape.value(nll).data().to_vec();
    let total = tape.sum(nll);
    let loss = tape.scale(total, 1.0 / examples.len() as f64);
    Ok((loss, minima))
}

/// Minimum NLL over the candidate optimal sequences of one context, without dropout.
pub fn min_nll(model: &Pftsn, context: &[LabeledSequence], optimal: &[Sequence], m: usize, rng: &mut Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let ex = [Example { context, optimal }];
    let (_, minima) = loss_min_over_optimal(model, model.params(), &mut tape, &ex, m, rng, None)?;
    Ok(minima[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Progress notifications from [`meta_train`].
pub enum TrainEvent<'a> {
    Step(&'a LogRecord),
    Checkpoint { step: u64, model: &'a Pftsn },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Pftsn,
    pub log: Vec<LogRecord>,
    pub skipped_steps: u64,
}

/// Header line of the training log.
pub fn log_header(prior: &PriorConfig, train: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "header": {
            "schedule": "linear warmup to lr, then constant (stand-in for a schedule-free optimizer)",
            "optimizer": "adamw",
            "prior": prior,
            "train": train,
        }
    })
}

/// Where each step's problems come from.
pub enum ProblemSource<'a> {
    /// Fresh problems from the prior every step.
    Prior,
    /// A fixed pool, consumed in order and wrapped around.
    Pool(&'a [TsProblem]),
}

struct StepPlan {
    step: u64,
    c: usize,
}

/// Runs `train.steps` optimizer steps starting from `model`.
///
/// `workers` > 1 spreads micro-batches over threads; gradients are still summed in
/// micro-batch order, so the result is independent of `workers`.
pub fn meta_train(
    prior: &PriorConfig,
    train: &TrainConfig,
    mut model: Pftsn,
    source: ProblemSource<'_>,
    workers: usize,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    prior.validate()?;
    train.validate()?;
    let cfg = model.config().clone();
    if cfg.num_tasks != prior.num_tasks || cfg.seq_len != prior.seq_len {
        return Err(Error::InvalidConfig(format!(
            "model is built for N={}, L={} but the prior has N={}, L={}",
            cfg.num_tasks, cfg.seq_len, prior.num_tasks, prior.seq_len
        )));
    }
    if let ProblemSource::Pool(pool) = source {
        if pool.is_empty() {
            return Err(invalid("training pool is empty"));
        }
    }
    let adam = AdamWConfig { weight_decay: train.weight_decay, ..Default::default() };
    let mut opt = AdamW::new(adam, model.params());
    let started = Instant::now();
    let mut log = Vec::with_capacity(train.steps as usize);
    let mut skipped = 0u64;
    let max_skipped = (train.steps as f64 * 0.01).floor() as u64;

    for step in 1..=train.steps {
        let step_seed = derive_seed(train.seed, step);
        let c = derived(step_seed, u64::MAX).gen_range(train.c_min..=train.c_max);
        let plan = StepPlan { step, c };
        let (loss, grads) = step_gradients(prior, train, &model, &source, &plan, workers)?;
        let lr = warmup_lr(train.lr, train.warmup_steps, step);
        let finite = loss.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if finite {
            let params = model.params_mut();
            for (p, g) in params.iter_mut().zip(&grads) {
                p.grad.copy_from_slice(g);
            }
            opt.step(params, lr)?;
        } else {
            skipped += 1;
            if skipped > max_skipped {
                return Err(Error::TrainingAborted(format!(
                    "{skipped} of {} steps had a non-finite loss or gradient",
                    train.steps
                )));
            }
        }
        let record = LogRecord { step, loss, lr, seconds: started.elapsed().as_secs_f64() };
        on_event(TrainEvent::Step(&record))?;
        log.push(record);
        if step % train.checkpoint_every == 0 || step == train.steps {
            on_event(TrainEvent::Checkpoint { step, model: &model })?;
        }
    }
    Ok(TrainOutcome { model, log, skipped_steps: skipped })
}

/// Loss and summed gradients of one step, one buffer per parameter.
fn step_gradients(
    prior: &PriorConfig,
    train: &TrainConfig,
    model: &Pftsn,
    source: &ProblemSource<'_>,
    plan: &StepPlan,
    workers: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let b = train.batch_size;
    let chunks: Vec<std::ops::Range<usize>> =
        (0..b).step_by(train.micro_batch).map(|s| s..(s + train.micro_batch).min(b)).collect();
    let results: Vec<Result<(f64, ParamStore)>> = if workers <= 1 || chunks.len() == 1 {
        chunks.iter().enumerate().map(|(i, r)| micro_step(prior, train, model, source, plan, i, r.clone())).collect()
    } else {
        let mut out: Vec<Option<Result<(f64, ParamStore)>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let slots: Vec<_> = out.chunks_mut(chunks.len().div_ceil(workers)).collect();
            let mut start = 0;
            for slot in slots {
                let len = slot.len();
                let first = start;
                start += len;
                let chunks = &chunks;
                s.spawn(move || {
                    for (j, cell) in slot.iter_mut().enumerate() {
                        let i = first + j;
                        *cell = Some(micro_step(prior, train, model, source, plan, i, chunks[i].clone()));
                    }
                });
            }
        });
        out.into_iter().map(|r| r.expect("every chunk ran")).collect()
    };
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.grad.len()]).collect();
    for r in results {
        let (l, store) = r?;
        loss += l;
        for (acc, p) in grads.iter_mut().zip(store.iter()) {
            acc.iter_mut().zip(&p.grad).for_each(|(a, g)| *a += g);
        }
    }
    Ok((loss, grads))
}

/// Problems for batch positions `range` of one step. Each position has its own seed
/// stream, so the batch does not depend on how it is chunked.
fn make_examples(
    prior: &PriorConfig,
    train: &TrainConfig,
    source: &ProblemSource<'_>,
    plan: &StepPlan,
    range: std::ops::Range<usize>,
) -> Result<Vec<(TsProblem, Vec<LabeledSequence>)>> {
    let step_seed = derive_seed(train.seed, plan.step);
    range
        .map(|i| {
            let mut rng = derived(step_seed, i as u64);
            let problem = match source {
                ProblemSource::Prior => sample_problem(prior, &mut rng)?,
                ProblemSource::Pool(pool) => {
                    let at = ((plan.step - 1) as usize * train.batch_size + i) % pool.len();
                    pool[at].clone()
                }
            };
            let ctx = build_context_of_size(&problem, plan.c, train.c_min, train.c_max, &mut rng)?;
            Ok((problem, ctx.sequences))
        })
        .collect()
}

fn micro_step(
    prior: &PriorConfig,
    train: &TrainConfig,
    model: &Pftsn,
    source: &ProblemSource<'_>,
    plan: &StepPlan,
    chunk: usize,
    range: std::ops::Range<usize>,
) -> Result<(f64, ParamStore)> {
    let n = range.len();
    let data = make_examples(prior, train, source, plan, range)?;
    let examples: Vec<Example<'_>> =
        data.iter().map(|(p, c)| Example { context: c, optimal: &p.optimal }).collect();
    // offset keeps chunk streams apart from the per-position streams of make_examples
    let chunk_seed = derive_seed(derive_seed(train.seed, plan.step), (1 << 32) + chunk as u64);
    let mut pick_rng = derived(chunk_seed, 0);
    let dropout = (model.config().dropout > 0.0).then(|| derived(chunk_seed, 1));
    let mut store = model.params().clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let (loss, _) = loss_min_over_optimal(model, &store, &mut tape, &examples, train.min_over_optimal_cap, &mut pick_rng, dropout)?;
    let weight = n as f64 / train.batch_size as f64;
    let scaled = tape.scale(loss, weight);
    let value = tape.value(scaled).item();
    if value.is_finite() {
        tape.backward_into(scaled, &mut store)?;
    }
    Ok((value, store))
}

/// Mean of `values[i - w + 1 ..= i]` for every `i`.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
