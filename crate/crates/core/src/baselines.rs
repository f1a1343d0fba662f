//! Searchers without meta-training: uniform random, the lock-and-prune rule,
//! and a double deep Q-network.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::context::random_sequence;
use crate::error::{invalid, Error, Result};
use crate::numerics::{AdamW, AdamWConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::prior::{Sequence, TaskId};
use crate::rng::{seeded, Rng};
use crate::utility::UtilityVector;

/// A proposer driven only by its own observations.
///
/// `observe` is called once for every evaluated sequence, including the initial
/// context, before the next `propose`.
pub trait Strategy {
    fn name(&self) -> &str;
    fn propose(&mut self, rng: &mut Rng) -> Result<Sequence>;
    fn observe(&mut self, tasks: &[TaskId], utility: &UtilityVector) -> Result<()>;
}

fn check_observation(tasks: &[TaskId], utility: &UtilityVector, n: usize, l: usize) -> Result<()> {
    if tasks.len() != l || utility.len() != l {
        return Err(invalid(format!("observation of length {} with {} utilities, expected {l}", tasks.len(), utility.len())));
    }
    if let Some(t) = tasks.iter().find(|t| t.index() >= n) {
        return Err(invalid(format!("observed task {t} outside 0..{n}")));
    }
    Ok(())
}

pub fn random_propose(num_tasks: usize, seq_len: usize, rng: &mut Rng) -> Sequence {
    random_sequence(num_tasks, seq_len, rng)
}

#[derive(Clone, Debug)]
pub struct RandomSearch {
    num_tasks: usize,
    seq_len: usize,
}

impl RandomSearch {
    pub fn new(num_tasks: usize, seq_len: usize) -> Self {
        Self { num_tasks, seq_len }
    }
}

impl Strategy for RandomSearch {
    fn name(&self) -> &str {
        "random"
    }

    fn propose(&mut self, rng: &mut Rng) -> Result<Sequence> {
        Ok(random_propose(self.num_tasks, self.seq_len, rng))
    }

    fn observe(&mut self, tasks: &[TaskId], utility: &UtilityVector) -> Result<()> {
        check_observation(tasks, utility, self.num_tasks, self.seq_len)
    }
}

/// Lock-and-prune state. The locked prefix is known to start some optimal sequence;
/// `candidates` are the tasks not yet ruled out for the position right after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleState {
    pub num_tasks: usize,
    pub seq_len: usize,
    pub locked_prefix: Sequence,
    pub candidates: BTreeSet<TaskId>,
}

impl RuleState {
    pub fn new(num_tasks: usize, seq_len: usize) -> Self {
        Self { num_tasks, seq_len, locked_prefix: Vec::new(), candidates: all_tasks(num_tasks) }
    }

    pub fn is_complete(&self) -> bool {
        self.locked_prefix.len() == self.seq_len
    }
}

fn all_tasks(n: usize) -> BTreeSet<TaskId> {
    (0..n).map(|i| TaskId(i as u16)).collect()
}

/// Lock, then one candidate for the next position, then uniform fill.
pub fn rule_propose(state: &RuleState, rng: &mut Rng) -> Result<Sequence> {
    let mut out = state.locked_prefix.clone();
    if state.is_complete() {
        return Ok(out);
    }
    if state.candidates.is_empty() {
        return Err(Error::Strategy("rule-based search has no candidates left".into()));
    }
    let pick = rng.gen_range(0..state.candidates.len());
    out.push(*state.candidates.iter().nth(pick).expect("index in range"));
    while out.len() < state.seq_len {
        out.push(TaskId(rng.gen_range(0..state.num_tasks) as u16));
    }
    Ok(out)
}

/// Updates the lock from one observation.
///
/// A longer all-ones prefix extends the lock and resets the candidates. A sequence that
/// kept the lock but failed at the next position rules out the task it placed there.
pub fn rule_observe(state: &mut RuleState, tasks: &[TaskId], u: &UtilityVector) -> Result<()> {
    check_observation(tasks, u, state.num_tasks, state.seq_len)?;
    let k = u.matched_prefix();
    let lock = state.locked_prefix.len();
    if k > lock {
        state.locked_prefix = tasks[..k].to_vec();
        state.candidates = all_tasks(state.num_tasks);
    } else if k == lock && lock < state.seq_len && tasks[..lock] == state.locked_prefix[..] {
        state.candidates.remove(&tasks[lock]);
        if state.candidates.is_empty() {
            return Err(Error::Strategy(format!(
                "every continuation of the locked prefix {:?} was ruled out; utilities are inconsistent with the lock",
                state.locked_prefix
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RuleBased {
    pub state: RuleState,
}

impl RuleBased {
    pub fn new(num_tasks: usize, seq_len: usize) -> Self {
        Self { state: RuleState::new(num_tasks, seq_len) }
    }
}

impl Strategy for RuleBased {
    fn name(&self) -> &str {
        "rule"
    }

    fn propose(&mut self, rng: &mut Rng) -> Result<Sequence> {
        rule_propose(&self.state, rng)
    }

    fn observe(&mut self, tasks: &[TaskId], utility: &UtilityVector) -> Result<()> {
        rule_observe(&mut self.state, tasks, utility)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdqnConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Gradient updates between target-network copies.
    pub sync_every: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub gamma: f64,
    /// Gradient updates after each observation, once the buffer holds a batch.
    pub updates_per_observation: usize,
    /// Reward only the final step with the scalar utility instead of per-prefix rewards.
    pub terminal_reward: bool,
    pub seed: u64,
}

impl Default for DdqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 1e-3,
            batch_size: 32,
            buffer_capacity: 10_000,
            sync_every: 100,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            gamma: 1.0,
            updates_per_observation: 16,
            terminal_reward: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: VecDeque::new() }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` draws with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

/// State after `t` placed tasks: ids scaled `(id + 1) / (N + 1)` with zero padding,
/// followed by `t / L`.
pub fn encode_state(prefix: &[TaskId], num_tasks: usize, seq_len: usize) -> Vec<f64> {
    let mut s = vec![0.0; seq_len + 1];
    for (j, t) in prefix.iter().enumerate() {
        s[j] = (t.index() + 1) as f64 / (num_tasks + 1) as f64;
    }
    s[seq_len] = prefix.len() as f64 / seq_len as f64;
    s
}

/// The `L` transitions of one evaluated sequence.
pub fn transitions(tasks: &[TaskId], u: &UtilityVector, num_tasks: usize, terminal_reward: bool) -> Vec<Transition> {
    let l = tasks.len();
    (0..l)
        .map(|t| {
            let reward = match (terminal_reward, t + 1 == l) {
                (false, _) => u.values()[t],
                (true, true) => u.scalar(),
                (true, false) => 0.0,
            };
            Transition {
                state: encode_state(&tasks[..t], num_tasks, l),
                action: tasks[t].index(),
                reward,
                next_state: encode_state(&tasks[..t + 1], num_tasks, l),
                done: t + 1 == l,
            }
        })
        .collect()
}

/// `r + gamma * Q_target(s', argmax_a Q_online(s', a))`, or `r` at episode end.
pub fn double_q_target(reward: f64, done: bool, gamma: f64, q_online_next: &[f64], q_target_next: &[f64]) -> f64 {
    if done {
        return reward;
    }
    let mut best = 0;
    for (a, &q) in q_online_next.iter().enumerate() {
        if q > q_online_next[best] {
            best = a;
        }
    }
    reward + gamma * q_target_next[best]
}

/// Epsilon-greedy rollout of `L` steps; `q` maps a state to one value per task.
pub fn rollout(mut q: impl FnMut(&[f64]) -> Vec<f64>, num_tasks: usize, seq_len: usize, epsilon: f64, rng: &mut Rng) -> Sequence {
    let mut out = Vec::with_capacity(seq_len);
    while out.len() < seq_len {
        let a = if rng.gen::<f64>() < epsilon {
            rng.gen_range(0..num_tasks)
        } else {
            let values = q(&encode_state(&out, num_tasks, seq_len));
            let mut best = 0;
            for (i, &v) in values.iter().enumerate() {
                if v > values[best] {
                    best = i;
                }
            }
            best
        };
        out.push(TaskId(a as u16));
    }
    out
}

/// A ReLU perceptron with a linear output layer.
#[derive(Clone, Debug)]
pub struct QNet {
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl QNet {
    pub fn new(input: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = input;
        for (i, &width) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * width).map(|_| rng.gen_range(-bound..bound) * 0.5).collect();
            let wid = params.add(format!("q.{i}.w"), Tensor::new(vec![fan_in, width], w)?)?;
            let bid = params.add(format!("q.{i}.b"), Tensor::zeros(&[width]))?;
            layers.push((wid, bid));
            fan_in = width;
        }
        Ok(Self { params, layers })
    }

    fn forward_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (tape.param(&self.params, w), tape.param(&self.params, b));
            h = tape.linear(h, wv, Some(bv))?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Q-values for a batch of states, one row per state.
    pub fn values(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let width = states.first().map_or(0, |s| s.len());
        let data = states.iter().flat_map(|s| s.iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![states.len(), width], data)?);
        let y = self.forward_on(&mut tape, x)?;
        let n = tape.shape(y)[1];
        Ok(tape.value(y).data().chunks(n).map(|r| r.to_vec()).collect())
    }
}

/// Double DQN: the online network picks the next action, the periodically synchronized
/// target network values it.
pub struct Ddqn {
    num_tasks: usize,
    seq_len: usize,
    config: DdqnConfig,
    online: QNet,
    target: QNet,
    optimizer: AdamW,
    buffer: ReplayBuffer,
    rng: Rng,
    total_proposals: usize,
    proposals: usize,
    updates: u64,
    skipped_updates: u64,
}

impl Ddqn {
    /// `total_proposals` sets the length of the linear epsilon decay.
    pub fn new(num_tasks: usize, seq_len: usize, total_proposals: usize, config: DdqnConfig) -> Result<Self> {
        if config.batch_size == 0 || config.sync_every == 0 {
            return Err(Error::InvalidConfig("ddqn batch_size and sync_every must be positive".into()));
        }
        let mut rng = seeded(config.seed);
        let online = QNet::new(seq_len + 1, &config.hidden, num_tasks, &mut rng)?;
        let target = online.clone();
        let optimizer = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &online.params);
        Ok(Self {
            num_tasks,
            seq_len,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            config,
            online,
            target,
            optimizer,
            rng,
            total_proposals,
            proposals: 0,
            updates: 0,
            skipped_updates: 0,
        })
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn online(&self) -> &QNet {
        &self.online
    }

    pub fn target(&self) -> &QNet {
        &self.target
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    /// Linear decay from start to end across the planned proposals.
    pub fn epsilon(&self) -> f64 {
        let c = &self.config;
        if self.total_proposals <= 1 {
            return c.epsilon_end;
        }
        let frac = (self.proposals as f64 / (self.total_proposals - 1) as f64).min(1.0);
        c.epsilon_start + (c.epsilon_end - c.epsilon_start) * frac
    }

    fn update(&mut self) -> Result<()> {
        let batch: Vec<Transition> = self.buffer.sample(self.config.batch_size, &mut self.rng).into_iter().cloned().collect();
        let next: Vec<&[f64]> = batch.iter().map(|t| t.next_state.as_slice()).collect();
        let q_online = self.online.values(&next)?;
        let q_target = self.target.values(&next)?;
        let y: Vec<f64> = batch
            .iter()
            .enumerate()
            .map(|(i, t)| double_q_target(t.reward, t.done, self.config.gamma, &q_online[i], &q_target[i]))
            .collect();

        let width = self.seq_len + 1;
        let mut tape = Tape::new();
        let states = batch.iter().flat_map(|t| t.state.iter().copied()).collect();
        let x = tape.leaf(Tensor::new(vec![batch.len(), width], states)?);
        let q = self.online.forward_on(&mut tape, x)?;
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let picked = tape.gather_last(q, &actions)?;
        let yv = tape.leaf(Tensor::from_vec(y));
        let diff = tape.sub(picked, yv)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        let loss = tape.scale(total, 0.5 / batch.len() as f64);
        if !tape.value(loss).item().is_finite() {
            self.skipped_updates += 1;
            return Ok(());
        }
        self.online.params.zero_grad();
        tape.backward_into(loss, &mut self.online.params)?;
        match self.optimizer.step(&mut self.online.params, self.config.lr) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => {
                self.skipped_updates += 1;
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.sync_every) {
            self.target.params.copy_values_from(&self.online.params)?;
        }
        Ok(())
    }
}

impl Strategy for Ddqn {
    fn name(&self) -> &str {
        "ddqn"
    }

    fn propose(&mut self, rng: &mut Rng) -> Result<Sequence> {
        let eps = self.epsilon();
        self.proposals += 1;
        let online = &self.online;
        let mut err = None;
        let s = rollout(
            |state| match online.values(&[state]) {
                Ok(mut v) => v.remove(0),
                Err(e) => {
                    err = Some(e);
                    vec![0.0; self.num_tasks]
                }
            },
            self.num_tasks,
            self.seq_len,
            eps,
            rng,
        );
        match err {
            Some(e) => Err(e),
            None => Ok(s),
        }
    }

    fn observe(&mut self, tasks: &[TaskId], utility: &UtilityVector) -> Result<()> {
        check_observation(tasks, utility, self.num_tasks, self.seq_len)?;
        for t in transitions(tasks, utility, self.num_tasks, self.config.terminal_reward) {
            self.buffer.push(t);
        }
        if self.buffer.len() >= self.config.batch_size {
            for _ in 0..self.config.updates_per_observation {
                self.update()?;
            }
        }
        Ok(())
    }
}
