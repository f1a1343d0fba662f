//! Graph-expansion prior over task-sequencing problems.
//!
//! A problem is a depth-layered DAG whose nodes carry task labels. Every
//! root-to-leaf path, read through the labels, is one optimal sequence. Graphs
//! grow one expansion at a time: an atomic step appends a single node, an
//! or-step appends parallel alternatives, and an and-step appends every
//! ordering of a small task set.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Index of a task in `0..N`. The value `N` is reserved for the begin-of-sequence
/// marker consumed by the model and never occurs inside a task sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u16);

impl TaskId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

pub type Sequence = Vec<TaskId>;

/// Builds a sequence from raw ids; mostly for tests and fixtures.
pub fn seq(ids: &[u16]) -> Sequence {
    ids.iter().copied().map(TaskId).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub num_tasks: usize,
    pub seq_len: usize,
    pub k_max: usize,
    pub optimal_set_cap: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    /// The small benchmark: |T| = 8, L = 8, k_max = 2.
    fn default() -> Self {
        Self {
            num_tasks: 8,
            seq_len: 8,
            k_max: 2,
            optimal_set_cap: 4096,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 2 {
            return Err(Error::InvalidConfig(format!("num_tasks must be >= 2, got {}", self.num_tasks)));
        }
        if self.num_tasks >= u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("num_tasks {} too large", self.num_tasks)));
        }
        if self.seq_len < 1 {
            return Err(Error::InvalidConfig("seq_len must be >= 1".into()));
        }
        if self.k_max < 2 || self.k_max > self.num_tasks {
            return Err(Error::InvalidConfig(format!(
                "k_max must satisfy 2 <= k_max <= num_tasks ({}), got {}",
                self.num_tasks, self.k_max
            )));
        }
        if self.optimal_set_cap < 1 {
            return Err(Error::InvalidConfig("optimal_set_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub task: TaskId,
    pub depth: usize,
}

/// A depth-layered DAG of task-labelled nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGraph {
    max_len: usize,
    nodes: Vec<GraphNode>,
    edges: Vec<(usize, usize)>,
}

/// One graph-expansion step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expansion {
    Atomic(TaskId),
    Or(Vec<TaskId>),
    And(Vec<TaskId>),
}

impl TaskGraph {
    /// An empty graph whose paths may grow to at most `max_len` nodes.
    pub fn new(max_len: usize) -> Self {
        Self { max_len, nodes: Vec::new(), edges: Vec::new() }
    }

    /// Rebuilds a graph from stored parts and checks every structural invariant.
    pub fn from_parts(max_len: usize, nodes: Vec<GraphNode>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let graph = Self { max_len, nodes, edges };
        graph.validate()?;
        Ok(graph)
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of layers currently in the graph (0 for the empty graph).
    pub fn levels(&self) -> usize {
        self.nodes.iter().map(|n| n.depth + 1).max().unwrap_or(0)
    }

    fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for &(u, _) in &self.edges {
            deg[u] += 1;
        }
        deg
    }

    fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for &(_, v) in &self.edges {
            deg[v] += 1;
        }
        deg
    }

    pub fn roots(&self) -> Vec<usize> {
        let deg = self.in_degrees();
        (0..self.nodes.len()).filter(|&i| deg[i] == 0).collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        let deg = self.out_degrees();
        (0..self.nodes.len()).filter(|&i| deg[i] == 0).collect()
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.edges {
            out[u].push(v);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for &(u, v) in &self.edges {
            if u >= n || v >= n {
                return Err(Error::MalformedGraph(format!("edge ({u}, {v}) references a missing node")));
            }
            if self.nodes[v].depth != self.nodes[u].depth + 1 {
                return Err(Error::MalformedGraph(format!(
                    "edge ({u}, {v}) joins depth {} to depth {}",
                    self.nodes[u].depth, self.nodes[v].depth
                )));
            }
        }
        let in_deg = self.in_degrees();
        for (i, node) in self.nodes.iter().enumerate() {
            if in_deg[i] == 0 && node.depth != 0 {
                return Err(Error::MalformedGraph(format!("root {i} sits at depth {}", node.depth)));
            }
            if node.depth >= self.max_len {
                return Err(Error::MalformedGraph(format!("node {i} at depth {} exceeds length {}", node.depth, self.max_len)));
            }
        }
        self.topological_order().map(|_| ())
    }

    /// Kahn's algorithm; fails if the edge set contains a cycle.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let mut in_deg = self.in_degrees();
        let children = self.children();
        let mut queue: VecDeque<usize> = (0..self.nodes.len()).filter(|&i| in_deg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &v in &children[u] {
                in_deg[v] -= 1;
                if in_deg[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::MalformedGraph("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Leaves of a non-empty graph must share one depth before anything is appended.
    fn frontier(&self, levels: usize) -> Result<(Vec<usize>, usize)> {
        let leaves = self.leaves();
        let depth = if leaves.is_empty() {
            0
        } else {
            let d = self.nodes[leaves[0]].depth;
            if leaves.iter().any(|&l| self.nodes[l].depth != d) {
                return Err(Error::MalformedGraph("leaves sit at different depths".into()));
            }
            d + 1
        };
        if depth + levels > self.max_len {
            return Err(Error::DepthOverflow { depth, levels, max_len: self.max_len });
        }
        Ok((leaves, depth))
    }

    fn push_node(&mut self, task: TaskId, depth: usize) -> usize {
        self.nodes.push(GraphNode { task, depth });
        self.nodes.len() - 1
    }

    /// Appends one node shared by every current leaf.
    pub fn expand_atomic(&mut self, task: TaskId) -> Result<()> {
        let (leaves, depth) = self.frontier(1)?;
        let v = self.push_node(task, depth);
        self.edges.extend(leaves.into_iter().map(|u| (u, v)));
        Ok(())
    }

    /// Appends one node per task; each new node is attached to every current leaf.
    pub fn expand_or(&mut self, tasks: &[TaskId]) -> Result<()> {
        check_distinct(tasks)?;
        let (leaves, depth) = self.frontier(1)?;
        for &t in tasks {
            let v = self.push_node(t, depth);
            self.edges.extend(leaves.iter().map(|&u| (u, v)));
        }
        Ok(())
    }

    /// Appends a fresh path for every permutation of `tasks`, each hanging off every leaf.
    pub fn expand_and(&mut self, tasks: &[TaskId]) -> Result<()> {
        check_distinct(tasks)?;
        let (leaves, depth) = self.frontier(tasks.len())?;
        for perm in permutations(tasks) {
            let mut prev: Option<usize> = None;
            for (offset, &t) in perm.iter().enumerate() {
                let v = self.push_node(t, depth + offset);
                match prev {
                    None => self.edges.extend(leaves.iter().map(|&u| (u, v))),
                    Some(p) => self.edges.push((p, v)),
                }
                prev = Some(v);
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, op: &Expansion) -> Result<()> {
        match op {
            Expansion::Atomic(t) => self.expand_atomic(*t),
            Expansion::Or(ts) => self.expand_or(ts),
            Expansion::And(ts) => self.expand_and(ts),
        }
    }

    /// Number of root-to-leaf paths, saturating.
    pub fn path_count(&self) -> u128 {
        let Ok(order) = self.topological_order() else { return 0 };
        let children = self.children();
        let in_deg = self.in_degrees();
        let mut count = vec![0u128; self.nodes.len()];
        for &i in &order {
            if in_deg[i] == 0 {
                count[i] = 1;
            }
        }
        let mut total = 0u128;
        for &u in &order {
            if children[u].is_empty() {
                total = total.saturating_add(count[u]);
            }
            for &v in &children[u] {
                count[v] = count[v].saturating_add(count[u]);
            }
        }
        total
    }

    /// All root-to-leaf label sequences, deduplicated and lexicographically sorted.
    pub fn enumerate_optimal(&self) -> Result<Vec<Sequence>> {
        self.validate()?;
        let children = self.children();
        let mut found = BTreeSet::new();
        let mut lengths = BTreeSet::new();
        let mut stack: Vec<(usize, usize)> = self.roots().into_iter().rev().map(|r| (r, 0)).collect();
        let mut path: Sequence = Vec::new();
        while let Some((node, pos)) = stack.pop() {
            path.truncate(pos);
            path.push(self.nodes[node].task);
            if children[node].is_empty() {
                lengths.insert(path.len());
                found.insert(path.clone());
            } else {
                for &c in children[node].iter().rev() {
                    stack.push((c, pos + 1));
                }
            }
        }
        if lengths.len() > 1 {
            return Err(Error::MalformedGraph(format!("paths of unequal length: {lengths:?}")));
        }
        Ok(found.into_iter().collect())
    }
}

fn check_distinct(tasks: &[TaskId]) -> Result<()> {
    if tasks.is_empty() {
        return Err(invalid("expansion needs at least one task"));
    }
    let set: BTreeSet<_> = tasks.iter().collect();
    if set.len() != tasks.len() {
        return Err(invalid(format!("duplicate tasks in expansion: {tasks:?}")));
    }
    Ok(())
}

/// All permutations of `items`, in lexicographic order of their input positions.
fn permutations(items: &[TaskId]) -> Vec<Vec<TaskId>> {
    fn rec(rest: &mut Vec<TaskId>, current: &mut Vec<TaskId>, out: &mut Vec<Vec<TaskId>>) {
        if rest.is_empty() {
            out.push(current.clone());
            return;
        }
        for i in 0..rest.len() {
            let t = rest.remove(i);
            current.push(t);
            rec(rest, current, out);
            current.pop();
            rest.insert(i, t);
        }
    }
    let mut out = Vec::new();
    rec(&mut items.to_vec(), &mut Vec::new(), &mut out);
    out
}

fn factorial(k: usize) -> u128 {
    (1..=k as u128).product()
}

/// A prefix trie over `sequences`: one node per distinct prefix, so the
/// root-to-leaf paths are exactly the input set.
pub fn trie_from_sequences(sequences: &[Sequence]) -> Result<TaskGraph> {
    let Some(first) = sequences.first() else {
        return Err(invalid("trie needs at least one sequence"));
    };
    let len = first.len();
    if len == 0 {
        return Err(invalid("trie sequences must be non-empty"));
    }
    if let Some(bad) = sequences.iter().find(|s| s.len() != len) {
        return Err(invalid(format!("ragged sequence lengths: {} vs {len}", bad.len())));
    }
    let mut graph = TaskGraph::new(len);
    // (parent node or None for roots, task) -> node
    let mut index: std::collections::HashMap<(Option<usize>, TaskId), usize> = std::collections::HashMap::new();
    for s in sequences {
        let mut parent = None;
        for (depth, &t) in s.iter().enumerate() {
            let node = match index.get(&(parent, t)) {
                Some(&n) => n,
                None => {
                    let n = graph.push_node(t, depth);
                    if let Some(p) = parent {
                        graph.edges.push((p, n));
                    }
                    index.insert((parent, t), n);
                    n
                }
            };
            parent = Some(node);
        }
    }
    Ok(graph)
}

/// One sampled sequencing problem: its task graph and the enumerated optimal set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsProblem {
    pub problem_id: String,
    pub config: PriorConfig,
    pub graph: TaskGraph,
    pub optimal: Vec<Sequence>,
}

impl TsProblem {
    /// Wraps a finished graph, enumerating and checking its optimal set.
    pub fn from_graph(problem_id: impl Into<String>, config: PriorConfig, graph: TaskGraph) -> Result<Self> {
        let optimal = graph.enumerate_optimal()?;
        if optimal.is_empty() {
            return Err(Error::MalformedGraph("graph has no paths".into()));
        }
        if optimal[0].len() != config.seq_len {
            return Err(Error::MalformedGraph(format!(
                "paths have length {}, expected {}",
                optimal[0].len(),
                config.seq_len
            )));
        }
        Ok(Self { problem_id: problem_id.into(), config, graph, optimal })
    }

    pub fn num_tasks(&self) -> usize {
        self.config.num_tasks
    }

    pub fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    pub fn is_optimal(&self, s: &[TaskId]) -> bool {
        self.optimal.binary_search_by(|o| o.as_slice().cmp(s)).is_ok()
    }
}

/// Applies a fixed list of expansions to an empty graph.
pub fn build_from_ops(config: &PriorConfig, ops: &[Expansion]) -> Result<TsProblem> {
    let mut graph = TaskGraph::new(config.seq_len);
    for op in ops {
        graph.apply(op)?;
    }
    TsProblem::from_graph("fixed", config.clone(), graph)
}

const RETRY_BUDGET: usize = 64;

/// Draws one random expansion for a graph that currently has `levels` layers.
fn draw_expansion(config: &PriorConfig, levels: usize, rng: &mut Rng) -> Expansion {
    let k = config.k_max.min(config.seq_len - levels);
    let draw_set = |rng: &mut Rng| -> Vec<TaskId> {
        index::sample(rng, config.num_tasks, k).into_iter().map(|i| TaskId(i as u16)).collect()
    };
    match rng.gen_range(0..3) {
        0 => Expansion::Atomic(TaskId(rng.gen_range(0..config.num_tasks) as u16)),
        1 => Expansion::Or(draw_set(rng)),
        _ => Expansion::And(draw_set(rng)),
    }
}

/// Samples a problem by iterated expansion until every path reaches `seq_len`,
/// resampling when the optimal set would exceed `optimal_set_cap`.
pub fn sample_problem(config: &PriorConfig, rng: &mut Rng) -> Result<TsProblem> {
    config.validate()?;
    let cap = config.optimal_set_cap as u128;
    for _ in 0..RETRY_BUDGET {
        let mut graph = TaskGraph::new(config.seq_len);
        let mut paths: u128 = 1;
        let mut overflow = false;
        while graph.levels() < config.seq_len {
            let op = draw_expansion(config, graph.levels(), rng);
            paths = paths.saturating_mul(match &op {
                Expansion::Atomic(_) => 1,
                Expansion::Or(ts) => ts.len() as u128,
                Expansion::And(ts) => factorial(ts.len()),
            });
            if paths > cap {
                overflow = true;
                break;
            }
            graph.apply(&op)?;
        }
        if overflow {
            continue;
        }
        let problem = TsProblem::from_graph("sampled", config.clone(), graph)?;
        if problem.optimal.len() as u128 <= cap {
            return Ok(problem);
        }
    }
    Err(Error::GenerationFailed {
        attempts: RETRY_BUDGET,
        reason: format!(
            "optimal set kept exceeding cap {} (N={}, L={}, k_max={})",
            config.optimal_set_cap, config.num_tasks, config.seq_len, config.k_max
        ),
    })
}
