//! Iterative evaluation protocol, result aggregation and timing analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::Strategy;
use crate::context::{sample_random, LabeledSequence, Source};
use crate::error::{invalid, Error, Result};
use crate::model::Pftsn;
use crate::prior::{Sequence, TaskId, TsProblem};
use crate::rng::{derived, Rng};
use crate::utility::{utility_vector, UtilityVector};

pub const DEFAULT_CHECKPOINTS: [f64; 3] = [0.25, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iterations: usize,
    pub init_context: usize,
    pub methods: Vec<String>,
    /// Sampling temperature; unset means the model's own.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Most contexts handed to the model; the best ones by scalar utility are kept.
    pub context_cap: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iterations: 32,
            init_context: 4,
            methods: vec!["pftsn".into(), "random".into(), "rule".into(), "ddqn".into()],
            temperature: None,
            context_cap: 16,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("eval.iterations must be at least 1".into()));
        }
        if let Some(t) = self.temperature.filter(|t| t.is_nan() || *t <= 0.0) {
            return Err(Error::InvalidConfig(format!("eval.temperature must be positive, got {t}")));
        }
        if self.context_cap == 0 {
            return Err(Error::InvalidConfig("eval.context_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub tasks: Sequence,
    pub utility: UtilityVector,
    pub scalar: f64,
    pub best_so_far: f64,
    pub proposal_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub problem_id: String,
    pub method: String,
    pub initial: Vec<LabeledSequence>,
    pub initial_best: f64,
    pub iterations: Vec<TraceStep>,
    /// Set when the strategy failed; the recorded iterations are then a prefix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trace {
    pub fn is_partial(&self) -> bool {
        self.error.is_some()
    }

    /// Best scalar utility after `i` proposals; entry 0 covers the initial context only.
    pub fn best_curve(&self) -> Vec<f64> {
        std::iter::once(self.initial_best).chain(self.iterations.iter().map(|s| s.best_so_far)).collect()
    }

    /// Best after `i` proposals, holding the last value when the trace stopped early.
    pub fn best_at(&self, i: usize) -> f64 {
        match i.min(self.iterations.len()) {
            0 => self.initial_best,
            k => self.iterations[k - 1].best_so_far,
        }
    }

    /// First iteration whose proposal reached `target`, if any.
    pub fn iterations_to(&self, target: f64, tol: f64) -> Option<usize> {
        self.iterations.iter().position(|s| s.scalar >= target - tol).map(|i| i + 1)
    }

    pub fn total_proposal_seconds(&self) -> f64 {
        self.iterations.iter().map(|s| s.proposal_seconds).sum()
    }
}

/// Draws the initial context, then alternates propose, label and observe.
pub fn run_protocol(problem: &TsProblem, strategy: &mut dyn Strategy, iterations: usize, init_context_size: usize, rng: &mut Rng) -> Result<Trace> {
    let (n, l) = (problem.num_tasks(), problem.seq_len());
    let init = sample_random(init_context_size, n, l, rng);
    run_protocol_from(problem, strategy, iterations, init, rng)
}

/// As [`run_protocol`] with a given initial context.
pub fn run_protocol_from(problem: &TsProblem, strategy: &mut dyn Strategy, iterations: usize, init: Vec<Sequence>, rng: &mut Rng) -> Result<Trace> {
    if iterations == 0 {
        return Err(invalid("iterations must be at least 1"));
    }
    let initial = init
        .into_iter()
        .map(|s| LabeledSequence::label(problem, s, Source::Random))
        .collect::<Result<Vec<_>>>()?;
    let initial_best = initial.iter().map(LabeledSequence::scalar).fold(f64::NEG_INFINITY, f64::max);
    let mut trace = Trace {
        problem_id: problem.problem_id.clone(),
        method: strategy.name().to_string(),
        initial: initial.clone(),
        initial_best,
        iterations: Vec::with_capacity(iterations),
        error: None,
    };
    for s in &initial {
        if let Err(e) = strategy.observe(&s.tasks, &s.utility) {
            trace.error = Some(e.to_string());
            return Ok(trace);
        }
    }
    let mut best = initial_best;
    for _ in 0..iterations {
        let start = Instant::now();
        let tasks = match strategy.propose(rng) {
            Ok(t) => t,
            Err(e) => {
                trace.error = Some(e.to_string());
                break;
            }
        };
        let proposal_seconds = start.elapsed().as_secs_f64();
        let utility = utility_vector(&tasks, &problem.optimal)?;
        let scalar = utility.scalar();
        best = best.max(scalar);
        let observed = strategy.observe(&tasks, &utility);
        trace.iterations.push(TraceStep { tasks, utility, scalar, best_so_far: best, proposal_seconds });
        if let Err(e) = observed {
            trace.error = Some(e.to_string());
            break;
        }
    }
    Ok(trace)
}

/// Proposes by sampling the meta-trained model conditioned on the observations so far.
pub struct PftsnStrategy<'a> {
    model: &'a Pftsn,
    temperature: f64,
    greedy: bool,
    context_cap: usize,
    observed: Vec<LabeledSequence>,
}

impl<'a> PftsnStrategy<'a> {
    pub fn new(model: &'a Pftsn, temperature: f64, context_cap: usize) -> Self {
        Self { model, temperature, greedy: false, context_cap: context_cap.max(1), observed: Vec::new() }
    }

    pub fn greedy(mut self, greedy: bool) -> Self {
        self.greedy = greedy;
        self
    }

    /// The `context_cap` best observations by scalar utility; earlier ones win ties.
    pub fn context(&self) -> Vec<LabeledSequence> {
        let mut order: Vec<usize> = (0..self.observed.len()).collect();
        order.sort_by(|&a, &b| self.observed[b].scalar().total_cmp(&self.observed[a].scalar()).then(a.cmp(&b)));
        order.truncate(self.context_cap);
        order.sort_unstable();
        order.into_iter().map(|i| self.observed[i].clone()).collect()
    }
}

impl Strategy for PftsnStrategy<'_> {
    fn name(&self) -> &str {
        "pftsn"
    }

    fn propose(&mut self, rng: &mut Rng) -> Result<Sequence> {
        if self.observed.is_empty() {
            return Err(Error::Strategy("the model needs at least one observed sequence".into()));
        }
        self.model.generate(&self.context(), self.temperature, self.greedy, rng)
    }

    fn observe(&mut self, tasks: &[TaskId], utility: &UtilityVector) -> Result<()> {
        let cfg = self.model.config();
        if tasks.len() != cfg.seq_len || tasks.iter().any(|t| t.index() >= cfg.num_tasks) {
            return Err(invalid(format!("observation {tasks:?} does not fit the model's N={} L={}", cfg.num_tasks, cfg.seq_len)));
        }
        self.observed.push(LabeledSequence { tasks: tasks.to_vec(), utility: utility.clone(), source: Source::Proposed });
        Ok(())
    }
}

/// Runs every problem with a fresh strategy. Problem `i` uses stream `i` of `seed`,
/// so initial contexts agree across methods and results do not depend on `workers`.
pub fn evaluate_suite<'a, F>(problems: &[TsProblem], make: F, iterations: usize, init_context_size: usize, seed: u64, workers: usize) -> Result<Vec<Trace>>
where
    F: Fn(&TsProblem, u64) -> Result<Box<dyn Strategy + 'a>> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Trace>>>> = Mutex::new((0..problems.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= problems.len() {
            break;
        }
        let mut rng = derived(seed, i as u64);
        let out = make(&problems[i], seed.wrapping_add(i as u64))
            .and_then(|mut s| run_protocol(&problems[i], s.as_mut(), iterations, init_context_size, &mut rng));
        slots.lock().expect("no panics while holding the lock")[i] = Some(out);
    };
    std::thread::scope(|scope| {
        for _ in 1..workers.max(1).min(problems.len().max(1)) {
            scope.spawn(work);
        }
        work();
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every problem ran")).collect()
}

/// Per-iteration curve point of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub iteration: usize,
    pub mean: f64,
    pub std: f64,
    pub problems: usize,
}

/// Mean and population standard deviation of best-so-far across problems.
pub fn curve_export(traces: &[Trace]) -> Result<Vec<CurvePoint>> {
    if traces.is_empty() {
        return Err(invalid("no traces to export"));
    }
    let mut by_method: BTreeMap<&str, Vec<&Trace>> = BTreeMap::new();
    for t in traces {
        by_method.entry(&t.method).or_default().push(t);
    }
    let mut out = Vec::new();
    for (method, ts) in by_method {
        let horizon = ts.iter().map(|t| t.iterations.len()).max().unwrap_or(0);
        for i in 0..=horizon {
            let v: Vec<f64> = ts.iter().map(|t| t.best_at(i)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            out.push(CurvePoint { method: method.to_string(), iteration: i, mean, std: var.sqrt(), problems: v.len() });
        }
    }
    Ok(out)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("method,iteration,mean_best,std_best,problems\n");
    for p in points {
        s.push_str(&format!("{},{},{},{},{}\n", p.method, p.iteration, p.mean, p.std, p.problems));
    }
    s
}

/// Ranks where 1 is best; tied entries share the mean of the positions they span.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCheckpoint {
    pub fraction: f64,
    pub iteration: usize,
    /// `per_problem[p][m]` is the rank of method `m` on problem `p`.
    pub per_problem: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub problems: Vec<String>,
    pub checkpoints: Vec<RankCheckpoint>,
}

impl RankTable {
    pub fn mean_csv(&self) -> String {
        let mut s = String::from("fraction,iteration,method,mean_rank\n");
        for c in &self.checkpoints {
            for (m, r) in self.methods.iter().zip(&c.mean) {
                s.push_str(&format!("{},{},{},{}\n", c.fraction, c.iteration, m, r));
            }
        }
        s
    }

    pub fn per_problem_csv(&self) -> String {
        let mut s = String::from("fraction,iteration,problem_id");
        for m in &self.methods {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for c in &self.checkpoints {
            for (p, row) in self.problems.iter().zip(&c.per_problem) {
                s.push_str(&format!("{},{},{}", c.fraction, c.iteration, p));
                for r in row {
                    s.push_str(&format!(",{r}"));
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Traces keyed by `(method, problem_id)`.
pub type TraceGrid<'a> = BTreeMap<(String, String), &'a Trace>;

/// Groups traces by method and problem, checking every method covers the same problems once.
pub fn group_traces(traces: &[Trace]) -> Result<(Vec<String>, Vec<String>, TraceGrid<'_>)> {
    let mut grid = BTreeMap::new();
    let mut methods = BTreeSet::new();
    let mut problems = BTreeSet::new();
    for t in traces {
        methods.insert(t.method.clone());
        problems.insert(t.problem_id.clone());
        if grid.insert((t.method.clone(), t.problem_id.clone()), t).is_some() {
            return Err(invalid(format!("duplicate trace for method {} on problem {}", t.method, t.problem_id)));
        }
    }
    for m in &methods {
        for p in &problems {
            if !grid.contains_key(&(m.clone(), p.clone())) {
                return Err(invalid(format!("method {m} has no trace for problem {p}; suites differ across methods")));
            }
        }
    }
    Ok((methods.into_iter().collect(), problems.into_iter().collect(), grid))
}

/// Ranks methods per problem by best-so-far at each checkpoint fraction of the horizon.
pub fn aggregate_ranks(traces: &[Trace], fractions: &[f64]) -> Result<RankTable> {
    let (methods, problems, grid) = group_traces(traces)?;
    let horizon = traces.iter().map(|t| t.iterations.len()).max().unwrap_or(0);
    let mut checkpoints = Vec::new();
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(invalid(format!("checkpoint fraction {f} outside (0, 1]")));
        }
        let iteration = ((f * horizon as f64).ceil() as usize).max(1).min(horizon);
        let per_problem: Vec<Vec<f64>> = problems
            .iter()
            .map(|p| {
                let scores: Vec<f64> = methods.iter().map(|m| grid[&(m.clone(), p.clone())].best_at(iteration)).collect();
                average_ranks(&scores)
            })
            .collect();
        let mean = (0..methods.len())
            .map(|m| per_problem.iter().map(|r| r[m]).sum::<f64>() / problems.len() as f64)
            .collect();
        checkpoints.push(RankCheckpoint { fraction: f, iteration, per_problem, mean });
    }
    Ok(RankTable { methods, problems, checkpoints })
}

/// Per-sequence execution time at which `n1` iterations costing `t1` seconds of proposals
/// match `n2` iterations costing `t2`.
pub fn break_even(n1: usize, t1: f64, n2: usize, t2: f64) -> Result<f64> {
    if n1 == n2 {
        return Err(invalid(format!("break-even is undefined for equal iteration counts ({n1})")));
    }
    Ok((t1 - t2) / (n2 as f64 - n1 as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Exact two-sided binomial p-value with ties dropped.
    pub p_two_sided: f64,
    /// Exact probability of at least `wins` wins under the null.
    pub p_greater: f64,
}

fn binomial_tail(n: usize, k: usize) -> f64 {
    // P(X >= k) for X ~ Bin(n, 1/2), summed in log space
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut terms = Vec::with_capacity(n + 1);
    for j in 0..=n {
        if j > 0 {
            ln_c += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        if j >= k {
            terms.push(ln_c + ln_half_n);
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp().min(1.0)
}

/// Paired sign test of `a` over `b`.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(invalid(format!("paired samples of different sizes {} and {}", a.len(), b.len())));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len() - wins - losses;
    let n = wins + losses;
    let p_two_sided = (2.0 * binomial_tail(n, wins.max(losses))).min(1.0);
    Ok(SignTest { wins, losses, ties, p_two_sided, p_greater: binomial_tail(n, wins) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub method: String,
    pub problems: usize,
    pub iterations: usize,
    pub total_proposal_seconds: f64,
    pub mean_seconds_per_problem: f64,
}

pub fn timing_summary(traces: &[Trace]) -> Vec<Timing> {
    let mut by_method: BTreeMap<&str, Vec<&Trace>> = BTreeMap::new();
    for t in traces {
        by_method.entry(&t.method).or_default().push(t);
    }
    by_method
        .into_iter()
        .map(|(m, ts)| {
            let total: f64 = ts.iter().map(|t| t.total_proposal_seconds()).sum();
            Timing {
                method: m.to_string(),
                problems: ts.len(),
                iterations: ts.iter().map(|t| t.iterations.len()).max().unwrap_or(0),
                total_proposal_seconds: total,
                mean_seconds_per_problem: total / ts.len() as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{RandomSearch, RuleBased};
    use crate::model::ModelConfig;
    use crate::prior::{sample_problem, seq, PriorConfig};
    use crate::rng::seeded;

    struct Replay(Sequence);

    impl Strategy for Replay {
        fn name(&self) -> &str {
            "replay"
        }
        fn propose(&mut self, _: &mut Rng) -> Result<Sequence> {
            Ok(self.0.clone())
        }
        fn observe(&mut self, _: &[TaskId], _: &UtilityVector) -> Result<()> {
            Ok(())
        }
    }

    struct Failing(usize);

    impl Strategy for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn propose(&mut self, rng: &mut Rng) -> Result<Sequence> {
            if self.0 == 0 {
                return Err(Error::Strategy("out of ideas".into()));
            }
            self.0 -= 1;
            Ok(crate::context::random_sequence(8, 8, rng))
        }
        fn observe(&mut self, _: &[TaskId], _: &UtilityVector) -> Result<()> {
            Ok(())
        }
    }

    fn problem(seed: u64) -> TsProblem {
        sample_problem(&PriorConfig::default(), &mut seeded(seed)).unwrap()
    }

    fn fake(method: &str, problem: &str, curve: &[f64]) -> Trace {
        Trace {
            problem_id: problem.into(),
            method: method.into(),
            initial: vec![],
            initial_best: curve[0],
            iterations: curve[1..]
                .iter()
                .map(|&b| TraceStep { tasks: vec![], utility: UtilityVector(vec![]), scalar: b, best_so_far: b, proposal_seconds: 0.5 })
                .collect(),
            error: None,
        }
    }

    #[test]
    fn optimal_replay_is_flat_at_length() {
        let p = problem(1);
        let mut s = Replay(p.optimal[0].clone());
        let t = run_protocol(&p, &mut s, 32, 4, &mut seeded(0)).unwrap();
        assert_eq!(t.iterations.len(), 32);
        assert_eq!(t.initial.len(), 4);
        assert!(t.iterations.iter().all(|s| (s.best_so_far - 8.0).abs() < 1e-9));
        let c = curve_export(&[t]).unwrap();
        assert!(c[1..].iter().all(|p| (p.mean - 8.0).abs() < 1e-9 && p.std == 0.0));
    }

    #[test]
    fn best_so_far_is_running_max() {
        let p = problem(2);
        let t = run_protocol(&p, &mut RandomSearch::new(8, 8), 64, 4, &mut seeded(3)).unwrap();
        let init_best = t.initial.iter().map(|s| s.scalar()).fold(f64::MIN, f64::max);
        assert_eq!(t.initial_best, init_best);
        let mut best = init_best;
        for s in &t.iterations {
            best = best.max(s.scalar);
            assert_eq!(s.best_so_far, best);
        }
        assert!(t.best_curve().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn strategy_failure_marks_partial_trace() {
        let p = problem(3);
        let t = run_protocol(&p, &mut Failing(5), 32, 4, &mut seeded(0)).unwrap();
        assert!(t.is_partial());
        assert_eq!(t.iterations.len(), 5);
        assert_eq!(t.best_at(32), t.iterations[4].best_so_far);
        run_protocol(&p, &mut Failing(5), 0, 4, &mut seeded(0)).unwrap_err();
    }

    #[test]
    fn initial_contexts_shared_across_methods() {
        let problems: Vec<TsProblem> = (0..4).map(problem).collect();
        let a = evaluate_suite(&problems, |_, _| Ok(Box::new(RandomSearch::new(8, 8))), 4, 4, 9, 1).unwrap();
        let b = evaluate_suite(&problems, |_, _| Ok(Box::new(RuleBased::new(8, 8))), 4, 4, 9, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.initial, y.initial);
            assert_eq!(x.problem_id, y.problem_id);
        }
        let c = evaluate_suite(&problems, |_, _| Ok(Box::new(RandomSearch::new(8, 8))), 4, 4, 9, 4).unwrap();
        let strip = |ts: &[Trace]| ts.iter().map(|t| t.best_curve()).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&c));
    }

    #[test]
    fn pftsn_strategy_keeps_best_contexts() {
        let cfg = ModelConfig { d_emb: 8, num_blocks: 1, num_heads: 2, hidden: 8, dropout: 0.0, ..Default::default() };
        let model = Pftsn::new(cfg, 0).unwrap();
        let mut s = PftsnStrategy::new(&model, 1.0, 2);
        for (i, v) in [0.1, 0.9, 0.5, 0.9].iter().enumerate() {
            s.observe(&seq(&[i as u16; 8]), &UtilityVector(vec![*v; 8])).unwrap();
        }
        let ctx = s.context();
        assert_eq!(ctx.iter().map(|c| c.tasks[0].0).collect::<Vec<_>>(), vec![1, 3]);
        let p = problem(5);
        let t = run_protocol(&p, &mut PftsnStrategy::new(&model, 1.0, 16), 3, 4, &mut seeded(1)).unwrap();
        assert_eq!(t.iterations.len(), 3);
        assert!(!t.is_partial());
        assert!(PftsnStrategy::new(&model, 1.0, 16).propose(&mut seeded(0)).is_err());
    }

    #[test]
    fn dominant_and_tied_ranks() {
        let traces = vec![
            fake("a", "p0", &[1.0, 5.0]),
            fake("b", "p0", &[1.0, 2.0]),
            fake("a", "p1", &[1.0, 6.0]),
            fake("b", "p1", &[1.0, 3.0]),
        ];
        let r = aggregate_ranks(&traces, &[1.0]).unwrap();
        assert_eq!(r.checkpoints[0].mean, vec![1.0, 2.0]);
        let same = vec![fake("a", "p0", &[1.0, 5.0]), fake("b", "p0", &[1.0, 5.0])];
        assert_eq!(aggregate_ranks(&same, &[1.0]).unwrap().checkpoints[0].mean, vec![1.5, 1.5]);
    }

    #[test]
    fn hand_built_three_method_fixture() {
        // p0 final: a 8, b 6, c 6 -> ranks 1, 2.5, 2.5
        // p1 final: a 5, b 7, c 6 -> ranks 3, 1, 2
        // at 50% (iteration 1): p0 a 4, b 4, c 4 -> 2, 2, 2; p1 a 5, b 3, c 6 -> 2, 3, 1
        let traces = vec![
            fake("a", "p0", &[1.0, 4.0, 8.0]),
            fake("b", "p0", &[1.0, 4.0, 6.0]),
            fake("c", "p0", &[1.0, 4.0, 6.0]),
            fake("a", "p1", &[1.0, 5.0, 5.0]),
            fake("b", "p1", &[1.0, 3.0, 7.0]),
            fake("c", "p1", &[1.0, 6.0, 6.0]),
        ];
        let r = aggregate_ranks(&traces, &[0.5, 1.0]).unwrap();
        assert_eq!(r.checkpoints[0].iteration, 1);
        assert_eq!(r.checkpoints[0].mean, vec![2.0, 2.5, 1.5]);
        assert_eq!(r.checkpoints[1].mean, vec![2.0, 1.75, 2.25]);
        for c in &r.checkpoints {
            for row in &c.per_problem {
                assert_eq!(row.iter().sum::<f64>(), 6.0);
            }
        }
        assert!(r.per_problem_csv().starts_with("fraction,iteration,problem_id,a,b,c\n"));
    }

    #[test]
    fn mismatched_suites_rejected() {
        let traces = vec![fake("a", "p0", &[1.0, 2.0]), fake("b", "p1", &[1.0, 2.0])];
        aggregate_ranks(&traces, &[1.0]).unwrap_err();
        let dup = vec![fake("a", "p0", &[1.0, 2.0]), fake("a", "p0", &[1.0, 2.0])];
        aggregate_ranks(&dup, &[1.0]).unwrap_err();
    }

    #[test]
    fn break_even_examples() {
        assert!((break_even(19, 2.47, 29, 0.203).unwrap() - 0.2267).abs() < 1e-4);
        assert_eq!(break_even(3, 1.5, 7, 1.5).unwrap(), 0.0);
        assert!((break_even(10, 5.0, 20, 1.0).unwrap() - 0.4).abs() < 1e-12);
        break_even(4, 1.0, 4, 2.0).unwrap_err();
    }

    #[test]
    fn curve_of_two_traces() {
        let traces = vec![fake("a", "p0", &[1.0, 3.0, 5.0]), fake("a", "p1", &[3.0, 3.0, 7.0])];
        let c = curve_export(&traces).unwrap();
        assert_eq!(c.iter().map(|p| p.mean).collect::<Vec<_>>(), vec![2.0, 3.0, 6.0]);
        assert_eq!(c.iter().map(|p| p.std).collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
        assert!(curve_export(&[]).is_err());
        assert!(curve_csv(&c).starts_with("method,iteration,mean_best,std_best,problems\na,0,2,1,2\n"));
    }

    #[test]
    fn sign_test_matches_binomial() {
        // 9 wins of 10: P(X >= 9) = 11 / 1024
        let a = vec![1.0; 10];
        let mut b = vec![0.0; 10];
        b[0] = 2.0;
        let t = sign_test(&a, &b).unwrap();
        assert_eq!((t.wins, t.losses, t.ties), (9, 1, 0));
        assert!((t.p_greater - 11.0 / 1024.0).abs() < 1e-12);
        assert!((t.p_two_sided - 22.0 / 1024.0).abs() < 1e-12);
        let t = sign_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((t.ties, t.p_two_sided, t.p_greater), (2, 1.0, 1.0));
        sign_test(&[1.0], &[]).unwrap_err();
    }

    #[test]
    fn timing_totals() {
        let t = timing_summary(&[fake("a", "p0", &[0.0, 1.0, 2.0]), fake("a", "p1", &[0.0, 1.0, 2.0])]);
        assert_eq!(t[0].total_proposal_seconds, 2.0);
        assert_eq!(t[0].mean_seconds_per_problem, 1.0);
        assert_eq!(t[0].iterations, 2);
    }

    #[test]
    fn average_rank_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![1.5, 4.0, 1.5, 3.0]);
    }
}
