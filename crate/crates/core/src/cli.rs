//! Command-line surface: dataset generation, meta-training, evaluation and reports.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::baselines::{Ddqn, DdqnConfig, RandomSearch, RuleBased, Strategy};
use crate::datastore::{
    generate_dataset, read_dataset, read_traces, save_checkpoint, load_checkpoint, write_atomic, write_dataset, write_traces,
    DatasetHeader, DATASET_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::harness::{
    aggregate_ranks, break_even, curve_csv, curve_export, evaluate_suite, group_traces, timing_summary, EvalConfig, PftsnStrategy,
    Trace, DEFAULT_CHECKPOINTS,
};
use crate::model::{ModelConfig, Pftsn};
use crate::prior::PriorConfig;
use crate::trainer::{log_header, meta_train, ProblemSource, TrainConfig, TrainEvent};

/// All settings of a run, one section per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub prior: PriorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ddqn: DdqnConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "taskseq", version, about = "Task-sequencing problems, in-context proposer training and search benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded problem suite.
    Generate(GenerateArgs),
    /// Meta-train the proposer on problems from the prior or a dataset.
    Train(TrainArgs),
    /// Run search methods over a problem suite.
    Evaluate(EvaluateArgs),
    /// Aggregate trace files into curve, rank, timing and break-even tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with [prior], [model], [train], [eval] and [ddqn] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "TASKSEQ_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub num_problems: usize,
    #[arg(long, env = "TASKSEQ_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 16)]
    pub random_per_problem: usize,
    #[arg(long, default_value_t = 16)]
    pub mutated_per_problem: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for checkpoints and the training log.
    #[arg(long, required_unless_present = "show_config")]
    pub out: Option<PathBuf>,
    /// Train on this problem suite instead of fresh prior samples.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, env = "TASKSEQ_SEED")]
    pub seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Pftsn,
    Random,
    Rule,
    Ddqn,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Pftsn => "pftsn",
            Method::Random => "random",
            Method::Rule => "rule",
            Method::Ddqn => "ddqn",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint, required for the pftsn method.
    #[arg(long, required_if_eq("method", "pftsn"))]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub problems: PathBuf,
    /// Method to run; without it every method in eval.methods runs and --out is a directory.
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub init_context: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, env = "TASKSEQ_SEED")]
    pub seed: Option<u64>,
    /// Record zero proposal time so repeated runs give identical files.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub out_prefix: PathBuf,
    /// Extra break-even row from explicit `n1,t1,n2,t2` values.
    #[arg(long, value_delimiter = ',')]
    pub break_even: Option<Vec<f64>>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Report(a) => cmd_report(&a).map(|_| ()),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let mut prior = cfg.prior;
    if let Some(s) = a.seed {
        prior.seed = s;
    }
    prior.validate()?;
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        seed: prior.seed,
        prior,
        problems: a.num_problems,
        random_per_problem: a.random_per_problem,
        mutated_per_problem: a.mutated_per_problem,
        split: a.split.clone(),
    };
    let ds = generate_dataset(&header, a.common.workers)?;
    write_dataset(&ds, &a.out)?;
    eprintln!("wrote {} problems to {}", ds.records.len(), a.out.display());
    Ok(())
}

fn resolved_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.prior.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolved_train_config(a)?;
    if a.show_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = a.out.as_ref().expect("clap requires --out");
    if out.exists() {
        return Err(Error::InvalidArgument(format!("output directory {} already exists", out.display())));
    }
    let problems = match &a.dataset {
        Some(p) => {
            let ds = read_dataset(p)?;
            if ds.header.prior.num_tasks != cfg.prior.num_tasks || ds.header.prior.seq_len != cfg.prior.seq_len {
                return Err(Error::InvalidConfig(format!(
                    "dataset has N={} L={}, config has N={} L={}",
                    ds.header.prior.num_tasks, ds.header.prior.seq_len, cfg.prior.num_tasks, cfg.prior.seq_len
                )));
            }
            Some(ds.problems()?)
        }
        None => None,
    };
    let staging = sibling(out, "partial");
    let _ = fs::remove_dir_all(&staging);
    fs::create_dir_all(&staging)?;
    let result = train_into(&cfg, problems.as_deref(), a.common.workers, &staging);
    match result {
        Ok(()) => Ok(fs::rename(&staging, out)?),
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}"))
}

fn train_into(cfg: &RunConfig, problems: Option<&[crate::prior::TsProblem]>, workers: usize, dir: &Path) -> Result<()> {
    let model = Pftsn::new(cfg.model.clone(), cfg.train.seed)?;
    let source = match problems {
        Some(p) => ProblemSource::Pool(p),
        None => ProblemSource::Prior,
    };
    let mut log = serde_json::to_string(&log_header(&cfg.prior, &cfg.train))?;
    log.push('\n');
    let total = cfg.train.steps;
    let outcome = meta_train(&cfg.prior, &cfg.train, model, source, workers, |event| {
        match event {
            TrainEvent::Step(r) => {
                log.push_str(&serde_json::to_string(&serde_json::json!({"step": r.step, "loss": r.loss, "lr": r.lr}))?);
                log.push('\n');
                if r.step == 1 || r.step % 100 == 0 || r.step == total {
                    eprintln!("step {}/{} loss {:.4} lr {:.2e} {:.1}s", r.step, total, r.loss, r.lr, r.seconds);
                }
            }
            TrainEvent::Checkpoint { step, model } => {
                save_checkpoint(model, step as usize, &dir.join(format!("checkpoint-{step:06}.bin")))?;
            }
        }
        Ok(())
    })?;
    save_checkpoint(&outcome.model, total as usize, &dir.join("final.bin"))?;
    log.push_str(&serde_json::to_string(&serde_json::json!({"footer": {"steps": total, "skipped_steps": outcome.skipped_steps}}))?);
    log.push('\n');
    write_atomic(&dir.join("train_log.jsonl"), log.as_bytes())?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn parse_method(name: &str) -> Result<Method> {
    <Method as ValueEnum>::from_str(name, true).map_err(|_| Error::InvalidConfig(format!("unknown method {name:?} in eval.methods")))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let mut eval = cfg.eval.clone();
    if let Some(i) = a.iterations {
        eval.iterations = i;
    }
    if let Some(c) = a.init_context {
        eval.init_context = c;
    }
    if let Some(t) = a.temperature {
        eval.temperature = Some(t);
    }
    if let Some(s) = a.seed {
        eval.seed = s;
    }
    eval.validate()?;
    let methods = match a.method {
        Some(m) => vec![m],
        None => eval.methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?,
    };
    if methods.contains(&Method::Pftsn) && a.model.is_none() {
        return Err(Error::InvalidArgument("the pftsn method requires --model".into()));
    }
    let ds = read_dataset(&a.problems)?;
    let problems = ds.problems()?;
    let (n, l) = (ds.header.prior.num_tasks, ds.header.prior.seq_len);
    let model = match &a.model {
        Some(path) if methods.contains(&Method::Pftsn) => {
            let (m, _) = load_checkpoint(path)?;
            if m.config().num_tasks != n || m.config().seq_len != l {
                return Err(Error::Checkpoint(format!(
                    "checkpoint model has N={} L={}, problems have N={n} L={l}",
                    m.config().num_tasks,
                    m.config().seq_len
                )));
            }
            Some(m)
        }
        _ => None,
    };
    if a.method.is_none() {
        fs::create_dir_all(&a.out)?;
    }
    for method in methods {
        let out = match a.method {
            Some(_) => a.out.clone(),
            None => a.out.join(format!("{}.jsonl", method.name())),
        };
        let traces = evaluate_method(method, model.as_ref(), &problems, n, l, &eval, &cfg.ddqn, a.common.workers, a.no_timing)?;
        write_traces(&traces, &out)?;
        let partial = traces.iter().filter(|t| t.is_partial()).count();
        let mean = traces.iter().map(|t| t.best_at(eval.iterations)).sum::<f64>() / traces.len().max(1) as f64;
        eprintln!(
            "{}: {} traces ({partial} partial), mean best {mean:.4} after {} iterations, wrote {}",
            method.name(),
            traces.len(),
            eval.iterations,
            out.display()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_method(
    method: Method,
    model: Option<&Pftsn>,
    problems: &[crate::prior::TsProblem],
    n: usize,
    l: usize,
    eval: &EvalConfig,
    ddqn: &DdqnConfig,
    workers: usize,
    no_timing: bool,
) -> Result<Vec<Trace>> {
    let temperature = eval.temperature.unwrap_or(model.map_or(1.0, |m| m.config().temperature));
    let iterations = eval.iterations;
    let make = |_: &crate::prior::TsProblem, seed: u64| -> Result<Box<dyn Strategy + '_>> {
        Ok(match method {
            Method::Pftsn => Box::new(PftsnStrategy::new(model.expect("checked by caller"), temperature, eval.context_cap)),
            Method::Random => Box::new(RandomSearch::new(n, l)),
            Method::Rule => Box::new(RuleBased::new(n, l)),
            Method::Ddqn => Box::new(Ddqn::new(n, l, iterations, DdqnConfig { seed, ..ddqn.clone() })?),
        })
    };
    let mut traces = evaluate_suite(problems, make, iterations, eval.init_context, eval.seed, workers)?;
    if no_timing {
        for t in &mut traces {
            for s in &mut t.iterations {
                s.proposal_seconds = 0.0;
            }
        }
    }
    Ok(traces)
}

/// Iterations a method needs and its proposal seconds up to that point, averaged over problems.
/// Problems never solved count the full horizon.
pub fn effort_to_optimum(traces: &[&Trace], target: f64) -> (f64, f64) {
    let mut n = 0.0;
    let mut t = 0.0;
    for tr in traces {
        let k = tr.iterations_to(target, 1e-9).unwrap_or(tr.iterations.len());
        n += k as f64;
        t += tr.iterations[..k].iter().map(|s| s.proposal_seconds).sum::<f64>();
    }
    let m = traces.len().max(1) as f64;
    (n / m, t / m)
}

/// Files written by [`cmd_report`].
#[derive(Debug, Default)]
pub struct ReportOutputs {
    pub files: Vec<PathBuf>,
    pub ranks_skipped: bool,
}

pub fn cmd_report(a: &ReportArgs) -> Result<ReportOutputs> {
    let mut traces = Vec::new();
    for p in &a.traces {
        traces.extend(read_traces(p)?);
    }
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces in the given files".into()));
    }
    let target = traces[0].initial.first().map_or(0.0, |s| s.utility.len() as f64);
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let path = |suffix: &str| {
        let mut p = a.out_prefix.clone().into_os_string();
        p.push(suffix);
        PathBuf::from(p)
    };
    files.push((path("_curves.csv"), curve_csv(&curve_export(&traces)?)));

    let mut timing = String::from("method,problems,iterations,total_proposal_seconds,mean_seconds_per_problem\n");
    for t in timing_summary(&traces) {
        timing.push_str(&format!("{},{},{},{},{}\n", t.method, t.problems, t.iterations, t.total_proposal_seconds, t.mean_seconds_per_problem));
    }
    files.push((path("_timing.csv"), timing));

    let (methods, _, grid) = group_traces(&traces)?;
    let ranks_skipped = methods.len() < 2;
    if ranks_skipped {
        eprintln!("only one method present; rank tables skipped");
    } else {
        let table = aggregate_ranks(&traces, &DEFAULT_CHECKPOINTS)?;
        files.push((path("_ranks.csv"), table.mean_csv()));
        files.push((path("_ranks_per_problem.csv"), table.per_problem_csv()));
    }

    let mut be = String::from("method_a,method_b,iterations_a,seconds_a,iterations_b,seconds_b,break_even_seconds\n");
    let effort: Vec<(String, (f64, f64))> = methods
        .iter()
        .map(|m| {
            let ts: Vec<&Trace> = grid.iter().filter(|((mm, _), _)| mm == m).map(|(_, t)| *t).collect();
            (m.clone(), effort_to_optimum(&ts, target))
        })
        .collect();
    for (i, (ma, (na, ta))) in effort.iter().enumerate() {
        for (mb, (nb, tb)) in &effort[i + 1..] {
            let x = if na == nb { "undefined".to_string() } else { ((ta - tb) / (nb - na)).to_string() };
            be.push_str(&format!("{ma},{mb},{na},{ta},{nb},{tb},{x}\n"));
        }
    }
    if let Some(v) = &a.break_even {
        if v.len() != 4 {
            return Err(Error::InvalidArgument(format!("--break-even takes n1,t1,n2,t2, got {} values", v.len())));
        }
        let x = break_even(v[0] as usize, v[1], v[2] as usize, v[3])?;
        be.push_str(&format!("given,given,{},{},{},{},{x}\n", v[0], v[1], v[2], v[3]));
        println!("break-even for the given values: {x:.4} s per sequence");
    }
    files.push((path("_break_even.csv"), be));

    for (p, body) in &files {
        write_atomic(p, body.as_bytes())?;
    }
    for (m, (n, t)) in &effort {
        println!("{m}: mean iterations to optimum {n:.2}, proposal seconds {t:.4}");
    }
    Ok(ReportOutputs { files: files.into_iter().map(|(p, _)| p).collect(), ranks_skipped })
}
