//! Line-delimited problem suites and traces, binary model checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{mutate, sample_random};
use crate::error::{Error, Result};
use crate::harness::Trace;
use crate::model::{ModelConfig, Pftsn};
use crate::numerics::{ParamStore, Tensor};
use crate::prior::{sample_problem, GraphNode, PriorConfig, Sequence, TaskGraph, TsProblem};
use crate::rng::{derive_seed, seeded};
use crate::utility::{utility_vector, UtilityVector};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSQCKPT\0";
/// Relative tolerance when re-deriving stored utilities.
const STORED_PRECISION: f64 = 5e-9;

/// Rounds to nine significant decimal digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Writes through a sibling temporary file so a failed write leaves nothing at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.partial"));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub prior: PriorConfig,
    pub problems: usize,
    pub random_per_problem: usize,
    pub mutated_per_problem: usize,
    pub seed: u64,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredSequence {
    pub tasks: Sequence,
    pub utility: UtilityVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredGraph {
    pub max_len: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemRecord {
    pub problem_id: String,
    pub seed: u64,
    pub graph: StoredGraph,
    pub optimal: Vec<Sequence>,
    /// Always false: the prior resamples instead of truncating.
    pub truncated: bool,
    pub context_random: Vec<StoredSequence>,
    pub context_mutated: Vec<StoredSequence>,
}

impl ProblemRecord {
    pub fn to_problem(&self, prior: &PriorConfig) -> Result<TsProblem> {
        let g = &self.graph;
        let graph = TaskGraph::from_parts(g.max_len, g.nodes.clone(), g.edges.clone())?;
        TsProblem::from_graph(self.problem_id.clone(), prior.clone(), graph)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Footer {
    count: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: DatasetHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FooterLine {
    footer: Footer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<ProblemRecord>,
}

impl Dataset {
    /// Problems rebuilt from the stored graphs.
    pub fn problems(&self) -> Result<Vec<TsProblem>> {
        self.records.iter().map(|r| r.to_problem(&self.header.prior)).collect()
    }
}

fn stored(tasks: Sequence, optimal: &[Sequence]) -> Result<StoredSequence> {
    let u = utility_vector(&tasks, optimal)?;
    Ok(StoredSequence { tasks, utility: UtilityVector(u.values().iter().map(|&v| round_sig9(v)).collect()) })
}

/// Problem `index` of a suite. Everything about it follows from `(prior, seed, index)`.
pub fn generate_record(prior: &PriorConfig, seed: u64, split: &str, index: usize, random: usize, mutated: usize) -> Result<ProblemRecord> {
    let problem_seed = derive_seed(seed, index as u64);
    let mut rng = seeded(problem_seed);
    let p = sample_problem(prior, &mut rng)?;
    let context_random = sample_random(random, prior.num_tasks, prior.seq_len, &mut rng)
        .into_iter()
        .map(|s| stored(s, &p.optimal))
        .collect::<Result<_>>()?;
    let mut context_mutated = Vec::with_capacity(mutated);
    for _ in 0..mutated {
        context_mutated.push(stored(mutate(&p.optimal, prior.num_tasks, &mut rng)?.tasks, &p.optimal)?);
    }
    Ok(ProblemRecord {
        problem_id: format!("{split}-{index:06}"),
        seed: problem_seed,
        graph: StoredGraph { max_len: p.graph.max_len(), nodes: p.graph.nodes().to_vec(), edges: p.graph.edges().to_vec() },
        optimal: p.optimal,
        truncated: false,
        context_random,
        context_mutated,
    })
}

/// Generates a suite, spreading problems over `workers` threads; output order is by index.
pub fn generate_dataset(header: &DatasetHeader, workers: usize) -> Result<Dataset> {
    header.prior.validate()?;
    let n = header.problems;
    let workers = workers.max(1).min(n.max(1));
    let mut shards: Vec<Result<Vec<ProblemRecord>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| generate_record(&header.prior, header.seed, &header.split, i, header.random_per_problem, header.mutated_per_problem))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        shards = handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect();
    });
    let shards = shards.into_iter().collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        records.push(shards[i % workers][i / workers].clone());
    }
    Ok(Dataset { header: header.clone(), records })
}

pub fn dataset_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &HeaderLine { header: ds.header.clone() })?;
    out.push(b'\n');
    for r in &ds.records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let sha256 = hex::encode(Sha256::digest(&out));
    serde_json::to_writer(&mut out, &FooterLine { footer: Footer { count: ds.records.len(), sha256 } })?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_bytes(ds)?)
}

fn format_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("line {line}: {msg}"))
}

/// Strict inverse of [`dataset_bytes`], including the validation pass.
pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("dataset is not UTF-8: {e}")))?;
    if !text.ends_with('\n') {
        return Err(Error::Format("truncated dataset: last line is incomplete".into()));
    }
    let lines: Vec<&str> = text[..text.len() - 1].split('\n').collect();
    let first = lines.first().copied().unwrap_or("");
    let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| format_err(1, e))?;
    let version = raw.pointer("/header/format_version").and_then(|v| v.as_u64());
    if version != Some(DATASET_FORMAT_VERSION as u64) {
        return Err(Error::Format(format!("unsupported dataset format version {version:?}, expected {DATASET_FORMAT_VERSION}")));
    }
    let header = serde_json::from_value::<HeaderLine>(raw).map_err(|e| format_err(1, e))?.header;
    let Some(last) = lines.last().filter(|l| l.starts_with("{\"footer\"")) else {
        return Err(Error::Format("truncated dataset: footer missing".into()));
    };
    let footer = serde_json::from_str::<FooterLine>(last).map_err(|e| format_err(lines.len(), e))?.footer;
    let body_len = text.len() - last.len() - 1;
    let digest = hex::encode(Sha256::digest(&bytes[..body_len]));
    if digest != footer.sha256 {
        return Err(Error::Format(format!("checksum mismatch: stored {}, computed {digest}", footer.sha256)));
    }
    let body = &lines[1..lines.len() - 1];
    if body.len() != footer.count || footer.count != header.problems {
        return Err(Error::Format(format!(
            "record count mismatch: header {}, footer {}, found {}",
            header.problems,
            footer.count,
            body.len()
        )));
    }
    let mut records = Vec::with_capacity(body.len());
    for (i, l) in body.iter().enumerate() {
        records.push(serde_json::from_str::<ProblemRecord>(l).map_err(|e| format_err(i + 2, e))?);
    }
    let ds = Dataset { header, records };
    validate_dataset(&ds)?;
    Ok(ds)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&fs::read(path)?)
}

/// Unique ids, optimal sets re-enumerated from the graphs, utilities re-derived.
pub fn validate_dataset(ds: &Dataset) -> Result<()> {
    let mut ids = std::collections::BTreeSet::new();
    for r in &ds.records {
        if !ids.insert(r.problem_id.as_str()) {
            return Err(Error::Format(format!("duplicate problem id {}", r.problem_id)));
        }
        let p = r.to_problem(&ds.header.prior).map_err(|e| Error::Format(format!("problem {}: {e}", r.problem_id)))?;
        if p.optimal != r.optimal {
            return Err(Error::Format(format!("problem {}: stored optimal set differs from its graph", r.problem_id)));
        }
        for s in r.context_random.iter().chain(&r.context_mutated) {
            let u = utility_vector(&s.tasks, &p.optimal)?;
            let ok = u.len() == s.utility.len()
                && u.values().iter().zip(s.utility.values()).all(|(a, b)| (a - b).abs() <= STORED_PRECISION * a.abs().max(1e-300));
            if !ok {
                return Err(Error::Format(format!("problem {}: stored utility of {:?} does not match its graph", r.problem_id, s.tasks)));
            }
        }
    }
    Ok(())
}

pub fn traces_bytes(traces: &[Trace]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_traces(traces: &[Trace], path: &Path) -> Result<()> {
    write_atomic(path, &traces_bytes(traces)?)
}

pub fn read_traces(path: &Path) -> Result<Vec<Trace>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
    pub input_bias: bool,
    pub task_normalization: String,
    pub step: usize,
}

fn manifest(params: &ParamStore) -> Vec<ManifestEntry> {
    params.iter().map(|p| ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect()
}

pub fn checkpoint_bytes(model: &Pftsn, step: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.config().clone(),
        manifest: manifest(model.params()),
        input_bias: true,
        task_normalization: "id/N".into(),
        step,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 16 + 8 * model.params().num_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Pftsn, step: usize, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model, step)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Pftsn, CheckpointHeader)> {
    let ck = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ck("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| ck("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| ck(format!("bad checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ck(format!("unsupported checkpoint format version {}", header.format_version)));
    }
    if !header.input_bias || header.task_normalization != "id/N" {
        return Err(ck("checkpoint uses an unsupported input encoding".into()));
    }
    let mut model = Pftsn::new(header.model.clone(), 0).map_err(|e| ck(format!("checkpoint model config: {e}")))?;
    let expected = manifest(model.params());
    for (i, e) in expected.iter().enumerate() {
        match header.manifest.get(i) {
            Some(m) if m == e => {}
            Some(m) => {
                return Err(ck(format!(
                    "parameter {} in checkpoint (shape {:?}) does not match expected {} (shape {:?})",
                    m.name, m.shape, e.name, e.shape
                )))
            }
            None => return Err(ck(format!("parameter {} missing from checkpoint", e.name))),
        }
    }
    if let Some(extra) = header.manifest.get(expected.len()) {
        return Err(ck(format!("unexpected parameter {} in checkpoint", extra.name)));
    }
    let mut data = &bytes[16 + len..];
    for p in model.params_mut().iter_mut() {
        let n = p.value.numel();
        if data.len() < 8 * n {
            return Err(ck(format!("checkpoint data ends inside parameter {}", p.name)));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        p.value = Tensor::new(p.value.shape().to_vec(), values)?;
        data = &data[8 * n..];
    }
    if !data.is_empty() {
        return Err(ck(format!("{} trailing bytes after parameter data", data.len())));
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(Pftsn, CheckpointHeader)> {
    parse_checkpoint(&fs::read(path)?)
}
