//! Context sets: random sequences, mutated near-optimal sequences and their
//! adaptive mixture.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prior::{Sequence, TaskId, TsProblem};
use crate::rng::Rng;
use crate::utility::{utility_vector, UtilityVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Random,
    Mutated,
    Proposed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tasks: Sequence,
    pub utility: UtilityVector,
    pub source: Source,
}

impl LabeledSequence {
    pub fn label(problem: &TsProblem, tasks: Sequence, source: Source) -> Result<Self> {
        let utility = utility_vector(&tasks, &problem.optimal)?;
        Ok(Self { tasks, utility, source })
    }

    pub fn scalar(&self) -> f64 {
        self.utility.scalar()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextBatch {
    pub problem_id: String,
    pub sequences: Vec<LabeledSequence>,
    pub c_min: usize,
    pub c_max: usize,
}

impl ContextBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

pub fn random_sequence(num_tasks: usize, len: usize, rng: &mut Rng) -> Sequence {
    (0..len).map(|_| TaskId(rng.gen_range(0..num_tasks) as u16)).collect()
}

pub fn sample_random(n: usize, num_tasks: usize, len: usize, rng: &mut Rng) -> Vec<Sequence> {
    (0..n).map(|_| random_sequence(num_tasks, len, rng)).collect()
}

/// Result of [`mutate`]. `optimal` is set only when every retry produced a member of the optimal set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mutation {
    pub tasks: Sequence,
    pub source: Sequence,
    pub kept: usize,
    pub optimal: bool,
}

const SUFFIX_RETRIES: usize = 16;
const SOURCE_RETRIES: usize = 8;

/// Keeps a random-length prefix of a random optimal sequence and resamples the rest.
///
/// The kept length is drawn from `floor(L/2)..=L-1`, so at least one position is redrawn.
pub fn mutate(optimal: &[Sequence], num_tasks: usize, rng: &mut Rng) -> Result<Mutation> {
    let Some(first) = optimal.first() else {
        return Err(invalid("mutate needs a non-empty optimal set"));
    };
    let len = first.len();
    let mut last = None;
    for _ in 0..SOURCE_RETRIES {
        let source = optimal.choose(rng).expect("non-empty").clone();
        let kept = rng.gen_range(len / 2..len);
        for _ in 0..SUFFIX_RETRIES {
            let mut tasks = source[..kept].to_vec();
            tasks.extend((kept..len).map(|_| TaskId(rng.gen_range(0..num_tasks) as u16)));
            let is_opt = optimal.contains(&tasks);
            if !is_opt {
                return Ok(Mutation { tasks, source, kept, optimal: false });
            }
            last = Some(Mutation { tasks, source: source.clone(), kept, optimal: true });
        }
    }
    Ok(last.expect("at least one attempt"))
}

/// `C_mut = floor(C * (C - C_min) / (C_max - C_min))`, `C_rand = C - C_mut`.
pub fn mix_context(c: usize, c_min: usize, c_max: usize) -> Result<(usize, usize)> {
    if c_max <= c_min {
        return Err(Error::InvalidConfig(format!("c_max ({c_max}) must exceed c_min ({c_min})")));
    }
    if c < c_min || c > c_max {
        return Err(invalid(format!("context size {c} outside [{c_min}, {c_max}]")));
    }
    let c_mut = c * (c - c_min) / (c_max - c_min);
    Ok((c - c_mut, c_mut))
}

/// Same as [`mix_context`] but tolerates the degenerate range `c_min == c_max` (all random).
fn split_for(c: usize, c_min: usize, c_max: usize) -> Result<(usize, usize)> {
    if c_min == c_max {
        if c != c_min {
            return Err(invalid(format!("context size {c} outside [{c_min}, {c_max}]")));
        }
        return Ok((c, 0));
    }
    mix_context(c, c_min, c_max)
}

const RANDOM_RETRIES: usize = 256;

fn non_optimal_random(problem: &TsProblem, rng: &mut Rng) -> Result<Sequence> {
    for _ in 0..RANDOM_RETRIES {
        let s = random_sequence(problem.num_tasks(), problem.seq_len(), rng);
        if !problem.is_optimal(&s) {
            return Ok(s);
        }
    }
    Err(Error::GenerationFailed {
        attempts: RANDOM_RETRIES,
        reason: format!("problem {} has only optimal sequences", problem.problem_id),
    })
}

/// A non-optimal training context with exactly `c` sequences.
pub fn build_context_of_size(problem: &TsProblem, c: usize, c_min: usize, c_max: usize, rng: &mut Rng) -> Result<ContextBatch> {
    let (c_rand, c_mut) = split_for(c, c_min, c_max)?;
    let mut sequences = Vec::with_capacity(c);
    for _ in 0..c_rand {
        let s = non_optimal_random(problem, rng)?;
        sequences.push(LabeledSequence::label(problem, s, Source::Random)?);
    }
    let mut produced = 0;
    while produced < c_mut {
        let m = mutate(&problem.optimal, problem.num_tasks(), rng)?;
        let s = if m.optimal { non_optimal_random(problem, rng)? } else { m.tasks };
        let source = if m.optimal { Source::Random } else { Source::Mutated };
        sequences.push(LabeledSequence::label(problem, s, source)?);
        produced += 1;
    }
    Ok(ContextBatch { problem_id: problem.problem_id.clone(), sequences, c_min, c_max })
}

/// Draws `C ~ Uniform{c_min..=c_max}` and assembles the mixed context.
pub fn build_training_context(problem: &TsProblem, c_min: usize, c_max: usize, rng: &mut Rng) -> Result<ContextBatch> {
    if c_min < 1 || c_max < c_min {
        return Err(Error::InvalidConfig(format!("bad context range [{c_min}, {c_max}]")));
    }
    let c = rng.gen_range(c_min..=c_max);
    build_context_of_size(problem, c, c_min, c_max, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{build_from_ops, sample_problem, seq, Expansion, PriorConfig};
    use crate::rng::seeded;
    use crate::utility::hamming;

    fn small() -> PriorConfig {
        PriorConfig::default()
    }

    #[test]
    fn random_shapes() {
        let mut rng = seeded(1);
        assert!(sample_random(0, 8, 8, &mut rng).is_empty());
        let s = sample_random(16, 8, 8, &mut rng);
        assert_eq!(s.len(), 16);
        assert!(s.iter().all(|x| x.len() == 8 && x.iter().all(|t| t.0 < 8)));
        let c = sample_random(5, 1, 4, &mut rng);
        assert!(c.iter().all(|x| x == &seq(&[0, 0, 0, 0])));
    }

    #[test]
    fn mix_fixtures() {
        assert_eq!(mix_context(4, 4, 16).unwrap(), (4, 0));
        assert_eq!(mix_context(16, 4, 16).unwrap(), (0, 16));
        assert_eq!(mix_context(10, 4, 16).unwrap(), (5, 5));
        assert!(matches!(mix_context(4, 4, 4), Err(Error::InvalidConfig(_))));
        assert!(mix_context(3, 4, 16).is_err());
        for c in 4..=16 {
            let (r, m) = mix_context(c, 4, 16).unwrap();
            assert_eq!(r + m, c);
        }
    }

    #[test]
    fn mutation_preserves_prefix() {
        let mut rng = seeded(5);
        let c = small();
        for _ in 0..100 {
            let p = sample_problem(&c, &mut rng).unwrap();
            let m = mutate(&p.optimal, 8, &mut rng).unwrap();
            assert!(m.kept >= 4 && m.kept <= 7);
            assert_eq!(&m.tasks[..m.kept], &m.source[..m.kept]);
            let u = utility_vector(&m.tasks, std::slice::from_ref(&m.source)).unwrap();
            assert!(u.values()[..m.kept].iter().all(|&x| x == 1.0));
            if !m.optimal {
                assert!(!p.is_optimal(&m.tasks));
            }
        }
    }

    #[test]
    fn mutation_length_two() {
        let opt = vec![seq(&[3, 1])];
        let mut rng = seeded(2);
        for _ in 0..20 {
            let m = mutate(&opt, 4, &mut rng).unwrap();
            assert_eq!(m.kept, 1);
            assert!(!m.optimal);
            assert_eq!(hamming(&m.tasks, &opt[0]).unwrap(), 1);
        }
    }

    #[test]
    fn mutation_flags_when_only_optimal_exists() {
        // N = 2, every length-2 sequence starting with 0 is optimal
        let opt = vec![seq(&[0, 0]), seq(&[0, 1])];
        let m = mutate(&opt, 2, &mut seeded(0)).unwrap();
        assert!(m.optimal);
    }

    #[test]
    fn degenerate_range_is_all_random() {
        let p = sample_problem(&small(), &mut seeded(4)).unwrap();
        let mut rng = seeded(8);
        for _ in 0..10 {
            let b = build_training_context(&p, 4, 4, &mut rng).unwrap();
            assert_eq!(b.len(), 4);
            assert!(b.sequences.iter().all(|s| s.source == Source::Random));
        }
    }

    #[test]
    fn training_batches_are_never_optimal() {
        let mut rng = seeded(9);
        let c = PriorConfig { num_tasks: 2, seq_len: 2, ..small() };
        for _ in 0..200 {
            let p = sample_problem(&c, &mut rng).unwrap();
            if p.optimal.len() == 4 {
                continue;
            }
            let b = build_training_context(&p, 4, 16, &mut rng).unwrap();
            assert!(b.sequences.iter().all(|s| s.scalar() < 2.0));
            assert!(b.len() >= 4 && b.len() <= 16);
        }
    }

    #[test]
    fn every_sequence_optimal_is_an_error() {
        let c = PriorConfig { num_tasks: 2, seq_len: 1, ..small() };
        let p = build_from_ops(&c, &[Expansion::Or(vec![TaskId(0), TaskId(1)])]).unwrap();
        assert!(build_training_context(&p, 4, 4, &mut seeded(0)).is_err());
    }

    #[test]
    fn contexts_are_reproducible() {
        let p = sample_problem(&small(), &mut seeded(4)).unwrap();
        let a = build_training_context(&p, 4, 16, &mut seeded(77)).unwrap();
        let b = build_training_context(&p, 4, 16, &mut seeded(77)).unwrap();
        assert_eq!(a, b);
    }
}
