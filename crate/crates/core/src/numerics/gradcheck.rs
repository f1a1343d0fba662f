//! Central finite-difference check of tape gradients.

use rand::seq::index;

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Tape, Var};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a - b| / max(1e-12, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

/// Compares reverse-mode gradients of `build` against central differences with step `h`.
///
/// `build` must construct the scalar objective on a fresh tape and be deterministic.
/// With `max_coords = Some(n)`, a seeded random subset of `n` coordinates is checked
/// when the model has more than `n` values; otherwise every coordinate is checked.
pub fn grad_check<F>(params: &ParamStore, build: F, h: f64, max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &analytic)?;
    tape.backward_into(loss, &mut analytic)?;

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        coords.extend((0..p.value.numel()).map(|j| (pi, j)));
    }
    if let Some(limit) = max_coords {
        if coords.len() > limit {
            let mut rng = seeded(seed);
            let mut picked: Vec<usize> = index::sample(&mut rng, coords.len(), limit).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = build(&mut t, store)?;
        Ok(t.value(v).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: coords.len(), worst: None };
    for (pi, j) in coords {
        let id = ParamId(pi);
        let original = probe.value(id).data()[j];
        probe.get_mut(id).value.data_mut()[j] = original + h;
        let plus = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[j] = original - h;
        let minus = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[j] = original;
        let fd = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic.get(id).grad[j], fd);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.get(id).name.clone(), j));
        }
    }
    Ok(report)
}
