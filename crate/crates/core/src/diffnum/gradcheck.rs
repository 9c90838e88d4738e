//! Central finite-difference verification of taped gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Default perturbation before scaling by `max(1, |θ|)`.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Per-parameter outcome of [`gradcheck_detailed`].
#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares reverse-mode gradients of `f` against central differences and
/// returns the maximum relative error over every parameter coordinate.
///
/// `f` rebuilds the scalar on a fresh tape each call; it must be
/// deterministic. Relative error is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn gradcheck<F>(f: F, params: &ParamStore, h: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var>,
{
    Ok(gradcheck_detailed(f, params, h)?
        .iter()
        .map(|e| e.max_rel_error)
        .fold(0.0, f64::max))
}

pub fn gradcheck_detailed<F>(f: F, params: &ParamStore, h: f64) -> Result<Vec<GradcheckEntry>>
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        check_scalar(tape.value(out).item())?;
        tape.backward(out)?.param_grads(params)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        check_scalar(tape.value(out).item())
    };
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let mut entry = GradcheckEntry {
            name: params.names()[id.index()].clone(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..params.get(id).len() {
            let numeric = central_difference(&mut work, id, i, h, &eval)?;
            let a = analytic[id.index()].data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst_index = i;
            }
        }
        report.push(entry);
    }
    Ok(report)
}

fn central_difference(
    work: &mut ParamStore,
    id: ParamId,
    i: usize,
    h: f64,
    eval: &impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = work.get(id).data()[i];
    let step = h * orig.abs().max(1.0);
    work.get_mut(id).data_mut()[i] = orig + step;
    let plus = eval(work);
    work.get_mut(id).data_mut()[i] = orig - step;
    let minus = eval(work);
    work.get_mut(id).data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * step))
}

fn check_scalar(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Computation("gradcheck objective is not finite".into()))
    }
}
