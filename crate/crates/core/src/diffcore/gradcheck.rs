use super::{DiffError, ParamStore, Tape, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic parameter gradients of a scalar graph with central
/// differences.
///
/// `build` must construct the same deterministic graph from `store` on every
/// call (dropout off). Only parameters whose names start with one of
/// `prefixes` are perturbed; an empty list checks everything. The error for
/// one entry is `|a - n| / max(1e-12, |a| + |n|)`.
pub fn grad_check<F>(
    store: &ParamStore,
    epsilon: f64,
    prefixes: &[&str],
    mut build: F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, DiffError>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let out = build(&mut tape, &work)?;
    if tape.value(out).len() != 1 {
        return Err(DiffError::NonScalar(tape.value(out).shape().to_vec()));
    }
    tape.backward_scalar(out, &mut work)?;
    let analytic = work.clone();

    let names: Vec<String> = store
        .names()
        .filter(|n| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let o = build(&mut t, s)?;
        Ok(t.value(o).item())
    };
    for name in &names {
        let n = store.get(name)?.len();
        for i in 0..n {
            let orig = store.get(name)?.data()[i];
            work.value_mut(name).unwrap().data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work.value_mut(name).unwrap().data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work.value_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.grad(name)?.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
