use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic − cd| / max(|analytic|, |cd|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares tape gradients of `f` against fourth-order central differences
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` over every parameter entry. `f` must be deterministic: any noise it draws has to come
/// from a source it re-seeds on every call.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::invalid(format!("grad_check step {step} outside (0, 1e-3]")));
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.check_finite()?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::untraced();
        let v = f(&mut tape, store)?;
        let value = tape.item(v);
        if !value.is_finite() {
            return Err(Error::NonFinite("objective at a perturbed point".into()));
        }
        Ok(value)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        tolerance,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            let mut at = |offset: f64, store: &mut ParamStore| {
                store.get_mut(id).value.data_mut()[k] = orig + offset;
                let v = eval(store);
                store.get_mut(id).value.data_mut()[k] = orig;
                v
            };
            let (p1, m1) = (at(step, store)?, at(-step, store)?);
            let (p2, m2) = (at(2.0 * step, store)?, at(-2.0 * step, store)?);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic[pi][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
