//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{ParamStore, Tape, Var};

/// Compares the tape gradient of `program` at `point` with central finite
/// differences, returning the largest `|analytic - numeric| / max(1, |numeric|)`
/// over every parameter entry.
///
/// `program` must build a scalar loss from the parameters in the store it is
/// handed, reading them through [`Tape::param`].
pub fn grad_check<F>(program: F, point: &ParamStore, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut analytic = point.fresh_grads();
    let mut tape = Tape::new();
    let loss = program(&mut tape, point)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(Error::NonFinite(op));
    }
    tape.backward(loss, &mut analytic)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = program(&mut t, store)?;
        if let Some(op) = t.first_non_finite() {
            return Err(Error::NonFinite(op));
        }
        Ok(t.value(l).item())
    };

    let names: Vec<String> = point.names().map(str::to_string).collect();
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for name in &names {
        let n = point.expect(name)?.numel();
        for k in 0..n {
            let orig = point.expect(name)?.data()[k];
            probe.get_mut(name).expect("present").data_mut()[k] = orig + epsilon;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[k] = orig - epsilon;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.grad(name).expect("present").data()[k];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
