use super::{DiffError, ParamStore, Tape, Var};

/// Compares the tape gradient of `loss_fn` against central differences.
///
/// `loss_fn` builds a scalar loss on the supplied tape from the supplied
/// parameters. The result is the maximum over parameters of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(store: &ParamStore, step: f64, mut loss_fn: F) -> Result<f64, DiffError>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, DiffError>,
{
    if !(step > 0.0) {
        return Err(DiffError::Shape { op: "finite_diff_check", detail: format!("step must be positive, got {step}") });
    }
    let mut tape = Tape::new();
    let out = loss_fn(store, &mut tape)?;
    let analytic = tape.backward(out, store)?;

    let mut probe = store.clone();
    let mut eval = |p: &ParamStore, index: usize| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let v = loss_fn(p, &mut t)?;
        let x = t.value(v).item();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(DiffError::NonFinite { index })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..store.numel() {
        let orig = *probe.flat_mut(i);
        *probe.flat_mut(i) = orig + step;
        let plus = eval(&probe, i)?;
        *probe.flat_mut(i) = orig - step;
        let minus = eval(&probe, i)?;
        *probe.flat_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
