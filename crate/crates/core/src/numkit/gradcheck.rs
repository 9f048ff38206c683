use super::{DiffTensor, NumError, ParamId, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat element index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at `worst`.
    pub worst_values: Option<(f64, f64)>,
    /// Largest `|analytic - numeric|` over all elements.
    pub max_abs_error: f64,
    /// Loss at the unperturbed parameters. Central differences cannot
    /// resolve gradients much below `f64::EPSILON * |loss| / (2h)`.
    pub loss: f64,
    pub checked: usize,
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` must build the loss on the supplied tape from the parameters in the
/// store and be deterministic. For every scalar parameter the relative error
/// is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; the maximum
/// over all parameters is reported. Parameter values are restored exactly.
pub fn grad_check<F, E>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<DiffTensor, E>,
    E: From<NumError>,
{
    if !(h > 0.0) {
        return Err(NumError::Precondition(format!("step must be positive, got {h}")).into());
    }
    let saved_grads: Vec<_> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let loss_value = tape.item(loss)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    for (p, g) in store.iter_mut().zip(saved_grads) {
        p.grad = g;
    }

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.item(loss)?;
        if !v.is_finite() {
            return Err(NumError::NonFinite("loss is not finite at a perturbed point".into()).into());
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: None,
        max_abs_error: 0.0,
        loss: loss_value,
        checked: 0,
    };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let n = store.get(id)?.value.len();
        for k in 0..n {
            let orig = store.get(id)?.value.data()[k];
            store.get_mut(id)?.value.data_mut()[k] = orig + h;
            let plus = eval(store);
            store.get_mut(id)?.value.data_mut()[k] = orig - h;
            let minus = eval(store);
            store.get_mut(id)?.value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[pi][k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((store.get(id)?.name.clone(), k));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
