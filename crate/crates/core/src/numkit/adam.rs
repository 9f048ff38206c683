use super::{NumError, ParamStore, Parameter, Tensor};

/// Moment estimates for Adam, one buffer pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zeroed state with the canonical constants (0.9, 0.999, 1e-8).
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1,
            beta2,
            epsilon,
        }
    }

    fn check_aligned(&self, params: &ParamStore) -> Result<(), NumError> {
        if self.first_moment.len() != params.len() || self.second_moment.len() != params.len() {
            return Err(NumError::Usage(format!(
                "optimizer state tracks {} tensors, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.first_moment).zip(&self.second_moment) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(NumError::Usage(format!(
                    "optimizer state misaligned at parameter `{}`",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter using its stored
/// gradient, at a single learning rate.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<(), NumError> {
    adam_step_grouped(params, state, |_| lr)
}

/// Adam update where each parameter's learning rate comes from `lr_of`
/// (parameter groups). All groups share one step counter.
///
/// A non-finite gradient anywhere aborts the step before anything is
/// modified.
pub fn adam_step_grouped(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr_of: impl Fn(&Parameter) -> f64,
) -> Result<(), NumError> {
    state.check_aligned(params)?;
    let mut lrs = Vec::with_capacity(params.len());
    for p in params.iter() {
        let lr = lr_of(p);
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NumError::Precondition(format!(
                "learning rate for `{}` must be positive, got {lr}",
                p.name
            )));
        }
        if !p.grad.is_finite() {
            return Err(NumError::NonFinite(format!("gradient of `{}` is not finite", p.name)));
        }
        lrs.push(lr);
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (((p, m), v), lr) in params
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
        .zip(lrs)
    {
        let g = p.grad.data();
        let w = p.value.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
