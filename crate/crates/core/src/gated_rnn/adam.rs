use super::GatedRnnModel;
use crate::{Error, Real, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates, stored flat in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn for_model(model: &GatedRnnModel<T>) -> Self {
        Self::new(model.parameter_count())
    }
}

/// Bias-corrected Adam step applied in place.
pub fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::mismatch("adam parameter count", params.len(), grads.len()));
    }
    state.step += 1;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let c1 = T::one() - T::lit(ADAM_BETA1.powi(state.step.min(i32::MAX as u64) as i32));
    let c2 = T::one() - T::lit(ADAM_BETA2.powi(state.step.min(i32::MAX as u64) as i32));
    let eps = T::lit(ADAM_EPSILON);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies an Adam step to every parameter block of `model`.
pub(crate) fn adam_step_model<T: Real>(
    model: &mut GatedRnnModel<T>,
    grads: &GatedRnnModel<T>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    let mut flat = model.flat_params();
    adam_update(&mut flat, &grads.flat_params(), state, lr)?;
    model.set_flat_params(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        adam_update(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p: Vec<f64> = vec![0.0, 0.0, 0.0];
        let mut s = AdamState::new(3);
        adam_update(&mut p, &[2.5, -0.01, 100.0], &mut s, 0.01).unwrap();
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * 0.01).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn minimises_a_parabola() {
        let mut x: Vec<f64> = vec![1.0];
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut s, 0.1).unwrap();
        }
        assert!(x[0].abs() < 0.1, "{}", x[0]);
    }
}
