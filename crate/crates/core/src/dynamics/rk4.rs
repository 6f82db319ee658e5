use crate::{Error, Real, Result};

/// Classical fourth-order Runge-Kutta step for an autonomous vector field.
pub fn rk4_step<T: Real>(
    rhs: impl Fn(&[T], &mut [T]),
    state: &[T],
    dt: T,
) -> Result<Vec<T>> {
    if !crate::linalg::all_finite(state) {
        return Err(Error::NonFinite("rk4_step input state"));
    }
    if !(dt > T::zero()) {
        return Err(Error::InvalidArgument("rk4_step needs dt > 0".into()));
    }
    let mut out = state.to_vec();
    Rk4::new(state.len()).step_in_place(&rhs, &mut out, dt);
    if !crate::linalg::all_finite(&out) {
        return Err(Error::NonFinite("rk4_step output state"));
    }
    Ok(out)
}

/// RK4 integrator with reusable stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4<T> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Real> Rk4<T> {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![T::zero(); n],
            k2: vec![T::zero(); n],
            k3: vec![T::zero(); n],
            k4: vec![T::zero(); n],
            tmp: vec![T::zero(); n],
        }
    }

    pub fn step_in_place(&mut self, rhs: &impl Fn(&[T], &mut [T]), x: &mut [T], dt: T) {
        let half = dt * T::lit(0.5);
        rhs(x, &mut self.k1);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + half * self.k1[i];
        }
        rhs(&self.tmp, &mut self.k2);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + half * self.k2[i];
        }
        rhs(&self.tmp, &mut self.k3);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        rhs(&self.tmp, &mut self.k4);
        let sixth = dt / T::lit(6.0);
        let two = T::lit(2.0);
        for i in 0..x.len() {
            x[i] += sixth * (self.k1[i] + two * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_identity() {
        let x = vec![1.5, -2.0, 3.25];
        let y = rk4_step(|_, d: &mut [f64]| d.fill(0.0), &x, 0.3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn exponential_decay_matches_taylor_polynomial() {
        let y = rk4_step(
            |s: &[f64], d: &mut [f64]| d[0] = -s[0],
            &[1.0],
            0.1,
        )
        .unwrap();
        let h: f64 = 0.1;
        let taylor = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((y[0] - taylor).abs() < 1e-15);
        assert!((y[0] - 0.9048375).abs() < 1e-7);
    }

    #[test]
    fn non_finite_input_is_flagged() {
        let r = rk4_step(|_, d: &mut [f64]| d.fill(0.0), &[f64::NAN], 0.1);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn works_in_single_precision() {
        let y = rk4_step(|s: &[f32], d: &mut [f32]| d[0] = -s[0], &[1.0f32], 0.1).unwrap();
        assert!((y[0] - 0.904_837_4).abs() < 1e-6);
    }
}
