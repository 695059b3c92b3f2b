//! Adam parameter updates with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer moments, one pair of buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// All-zero moments matching the given parameter shapes.
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub(crate) fn from_raw(step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        AdamState {
            step,
            first,
            second,
        }
    }
}

/// One Adam update over all parameters in place.
///
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, then the step divides
/// the bias-corrected first moment by `sqrt` of the corrected second.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::contract(format!(
            "adam_step with {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.first[i]) {
            return Err(Error::contract(format!(
                "adam_step shape mismatch at parameter {i}"
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let corr1 = 1.0 - ADAM_BETA1.powi(t);
    let corr2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_vec(vec![3], vec![0.5, -0.25, 2.0]).unwrap()];
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.001).unwrap();
        assert_eq!(params[0].data(), &[0.5, -0.25, 2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // Hand-executing the recurrences at t=1 with g=1:
        //   m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
        //   update = -lr * 1 / (1 + eps) ~ -lr.
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.001).unwrap();
        let expected = -0.001 / (1.0 + ADAM_EPS);
        assert!((params[0].item().unwrap() - expected).abs() < 1e-15);
        assert!((params[0].item().unwrap() + 0.001).abs() < 1e-10);
    }

    #[test]
    fn identical_inputs_update_identically() {
        let p0 = Tensor::from_vec(vec![2], vec![0.3, -0.7]).unwrap();
        let g = Tensor::from_vec(vec![2], vec![0.05, -0.2]).unwrap();
        let mut a = vec![p0.clone()];
        let mut b = vec![p0];
        let mut sa = AdamState::new(&a);
        let mut sb = AdamState::new(&b);
        for _ in 0..5 {
            adam_step(&mut a, &[g.clone()], &mut sa, 0.01).unwrap();
            adam_step(&mut b, &[g.clone()], &mut sb, 0.01).unwrap();
        }
        assert_eq!(a[0].data(), b[0].data());
        assert_eq!(sa, sb);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = vec![Tensor::scalar(0.0), Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(0.0), Tensor::scalar(f64::NAN)];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &grads, &mut state, 0.001).unwrap_err();
        assert!(err.to_string().contains("parameter 1"), "{err}");
        // State untouched on error.
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut params = vec![Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap()];
        let mut state = AdamState::new(&params);
        let mut rng = crate::rng::stream(3, "adam-test", 0);
        use rand::Rng;
        for _ in 0..20 {
            let g = vec![Tensor::from_vec(
                vec![4],
                (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap()];
            adam_step(&mut params, &g, &mut state, 0.01).unwrap();
            let (_, second) = state.moments();
            assert!(second[0].data().iter().all(|&v| v >= 0.0));
        }
    }
}
