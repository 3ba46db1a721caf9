//! Adam with bias correction, and the cosine learning-rate decay.

use std::f64::consts::PI;

use super::Tensor;
use crate::error::{contract, Error, Result};

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state shaped like `params`, with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first_moment[i].len() != p.len() {
            return contract(format!(
                "adam_step: parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
        if !g.is_finite() {
            return Err(Error::Numeric {
                op: "adam_step".into(),
            });
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Cosine decay from `initial_lr` to zero over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, total_steps: u64) -> Result<Self> {
        if !(initial_lr >= 0.0) || total_steps == 0 {
            return contract(format!(
                "lr schedule needs lr ≥ 0 and total_steps > 0, got {initial_lr} / {total_steps}"
            ));
        }
        Ok(Self {
            initial_lr,
            total_steps,
        })
    }
}

/// `η0 · ½ · (1 + cos(π t / total_steps))`
pub fn cosine_lr(step: u64, sched: &LrSchedule) -> Result<f64> {
    if step > sched.total_steps {
        return contract(format!(
            "cosine_lr: step {step} beyond schedule length {}",
            sched.total_steps
        ));
    }
    let frac = step as f64 / sched.total_steps as f64;
    Ok(sched.initial_lr * 0.5 * (1.0 + (PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![vec_t(&[1.0, -2.0])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec_t(&[0.0, 0.0])], &mut st, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![vec_t(&[1.0, -2.0])];
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[vec_t(&[0.3, -7.0])], &mut st, 0.0).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step_count, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![vec_t(&[0.0])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec_t(&[1.0])], &mut st, 1e-3).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + ε).
        assert!((p[0].data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![vec_t(&[0.0])];
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[vec_t(&[f64::NAN])], &mut st, 1e-3);
        assert!(matches!(err, Err(Error::Numeric { .. })));
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::new(0.001, 100).unwrap();
        assert_eq!(cosine_lr(0, &s).unwrap(), 0.001);
        assert!(cosine_lr(100, &s).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, &s).unwrap() - 0.0005).abs() < 1e-15);
        assert!(cosine_lr(101, &s).is_err());
    }

    #[test]
    fn cosine_is_non_increasing() {
        let s = LrSchedule::new(0.01, 37).unwrap();
        let lrs: Vec<f64> = (0..=37).map(|t| cosine_lr(t, &s).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
