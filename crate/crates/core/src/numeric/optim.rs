use serde::{Deserialize, Serialize};

use super::tensor::{Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("theta", Tensor::scalar(theta));
        p
    }

    fn grad(g: f64) -> Gradients {
        Gradients(vec![Tensor::scalar(g)])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(1.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grad(0.0), &mut s, &AdamConfig::default());
        assert_eq!(p.get(p.id("theta").unwrap()).data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for g in [3.0, -0.25] {
            let mut p = single(0.0);
            let mut s = AdamState::new(&p);
            let cfg = AdamConfig {
                lr: 0.01,
                ..Default::default()
            };
            adam_step(&mut p, &grad(g), &mut s, &cfg);
            let moved = p.get(p.id("theta").unwrap()).data()[0];
            assert!((moved + 0.01 * g.signum()).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let id = p.id("theta").unwrap();
        for _ in 0..100 {
            let theta = p.get(id).data()[0];
            adam_step(&mut p, &grad(2.0 * theta), &mut s, &cfg);
        }
        let theta = p.get(id).data()[0];
        // frozen from a reference run of the update rule
        assert!((theta - ADAM_QUADRATIC_100).abs() < 1e-10, "{theta}");
        assert!(theta.abs() < 0.05);
    }

    const ADAM_QUADRATIC_100: f64 = 0.002936675681102549;
}
