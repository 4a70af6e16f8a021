use super::{ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter group.
///
/// Increments the shared step counter and zeroes all gradients on success.
/// A non-finite gradient aborts before any parameter is touched.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in store.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGradient(name.clone()));
        }
    }
    let t = (store.step() + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (_, p) in store.iter_mut() {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            p.value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p.grad[i] = 0.0;
        }
    }
    store.bump_step();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Param;

    fn scalar_store(theta: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut p = Param::zeros(1, 1);
        p.value[0] = theta;
        store.insert("theta", p).unwrap();
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        store.get_mut("theta").unwrap().grad[0] = 1.0;
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut store, &cfg).unwrap();
        let theta = store.get("theta").unwrap().value[0];
        // bias-corrected first step: -lr * g / (|g| + eps) ~= -lr
        assert!((theta + 0.1).abs() < 1e-6);
        assert_eq!(store.step(), 1);
        assert_eq!(store.get("theta").unwrap().grad[0], 0.0);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = scalar_store(1.234);
        adam_step(&mut store, &AdamConfig::default()).unwrap();
        assert_eq!(store.get("theta").unwrap().value[0], 1.234);
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        // Hand-computed moment recursion for constant gradient 1, lr 0.1.
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut store = scalar_store(0.0);
        store.get_mut("theta").unwrap().grad[0] = 1.0;
        adam_step(&mut store, &cfg).unwrap();
        store.get_mut("theta").unwrap().grad[0] = 1.0;
        adam_step(&mut store, &cfg).unwrap();

        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut theta: f64 = 0.0;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let m_hat = m / (1.0 - f64::powi(b1, t));
            let v_hat = v / (1.0 - f64::powi(b2, t));
            theta -= lr * m_hat / (f64::sqrt(v_hat) + eps);
        }
        assert!((store.get("theta").unwrap().value[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut store = scalar_store(0.0);
        store.get_mut("theta").unwrap().grad[0] = f64::NAN;
        let err = adam_step(&mut store, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("theta"));
        // aborted before mutating anything
        assert_eq!(store.step(), 0);
    }
}
