use serde::{Deserialize, Serialize};

use super::tensor::Real;
use super::unet::{Gradients, UNet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if params.len() != grads.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Shape("Adam buffers differ in length".into()));
    }
    if t == 0 {
        return Err(Error::Optimizer("Adam step index starts at 1".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Optimizer(format!("non-finite gradient at index {i}")));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps, one) = (T::of(lr), T::of(cfg.epsilon), T::one());
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] = params[i] - lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Moment buffers for every model parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &UNet<T>, config: AdamConfig) -> Self {
        let bufs: Vec<Vec<T>> = model
            .layers()
            .iter()
            .flat_map(|l| [vec![T::zero(); l.weight.len()], vec![T::zero(); l.bias.len()]])
            .collect();
        Self {
            config,
            t: 0,
            m: bufs.clone(),
            v: bufs,
        }
    }

    /// Checks every gradient before touching any parameter.
    pub fn step(&mut self, model: &mut UNet<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Optimizer("non-finite gradient; step aborted".into()));
        }
        self.t += 1;
        let t = self.t;
        let cfg = self.config;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut res = Ok(());
        model.for_each_param_mut(grads, |k, p, g| {
            if res.is_ok() {
                res = adam_step(p, g, &mut m[k], &mut v[k], lr, &cfg, t);
            }
        });
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// The textbook recurrences, evaluated independently.
    fn hand_adam(p0: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    fn run(p0: f64, grads: &[f64]) -> f64 {
        let (mut p, mut m, mut v) = ([p0], [0.0], [0.0]);
        for (i, g) in grads.iter().enumerate() {
            adam_step(&mut p, &[*g], &mut m, &mut v, 1e-3, &AdamConfig::default(), i as u64 + 1).unwrap();
        }
        p[0]
    }

    #[test]
    fn hand_values() {
        assert_abs_diff_eq!(run(1.0, &[1.0]), 0.999, epsilon = 1e-6);
        assert_abs_diff_eq!(run(1.0, &[1.0, 1.0]), 0.998, epsilon = 1e-6);
        assert_abs_diff_eq!(run(1.0, &[1.0, 1.0]), hand_adam(1.0, &[1.0, 1.0], 1e-3), epsilon = 1e-15);
        assert_abs_diff_eq!(run(0.3, &[0.5, -2.0, 0.1]), hand_adam(0.3, &[0.5, -2.0, 0.1], 1e-3), epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_never_moves() {
        assert_eq!(run(0.42, &[0.0; 50]), 0.42);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut p, mut m, mut v) = ([1.0f32, 2.0], [0.0; 2], [0.0; 2]);
        let r = adam_step(&mut p, &[0.1, f32::NAN], &mut m, &mut v, 1e-3, &AdamConfig::default(), 1);
        assert!(matches!(r, Err(Error::Optimizer(_))));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(m, [0.0, 0.0]);
    }
}
