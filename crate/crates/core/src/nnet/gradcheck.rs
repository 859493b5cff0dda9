//! Central finite-difference verification of [`Tape`] gradients.

use super::loss::weighted_bce_with_grad;
use super::tensor::Tensor;
use super::unet::{Tape, UNet};
use crate::{Error, Result};

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub worst_parameter: usize,
    /// Parameters whose step had to shrink to stay off ReLU/pool kinks.
    pub reduced_steps: usize,
    /// Parameters for which no kink-free step was found (excluded).
    pub unresolved: usize,
}

/// Settings for [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub defect_weight: f64,
    /// How many times the step may be divided by 10 near a kink.
    pub max_reductions: u32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            defect_weight: 3.0,
            max_reductions: 4,
        }
    }
}

fn loss_and_pattern(model: &UNet<f64>, x: &Tensor<f64>, y: &[f64], w: f64) -> Result<(f64, Vec<u32>)> {
    let mut tape = Tape::new();
    let p = model.forward_recorded(x, &mut tape)?;
    let (l, _) = weighted_bce_with_grad(p.data(), y, w)?;
    Ok((l, tape.activation_pattern()))
}

/// Compare analytic gradients of the weighted BCE loss against central
/// differences for every parameter.
///
/// A central difference straddling a ReLU or max-pool switch measures a
/// different piece of the piecewise-smooth loss. When either perturbed pass
/// changes the activation pattern the step is shrunk tenfold and retried.
pub fn gradient_check(
    model: &UNet<f64>,
    input: &Tensor<f64>,
    target: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) || !(cfg.floor > 0.0) {
        return Err(Error::Argument("step and floor must be > 0".into()));
    }
    let mut tape = Tape::new();
    let probs = model.forward_recorded(input, &mut tape)?;
    let (_, gl) = weighted_bce_with_grad(probs.data(), target, cfg.defect_weight)?;
    let grad_logits = Tensor::from_vec(probs.shape(), gl)?;
    let analytic = tape.backward_logits(model, &grad_logits)?.flat();
    let base_pattern = tape.activation_pattern();

    let mut work = model.clone();
    let mut report = GradCheckReport {
        parameters: analytic.len(),
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst_parameter: 0,
        reduced_steps: 0,
        unresolved: 0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *work.parameter_mut(i).expect("index in range");
        let mut h = cfg.step;
        let mut numeric = None;
        for attempt in 0..=cfg.max_reductions {
            *work.parameter_mut(i).expect("index") = orig + h;
            let (lp, pp) = loss_and_pattern(&work, input, target, cfg.defect_weight)?;
            *work.parameter_mut(i).expect("index") = orig - h;
            let (lm, pm) = loss_and_pattern(&work, input, target, cfg.defect_weight)?;
            *work.parameter_mut(i).expect("index") = orig;
            if pp == base_pattern && pm == base_pattern {
                if attempt > 0 {
                    report.reduced_steps += 1;
                }
                numeric = Some((lp - lm) / (2.0 * h));
                break;
            }
            h /= 10.0;
        }
        let Some(n) = numeric else {
            report.unresolved += 1;
            continue;
        };
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(cfg.floor);
        report.max_absolute_error = report.max_absolute_error.max(abs);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_parameter = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::UNetConfig;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn tiny_model_gradients_match() {
        let cfg = UNetConfig { depth: 1, base_channels: 2, input_size: 8, ..UNetConfig::default() };
        let model = UNet::<f64>::new(cfg, 5).unwrap();
        let mut rng = rng_from_seed(6);
        let x = Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y: Vec<f64> = (0..64).map(|_| f64::from(rng.random::<bool>())).collect();
        let r = gradient_check(&model, &x, &y, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.unresolved, 0);
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }
}
