use super::tensor::{Real, Tensor};
use crate::imagecore::BinaryMask;
use crate::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

/// Mean of `-[w·y·ln p + (1-y)·ln(1-p)]` over all pixels.
pub fn weighted_bce<T: Real>(pred: &Tensor<T>, target: &BinaryMask, w: f64) -> Result<f64> {
    let (c, h, ww) = pred.chw()?;
    if c != 1 || h != target.height() || ww != target.width() {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match {}x{} target",
            pred.shape(),
            target.width(),
            target.height()
        )));
    }
    let y: Vec<T> = target.bits().iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    Ok(weighted_bce_with_grad(pred.data(), &y, w)?.0)
}

/// Loss and its gradient with respect to the pre-sigmoid logits.
///
/// Per pixel `dL/dz = (p·(w·y + 1 - y) - w·y) / N`, zero where the clamp is
/// active.
pub fn weighted_bce_with_grad<T: Real>(pred: &[T], target: &[T], w: f64) -> Result<(f64, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    if !(w > 0.0) {
        return Err(Error::Argument(format!("defect weight must be > 0, got {w}")));
    }
    let n = pred.len() as f64;
    // Neumaier-compensated sum keeps the loss accurate to a few ulp.
    let (mut total, mut comp) = (0.0f64, 0.0f64);
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let (p, y) = (p.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let term = -(w * y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        let t = total + term;
        comp += if total.abs() >= term.abs() {
            (total - t) + term
        } else {
            (term - t) + total
        };
        total = t;
        let g = if p == pc { (p * (w * y + 1.0 - y) - w * y) / n } else { 0.0 };
        grad.push(T::of(g));
    }
    Ok(((total + comp) / n, grad))
}
