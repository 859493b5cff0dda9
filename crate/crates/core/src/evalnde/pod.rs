//! Hit/miss probability-of-detection model: logit(POD) = b0 + b1·ln a.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::HitMissRecord;
use crate::{Error, Result};

/// Upper 5% point of the standard normal.
pub const Z_ONE_SIDED_95: f64 = 1.6448536269514722;

const MIN_RECORDS: usize = 20;
const MIN_SIZE_RATIO: f64 = 2.0;
const MAX_ITERATIONS: usize = 200;
const TARGET_POD: f64 = 0.9;
const BISECTION_TOL_MM: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodCurve {
    pub b0: f64,
    pub b1: f64,
    /// Covariance of (b0, b1), row-major.
    pub covariance: [[f64; 2]; 2],
    pub a90: f64,
    /// `None` when the lower band never reaches 90% in the search range.
    pub a90_95: Option<f64>,
    /// Set when hits and misses were separable and the penalized fit was used.
    pub penalized: bool,
    pub records: usize,
    pub size_range_mm: (f64, f64),
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl PodCurve {
    pub fn pod(&self, a: f64) -> f64 {
        logistic(self.b0 + self.b1 * a.ln())
    }

    /// Standard error of the linear predictor at size `a`.
    pub fn predictor_se(&self, a: f64) -> f64 {
        let x = a.ln();
        let c = &self.covariance;
        (c[0][0] + 2.0 * x * c[0][1] + x * x * c[1][1]).max(0.0).sqrt()
    }

    /// One-sided 95% Wald lower bound on POD.
    pub fn pod_lower(&self, a: f64) -> f64 {
        logistic(self.b0 + self.b1 * a.ln() - Z_ONE_SIDED_95 * self.predictor_se(a))
    }

    fn point_a90(&self) -> f64 {
        ((TARGET_POD / (1.0 - TARGET_POD)).ln() - self.b0) / self.b1
    }
}

struct Fit {
    beta: [f64; 2],
    info: [[f64; 2]; 2],
}

fn inverse2(m: &[[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !(det.abs() > 1e-300) || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

/// Log-likelihood (plus half log-det information when penalized), score and
/// information at `beta`.
fn evaluate(x: &[f64], y: &[f64], beta: [f64; 2], firth: bool) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let mut ll = 0.0;
    let mut info = [[0.0; 2]; 2];
    let p: Vec<f64> = x.iter().map(|&xi| logistic(beta[0] + beta[1] * xi)).collect();
    for ((&xi, &yi), &pi) in x.iter().zip(y).zip(&p) {
        let eta = beta[0] + beta[1] * xi;
        // ln p = -ln(1+e^-eta), ln(1-p) = -ln(1+e^eta)
        ll += if yi > 0.5 { -softplus(-eta) } else { -softplus(eta) };
        let wi = pi * (1.0 - pi);
        info[0][0] += wi;
        info[0][1] += wi * xi;
        info[1][1] += wi * xi * xi;
    }
    info[1][0] = info[0][1];
    let mut score = [0.0; 2];
    let inv = if firth { inverse2(&info) } else { None };
    for ((&xi, &yi), &pi) in x.iter().zip(y).zip(&p) {
        let mut r = yi - pi;
        if let Some(inv) = &inv {
            let wi = pi * (1.0 - pi);
            let lev = wi * (inv[0][0] + 2.0 * xi * inv[0][1] + xi * xi * inv[1][1]);
            r += lev * (0.5 - pi);
        }
        score[0] += r;
        score[1] += r * xi;
    }
    if firth {
        let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
        ll += 0.5 * det.max(1e-300).ln();
    }
    (ll, score, info)
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn newton(x: &[f64], y: &[f64], firth: bool) -> Result<Fit> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let mut beta = [(mean / (1.0 - mean)).ln(), 0.0];
    let (mut ll, mut score, mut info) = evaluate(x, y, beta, firth);
    for _ in 0..MAX_ITERATIONS {
        let inv = inverse2(&info).ok_or_else(|| Error::Fit("singular information matrix".into()))?;
        let step = [
            inv[0][0] * score[0] + inv[0][1] * score[1],
            inv[1][0] * score[0] + inv[1][1] * score[1],
        ];
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = [beta[0] + t * step[0], beta[1] + t * step[1]];
            let (cll, cs, ci) = evaluate(x, y, cand, firth);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                ll = cll;
                score = cs;
                info = ci;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let size = step[0].abs().max(step[1].abs()) * t;
        if !accepted || size < 1e-10 * (1.0 + beta[0].abs().max(beta[1].abs())) {
            if score[0].abs().max(score[1].abs()) < 1e-6 * x.len() as f64 || size < 1e-12 {
                return Ok(Fit { beta, info });
            }
            if !accepted {
                return Err(Error::Fit("line search failed to improve the likelihood".into()));
            }
        }
    }
    Err(Error::Fit(format!("no convergence after {MAX_ITERATIONS} iterations")))
}

/// Maximum-likelihood hit/miss fit on log size, switching to a
/// Firth-penalized fit when hits and misses are separable.
pub fn fit_pod(records: &[HitMissRecord]) -> Result<PodCurve> {
    let hits = records.iter().filter(|r| r.hit).count();
    if hits == 0 || hits == records.len() {
        return Err(Error::DegenerateData(format!(
            "{hits} hits in {} records; need both hits and misses",
            records.len()
        )));
    }
    if records.len() < MIN_RECORDS {
        return Err(Error::DegenerateData(format!(
            "{} records; at least {MIN_RECORDS} are needed",
            records.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| !(r.true_size_mm > 0.0 && r.true_size_mm.is_finite())) {
        return Err(Error::Argument(format!("flaw size {} must be > 0", r.true_size_mm)));
    }
    let lo = records.iter().map(|r| r.true_size_mm).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.true_size_mm).fold(0.0, f64::max);
    if hi < MIN_SIZE_RATIO * lo {
        return Err(Error::DegenerateData(format!(
            "sizes span {lo:.4}..{hi:.4} mm; need at least a {MIN_SIZE_RATIO}x range"
        )));
    }

    let x: Vec<f64> = records.iter().map(|r| r.true_size_mm.ln()).collect();
    let y: Vec<f64> = records.iter().map(|r| if r.hit { 1.0 } else { 0.0 }).collect();
    let extreme = |hit: bool, pick: fn(f64, f64) -> f64, init: f64| {
        x.iter().zip(records).filter(|(_, r)| r.hit == hit).map(|(&v, _)| v).fold(init, pick)
    };
    let separable = extreme(false, f64::max, f64::NEG_INFINITY) <= extreme(true, f64::min, f64::INFINITY)
        || extreme(true, f64::max, f64::NEG_INFINITY) <= extreme(false, f64::min, f64::INFINITY);

    let fit = newton(&x, &y, separable)?;
    let [b0, b1] = fit.beta;
    if !(b1 > 0.0) {
        return Err(Error::Fit(format!("slope {b1:.4} is not positive; POD does not rise with size")));
    }
    let covariance = inverse2(&fit.info).ok_or_else(|| Error::Fit("singular information matrix".into()))?;
    let mut curve = PodCurve {
        b0,
        b1,
        covariance,
        a90: 0.0,
        a90_95: None,
        penalized: separable,
        records: records.len(),
        size_range_mm: (lo, hi),
    };
    curve.a90 = curve.point_a90().exp();
    curve.a90_95 = match a90_95(&curve) {
        Ok(v) => Some(v),
        Err(Error::NotDemonstrable(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(curve)
}

/// Smallest size whose lower-bound POD reaches 90%, by log-grid scan and
/// bisection, searched from a tenth of the smallest to ten times the largest
/// observed size.
pub fn a90_95(curve: &PodCurve) -> Result<f64> {
    if !(curve.b1 > 0.0) {
        return Err(Error::Fit("POD curve must increase with size".into()));
    }
    let c = &curve.covariance;
    if c.iter().flatten().all(|&v| v == 0.0) {
        return Ok(curve.a90);
    }
    let (lo, hi) = (curve.size_range_mm.0 / 10.0, curve.size_range_mm.1 * 10.0);
    let ok = |a: f64| curve.pod_lower(a) >= TARGET_POD;
    let steps = 400;
    let grid = |i: usize| (lo.ln() + (hi / lo).ln() * i as f64 / steps as f64).exp();
    let Some(first) = (0..=steps).find(|&i| ok(grid(i))) else {
        return Err(Error::NotDemonstrable(format!(
            "lower 95% POD bound stays below 0.9 up to {hi:.3} mm"
        )));
    };
    // Below a90 even the point curve is under 90%, so a90 brackets from below.
    if ok(curve.a90) {
        return Ok(curve.a90);
    }
    let mut a = curve.a90;
    if first > 0 {
        a = a.max(grid(first - 1));
    }
    let mut b = grid(first);
    debug_assert!(a <= b && curve.pod(b) >= curve.pod(a));
    while b - a > BISECTION_TOL_MM {
        let m = 0.5 * (a + b);
        if ok(m) {
            b = m;
        } else {
            a = m;
        }
    }
    Ok(b)
}

/// `size_mm,pod,pod_lower` at 100 log-spaced sizes over the observed range.
pub fn pod_curve_csv(curve: &PodCurve) -> String {
    let (lo, hi) = curve.size_range_mm;
    let mut out = String::from("size_mm,pod,pod_lower\n");
    for i in 0..100 {
        let a = (lo.ln() + (hi / lo).ln() * i as f64 / 99.0).exp();
        let _ = writeln!(out, "{a:.6},{:.6},{:.6}", curve.pod(a), curve.pod_lower(a));
    }
    out
}
