//! Inspection reliability metrics: hit/miss matching, POD fitting, sizing
//! error, false-call rates and the cross-validated strategy experiment.

mod experiment;
mod pod;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::imagecore::BinaryMask;
use crate::postproc::Indication;
use crate::rng::child_rng;
use crate::{Error, Result};

pub use experiment::{
    metrics_csv, run_experiment, run_experiment_with, score_masks, summarize_folds, train_fold, ExperimentConfig,
    ExperimentResult, FoldFailure, FoldLabel, FoldOutcome, MetricsRow, PodStatus, Scored, METRICS_HEADER,
};
pub use pod::{a90_95, fit_pod, pod_curve_csv, PodCurve, Z_ONE_SIDED_95};

/// Chebyshev radius used to widen truth masks before matching.
pub const HIT_DILATION_PX: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitMissRecord {
    pub true_size_mm: f64,
    pub hit: bool,
    /// Size of the best-overlapping predicted indication; set iff `hit`.
    pub matched_pred_size_mm: Option<f64>,
    pub image_id: usize,
    pub fold_id: usize,
}

/// An annotated flaw in an image frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthFlaw {
    pub pixels: Vec<(usize, usize)>,
    pub size_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalseCall {
    pub image_id: usize,
    pub size_mm: f64,
    pub centroid_mm: (f64, f64),
    pub inside_weld: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub records: Vec<HitMissRecord>,
    pub false_calls: Vec<FalseCall>,
    /// Indices of predicted indications that touched at least one truth.
    pub matched_indications: Vec<usize>,
}

/// Score one image. A flaw is hit when any predicted pixel falls inside its
/// dilated mask; an indication touching no dilated truth is a false call,
/// and one touching several truths credits all of them.
pub fn match_indications(
    predicted: &[Indication],
    truth: &[TruthFlaw],
    weld: &BinaryMask,
    image_id: usize,
    fold_id: usize,
) -> Result<MatchResult> {
    let (w, h) = (weld.width(), weld.height());
    let in_frame = |&(x, y): &(usize, usize)| x < w && y < h;
    for t in truth {
        if t.pixels.is_empty() || !t.pixels.iter().all(in_frame) {
            return Err(Error::Argument("truth flaw is empty or outside the image frame".into()));
        }
        if !(t.size_mm > 0.0) {
            return Err(Error::Argument(format!("true flaw size {} must be > 0", t.size_mm)));
        }
    }
    if !predicted.iter().all(|p| p.pixels.iter().all(in_frame)) {
        return Err(Error::Argument("predicted indication outside the image frame".into()));
    }

    let r = HIT_DILATION_PX;
    let mut owners: HashMap<usize, Vec<usize>> = HashMap::new();
    for (ti, t) in truth.iter().enumerate() {
        for &(x, y) in &t.pixels {
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let v = owners.entry(yy * w + xx).or_default();
                    if v.last() != Some(&ti) && !v.contains(&ti) {
                        v.push(ti);
                    }
                }
            }
        }
    }

    // Per truth: (overlap pixels, predicted size) of the best indication.
    let mut best: Vec<Option<(usize, f64)>> = vec![None; truth.len()];
    let mut out = MatchResult::default();
    for (pi, p) in predicted.iter().enumerate() {
        let mut overlap: HashMap<usize, usize> = HashMap::new();
        for &(x, y) in &p.pixels {
            if let Some(ts) = owners.get(&(y * w + x)) {
                for &t in ts {
                    *overlap.entry(t).or_default() += 1;
                }
            }
        }
        if overlap.is_empty() {
            out.false_calls.push(FalseCall {
                image_id,
                size_mm: p.size_mm,
                centroid_mm: p.centroid_mm,
                inside_weld: p.pixels.iter().any(|&(x, y)| weld.get(x, y)),
            });
            continue;
        }
        out.matched_indications.push(pi);
        for (t, n) in overlap {
            if best[t].is_none_or(|(m, _)| n > m) {
                best[t] = Some((n, p.size_mm));
            }
        }
    }
    out.records = truth
        .iter()
        .zip(&best)
        .map(|(t, b)| HitMissRecord {
            true_size_mm: t.size_mm,
            hit: b.is_some(),
            matched_pred_size_mm: b.map(|(_, s)| s),
            image_id,
            fold_id,
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizingError {
    pub mean_mm: f64,
    pub rms_mm: f64,
    /// Predicted minus true size for each hit, in record order.
    pub residuals_mm: Vec<f64>,
}

pub fn sizing_error(records: &[HitMissRecord]) -> Result<SizingError> {
    let residuals: Vec<f64> = records
        .iter()
        .filter_map(|r| r.matched_pred_size_mm.map(|p| p - r.true_size_mm))
        .collect();
    if residuals.is_empty() {
        return Err(Error::EmptyMetric("no hits with a matched size".into()));
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    Ok(SizingError {
        mean_mm: mean,
        rms_mm: rms,
        residuals_mm: residuals,
    })
}

/// Zhang-Suen thinning. Out-of-frame neighbours repeat the nearest edge
/// pixel, so a band running off the image keeps its full length.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut bits = mask.bits().to_vec();
    if w == 0 || h == 0 {
        return mask.clone();
    }
    let at = |b: &[bool], x: i64, y: i64| -> bool {
        let cx = x.clamp(0, w as i64 - 1) as usize;
        let cy = y.clamp(0, h as i64 - 1) as usize;
        b[cy * w + cx]
    };
    // P2..P9, clockwise from north.
    const RING: [(i64, i64); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if !bits[y as usize * w + x as usize] {
                        continue;
                    }
                    let p = RING.map(|(dx, dy)| at(&bits, x + dx, y + dy));
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(n && e && s) && !(e && s && wst)
                    } else {
                        !(n && e && wst) && !(n && s && wst)
                    };
                    if (2..=6).contains(&b) && a == 1 && ok {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                bits[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
    BinaryMask::from_bits(w, h, bits, mask.kind()).expect("same extents")
}

/// Weld length as skeleton pixel count times pitch.
pub fn weld_length_mm(weld: &BinaryMask, pixel_pitch: f64) -> f64 {
    skeletonize(weld).count() as f64 * pixel_pitch
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FalseCallRates {
    pub per_10cm_weld: f64,
    pub per_image: f64,
    pub weld_length_mm: f64,
}

/// Rates from counts and a precomputed total weld length.
pub fn false_call_rates_from_counts(
    inside_weld: usize,
    total: usize,
    weld_length_mm: f64,
    n_images: usize,
) -> Result<FalseCallRates> {
    if inside_weld > total {
        return Err(Error::Argument("more inside-weld false calls than false calls".into()));
    }
    if n_images == 0 {
        return Err(Error::Argument("false-call rate needs at least one image".into()));
    }
    if !(weld_length_mm >= 0.0) {
        return Err(Error::Argument(format!("weld length {weld_length_mm} is invalid")));
    }
    let per_10cm_weld = if weld_length_mm > 0.0 {
        100.0 * inside_weld as f64 / weld_length_mm
    } else if inside_weld == 0 {
        0.0
    } else {
        return Err(Error::Inconsistency(format!(
            "{inside_weld} false calls inside a weld of zero length"
        )));
    };
    Ok(FalseCallRates {
        per_10cm_weld,
        per_image: total as f64 / n_images as f64,
        weld_length_mm,
    })
}

pub fn false_call_rates(
    false_calls: &[FalseCall],
    weld_masks: &[BinaryMask],
    n_images: usize,
    pixel_pitch: f64,
) -> Result<FalseCallRates> {
    if !(pixel_pitch > 0.0) {
        return Err(Error::Argument(format!("pixel pitch {pixel_pitch} must be > 0")));
    }
    let length: f64 = weld_masks.iter().map(|m| weld_length_mm(m, pixel_pitch)).sum();
    let inside = false_calls.iter().filter(|f| f.inside_weld).count();
    false_call_rates_from_counts(inside, false_calls.len(), length, n_images)
}

/// Seeded partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Argument(format!("need k >= 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Argument(format!("{n} images cannot fill {k} folds")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut child_rng(seed, 0x6b66));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
