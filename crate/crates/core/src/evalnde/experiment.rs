//! Cross-validated comparison of augmentation strategies over data fractions.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::{
    false_call_rates, fit_pod, kfold_split, match_indications, sizing_error, FalseCall, FalseCallRates,
    HitMissRecord, PodCurve, SizingError, TruthFlaw,
};
use crate::augment::{build_training_set, sample_patches, AugmentConfig, Strategy, TrainingRequest};
use crate::imagecore::BinaryMask;
use crate::infer::{predict_image, InferConfig};
use crate::nnet::{train, TrainConfig, TrainHistory, TrainSample, UNet, UNetConfig};
use crate::postproc::{process_mask, AcceptanceRules};
use crate::rng::{child_rng, child_seed, labeled_seed};
use crate::synthgen::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategies: Vec<Strategy>,
    pub fractions: Vec<f64>,
    pub folds: usize,
    pub patches_per_image: usize,
    /// Unaugmented patches per training image used to pick the checkpoint.
    pub checkpoint_patches_per_image: usize,
    pub augment: AugmentConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub acceptance: AcceptanceRules,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let unet = UNetConfig::micro();
        Self {
            strategies: Strategy::ALL.to_vec(),
            fractions: vec![1.0, 0.25, 0.10],
            folds: 5,
            patches_per_image: 16,
            checkpoint_patches_per_image: 2,
            augment: AugmentConfig {
                patch_size: 2 * unet.input_size,
                min_weld_fraction: 0.4,
                ..AugmentConfig::default()
            },
            unet,
            train: TrainConfig {
                batch_size: 8,
                max_steps: 300,
                validation_interval: 50,
                plateau_steps: 150,
                ..TrainConfig::default()
            },
            infer: InferConfig {
                overlap: 16,
                ..InferConfig::default()
            },
            acceptance: AcceptanceRules::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.fractions.is_empty() {
            return Err(Error::Argument("experiment needs at least one strategy and fraction".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Argument(format!("fraction {f} outside (0, 1]")));
        }
        if self.patches_per_image == 0 || self.checkpoint_patches_per_image == 0 {
            return Err(Error::Argument("patch counts must be >= 1".into()));
        }
        if self.augment.patch_size != 2 * self.unet.input_size {
            return Err(Error::Argument(format!(
                "patch size {} must be twice the model input {}",
                self.augment.patch_size, self.unet.input_size
            )));
        }
        self.augment.validate()?;
        self.unet.validate()?;
        self.train.validate()?;
        self.acceptance.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldLabel {
    Fold(usize),
    Worst,
}

impl fmt::Display for FoldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldLabel::Fold(i) => write!(f, "{i}"),
            FoldLabel::Worst => f.write_str("worst"),
        }
    }
}

/// Outcome of the POD fit, ordered from best to worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodStatus {
    Ok,
    Penalized,
    Degenerate,
    FitFailed,
    NotDemonstrable,
}

impl PodStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PodStatus::Ok => "ok",
            PodStatus::Penalized => "penalized",
            PodStatus::Degenerate => "degenerate",
            PodStatus::FitFailed => "fit_failed",
            PodStatus::NotDemonstrable => "not_demonstrable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: Strategy,
    pub fraction: f64,
    pub fold: FoldLabel,
    pub images: usize,
    pub flaws: usize,
    pub hits: usize,
    pub a90_mm: Option<f64>,
    pub a90_95_mm: Option<f64>,
    pub pod_status: PodStatus,
    pub sizing_mean_mm: Option<f64>,
    pub sizing_rms_mm: Option<f64>,
    pub false_calls_per_10cm_weld: f64,
    pub false_calls_per_image: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub strategy: Strategy,
    pub fraction: f64,
    pub fold: usize,
    pub validation_images: Vec<usize>,
    pub training_images: Vec<usize>,
    pub records: Vec<HitMissRecord>,
    pub false_calls: Vec<FalseCall>,
    pub pod: std::result::Result<PodCurve, String>,
    pub sizing: Option<SizingError>,
    pub rates: FalseCallRates,
    pub history: TrainHistory,
}

impl FoldOutcome {
    pub fn row(&self) -> MetricsRow {
        let (a90, a90_95, status) = match &self.pod {
            Ok(c) => {
                let status = match (c.a90_95, c.penalized) {
                    (None, _) => PodStatus::NotDemonstrable,
                    (Some(_), true) => PodStatus::Penalized,
                    (Some(_), false) => PodStatus::Ok,
                };
                (Some(c.a90), c.a90_95, status)
            }
            Err(e) if e.starts_with("degenerate") => (None, None, PodStatus::Degenerate),
            Err(_) => (None, None, PodStatus::FitFailed),
        };
        MetricsRow {
            strategy: self.strategy,
            fraction: self.fraction,
            fold: FoldLabel::Fold(self.fold),
            images: self.validation_images.len(),
            flaws: self.records.len(),
            hits: self.records.iter().filter(|r| r.hit).count(),
            a90_mm: a90,
            a90_95_mm: a90_95,
            pod_status: status,
            sizing_mean_mm: self.sizing.as_ref().map(|s| s.mean_mm),
            sizing_rms_mm: self.sizing.as_ref().map(|s| s.rms_mm),
            false_calls_per_10cm_weld: self.rates.per_10cm_weld,
            false_calls_per_image: self.rates.per_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub strategy: Strategy,
    pub fraction: f64,
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub outcomes: Vec<FoldOutcome>,
    pub failures: Vec<FoldFailure>,
}

fn max_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.flatten().fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Largest size metric over folds. A fold without a value is unbounded,
/// unless it detected every flaw it had.
fn worst_size(rows: &[MetricsRow], pick: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
    let mut worst = None;
    for r in rows {
        match pick(r) {
            Some(v) => worst = Some(worst.map_or(v, |w: f64| w.max(v))),
            None if r.flaws > 0 && r.hits == r.flaws => {}
            None => return None,
        }
    }
    worst
}

/// Pessimistic envelope of fold rows: each metric takes its worst value.
/// A fold whose a90 or a90/95 is missing for lack of hits makes that
/// metric missing in the envelope too.
pub fn summarize_folds(rows: &[MetricsRow]) -> Result<MetricsRow> {
    let first = rows.first().ok_or_else(|| Error::EmptyMetric("no fold rows to summarize".into()))?;
    let status = rows.iter().map(|r| r.pod_status).max().expect("nonempty");
    let sizing_mean = rows
        .iter()
        .filter_map(|r| r.sizing_mean_mm)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| if v.abs() > m.abs() { v } else { m })));
    Ok(MetricsRow {
        strategy: first.strategy,
        fraction: first.fraction,
        fold: FoldLabel::Worst,
        images: rows.iter().map(|r| r.images).sum(),
        flaws: rows.iter().map(|r| r.flaws).sum(),
        hits: rows.iter().map(|r| r.hits).sum(),
        a90_mm: worst_size(rows, |r| r.a90_mm),
        a90_95_mm: worst_size(rows, |r| r.a90_95_mm),
        pod_status: status,
        sizing_mean_mm: sizing_mean,
        sizing_rms_mm: max_opt(rows.iter().map(|r| r.sizing_rms_mm)),
        false_calls_per_10cm_weld: rows.iter().map(|r| r.false_calls_per_10cm_weld).fold(0.0, f64::max),
        false_calls_per_image: rows.iter().map(|r| r.false_calls_per_image).fold(0.0, f64::max),
    })
}

/// Build the training set for one fold and train a fresh model on it.
pub fn train_fold(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    strategy: Strategy,
    fraction: f64,
    fold: usize,
    training: &[usize],
    seed: u64,
) -> Result<(UNet<f32>, TrainHistory, Vec<usize>)> {
    let fold_seed = child_seed(labeled_seed(seed, "fold"), fold as u64);
    let req = TrainingRequest {
        image_ids: training,
        fold_id: fold,
        strategy,
        fraction,
        patches_per_image: cfg.patches_per_image,
    };
    let set = build_training_set(dataset, &req, &cfg.augment, fold_seed)?;
    let samples: Vec<TrainSample> = set.patches.iter().map(TrainSample::from_patch).collect::<Result<_>>()?;

    // Checkpoint selection uses plain crops of the same training images.
    let plain = AugmentConfig {
        patch_size: cfg.augment.patch_size,
        min_weld_fraction: cfg.augment.min_weld_fraction,
        ..AugmentConfig::disabled()
    };
    let mut checkpoint = Vec::new();
    let base = labeled_seed(fold_seed, "checkpoint");
    for &id in &set.images {
        let s = &dataset.samples[id];
        let mut rng = child_rng(base, id as u64);
        for p in sample_patches(&s.image, &s.ground_truth, &s.weld, cfg.checkpoint_patches_per_image, &plain, &mut rng)? {
            checkpoint.push(TrainSample::from_patch(&p)?);
        }
    }

    let model = UNet::new(cfg.unet.clone(), child_seed(fold_seed, 1))?;
    let tcfg = TrainConfig {
        seed: child_seed(fold_seed, 2),
        ..cfg.train.clone()
    };
    let (model, history) = train(&model, &samples, &checkpoint, &tcfg)?;
    Ok((model, history, set.images))
}

/// Hit/miss records, false calls and rates for a set of scored images.
#[derive(Debug, Clone)]
pub struct Scored {
    pub records: Vec<HitMissRecord>,
    pub false_calls: Vec<FalseCall>,
    pub rates: FalseCallRates,
}

/// Post-process prediction masks and score them against the dataset truth.
pub fn score_masks(
    dataset: &Dataset,
    predictions: &[(usize, BinaryMask)],
    fold: usize,
    rules: &AcceptanceRules,
) -> Result<Scored> {
    let pitch = dataset.pixel_pitch();
    let mut records = Vec::new();
    let mut false_calls = Vec::new();
    for (id, pred) in predictions {
        let s = dataset
            .samples
            .get(*id)
            .ok_or_else(|| Error::Argument(format!("image {id} is not in the dataset")))?;
        if (pred.width(), pred.height()) != (s.image.width(), s.image.height()) {
            return Err(Error::Argument(format!(
                "prediction for image {id} is {}x{}, image is {}x{}",
                pred.width(),
                pred.height(),
                s.image.width(),
                s.image.height()
            )));
        }
        let inds = process_mask(pred, pitch, rules)?;
        let truth: Vec<TruthFlaw> = s
            .flaws
            .iter()
            .map(|f| TruthFlaw {
                pixels: f.pixels.clone(),
                size_mm: f.measured_size_mm(pitch),
            })
            .collect();
        let m = match_indications(&inds, &truth, &s.weld, *id, fold)?;
        records.extend(m.records);
        false_calls.extend(m.false_calls);
    }
    let welds: Vec<_> = predictions.iter().map(|(i, _)| dataset.samples[*i].weld.clone()).collect();
    let rates = false_call_rates(&false_calls, &welds, predictions.len(), pitch)?;
    Ok(Scored {
        records,
        false_calls,
        rates,
    })
}

impl FoldOutcome {
    /// Fit POD and sizing error on scored images.
    pub fn from_scores(
        strategy: Strategy,
        fraction: f64,
        fold: usize,
        validation_images: Vec<usize>,
        training_images: Vec<usize>,
        scored: Scored,
        history: TrainHistory,
    ) -> Self {
        let pod = fit_pod(&scored.records).map_err(|e| match e {
            Error::DegenerateData(m) => format!("degenerate: {m}"),
            other => other.to_string(),
        });
        FoldOutcome {
            strategy,
            fraction,
            fold,
            validation_images,
            training_images,
            sizing: sizing_error(&scored.records).ok(),
            records: scored.records,
            false_calls: scored.false_calls,
            pod,
            rates: scored.rates,
            history,
        }
    }
}

fn run_fold(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    strategy: Strategy,
    fraction: f64,
    fold: usize,
    folds: &[Vec<usize>],
    seed: u64,
) -> Result<FoldOutcome> {
    let validation = folds[fold].clone();
    let training: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != fold)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    let (model, history, used) = train_fold(dataset, cfg, strategy, fraction, fold, &training, seed)?;
    let predictions = validation
        .iter()
        .map(|&id| Ok((id, predict_image(&model, &dataset.samples[id].image, &cfg.infer)?)))
        .collect::<Result<Vec<_>>>()?;
    let scored = score_masks(dataset, &predictions, fold, &cfg.acceptance)?;
    Ok(FoldOutcome::from_scores(strategy, fraction, fold, validation, used, scored, history))
}

pub fn run_experiment(dataset: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentResult> {
    run_experiment_with(dataset, cfg, seed, |_| {})
}

/// Every (strategy, fraction) cell is trained and scored on each fold. Fold
/// rows are followed by the cell's worst-of-folds row. Failed folds are
/// reported in `failures` and left out of the table.
pub fn run_experiment_with(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
    mut log: impl FnMut(&str),
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let folds = kfold_split(dataset.len(), cfg.folds, labeled_seed(seed, "kfold"))?;
    let mut result = ExperimentResult {
        rows: Vec::new(),
        outcomes: Vec::new(),
        failures: Vec::new(),
    };
    for &strategy in &cfg.strategies {
        for &fraction in &cfg.fractions {
            let mut cell = Vec::new();
            for fold in 0..cfg.folds {
                match run_fold(dataset, cfg, strategy, fraction, fold, &folds, seed) {
                    Ok(o) => {
                        let row = o.row();
                        log(&format!(
                            "{} fraction {fraction} fold {fold}: {}/{} hits, a90/95 {}",
                            strategy.as_str(),
                            row.hits,
                            row.flaws,
                            fmt_opt(row.a90_95_mm)
                        ));
                        cell.push(row);
                        result.outcomes.push(o);
                    }
                    Err(e) => {
                        log(&format!(
                            "warning: {} fraction {fraction} fold {fold} failed: {e}",
                            strategy.as_str()
                        ));
                        result.failures.push(FoldFailure {
                            strategy,
                            fraction,
                            fold,
                            error: e.to_string(),
                        });
                    }
                }
            }
            if !cell.is_empty() {
                let worst = summarize_folds(&cell)?;
                result.rows.extend(cell);
                result.rows.push(worst);
            }
        }
    }
    Ok(result)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub const METRICS_HEADER: &str = "strategy,fraction,fold,images,flaws,hits,a90_mm,a90_95_mm,pod_status,\
sizing_mean_mm,sizing_rms_mm,false_calls_per_10cm_weld,false_calls_per_image";

/// One line per row; missing values are left empty.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
            r.strategy.as_str(),
            r.fraction,
            r.fold,
            r.images,
            r.flaws,
            r.hits,
            fmt_opt(r.a90_mm),
            fmt_opt(r.a90_95_mm),
            r.pod_status.as_str(),
            fmt_opt(r.sizing_mean_mm),
            fmt_opt(r.sizing_rms_mm),
            r.false_calls_per_10cm_weld,
            r.false_calls_per_image
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, SynthConfig};

    fn row(fold: usize, a90_95: Option<f64>, status: PodStatus, fc: f64) -> MetricsRow {
        MetricsRow {
            strategy: Strategy::Standard,
            fraction: 1.0,
            fold: FoldLabel::Fold(fold),
            images: 2,
            flaws: 5,
            hits: 3,
            a90_mm: a90_95.map(|v| v * 0.8),
            a90_95_mm: a90_95,
            pod_status: status,
            sizing_mean_mm: Some(0.1 * fold as f64 - 0.15),
            sizing_rms_mm: Some(0.2 + 0.1 * fold as f64),
            false_calls_per_10cm_weld: fc,
            false_calls_per_image: fc / 2.0,
        }
    }

    #[test]
    fn worst_row_takes_per_metric_maximum() {
        let rows = vec![
            row(0, Some(1.5), PodStatus::Ok, 3.0),
            row(1, Some(2.5), PodStatus::Penalized, 1.0),
            MetricsRow { hits: 5, ..row(2, None, PodStatus::Degenerate, 2.0) },
        ];
        let w = summarize_folds(&rows).unwrap();
        assert_eq!(w.fold, FoldLabel::Worst);
        assert_eq!(w.a90_95_mm, Some(2.5));
        assert_eq!(w.false_calls_per_10cm_weld, 3.0);
        assert_eq!(w.false_calls_per_image, 1.5);
        assert_eq!(w.sizing_rms_mm, Some(0.4));
        assert_eq!(w.flaws, 15);
        let mut nd = rows.clone();
        nd.push(MetricsRow { a90_mm: Some(3.0), ..row(3, None, PodStatus::NotDemonstrable, 0.0) });
        let w = summarize_folds(&nd).unwrap();
        assert_eq!((w.a90_95_mm, w.pod_status), (None, PodStatus::NotDemonstrable));
        assert_eq!(w.a90_mm, Some(3.0));
        let missed = vec![rows[0].clone(), row(4, None, PodStatus::Degenerate, 0.0)];
        let w = summarize_folds(&missed).unwrap();
        assert_eq!((w.a90_mm, w.a90_95_mm), (None, None));
        assert!(summarize_folds(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = metrics_csv(&[row(0, Some(1.5), PodStatus::Ok, 3.0), row(1, None, PodStatus::Degenerate, 0.0)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), 13);
        assert!(lines[2].contains(",,,degenerate,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 13));
    }

    #[test]
    fn tiny_experiment_counts_rows() {
        let synth = SynthConfig {
            width: 64,
            height: 64,
            weld_width_mm: crate::rng::Span::new(3.0, 3.5),
            size_range_mm: crate::rng::Span::new(0.3, 0.8),
            defects_per_image: (1, 2),
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&synth, 4, 11).unwrap();
        let unet = UNetConfig { depth: 1, base_channels: 2, input_size: 16, ..UNetConfig::default() };
        let cfg = ExperimentConfig {
            strategies: vec![Strategy::Standard],
            fractions: vec![1.0],
            folds: 2,
            patches_per_image: 2,
            checkpoint_patches_per_image: 1,
            augment: AugmentConfig { patch_size: 32, min_weld_fraction: 0.3, ..AugmentConfig::default() },
            unet,
            train: TrainConfig { batch_size: 2, max_steps: 3, validation_interval: 2, ..TrainConfig::default() },
            infer: InferConfig { overlap: 4, ..InferConfig::default() },
            acceptance: AcceptanceRules::default(),
        };
        let r = run_experiment(&ds, &cfg, 5).unwrap();
        assert!(r.failures.is_empty(), "{:?}", r.failures);
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[2].fold, FoldLabel::Worst);
        let again = run_experiment(&ds, &cfg, 5).unwrap();
        assert_eq!(metrics_csv(&r.rows), metrics_csv(&again.rows));
    }
}
