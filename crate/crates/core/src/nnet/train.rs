use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::weighted_bce_with_grad;
use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use super::unet::{Gradients, Tape, UNet};
use crate::augment::Patch;
use crate::imagecore::{make_input_stack, BinaryMask, DEFAULT_UNSHARP_AMOUNT, DEFAULT_UNSHARP_SIGMA};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Loss weight of defect pixels (background weighs 1).
    pub defect_weight: f64,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Steps without validation improvement before the learning rate decays.
    pub plateau_steps: usize,
    pub decay_factor: f64,
    pub max_steps: usize,
    pub validation_interval: usize,
    /// Return the best-validation snapshot instead of the final weights.
    pub checkpoint_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            defect_weight: 3.0,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            plateau_steps: 2500,
            decay_factor: 0.5,
            max_steps: 10_000,
            validation_interval: 100,
            checkpoint_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if !(self.defect_weight > 0.0) {
            return Err(Error::Argument("defect_weight must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning_rate must be > 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Argument("decay_factor must be in (0, 1]".into()));
        }
        if self.validation_interval == 0 {
            return Err(Error::Argument("validation_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// A preprocessed input stack with its 0/1 target map.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: Tensor<f32>,
    pub target: Vec<f32>,
}

impl TrainSample {
    pub fn new(input: Tensor<f32>, target: Vec<f32>) -> Result<Self> {
        let (_, h, w) = input.chw()?;
        if target.len() != h * w {
            return Err(Error::Shape(format!(
                "target has {} values for a {h}x{w} input",
                target.len()
            )));
        }
        Ok(Self { input, target })
    }

    /// Sharpened input stack and target at half resolution. A target pixel is
    /// set when any pixel of its 2×2 source block is.
    pub fn from_patch(patch: &Patch) -> Result<Self> {
        let stack = make_input_stack(&patch.image, DEFAULT_UNSHARP_SIGMA, DEFAULT_UNSHARP_AMOUNT)?
            .downsample2()?;
        let (w, h) = (stack.width(), stack.height());
        let input = Tensor::from_vec(&[2, h, w], stack.to_planar::<f32>())?;
        Self::new(input, downsample_mask_any(&patch.mask)?)
    }
}

/// 2×2 block "any" reduction of a mask, as 0/1 values.
pub fn downsample_mask_any(mask: &BinaryMask) -> Result<Vec<f32>> {
    let (w, h) = (mask.width(), mask.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Argument(format!("mask {w}x{h} has odd extents")));
    }
    let mut out = Vec::with_capacity(w * h / 4);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            let any = mask.get(x, y) || mask.get(x + 1, y) || mask.get(x, y + 1) || mask.get(x + 1, y + 1);
            out.push(if any { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

/// Losses and learning-rate events of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch loss of step `i + 1`.
    pub train_loss: Vec<f64>,
    /// `(step, loss)` at each validation.
    pub validation: Vec<(usize, f64)>,
    /// `(step, new learning rate)`; the first entry is the initial rate.
    pub lr_events: Vec<(usize, f64)>,
    pub best_step: Option<usize>,
}

impl TrainHistory {
    pub fn best_validation_loss(&self) -> Option<f64> {
        let best = self.best_step?;
        self.validation.iter().find(|(s, _)| *s == best).map(|v| v.1)
    }

    /// `step,train_loss,val_loss,lr`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss,lr\n");
        let mut lr = self.lr_events.first().map_or(f64::NAN, |e| e.1);
        let mut ev = self.lr_events.iter().skip(1).peekable();
        let mut val = self.validation.iter().peekable();
        for (i, l) in self.train_loss.iter().enumerate() {
            let step = i + 1;
            while let Some(&&(s, r)) = ev.peek() {
                if s > step {
                    break;
                }
                lr = r;
                ev.next();
            }
            let v = match val.peek() {
                Some(&&(s, v)) if s == step => {
                    val.next();
                    format!("{v:.8e}")
                }
                _ => String::new(),
            };
            let _ = writeln!(out, "{step},{l:.8e},{v},{lr:.6e}");
        }
        out
    }
}

/// Progress notification passed to [`train_with`] callbacks.
#[derive(Debug, Clone, Copy)]
pub struct Progress {
    pub step: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub learning_rate: f64,
}

/// Mean per-sample loss over a set, using the model as-is.
pub fn evaluate_loss(model: &UNet<f32>, samples: &[TrainSample], defect_weight: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let p = model.forward(&s.input)?;
        total += weighted_bce_with_grad(p.data(), &s.target, defect_weight)?.0;
    }
    Ok(total / samples.len() as f64)
}

pub fn train(
    model: &UNet<f32>,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<(UNet<f32>, TrainHistory)> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// Mini-batch Adam training with plateau learning-rate decay and
/// best-validation checkpointing.
pub fn train_with(
    model: &UNet<f32>,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&Progress),
) -> Result<(UNet<f32>, TrainHistory)> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if cfg.max_steps == 0 {
        return Ok((model.clone(), history));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument("training and validation sets must be nonempty".into()));
    }
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut adam = Adam::new(&current, cfg.adam);
    let mut lr = cfg.learning_rate;
    history.lr_events.push((0, lr));
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut plateau_start = 0;
    let mut tape = Tape::new();

    for step in 1..=cfg.max_steps {
        let mut grads = Gradients::zeros_like(&current);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            // The last short batch wraps around to the start of this epoch.
            let idx = order[cursor % order.len()];
            cursor += 1;
            let s = &train_set[idx];
            let p = current.forward_recorded(&s.input, &mut tape)?;
            let (l, g) = weighted_bce_with_grad(p.data(), &s.target, cfg.defect_weight)?;
            batch_loss += l;
            tape.accumulate_logits(&current, &Tensor::from_vec(p.shape(), g)?, &mut grads)?;
        }
        if cursor >= order.len() {
            cursor = 0;
            order.shuffle(&mut rng);
        }
        batch_loss /= cfg.batch_size as f64;
        history.train_loss.push(batch_loss);
        if !batch_loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: "training loss is not finite".into(),
                history: Box::new(history),
            });
        }
        grads.scale(1.0 / cfg.batch_size as f32);
        if let Err(e) = adam.step(&mut current, &grads, lr) {
            return Err(Error::Training {
                step,
                reason: e.to_string(),
                history: Box::new(history),
            });
        }

        let mut val_loss = None;
        if step % cfg.validation_interval == 0 || step == cfg.max_steps {
            let v = evaluate_loss(&current, val_set, cfg.defect_weight)?;
            if !v.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: "validation loss is not finite".into(),
                    history: Box::new(history),
                });
            }
            history.validation.push((step, v));
            if v < best_loss {
                best_loss = v;
                best = current.clone();
                history.best_step = Some(step);
                plateau_start = step;
            }
            val_loss = Some(v);
        }
        if step - plateau_start >= cfg.plateau_steps {
            lr *= cfg.decay_factor;
            history.lr_events.push((step, lr));
            plateau_start = step;
        }
        progress(&Progress {
            step,
            train_loss: batch_loss,
            validation_loss: val_loss,
            learning_rate: lr,
        });
    }
    let out = if cfg.checkpoint_best { best } else { current };
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::UNetConfig;

    fn toy_sample(seed: u64) -> TrainSample {
        // A bright square on a dark field; the target marks the square.
        let n = 16;
        let mut img = vec![0.2f32; n * n];
        let mut tgt = vec![0.0f32; n * n];
        let o = (seed as usize % 6) + 2;
        for y in o..o + 5 {
            for x in o..o + 5 {
                img[y * n + x] = 0.05;
                tgt[y * n + x] = 1.0;
            }
        }
        let mut data = img.clone();
        data.extend(img);
        TrainSample::new(Tensor::from_vec(&[2, n, n], data).unwrap(), tgt).unwrap()
    }

    fn tiny() -> UNet<f32> {
        UNet::new(UNetConfig { depth: 2, base_channels: 4, input_size: 16, ..UNetConfig::default() }, 9).unwrap()
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let m = tiny();
        let cfg = TrainConfig { max_steps: 0, ..TrainConfig::default() };
        let (out, h) = train(&m, &[], &[], &cfg).unwrap();
        assert_eq!(out, m);
        assert_eq!(h, TrainHistory::default());
    }

    #[test]
    fn memorizes_a_single_patch() {
        let s = toy_sample(1);
        let cfg = TrainConfig {
            batch_size: 1,
            max_steps: 500,
            validation_interval: 50,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (_, h) = train(&tiny(), std::slice::from_ref(&s), std::slice::from_ref(&s), &cfg).unwrap();
        let last = *h.train_loss.last().unwrap();
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn deterministic_and_checkpoint_is_best() {
        let train_set: Vec<_> = (0..5).map(toy_sample).collect();
        let val: Vec<_> = (5..7).map(toy_sample).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            max_steps: 60,
            validation_interval: 7,
            plateau_steps: 10,
            seed: 4,
            ..TrainConfig::default()
        };
        let (m1, h1) = train(&tiny(), &train_set, &val, &cfg).unwrap();
        let (m2, h2) = train(&tiny(), &train_set, &val, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        let min = h1.validation.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        assert_eq!(h1.best_validation_loss(), Some(min));
        assert_eq!(evaluate_loss(&m1, &val, cfg.defect_weight).unwrap(), min);
        assert!(h1.lr_events.len() >= 2, "{:?}", h1.lr_events);
        let csv = h1.to_csv();
        assert_eq!(csv.lines().count(), 61);
        assert!(csv.starts_with("step,train_loss,val_loss,lr\n1,"));
    }

    #[test]
    fn any_downsampling() {
        let mut m = BinaryMask::new(4, 2, crate::imagecore::MaskKind::GroundTruth);
        m.set(3, 1, true);
        assert_eq!(downsample_mask_any(&m).unwrap(), vec![0.0, 1.0]);
    }
}
