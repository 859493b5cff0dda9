use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use weldscan::augment::{AugmentConfig, Strategy};
use weldscan::evalnde::ExperimentConfig;
use weldscan::infer::InferConfig;
use weldscan::nnet::{TrainConfig, UNetConfig};
use weldscan::postproc::AcceptanceRules;
use weldscan::synthgen::SynthConfig;

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ROOT_VAR: &str = "WELDSCAN_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub images: usize,
    #[serde(flatten)]
    pub scene: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            images: 64,
            scene: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub strategy: Strategy,
    pub fraction: f64,
    pub patches_per_image: usize,
    /// Patch geometry and transform ranges.
    pub params: AugmentConfig,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            strategy: Strategy::Combined,
            fraction: 1.0,
            patches_per_image: e.patches_per_image,
            params: e.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnetSection {
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub checkpoint_patches_per_image: usize,
}

impl Default for NnetSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            unet: e.unet,
            train: e.train,
            checkpoint_patches_per_image: e.checkpoint_patches_per_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub folds: usize,
    /// Fold held out by `train`, `infer` and `eval`.
    pub holdout_fold: usize,
    pub strategies: Vec<Strategy>,
    pub fractions: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            folds: e.folds,
            holdout_fold: 0,
            strategies: e.strategies,
            fractions: e.fractions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub synth: SynthSection,
    pub augment: AugmentSection,
    pub nnet: NnetSection,
    pub infer: InferConfig,
    pub postproc: AcceptanceRules,
    pub evalnde: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
            synth: SynthSection::default(),
            augment: AugmentSection::default(),
            nnet: NnetSection::default(),
            infer: e.infer,
            postproc: e.acceptance,
            evalnde: EvalSection::default(),
        }
    }
}

/// Command-line layers applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key '{key}'");
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("override '{key}': '{p}' is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Overlay `top` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Defaults, then the file, then `--set` pairs, then the output-root
    /// variable, then `--seed` and `--out`.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("config file {} not found or unreadable", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("config file {} is not valid TOML", p.display()))?
            }
            None => toml::Table::new(),
        };
        for s in &ov.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("override '{s}' is not KEY=VALUE"))?;
            set_path(&mut table, k.trim(), parse_scalar(v.trim()))?;
        }
        let mut merged = toml::Table::try_from(PipelineConfig::default()).context("defaults serialize")?;
        merge(&mut merged, table);
        let mut cfg: PipelineConfig = toml::Value::Table(merged)
            .try_into()
            .context("invalid configuration")?;
        if let Some(root) = &ov.output_root {
            cfg.output_dir = root.clone();
        }
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &ov.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.scene.validate()?;
        if self.synth.images == 0 {
            bail!("synth.images must be >= 1");
        }
        self.experiment().validate()?;
        if !(self.augment.fraction > 0.0 && self.augment.fraction <= 1.0) {
            bail!("augment.fraction {} outside (0, 1]", self.augment.fraction);
        }
        if self.evalnde.holdout_fold >= self.evalnde.folds {
            bail!(
                "evalnde.holdout_fold {} must be < folds {}",
                self.evalnde.holdout_fold,
                self.evalnde.folds
            );
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            strategies: self.evalnde.strategies.clone(),
            fractions: self.evalnde.fractions.clone(),
            folds: self.evalnde.folds,
            patches_per_image: self.augment.patches_per_image,
            checkpoint_patches_per_image: self.nnet.checkpoint_patches_per_image,
            augment: self.augment.params.clone(),
            unet: self.nnet.unet.clone(),
            train: self.nnet.train.clone(),
            infer: self.infer.clone(),
            acceptance: self.postproc.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved config. The
    /// output directory is left out so relocated reruns share a hash.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        hex::encode(Sha256::digest(value.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
