use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use weldscan::augment::{build_training_set, write_patches, TrainingRequest};
use weldscan::evalnde::{
    kfold_split, metrics_csv, pod_curve_csv, run_experiment_with, score_masks, train_fold, FoldOutcome,
    HitMissRecord,
};
use weldscan::imagecore::{load_mask, load_pgm16, save_mask, save_pgm16, GrayImage};
use weldscan::infer::{benchmark, machine_description, predict_image, prepare_model_input};
use weldscan::nnet::{load_checkpoint, save_checkpoint, TrainHistory, UNet};
use weldscan::postproc::{indication_report, process_mask, render_overlay};
use weldscan::rng::{child_seed, labeled_seed};
use weldscan::synthgen::{generate_dataset, read_dataset, render_scene, sample_scene, write_dataset, Dataset};

use crate::config::PipelineConfig;
use crate::report;

/// Published GPU inference time per patch, quoted for context in benchmark reports.
const REFERENCE_GPU_MS_PER_PATCH: f64 = 6.3;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: Versions,
    inputs: Vec<String>,
    outputs: Vec<String>,
    config: &'a PipelineConfig,
}

#[derive(Serialize)]
struct Versions {
    weldscan_cli: &'static str,
    checkpoint_format: u32,
}

fn rel(cfg: &PipelineConfig, p: &Path) -> String {
    p.strip_prefix(&cfg.output_dir).unwrap_or(p).display().to_string()
}

fn write_manifest(cfg: &PipelineConfig, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<PathBuf> {
    let dir = cfg.output_dir.join("manifests");
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let m = RunManifest {
        command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions: Versions {
            weldscan_cli: env!("CARGO_PKG_VERSION"),
            checkpoint_format: weldscan::nnet::CHECKPOINT_VERSION,
        },
        inputs: inputs.iter().map(|p| rel(cfg, p)).collect(),
        outputs: outputs.iter().map(|p| rel(cfg, p)).collect(),
        config: cfg,
    };
    let path = dir.join(format!("{command}.json"));
    write_text(&path, &(serde_json::to_string_pretty(&m)? + "\n"))?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn dataset_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

fn checkpoint_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("model").join("checkpoint.wsnn")
}

fn predictions_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("predictions")
}

/// An upstream artifact a command needs is absent.
#[derive(Debug)]
pub struct MissingInput(pub String);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingInput {}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(MissingInput(format!("missing {what}: {} does not exist; {hint}", path.display())).into());
    }
    Ok(())
}

fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let dir = dataset_dir(cfg);
    require(
        &dir.join(weldscan::synthgen::MANIFEST_NAME),
        "dataset manifest",
        "run `weldscan synth` first",
    )?;
    Ok(read_dataset(&dir)?)
}

fn load_model(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<(UNet<f32>, PathBuf)> {
    let path = checkpoint.map_or_else(|| checkpoint_path(cfg), Path::to_path_buf);
    require(&path, "model checkpoint", "run `weldscan train` first or pass --checkpoint")?;
    Ok((load_checkpoint(&path)?, path))
}

/// Holdout fold images and the remaining training images.
fn split(cfg: &PipelineConfig, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let folds = kfold_split(n, cfg.evalnde.folds, labeled_seed(cfg.seed, "kfold"))?;
    let holdout = folds[cfg.evalnde.holdout_fold].clone();
    let training = folds
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != cfg.evalnde.holdout_fold)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    Ok((holdout, training))
}

pub fn synth(cfg: &PipelineConfig) -> Result<()> {
    let ds = generate_dataset(&cfg.synth.scene, cfg.synth.images, labeled_seed(cfg.seed, "synth"))?;
    let manifest = write_dataset(&ds, &dataset_dir(cfg))?;
    write_manifest(cfg, "synth", &[], &[manifest.clone()])?;
    eprintln!("wrote {} images with {} flaws to {}", ds.len(), ds.flaw_count(), dataset_dir(cfg).display());
    Ok(())
}

pub fn augment(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (_, training) = split(cfg, ds.len())?;
    let fold = cfg.evalnde.holdout_fold;
    let req = TrainingRequest {
        image_ids: &training,
        fold_id: fold,
        strategy: cfg.augment.strategy,
        fraction: cfg.augment.fraction,
        patches_per_image: cfg.augment.patches_per_image,
    };
    // Same seed derivation as training, so the written patches are the ones trained on.
    let seed = child_seed(labeled_seed(cfg.seed, "fold"), fold as u64);
    let set = build_training_set(&ds, &req, &cfg.augment.params, seed)?;
    let dir = cfg.output_dir.join("patches");
    let index = write_patches(&set.patches, &dir)?;
    write_manifest(cfg, "augment", &[dataset_dir(cfg)], &[index])?;
    eprintln!("wrote {} patches from {} images to {}", set.patches.len(), set.images.len(), dir.display());
    Ok(())
}

pub fn train(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (_, training) = split(cfg, ds.len())?;
    let exp = cfg.experiment();
    let (model, history, used) = train_fold(
        &ds,
        &exp,
        cfg.augment.strategy,
        cfg.augment.fraction,
        cfg.evalnde.holdout_fold,
        &training,
        cfg.seed,
    )?;
    let ckpt = checkpoint_path(cfg);
    fs::create_dir_all(ckpt.parent().expect("has parent"))?;
    save_checkpoint(&model, &ckpt)?;
    let hist = cfg.output_dir.join("model").join("history.csv");
    write_text(&hist, &history.to_csv())?;
    let summary = cfg.output_dir.join("model").join("training.json");
    write_json(
        &summary,
        &serde_json::json!({
            "training_images": used,
            "steps": history.train_loss.len(),
            "best_step": history.best_step,
            "best_validation_loss": history.best_validation_loss(),
        }),
    )?;
    write_manifest(cfg, "train", &[dataset_dir(cfg)], &[ckpt.clone(), hist, summary])?;
    eprintln!(
        "trained {} steps, best step {:?}; checkpoint {}",
        history.train_loss.len(),
        history.best_step,
        ckpt.display()
    );
    Ok(())
}

pub fn infer(cfg: &PipelineConfig, inputs: &[PathBuf], checkpoint: Option<&Path>) -> Result<()> {
    let (model, ckpt) = load_model(cfg, checkpoint)?;
    let mut jobs: Vec<(String, GrayImage)> = Vec::new();
    let mut sources = vec![ckpt];
    if inputs.is_empty() {
        let ds = load_dataset(cfg)?;
        let (holdout, _) = split(cfg, ds.len())?;
        for id in holdout {
            jobs.push((format!("{id:04}"), ds.samples[id].image.clone()));
        }
        sources.push(dataset_dir(cfg));
    } else {
        for p in inputs {
            require(p, "input image", "check the --input path")?;
            let stem = p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            jobs.push((stem, load_pgm16(p)?));
            sources.push(p.clone());
        }
    }
    let dir = predictions_dir(cfg);
    fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    for (name, img) in &jobs {
        let mask = predict_image(&model, img, &cfg.infer)?;
        let inds = process_mask(&mask, img.pixel_pitch(), &cfg.postproc)?;
        let mask_path = dir.join(format!("pred_{name}.pgm"));
        save_mask(&mask, img.pixel_pitch(), &mask_path)?;
        let overlay_path = dir.join(format!("overlay_{name}.pgm"));
        save_pgm16(&render_overlay(img, &inds), &overlay_path)?;
        let report_path = dir.join(format!("indications_{name}.json"));
        write_json(&report_path, &indication_report(&inds))?;
        eprintln!("{name}: {} indications", inds.len());
        outputs.extend([mask_path, overlay_path, report_path]);
    }
    write_manifest(cfg, "infer", &sources, &outputs)?;
    Ok(())
}

fn records_csv(records: &[HitMissRecord]) -> String {
    let mut s = String::from("image_id,fold,true_size_mm,hit,pred_size_mm\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            r.image_id,
            r.fold_id,
            r.true_size_mm,
            u8::from(r.hit),
            r.matched_pred_size_mm.map_or_else(String::new, |v| format!("{v:.6}"))
        ));
    }
    s
}

pub fn eval(cfg: &PipelineConfig, predictions: Option<&Path>) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (holdout, _) = split(cfg, ds.len())?;
    let dir = predictions.map_or_else(|| predictions_dir(cfg), Path::to_path_buf);
    require(&dir, "predictions directory", "run `weldscan infer` first or pass --predictions")?;
    let mut preds = Vec::new();
    for &id in &holdout {
        let p = dir.join(format!("pred_{id:04}.pgm"));
        require(&p, "prediction mask", "run `weldscan infer` first")?;
        preds.push((id, load_mask(&p)?));
    }
    let fold = cfg.evalnde.holdout_fold;
    let scored = score_masks(&ds, &preds, fold, &cfg.postproc)?;
    let outcome = FoldOutcome::from_scores(
        cfg.augment.strategy,
        cfg.augment.fraction,
        fold,
        holdout,
        Vec::new(),
        scored,
        TrainHistory::default(),
    );
    let row = outcome.row();
    let out = cfg.output_dir.join("eval");
    let metrics = out.join("metrics.csv");
    write_text(&metrics, &metrics_csv(std::slice::from_ref(&row)))?;
    let json = out.join("metrics.json");
    write_json(
        &json,
        &serde_json::json!({
            "metrics": row,
            "pod": outcome.pod.as_ref().ok(),
            "pod_error": outcome.pod.as_ref().err(),
            "sizing": outcome.sizing,
            "false_call_rates": outcome.rates,
            "false_calls": outcome.false_calls,
        }),
    )?;
    let records = out.join("records.csv");
    write_text(&records, &records_csv(&outcome.records))?;
    let mut outputs = vec![metrics, json, records];
    if let Ok(curve) = &outcome.pod {
        let p = out.join("pod_curve.csv");
        write_text(&p, &pod_curve_csv(curve))?;
        outputs.push(p);
    }
    write_manifest(cfg, "eval", &[dataset_dir(cfg), dir], &outputs)?;
    eprintln!(
        "{}/{} hits, a90/95 {}, pod status {}",
        row.hits,
        row.flaws,
        row.a90_95_mm.map_or_else(|| "n/a".into(), |v| format!("{v:.3} mm")),
        row.pod_status.as_str()
    );
    Ok(())
}

pub fn experiment(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let result = run_experiment_with(&ds, &cfg.experiment(), cfg.seed, |m| eprintln!("{m}"))?;
    let out = cfg.output_dir.join("experiment");
    let metrics = out.join("metrics.csv");
    write_text(&metrics, &metrics_csv(&result.rows))?;
    let json = out.join("metrics.json");
    write_json(&json, &serde_json::json!({ "rows": result.rows, "failures": result.failures }))?;
    let mut all = Vec::new();
    let mut outputs = vec![metrics, json];
    for o in &result.outcomes {
        all.extend(o.records.iter().cloned());
        if let Ok(curve) = &o.pod {
            let p = out
                .join("pod")
                .join(format!("{}_{}_{}.csv", o.strategy.as_str(), o.fraction, o.fold));
            write_text(&p, &pod_curve_csv(curve))?;
            outputs.push(p);
        }
    }
    let records = out.join("records.csv");
    write_text(&records, &records_csv(&all))?;
    outputs.push(records);
    write_manifest(cfg, "experiment", &[dataset_dir(cfg)], &outputs)?;
    eprintln!(
        "{} rows, {} failed folds; metrics in {}",
        result.rows.len(),
        result.failures.len(),
        out.display()
    );
    Ok(())
}

pub fn report(cfg: &PipelineConfig, metrics: Option<&Path>) -> Result<()> {
    let path = metrics.map_or_else(|| cfg.output_dir.join("experiment").join("metrics.csv"), Path::to_path_buf);
    require(&path, "metrics CSV", "run `weldscan experiment` or `weldscan eval` first")?;
    let rows = report::parse_metrics(&fs::read_to_string(&path)?)?;
    let out = cfg.output_dir.join("report");
    let mut outputs = Vec::new();
    for (name, svg) in report::metric_plots(&rows)? {
        let p = out.join(name);
        write_text(&p, &svg)?;
        outputs.push(p);
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pod_files: Vec<PathBuf> = Vec::new();
    if base.join("pod_curve.csv").exists() {
        pod_files.push(base.join("pod_curve.csv"));
    }
    if let Ok(entries) = fs::read_dir(base.join("pod")) {
        let mut v: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        v.sort();
        pod_files.extend(v);
    }
    for p in &pod_files {
        let stem = p.file_stem().expect("csv file").to_string_lossy();
        let svg = report::pod_plot(&format!("POD {stem}"), &fs::read_to_string(p)?)?;
        let o = out.join(format!("pod_{stem}.svg"));
        write_text(&o, &svg)?;
        outputs.push(o);
    }
    let summary = out.join("summary.md");
    write_text(&summary, &report::summary_markdown(&rows))?;
    outputs.push(summary);
    let mut inputs = vec![path];
    inputs.extend(pod_files);
    write_manifest(cfg, "report", &inputs, &outputs)?;
    eprintln!("wrote {} report files to {}", outputs.len(), out.display());
    Ok(())
}

pub fn bench(cfg: &PipelineConfig, repetitions: usize, checkpoint: Option<&Path>) -> Result<()> {
    let explicit = checkpoint.is_some() || checkpoint_path(cfg).exists();
    let (model, weights) = if explicit {
        let (m, p) = load_model(cfg, checkpoint)?;
        (m, p.display().to_string())
    } else {
        // Timing does not depend on the weight values.
        let m = UNet::new(cfg.nnet.unet.clone(), labeled_seed(cfg.seed, "bench"))?;
        (m, "untrained (no checkpoint found)".to_string())
    };
    let spec = sample_scene(&cfg.synth.scene, labeled_seed(cfg.seed, "bench"), 0)?;
    let (img, _, _) = render_scene(&spec)?;
    let tiles = prepare_model_input(&img, model.config().input_size, &cfg.infer)?.grid.len();
    let r = benchmark(&model, &img, &cfg.infer, repetitions)?;
    let machine = machine_description();
    let out = cfg.output_dir.join("bench");
    let json = out.join("bench.json");
    write_json(
        &json,
        &serde_json::json!({
            "median_ms_per_tile": r.median_ms_per_tile,
            "tiles_per_second": r.tiles_per_second,
            "tiles_per_image": tiles,
            "repetitions": r.repetitions,
            "samples_ms_per_tile": r.samples_ms_per_tile,
            "image": [img.width(), img.height()],
            "tile_size": model.config().input_size,
            "model_parameters": model.parameter_count(),
            "weights": weights,
            "machine": machine,
            "reference_gpu_ms_per_patch": REFERENCE_GPU_MS_PER_PATCH,
        }),
    )?;
    let md = out.join("bench.md");
    write_text(
        &md,
        &format!(
            "# Inference throughput\n\n\
- median: {:.3} ms per tile ({:.1} tiles/s)\n\
- tiles per {}x{} image: {tiles}, tile size {} at half resolution\n\
- model parameters: {}\n\
- machine: {machine}\n\
- weights: {weights}\n\n\
The reference figure of {REFERENCE_GPU_MS_PER_PATCH} ms per patch was measured on a GPU with the full-size \
network. This desk figure is single-threaded CPU time for the configured model and is not directly comparable.\n",
            r.median_ms_per_tile,
            r.tiles_per_second,
            img.width(),
            img.height(),
            model.config().input_size,
            model.parameter_count(),
        ),
    )?;
    write_manifest(cfg, "bench", &[], &[json, md.clone()])?;
    print!("{}", fs::read_to_string(&md)?);
    Ok(())
}
