use weldscan::augment::{build_training_set, AugmentConfig, Strategy, TrainingRequest};
use weldscan::evalnde::score_masks;
use weldscan::infer::{predict_image, InferConfig};
use weldscan::nnet::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainSample, UNet, UNetConfig};
use weldscan::postproc::AcceptanceRules;
use weldscan::rng::Span;
use weldscan::synthgen::{generate_dataset, read_dataset, write_dataset, Dataset, SynthConfig};

fn small_dataset(n: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        width: 96,
        height: 96,
        weld_width_mm: Span::new(4.0, 5.0),
        defects_per_image: (1, 3),
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, n, seed).unwrap()
}

#[test]
fn dataset_survives_disk_round_trip() {
    let ds = small_dataset(3, 5);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.ground_truth.bits(), b.ground_truth.bits());
        assert_eq!(a.weld.bits(), b.weld.bits());
        assert_eq!(a.flaws.len(), b.flaws.len());
        let worst = a
            .image
            .pixels()
            .iter()
            .zip(b.image.pixels())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.5 / 65535.0 + 1e-12, "{worst}");
    }
}

fn tiny_unet() -> UNetConfig {
    UNetConfig { depth: 2, base_channels: 4, input_size: 32, ..UNetConfig::default() }
}

fn trained_model(ds: &Dataset) -> UNet<f32> {
    let ids: Vec<usize> = (0..ds.len()).collect();
    let acfg = AugmentConfig { patch_size: 64, min_weld_fraction: 0.5, ..AugmentConfig::default() };
    let req = TrainingRequest {
        image_ids: &ids,
        fold_id: 0,
        strategy: Strategy::Combined,
        fraction: 1.0,
        patches_per_image: 4,
    };
    let set = build_training_set(ds, &req, &acfg, 3).unwrap();
    let samples: Vec<TrainSample> = set.patches.iter().map(|p| TrainSample::from_patch(p).unwrap()).collect();
    let tcfg = TrainConfig { batch_size: 4, max_steps: 20, validation_interval: 10, ..TrainConfig::default() };
    let model = UNet::new(tiny_unet(), 8).unwrap();
    train(&model, &samples, &samples[..4], &tcfg).unwrap().0
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let ds = small_dataset(4, 9);
    let a = trained_model(&ds);
    let b = trained_model(&ds);
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.wsnn");
    save_checkpoint(&a, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, a);

    let cfg = InferConfig { overlap: 8, ..InferConfig::default() };
    let img = &ds.samples[0].image;
    assert_eq!(predict_image(&a, img, &cfg).unwrap(), predict_image(&loaded, img, &cfg).unwrap());
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let ds = small_dataset(5, 21);
    let preds: Vec<_> = ds.samples.iter().map(|s| (s.id, s.ground_truth.clone())).collect();
    let scored = score_masks(&ds, &preds, 0, &AcceptanceRules::default()).unwrap();
    assert_eq!(scored.records.len(), ds.flaw_count());
    assert!(scored.records.iter().all(|r| r.hit));
    assert!(scored.false_calls.is_empty());
}
