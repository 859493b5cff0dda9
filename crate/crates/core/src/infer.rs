//! Whole-image inference by overlapping tiles at model scale.
//!
//! The radiograph is mirror-padded, turned into the two-plane input stack,
//! downsampled by two and cut into model-sized tiles. Each tile is
//! binarized on its own; the tile masks are replicated back to source scale
//! and OR-ed together.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::imagecore::{make_input_stack, pad_reflect, BinaryMask, GrayImage, InputStack, MaskKind};
use crate::imagecore::{DEFAULT_UNSHARP_AMOUNT, DEFAULT_UNSHARP_SIGMA};
use crate::nnet::{forward_patch, UNet};
use crate::{Error, Result};

/// Tile origins along both axes, at model scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile: usize,
    pub overlap: usize,
    pub width: usize,
    pub height: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `(x, y)` origins.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ys.iter().flat_map(move |&y| self.xs.iter().map(move |&x| (x, y)))
    }
}

fn axis_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let last = extent - tile;
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    v.push(last);
    v
}

/// Origins step by `tile - overlap`; the last tile on each axis is pulled
/// back to end at the edge.
pub fn plan_tiles(width: usize, height: usize, tile: usize, overlap: usize) -> Result<TileGrid> {
    if tile == 0 || overlap >= tile {
        return Err(Error::Argument(format!(
            "need tile > overlap >= 0, got tile {tile}, overlap {overlap}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Argument("cannot tile an empty image".into()));
    }
    let stride = tile - overlap;
    Ok(TileGrid {
        tile,
        overlap,
        width,
        height,
        xs: axis_origins(width, tile, stride),
        ys: axis_origins(height, tile, stride),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Binarize each tile, then OR the masks.
    Or,
    /// Average overlapping probabilities, then binarize.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Tile overlap at model scale.
    pub overlap: usize,
    pub threshold: f64,
    pub unsharp_sigma: f64,
    pub unsharp_amount: f64,
    pub merge: MergeMode,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            overlap: 32,
            threshold: 0.5,
            unsharp_sigma: DEFAULT_UNSHARP_SIGMA,
            unsharp_amount: DEFAULT_UNSHARP_AMOUNT,
            merge: MergeMode::Or,
        }
    }
}

/// Model-scale input stack with its tiling and the source-scale padding
/// that must be cropped off afterwards.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub stack: InputStack,
    pub grid: TileGrid,
    pub pad_left: usize,
    pub pad_top: usize,
    pub source_width: usize,
    pub source_height: usize,
}

/// Mirror-pad by twice the overlap (plus whatever keeps the extents even and
/// at least one tile), build the input stack and halve it.
pub fn prepare_model_input(img: &GrayImage, tile: usize, cfg: &InferConfig) -> Result<PreparedInput> {
    let (w, h) = (img.width(), img.height());
    let margin = 2 * cfg.overlap;
    let fit = |extent: usize| {
        let mut total = extent + 2 * margin;
        total += total % 2;
        total = total.max(2 * tile);
        total - extent - margin
    };
    let (right, bottom) = (fit(w), fit(h));
    let padded = pad_reflect(img, margin, margin, right, bottom);
    let stack = make_input_stack(&padded, cfg.unsharp_sigma, cfg.unsharp_amount)?.downsample2()?;
    let grid = plan_tiles(stack.width(), stack.height(), tile, cfg.overlap)?;
    Ok(PreparedInput {
        stack,
        grid,
        pad_left: margin,
        pad_top: margin,
        source_width: w,
        source_height: h,
    })
}

fn check_config(cfg: &InferConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::Argument(format!("threshold {} outside [0, 1]", cfg.threshold)));
    }
    Ok(())
}

/// Full-resolution defect mask for a radiograph.
pub fn predict_image(model: &UNet<f32>, img: &GrayImage, cfg: &InferConfig) -> Result<BinaryMask> {
    check_config(cfg)?;
    let tile = model.config().input_size;
    let prep = prepare_model_input(img, tile, cfg)?;
    let (mw, mh) = (prep.stack.width(), prep.stack.height());
    let t = cfg.threshold as f32;
    // Model-scale decision map.
    let mut model_mask = vec![false; mw * mh];
    match cfg.merge {
        MergeMode::Or => {
            for (ox, oy) in prep.grid.origins() {
                let probs = forward_patch(model, &prep.stack.crop(ox, oy, tile, tile)?)?;
                for (i, &p) in probs.data().iter().enumerate() {
                    if p > t {
                        model_mask[(oy + i / tile) * mw + ox + i % tile] = true;
                    }
                }
            }
        }
        MergeMode::Average => {
            let mut sum = vec![0.0f64; mw * mh];
            let mut count = vec![0u32; mw * mh];
            for (ox, oy) in prep.grid.origins() {
                let probs = forward_patch(model, &prep.stack.crop(ox, oy, tile, tile)?)?;
                for (i, &p) in probs.data().iter().enumerate() {
                    let k = (oy + i / tile) * mw + ox + i % tile;
                    sum[k] += f64::from(p);
                    count[k] += 1;
                }
            }
            for k in 0..mw * mh {
                model_mask[k] = count[k] > 0 && sum[k] / f64::from(count[k]) > cfg.threshold;
            }
        }
    }
    // Replicate 2×2 and drop the padding.
    let (w, h) = (prep.source_width, prep.source_height);
    let mut out = BinaryMask::new(w, h, MaskKind::Prediction);
    for y in 0..h {
        let my = (y + prep.pad_top) / 2;
        for x in 0..w {
            if model_mask[my * mw + (x + prep.pad_left) / 2] {
                out.set(x, y, true);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub tiles: usize,
    pub repetitions: usize,
    /// Per-repetition wall time divided by the tile count.
    pub samples_ms_per_tile: Vec<f64>,
    pub median_ms_per_tile: f64,
    pub tiles_per_second: f64,
}

/// Time `predict_image` after one warm-up run.
pub fn benchmark(
    model: &UNet<f32>,
    img: &GrayImage,
    cfg: &InferConfig,
    repetitions: usize,
) -> Result<BenchmarkReport> {
    if repetitions < 3 {
        return Err(Error::Argument(format!("need at least 3 repetitions, got {repetitions}")));
    }
    let tiles = prepare_model_input(img, model.config().input_size, cfg)?.grid.len();
    predict_image(model, img, cfg)?;
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        predict_image(model, img, cfg)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3 / tiles as f64);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(BenchmarkReport {
        tiles,
        repetitions,
        samples_ms_per_tile: samples,
        median_ms_per_tile: median,
        tiles_per_second: if median > 0.0 { 1e3 / median } else { f64::INFINITY },
    })
}

/// Short description of the host for benchmark reports.
pub fn machine_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown CPU".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {threads} hardware thread(s); {}-{}; single-threaded f32 inference",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::UNetConfig;
    use proptest::prelude::*;

    fn coverage(g: &TileGrid) -> Vec<u32> {
        let mut c = vec![0u32; g.width * g.height];
        for (ox, oy) in g.origins() {
            for y in oy..(oy + g.tile).min(g.height) {
                for x in ox..(ox + g.tile).min(g.width) {
                    c[y * g.width + x] += 1;
                }
            }
        }
        c
    }

    #[test]
    fn plan_examples() {
        let g = plan_tiles(256, 256, 256, 0).unwrap();
        assert_eq!(g.origins().collect::<Vec<_>>(), vec![(0, 0)]);
        assert_eq!(plan_tiles(512, 512, 256, 0).unwrap().len(), 4);
        let g = plan_tiles(300, 300, 256, 32).unwrap();
        assert_eq!(g.xs, vec![0, 44]);
        assert_eq!(g.ys, vec![0, 44]);
        assert!(coverage(&g).iter().all(|&c| c >= 1));
        assert!(matches!(plan_tiles(300, 300, 32, 32), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn tiles_cover_and_stride(w in 1usize..900, h in 1usize..900, tile in 8usize..300, ov in 0usize..64) {
            prop_assume!(ov < tile);
            let g = plan_tiles(w, h, tile, ov).unwrap();
            let c = coverage(&g);
            prop_assert!(c.iter().all(|&n| n >= 1));
            for axis in [&g.xs, &g.ys] {
                for pair in axis.windows(2) {
                    prop_assert!(pair[1] > pair[0]);
                    prop_assert!(pair[1] - pair[0] <= tile - ov);
                }
                for pair in axis.windows(2).rev().skip(1) {
                    prop_assert_eq!(pair[1] - pair[0], tile - ov);
                }
            }
        }
    }

    fn tiny_model(seed: u64, zero: bool) -> UNet<f32> {
        let cfg = UNetConfig { depth: 2, base_channels: 4, input_size: 32, ..UNetConfig::default() };
        if zero {
            UNet::zeroed(cfg).unwrap()
        } else {
            UNet::new(cfg, seed).unwrap()
        }
    }

    fn scene(w: usize, h: usize) -> GrayImage {
        let px = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                0.5 + 0.3 * ((x * 0.13).sin() * (y * 0.07).cos())
            })
            .collect();
        GrayImage::from_pixels(w, h, px, 0.1).unwrap()
    }

    #[test]
    fn thresholds_on_uniform_model() {
        let m = tiny_model(0, true);
        let img = scene(70, 50);
        let cfg = |t| InferConfig { threshold: t, overlap: 8, ..InferConfig::default() };
        assert!(predict_image(&m, &img, &cfg(0.6)).unwrap().is_empty());
        assert_eq!(predict_image(&m, &img, &cfg(0.4)).unwrap().count(), 70 * 50);
    }

    #[test]
    fn matches_union_of_tiles() {
        let m = tiny_model(3, false);
        let cfg = InferConfig { overlap: 8, threshold: 0.5, ..InferConfig::default() };
        for (w, h) in [(70, 50), (33, 97), (128, 128)] {
            let img = scene(w, h);
            let got = predict_image(&m, &img, &cfg).unwrap();
            let prep = prepare_model_input(&img, 32, &cfg).unwrap();
            let mut union = BinaryMask::new(w, h, MaskKind::Prediction);
            for (ox, oy) in prep.grid.origins() {
                let p = forward_patch(&m, &prep.stack.crop(ox, oy, 32, 32).unwrap()).unwrap();
                for ty in 0..32 {
                    for tx in 0..32 {
                        if p.data()[ty * 32 + tx] <= 0.5 {
                            continue;
                        }
                        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            let gx = 2 * (ox + tx) + dx;
                            let gy = 2 * (oy + ty) + dy;
                            if gx >= prep.pad_left && gy >= prep.pad_top {
                                let (sx, sy) = (gx - prep.pad_left, gy - prep.pad_top);
                                if sx < w && sy < h {
                                    union.set(sx, sy, true);
                                }
                            }
                        }
                    }
                }
            }
            assert_eq!(got, union, "{w}x{h}");
            assert_eq!(got, predict_image(&m, &img, &cfg).unwrap());
        }
    }

    #[test]
    fn average_mode_agrees_without_overlap_conflicts() {
        let m = tiny_model(0, true);
        let img = scene(40, 40);
        let cfg = InferConfig { overlap: 8, threshold: 0.4, merge: MergeMode::Average, ..InferConfig::default() };
        assert_eq!(predict_image(&m, &img, &cfg).unwrap().count(), 1600);
    }

    #[test]
    fn interior_output_is_shift_consistent() {
        // Tiles whose origins differ by a multiple of 2^depth see the same
        // pooling alignment, so pixels far from both tile edges agree.
        let cfg = UNetConfig { depth: 1, base_channels: 4, input_size: 48, ..UNetConfig::default() };
        let m = UNet::<f32>::new(cfg, 5).unwrap();
        let img = scene(200, 200);
        let prep = prepare_model_input(&img, 48, &InferConfig { overlap: 8, ..InferConfig::default() }).unwrap();
        let a = forward_patch(&m, &prep.stack.crop(10, 10, 48, 48).unwrap()).unwrap();
        let b = forward_patch(&m, &prep.stack.crop(20, 14, 48, 48).unwrap()).unwrap();
        let mut checked = 0;
        for y in 30..44 {
            for x in 34..48 {
                let pa = a.data()[(y - 10) * 48 + (x - 10)];
                let pb = b.data()[(y - 14) * 48 + (x - 20)];
                assert!((pa - pb).abs() < 1e-6, "({x},{y}) {pa} vs {pb}");
                checked += 1;
            }
        }
        assert_eq!(checked, 196);
    }

    #[test]
    fn benchmark_contract() {
        let m = tiny_model(1, false);
        let img = scene(64, 64);
        let cfg = InferConfig { overlap: 8, ..InferConfig::default() };
        assert!(matches!(benchmark(&m, &img, &cfg, 2), Err(Error::Argument(_))));
        let r = benchmark(&m, &img, &cfg, 5).unwrap();
        let lo = r.samples_ms_per_tile.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.samples_ms_per_tile.iter().copied().fold(0.0, f64::max);
        assert!(r.median_ms_per_tile >= lo && r.median_ms_per_tile <= hi);
        assert_eq!(r.samples_ms_per_tile.len(), 5);
        assert!(!machine_description().is_empty());
    }
}
