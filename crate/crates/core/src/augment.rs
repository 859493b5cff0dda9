//! Training-set construction: patch sampling, standard augmentation and
//! virtual-flaw augmentation (extract annotated flaws, transform them, and
//! re-embed them into flaw-free weld regions).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imagecore::{
    apply_affine, save_mask, save_pgm16, AffineTransform, BinaryMask, Border, GrayImage, MaskKind,
    Warp,
};
use crate::postproc::{connected_components, feret_size_mm};
use crate::rng::{child_rng, child_seed, labeled_seed, Span};
use crate::synthgen::Dataset;
use crate::{Error, Result};

/// Margin around each extracted flaw, pixels.
pub const SNIPPET_MARGIN: usize = 8;
const TRANSFORM_RETRIES: usize = 8;
const PLACEMENT_ATTEMPTS: usize = 32;
const WELD_REJECTION_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    StandardAug,
    VirtualAug,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::StandardAug => "standard_aug",
            Provenance::VirtualAug => "virtual_aug",
        }
    }
}

/// Square training crop with aligned masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub weld: BinaryMask,
    pub provenance: Provenance,
    /// Source image id and top-left corner of the crop.
    pub source: usize,
    pub origin: (usize, usize),
    /// Composite geometric transform applied since cropping.
    pub geometry: AffineTransform,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.image.width()
    }
}

/// Enable flags and ranges for every augmentation. A `None` range disables
/// that transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub patch_size: usize,
    /// Share of sampled patches that must touch the weld.
    pub min_weld_fraction: f64,
    /// Probability that each enabled transform fires.
    pub transform_probability: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotation_deg: Option<Span>,
    pub shear: Option<Span>,
    /// Side of the crop window relative to the patch before resizing back.
    pub crop_scale: Option<Span>,
    pub brightness: Option<Span>,
    pub contrast: Option<Span>,
    pub noise_sigma: Option<Span>,
    pub flaw_rotation_deg: Span,
    pub flaw_scale: Span,
    pub flaw_shear: Span,
    pub flaw_noise_sigma: f64,
    /// Inclusive number of flaws embedded per virtual patch.
    pub flaws_per_patch: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            patch_size: 512,
            min_weld_fraction: 0.7,
            transform_probability: 0.5,
            flip_horizontal: true,
            flip_vertical: true,
            rotation_deg: Some(Span::new(-15.0, 15.0)),
            shear: Some(Span::new(-0.15, 0.15)),
            crop_scale: Some(Span::new(0.8, 1.0)),
            brightness: Some(Span::new(-0.1, 0.1)),
            contrast: Some(Span::new(0.8, 1.2)),
            noise_sigma: Some(Span::new(0.0, 0.02)),
            flaw_rotation_deg: Span::new(-180.0, 180.0),
            flaw_scale: Span::new(0.8, 1.25),
            flaw_shear: Span::new(-0.1, 0.1),
            flaw_noise_sigma: 0.005,
            flaws_per_patch: (1, 3),
        }
    }
}

impl AugmentConfig {
    /// Everything off: `standard_augment` becomes a relabel.
    pub fn disabled() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            rotation_deg: None,
            shear: None,
            crop_scale: None,
            brightness: None,
            contrast: None,
            noise_sigma: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::Argument("patch_size must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.min_weld_fraction) {
            return Err(Error::Argument("min_weld_fraction must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.transform_probability) {
            return Err(Error::Argument("transform_probability must be in [0, 1]".into()));
        }
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("shear", self.shear),
            ("crop_scale", self.crop_scale),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("noise_sigma", self.noise_sigma),
            ("flaw_rotation_deg", Some(self.flaw_rotation_deg)),
            ("flaw_scale", Some(self.flaw_scale)),
            ("flaw_shear", Some(self.flaw_shear)),
        ];
        for (name, r) in ranges {
            if let Some(r) = r {
                if !r.is_valid() {
                    return Err(Error::Argument(format!("{name} range is empty")));
                }
            }
        }
        if let Some(c) = self.crop_scale {
            if !(c.min > 0.0 && c.max <= 1.0) {
                return Err(Error::Argument("crop_scale must lie in (0, 1]".into()));
            }
        }
        if let Some(n) = self.noise_sigma {
            if n.min < 0.0 {
                return Err(Error::Argument("noise sigma must be >= 0".into()));
            }
        }
        if !(self.flaw_noise_sigma >= 0.0) {
            return Err(Error::Argument("flaw noise sigma must be >= 0".into()));
        }
        if !(self.flaw_scale.min > 0.0) {
            return Err(Error::Argument("flaw_scale must be > 0".into()));
        }
        if self.flaws_per_patch.0 > self.flaws_per_patch.1 {
            return Err(Error::Argument("flaws_per_patch range is empty".into()));
        }
        Ok(())
    }
}

/// Summed-area table for constant-time box counts.
struct Integral {
    w: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &BinaryMask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask.get(x, y) as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w: w + 1, sums }
    }

    fn count(&self, x0: usize, y0: usize, size: usize) -> u32 {
        let (x1, y1) = (x0 + size, y0 + size);
        self.sums[y1 * self.w + x1] + self.sums[y0 * self.w + x0]
            - self.sums[y0 * self.w + x1]
            - self.sums[y1 * self.w + x0]
    }
}

fn crop_patch(
    img: &GrayImage,
    gt: &BinaryMask,
    weld: &BinaryMask,
    source: usize,
    (x, y): (usize, usize),
    size: usize,
) -> Result<Patch> {
    Ok(Patch {
        image: img.crop(x, y, size, size)?,
        mask: gt.crop(x, y, size, size)?,
        weld: weld.crop(x, y, size, size)?,
        provenance: Provenance::Real,
        source,
        origin: (x, y),
        geometry: AffineTransform::identity(),
    })
}

fn check_frames(img: &GrayImage, gt: &BinaryMask, weld: &BinaryMask, size: usize) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    if gt.width() != w || gt.height() != h || weld.width() != w || weld.height() != h {
        return Err(Error::Shape("image and masks differ in size".into()));
    }
    if w < size || h < size {
        return Err(Error::Argument(format!(
            "image {w}x{h} is smaller than the {size}x{size} patch"
        )));
    }
    Ok(())
}

/// `n` random crops. The first `ceil(min_weld_fraction·n)` are required to
/// touch the weld (when the image has any weld pixels).
pub fn sample_patches<R: Rng>(
    img: &GrayImage,
    gt: &BinaryMask,
    weld: &BinaryMask,
    n: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    sample_patches_from(img, gt, weld, 0, n, cfg, rng)
}

fn sample_patches_from<R: Rng>(
    img: &GrayImage,
    gt: &BinaryMask,
    weld: &BinaryMask,
    source: usize,
    n: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    let size = cfg.patch_size;
    check_frames(img, gt, weld, size)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let integral = Integral::new(weld);
    let need_weld = if weld.is_empty() {
        0
    } else {
        (cfg.min_weld_fraction * n as f64).ceil() as usize
    };
    let (max_x, max_y) = (img.width() - size, img.height() - size);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut corner = (rng.random_range(0..=max_x), rng.random_range(0..=max_y));
        if k < need_weld {
            let mut tries = 0;
            while integral.count(corner.0, corner.1, size) == 0 {
                tries += 1;
                if tries >= WELD_REJECTION_LIMIT {
                    return Err(Error::Argument(
                        "could not sample a patch touching the weld".into(),
                    ));
                }
                corner = (rng.random_range(0..=max_x), rng.random_range(0..=max_y));
            }
        }
        out.push(crop_patch(img, gt, weld, source, corner, size)?);
    }
    Ok(out)
}

fn fires<R: Rng>(p: f64, rng: &mut R) -> bool {
    p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p)
}

/// Draw the geometric part of a standard augmentation as one affine map.
fn draw_geometry<R: Rng>(size: usize, cfg: &AugmentConfig, rng: &mut R) -> AffineTransform {
    let p = cfg.transform_probability;
    let c = (size as f64 - 1.0) / 2.0;
    let mut t = AffineTransform::identity();
    if cfg.flip_horizontal && fires(p, rng) {
        t = t.then(&AffineTransform::flip_horizontal(size));
    }
    if cfg.flip_vertical && fires(p, rng) {
        t = t.then(&AffineTransform::flip_vertical(size));
    }
    if let Some(r) = cfg.rotation_deg {
        if fires(p, rng) {
            t = t.then(&AffineTransform::rotation_about(c, c, r.sample(rng)));
        }
    }
    if let Some(s) = cfg.shear {
        if fires(p, rng) {
            t = t.then(&AffineTransform::shear_about(c, c, s.sample(rng)));
        }
    }
    if let Some(s) = cfg.crop_scale {
        if fires(p, rng) {
            let scale = s.sample(rng).max(1e-3);
            let window = scale * size as f64;
            let slack = size as f64 - window;
            let (ox, oy) = (slack * rng.random::<f64>(), slack * rng.random::<f64>());
            // Map window [o, o+window) onto [0, size).
            let k = 1.0 / scale;
            let zoom = AffineTransform::translation(-ox, -oy).then(
                &AffineTransform::scale_about(-0.5, -0.5, k, k).expect("positive scale"),
            );
            t = t.then(&zoom);
        }
    }
    t
}

/// Random subset of the enabled transforms, applied geometry first, then
/// brightness/contrast, then additive noise. Geometry hits image and both
/// masks identically; photometry touches the image only.
pub fn standard_augment<R: Rng>(p: &Patch, cfg: &AugmentConfig, rng: &mut R) -> Result<Patch> {
    cfg.validate()?;
    let size = p.size();
    let geometry = draw_geometry(size, cfg, rng);
    let (mut image, mask, weld) = if geometry.is_identity() {
        (p.image.clone(), p.mask.clone(), p.weld.clone())
    } else {
        (
            apply_affine(&p.image, &geometry)?,
            apply_affine(&p.mask, &geometry)?,
            apply_affine(&p.weld, &geometry)?,
        )
    };

    let prob = cfg.transform_probability;
    if let Some(b) = cfg.brightness {
        if fires(prob, rng) {
            let delta = b.sample(rng);
            image = image.map(|v| v + delta);
        }
    }
    if let Some(c) = cfg.contrast {
        if fires(prob, rng) {
            let factor = c.sample(rng);
            let mean = image.mean();
            image = image.map(|v| mean + (v - mean) * factor);
        }
    }
    if let Some(n) = cfg.noise_sigma {
        if fires(prob, rng) {
            let sigma = n.sample(rng);
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                let noisy: Vec<f64> = image
                    .pixels()
                    .iter()
                    .map(|&v| v + normal.sample(rng))
                    .collect();
                image = GrayImage::from_unclamped(size, size, noisy, image.pixel_pitch())?;
            }
        }
    }
    Ok(Patch {
        image,
        mask,
        weld,
        provenance: Provenance::StandardAug,
        source: p.source,
        origin: p.origin,
        geometry: p.geometry.then(&geometry),
    })
}

/// One annotated flaw cut out of a radiograph.
#[derive(Debug, Clone, PartialEq)]
pub struct FlawInstance {
    pub snippet: GrayImage,
    pub snippet_mask: BinaryMask,
    /// Median intensity of the snippet's non-flaw pixels.
    pub background_level: f64,
    /// Max Feret diameter of the mask, mm.
    pub size_mm: f64,
    pub source_image: usize,
}

impl FlawInstance {
    pub fn new(
        snippet: GrayImage,
        snippet_mask: BinaryMask,
        background_level: f64,
        source_image: usize,
    ) -> Result<Self> {
        if snippet_mask.is_empty() {
            return Err(Error::Argument("flaw mask is empty".into()));
        }
        if snippet.width() != snippet_mask.width() || snippet.height() != snippet_mask.height() {
            return Err(Error::Shape("snippet and mask differ in size".into()));
        }
        if !(background_level > 0.0 && background_level < 1.0) {
            return Err(Error::Argument(format!(
                "background level {background_level} outside (0, 1)"
            )));
        }
        let pixels: Vec<_> = snippet_mask.iter_set().collect();
        let size_mm = feret_size_mm(&pixels, snippet.pixel_pitch());
        Ok(Self {
            snippet,
            snippet_mask,
            background_level,
            size_mm,
            source_image,
        })
    }
}

/// Flaw pool drawn from one training fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FlawBank {
    pub instances: Vec<FlawInstance>,
    pub fold_id: usize,
    pub source_images: BTreeSet<usize>,
}

impl FlawBank {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Fails unless the bank belongs to `fold_id` and every source image is
    /// one of `training_images`.
    pub fn check_leakage(&self, fold_id: usize, training_images: &[usize]) -> Result<()> {
        if self.fold_id != fold_id {
            return Err(Error::Leakage(format!(
                "flaw bank from fold {} used for fold {fold_id}",
                self.fold_id
            )));
        }
        let allowed: BTreeSet<usize> = training_images.iter().copied().collect();
        if let Some(bad) = self.source_images.iter().find(|i| !allowed.contains(i)) {
            return Err(Error::Leakage(format!(
                "flaw bank contains image {bad}, which is not in the training set"
            )));
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn clamp_background(v: f64) -> f64 {
    v.clamp(1e-3, 1.0 - 1e-3)
}

/// One instance per ground-truth component of the listed training images.
pub fn extract_flaws(dataset: &Dataset, training_images: &[usize], fold_id: usize) -> Result<FlawBank> {
    if training_images.is_empty() {
        return Err(Error::Argument("training fold is empty".into()));
    }
    let mut instances = Vec::new();
    let mut source_images = BTreeSet::new();
    for &id in training_images {
        let sample = dataset
            .samples
            .get(id)
            .ok_or_else(|| Error::Argument(format!("image index {id} out of range")))?;
        source_images.insert(id);
        let (w, h) = (sample.image.width(), sample.image.height());
        for comp in connected_components(&sample.ground_truth) {
            let (x0, y0, x1, y1) = comp.bounding_box();
            let cx0 = x0.saturating_sub(SNIPPET_MARGIN);
            let cy0 = y0.saturating_sub(SNIPPET_MARGIN);
            let cx1 = (x1 + SNIPPET_MARGIN).min(w - 1);
            let cy1 = (y1 + SNIPPET_MARGIN).min(h - 1);
            let (cw, ch) = (cx1 - cx0 + 1, cy1 - cy0 + 1);
            let snippet = sample.image.crop(cx0, cy0, cw, ch)?;
            let mut mask = BinaryMask::new(cw, ch, MaskKind::GroundTruth);
            for &(x, y) in &comp.pixels {
                mask.set(x - cx0, y - cy0, true);
            }
            let full = sample.ground_truth.crop(cx0, cy0, cw, ch)?;
            let background: Vec<f64> = (0..ch)
                .flat_map(|y| (0..cw).map(move |x| (x, y)))
                .filter(|&(x, y)| !full.get(x, y))
                .map(|(x, y)| snippet.get(x, y))
                .collect();
            let level = median(background).unwrap_or_else(|| snippet.mean());
            instances.push(FlawInstance::new(snippet, mask, clamp_background(level), id)?);
        }
    }
    Ok(FlawBank {
        instances,
        fold_id,
        source_images,
    })
}

/// Explicit parameters of a flaw transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlawTransform {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear: f64,
    pub noise_sigma: f64,
}

impl FlawTransform {
    pub fn identity() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            rotation_deg: 0.0,
            scale: 1.0,
            shear: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        Self {
            flip_horizontal: rng.random::<bool>(),
            flip_vertical: rng.random::<bool>(),
            rotation_deg: cfg.flaw_rotation_deg.sample(rng),
            scale: cfg.flaw_scale.sample(rng),
            shear: cfg.flaw_shear.sample(rng),
            noise_sigma: cfg.flaw_noise_sigma,
        }
    }

    fn geometry(&self, w: usize, h: usize) -> Result<AffineTransform> {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut t = AffineTransform::identity();
        if self.flip_horizontal {
            t = t.then(&AffineTransform::flip_horizontal(w));
        }
        if self.flip_vertical {
            t = t.then(&AffineTransform::flip_vertical(h));
        }
        if self.rotation_deg != 0.0 {
            t = t.then(&AffineTransform::rotation_about(cx, cy, self.rotation_deg));
        }
        if self.shear != 0.0 {
            t = t.then(&AffineTransform::shear_about(cx, cy, self.shear));
        }
        if self.scale != 1.0 {
            t = t.then(&AffineTransform::scale_about(cx, cy, self.scale, self.scale)?);
        }
        Ok(t)
    }
}

/// Apply `params` to snippet and mask jointly. The canvas grows to hold the
/// whole transformed snippet; uncovered pixels take the background level.
pub fn transform_flaw_with<R: Rng>(
    f: &FlawInstance,
    params: &FlawTransform,
    rng: &mut R,
) -> Result<FlawInstance> {
    let (w, h) = (f.snippet.width(), f.snippet.height());
    let t = params.geometry(w, h)?;
    let (snippet, mask) = if t.is_identity() {
        (f.snippet.clone(), f.snippet_mask.clone())
    } else {
        let corners = [
            (-0.5, -0.5),
            (w as f64 - 0.5, -0.5),
            (-0.5, h as f64 - 0.5),
            (w as f64 - 0.5, h as f64 - 0.5),
        ]
        .map(|(x, y)| t.apply(x, y));
        let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let (ox, oy) = ((min_x + 0.5).floor(), (min_y + 0.5).floor());
        let nw = ((max_x - 0.5).ceil() - ox + 1.0).max(1.0) as usize;
        let nh = ((max_y - 0.5).ceil() - oy + 1.0).max(1.0) as usize;
        let t = t.then(&AffineTransform::translation(-ox, -oy));
        (
            f.snippet.warp(&t, nw, nh, Border::Constant(f.background_level))?,
            f.snippet_mask.warp(&t, nw, nh, Border::Constant(0.0))?,
        )
    };
    if mask.is_empty() {
        return Err(Error::DegenerateData("transformed flaw mask is empty".into()));
    }
    let snippet = if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::Argument(format!("noise sigma: {e}")))?;
        let px: Vec<f64> = snippet.pixels().iter().map(|&v| v + normal.sample(rng)).collect();
        GrayImage::from_unclamped(snippet.width(), snippet.height(), px, snippet.pixel_pitch())?
    } else {
        snippet
    };
    FlawInstance::new(snippet, mask, f.background_level, f.source_image)
}

/// Random flip, rotation, mild shear/scale and low-amplitude noise. Redraws
/// up to 8 times if the mask vanishes.
pub fn transform_flaw<R: Rng>(f: &FlawInstance, cfg: &AugmentConfig, rng: &mut R) -> Result<FlawInstance> {
    let mut last = None;
    for _ in 0..TRANSFORM_RETRIES {
        let params = FlawTransform::sample(cfg, rng);
        match transform_flaw_with(f, &params, rng) {
            Ok(out) => return Ok(out),
            Err(e @ Error::DegenerateData(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::DegenerateData("flaw transform failed".into())))
}

/// Place `f` inside the patch weld, away from existing flaws, blending
/// multiplicatively against the flaw's background level.
pub fn embed_flaw<R: Rng>(p: &Patch, f: &FlawInstance, rng: &mut R) -> Result<Patch> {
    let size = p.size();
    let (fw, fh) = (f.snippet.width(), f.snippet.height());
    if p.weld.is_empty() || fw > size || fh > size {
        return Err(Error::Placement(0));
    }
    let flaw_px: Vec<(usize, usize)> = f.snippet_mask.iter_set().collect();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let ox = rng.random_range(0..=size - fw);
        let oy = rng.random_range(0..=size - fh);
        let fits = flaw_px
            .iter()
            .all(|&(x, y)| p.weld.get(ox + x, oy + y) && !p.mask.get(ox + x, oy + y));
        if !fits {
            continue;
        }
        let mut out = p.clone();
        for &(x, y) in &flaw_px {
            let (px, py) = (ox + x, oy + y);
            let ratio = f.snippet.get(x, y) / f.background_level;
            out.image.set(px, py, p.image.get(px, py) * ratio);
            out.mask.set(px, py, true);
        }
        out.provenance = Provenance::VirtualAug;
        return Ok(out);
    }
    Err(Error::Placement(PLACEMENT_ATTEMPTS))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Standard,
    PureVirtual,
    Combined,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Standard, Strategy::PureVirtual, Strategy::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::PureVirtual => "pure_virtual",
            Strategy::Combined => "combined",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Strategy::Standard),
            "pure_virtual" => Ok(Strategy::PureVirtual),
            "combined" => Ok(Strategy::Combined),
            _ => Err(Error::Argument(format!("unknown strategy '{s}'"))),
        }
    }
}

/// Dataset-subset fractions studied in the experiments.
pub const FRACTION_GRID: [f64; 7] = [1.0, 0.75, 0.5, 0.25, 0.10, 0.05, 0.015];

/// First `ceil(fraction·N)` of a seeded shuffle, so subsets nest across fractions.
pub fn subset_images(image_ids: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut ids = image_ids.to_vec();
    ids.shuffle(&mut child_rng(labeled_seed(seed, "subset"), 0));
    let keep = ((fraction * ids.len() as f64).ceil() as usize).clamp(1.min(ids.len()), ids.len());
    ids.truncate(keep);
    Ok(ids)
}

/// What to build and from which images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRequest<'a> {
    pub image_ids: &'a [usize],
    pub fold_id: usize,
    pub strategy: Strategy,
    pub fraction: f64,
    pub patches_per_image: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub patches: Vec<Patch>,
    pub images: Vec<usize>,
    pub bank: Option<FlawBank>,
}

fn virtual_patch<R: Rng>(
    dataset: &Dataset,
    images: &[usize],
    bank: &FlawBank,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Patch> {
    // Prefer flaw-free crops; fall back to the cleanest one seen.
    let mut best: Option<Patch> = None;
    for _ in 0..64 {
        let id = images[rng.random_range(0..images.len())];
        let s = &dataset.samples[id];
        let one = AugmentConfig {
            min_weld_fraction: 1.0,
            ..cfg.clone()
        };
        let p = sample_patches_from(&s.image, &s.ground_truth, &s.weld, id, 1, &one, rng)?
            .pop()
            .expect("one patch");
        if p.weld.is_empty() {
            continue;
        }
        let clean = p.mask.is_empty();
        if best.as_ref().is_none_or(|b| p.mask.count() < b.mask.count()) {
            best = Some(p);
        }
        if clean {
            break;
        }
    }
    let mut patch = best.ok_or_else(|| Error::Argument("no weld found for virtual patches".into()))?;
    let (lo, hi) = cfg.flaws_per_patch;
    let want = rng.random_range(lo..=hi);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < want && attempts < want * 4 {
        attempts += 1;
        let src = &bank.instances[rng.random_range(0..bank.len())];
        let flaw = match transform_flaw(src, cfg, rng) {
            Ok(f) => f,
            Err(Error::DegenerateData(_)) => continue,
            Err(e) => return Err(e),
        };
        match embed_flaw(&patch, &flaw, rng) {
            Ok(p) => {
                patch = p;
                placed += 1;
            }
            Err(Error::Placement(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    patch.provenance = Provenance::VirtualAug;
    Ok(patch)
}

/// Build the augmented patch list for one strategy and data fraction.
///
/// The flaw bank is extracted only from the selected training images and is
/// checked against them before any embedding.
pub fn build_training_set(
    dataset: &Dataset,
    req: &TrainingRequest<'_>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<TrainingSet> {
    cfg.validate()?;
    if req.image_ids.is_empty() {
        return Err(Error::Argument("no training images".into()));
    }
    if let Some(&bad) = req.image_ids.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::Argument(format!("image index {bad} out of range")));
    }
    let images = subset_images(req.image_ids, req.fraction, seed)?;
    let total = images.len() * req.patches_per_image;
    let n_virtual = match req.strategy {
        Strategy::Standard => 0,
        Strategy::PureVirtual => total,
        Strategy::Combined => total / 2,
    };
    let n_standard = total - n_virtual;

    let bank = if n_virtual > 0 || req.strategy != Strategy::Standard {
        let bank = extract_flaws(dataset, &images, req.fold_id)?;
        if bank.is_empty() {
            return Err(Error::Argument(
                "flaw bank is empty; virtual augmentation needs annotated flaws".into(),
            ));
        }
        bank.check_leakage(req.fold_id, req.image_ids)?;
        Some(bank)
    } else {
        None
    };

    let mut patches = Vec::with_capacity(total);
    if n_standard > 0 {
        // Spread the standard share over the images, one seed per image.
        let per = n_standard / images.len();
        let extra = n_standard % images.len();
        for (k, &id) in images.iter().enumerate() {
            let n = per + usize::from(k < extra);
            let s = &dataset.samples[id];
            let mut rng = child_rng(labeled_seed(seed, "standard"), id as u64);
            for p in sample_patches_from(&s.image, &s.ground_truth, &s.weld, id, n, cfg, &mut rng)? {
                patches.push(standard_augment(&p, cfg, &mut rng)?);
            }
        }
    }
    if let Some(bank) = &bank {
        let base = labeled_seed(seed, "virtual");
        for k in 0..n_virtual {
            let mut rng = child_rng(base, k as u64);
            patches.push(virtual_patch(dataset, &images, bank, cfg, &mut rng)?);
        }
    }
    if req.strategy == Strategy::Combined {
        patches.shuffle(&mut child_rng(labeled_seed(seed, "mix"), 0));
    }
    Ok(TrainingSet {
        patches,
        images,
        bank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub weld: String,
    pub provenance: Provenance,
    pub source: usize,
    pub origin: (usize, usize),
    pub geometry: [[f64; 3]; 2],
}

/// Write patches as PGM triples plus `patches.json`.
pub fn write_patches(patches: &[Patch], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(patches.len());
    for (index, p) in patches.iter().enumerate() {
        let image = format!("patch_{index:05}.pgm");
        let mask = format!("patch_{index:05}_mask.pgm");
        let weld = format!("patch_{index:05}_weld.pgm");
        let pitch = p.image.pixel_pitch();
        save_pgm16(&p.image, &dir.join(&image))?;
        save_mask(&p.mask, pitch, &dir.join(&mask))?;
        save_mask(&p.weld, pitch, &dir.join(&weld))?;
        entries.push(PatchEntry {
            index,
            image,
            mask,
            weld,
            provenance: p.provenance,
            source: p.source,
            origin: p.origin,
            geometry: p.geometry.matrix(),
        });
    }
    let path = dir.join("patches.json");
    let text = serde_json::to_string_pretty(&entries).expect("entries serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Seed for patch batch `k` of a run, for callers that build batches lazily.
pub fn batch_seed(seed: u64, k: u64) -> u64 {
    child_seed(labeled_seed(seed, "batch"), k)
}
