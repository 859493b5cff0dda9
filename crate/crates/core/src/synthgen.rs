//! Synthetic weld radiographs standing in for real computed-radiography data.
//!
//! A scene is a horizontal, slightly curved weld band (a brighter plateau with
//! smooth shoulders) over a graded background. Defects attenuate the image
//! multiplicatively: pores are Gaussian-profile disks, cracks are thin
//! Gaussian-profile polylines. A pixel belongs to a defect's ground truth when
//! the defect's attenuation exceeds half its peak, so the footprint diameter
//! (pores) or length (cracks) equals the nominal size.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imagecore::{
    load_mask, load_pgm16, save_mask, save_pgm16, BinaryMask, GrayImage, MaskKind,
};
use crate::rng::{child_rng, child_seed, rng_from_seed, sample_log_uniform, Span};
use crate::{Error, Result};

/// FWHM = 2·sqrt(2·ln 2)·σ.
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Crack,
    Pore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    /// Crack length or pore diameter, mm.
    pub size_mm: f64,
    pub position_mm: (f64, f64),
    /// Crack direction in degrees; ignored for pores.
    pub orientation_deg: f64,
    /// Peak fractional attenuation, in `(0, 0.5]`.
    pub contrast: f64,
    /// Crack line thickness (half-peak width) in pixels.
    pub thickness_px: f64,
    /// Bend at the crack midpoint, degrees.
    pub kink_deg: f64,
}

impl DefectSpec {
    pub fn pore(size_mm: f64, position_mm: (f64, f64), contrast: f64) -> Self {
        Self {
            kind: DefectKind::Pore,
            size_mm,
            position_mm,
            orientation_deg: 0.0,
            contrast,
            thickness_px: 0.0,
            kink_deg: 0.0,
        }
    }

    pub fn crack(size_mm: f64, position_mm: (f64, f64), orientation_deg: f64, contrast: f64) -> Self {
        Self {
            kind: DefectKind::Crack,
            size_mm,
            position_mm,
            orientation_deg,
            contrast,
            thickness_px: 2.0,
            kink_deg: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.size_mm > 0.0) {
            return Err(Error::Argument(format!("defect size must be > 0, got {}", self.size_mm)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 0.5) {
            return Err(Error::Argument(format!(
                "defect contrast must be in (0, 0.5], got {}",
                self.contrast
            )));
        }
        if self.kind == DefectKind::Crack && !(self.thickness_px > 0.0) {
            return Err(Error::Argument("crack thickness must be > 0".into()));
        }
        Ok(())
    }
}

/// Weld band geometry, all in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeldBand {
    pub center_y_mm: f64,
    pub width_mm: f64,
    /// Sagitta of the centre line over the image width.
    pub curvature_mm: f64,
    /// Logistic scale of the band shoulders.
    pub shoulder_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch: f64,
    pub weld: WeldBand,
    pub base_intensity: f64,
    /// Left-to-right intensity change across the image.
    pub gradient: f64,
    /// Plateau brightening of the weld band.
    pub weld_contrast: f64,
    pub noise_sigma: f64,
    pub defects: Vec<DefectSpec>,
    pub rng_seed: u64,
}

/// Rendered scene plus the half-peak footprint of each defect.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub image: GrayImage,
    pub ground_truth: BinaryMask,
    pub weld: BinaryMask,
    pub footprints: Vec<Vec<(usize, usize)>>,
}

struct Geometry {
    width: usize,
    height: usize,
    center_y: f64,
    half_width: f64,
    sagitta: f64,
    shoulder: f64,
}

impl Geometry {
    fn new(spec: &SceneSpec) -> Self {
        let p = spec.pixel_pitch;
        Self {
            width: spec.width,
            height: spec.height,
            center_y: spec.weld.center_y_mm / p,
            half_width: spec.weld.width_mm / p / 2.0,
            sagitta: spec.weld.curvature_mm / p,
            shoulder: (spec.weld.shoulder_mm / p).max(1e-6),
        }
    }

    /// Centre line of the band at column `x` (pixels).
    fn center_at(&self, x: f64) -> f64 {
        let half = self.width as f64 / 2.0;
        let u = (x - half) / half;
        self.center_y + self.sagitta * (1.0 - u * u)
    }

    fn in_weld(&self, x: usize, y: usize) -> bool {
        (y as f64 - self.center_at(x as f64)).abs() <= self.half_width
    }
}

struct DefectShape {
    kind: DefectKind,
    /// Polyline vertices in pixels (single vertex for pores).
    vertices: Vec<(f64, f64)>,
    sigma: f64,
    reach: f64,
    contrast: f64,
}

impl DefectShape {
    fn new(spec: &DefectSpec, pitch: f64) -> Self {
        let (cx, cy) = (spec.position_mm.0 / pitch, spec.position_mm.1 / pitch);
        match spec.kind {
            DefectKind::Pore => {
                let d = spec.size_mm / pitch;
                let sigma = d / FWHM_PER_SIGMA;
                Self {
                    kind: spec.kind,
                    vertices: vec![(cx, cy)],
                    sigma,
                    reach: d / 2.0 + 4.0 * sigma + 1.0,
                    contrast: spec.contrast,
                }
            }
            DefectKind::Crack => {
                let len = spec.size_mm / pitch;
                let sigma = spec.thickness_px / FWHM_PER_SIGMA;
                // The half-peak capsule adds thickness/2 at both ends.
                let span = (len - spec.thickness_px).max(0.0);
                let a = spec.orientation_deg.to_radians();
                let (ux, uy) = (a.cos(), a.sin());
                let bend = (span / 2.0) * (spec.kink_deg.to_radians() / 2.0).tan() / 2.0;
                let mid = (cx - uy * bend, cy + ux * bend);
                let half = span / 2.0;
                Self {
                    kind: spec.kind,
                    vertices: vec![
                        (cx - ux * half, cy - uy * half),
                        mid,
                        (cx + ux * half, cy + uy * half),
                    ],
                    sigma,
                    reach: half + 4.0 * sigma + 2.0,
                    contrast: spec.contrast,
                }
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match self.kind {
            DefectKind::Pore => self.vertices[0],
            DefectKind::Crack => {
                let (a, b) = (self.vertices[0], self.vertices[2]);
                ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0)
            }
        }
    }

    fn distance(&self, x: f64, y: f64) -> f64 {
        if self.vertices.len() == 1 {
            let (cx, cy) = self.vertices[0];
            return ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        }
        self.vertices
            .windows(2)
            .map(|s| segment_distance((x, y), s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Normalized attenuation profile in `[0, 1]`.
    fn profile(&self, x: f64, y: f64) -> f64 {
        let d = self.distance(x, y);
        (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn bbox(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let (cx, cy) = self.center();
        let r = self.reach;
        let x0 = (cx - r).floor().max(0.0) as usize;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let y1 = ((cy + r).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        (x0, y0, x1, y1)
    }

    /// Pixels where the profile exceeds one half; falls back to the pixel
    /// nearest the centre when the footprint is sub-pixel.
    fn footprint(&self, w: usize, h: usize) -> Vec<(usize, usize)> {
        let (x0, y0, x1, y1) = self.bbox(w, h);
        let mut px = Vec::new();
        if x0 > x1 || y0 > y1 {
            return px;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.profile(x as f64, y as f64) > 0.5 {
                    px.push((x, y));
                }
            }
        }
        if px.is_empty() {
            let (cx, cy) = self.center();
            let (nx, ny) = (cx.round(), cy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                px.push((nx as usize, ny as usize));
            }
        }
        px
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn validate_scene(spec: &SceneSpec) -> Result<()> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Argument("scene dimensions must be positive".into()));
    }
    if !(spec.pixel_pitch > 0.0) {
        return Err(Error::Argument("pixel pitch must be > 0".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Argument("noise sigma must be >= 0".into()));
    }
    if !(spec.weld.width_mm > 0.0) {
        return Err(Error::Argument("weld width must be > 0".into()));
    }
    let g = Geometry::new(spec);
    let h = spec.height as f64;
    for x in [0.0, spec.width as f64 / 2.0, spec.width as f64 - 1.0] {
        let c = g.center_at(x);
        if c - g.half_width < 0.0 || c + g.half_width > h - 1.0 {
            return Err(Error::Argument("weld band does not fit inside the image".into()));
        }
    }
    spec.defects.iter().try_for_each(DefectSpec::validate)
}

/// Render a scene. Deterministic in `spec` (noise uses `spec.rng_seed`).
pub fn render_scene(spec: &SceneSpec) -> Result<(GrayImage, BinaryMask, BinaryMask)> {
    let r = render_scene_detailed(spec)?;
    Ok((r.image, r.ground_truth, r.weld))
}

pub fn render_scene_detailed(spec: &SceneSpec) -> Result<RenderedScene> {
    validate_scene(spec)?;
    let g = Geometry::new(spec);
    let (w, h) = (spec.width, spec.height);

    let mut weld = BinaryMask::new(w, h, MaskKind::WeldRegion);
    let mut pixels = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let d = (y as f64 - g.center_at(x as f64)).abs();
            let plateau = 1.0 / (1.0 + ((d - g.half_width) / g.shoulder).exp());
            let ramp = spec.gradient * (x as f64 / w as f64 - 0.5);
            pixels[y * w + x] = spec.base_intensity + ramp + spec.weld_contrast * plateau;
            if d <= g.half_width {
                weld.set(x, y, true);
            }
        }
    }

    let mut ground_truth = BinaryMask::new(w, h, MaskKind::GroundTruth);
    let mut footprints = Vec::with_capacity(spec.defects.len());
    for (k, defect) in spec.defects.iter().enumerate() {
        let shape = DefectShape::new(defect, spec.pixel_pitch);
        let fp = shape.footprint(w, h);
        if fp.is_empty() || fp.iter().any(|&(x, y)| !g.in_weld(x, y)) {
            return Err(Error::Argument(format!(
                "defect {k} at ({:.2}, {:.2}) mm lies outside the weld band",
                defect.position_mm.0, defect.position_mm.1
            )));
        }
        let (x0, y0, x1, y1) = shape.bbox(w, h);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let a = shape.contrast * shape.profile(x as f64, y as f64);
                pixels[y * w + x] *= 1.0 - a;
            }
        }
        for &(x, y) in &fp {
            ground_truth.set(x, y, true);
        }
        footprints.push(fp);
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Argument(format!("noise sigma: {e}")))?;
        let mut rng = rng_from_seed(spec.rng_seed);
        for v in &mut pixels {
            *v += normal.sample(&mut rng);
        }
    }
    let image = GrayImage::from_unclamped(w, h, pixels, spec.pixel_pitch)?;
    Ok(RenderedScene {
        image,
        ground_truth,
        weld,
        footprints,
    })
}

/// One annotated flaw: its generating spec and half-peak footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct FlawRecord {
    pub spec: DefectSpec,
    pub pixels: Vec<(usize, usize)>,
}

impl FlawRecord {
    /// Annotated size: max Feret diameter of the footprint.
    pub fn measured_size_mm(&self, pixel_pitch: f64) -> f64 {
        crate::postproc::feret_size_mm(&self.pixels, pixel_pitch)
    }

    pub fn centroid_mm(&self, pixel_pitch: f64) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        (sx / n * pixel_pitch, sy / n * pixel_pitch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: GrayImage,
    pub ground_truth: BinaryMask,
    pub weld: BinaryMask,
    pub flaws: Vec<FlawRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.samples.first().map_or(1.0, |s| s.image.pixel_pitch())
    }

    pub fn flaw_count(&self) -> usize {
        self.samples.iter().map(|s| s.flaws.len()).sum()
    }
}

/// Distributions for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch: f64,
    pub weld_width_mm: Span,
    pub curvature_mm: Span,
    pub shoulder_mm: f64,
    pub base_intensity: Span,
    pub gradient: Span,
    pub weld_contrast: Span,
    pub noise_sigma: f64,
    /// Inclusive range of defects per image.
    pub defects_per_image: (usize, usize),
    pub pore_fraction: f64,
    /// Flaw sizes are log-uniform over this range, mm.
    pub size_range_mm: Span,
    pub contrast: Span,
    pub crack_thickness_px: Span,
    pub crack_kink_deg: Span,
    /// Minimum gap between defect bounding circles, pixels.
    pub min_separation_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            pixel_pitch: 0.1,
            weld_width_mm: Span::new(8.0, 12.0),
            curvature_mm: Span::new(-1.0, 1.0),
            shoulder_mm: 0.6,
            base_intensity: Span::new(0.35, 0.5),
            gradient: Span::new(-0.1, 0.1),
            weld_contrast: Span::new(0.15, 0.25),
            noise_sigma: 0.01,
            defects_per_image: (2, 6),
            pore_fraction: 0.6,
            size_range_mm: Span::new(0.4, 3.0),
            contrast: Span::new(0.15, 0.35),
            crack_thickness_px: Span::new(1.5, 3.0),
            crack_kink_deg: Span::new(-15.0, 15.0),
            min_separation_px: 6.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.size_range_mm;
        if !(r.min > 0.0) || !r.is_valid() {
            return Err(Error::Argument(format!(
                "flaw size range [{}, {}] mm is empty",
                r.min, r.max
            )));
        }
        if self.defects_per_image.0 > self.defects_per_image.1 {
            return Err(Error::Argument("defects_per_image range is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.pore_fraction) {
            return Err(Error::Argument("pore_fraction must be in [0, 1]".into()));
        }
        for (name, s) in [
            ("weld_width_mm", self.weld_width_mm),
            ("curvature_mm", self.curvature_mm),
            ("base_intensity", self.base_intensity),
            ("gradient", self.gradient),
            ("weld_contrast", self.weld_contrast),
            ("contrast", self.contrast),
            ("crack_thickness_px", self.crack_thickness_px),
            ("crack_kink_deg", self.crack_kink_deg),
        ] {
            if !s.is_valid() {
                return Err(Error::Argument(format!("{name} range is empty")));
            }
        }
        if !(self.contrast.min > 0.0 && self.contrast.max <= 0.5) {
            return Err(Error::Argument("contrast must lie in (0, 0.5]".into()));
        }
        Ok(())
    }
}

fn draw_defect<R: Rng>(
    cfg: &SynthConfig,
    rng: &mut R,
    g: &Geometry,
    placed: &[(f64, f64, f64)],
) -> Option<(DefectSpec, (f64, f64, f64))> {
    let pitch = cfg.pixel_pitch;
    let kind = if rng.random::<f64>() < cfg.pore_fraction {
        DefectKind::Pore
    } else {
        DefectKind::Crack
    };
    let size_mm = sample_log_uniform(rng, cfg.size_range_mm.min, cfg.size_range_mm.max);
    let contrast = cfg.contrast.sample(rng);
    let thickness_px = cfg.crack_thickness_px.sample(rng);
    let kink_deg = cfg.crack_kink_deg.sample(rng);
    let size_px = size_mm / pitch;
    for _ in 0..50 {
        let orientation_deg = if kind == DefectKind::Crack {
            rng.random::<f64>() * 180.0
        } else {
            0.0
        };
        let (half_x, half_y) = match kind {
            DefectKind::Pore => (size_px / 2.0, size_px / 2.0),
            DefectKind::Crack => {
                let a = orientation_deg.to_radians();
                (
                    size_px / 2.0 * a.cos().abs() + thickness_px,
                    size_px / 2.0 * a.sin().abs() + thickness_px,
                )
            }
        };
        let room = g.half_width - half_y - 2.0 - g.sagitta.abs() * 0.0;
        if room <= 0.0 {
            continue;
        }
        let lo = half_x + 2.0;
        let hi = g.width as f64 - 1.0 - half_x - 2.0;
        if lo >= hi {
            continue;
        }
        let x = lo + (hi - lo) * rng.random::<f64>();
        let y = g.center_at(x) + (2.0 * rng.random::<f64>() - 1.0) * room;
        let radius = half_x.max(half_y);
        let clear = placed.iter().all(|&(px, py, pr)| {
            ((x - px).powi(2) + (y - py).powi(2)).sqrt() >= radius + pr + cfg.min_separation_px
        });
        if !clear {
            continue;
        }
        let spec = DefectSpec {
            kind,
            size_mm,
            position_mm: (x * pitch, y * pitch),
            orientation_deg,
            contrast,
            thickness_px,
            kink_deg: if kind == DefectKind::Crack { kink_deg } else { 0.0 },
        };
        let shape = DefectShape::new(&spec, pitch);
        let fp = shape.footprint(g.width, g.height);
        if fp.is_empty() || fp.iter().any(|&(fx, fy)| !g.in_weld(fx, fy)) {
            continue;
        }
        return Some((spec, (x, y, radius)));
    }
    None
}

/// Scene spec for image `index` drawn from the configured distributions.
pub fn sample_scene(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SceneSpec> {
    cfg.validate()?;
    let image_seed = child_seed(seed, index as u64);
    let mut rng = rng_from_seed(image_seed);
    let pitch = cfg.pixel_pitch;
    let height_mm = cfg.height as f64 * pitch;
    let width_mm = cfg.weld_width_mm.sample(&mut rng);
    let curvature_mm = cfg.curvature_mm.sample(&mut rng);
    let margin = width_mm / 2.0 + curvature_mm.abs() + 2.0 * pitch;
    if 2.0 * margin >= height_mm {
        return Err(Error::Argument("weld band wider than the image".into()));
    }
    // Centre so the curved band stays inside the frame.
    let lo = margin - curvature_mm.min(0.0);
    let hi = height_mm - margin - curvature_mm.max(0.0);
    let center_y_mm = if lo < hi {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        height_mm / 2.0 - curvature_mm / 2.0
    };
    let mut spec = SceneSpec {
        width: cfg.width,
        height: cfg.height,
        pixel_pitch: pitch,
        weld: WeldBand {
            center_y_mm,
            width_mm,
            curvature_mm,
            shoulder_mm: cfg.shoulder_mm,
        },
        base_intensity: cfg.base_intensity.sample(&mut rng),
        gradient: cfg.gradient.sample(&mut rng),
        weld_contrast: cfg.weld_contrast.sample(&mut rng),
        noise_sigma: cfg.noise_sigma,
        defects: Vec::new(),
        rng_seed: child_seed(image_seed, u64::MAX),
    };
    let g = Geometry::new(&spec);
    let (nmin, nmax) = cfg.defects_per_image;
    let count = rng.random_range(nmin..=nmax);
    let mut placed = Vec::new();
    for _ in 0..count {
        if let Some((d, circle)) = draw_defect(cfg, &mut rng, &g, &placed) {
            spec.defects.push(d);
            placed.push(circle);
        }
    }
    Ok(spec)
}

/// Generate `n_images` independent scenes; image `i` uses `child_seed(seed, i)`.
pub fn generate_dataset(cfg: &SynthConfig, n_images: usize, seed: u64) -> Result<Dataset> {
    if n_images == 0 {
        return Err(Error::Argument("n_images must be >= 1".into()));
    }
    cfg.validate()?;
    let samples = (0..n_images)
        .map(|i| {
            let spec = sample_scene(cfg, seed, i)?;
            let r = render_scene_detailed(&spec)?;
            let flaws = spec
                .defects
                .into_iter()
                .zip(r.footprints)
                .map(|(spec, pixels)| FlawRecord { spec, pixels })
                .collect();
            Ok(Sample {
                id: i,
                image: r.image,
                ground_truth: r.ground_truth,
                weld: r.weld,
                flaws,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

/// Draw `n` flaw sizes with the dataset sampler (exposed for distribution checks).
pub fn sample_flaw_sizes(range: Span, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(range.min > 0.0) || !range.is_valid() {
        return Err(Error::Argument("flaw size range is empty".into()));
    }
    let mut rng = child_rng(seed, 0);
    Ok((0..n)
        .map(|_| sample_log_uniform(&mut rng, range.min, range.max))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlawEntry {
    pub kind: DefectKind,
    pub size_mm: f64,
    pub centroid_mm: (f64, f64),
    pub spec: DefectSpec,
    pub pixels: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: usize,
    pub image: String,
    pub ground_truth: String,
    pub weld: String,
    pub flaws: Vec<FlawEntry>,
}

/// On-disk dataset index; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pixel_pitch_mm: f64,
    pub images: Vec<ImageEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Write images, masks and `manifest.json` into `dir` (created if missing).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pitch = dataset.pixel_pitch();
    let mut images = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let image = format!("image_{:04}.pgm", s.id);
        let ground_truth = format!("gt_{:04}.pgm", s.id);
        let weld = format!("weld_{:04}.pgm", s.id);
        save_pgm16(&s.image, &dir.join(&image))?;
        save_mask(&s.ground_truth, pitch, &dir.join(&ground_truth))?;
        save_mask(&s.weld, pitch, &dir.join(&weld))?;
        images.push(ImageEntry {
            id: s.id,
            image,
            ground_truth,
            weld,
            flaws: s
                .flaws
                .iter()
                .map(|f| FlawEntry {
                    kind: f.spec.kind,
                    size_mm: f.spec.size_mm,
                    centroid_mm: f.centroid_mm(pitch),
                    spec: f.spec.clone(),
                    pixels: f.pixels.clone(),
                })
                .collect(),
        });
    }
    let manifest = DatasetManifest {
        pixel_pitch_mm: pitch,
        images,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a dataset from a directory holding `manifest.json`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let samples = manifest
        .images
        .into_iter()
        .map(|entry| {
            let image = load_pgm16(&dir.join(&entry.image))?;
            let ground_truth = load_mask(&dir.join(&entry.ground_truth))?.with_kind(MaskKind::GroundTruth);
            let weld = load_mask(&dir.join(&entry.weld))?.with_kind(MaskKind::WeldRegion);
            Ok(Sample {
                id: entry.id,
                image,
                ground_truth,
                weld,
                flaws: entry
                    .flaws
                    .into_iter()
                    .map(|f| FlawRecord {
                        spec: f.spec,
                        pixels: f.pixels,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}
