//! Raster types, filtering, resampling and file I/O for radiographs and masks.

mod affine;
mod filter;
mod pgm;

pub use affine::{apply_affine, AffineTransform, Border, Raster, Warp};
pub use filter::{
    downsample2, gaussian_blur, make_input_stack, mirror_pad, pad_reflect, unsharp_mask,
    InputStack, DEFAULT_UNSHARP_AMOUNT, DEFAULT_UNSHARP_SIGMA,
};
pub use pgm::{
    decode_pgm, encode_pgm16, encode_pgm_mask, load_mask, load_pgm16, save_mask, save_pgm16,
    sidecar_path, Sidecar,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Calibrated grayscale radiograph, intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    /// Millimetres per pixel, isotropic.
    pixel_pitch: f64,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixel_pitch: f64) -> Result<Self> {
        Self::filled(width, height, 0.0, pixel_pitch)
    }

    pub fn filled(width: usize, height: usize, value: f64, pixel_pitch: f64) -> Result<Self> {
        Self::from_pixels(width, height, vec![value; width * height], pixel_pitch)
    }

    pub fn from_pixels(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        pixel_pitch: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Argument(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                width * height
            )));
        }
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::Argument(format!(
                "pixel pitch must be positive, got {pixel_pitch}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            pixel_pitch,
        })
    }

    /// Build from values that may fall outside `[0, 1]`; they are clamped.
    pub fn from_unclamped(
        width: usize,
        height: usize,
        mut pixels: Vec<f64>,
        pixel_pitch: f64,
    ) -> Result<Self> {
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_pixels(width, height, pixels, pixel_pitch)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Write one pixel, clamping to `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.pixels[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    pub fn with_pitch(mut self, pixel_pitch: f64) -> Result<Self> {
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::Argument(format!(
                "pixel pitch must be positive, got {pixel_pitch}"
            )));
        }
        self.pixel_pitch = pixel_pitch;
        Ok(self)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Apply `f` to every pixel; results are clamped to `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        check_crop(self.width, self.height, x0, y0, width, height)?;
        let mut pixels = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + x0..row + x0 + width]);
        }
        Ok(Self {
            width,
            height,
            pixels,
            pixel_pitch: self.pixel_pitch,
        })
    }
}

/// What a mask annotates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    GroundTruth,
    WeldRegion,
    Prediction,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::GroundTruth => "ground_truth",
            MaskKind::WeldRegion => "weld_region",
            MaskKind::Prediction => "prediction",
        }
    }
}

/// Pixel mask aligned to a [`GrayImage`]; `true` marks defect (or weld) pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    kind: MaskKind,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, kind: MaskKind) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            kind,
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>, kind: MaskKind) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Argument(format!(
                "mask buffer has {} values, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
            kind,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: MaskKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Coordinates `(x, y)` of set pixels in raster order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn same_frame(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn or_assign(&mut self, other: &BinaryMask) -> Result<()> {
        if !self.same_frame(other) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        check_crop(self.width, self.height, x0, y0, width, height)?;
        let mut bits = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let row = y * self.width;
            bits.extend_from_slice(&self.bits[row + x0..row + x0 + width]);
        }
        Ok(Self {
            width,
            height,
            bits,
            kind: self.kind,
        })
    }

    /// Dilation with a `(2r+1)×(2r+1)` square structuring element.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        // Separable: horizontal pass then vertical pass.
        let mut tmp = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if self.bits[y * w + x] {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(w - 1);
                    tmp[y * w + lo..=y * w + hi].iter_mut().for_each(|b| *b = true);
                }
            }
        }
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if tmp[y * w + x] {
                    let lo = y.saturating_sub(radius);
                    let hi = (y + radius).min(h - 1);
                    for yy in lo..=hi {
                        out[yy * w + x] = true;
                    }
                }
            }
        }
        Self {
            width: w,
            height: h,
            bits: out,
            kind: self.kind,
        }
    }
}

fn check_crop(w: usize, h: usize, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<()> {
    if cw == 0 || ch == 0 || x0 + cw > w || y0 + ch > h {
        return Err(Error::Argument(format!(
            "crop {cw}x{ch} at ({x0},{y0}) exceeds {w}x{h}"
        )));
    }
    Ok(())
}

/// Whole-sample mirror index (edge pixel not duplicated): `-1 → 1`, `n → n-2`.
#[inline]
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Half-sample mirror index (edge pixel duplicated): `-1 → 0`, `n → n-1`.
#[inline]
pub(crate) fn reflect_symmetric(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = i.rem_euclid(period);
    if r >= n as isize {
        (period - 1 - r) as usize
    } else {
        r as usize
    }
}
