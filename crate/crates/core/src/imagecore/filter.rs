use super::{reflect101, reflect_symmetric, GrayImage};
use crate::{Error, Result};

pub const DEFAULT_UNSHARP_SIGMA: f64 = 2.0;
pub const DEFAULT_UNSHARP_AMOUNT: f64 = 1.0;

/// Normalized 1-D Gaussian taps over `[-r, r]`, `r = ceil(3σ)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur.
///
/// Borders are extended by half-sample mirror reflection, which keeps the
/// blur operator symmetric and therefore preserves the image mean.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("blur sigma must be > 0, got {sigma}")));
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let src = img.pixels();

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xi = reflect_symmetric(x as isize + k as isize - radius, w);
                acc += t * row[xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let yi = reflect_symmetric(y as isize + k as isize - radius, h);
            let src_row = &tmp[yi * w..(yi + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += t * s;
            }
        }
    }
    GrayImage::from_unclamped(w, h, out, img.pixel_pitch())
}

/// `clamp(img + amount·(img − blur(img, σ)), 0, 1)`.
pub fn unsharp_mask(img: &GrayImage, sigma: f64, amount: f64) -> Result<GrayImage> {
    if !(amount >= 0.0 && amount.is_finite()) {
        return Err(Error::Argument(format!("unsharp amount must be >= 0, got {amount}")));
    }
    let blurred = gaussian_blur(img, sigma)?;
    if amount == 0.0 {
        return Ok(img.clone());
    }
    let out = img
        .pixels()
        .iter()
        .zip(blurred.pixels())
        .map(|(&v, &b)| v + amount * (v - b))
        .collect();
    GrayImage::from_unclamped(img.width(), img.height(), out, img.pixel_pitch())
}

/// Two-plane network input: the raw radiograph and its unsharp-masked copy.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStack {
    pub original: GrayImage,
    pub sharpened: GrayImage,
}

impl InputStack {
    pub fn width(&self) -> usize {
        self.original.width()
    }

    pub fn height(&self) -> usize {
        self.original.height()
    }

    pub fn downsample2(&self) -> Result<InputStack> {
        Ok(InputStack {
            original: downsample2(&self.original)?,
            sharpened: downsample2(&self.sharpened)?,
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<InputStack> {
        Ok(InputStack {
            original: self.original.crop(x0, y0, width, height)?,
            sharpened: self.sharpened.crop(x0, y0, width, height)?,
        })
    }

    /// Channel-major `[2, H, W]` buffer.
    pub fn to_planar<T: num_traits::Float>(&self) -> Vec<T> {
        self.original
            .pixels()
            .iter()
            .chain(self.sharpened.pixels())
            .map(|&v| T::from(v).unwrap())
            .collect()
    }
}

pub fn make_input_stack(img: &GrayImage, sigma: f64, amount: f64) -> Result<InputStack> {
    Ok(InputStack {
        original: img.clone(),
        sharpened: unsharp_mask(img, sigma, amount)?,
    })
}

/// 2×2 mean pooling; pixel pitch doubles.
pub fn downsample2(img: &GrayImage) -> Result<GrayImage> {
    let (w, h) = (img.width(), img.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Argument(format!(
            "downsample2 needs even dimensions, got {w}x{h}"
        )));
    }
    let (ow, oh) = (w / 2, h / 2);
    let src = img.pixels();
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let r0 = 2 * y * w;
        let r1 = r0 + w;
        for x in 0..ow {
            let s = src[r0 + 2 * x] + src[r0 + 2 * x + 1] + src[r1 + 2 * x] + src[r1 + 2 * x + 1];
            out.push(s * 0.25);
        }
    }
    GrayImage::from_unclamped(ow, oh, out, img.pixel_pitch() * 2.0)
}

/// Mirror-extend by `margin` on every side (edge pixel not duplicated).
pub fn mirror_pad(img: &GrayImage, margin: usize) -> Result<GrayImage> {
    if margin >= img.width().min(img.height()) {
        return Err(Error::Argument(format!(
            "mirror margin {margin} must be smaller than {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(pad_reflect(img, margin, margin, margin, margin))
}

/// Mirror extension with independent margins; margins may exceed the image
/// extent, in which case the reflection repeats periodically.
pub fn pad_reflect(img: &GrayImage, left: usize, top: usize, right: usize, bottom: usize) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (ow, oh) = (w + left + right, h + top + bottom);
    let src = img.pixels();
    let cols: Vec<usize> = (0..ow)
        .map(|x| reflect101(x as isize - left as isize, w))
        .collect();
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let sy = reflect101(y as isize - top as isize, h);
        let row = &src[sy * w..(sy + 1) * w];
        out.extend(cols.iter().map(|&sx| row[sx]));
    }
    GrayImage::from_pixels(ow, oh, out, img.pixel_pitch()).expect("reflected values stay in range")
}
