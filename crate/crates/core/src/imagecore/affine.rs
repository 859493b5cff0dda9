use super::{reflect101, BinaryMask, GrayImage};
use crate::{Error, Result};

/// 2×3 affine map from source to destination pixel coordinates:
/// `dst = L·src + t`. Pixel centres sit on integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 3]; 2],
}

const SNAP: f64 = 1e-9;

fn snap_unit(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < 1e-12 {
            return target;
        }
    }
    v
}

impl AffineTransform {
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = Self { m };
        if !m.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Argument("affine matrix has non-finite entries".into()));
        }
        if t.determinant().abs() < 1e-12 {
            return Err(Error::Argument("affine transform is singular".into()));
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.m
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Mirror left-right within an image of the given width.
    pub fn flip_horizontal(width: usize) -> Self {
        Self {
            m: [[-1.0, 0.0, width as f64 - 1.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn flip_vertical(height: usize) -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, -1.0, height as f64 - 1.0]],
        }
    }

    /// Linear map `lin` applied about the centre `(cx, cy)`.
    fn about(cx: f64, cy: f64, lin: [[f64; 2]; 2]) -> Self {
        let tx = cx - lin[0][0] * cx - lin[0][1] * cy;
        let ty = cy - lin[1][0] * cx - lin[1][1] * cy;
        Self {
            m: [[lin[0][0], lin[0][1], tx], [lin[1][0], lin[1][1], ty]],
        }
    }

    /// Rotation by `degrees` about `(cx, cy)` (positive turns +x towards +y).
    pub fn rotation_about(cx: f64, cy: f64, degrees: f64) -> Self {
        let r = degrees.to_radians();
        let (s, c) = (snap_unit(r.sin()), snap_unit(r.cos()));
        Self::about(cx, cy, [[c, -s], [s, c]])
    }

    pub fn scale_about(cx: f64, cy: f64, sx: f64, sy: f64) -> Result<Self> {
        Self::new(Self::about(cx, cy, [[sx, 0.0], [0.0, sy]]).m)
    }

    /// Horizontal shear `x' = x + k·y` about `(cx, cy)`.
    pub fn shear_about(cx: f64, cy: f64, k: f64) -> Self {
        Self::about(cx, cy, [[1.0, k], [0.0, 1.0]])
    }

    /// `other ∘ self`: apply `self` first, then `other`.
    pub fn then(&self, other: &AffineTransform) -> AffineTransform {
        let a = &other.m;
        let b = &self.m;
        let mut m = [[0.0; 3]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            row[0] = a[i][0] * b[0][0] + a[i][1] * b[1][0];
            row[1] = a[i][0] * b[0][1] + a[i][1] * b[1][1];
            row[2] = a[i][0] * b[0][2] + a[i][1] * b[1][2] + a[i][2];
        }
        AffineTransform { m }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::Argument("affine transform is singular".into()));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(AffineTransform {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }
}

/// How samples falling outside the source raster are filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Border {
    /// Whole-sample mirror reflection, as in [`super::mirror_pad`].
    Mirror,
    /// Constant fill; for masks any value above 0.5 counts as set.
    Constant(f64),
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Rasters that can be resampled through an affine map.
pub trait Warp: Sized {
    /// Inverse-mapping resample onto an `out_w × out_h` canvas.
    fn warp(&self, t: &AffineTransform, out_w: usize, out_h: usize, border: Border) -> Result<Self>;
}

impl Warp for GrayImage {
    fn warp(&self, t: &AffineTransform, out_w: usize, out_h: usize, border: Border) -> Result<Self> {
        let inv = t.inverse()?;
        let (w, h) = (self.width() as isize, self.height() as isize);
        let src = self.pixels();
        let fetch = |x: isize, y: isize| -> f64 {
            if x >= 0 && x < w && y >= 0 && y < h {
                return src[(y * w + x) as usize];
            }
            match border {
                Border::Mirror => {
                    src[reflect101(y, h as usize) * w as usize + reflect101(x, w as usize)]
                }
                Border::Constant(c) => c,
            }
        };
        let mut out = Vec::with_capacity(out_w * out_h);
        for y in 0..out_h {
            for x in 0..out_w {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                let (sx, sy) = (snap(sx), snap(sy));
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (xi, yi) = (x0 as isize, y0 as isize);
                let v = if fx == 0.0 && fy == 0.0 {
                    fetch(xi, yi)
                } else {
                    let top = (1.0 - fx) * fetch(xi, yi) + fx * fetch(xi + 1, yi);
                    let bot = (1.0 - fx) * fetch(xi, yi + 1) + fx * fetch(xi + 1, yi + 1);
                    (1.0 - fy) * top + fy * bot
                };
                out.push(v);
            }
        }
        GrayImage::from_unclamped(out_w, out_h, out, self.pixel_pitch())
    }
}

impl Warp for BinaryMask {
    fn warp(&self, t: &AffineTransform, out_w: usize, out_h: usize, border: Border) -> Result<Self> {
        let inv = t.inverse()?;
        let (w, h) = (self.width() as isize, self.height() as isize);
        let mut out = BinaryMask::new(out_w, out_h, self.kind());
        for y in 0..out_h {
            for x in 0..out_w {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                let xi = (snap(sx) + 0.5).floor() as isize;
                let yi = (snap(sy) + 0.5).floor() as isize;
                let v = if xi >= 0 && xi < w && yi >= 0 && yi < h {
                    self.get(xi as usize, yi as usize)
                } else {
                    match border {
                        Border::Mirror => self.get(
                            reflect101(xi, w as usize),
                            reflect101(yi, h as usize),
                        ),
                        Border::Constant(c) => c > 0.5,
                    }
                };
                out.set(x, y, v);
            }
        }
        Ok(out)
    }
}

/// Resample onto a same-sized canvas with mirror borders (bilinear for
/// intensities, nearest neighbour for masks).
pub fn apply_affine<R: Warp + Raster>(src: &R, t: &AffineTransform) -> Result<R> {
    src.warp(t, src.raster_width(), src.raster_height(), Border::Mirror)
}

/// Access to raster extents for generic helpers.
pub trait Raster {
    fn raster_width(&self) -> usize;
    fn raster_height(&self) -> usize;
}

impl Raster for GrayImage {
    fn raster_width(&self) -> usize {
        self.width()
    }
    fn raster_height(&self) -> usize {
        self.height()
    }
}

impl Raster for BinaryMask {
    fn raster_width(&self) -> usize {
        self.width()
    }
    fn raster_height(&self) -> usize {
        self.height()
    }
}
