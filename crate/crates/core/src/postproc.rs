//! Indication extraction from prediction masks: connected components, Feret
//! sizing, circle/rectangle fitting, crack vs porosity classification,
//! porosity-chain clustering, acceptance rules and overlay rendering.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::imagecore::{BinaryMask, GrayImage};
use crate::{Error, Result};

/// Number of uniformly spaced caliper directions over `[0, π)`.
pub const FERET_DIRECTIONS: usize = 16;
/// Aspect ratio at or above which a component is classed as crack-like.
pub const CRACK_ASPECT_RATIO: f64 = 3.0;

/// One connected set of mask pixels, `(x, y)` in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &self.pixels {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }
}

/// 8-connected components, ordered by their first pixel in raster order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        pixels.sort_by_key(|&(x, y)| (y, x));
        out.push(Component { pixels });
    }
    out
}

/// Convex hull of pixel centres (Andrew's monotone chain, collinear points dropped).
pub fn convex_hull(pixels: &[(usize, usize)]) -> Vec<(i64, i64)> {
    let mut pts: Vec<(i64, i64)> = pixels.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Caliper extents of a pixel set measured over [`FERET_DIRECTIONS`] angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeretStats {
    /// Largest caliper width in pixels (pixel extent included).
    pub max: f64,
    pub min: f64,
    /// Direction of the largest width, radians in `[0, π)`.
    pub max_angle: f64,
}

impl FeretStats {
    pub fn aspect_ratio(&self) -> f64 {
        self.max / self.min
    }
}

/// Projection range of pixel centres on direction `angle`, plus one pixel.
fn caliper_width(hull: &[(i64, i64)], angle: f64) -> (f64, f64, f64) {
    let (c, s) = (angle.cos(), angle.sin());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(x, y) in hull {
        let p = x as f64 * c + y as f64 * s;
        lo = lo.min(p);
        hi = hi.max(p);
    }
    (hi - lo + 1.0, lo, hi)
}

pub fn feret_diameters(pixels: &[(usize, usize)]) -> FeretStats {
    let hull = convex_hull(pixels);
    let mut stats = FeretStats {
        max: f64::NEG_INFINITY,
        min: f64::INFINITY,
        max_angle: 0.0,
    };
    for k in 0..FERET_DIRECTIONS {
        let angle = k as f64 * PI / FERET_DIRECTIONS as f64;
        let (w, _, _) = caliper_width(&hull, angle);
        if w > stats.max {
            stats.max = w;
            stats.max_angle = angle;
        }
        stats.min = stats.min.min(w);
    }
    stats
}

/// Max Feret diameter of a pixel set in millimetres.
pub fn feret_size_mm(pixels: &[(usize, usize)], pixel_pitch: f64) -> f64 {
    feret_diameters(pixels).max * pixel_pitch
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FittedShape {
    Circle {
        center_mm: (f64, f64),
        diameter_mm: f64,
    },
    Rectangle {
        center_mm: (f64, f64),
        length_mm: f64,
        width_mm: f64,
        /// Orientation of the long side, degrees.
        angle_deg: f64,
    },
}

impl FittedShape {
    /// Whether the pixel centre `(x, y)` lies inside the shape (with a small tolerance).
    pub fn contains_pixel(&self, x: usize, y: usize, pixel_pitch: f64) -> bool {
        let (px, py) = (x as f64 * pixel_pitch, y as f64 * pixel_pitch);
        let tol = 1e-9 + 1e-9 * pixel_pitch;
        match *self {
            FittedShape::Circle {
                center_mm,
                diameter_mm,
            } => {
                let d = ((px - center_mm.0).powi(2) + (py - center_mm.1).powi(2)).sqrt();
                d <= diameter_mm / 2.0 + tol
            }
            FittedShape::Rectangle {
                center_mm,
                length_mm,
                width_mm,
                angle_deg,
            } => {
                let a = angle_deg.to_radians();
                let (dx, dy) = (px - center_mm.0, py - center_mm.1);
                let along = dx * a.cos() + dy * a.sin();
                let across = -dx * a.sin() + dy * a.cos();
                along.abs() <= length_mm / 2.0 + tol && across.abs() <= width_mm / 2.0 + tol
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicationClass {
    CrackLike,
    Porosity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Acceptable,
    Reportable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFit {
    pub shape: FittedShape,
    pub size_mm: f64,
    pub aspect_ratio: f64,
    pub class: IndicationClass,
}

fn circle_from(a: (f64, f64), b: (f64, f64)) -> ((f64, f64), f64) {
    let c = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
    (c, dist(a, c))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn circumcircle(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> ((f64, f64), f64) {
    let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
    if d.abs() < 1e-12 {
        // collinear: the widest pair spans the circle
        let pairs = [circle_from(a, b), circle_from(a, c), circle_from(b, c)];
        return pairs
            .into_iter()
            .max_by(|p, q| p.1.total_cmp(&q.1))
            .unwrap();
    }
    let sq = |p: (f64, f64)| p.0 * p.0 + p.1 * p.1;
    let ux = (sq(a) * (b.1 - c.1) + sq(b) * (c.1 - a.1) + sq(c) * (a.1 - b.1)) / d;
    let uy = (sq(a) * (c.0 - b.0) + sq(b) * (a.0 - c.0) + sq(c) * (b.0 - a.0)) / d;
    ((ux, uy), dist(a, (ux, uy)))
}

/// Minimal enclosing circle (incremental Welzl) of a small point set.
pub fn min_enclosing_circle(points: &[(f64, f64)]) -> ((f64, f64), f64) {
    const EPS: f64 = 1e-9;
    let inside = |c: &((f64, f64), f64), p: (f64, f64)| dist(c.0, p) <= c.1 + EPS;
    let mut circle = (points[0], 0.0);
    for i in 1..points.len() {
        if inside(&circle, points[i]) {
            continue;
        }
        circle = (points[i], 0.0);
        for j in 0..i {
            if inside(&circle, points[j]) {
                continue;
            }
            circle = circle_from(points[i], points[j]);
            for k in 0..j {
                if !inside(&circle, points[k]) {
                    circle = circumcircle(points[i], points[j], points[k]);
                }
            }
        }
    }
    circle
}

pub fn fit_shape(component: &Component, pixel_pitch: f64) -> Result<ShapeFit> {
    fit_shape_with(component, pixel_pitch, CRACK_ASPECT_RATIO)
}

/// Fit a rectangle (thin, crack-like) or circle (compact, porosity) around a component.
pub fn fit_shape_with(
    component: &Component,
    pixel_pitch: f64,
    crack_aspect_ratio: f64,
) -> Result<ShapeFit> {
    if component.is_empty() {
        return Err(Error::Argument("cannot fit an empty component".into()));
    }
    let hull = convex_hull(&component.pixels);
    let feret = feret_diameters(&component.pixels);
    let aspect_ratio = feret.aspect_ratio();
    if aspect_ratio >= crack_aspect_ratio {
        let a = feret.max_angle;
        let (length, lo_a, hi_a) = caliper_width(&hull, a);
        let (width, lo_p, hi_p) = caliper_width(&hull, a + PI / 2.0);
        let mid_a = (lo_a + hi_a) / 2.0;
        let mid_p = (lo_p + hi_p) / 2.0;
        let (ua, up) = ((a.cos(), a.sin()), ((a + PI / 2.0).cos(), (a + PI / 2.0).sin()));
        let cx = mid_a * ua.0 + mid_p * up.0;
        let cy = mid_a * ua.1 + mid_p * up.1;
        Ok(ShapeFit {
            shape: FittedShape::Rectangle {
                center_mm: (cx * pixel_pitch, cy * pixel_pitch),
                length_mm: length * pixel_pitch,
                width_mm: width * pixel_pitch,
                angle_deg: a.to_degrees(),
            },
            size_mm: feret.max * pixel_pitch,
            aspect_ratio,
            class: IndicationClass::CrackLike,
        })
    } else {
        let pts: Vec<(f64, f64)> = hull.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let (c, r) = min_enclosing_circle(&pts);
        Ok(ShapeFit {
            shape: FittedShape::Circle {
                center_mm: (c.0 * pixel_pitch, c.1 * pixel_pitch),
                diameter_mm: (2.0 * r + 1.0) * pixel_pitch,
            },
            size_mm: feret.max * pixel_pitch,
            aspect_ratio,
            class: IndicationClass::Porosity,
        })
    }
}

/// A post-processed detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Indication {
    pub pixels: Vec<(usize, usize)>,
    pub centroid_mm: (f64, f64),
    pub shape: FittedShape,
    pub size_mm: f64,
    pub aspect_ratio: f64,
    pub class: IndicationClass,
    pub chain_id: Option<usize>,
    pub disposition: Disposition,
}

impl Indication {
    pub fn from_component(component: Component, pixel_pitch: f64) -> Result<Self> {
        let fit = fit_shape(&component, pixel_pitch)?;
        let n = component.len() as f64;
        let (sx, sy) = component
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        Ok(Self {
            centroid_mm: (sx / n * pixel_pitch, sy / n * pixel_pitch),
            pixels: component.pixels,
            shape: fit.shape,
            size_mm: fit.size_mm,
            aspect_ratio: fit.aspect_ratio,
            class: fit.class,
            chain_id: None,
            disposition: Disposition::Acceptable,
        })
    }
}

pub fn extract_indications(mask: &BinaryMask, pixel_pitch: f64) -> Result<Vec<Indication>> {
    connected_components(mask)
        .into_iter()
        .map(|c| Indication::from_component(c, pixel_pitch))
        .collect()
}

/// Single-linkage clustering of porosity indications by centroid distance.
/// Clusters of two or more pores receive chain ids, numbered by their first
/// member's position. Returns the number of chains.
pub fn cluster_porosity(indications: &mut [Indication], proximity_mm: f64) -> Result<usize> {
    if !(proximity_mm > 0.0) {
        return Err(Error::Argument(format!(
            "proximity must be > 0, got {proximity_mm}"
        )));
    }
    let n = indications.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let pores: Vec<usize> = (0..n)
        .filter(|&i| indications[i].class == IndicationClass::Porosity)
        .collect();
    for (a, &i) in pores.iter().enumerate() {
        for &j in &pores[a + 1..] {
            if dist(indications[i].centroid_mm, indications[j].centroid_mm) <= proximity_mm {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut sizes = vec![0usize; n];
    for &i in &pores {
        let r = find(&mut parent, i);
        sizes[r] += 1;
    }
    let mut ids = vec![None; n];
    let mut next = 0;
    for ind in indications.iter_mut() {
        ind.chain_id = None;
    }
    for &i in &pores {
        let r = find(&mut parent, i);
        if sizes[r] >= 2 {
            let id = *ids[r].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            indications[i].chain_id = Some(id);
        }
    }
    Ok(next)
}

/// Accept/report rules for indications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceRules {
    pub max_porosity_mm: f64,
    pub max_crack_mm: f64,
    pub chain_min_pores: usize,
    pub chain_proximity_mm: f64,
    pub cracks_always_reportable: bool,
}

impl Default for AcceptanceRules {
    fn default() -> Self {
        Self {
            max_porosity_mm: 1.5,
            max_crack_mm: 1.5,
            chain_min_pores: 3,
            chain_proximity_mm: 5.0,
            cracks_always_reportable: true,
        }
    }
}

impl AcceptanceRules {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_porosity_mm > 0.0 && self.max_crack_mm > 0.0 && self.chain_proximity_mm > 0.0)
        {
            return Err(Error::Argument("acceptance sizes must be > 0".into()));
        }
        if self.chain_min_pores < 2 {
            return Err(Error::Argument("porosity chain trigger needs >= 2 pores".into()));
        }
        Ok(())
    }
}

/// Assign dispositions; expects chain ids from [`cluster_porosity`].
pub fn apply_acceptance(indications: &mut [Indication], rules: &AcceptanceRules) {
    let mut chain_sizes = std::collections::HashMap::new();
    for ind in indications.iter() {
        if let Some(id) = ind.chain_id {
            *chain_sizes.entry(id).or_insert(0usize) += 1;
        }
    }
    for ind in indications.iter_mut() {
        let reportable = match ind.class {
            IndicationClass::CrackLike => {
                rules.cracks_always_reportable || ind.size_mm > rules.max_crack_mm
            }
            IndicationClass::Porosity => {
                ind.size_mm > rules.max_porosity_mm
                    || ind
                        .chain_id
                        .is_some_and(|id| chain_sizes[&id] >= rules.chain_min_pores)
            }
        };
        ind.disposition = if reportable {
            Disposition::Reportable
        } else {
            Disposition::Acceptable
        };
    }
}

/// Full post-processing for one prediction mask.
pub fn process_mask(
    mask: &BinaryMask,
    pixel_pitch: f64,
    rules: &AcceptanceRules,
) -> Result<Vec<Indication>> {
    rules.validate()?;
    let mut inds = extract_indications(mask, pixel_pitch)?;
    cluster_porosity(&mut inds, rules.chain_proximity_mm)?;
    apply_acceptance(&mut inds, rules);
    Ok(inds)
}

fn draw_line(img: &mut GrayImage, a: (i64, i64), b: (i64, i64), value: f64) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set(x as usize, y as usize, value);
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_polygon(img: &mut GrayImage, vertices: &[(f64, f64)], value: f64) {
    let pts: Vec<(i64, i64)> = vertices
        .iter()
        .map(|&(x, y)| (x.round() as i64, y.round() as i64))
        .collect();
    for i in 0..pts.len() {
        draw_line(img, pts[i], pts[(i + 1) % pts.len()], value);
    }
}

/// Outline every indication's fitted shape with a 1 px stroke: dark (0.0) for
/// acceptable, white (1.0) for reportable.
pub fn render_overlay(img: &GrayImage, indications: &[Indication]) -> GrayImage {
    let mut out = img.clone();
    let pitch = img.pixel_pitch();
    for ind in indications {
        let value = match ind.disposition {
            Disposition::Acceptable => 0.0,
            Disposition::Reportable => 1.0,
        };
        match ind.shape {
            FittedShape::Circle {
                center_mm,
                diameter_mm,
            } => {
                let (cx, cy) = (center_mm.0 / pitch, center_mm.1 / pitch);
                let r = diameter_mm / pitch / 2.0;
                let n = ((2.0 * PI * r).ceil() as usize).max(16);
                let verts: Vec<(f64, f64)> = (0..n)
                    .map(|k| {
                        let t = 2.0 * PI * k as f64 / n as f64;
                        (cx + r * t.cos(), cy + r * t.sin())
                    })
                    .collect();
                draw_polygon(&mut out, &verts, value);
            }
            FittedShape::Rectangle {
                center_mm,
                length_mm,
                width_mm,
                angle_deg,
            } => {
                let (cx, cy) = (center_mm.0 / pitch, center_mm.1 / pitch);
                let (hl, hw) = (length_mm / pitch / 2.0, width_mm / pitch / 2.0);
                let a = angle_deg.to_radians();
                let (ux, uy) = (a.cos(), a.sin());
                let (vx, vy) = (-uy, ux);
                let verts = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
                    .map(|(s, t)| (cx + s * hl * ux + t * hw * vx, cy + s * hl * uy + t * hw * vy));
                draw_polygon(&mut out, &verts, value);
            }
        }
    }
    out
}

/// Serializable summary of one indication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicationRecord {
    pub class: IndicationClass,
    pub size_mm: f64,
    pub centroid_mm: (f64, f64),
    pub aspect_ratio: f64,
    pub chain_id: Option<usize>,
    pub disposition: Disposition,
}

pub fn indication_report(indications: &[Indication]) -> Vec<IndicationRecord> {
    indications
        .iter()
        .map(|i| IndicationRecord {
            class: i.class,
            size_mm: i.size_mm,
            centroid_mm: i.centroid_mm,
            aspect_ratio: i.aspect_ratio,
            chain_id: i.chain_id,
            disposition: i.disposition,
        })
        .collect()
}
