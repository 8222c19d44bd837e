//! Mouth-region masks, temporal mask averaging, and feature blending.
//!
//! The mouth mask is the convex hull of the perspective-projected mouth
//! vertices, rasterized at pixel centers, dilated by one pixel, and
//! optionally feathered with a separable Gaussian. Blending is the convex
//! per-pixel combination `deformed * (1 - M) + mouth * M` in feature space,
//! before upsampling.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::field::{FieldBundle, StyleLatent};
use crate::linalg::Vec3;
use crate::render::{project_point, upsample, CameraPose, FeatureMap};

/// H x W mask with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MouthMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl MouthMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        MouthMask { height, width, values: vec![0.0; height * width] }
    }
}

/// FIFO of the last `capacity` masks.
#[derive(Debug, Clone)]
pub struct MaskHistory {
    capacity: usize,
    masks: VecDeque<MouthMask>,
}

impl MaskHistory {
    pub fn new(capacity: usize) -> Self {
        MaskHistory { capacity: capacity.max(1), masks: VecDeque::new() }
    }

    pub fn push(&mut self, mask: MouthMask) {
        if self.masks.len() == self.capacity {
            self.masks.pop_front();
        }
        self.masks.push_back(mask);
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MouthMask> {
        self.masks.iter()
    }
}

/// Project mouth vertices, rasterize their convex hull, dilate by one
/// pixel, and feather. Vertices behind the camera are dropped; fewer than
/// three visible vertices produce an all-zero mask (not an error).
pub fn project_mouth_mask(
    mouth_vertices_field: &[Vec3],
    pose: &CameraPose,
    height: usize,
    width: usize,
    feather: f64,
) -> Result<MouthMask> {
    if mouth_vertices_field.len() < 3 {
        return Err(Error::invalid("need at least 3 mouth vertices"));
    }
    let projected: Vec<(f64, f64)> = mouth_vertices_field
        .iter()
        .filter_map(|&v| project_point(pose, v, height, width))
        .collect();
    if projected.len() < 3 {
        return Ok(MouthMask::zeros(height, width));
    }
    let hull = convex_hull(&projected);
    if hull.len() < 3 {
        return Ok(MouthMask::zeros(height, width));
    }
    let mut mask = MouthMask::zeros(height, width);
    rasterize_hull(&hull, &mut mask);
    dilate_one(&mut mask);
    if feather > 0.0 {
        gaussian_feather(&mut mask, feather);
    }
    for v in mask.values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(mask)
}

/// Andrew monotone chain; returns hull vertices in counterclockwise order
/// (y-down pixel coordinates).
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite projections"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Fill pixels whose centers lie inside or on the hull boundary.
fn rasterize_hull(hull: &[(f64, f64)], mask: &mut MouthMask) {
    let (xs, ys): (Vec<f64>, Vec<f64>) = hull.iter().copied().unzip();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let x_max =
        (xs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() as isize).max(0) as usize;
    let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let y_max =
        (ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() as isize).max(0) as usize;
    for y in y_min..=y_max.min(mask.height.saturating_sub(1)) {
        for x in x_min..=x_max.min(mask.width.saturating_sub(1)) {
            let p = (x as f64, y as f64);
            let mut inside = true;
            for i in 0..hull.len() {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                // Counterclockwise hull: interior points sit on the
                // non-negative side of every edge (boundary counts as in).
                let cr = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                if cr < -1e-12 {
                    inside = false;
                    break;
                }
            }
            if inside {
                mask.values[y * mask.width + x] = 1.0;
            }
        }
    }
}

fn dilate_one(mask: &mut MouthMask) {
    let (h, w) = (mask.height, mask.width);
    let src = mask.values.clone();
    for y in 0..h {
        for x in 0..w {
            let mut m = 0.0f64;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        m = m.max(src[yy as usize * w + xx as usize]);
                    }
                }
            }
            mask.values[y * w + x] = m;
        }
    }
}

/// Separable Gaussian blur with sigma in pixels (zero padding).
fn gaussian_feather(mask: &mut MouthMask, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (h, w) = (mask.height, mask.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - radius;
                if xx >= 0 && xx < w as isize {
                    acc += k * mask.values[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - radius;
                if yy >= 0 && yy < h as isize {
                    acc += k * tmp[yy as usize * w + x];
                }
            }
            mask.values[y * w + x] = acc;
        }
    }
}

/// Pixelwise arithmetic mean over the masks in the history (averaging over
/// however many exist during warm-up). Errors on an empty history.
pub fn average_mask(history: &MaskHistory) -> Result<MouthMask> {
    let n = history.len();
    if n == 0 {
        return Err(Error::invalid("average_mask on an empty history"));
    }
    let first = history.iter().next().expect("non-empty");
    let mut out = MouthMask::zeros(first.height, first.width);
    for mask in history.iter() {
        if mask.values.len() != out.values.len() {
            return Err(Error::shape("average_mask", out.values.len(), mask.values.len()));
        }
        for (o, v) in out.values.iter_mut().zip(&mask.values) {
            *o += v;
        }
    }
    for o in out.values.iter_mut() {
        *o /= n as f64;
    }
    Ok(out)
}

/// Convex per-pixel blend: `deformed * (1 - M) + mouth * M`, mask broadcast
/// over channels.
pub fn blend(
    phi_deformed: &FeatureMap,
    phi_exp: &FeatureMap,
    mask: &MouthMask,
) -> Result<FeatureMap> {
    if phi_deformed.height != phi_exp.height
        || phi_deformed.width != phi_exp.width
        || phi_deformed.channels != phi_exp.channels
    {
        return Err(Error::shape(
            "blend feature maps",
            format!("{}x{}x{}", phi_deformed.height, phi_deformed.width, phi_deformed.channels),
            format!("{}x{}x{}", phi_exp.height, phi_exp.width, phi_exp.channels),
        ));
    }
    if mask.height != phi_deformed.height || mask.width != phi_deformed.width {
        return Err(Error::shape(
            "blend mask",
            format!("{}x{}", phi_deformed.height, phi_deformed.width),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    let c = phi_deformed.channels;
    let mut out = phi_deformed.clone();
    for (px, &m) in mask.values.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for ch in 0..c {
            let i = px * c + ch;
            out.data[i] = phi_deformed.data[i] * (1.0 - m) + phi_exp.data[i] * m;
        }
    }
    Ok(out)
}

/// Final frame: upsample the blended feature map with the identity latent
/// (pure delegation to the renderer's upsampler).
pub fn compose_final(
    bundle: &FieldBundle,
    phi_blended: &FeatureMap,
    w_inv: &StyleLatent,
    scale: usize,
) -> Result<FeatureMap> {
    upsample(bundle, phi_blended, w_inv, scale)
}
