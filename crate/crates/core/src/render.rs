//! Deterministic stratified volume rendering of the (possibly deformed)
//! field into feature maps, and the style-modulated upsampler.
//!
//! Rays are processed in fixed-size chunks; all parallelism lives inside the
//! GEMM kernels, whose summation order is scheduling-independent, so a
//! rendered map is bit-identical regardless of the rayon worker count.
//!
//! Integration weights use the telescoped form `w_i = (1 - T_{i+1}) - sum of
//! previous weights` clamped at zero, which is algebraically the classic
//! `T_i (1 - exp(-sigma_i delta_i))` but keeps the running weight sum at or
//! below one exactly, even in corner cases where naive summation rounds up.

use rayon::prelude::*;

use crate::deform::DisplacementField;
use crate::error::{Error, Result};
use crate::field::{
    encode_batch, field_backward, field_forward_encoded, leaky, leaky_grad_from_output,
    style_rows, FieldBatch, FieldBundle, FieldGrads, StyleLatent,
};
use crate::linalg::{v_add, v_cross, v_normalize, v_scale, v_sub, Vec3};

/// Orbit camera: spherical (yaw, pitch, radius) around `look_at`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub look_at: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose {
            yaw: 0.0,
            pitch: 0.0,
            radius: 2.2,
            fov_y: 0.9,
            look_at: [0.0, 0.0, 0.0],
        }
    }
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 {
            return Err(Error::invalid(format!("camera radius must be positive: {}", self.radius)));
        }
        if self.pitch.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::invalid(format!("|pitch| must be < pi/2: {}", self.pitch)));
        }
        Ok(())
    }

    pub fn eye(&self) -> Vec3 {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        v_add(self.look_at, v_scale([cp * sy, sp, cp * cy], self.radius))
    }

    /// Orthonormal camera frame (right, up, forward).
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        // forward = normalize(look_at - eye) = -(cp sy, sp, cp cy), unit by
        // construction; right follows in closed form (valid for
        // |pitch| < pi/2), up completes the right-handed frame.
        let forward = [-cp * sy, -sp, -cp * cy];
        let right = [cy, 0.0, -sy];
        let up = v_cross(right, forward);
        (right, up, forward)
    }
}

/// Stratified sampling parameters: N equal strata over [t_near, t_far],
/// sampled at midpoints (no jitter).
#[derive(Debug, Clone, Copy)]
pub struct SamplingConfig {
    pub num_samples: usize,
    pub t_near: f64,
    pub t_far: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { num_samples: 64, t_near: 0.5, t_far: 3.5 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 2 {
            return Err(Error::invalid("num_samples must be >= 2"));
        }
        if !(0.0 < self.t_near && self.t_near < self.t_far) {
            return Err(Error::invalid(format!(
                "need 0 < t_near < t_far, got {} .. {}",
                self.t_near, self.t_far
            )));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        (self.t_far - self.t_near) / self.num_samples as f64
    }
}

/// A camera ray with unit direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Row-major H x W x C buffer in [0, 1] (also used for RGB images with
/// C = 3).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "FeatureMap::new",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(FeatureMap { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }
}

// ---------------------------------------------------------------------------
// Rays and sampling
// ---------------------------------------------------------------------------

/// Per-pixel rays through pixel centers, row-major. Directions are unit.
pub fn generate_rays(pose: &CameraPose, height: usize, width: usize) -> Result<Vec<Ray>> {
    pose.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("image dimensions must be >= 1"));
    }
    let (right, up, forward) = pose.basis();
    let eye = pose.eye();
    let tan_half = (pose.fov_y / 2.0).tan();
    let aspect = width as f64 / height as f64;
    let mut rays = Vec::with_capacity(height * width);
    for j in 0..height {
        let y_ndc = (1.0 - (j as f64 + 0.5) / height as f64 * 2.0) * tan_half;
        for i in 0..width {
            let x_ndc = ((i as f64 + 0.5) / width as f64 * 2.0 - 1.0) * tan_half * aspect;
            let dir = v_normalize(v_add(
                forward,
                v_add(v_scale(right, x_ndc), v_scale(up, y_ndc)),
            ));
            rays.push(Ray { origin: eye, dir });
        }
    }
    Ok(rays)
}

/// Perspective-project a world point to continuous pixel coordinates
/// (x, y); `None` when the point is behind the camera. Inverse-consistent
/// with `generate_rays` (a pixel-center ray projects back to that pixel).
pub fn project_point(
    pose: &CameraPose,
    point: Vec3,
    height: usize,
    width: usize,
) -> Option<(f64, f64)> {
    let (right, up, forward) = pose.basis();
    let rel = v_sub(point, pose.eye());
    let z = rel[0] * forward[0] + rel[1] * forward[1] + rel[2] * forward[2];
    if z <= 1e-9 {
        return None;
    }
    let x_cam = rel[0] * right[0] + rel[1] * right[1] + rel[2] * right[2];
    let y_cam = rel[0] * up[0] + rel[1] * up[1] + rel[2] * up[2];
    let tan_half = (pose.fov_y / 2.0).tan();
    let aspect = width as f64 / height as f64;
    let x_ndc = x_cam / (z * tan_half * aspect);
    let y_ndc = y_cam / (z * tan_half);
    let px = (x_ndc + 1.0) / 2.0 * width as f64 - 0.5;
    let py = (1.0 - y_ndc) / 2.0 * height as f64 - 0.5;
    Some((px, py))
}

/// Deterministic stratified midpoints along a ray: positions plus the
/// per-segment lengths (all equal).
pub fn sample_points(ray: &Ray, config: &SamplingConfig) -> Result<(Vec<Vec3>, Vec<f64>)> {
    config.validate()?;
    let delta = config.delta();
    let mut points = Vec::with_capacity(config.num_samples);
    for i in 0..config.num_samples {
        let t = config.t_near + (i as f64 + 0.5) * delta;
        points.push(v_add(ray.origin, v_scale(ray.dir, t)));
    }
    Ok((points, vec![delta; config.num_samples]))
}

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

/// Per-sample integration weights and the final opacity. The construction
/// keeps every weight non-negative and the running sum at or below one
/// exactly (see module docs).
pub fn integration_weights(sigmas: &[f64], deltas: &[f64]) -> Result<(Vec<f64>, f64)> {
    if sigmas.len() != deltas.len() {
        return Err(Error::shape("integration_weights", sigmas.len(), deltas.len()));
    }
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut optical_depth = 0.0;
    let mut accumulated = 0.0; // sum of weights so far
    for (&sigma, &delta) in sigmas.iter().zip(deltas) {
        if sigma < 0.0 {
            return Err(Error::invalid(format!("negative density {sigma}")));
        }
        if delta <= 0.0 {
            return Err(Error::invalid(format!("non-positive segment length {delta}")));
        }
        optical_depth += sigma * delta;
        let t_next = (-optical_depth).exp();
        let mut w = (1.0 - t_next) - accumulated;
        if w < 0.0 {
            w = 0.0;
        }
        weights.push(w);
        accumulated += w;
    }
    Ok((weights, accumulated))
}

/// Accumulate per-sample features along a ray: returns the integrated
/// C-vector and the opacity. Background contributes zero.
pub fn integrate(features: &[f64], sigmas: &[f64], deltas: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = sigmas.len();
    if n == 0 || features.len() % n != 0 {
        return Err(Error::shape("integrate features", format!("multiple of {n}"), features.len()));
    }
    let c = features.len() / n;
    let (weights, opacity) = integration_weights(sigmas, deltas)?;
    let mut out = vec![0.0; c];
    for (i, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            for ch in 0..c {
                out[ch] += w * features[i * c + ch];
            }
        }
    }
    Ok((out, opacity))
}

/// Gradients of a ray integral: given dL/d(output C-vector), produce
/// dL/dfeatures and dL/dsigmas. `t_next[i]` is the transmittance after
/// sample i (cached by the renderer).
fn integrate_backward(
    features: &[f64],
    weights: &[f64],
    t_next: &[f64],
    deltas_uniform: f64,
    d_out: &[f64],
    d_features: &mut [f64],
    d_sigmas: &mut [f64],
) {
    let n = weights.len();
    let c = d_out.len();
    // dL/dw_i = <feature_i, d_out>
    let mut g = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for ch in 0..c {
            acc += features[i * c + ch] * d_out[ch];
        }
        g[i] = acc;
        for ch in 0..c {
            d_features[i * c + ch] = weights[i] * d_out[ch];
        }
    }
    // dL/dsigma_i = delta * (g_i * T_{i+1} - sum_{j>i} g_j w_j).
    let mut suffix = 0.0; // sum_{j>i} g_j w_j
    for i in (0..n).rev() {
        d_sigmas[i] = deltas_uniform * (g[i] * t_next[i] - suffix);
        suffix += g[i] * weights[i];
    }
}

// ---------------------------------------------------------------------------
// Feature-map rendering
// ---------------------------------------------------------------------------

const CHUNK_TARGET_POINTS: usize = 16_384;

/// Activations and per-ray integration state kept for the backward pass.
pub struct RenderCache {
    pub height: usize,
    pub width: usize,
    pub num_samples: usize,
    pub delta: f64,
    chunk_rows: usize,
    batches: Vec<FieldBatch>,
    weights: Vec<f64>,
    t_next: Vec<f64>,
}

/// Render the feature map (forward only).
pub fn render_feature_map(
    bundle: &FieldBundle,
    w: &StyleLatent,
    pose: &CameraPose,
    sampling: &SamplingConfig,
    height: usize,
    width: usize,
    deform: Option<&DisplacementField>,
) -> Result<FeatureMap> {
    render_impl(bundle, w, pose, sampling, height, width, deform, false).map(|(m, _)| m)
}

/// Render and keep the activations needed to backpropagate through the map.
pub fn render_feature_map_cached(
    bundle: &FieldBundle,
    w: &StyleLatent,
    pose: &CameraPose,
    sampling: &SamplingConfig,
    height: usize,
    width: usize,
    deform: Option<&DisplacementField>,
) -> Result<(FeatureMap, RenderCache)> {
    let (map, cache) = render_impl(bundle, w, pose, sampling, height, width, deform, true)?;
    Ok((map, cache.expect("cache requested")))
}

#[allow(clippy::too_many_arguments)]
fn render_impl(
    bundle: &FieldBundle,
    w: &StyleLatent,
    pose: &CameraPose,
    sampling: &SamplingConfig,
    height: usize,
    width: usize,
    deform: Option<&DisplacementField>,
    keep_cache: bool,
) -> Result<(FeatureMap, Option<RenderCache>)> {
    sampling.validate()?;
    let rays = generate_rays(pose, height, width)?;
    let n = sampling.num_samples;
    let c = bundle.dims.feature_channels;
    let delta = sampling.delta();
    let deform = deform.filter(|d| !d.is_zero());

    let chunk_rows = (CHUNK_TARGET_POINTS / (width * n)).max(1);
    let mut map = FeatureMap::zeros(height, width, c);
    let mut cache = keep_cache.then(|| RenderCache {
        height,
        width,
        num_samples: n,
        delta,
        chunk_rows,
        batches: Vec::new(),
        weights: vec![0.0; height * width * n],
        t_next: vec![0.0; height * width * n],
    });

    let style = style_rows(bundle, &w.w)?;
    let mut row = 0;
    while row < height {
        let rows_here = chunk_rows.min(height - row);
        let ray_slice = &rays[row * width..(row + rows_here) * width];
        let num_points = ray_slice.len() * n;
        let mut points = Vec::with_capacity(num_points * 3);
        let mut dirs = Vec::with_capacity(num_points * 3);
        for ray in ray_slice {
            for i in 0..n {
                let t = sampling.t_near + (i as f64 + 0.5) * delta;
                let mut p = v_add(ray.origin, v_scale(ray.dir, t));
                if let Some(df) = deform {
                    p = v_add(p, df.displacement_at(p));
                }
                points.extend_from_slice(&p);
                dirs.extend_from_slice(&ray.dir);
            }
        }
        let enc = encode_batch(bundle, &points, &dirs);
        let batch = field_forward_encoded(bundle, enc, &style)?;

        // Integrate each ray of the chunk.
        for (ri, _) in ray_slice.iter().enumerate() {
            let sig = &batch.sigmas[ri * n..(ri + 1) * n];
            let mut optical_depth = 0.0;
            let mut accumulated = 0.0;
            let pixel = (row * width) + ri;
            let out = &mut map.data[pixel * c..(pixel + 1) * c];
            for i in 0..n {
                optical_depth += sig[i] * delta;
                let t_next = (-optical_depth).exp();
                let mut wgt = (1.0 - t_next) - accumulated;
                if wgt < 0.0 {
                    wgt = 0.0;
                }
                accumulated += wgt;
                if wgt != 0.0 {
                    let feat = &batch.features[(ri * n + i) * c..(ri * n + i + 1) * c];
                    for ch in 0..c {
                        out[ch] += wgt * feat[ch];
                    }
                }
                if let Some(cache) = cache.as_mut() {
                    cache.weights[pixel * n + i] = wgt;
                    cache.t_next[pixel * n + i] = t_next;
                }
            }
        }
        if let Some(cache) = cache.as_mut() {
            cache.batches.push(batch);
        }
        row += rows_here;
    }
    Ok((map, cache))
}

/// Backpropagate dL/d(feature map) through integration and the field.
/// Returns the style gradient and, when requested, field parameter grads.
pub fn render_backward(
    bundle: &FieldBundle,
    cache: &RenderCache,
    d_map: &FeatureMap,
    w: &StyleLatent,
    want_params: bool,
) -> Result<FieldGrads> {
    let (h, wd, n) = (cache.height, cache.width, cache.num_samples);
    let c = bundle.dims.feature_channels;
    if d_map.height != h || d_map.width != wd || d_map.channels != c {
        return Err(Error::shape(
            "render_backward",
            format!("{h}x{wd}x{c}"),
            format!("{}x{}x{}", d_map.height, d_map.width, d_map.channels),
        ));
    }
    let mut dw_total = vec![0.0; bundle.dims.latent];
    let mut dparams_total: Option<crate::autodiff::NamedTensors> = None;
    let mut row = 0;
    for batch in &cache.batches {
        let rows_here = cache.chunk_rows.min(h - row);
        let rays_here = rows_here * wd;
        let mut d_features = vec![0.0; rays_here * n * c];
        let mut d_sigmas = vec![0.0; rays_here * n];
        for ri in 0..rays_here {
            let pixel = row * wd + ri;
            let d_out = d_map.at(pixel / wd, pixel % wd);
            integrate_backward(
                &batch.features[ri * n * c..(ri + 1) * n * c],
                &cache.weights[pixel * n..(pixel + 1) * n],
                &cache.t_next[pixel * n..(pixel + 1) * n],
                cache.delta,
                d_out,
                &mut d_features[ri * n * c..(ri + 1) * n * c],
                &mut d_sigmas[ri * n..(ri + 1) * n],
            );
        }
        let grads = field_backward(bundle, batch, &d_features, &d_sigmas, &w.w, want_params)?;
        for (a, b) in dw_total.iter_mut().zip(&grads.dw) {
            *a += b;
        }
        if want_params {
            let g = grads.dparams.expect("params requested");
            match dparams_total.as_mut() {
                None => dparams_total = Some(g),
                Some(total) => {
                    for (name, tensor) in g {
                        let slot = total.get_mut(&name).expect("same parameter set per chunk");
                        for (a, b) in slot.data_mut().iter_mut().zip(tensor.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        row += rows_here;
    }
    Ok(FieldGrads { dw: dw_total, dparams: dparams_total })
}

// ---------------------------------------------------------------------------
// Upsampler
// ---------------------------------------------------------------------------

/// Activations kept for the upsampler backward pass.
pub struct UpsampleCache {
    scale: usize,
    in_h: usize,
    in_w: usize,
    bilinear: Vec<f64>,
    raw: [Vec<f64>; 3],   // conv outputs before gain/bias
    act: [Vec<f64>; 3],   // after gain/bias (+ leaky for layers 0,1)
    gains: [Vec<f64>; 3],
}

fn conv_layer_names(layer: usize) -> (String, String, String) {
    let l = layer + 1;
    (format!("up.c{l}.w"), format!("up.c{l}.b"), format!("up.c{l}.m"))
}

/// Bilinear upsample by `scale` then a three-layer 3x3 convolution head with
/// per-output-channel style gains, mapping C to RGB; output clamped to
/// [0,1]. With the identity head this is exactly the bilinear upsampling of
/// the first three channels.
pub fn upsample(
    bundle: &FieldBundle,
    feature_map: &FeatureMap,
    w: &StyleLatent,
    scale: usize,
) -> Result<FeatureMap> {
    upsample_impl(bundle, feature_map, w, scale, false).map(|(m, _)| m)
}

pub fn upsample_cached(
    bundle: &FieldBundle,
    feature_map: &FeatureMap,
    w: &StyleLatent,
    scale: usize,
) -> Result<(FeatureMap, UpsampleCache)> {
    let (m, c) = upsample_impl(bundle, feature_map, w, scale, true)?;
    Ok((m, c.expect("cache requested")))
}

fn upsample_impl(
    bundle: &FieldBundle,
    feature_map: &FeatureMap,
    w: &StyleLatent,
    scale: usize,
    keep_cache: bool,
) -> Result<(FeatureMap, Option<UpsampleCache>)> {
    if feature_map.channels < 3 {
        return Err(Error::invalid("upsample needs at least 3 feature channels"));
    }
    if scale == 0 {
        return Err(Error::invalid("scale must be >= 1"));
    }
    let (h, wd, c) = (feature_map.height, feature_map.width, feature_map.channels);
    let (hs, ws) = (h * scale, wd * scale);

    let bilinear = bilinear_upsample(&feature_map.data, h, wd, c, scale);

    let mut act_in = bilinear.clone();
    let mut cin = c;
    let mut raws: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut gains_all: Vec<Vec<f64>> = Vec::with_capacity(3);
    for layer in 0..3 {
        let (wn, bn, mn) = conv_layer_names(layer);
        let kernel = &bundle.params[&wn];
        let cout = kernel.shape()[3];
        let raw = conv3x3(&act_in, hs, ws, cin, cout, kernel.data());
        let gains = style_gains(&bundle.params[&mn], &w.w, cout);
        let bias = bundle.params[&bn].data();
        let mut out = vec![0.0; hs * ws * cout];
        for px in 0..hs * ws {
            for co in 0..cout {
                let v = gains[co] * raw[px * cout + co] + bias[co];
                out[px * cout + co] = if layer < 2 {
                    leaky(v)
                } else {
                    v.clamp(0.0, 1.0)
                };
            }
        }
        raws.push(raw);
        gains_all.push(gains);
        if layer < 2 {
            acts.push(out.clone());
            act_in = out;
        } else {
            acts.push(out.clone());
            act_in = out;
        }
        cin = cout;
    }
    let image = FeatureMap::new(hs, ws, 3, act_in)?;
    let cache = keep_cache.then(|| UpsampleCache {
        scale,
        in_h: h,
        in_w: wd,
        bilinear,
        raw: [raws.remove(0), raws.remove(0), raws.remove(0)],
        act: [acts.remove(0), acts.remove(0), acts.remove(0)],
        gains: [gains_all.remove(0), gains_all.remove(0), gains_all.remove(0)],
    });
    Ok((image, cache))
}

fn style_gains(modulation: &crate::autodiff::Tensor, w: &[f64], cout: usize) -> Vec<f64> {
    let mut gains = vec![1.0; cout];
    let m = modulation.data();
    for (i, &wv) in w.iter().enumerate() {
        if wv != 0.0 {
            for co in 0..cout {
                gains[co] += wv * m[i * cout + co];
            }
        }
    }
    gains
}

/// Gradients from the upsampler backward pass.
pub struct UpsampleGrads {
    pub d_feature_map: FeatureMap,
    pub dw: Vec<f64>,
    pub dparams: Option<crate::autodiff::NamedTensors>,
}

/// Backpropagate dL/d(image) through the head and the bilinear upsampling.
pub fn upsample_backward(
    bundle: &FieldBundle,
    cache: &UpsampleCache,
    d_image: &FeatureMap,
    w: &StyleLatent,
    want_params: bool,
) -> Result<UpsampleGrads> {
    let (h, wd) = (cache.in_h, cache.in_w);
    let (hs, ws) = (h * cache.scale, wd * cache.scale);
    let c0 = bundle.dims.feature_channels;
    let mut dparams = want_params.then(crate::autodiff::NamedTensors::new);
    let mut dw = vec![0.0; bundle.dims.latent];

    let mut d_out = d_image.data.clone();
    for layer in (0..3).rev() {
        let (wn, bn, mn) = conv_layer_names(layer);
        let kernel = &bundle.params[&wn];
        let cout = kernel.shape()[3];
        let cin = kernel.shape()[2];
        let raw = &cache.raw[layer];
        let gains = &cache.gains[layer];
        let bias = bundle.params[&bn].data();
        // Through the activation into (gain * raw + bias).
        let mut d_lin = d_out;
        if layer < 2 {
            for (g, &a) in d_lin.iter_mut().zip(&cache.act[layer]) {
                *g *= leaky_grad_from_output(a);
            }
        } else {
            for (i, g) in d_lin.iter_mut().enumerate() {
                let pre = gains[i % cout] * raw[i] + bias[i % cout];
                if !(0.0..=1.0).contains(&pre) {
                    *g = 0.0;
                }
            }
        }
        // Gain, bias, and modulation gradients.
        if want_params || true {
            let mut d_gain = vec![0.0; cout];
            let mut d_bias = vec![0.0; cout];
            for px in 0..hs * ws {
                for co in 0..cout {
                    let g = d_lin[px * cout + co];
                    d_gain[co] += g * raw[px * cout + co];
                    d_bias[co] += g;
                }
            }
            // dw through gains: gain_c = 1 + sum_i w_i m[i][c].
            let m = bundle.params[&mn].data();
            for (i, dwi) in dw.iter_mut().enumerate() {
                let mut acc = 0.0;
                for co in 0..cout {
                    acc += m[i * cout + co] * d_gain[co];
                }
                *dwi += acc;
            }
            if let Some(dp) = dparams.as_mut() {
                let mut dm = vec![0.0; w.w.len() * cout];
                for (i, &wv) in w.w.iter().enumerate() {
                    for co in 0..cout {
                        dm[i * cout + co] = wv * d_gain[co];
                    }
                }
                dp.insert(mn, crate::autodiff::Tensor::new(vec![w.w.len(), cout], dm)?);
                dp.insert(bn, crate::autodiff::Tensor::vector(d_bias));
            }
        }
        // Into the raw conv output.
        let mut d_raw = d_lin;
        for px in 0..hs * ws {
            for co in 0..cout {
                d_raw[px * cout + co] *= gains[co];
            }
        }
        // Kernel gradient and input gradient.
        let input = if layer == 0 { &cache.bilinear } else { &cache.act[layer - 1] };
        if let Some(dp) = dparams.as_mut() {
            let dk = conv3x3_kernel_grad(input, hs, ws, cin, cout, &d_raw);
            dp.insert(wn.clone(), crate::autodiff::Tensor::new(vec![3, 3, cin, cout], dk)?);
        }
        d_out = conv3x3_input_grad(kernel.data(), hs, ws, cin, cout, &d_raw);
    }
    // Adjoint of the bilinear upsampling.
    let d_features = bilinear_upsample_adjoint(&d_out, h, wd, c0, cache.scale);
    Ok(UpsampleGrads {
        d_feature_map: FeatureMap::new(h, wd, c0, d_features)?,
        dw,
        dparams,
    })
}

// --- conv and bilinear kernels ---

fn conv3x3(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    out.par_chunks_mut(w * cout).enumerate().for_each(|(y, row_out)| {
        for x in 0..w {
            let o = &mut row_out[x * cout..(x + 1) * cout];
            for ky in 0..3usize {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_base = ((yy as usize) * w + xx as usize) * cin;
                    let k_base = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[in_base + ci];
                        if v != 0.0 {
                            let ks = &kernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                            for (oo, &kv) in o.iter_mut().zip(ks) {
                                *oo += v * kv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv3x3_kernel_grad(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    d_raw: &[f64],
) -> Vec<f64> {
    let mut dk = vec![0.0; 9 * cin * cout];
    for y in 0..h {
        for x in 0..w {
            let g_base = (y * w + x) * cout;
            for ky in 0..3usize {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_base = ((yy as usize) * w + xx as usize) * cin;
                    let k_base = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[in_base + ci];
                        if v != 0.0 {
                            let slot = &mut dk[k_base + ci * cout..k_base + (ci + 1) * cout];
                            for (s, gd) in slot.iter_mut().zip(&d_raw[g_base..g_base + cout]) {
                                *s += v * gd;
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

fn conv3x3_input_grad(
    kernel: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    d_raw: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; h * w * cin];
    // d_in[y'][x'][ci] collects kernel-weighted output grads; iterate output
    // pixels in fixed order for determinism.
    for y in 0..h {
        for x in 0..w {
            let g = &d_raw[(y * w + x) * cout..(y * w + x + 1) * cout];
            for ky in 0..3usize {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_base = ((yy as usize) * w + xx as usize) * cin;
                    let k_base = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let ks = &kernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for (kv, gv) in ks.iter().zip(g) {
                            acc += kv * gv;
                        }
                        dx[in_base + ci] += acc;
                    }
                }
            }
        }
    }
    dx
}

fn bilinear_upsample(input: &[f64], h: usize, w: usize, c: usize, scale: usize) -> Vec<f64> {
    let (hs, ws) = (h * scale, w * scale);
    let mut out = vec![0.0; hs * ws * c];
    out.par_chunks_mut(ws * c).enumerate().for_each(|(yo, row)| {
        let sy = (yo as f64 + 0.5) / scale as f64 - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1i = ((y0 as isize) + 1).clamp(0, h as isize - 1) as usize;
        for xo in 0..ws {
            let sx = (xo as f64 + 0.5) / scale as f64 - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1i = ((x0 as isize) + 1).clamp(0, w as isize - 1) as usize;
            let o = &mut row[xo * c..(xo + 1) * c];
            for ch in 0..c {
                let v00 = input[(y0i * w + x0i) * c + ch];
                let v01 = input[(y0i * w + x1i) * c + ch];
                let v10 = input[(y1i * w + x0i) * c + ch];
                let v11 = input[(y1i * w + x1i) * c + ch];
                o[ch] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    });
    out
}

fn bilinear_upsample_adjoint(
    d_out: &[f64],
    h: usize,
    w: usize,
    c: usize,
    scale: usize,
) -> Vec<f64> {
    let (hs, ws) = (h * scale, w * scale);
    let mut dx = vec![0.0; h * w * c];
    for yo in 0..hs {
        let sy = (yo as f64 + 0.5) / scale as f64 - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1i = ((y0 as isize) + 1).clamp(0, h as isize - 1) as usize;
        for xo in 0..ws {
            let sx = (xo as f64 + 0.5) / scale as f64 - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1i = ((x0 as isize) + 1).clamp(0, w as isize - 1) as usize;
            let g = &d_out[(yo * ws + xo) * c..(yo * ws + xo + 1) * c];
            for ch in 0..c {
                dx[(y0i * w + x0i) * c + ch] += g[ch] * (1.0 - fy) * (1.0 - fx);
                dx[(y0i * w + x1i) * c + ch] += g[ch] * (1.0 - fy) * fx;
                dx[(y1i * w + x0i) * c + ch] += g[ch] * fy * (1.0 - fx);
                dx[(y1i * w + x1i) * c + ch] += g[ch] * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{
        init_bundle, map_latent, query_field, set_identity_upsampler, EncodingConfig, FieldDims,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle() -> FieldBundle {
        init_bundle(5, FieldDims::default(), EncodingConfig::default())
    }

    fn style(bundle: &FieldBundle) -> StyleLatent {
        map_latent(bundle, &vec![0.2; bundle.dims.latent_in]).unwrap()
    }

    #[test]
    fn center_pixel_ray_points_at_look_at() {
        let pose = CameraPose { yaw: 0.4, pitch: -0.2, ..Default::default() };
        let rays = generate_rays(&pose, 5, 5).unwrap();
        let center = &rays[2 * 5 + 2];
        let expected = v_normalize(v_sub(pose.look_at, pose.eye()));
        for c in 0..3 {
            assert!((center.dir[c] - expected[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn all_ray_directions_unit_norm() {
        let pose = CameraPose { yaw: 1.0, pitch: 0.3, ..Default::default() };
        for ray in generate_rays(&pose, 7, 9).unwrap() {
            let n = (ray.dir[0].powi(2) + ray.dir[1].powi(2) + ray.dir[2].powi(2)).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_yaw_reflects_rays() {
        // yaw + pi (pitch 0, look_at origin) negates the eye and reverses
        // each ray against its vertical mirror: dir'(i, j) = -dir(i, H-1-j).
        let (h, w) = (6, 8);
        let pose = CameraPose { yaw: 0.35, ..Default::default() };
        let flipped = CameraPose { yaw: 0.35 + std::f64::consts::PI, ..Default::default() };
        let a = generate_rays(&pose, h, w).unwrap();
        let b = generate_rays(&flipped, h, w).unwrap();
        for c in 0..3 {
            assert!((b[0].origin[c] + a[0].origin[c]).abs() < 1e-12);
        }
        for j in 0..h {
            for i in 0..w {
                let da = a[(h - 1 - j) * w + i].dir;
                let db = b[j * w + i].dir;
                for c in 0..3 {
                    assert!((db[c] + da[c]).abs() < 1e-12, "mismatch at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn projection_inverts_ray_generation() {
        let pose = CameraPose { yaw: 0.25, pitch: 0.1, ..Default::default() };
        let (h, w) = (16, 16);
        let rays = generate_rays(&pose, h, w).unwrap();
        for (j, i) in [(0usize, 0usize), (3, 7), (15, 15), (8, 2)] {
            let ray = &rays[j * w + i];
            let point = v_add(ray.origin, v_scale(ray.dir, 1.7));
            let (px, py) = project_point(&pose, point, h, w).unwrap();
            assert!((px - i as f64).abs() < 1e-9, "px {px} vs {i}");
            assert!((py - j as f64).abs() < 1e-9, "py {py} vs {j}");
        }
        // A point behind the camera projects to None.
        let behind = v_add(pose.eye(), v_scale(v_sub(pose.eye(), pose.look_at), 1.0));
        assert!(project_point(&pose, behind, h, w).is_none());
    }

    #[test]
    fn sample_points_midpoints() {
        let ray = Ray { origin: [0.0; 3], dir: [0.0, 0.0, 1.0] };
        let cfg = SamplingConfig { num_samples: 2, t_near: 0.0, t_far: 1.0 };
        // t_near = 0 violates validate; use the documented scene defaults for
        // the exactness check instead.
        assert!(sample_points(&ray, &cfg).is_err());
        let cfg = SamplingConfig { num_samples: 2, t_near: 1.0, t_far: 2.0 };
        let (points, deltas) = sample_points(&ray, &cfg).unwrap();
        assert_eq!(points[0][2], 1.25);
        assert_eq!(points[1][2], 1.75);
        assert_eq!(deltas, vec![0.5, 0.5]);
        // Strictly increasing, deltas sum to the interval exactly.
        let cfg = SamplingConfig { num_samples: 7, t_near: 0.5, t_far: 3.5 };
        let (points, deltas) = sample_points(&ray, &cfg).unwrap();
        for i in 1..points.len() {
            assert!(points[i][2] > points[i - 1][2]);
        }
        let total: f64 = deltas.iter().sum();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn integrate_zero_density_gives_zero() {
        let features = vec![0.7; 4 * 2];
        let (out, opacity) = integrate(&features, &[0.0; 4], &[0.25; 4]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        assert_eq!(opacity, 0.0);
    }

    #[test]
    fn integrate_matches_homogeneous_analytic_solution() {
        let n = 256;
        let (sigma0, c0, len) = (1.7, 0.6, 2.0);
        let delta = len / n as f64;
        let features: Vec<f64> = vec![c0; n];
        let (out, opacity) = integrate(&features, &vec![sigma0; n], &vec![delta; n]).unwrap();
        let analytic = c0 * (1.0 - (-sigma0 * len).exp());
        assert!((out[0] - analytic).abs() < 1e-3, "{} vs {analytic}", out[0]);
        assert!((opacity - (1.0 - (-sigma0 * len).exp())).abs() < 1e-3);
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let features = vec![0.9, 0.1, 0.2, 0.3];
        let sigmas = vec![1e6, 1.0, 1.0, 1.0];
        let (out, opacity) = integrate(&features, &sigmas, &vec![0.1; 4]).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-6);
        assert!((opacity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        assert!(integrate(&[0.5, 0.5], &[0.1, -0.1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn weights_bounded_and_transmittance_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let n = 2 + (rng.gen::<u32>() % 63) as usize;
            let sigmas: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < 0.1 {
                        rng.gen::<f64>() * 1e6
                    } else {
                        rng.gen::<f64>() * 5.0
                    }
                })
                .collect();
            let deltas: Vec<f64> = (0..n).map(|_| 0.01 + rng.gen::<f64>() * 0.1).collect();
            let (weights, opacity) = integration_weights(&sigmas, &deltas).unwrap();
            let mut sum = 0.0;
            for &w in &weights {
                assert!(w >= 0.0);
                sum += w;
                assert!(sum <= 1.0, "running weight sum exceeded one: {sum}");
            }
            assert!(opacity <= 1.0);
            // Transmittance sequence non-increasing.
            let mut depth = 0.0;
            let mut last_t = 1.0;
            for i in 0..n {
                depth += sigmas[i] * deltas[i];
                let t = (-depth).exp();
                assert!(t <= last_t);
                last_t = t;
            }
        }
    }

    /// Straight-line single-threaded reference: per-pixel loop, per-sample
    /// single-point field queries, hand-written telescoped integration.
    fn reference_render(
        bundle: &FieldBundle,
        w: &StyleLatent,
        pose: &CameraPose,
        sampling: &SamplingConfig,
        h: usize,
        wd: usize,
    ) -> FeatureMap {
        let rays = generate_rays(pose, h, wd).unwrap();
        let c = bundle.dims.feature_channels;
        let mut map = FeatureMap::zeros(h, wd, c);
        let delta = sampling.delta();
        for (pi, ray) in rays.iter().enumerate() {
            let mut depth = 0.0;
            let mut accumulated = 0.0;
            for i in 0..sampling.num_samples {
                let t = sampling.t_near + (i as f64 + 0.5) * delta;
                let p = v_add(ray.origin, v_scale(ray.dir, t));
                let (feat, sigma) = query_field(bundle, p, ray.dir, w).unwrap();
                depth += sigma * delta;
                let t_next = (-depth).exp();
                let mut wgt = (1.0 - t_next) - accumulated;
                if wgt < 0.0 {
                    wgt = 0.0;
                }
                accumulated += wgt;
                for ch in 0..c {
                    map.data[pi * c + ch] += wgt * feat[ch];
                }
            }
        }
        map
    }

    #[test]
    fn render_matches_straight_line_reference() {
        let b = bundle();
        let w = style(&b);
        let pose = CameraPose::default();
        let sampling = SamplingConfig { num_samples: 8, ..Default::default() };
        let fast = render_feature_map(&b, &w, &pose, &sampling, 8, 8, None).unwrap();
        let slow = reference_render(&b, &w, &pose, &sampling, 8, 8);
        assert_eq!(fast.data, slow.data, "batched path must match the reference bitwise");
    }

    #[test]
    fn render_is_worker_count_invariant() {
        let b = bundle();
        let w = style(&b);
        let pose = CameraPose::default();
        let sampling = SamplingConfig { num_samples: 8, ..Default::default() };
        let render = || render_feature_map(&b, &w, &pose, &sampling, 16, 16, None).unwrap();
        let base = render();
        for threads in [1usize, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let map = pool.install(render);
            assert_eq!(map.data, base.data, "{threads}-thread render differs");
        }
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        let b = bundle();
        let w = style(&b);
        let pose = CameraPose::default();
        let sampling = SamplingConfig { num_samples: 4, ..Default::default() };
        let (h, wd) = (3, 3);
        let c = b.dims.feature_channels;
        // Loss = sum over map of fixed random projection R.
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let r_proj: Vec<f64> = (0..h * wd * c).map(|_| rng.gen::<f64>() - 0.5).collect();
        let loss = |map: &FeatureMap| -> f64 {
            map.data.iter().zip(&r_proj).map(|(a, b)| a * b).sum()
        };
        let (map, cache) =
            render_feature_map_cached(&b, &w, &pose, &sampling, h, wd, None).unwrap();
        let _ = loss(&map);
        let d_map = FeatureMap::new(h, wd, c, r_proj.clone()).unwrap();
        let grads = render_backward(&b, &cache, &d_map, &w, true).unwrap();

        // Style gradient check.
        for idx in [0usize, 13, 31] {
            let step = 1e-5;
            let mut wp = w.clone();
            wp.w[idx] += step;
            let mut wm = w.clone();
            wm.w[idx] -= step;
            let lp = loss(&render_feature_map(&b, &wp, &pose, &sampling, h, wd, None).unwrap());
            let lm = loss(&render_feature_map(&b, &wm, &pose, &sampling, h, wd, None).unwrap());
            let fd = (lp - lm) / (2.0 * step);
            let an = grads.dw[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            assert!(err < 1e-5, "dw[{idx}]: analytic {an} vs fd {fd}");
        }
        // Field parameter gradient check.
        let dparams = grads.dparams.unwrap();
        for name in ["field.w2h", "field.wd", "field.bf"] {
            let len = b.params[name].len();
            for probe in 0..3 {
                let idx = (probe * 37) % len;
                let step = 1e-5;
                let mut bp = b.clone();
                bp.params.get_mut(name).unwrap().data_mut()[idx] += step;
                let mut bm = b.clone();
                bm.params.get_mut(name).unwrap().data_mut()[idx] -= step;
                let lp =
                    loss(&render_feature_map(&bp, &w, &pose, &sampling, h, wd, None).unwrap());
                let lm =
                    loss(&render_feature_map(&bm, &w, &pose, &sampling, h, wd, None).unwrap());
                let fd = (lp - lm) / (2.0 * step);
                let an = dparams[name].data()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                assert!(err < 1e-5, "{name}[{idx}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn constant_feature_map_upsamples_to_constant_image() {
        let b = bundle();
        let w = style(&b);
        let c = b.dims.feature_channels;
        let map = FeatureMap::new(8, 8, c, vec![0.4; 8 * 8 * c]).unwrap();
        let img = upsample(&b, &map, &w, 2).unwrap();
        assert_eq!(img.height, 16);
        assert_eq!(img.width, 16);
        // Convolution of a constant is constant; the three zero-padded conv
        // layers only disturb a 3-pixel border.
        let center = img.at(8, 8).to_vec();
        for y in 3..13 {
            for x in 3..13 {
                for ch in 0..3 {
                    assert!((img.at(y, x)[ch] - center[ch]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identity_head_reproduces_bilinear_upsampling() {
        let mut b = bundle();
        set_identity_upsampler(&mut b);
        let w = style(&b);
        let c = b.dims.feature_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<f64> = (0..5 * 6 * c).map(|_| rng.gen::<f64>()).collect();
        let map = FeatureMap::new(5, 6, c, data).unwrap();
        let img = upsample(&b, &map, &w, 4).unwrap();
        let bil = bilinear_upsample(&map.data, 5, 6, c, 4);
        for y in 0..20 {
            for x in 0..24 {
                for ch in 0..3 {
                    let expected = bil[(y * 24 + x) * c + ch];
                    assert!(
                        (img.at(y, x)[ch] - expected).abs() < 1e-9,
                        "pixel ({y},{x},{ch})"
                    );
                }
            }
        }
    }

    #[test]
    fn upsample_gradients_match_finite_differences() {
        let b = bundle();
        let w = style(&b);
        let c = b.dims.feature_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..4 * 4 * c).map(|_| 0.2 + 0.6 * rng.gen::<f64>()).collect();
        let map = FeatureMap::new(4, 4, c, data).unwrap();
        let loss = |img: &FeatureMap| -> f64 { img.data.iter().sum::<f64>() / img.data.len() as f64 };
        let (img, cache) = upsample_cached(&b, &map, &w, 2).unwrap();
        let n_out = img.data.len();
        let d_img = FeatureMap::new(img.height, img.width, 3, vec![1.0 / n_out as f64; n_out]).unwrap();
        let grads = upsample_backward(&b, &cache, &d_img, &w, true).unwrap();
        let dparams = grads.dparams.as_ref().unwrap();
        for name in ["up.c1.w", "up.c2.b", "up.c3.m", "up.c2.w"] {
            let len = b.params[name].len();
            for probe in 0..3 {
                let idx = (probe * 53) % len;
                let step = 1e-5;
                let mut bp = b.clone();
                bp.params.get_mut(name).unwrap().data_mut()[idx] += step;
                let mut bm = b.clone();
                bm.params.get_mut(name).unwrap().data_mut()[idx] -= step;
                let lp = loss(&upsample(&bp, &map, &w, 2).unwrap());
                let lm = loss(&upsample(&bm, &map, &w, 2).unwrap());
                let fd = (lp - lm) / (2.0 * step);
                let an = dparams[name].data()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                assert!(err < 1e-5, "{name}[{idx}]: analytic {an} vs fd {fd}");
            }
        }
        // Feature-map gradient.
        for idx in [0usize, 17, 63] {
            let step = 1e-5;
            let mut mp = map.clone();
            mp.data[idx] += step;
            let mut mm = map.clone();
            mm.data[idx] -= step;
            let lp = loss(&upsample(&b, &mp, &w, 2).unwrap());
            let lm = loss(&upsample(&b, &mm, &w, 2).unwrap());
            let fd = (lp - lm) / (2.0 * step);
            let an = grads.d_feature_map.data[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            assert!(err < 1e-5, "d_feature[{idx}]: analytic {an} vs fd {fd}");
        }
        // Style gradient through the modulation gains.
        let mut b_mod = b.clone();
        // Give the modulation matrices nonzero entries so dw is nontrivial.
        let mut rng2 = ChaCha8Rng::seed_from_u64(12);
        for l in 1..=3 {
            let t = b_mod.params.get_mut(&format!("up.c{l}.m")).unwrap();
            for v in t.data_mut() {
                *v = 0.05 * (rng2.gen::<f64>() - 0.5);
            }
        }
        let (_, cache2) = upsample_cached(&b_mod, &map, &w, 2).unwrap();
        let grads2 = upsample_backward(&b_mod, &cache2, &d_img, &w, false).unwrap();
        for idx in [0usize, 9, 31] {
            let step = 1e-5;
            let mut wp = w.clone();
            wp.w[idx] += step;
            let mut wm = w.clone();
            wm.w[idx] -= step;
            let lp = loss(&upsample(&b_mod, &map, &wp, 2).unwrap());
            let lm = loss(&upsample(&b_mod, &map, &wm, 2).unwrap());
            let fd = (lp - lm) / (2.0 * step);
            let an = grads2.dw[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            assert!(err < 1e-5, "dw[{idx}]: analytic {an} vs fd {fd}");
        }
    }
}
