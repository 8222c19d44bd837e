//! Two-phase latent inversion (projection, then generator tuning) against a
//! target image, plus gradient-descent coefficient refinement.
//!
//! Projection optimizes only the style vector with the bundle frozen;
//! tuning optimizes the field and upsampler parameters with the style
//! vector and mapping network frozen. Both phases minimize plain image MSE
//! and return the best iterate seen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    adam_step, backward, forward, AdamConfig, AdamState, Graph, NamedTensors, NodeId, Tensor,
};
use crate::deform::FieldTransform;
use crate::error::{Error, Result};
use crate::face_model::{BlendshapeBasis, ShapeCoeffs};
use crate::field::{map_latent, tunable_param_names, FieldBundle, StyleLatent};
use crate::linalg::Vec3;
use crate::render::{
    render_backward, render_feature_map, render_feature_map_cached, upsample, upsample_backward,
    upsample_cached, CameraPose, FeatureMap, SamplingConfig,
};

/// Resolution, camera, and schedule for an inversion run.
#[derive(Debug, Clone)]
pub struct InversionConfig {
    pub height: usize,
    pub width: usize,
    pub scale: usize,
    pub sampling: SamplingConfig,
    pub pose: CameraPose,
    pub projection_steps: usize,
    pub tuning_steps: usize,
    pub projection_lr: f64,
    pub tuning_lr: f64,
    /// The projection initializer is the mean of this many mapped latents.
    pub latent_mean_samples: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            height: 64,
            width: 64,
            scale: 2,
            sampling: SamplingConfig { num_samples: 8, t_near: 0.5, t_far: 3.5 },
            pose: CameraPose::default(),
            projection_steps: 1000,
            tuning_steps: 1000,
            projection_lr: 1e-2,
            tuning_lr: 1e-4,
            latent_mean_samples: 1000,
            seed: 0,
        }
    }
}

/// Outcome of both phases.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub w_inv: StyleLatent,
    pub tuned_bundle: FieldBundle,
    pub projection_losses: Vec<f64>,
    pub tuning_losses: Vec<f64>,
}

fn image_mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.data.len() != b.data.len() {
        return Err(Error::shape("image_mse", a.data.len(), b.data.len()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        / a.data.len() as f64)
}

fn render_image(
    bundle: &FieldBundle,
    w: &StyleLatent,
    config: &InversionConfig,
) -> Result<FeatureMap> {
    let map = render_feature_map(
        bundle,
        w,
        &config.pose,
        &config.sampling,
        config.height,
        config.width,
        None,
    )?;
    upsample(bundle, &map, w, config.scale)
}

/// The mean of `n` mapped latents; the standard projection initializer.
pub fn mean_latent(bundle: &FieldBundle, n: usize, seed: u64) -> Result<StyleLatent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut mean = vec![0.0; bundle.dims.latent];
    for _ in 0..n.max(1) {
        let z: Vec<f64> = (0..bundle.dims.latent_in).map(|_| normal(&mut rng)).collect();
        let w = map_latent(bundle, &z)?;
        for (m, v) in mean.iter_mut().zip(&w.w) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n.max(1) as f64;
    }
    Ok(StyleLatent { w: mean })
}

/// Phase one: optimize the style vector against the target image with the
/// bundle frozen. Returns the best iterate and the per-step loss curve (the
/// final entry is the returned iterate's loss).
pub fn project_latent(
    bundle: &FieldBundle,
    target: &FeatureMap,
    config: &InversionConfig,
) -> Result<(StyleLatent, Vec<f64>)> {
    let mut w = mean_latent(bundle, config.latent_mean_samples, config.seed)?;
    let initial_loss = image_mse(&render_image(bundle, &w, config)?, target)?;
    let mut losses = vec![initial_loss];
    if config.projection_steps == 0 {
        return Ok((w, losses));
    }
    let mut best = (initial_loss, w.clone());
    let mut adam = AdamState::new(AdamConfig::default());
    let mut params = NamedTensors::new();
    params.insert("w".into(), Tensor::vector(w.w.clone()));
    for step in 0..config.projection_steps {
        let (map, rc) = render_feature_map_cached(
            bundle,
            &w,
            &config.pose,
            &config.sampling,
            config.height,
            config.width,
            None,
        )?;
        let (image, uc) = upsample_cached(bundle, &map, &w, config.scale)?;
        let loss = image_mse(&image, target)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "latent projection".into(), step });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, w.clone());
        }
        let n = image.data.len() as f64;
        let d_image = FeatureMap::new(
            image.height,
            image.width,
            3,
            image.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b) / n).collect(),
        )?;
        let ug = upsample_backward(bundle, &uc, &d_image, &w, false)?;
        let rg = render_backward(bundle, &rc, &ug.d_feature_map, &w, false)?;
        let dw: Vec<f64> = ug.dw.iter().zip(&rg.dw).map(|(a, b)| a + b).collect();
        let mut grads = NamedTensors::new();
        grads.insert("w".into(), Tensor::vector(dw));
        adam_step(&mut params, &grads, &mut adam, config.projection_lr)?;
        w.w.copy_from_slice(params["w"].data());
    }
    losses.push(best.0);
    Ok((best.1, losses))
}

/// Phase two: optimize the field and upsampler parameters with the style
/// vector frozen (the mapping network is untouched). Returns the best
/// iterate bundle and the loss curve.
pub fn tune_generator(
    bundle: &FieldBundle,
    w: &StyleLatent,
    target: &FeatureMap,
    config: &InversionConfig,
) -> Result<(FieldBundle, Vec<f64>)> {
    let mut tuned = bundle.clone();
    let initial_loss = image_mse(&render_image(&tuned, w, config)?, target)?;
    let mut losses = vec![initial_loss];
    if config.tuning_steps == 0 {
        return Ok((tuned, losses));
    }
    let tunable = tunable_param_names(bundle);
    let mut best = (initial_loss, tuned.params.clone());
    let mut adam = AdamState::new(AdamConfig::default());
    for step in 0..config.tuning_steps {
        let (map, rc) = render_feature_map_cached(
            &tuned,
            w,
            &config.pose,
            &config.sampling,
            config.height,
            config.width,
            None,
        )?;
        let (image, uc) = upsample_cached(&tuned, &map, w, config.scale)?;
        let loss = image_mse(&image, target)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "generator tuning".into(), step });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, tuned.params.clone());
        }
        let n = image.data.len() as f64;
        let d_image = FeatureMap::new(
            image.height,
            image.width,
            3,
            image.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b) / n).collect(),
        )?;
        let ug = upsample_backward(&tuned, &uc, &d_image, w, true)?;
        let rg = render_backward(&tuned, &rc, &ug.d_feature_map, w, true)?;
        let mut grads = rg.dparams.expect("field grads requested");
        for (name, tensor) in ug.dparams.expect("upsampler grads requested") {
            grads.insert(name, tensor);
        }
        // Restrict the update to the tunable subset.
        let mut subset = NamedTensors::new();
        for name in &tunable {
            if let Some(g) = grads.get(name) {
                subset.insert(name.clone(), g.clone());
            }
        }
        let mut trainable: NamedTensors = tunable
            .iter()
            .map(|n| (n.clone(), tuned.params[n].clone()))
            .collect();
        adam_step(&mut trainable, &subset, &mut adam, config.tuning_lr)?;
        for (name, tensor) in trainable {
            tuned.params.insert(name, tensor);
        }
    }
    losses.push(best.0);
    tuned.params = best.1;
    Ok((tuned, losses))
}

/// Run both phases.
pub fn invert(
    bundle: &FieldBundle,
    target: &FeatureMap,
    config: &InversionConfig,
) -> Result<InversionResult> {
    let (w_inv, projection_losses) = project_latent(bundle, target, config)?;
    let (tuned_bundle, tuning_losses) = tune_generator(bundle, &w_inv, target, config)?;
    Ok(InversionResult { w_inv, tuned_bundle, projection_losses, tuning_losses })
}

/// Write a loss curve as CSV (step, loss).
pub fn write_loss_curve(path: &std::path::Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Coefficient refinement
// ---------------------------------------------------------------------------

/// Camera-space landmark projection in pinhole units `(x/z, y/z)`; the
/// refinement graph reproduces this formula exactly.
pub fn project_landmarks_uv(pose: &CameraPose, points: &[Vec3]) -> Vec<[f64; 2]> {
    let (right, up, forward) = pose.basis();
    let eye = pose.eye();
    points
        .iter()
        .map(|p| {
            let rel = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
            let x = rel[0] * right[0] + rel[1] * right[1] + rel[2] * right[2];
            let y = rel[0] * up[0] + rel[1] * up[1] + rel[2] * up[2];
            let z = rel[0] * forward[0] + rel[1] * forward[1] + rel[2] * forward[2];
            [x / z, y / z]
        })
        .collect()
}

/// Initial guess and result type for coefficient refinement.
#[derive(Debug, Clone)]
pub struct CoeffsAndPose {
    pub coeffs: ShapeCoeffs,
    pub yaw: f64,
    pub pitch: f64,
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub steps: usize,
    pub lr: f64,
    /// Fixed camera parameters (radius, fov, look_at come from here; yaw and
    /// pitch are optimized).
    pub camera: CameraPose,
    /// Model-to-field transform applied to landmarks before projection.
    pub transform: FieldTransform,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 500,
            lr: 1e-2,
            camera: CameraPose::default(),
            transform: FieldTransform { scale: 1.0, offset: [0.0; 3] },
        }
    }
}

struct RefineGraph {
    graph: Graph,
    loss: NodeId,
}

fn build_refine_graph(
    basis: &BlendshapeBasis,
    target_uv: &[[f64; 2]],
    config: &RefineConfig,
) -> Result<RefineGraph> {
    let (k_id, k_exp) = (basis.k_id(), basis.k_exp());
    let l = basis.landmark_indices().len();
    if target_uv.len() != l {
        return Err(Error::shape("refine targets", l, target_uv.len()));
    }
    let t = config.transform;
    let mut g = Graph::new();
    let alpha = g.leaf("alpha", &[1, k_id])?;
    let beta = g.leaf("beta", &[1, k_exp])?;
    let yaw = g.leaf("yaw", &[1])?;
    let pitch = g.leaf("pitch", &[1])?;

    // Landmark positions in field space: linear in (alpha, beta).
    let mut a_id = vec![0.0; k_id * 3 * l];
    let mut a_exp = vec![0.0; k_exp * 3 * l];
    let mut mean_row = vec![0.0; 3 * l];
    for (slot, &vi) in basis.landmark_indices().iter().enumerate() {
        for c in 0..3 {
            mean_row[slot * 3 + c] = t.scale * basis.mean_shape()[vi * 3 + c] + t.offset[c];
            for ki in 0..k_id {
                a_id[ki * 3 * l + slot * 3 + c] = t.scale * basis.id_component(ki)[vi * 3 + c];
            }
            for ke in 0..k_exp {
                a_exp[ke * 3 * l + slot * 3 + c] = t.scale * basis.exp_component(ke)[vi * 3 + c];
            }
        }
    }
    let a_id_n = g.constant(Tensor::new(vec![k_id, 3 * l], a_id)?);
    let a_exp_n = g.constant(Tensor::new(vec![k_exp, 3 * l], a_exp)?);
    let mean_n = g.constant(Tensor::new(vec![1, 3 * l], mean_row)?);
    let lm_id = g.matmul(alpha, a_id_n)?;
    let lm_exp = g.matmul(beta, a_exp_n)?;
    let lm_sum = g.add(lm_id, lm_exp)?;
    let lm_flat = g.add(lm_sum, mean_n)?;
    let points = g.reshape(lm_flat, &[l, 3])?;

    // Camera frame from yaw/pitch (closed form, matching CameraPose::basis).
    let sy = g.sin(yaw);
    let cy = g.cos(yaw);
    let sp = g.sin(pitch);
    let cp = g.cos(pitch);
    let neg_sy = g.scale(sy, -1.0);
    let neg_sp = g.scale(sp, -1.0);
    let zero = g.constant(Tensor::scalar(0.0));
    // right = (cy, 0, -sy)
    // up = (-sp sy, cp, -sp cy)
    // forward = (-cp sy, -sp, -cp cy)
    let up_x = g.mul(neg_sp, sy)?;
    let up_z = g.mul(neg_sp, cy)?;
    let fwd_x0 = g.mul(cp, sy)?;
    let fwd_x = g.scale(fwd_x0, -1.0);
    let fwd_z0 = g.mul(cp, cy)?;
    let fwd_z = g.scale(fwd_z0, -1.0);
    // R^T columns are (right, up, forward); rows interleave components.
    let rt = g.concat(
        &[cy, up_x, fwd_x, zero, cp, neg_sp, neg_sy, up_z, fwd_z],
        0,
    )?;
    let rt_m = g.reshape(rt, &[3, 3])?;

    // eye = look_at + radius * (cp sy, sp, cp cy).
    let radius = config.camera.radius;
    let look = config.camera.look_at;
    let eye_x0 = g.mul(cp, sy)?;
    let eye_x1 = g.scale(eye_x0, radius);
    let look_x = g.constant(Tensor::scalar(look[0]));
    let eye_x = g.add(eye_x1, look_x)?;
    let eye_y1 = g.scale(sp, radius);
    let look_y = g.constant(Tensor::scalar(look[1]));
    let eye_y = g.add(eye_y1, look_y)?;
    let eye_z0 = g.mul(cp, cy)?;
    let eye_z1 = g.scale(eye_z0, radius);
    let look_z = g.constant(Tensor::scalar(look[2]));
    let eye_z = g.add(eye_z1, look_z)?;
    let eye_row0 = g.concat(&[eye_x, eye_y, eye_z], 0)?;
    let eye_row = g.reshape(eye_row0, &[1, 3])?;
    let eye_b = g.broadcast(eye_row, &[l, 3])?;
    let rel = g.sub(points, eye_b)?;
    let cam = g.matmul(rel, rt_m)?;
    let cam_x = g.slice(cam, 1, 0, 1)?;
    let cam_y = g.slice(cam, 1, 1, 1)?;
    let cam_z = g.slice(cam, 1, 2, 1)?;
    let u = g.div(cam_x, cam_z)?;
    let v = g.div(cam_y, cam_z)?;
    let uv = g.concat(&[u, v], 1)?;
    let mut target_flat = Vec::with_capacity(2 * l);
    for t_uv in target_uv {
        target_flat.push(t_uv[0]);
        target_flat.push(t_uv[1]);
    }
    // uv is (L x 2) with u in column 0; build the target in the same layout.
    let mut target_cols = vec![0.0; 2 * l];
    for i in 0..l {
        target_cols[i * 2] = target_flat[i * 2];
        target_cols[i * 2 + 1] = target_flat[i * 2 + 1];
    }
    let target_n = g.constant(Tensor::new(vec![l, 2], target_cols)?);
    let diff = g.sub(uv, target_n)?;
    let sq = g.square(diff);
    let loss = g.mean(sq);
    Ok(RefineGraph { graph: g, loss })
}

/// Gradient descent on squared projected-landmark error over
/// (alpha, beta, yaw, pitch). Returns the best iterate and its error.
pub fn refine_coefficients(
    basis: &BlendshapeBasis,
    initial: &CoeffsAndPose,
    target_uv: &[[f64; 2]],
    config: &RefineConfig,
) -> Result<(CoeffsAndPose, f64)> {
    let rg = build_refine_graph(basis, target_uv, config)?;
    let mut params = NamedTensors::new();
    params.insert(
        "alpha".into(),
        Tensor::new(vec![1, basis.k_id()], initial.coeffs.alpha.clone())?,
    );
    params.insert(
        "beta".into(),
        Tensor::new(vec![1, basis.k_exp()], initial.coeffs.beta.clone())?,
    );
    params.insert("yaw".into(), Tensor::scalar(initial.yaw));
    params.insert("pitch".into(), Tensor::scalar(initial.pitch));
    let eval = forward(&rg.graph, &params)?;
    let mut best_loss = eval.value(rg.loss).item();
    let mut best = params.clone();
    let mut adam = AdamState::new(AdamConfig::default());
    for step in 0..config.steps {
        let eval = forward(&rg.graph, &params)?;
        let loss = eval.value(rg.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "coefficient refinement".into(), step });
        }
        if loss < best_loss {
            best_loss = loss;
            best = params.clone();
        }
        let grads = backward(&rg.graph, &eval, rg.loss)?;
        adam_step(&mut params, &grads, &mut adam, config.lr)?;
    }
    // Final candidate after the last update.
    let eval = forward(&rg.graph, &params)?;
    let loss = eval.value(rg.loss).item();
    if loss < best_loss {
        best_loss = loss;
        best = params;
    }
    Ok((
        CoeffsAndPose {
            coeffs: ShapeCoeffs {
                alpha: best["alpha"].data().to_vec(),
                beta: best["beta"].data().to_vec(),
            },
            yaw: best["yaw"].item(),
            pitch: best["pitch"].item(),
        },
        best_loss,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::build_toy_basis;
    use crate::field::{init_bundle, EncodingConfig, FieldDims};

    fn small_config() -> InversionConfig {
        InversionConfig {
            height: 12,
            width: 12,
            scale: 2,
            sampling: SamplingConfig { num_samples: 4, t_near: 0.5, t_far: 3.5 },
            projection_steps: 30,
            tuning_steps: 20,
            latent_mean_samples: 64,
            ..Default::default()
        }
    }

    fn bundle() -> FieldBundle {
        init_bundle(41, FieldDims::default(), EncodingConfig::default())
    }

    #[test]
    fn zero_steps_return_initialization() {
        let b = bundle();
        let config = InversionConfig { projection_steps: 0, ..small_config() };
        let target = render_image(&b, &mean_latent(&b, 16, 1).unwrap(), &config).unwrap();
        let (w, losses) = project_latent(&b, &target, &config).unwrap();
        assert_eq!(w.w, mean_latent(&b, config.latent_mean_samples, config.seed).unwrap().w);
        assert_eq!(losses.len(), 1);

        let tune_config = InversionConfig { tuning_steps: 0, ..small_config() };
        let (tuned, tl) = tune_generator(&b, &w, &target, &tune_config).unwrap();
        assert_eq!(tuned.params, b.params);
        assert_eq!(tl.len(), 1);
    }

    #[test]
    fn projection_reduces_mse_and_freezes_bundle() {
        let b = bundle();
        let config = small_config();
        // Target rendered from a known latent distinct from the mean.
        let z: Vec<f64> = (0..32).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.4).collect();
        let w0 = map_latent(&b, &z).unwrap();
        let target = render_image(&b, &w0, &config).unwrap();
        let params_before = b.params.clone();
        let (w, losses) = project_latent(&b, &target, &config).unwrap();
        assert_eq!(b.params, params_before, "projection must not touch the bundle");
        assert!(losses.len() >= 2);
        let initial = losses[0];
        let last = *losses.last().unwrap();
        assert!(last < initial, "projection should reduce MSE: {initial} -> {last}");
        assert!(last <= losses[losses.len() - 2] + 1e-30, "best-iterate convention");
        // Returned latent differs from the init (it moved).
        assert_ne!(w.w, mean_latent(&b, config.latent_mean_samples, config.seed).unwrap().w);
    }

    #[test]
    fn tuning_improves_over_projection_and_freezes_mapping() {
        let b = bundle();
        let config = small_config();
        let z: Vec<f64> = (0..32).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.5).collect();
        let w0 = map_latent(&b, &z).unwrap();
        let target = render_image(&b, &w0, &config).unwrap();
        let (w, proj_losses) = project_latent(&b, &target, &config).unwrap();
        let post_projection = *proj_losses.last().unwrap();
        let (tuned, tl) = tune_generator(&b, &w, &target, &config).unwrap();
        let post_tuning = *tl.last().unwrap();
        assert!(
            post_tuning < post_projection,
            "tuning should strictly improve MSE: {post_projection} -> {post_tuning}"
        );
        // Mapping network is bit-identical; at least one tuned parameter moved.
        for name in ["map.w1", "map.b1", "map.w2", "map.b2"] {
            assert_eq!(tuned.params[name], b.params[name], "{name} must stay frozen");
        }
        assert_ne!(tuned.params["field.w1e"], b.params["field.w1e"]);
    }

    #[test]
    fn refine_is_stationary_at_ground_truth() {
        let basis = build_toy_basis(5, 300, 3, 3).unwrap();
        let truth = CoeffsAndPose {
            coeffs: ShapeCoeffs { alpha: vec![0.2, -0.1, 0.3], beta: vec![0.4, 0.0, -0.2] },
            yaw: 0.15,
            pitch: -0.05,
        };
        let config = RefineConfig::default();
        let pose = CameraPose { yaw: truth.yaw, pitch: truth.pitch, ..config.camera };
        let verts = crate::face_model::evaluate_shape(&basis, &truth.coeffs).unwrap();
        let lms = crate::face_model::extract_landmarks(&basis, &verts).unwrap();
        let target = project_landmarks_uv(&pose, &lms);
        let (refined, err) = refine_coefficients(&basis, &truth, &target, &config).unwrap();
        assert!(err < 1e-20, "zero residual at ground truth, got {err}");
        assert_eq!(refined.coeffs.alpha, truth.coeffs.alpha, "zero gradient leaves alpha");
        assert_eq!(refined.coeffs.beta, truth.coeffs.beta);
        assert_eq!(refined.yaw, truth.yaw);
    }

    #[test]
    fn refine_recovers_perturbed_initialization() {
        let basis = build_toy_basis(5, 300, 3, 3).unwrap();
        let truth = CoeffsAndPose {
            coeffs: ShapeCoeffs { alpha: vec![0.2, -0.1, 0.3], beta: vec![0.4, 0.0, -0.2] },
            yaw: 0.15,
            pitch: -0.05,
        };
        let config = RefineConfig { steps: 500, ..Default::default() };
        let pose = CameraPose { yaw: truth.yaw, pitch: truth.pitch, ..config.camera };
        let verts = crate::face_model::evaluate_shape(&basis, &truth.coeffs).unwrap();
        let lms = crate::face_model::extract_landmarks(&basis, &verts).unwrap();
        let target = project_landmarks_uv(&pose, &lms);
        // Perturb beta by norm 0.5 plus a slight pose offset.
        let mut init = truth.clone();
        init.coeffs.beta[0] += 0.3;
        init.coeffs.beta[1] -= 0.4;
        init.yaw += 0.05;
        let (refined, err) = refine_coefficients(&basis, &init, &target, &config).unwrap();
        assert!(err < 1e-8, "refinement residual {err}");
        for (r, t) in refined.coeffs.beta.iter().zip(&truth.coeffs.beta) {
            assert!((r - t).abs() < 1e-3, "beta {r} vs {t}");
        }
        assert!((refined.yaw - truth.yaw).abs() < 1e-3);
        assert!((refined.pitch - truth.pitch).abs() < 1e-3);
    }

    #[test]
    fn refine_error_is_monotone_under_best_iterate() {
        let basis = build_toy_basis(5, 300, 3, 3).unwrap();
        let truth = CoeffsAndPose {
            coeffs: ShapeCoeffs { alpha: vec![0.1, 0.0, 0.0], beta: vec![0.2, -0.1, 0.0] },
            yaw: 0.0,
            pitch: 0.0,
        };
        let config = RefineConfig { steps: 50, ..Default::default() };
        let pose = CameraPose { yaw: truth.yaw, pitch: truth.pitch, ..config.camera };
        let verts = crate::face_model::evaluate_shape(&basis, &truth.coeffs).unwrap();
        let lms = crate::face_model::extract_landmarks(&basis, &verts).unwrap();
        let target = project_landmarks_uv(&pose, &lms);
        let mut init = truth.clone();
        init.coeffs.beta[0] += 0.5;
        // Run twice with different step counts: more steps never yield a
        // worse best-iterate error.
        let (_, err_short) = refine_coefficients(&basis, &init, &target, &config).unwrap();
        let config_long = RefineConfig { steps: 200, ..config };
        let (_, err_long) = refine_coefficients(&basis, &init, &target, &config_long).unwrap();
        assert!(err_long <= err_short + 1e-30);
    }
}
