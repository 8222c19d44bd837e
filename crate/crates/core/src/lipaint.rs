//! Residual latent network producing expression-compatible style latents
//! for the mouth interior, trained self-supervised against generator
//! samples.
//!
//! Desk-scale latent-to-coefficient coupling: the expression a latent
//! "renders with" is defined through a fixed linear probe `w -> (alpha,
//! beta)` fitted once on sampled pairs. Training samples an identity latent,
//! reads its coefficients through the probe, perturbs the expression with
//! uniform augmentation, and asks the network for a residual latent whose
//! probed coefficients and landmarks match the perturbed targets. An
//! adversarial term renders the predicted latent through the field and
//! scores it with a small convolutional discriminator.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    adam_step, backward, backward_seeded, forward, save_tensors, AdamConfig, AdamState, Graph,
    NamedTensors, NodeId, Tensor,
};
use crate::error::{Error, Result};
use crate::face_model::{
    evaluate_shape, extract_landmarks, BlendshapeBasis, ShapeCoeffs,
};
use crate::field::{leaky, leaky_grad_from_output, map_latent, FieldBundle, StyleLatent};
use crate::linalg::{gemm, Vec3};
use crate::render::{
    render_backward, render_feature_map_cached, upsample_backward, upsample_cached, CameraPose,
    FeatureMap, SamplingConfig,
};

pub const LIPAINT_HIDDEN: usize = 128;

// ---------------------------------------------------------------------------
// Parameters and forward
// ---------------------------------------------------------------------------

/// Residual fully connected stack mapping `[beta_target, w]` to a latent
/// residual. The final layer starts at zero, so the initial map is the
/// identity on `w`.
#[derive(Debug, Clone)]
pub struct LipaintParams {
    pub params: NamedTensors,
    pub k_exp: usize,
    pub d_w: usize,
    pub hidden: usize,
}

pub fn init_lipaint(seed: u64, k_exp: usize, d_w: usize) -> LipaintParams {
    let hidden = LIPAINT_HIDDEN;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize, fan_in: usize| -> Tensor {
        let bound = (3.0 / fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound).collect();
        Tensor::new(vec![rows, cols], data).expect("sized")
    };
    let in_dim = k_exp + d_w;
    let mut params = NamedTensors::new();
    params.insert("lip.w1".into(), uniform(in_dim, hidden, in_dim));
    params.insert("lip.b1".into(), Tensor::zeros(&[hidden]));
    params.insert("lip.w2".into(), uniform(hidden, hidden, hidden));
    params.insert("lip.b2".into(), Tensor::zeros(&[hidden]));
    params.insert("lip.w3".into(), Tensor::zeros(&[hidden, d_w]));
    params.insert("lip.b3".into(), Tensor::zeros(&[d_w]));
    LipaintParams { params, k_exp, d_w, hidden }
}

/// `w_exp = w_id + residual(beta_target, w_id)`.
pub fn lipaint_forward(
    params: &LipaintParams,
    beta_target: &[f64],
    w_id: &StyleLatent,
) -> Result<StyleLatent> {
    if beta_target.len() != params.k_exp || w_id.w.len() != params.d_w {
        return Err(Error::shape(
            "lipaint_forward",
            format!("beta {} / w {}", params.k_exp, params.d_w),
            format!("beta {} / w {}", beta_target.len(), w_id.w.len()),
        ));
    }
    let in_dim = params.k_exp + params.d_w;
    let mut x = Vec::with_capacity(in_dim);
    x.extend_from_slice(beta_target);
    x.extend_from_slice(&w_id.w);
    let h = params.hidden;
    let mut h1 = vec![0.0; h];
    gemm(&mut h1, &x, params.params["lip.w1"].data(), 1, in_dim, h);
    for (v, b) in h1.iter_mut().zip(params.params["lip.b1"].data()) {
        *v = leaky(*v + b);
    }
    let mut h2 = vec![0.0; h];
    gemm(&mut h2, &h1, params.params["lip.w2"].data(), 1, h, h);
    for (v, b) in h2.iter_mut().zip(params.params["lip.b2"].data()) {
        *v = leaky(*v + b);
    }
    let mut residual = vec![0.0; params.d_w];
    gemm(&mut residual, &h2, params.params["lip.w3"].data(), 1, h, params.d_w);
    for (r, b) in residual.iter_mut().zip(params.params["lip.b3"].data()) {
        *r += b;
    }
    Ok(StyleLatent {
        w: w_id.w.iter().zip(&residual).map(|(a, b)| a + b).collect(),
    })
}

/// Pipeline naming for per-frame inference: the mouth latent for the current
/// audio expression, from the inverted identity latent.
pub fn infer_mouth_latent(
    params: &LipaintParams,
    beta_audio: &[f64],
    w_inv: &StyleLatent,
) -> Result<StyleLatent> {
    lipaint_forward(params, beta_audio, w_inv)
}

// ---------------------------------------------------------------------------
// Latent-to-coefficient probe
// ---------------------------------------------------------------------------

/// Fixed affine maps from latent space to identity/expression coefficients.
/// Matrices are stored (D_w x K) so `coeff = w * P + c` in row convention.
#[derive(Debug, Clone)]
pub struct CoeffProbe {
    pub d_w: usize,
    pub k_id: usize,
    pub k_exp: usize,
    pub p_alpha: Vec<f64>,
    pub c_alpha: Vec<f64>,
    pub p_beta: Vec<f64>,
    pub c_beta: Vec<f64>,
}

impl CoeffProbe {
    pub fn beta_of(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k_exp];
        gemm(&mut out, w, &self.p_beta, 1, self.d_w, self.k_exp);
        for (o, c) in out.iter_mut().zip(&self.c_beta) {
            *o += c;
        }
        out
    }

    pub fn alpha_of(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k_id];
        gemm(&mut out, w, &self.p_alpha, 1, self.d_w, self.k_id);
        for (o, c) in out.iter_mut().zip(&self.c_alpha) {
            *o += c;
        }
        out
    }

    /// Least-norm latent shift that moves the probed expression of `w_id`
    /// onto `beta_target`.
    pub fn latent_with_expression(&self, w_id: &[f64], beta_target: &[f64]) -> Result<Vec<f64>> {
        let current = self.beta_of(w_id);
        let u: Vec<f64> = beta_target.iter().zip(&current).map(|(t, c)| t - c).collect();
        let p = DMatrix::from_row_slice(self.d_w, self.k_exp, &self.p_beta);
        let ptp = p.transpose() * &p;
        let inv = ptp.try_inverse().ok_or_else(|| Error::RankDeficient {
            context: "probe latent solve".into(),
            rank: 0,
            requested: self.k_exp,
        })?;
        let u_m = DMatrix::from_row_slice(1, self.k_exp, &u);
        let delta = u_m * inv * p.transpose();
        Ok(w_id.iter().zip(delta.iter()).map(|(a, b)| a + b).collect())
    }
}

/// Fit the probe by least squares on sampled (latent, coefficient) pairs.
/// The generating coupling is a seeded linear map of the whitened latents,
/// so the fit recovers it exactly up to conditioning.
pub fn fit_probe(
    bundle: &FieldBundle,
    k_id: usize,
    k_exp: usize,
    seed: u64,
) -> Result<CoeffProbe> {
    let d_w = bundle.dims.latent;
    let n = 256usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut ws: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..bundle.dims.latent_in).map(|_| normal(&mut rng)).collect();
        ws.push(map_latent(bundle, &z)?.w);
    }
    // Whitening statistics.
    let mut mean = vec![0.0; d_w];
    for w in &ws {
        for (m, v) in mean.iter_mut().zip(w) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut std = vec![0.0; d_w];
    for w in &ws {
        for (s, (v, m)) in std.iter_mut().zip(w.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt().max(1e-9);
    }
    // Ground-truth coupling over whitened latents.
    let gain_beta = 2.0;
    let gain_alpha = 0.5;
    let b_beta: Vec<f64> =
        (0..d_w * k_exp).map(|_| gain_beta / (d_w as f64).sqrt() * normal(&mut rng)).collect();
    let b_alpha: Vec<f64> =
        (0..d_w * k_id).map(|_| gain_alpha / (d_w as f64).sqrt() * normal(&mut rng)).collect();
    let coeff_of = |w: &[f64], b: &[f64], k: usize| -> Vec<f64> {
        let mut out = vec![0.0; k];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..d_w {
                acc += (w[i] - mean[i]) / std[i] * b[i * k + j];
            }
            *o = acc;
        }
        out
    };
    // Least-squares fit of [P | c] on the sampled pairs.
    let mut design = DMatrix::zeros(n, d_w + 1);
    for (i, w) in ws.iter().enumerate() {
        for j in 0..d_w {
            design[(i, j)] = w[j];
        }
        design[(i, d_w)] = 1.0;
    }
    let svd = design.clone().svd(true, true);
    let fit = |targets: Vec<Vec<f64>>, k: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut t = DMatrix::zeros(n, k);
        for (i, row) in targets.iter().enumerate() {
            for j in 0..k {
                t[(i, j)] = row[j];
            }
        }
        let sol = svd
            .solve(&t, 1e-12)
            .map_err(|e| Error::invalid(format!("probe fit failed: {e}")))?;
        let mut p = vec![0.0; d_w * k];
        let mut c = vec![0.0; k];
        for i in 0..d_w {
            for j in 0..k {
                p[i * k + j] = sol[(i, j)];
            }
        }
        for j in 0..k {
            c[j] = sol[(d_w, j)];
        }
        Ok((p, c))
    };
    let beta_targets: Vec<Vec<f64>> = ws.iter().map(|w| coeff_of(w, &b_beta, k_exp)).collect();
    let alpha_targets: Vec<Vec<f64>> = ws.iter().map(|w| coeff_of(w, &b_alpha, k_id)).collect();
    let (p_beta, c_beta) = fit(beta_targets, k_exp)?;
    let (p_alpha, c_alpha) = fit(alpha_targets, k_id)?;
    Ok(CoeffProbe { d_w, k_id, k_exp, p_alpha, c_alpha, p_beta, c_beta })
}

// ---------------------------------------------------------------------------
// Training examples
// ---------------------------------------------------------------------------

/// One self-supervised example: a sampled identity latent, its probed
/// coefficients, and augmented pseudo-ground-truth targets.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub w_id: Vec<f64>,
    pub beta_source: Vec<f64>,
    pub beta_target: Vec<f64>,
    pub alpha_target: Vec<f64>,
    pub ldm_target: Vec<Vec3>,
}

/// Sample one example; the expression augmentation is uniform in
/// [-range, range] per component (range 1.0 in training).
pub fn sample_training_example_with_range(
    bundle: &FieldBundle,
    basis: &BlendshapeBasis,
    probe: &CoeffProbe,
    seed: u64,
    range: f64,
) -> Result<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let z: Vec<f64> = (0..bundle.dims.latent_in).map(|_| normal(&mut rng)).collect();
    let w_id = map_latent(bundle, &z)?.w;
    let beta_source = probe.beta_of(&w_id);
    let alpha_target = probe.alpha_of(&w_id);
    let beta_target: Vec<f64> = beta_source
        .iter()
        .map(|b| b + range * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    let coeffs = ShapeCoeffs { alpha: alpha_target.clone(), beta: beta_target.clone() };
    let verts = evaluate_shape(basis, &coeffs)?;
    let ldm_target = extract_landmarks(basis, &verts)?;
    Ok(TrainingExample { w_id, beta_source, beta_target, alpha_target, ldm_target })
}

pub fn sample_training_example(
    bundle: &FieldBundle,
    basis: &BlendshapeBasis,
    probe: &CoeffProbe,
    seed: u64,
) -> Result<TrainingExample> {
    sample_training_example_with_range(bundle, basis, probe, seed, 1.0)
}

// ---------------------------------------------------------------------------
// Analytic coefficient/landmark estimator
// ---------------------------------------------------------------------------

/// Least-squares fit of (alpha, beta) to observed landmark positions via the
/// linear landmark model; returns the coefficients and the landmarks they
/// reconstruct. Errors when the landmark system is rank deficient.
pub fn estimate_coeffs_and_landmarks(
    observed_landmarks: &[Vec3],
    basis: &BlendshapeBasis,
) -> Result<(ShapeCoeffs, Vec<Vec3>)> {
    let l = basis.landmark_indices().len();
    if observed_landmarks.len() != l {
        return Err(Error::shape("estimate landmarks", l, observed_landmarks.len()));
    }
    let (k_id, k_exp) = (basis.k_id(), basis.k_exp());
    let k = k_id + k_exp;
    let rows = 3 * l;
    let mut a = DMatrix::zeros(rows, k);
    for (slot, &vi) in basis.landmark_indices().iter().enumerate() {
        for c in 0..3 {
            for ki in 0..k_id {
                a[(slot * 3 + c, ki)] = basis.id_component(ki)[vi * 3 + c];
            }
            for ke in 0..k_exp {
                a[(slot * 3 + c, k_id + ke)] = basis.exp_component(ke)[vi * 3 + c];
            }
        }
    }
    let mut b = DMatrix::zeros(rows, 1);
    for (slot, &vi) in basis.landmark_indices().iter().enumerate() {
        for c in 0..3 {
            b[(slot * 3 + c, 0)] =
                observed_landmarks[slot][c] - basis.mean_shape()[vi * 3 + c];
        }
    }
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd.singular_values.iter().filter(|&&s| s > max_sv * 1e-10).count();
    if rank < k {
        return Err(Error::RankDeficient {
            context: "landmark coefficient estimation".into(),
            rank,
            requested: k,
        });
    }
    let sol = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::invalid(format!("landmark solve failed: {e}")))?;
    let alpha: Vec<f64> = (0..k_id).map(|i| sol[(i, 0)]).collect();
    let beta: Vec<f64> = (0..k_exp).map(|i| sol[(k_id + i, 0)]).collect();
    let coeffs = ShapeCoeffs { alpha, beta };
    let verts = evaluate_shape(basis, &coeffs)?;
    let ldm_hat = extract_landmarks(basis, &verts)?;
    Ok((coeffs, ldm_hat))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared L2 distance over landmarks.
pub fn loss_ldm(ldm_target: &[Vec3], ldm_out: &[Vec3]) -> Result<f64> {
    if ldm_target.len() != ldm_out.len() || ldm_target.is_empty() {
        return Err(Error::shape("loss_ldm", ldm_target.len(), ldm_out.len()));
    }
    let sum: f64 = ldm_target
        .iter()
        .zip(ldm_out)
        .map(|(t, o)| (0..3).map(|c| (t[c] - o[c]) * (t[c] - o[c])).sum::<f64>())
        .sum();
    Ok(sum / ldm_target.len() as f64)
}

/// Squared L2 over expression coefficients plus squared L2 over identity
/// coefficients (the identity term regularizes toward the source identity).
pub fn loss_3dmm(s_target: &ShapeCoeffs, s_hat: &ShapeCoeffs) -> Result<f64> {
    if s_target.alpha.len() != s_hat.alpha.len() || s_target.beta.len() != s_hat.beta.len() {
        return Err(Error::shape(
            "loss_3dmm",
            format!("{}+{}", s_target.alpha.len(), s_target.beta.len()),
            format!("{}+{}", s_hat.alpha.len(), s_hat.beta.len()),
        ));
    }
    let beta: f64 =
        s_target.beta.iter().zip(&s_hat.beta).map(|(a, b)| (a - b) * (a - b)).sum();
    let alpha: f64 =
        s_target.alpha.iter().zip(&s_hat.alpha).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(beta + alpha)
}

pub const GAN_CLAMP: f64 = 1e-6;

/// `-log D(image)` with the discriminator output clamped away from {0, 1}.
pub fn loss_gan(disc: &ToyDiscriminator, image: &FeatureMap) -> Result<f64> {
    let (out, _) = disc_forward(disc, image)?;
    Ok(-out.clamp(GAN_CLAMP, 1.0 - GAN_CLAMP).ln())
}

/// Weighted sum of the three terms; weights must be non-negative.
pub fn total_loss(l_ldm: f64, l_3dmm: f64, l_gan: f64, weights: (f64, f64, f64)) -> Result<f64> {
    let (w_ldm, w_3dmm, w_gan) = weights;
    if w_ldm < 0.0 || w_3dmm < 0.0 || w_gan < 0.0 {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    Ok(w_ldm * l_ldm + w_3dmm * l_3dmm + w_gan * l_gan)
}

// ---------------------------------------------------------------------------
// Toy discriminator
// ---------------------------------------------------------------------------

/// Small convolutional binary classifier over rendered RGB images: two
/// stride-2 convolutions, global mean pooling, and a linear head. The head
/// starts at zero, so an untrained discriminator outputs exactly 0.5.
#[derive(Debug, Clone)]
pub struct ToyDiscriminator {
    pub params: NamedTensors,
}

const DISC_C1: usize = 8;
const DISC_C2: usize = 16;

pub fn init_discriminator(seed: u64) -> ToyDiscriminator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |cin: usize, cout: usize| -> Tensor {
        let bound = (3.0 / (9 * cin) as f64).sqrt();
        let data = (0..9 * cin * cout).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound).collect();
        Tensor::new(vec![3, 3, cin, cout], data).expect("conv tensor")
    };
    let mut params = NamedTensors::new();
    params.insert("disc.c1.w".into(), conv(3, DISC_C1));
    params.insert("disc.c1.b".into(), Tensor::zeros(&[DISC_C1]));
    params.insert("disc.c2.w".into(), conv(DISC_C1, DISC_C2));
    params.insert("disc.c2.b".into(), Tensor::zeros(&[DISC_C2]));
    params.insert("disc.fc.w".into(), Tensor::zeros(&[DISC_C2, 1]));
    params.insert("disc.fc.b".into(), Tensor::zeros(&[1]));
    ToyDiscriminator { params }
}

pub struct DiscCache {
    h: usize,
    w: usize,
    input: Vec<f64>,
    act1: Vec<f64>,
    h1: usize,
    w1: usize,
    act2: Vec<f64>,
    h2: usize,
    w2: usize,
    pooled: Vec<f64>,
    pre_sigmoid: f64,
}

fn conv3x3_stride2(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel: &[f64],
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = vec![0.0; ho * wo * cout];
    for yo in 0..ho {
        for xo in 0..wo {
            let o = &mut out[(yo * wo + xo) * cout..(yo * wo + xo + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..3usize {
                let yy = (2 * yo) as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let xx = (2 * xo) as isize + kx as isize - 1;
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
    }
    (out, ho, wo)
}

/// Discriminator forward pass; output in (0,1).
pub fn disc_forward(disc: &ToyDiscriminator, image: &FeatureMap) -> Result<(f64, DiscCache)> {
    if image.channels != 3 {
        return Err(Error::shape("disc_forward channels", 3, image.channels));
    }
    let (h, w) = (image.height, image.width);
    let (mut a1, h1, w1) = conv3x3_stride2(
        &image.data,
        h,
        w,
        3,
        DISC_C1,
        disc.params["disc.c1.w"].data(),
        disc.params["disc.c1.b"].data(),
    );
    for v in a1.iter_mut() {
        *v = leaky(*v);
    }
    let (mut a2, h2, w2) = conv3x3_stride2(
        &a1,
        h1,
        w1,
        DISC_C1,
        DISC_C2,
        disc.params["disc.c2.w"].data(),
        disc.params["disc.c2.b"].data(),
    );
    for v in a2.iter_mut() {
        *v = leaky(*v);
    }
    let mut pooled = vec![0.0; DISC_C2];
    for px in 0..h2 * w2 {
        for c in 0..DISC_C2 {
            pooled[c] += a2[px * DISC_C2 + c];
        }
    }
    for p in pooled.iter_mut() {
        *p /= (h2 * w2) as f64;
    }
    let fc = disc.params["disc.fc.w"].data();
    let mut pre = disc.params["disc.fc.b"].data()[0];
    for c in 0..DISC_C2 {
        pre += pooled[c] * fc[c];
    }
    let out = crate::field::sigmoid(pre);
    Ok((
        out,
        DiscCache { h, w, input: image.data.clone(), act1: a1, h1, w1, act2: a2, h2, w2, pooled, pre_sigmoid: pre },
    ))
}

/// Backward through the discriminator: returns dL/d(image) and, when
/// requested, parameter gradients. `d_out` is dL/d(discriminator output).
pub fn disc_backward(
    disc: &ToyDiscriminator,
    cache: &DiscCache,
    d_out: f64,
    want_params: bool,
) -> Result<(FeatureMap, Option<NamedTensors>)> {
    let out = crate::field::sigmoid(cache.pre_sigmoid);
    let d_pre = d_out * out * (1.0 - out);
    let fc = disc.params["disc.fc.w"].data();
    let mut d_pooled = vec![0.0; DISC_C2];
    for c in 0..DISC_C2 {
        d_pooled[c] = d_pre * fc[c];
    }
    let inv_count = 1.0 / (cache.h2 * cache.w2) as f64;
    let mut d_a2 = vec![0.0; cache.act2.len()];
    for px in 0..cache.h2 * cache.w2 {
        for c in 0..DISC_C2 {
            d_a2[px * DISC_C2 + c] = d_pooled[c] * inv_count;
        }
    }
    for (g, &a) in d_a2.iter_mut().zip(&cache.act2) {
        *g *= leaky_grad_from_output(a);
    }
    let (d_a1_raw, dk2, db2) = conv3x3_stride2_backward(
        &cache.act1,
        cache.h1,
        cache.w1,
        DISC_C1,
        DISC_C2,
        disc.params["disc.c2.w"].data(),
        &d_a2,
        cache.h2,
        cache.w2,
    );
    let mut d_a1 = d_a1_raw;
    for (g, &a) in d_a1.iter_mut().zip(&cache.act1) {
        *g *= leaky_grad_from_output(a);
    }
    let (d_input, dk1, db1) = conv3x3_stride2_backward(
        &cache.input,
        cache.h,
        cache.w,
        3,
        DISC_C1,
        disc.params["disc.c1.w"].data(),
        &d_a1,
        cache.h1,
        cache.w1,
    );
    let dparams = if want_params {
        let mut g = NamedTensors::new();
        g.insert("disc.c1.w".into(), Tensor::new(vec![3, 3, 3, DISC_C1], dk1)?);
        g.insert("disc.c1.b".into(), Tensor::vector(db1));
        g.insert("disc.c2.w".into(), Tensor::new(vec![3, 3, DISC_C1, DISC_C2], dk2)?);
        g.insert("disc.c2.b".into(), Tensor::vector(db2));
        let mut dfc = vec![0.0; DISC_C2];
        for c in 0..DISC_C2 {
            dfc[c] = d_pre * cache.pooled[c];
        }
        g.insert("disc.fc.w".into(), Tensor::new(vec![DISC_C2, 1], dfc)?);
        g.insert("disc.fc.b".into(), Tensor::vector(vec![d_pre]));
        Some(g)
    } else {
        None
    };
    Ok((FeatureMap::new(cache.h, cache.w, 3, d_input)?, dparams))
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_stride2_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel: &[f64],
    d_raw: &[f64],
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_in = vec![0.0; h * w * cin];
    let mut dk = vec![0.0; 9 * cin * cout];
    let mut db = vec![0.0; cout];
    for yo in 0..ho {
        for xo in 0..wo {
            let g = &d_raw[(yo * wo + xo) * cout..(yo * wo + xo + 1) * cout];
            for (c, &gv) in g.iter().enumerate() {
                db[c] += gv;
            }
            for ky in 0..3usize {
                let yy = (2 * yo) as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let xx = (2 * xo) as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_base = ((yy as usize) * w + xx as usize) * cin;
                    let k_base = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[in_base + ci];
                        let ks = &kernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for (co, (&kv, &gv)) in ks.iter().zip(g).enumerate() {
                            acc += kv * gv;
                            dk[k_base + ci * cout + co] += v * gv;
                        }
                        d_in[in_base + ci] += acc;
                    }
                }
            }
        }
    }
    (d_in, dk, db)
}

// ---------------------------------------------------------------------------
// GAN rendering configuration
// ---------------------------------------------------------------------------

/// Tiny render used for the adversarial term and discriminator training.
#[derive(Debug, Clone, Copy)]
pub struct GanRenderConfig {
    pub height: usize,
    pub width: usize,
    pub scale: usize,
    pub sampling: SamplingConfig,
    pub pose: CameraPose,
}

impl Default for GanRenderConfig {
    fn default() -> Self {
        GanRenderConfig {
            height: 10,
            width: 10,
            scale: 2,
            sampling: SamplingConfig { num_samples: 8, t_near: 0.5, t_far: 3.5 },
            pose: CameraPose::default(),
        }
    }
}

fn render_gan_image(
    bundle: &FieldBundle,
    w: &StyleLatent,
    cfg: &GanRenderConfig,
) -> Result<FeatureMap> {
    let map = crate::render::render_feature_map(
        bundle,
        w,
        &cfg.pose,
        &cfg.sampling,
        cfg.height,
        cfg.width,
        None,
    )?;
    crate::render::upsample(bundle, &map, w, cfg.scale)
}

// ---------------------------------------------------------------------------
// Discriminator training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiscTrainConfig {
    pub pool_per_class: usize,
    pub heldout_per_class: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub gan: GanRenderConfig,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            pool_per_class: 48,
            heldout_per_class: 24,
            steps: 240,
            batch: 8,
            lr: 1e-3,
            seed: 73,
            gan: GanRenderConfig::default(),
        }
    }
}

/// Train the toy discriminator to separate renders of in-range expressions
/// (augmentation within [-1,1]) from renders with out-of-range expressions.
/// Returns the discriminator and its held-out accuracy.
pub fn train_toy_discriminator(
    bundle: &FieldBundle,
    probe: &CoeffProbe,
    config: &DiscTrainConfig,
) -> Result<(ToyDiscriminator, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let total = config.pool_per_class + config.heldout_per_class;
    let mut in_images = Vec::with_capacity(total);
    let mut out_images = Vec::with_capacity(total);
    for _ in 0..total {
        let z: Vec<f64> = (0..bundle.dims.latent_in).map(|_| normal(&mut rng)).collect();
        let w_id = map_latent(bundle, &z)?.w;
        let beta = probe.beta_of(&w_id);
        let beta_in: Vec<f64> = beta.iter().map(|b| b + 2.0 * rng.gen::<f64>() - 1.0).collect();
        let beta_out: Vec<f64> = beta
            .iter()
            .map(|b| {
                let mag = 1.5 + 1.5 * rng.gen::<f64>();
                let sign = if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 };
                b + sign * mag
            })
            .collect();
        let w_in = StyleLatent { w: probe.latent_with_expression(&w_id, &beta_in)? };
        let w_out = StyleLatent { w: probe.latent_with_expression(&w_id, &beta_out)? };
        in_images.push(render_gan_image(bundle, &w_in, &config.gan)?);
        out_images.push(render_gan_image(bundle, &w_out, &config.gan)?);
    }
    let mut disc = init_discriminator(config.seed ^ 0x5ab1);
    let mut adam = AdamState::new(AdamConfig::default());
    let half = config.batch / 2;
    for step in 0..config.steps {
        let mut grads_total = NamedTensors::new();
        let mut loss_total = 0.0;
        for b in 0..config.batch {
            let real = b < half;
            let pool = if real { &in_images } else { &out_images };
            let idx = ((step * config.batch + b) * 2654435761) % config.pool_per_class;
            let image = &pool[idx];
            let (out, cache) = disc_forward(&disc, image)?;
            let y = if real { 1.0 } else { 0.0 };
            let p = out.clamp(GAN_CLAMP, 1.0 - GAN_CLAMP);
            loss_total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            // d BCE / d out = (p - y) / (p (1 - p)).
            let d_out = (p - y) / (p * (1.0 - p));
            let (_, dparams) = disc_backward(&disc, &cache, d_out / config.batch as f64, true)?;
            accumulate_grads(&mut grads_total, dparams.expect("params requested"));
        }
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "discriminator training".into(), step });
        }
        adam_step(&mut disc.params, &grads_total, &mut adam, config.lr)?;
    }
    // Held-out accuracy.
    let mut correct = 0usize;
    let mut seen = 0usize;
    for i in config.pool_per_class..total {
        for (pool, label) in [(&in_images, true), (&out_images, false)] {
            let (out, _) = disc_forward(&disc, &pool[i])?;
            if (out > 0.5) == label {
                correct += 1;
            }
            seen += 1;
        }
    }
    Ok((disc, correct as f64 / seen as f64))
}

fn accumulate_grads(total: &mut NamedTensors, grads: NamedTensors) {
    for (name, tensor) in grads {
        match total.get_mut(&name) {
            Some(slot) => {
                for (a, b) in slot.data_mut().iter_mut().zip(tensor.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(name, tensor);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// LipaintNet training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LipaintTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_ldm: f64,
    pub lambda_3dmm: f64,
    pub lambda_gan: f64,
    pub seed: u64,
    pub heldout: usize,
    pub gan: GanRenderConfig,
}

impl Default for LipaintTrainConfig {
    fn default() -> Self {
        LipaintTrainConfig {
            steps: 2000,
            batch: 8,
            lr: 1e-5,
            lambda_ldm: 1.0,
            lambda_3dmm: 1.0,
            lambda_gan: 0.1,
            seed: 7,
            heldout: 64,
            gan: GanRenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub step: usize,
    pub l_ldm: f64,
    pub l_3dmm: f64,
    pub l_gan: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LipaintTrainReport {
    pub log: Vec<TrainLogRow>,
    /// Held-out L_ldm + L_3dmm before the first step and after the last.
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

struct TrainingGraph {
    graph: Graph,
    w_exp: NodeId,
    l_ldm: NodeId,
    l_3dmm: NodeId,
    total: NodeId,
}

/// The per-step computation: residual net, probe readout, landmark
/// reconstruction, and the two coefficient losses, batched as matrices.
fn build_training_graph(
    lip: &LipaintParams,
    probe: &CoeffProbe,
    basis: &BlendshapeBasis,
    batch: usize,
    lambda_ldm: f64,
    lambda_3dmm: f64,
) -> Result<TrainingGraph> {
    let (k_exp, d_w, hidden) = (lip.k_exp, lip.d_w, lip.hidden);
    let k_id = probe.k_id;
    let l = basis.landmark_indices().len();
    let mut g = Graph::new();
    let beta_t = g.leaf("beta_t", &[batch, k_exp])?;
    let w_id = g.leaf("w_id", &[batch, d_w])?;
    let alpha_t = g.leaf("alpha_t", &[batch, k_id])?;
    let ldm_t = g.leaf("ldm_t", &[batch, 3 * l])?;
    let w1 = g.leaf("lip.w1", &[k_exp + d_w, hidden])?;
    let b1 = g.leaf("lip.b1", &[hidden])?;
    let w2 = g.leaf("lip.w2", &[hidden, hidden])?;
    let b2 = g.leaf("lip.b2", &[hidden])?;
    let w3 = g.leaf("lip.w3", &[hidden, d_w])?;
    let b3 = g.leaf("lip.b3", &[d_w])?;

    let x = g.concat(&[beta_t, w_id], 1)?;
    let mm1 = g.matmul(x, w1)?;
    let b1b = g.broadcast(b1, &[batch, hidden])?;
    let pre1 = g.add(mm1, b1b)?;
    let a1 = g.leaky_relu(pre1, 0.2);
    let mm2 = g.matmul(a1, w2)?;
    let b2b = g.broadcast(b2, &[batch, hidden])?;
    let pre2 = g.add(mm2, b2b)?;
    let a2 = g.leaky_relu(pre2, 0.2);
    let mm3 = g.matmul(a2, w3)?;
    let b3b = g.broadcast(b3, &[batch, d_w])?;
    let residual = g.add(mm3, b3b)?;
    let w_exp = g.add(w_id, residual)?;

    // Probe readout.
    let p_beta = g.constant(Tensor::new(vec![d_w, k_exp], probe.p_beta.clone())?);
    let c_beta = g.constant(Tensor::new(vec![k_exp], probe.c_beta.clone())?);
    let c_beta_b = g.broadcast(c_beta, &[batch, k_exp])?;
    let beta_mm = g.matmul(w_exp, p_beta)?;
    let beta_hat = g.add(beta_mm, c_beta_b)?;
    let p_alpha = g.constant(Tensor::new(vec![d_w, k_id], probe.p_alpha.clone())?);
    let c_alpha = g.constant(Tensor::new(vec![k_id], probe.c_alpha.clone())?);
    let c_alpha_b = g.broadcast(c_alpha, &[batch, k_id])?;
    let alpha_mm = g.matmul(w_exp, p_alpha)?;
    let alpha_hat = g.add(alpha_mm, c_alpha_b)?;

    // Landmark reconstruction: mean + alpha_hat * A_id + beta_hat * A_exp.
    let mut a_id = vec![0.0; k_id * 3 * l];
    let mut a_exp = vec![0.0; k_exp * 3 * l];
    let mut mean_row = vec![0.0; 3 * l];
    for (slot, &vi) in basis.landmark_indices().iter().enumerate() {
        for c in 0..3 {
            mean_row[slot * 3 + c] = basis.mean_shape()[vi * 3 + c];
            for ki in 0..k_id {
                a_id[ki * 3 * l + slot * 3 + c] = basis.id_component(ki)[vi * 3 + c];
            }
            for ke in 0..k_exp {
                a_exp[ke * 3 * l + slot * 3 + c] = basis.exp_component(ke)[vi * 3 + c];
            }
        }
    }
    let a_id_n = g.constant(Tensor::new(vec![k_id, 3 * l], a_id)?);
    let a_exp_n = g.constant(Tensor::new(vec![k_exp, 3 * l], a_exp)?);
    let mean_n = g.constant(Tensor::new(vec![3 * l], mean_row)?);
    let mean_b = g.broadcast(mean_n, &[batch, 3 * l])?;
    let ldm_id = g.matmul(alpha_hat, a_id_n)?;
    let ldm_exp = g.matmul(beta_hat, a_exp_n)?;
    let ldm_lin = g.add(ldm_id, ldm_exp)?;
    let ldm_out = g.add(ldm_lin, mean_b)?;

    // Batch losses: per-example mean squared L2 over landmarks, averaged
    // over the batch, equals 3 * elementwise mean over the (batch x 3L)
    // difference; the coefficient losses are per-example sums averaged over
    // the batch.
    let ldm_diff = g.sub(ldm_t, ldm_out)?;
    let ldm_sq = g.square(ldm_diff);
    let ldm_mean = g.mean(ldm_sq);
    let l_ldm = g.scale(ldm_mean, 3.0);
    let beta_diff = g.sub(beta_t, beta_hat)?;
    let alpha_diff = g.sub(alpha_t, alpha_hat)?;
    let beta_sq = g.square(beta_diff);
    let beta_term = g.sum(beta_sq);
    let alpha_sq = g.square(alpha_diff);
    let alpha_term = g.sum(alpha_sq);
    let coeff_sum = g.add(beta_term, alpha_term)?;
    let l_3dmm = g.scale(coeff_sum, 1.0 / batch as f64);
    let l_ldm_w = g.scale(l_ldm, lambda_ldm);
    let l_3dmm_w = g.scale(l_3dmm, lambda_3dmm);
    let weighted = g.add(l_ldm_w, l_3dmm_w)?;
    Ok(TrainingGraph { graph: g, w_exp, l_ldm, l_3dmm, total: weighted })
}

fn bind_batch(
    lip: &LipaintParams,
    examples: &[TrainingExample],
    basis: &BlendshapeBasis,
) -> Result<NamedTensors> {
    let batch = examples.len();
    let (k_exp, d_w) = (lip.k_exp, lip.d_w);
    let k_id = examples[0].alpha_target.len();
    let l = basis.landmark_indices().len();
    let mut beta_t = Vec::with_capacity(batch * k_exp);
    let mut w_id = Vec::with_capacity(batch * d_w);
    let mut alpha_t = Vec::with_capacity(batch * k_id);
    let mut ldm_t = Vec::with_capacity(batch * 3 * l);
    for ex in examples {
        beta_t.extend_from_slice(&ex.beta_target);
        w_id.extend_from_slice(&ex.w_id);
        alpha_t.extend_from_slice(&ex.alpha_target);
        for lm in &ex.ldm_target {
            ldm_t.extend_from_slice(lm);
        }
    }
    let mut binds = lip.params.clone();
    binds.insert("beta_t".into(), Tensor::new(vec![batch, k_exp], beta_t)?);
    binds.insert("w_id".into(), Tensor::new(vec![batch, d_w], w_id)?);
    binds.insert("alpha_t".into(), Tensor::new(vec![batch, k_id], alpha_t)?);
    binds.insert("ldm_t".into(), Tensor::new(vec![batch, 3 * l], ldm_t)?);
    Ok(binds)
}

fn heldout_metric(
    tg: &TrainingGraph,
    lip: &LipaintParams,
    examples: &[TrainingExample],
    basis: &BlendshapeBasis,
) -> Result<f64> {
    let batch = examples.len();
    let mut total = 0.0;
    for chunk in examples.chunks(batch.min(8)) {
        if chunk.len() != 8 {
            // The graph is built for a fixed batch; pad by repeating.
            let mut padded = chunk.to_vec();
            while padded.len() < 8 {
                padded.push(chunk[padded.len() % chunk.len()].clone());
            }
            let binds = bind_batch(lip, &padded, basis)?;
            let eval = forward(&tg.graph, &binds)?;
            total += eval.value(tg.l_ldm).item() + eval.value(tg.l_3dmm).item();
        } else {
            let binds = bind_batch(lip, chunk, basis)?;
            let eval = forward(&tg.graph, &binds)?;
            total += eval.value(tg.l_ldm).item() + eval.value(tg.l_3dmm).item();
        }
    }
    Ok(total / examples.chunks(batch.min(8)).count() as f64)
}

/// Train LipaintNet. The bundle, basis, probe, and discriminator stay
/// frozen; only the residual network parameters move.
pub fn train_lipaint(
    bundle: &FieldBundle,
    basis: &BlendshapeBasis,
    probe: &CoeffProbe,
    disc: Option<&ToyDiscriminator>,
    config: &LipaintTrainConfig,
) -> Result<(LipaintParams, LipaintTrainReport)> {
    if config.lambda_gan > 0.0 && disc.is_none() {
        return Err(Error::invalid("lambda_gan > 0 requires a trained discriminator"));
    }
    let mut lip = init_lipaint(config.seed ^ 0x11b, probe.k_exp, bundle.dims.latent);
    let tg = build_training_graph(
        &lip,
        probe,
        basis,
        config.batch,
        config.lambda_ldm,
        config.lambda_3dmm,
    )?;
    // Held-out set with seeds disjoint from the training stream.
    let heldout: Vec<TrainingExample> = (0..config.heldout)
        .map(|i| {
            sample_training_example(bundle, basis, probe, config.seed ^ 0xdead_0000 ^ i as u64)
        })
        .collect::<Result<_>>()?;
    let heldout_initial = heldout_metric(&tg, &lip, &heldout, basis)?;

    let mut adam = AdamState::new(AdamConfig::default());
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let examples: Vec<TrainingExample> = (0..config.batch)
            .map(|i| {
                let seed = config
                    .seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add((step * config.batch + i) as u64);
                sample_training_example(bundle, basis, probe, seed)
            })
            .collect::<Result<_>>()?;
        let binds = bind_batch(&lip, &examples, basis)?;
        let eval = forward(&tg.graph, &binds)?;
        let l_ldm = eval.value(tg.l_ldm).item();
        let l_3dmm = eval.value(tg.l_3dmm).item();
        let mut grads = backward(&tg.graph, &eval, tg.total)?;

        // Adversarial term through the hand-written render path.
        let mut l_gan = 0.0;
        if config.lambda_gan > 0.0 {
            let disc = disc.expect("checked above");
            let w_exp_val = eval.value(tg.w_exp);
            let mut seed_grad = vec![0.0; config.batch * lip.d_w];
            for b in 0..config.batch {
                let w_row =
                    &w_exp_val.data()[b * lip.d_w..(b + 1) * lip.d_w];
                let latent = StyleLatent { w: w_row.to_vec() };
                let (map, rc) = render_feature_map_cached(
                    bundle,
                    &latent,
                    &config.gan.pose,
                    &config.gan.sampling,
                    config.gan.height,
                    config.gan.width,
                    None,
                )?;
                let (image, uc) = upsample_cached(bundle, &map, &latent, config.gan.scale)?;
                let (d_val, dcache) = disc_forward(disc, &image)?;
                let p = d_val.clamp(GAN_CLAMP, 1.0 - GAN_CLAMP);
                l_gan += -p.ln();
                // d(-ln p)/d(disc out); zero where the clamp binds.
                let d_out = if (GAN_CLAMP..=1.0 - GAN_CLAMP).contains(&d_val) {
                    -1.0 / p
                } else {
                    0.0
                };
                let (d_image, _) = disc_backward(disc, &dcache, d_out, false)?;
                let ug = upsample_backward(bundle, &uc, &d_image, &latent, false)?;
                let rg = render_backward(bundle, &rc, &ug.d_feature_map, &latent, false)?;
                let scale = config.lambda_gan / config.batch as f64;
                for j in 0..lip.d_w {
                    seed_grad[b * lip.d_w + j] = scale * (ug.dw[j] + rg.dw[j]);
                }
            }
            l_gan /= config.batch as f64;
            let seed =
                Tensor::new(vec![config.batch, lip.d_w], seed_grad)?;
            let gan_grads = backward_seeded(&tg.graph, &eval, tg.w_exp, &seed)?;
            merge_lip_grads(&mut grads, gan_grads);
        }

        let total = config.lambda_ldm * l_ldm
            + config.lambda_3dmm * l_3dmm
            + config.lambda_gan * l_gan;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "lipaint training".into(), step });
        }
        log.push(TrainLogRow { step, l_ldm, l_3dmm, l_gan, total });
        // Only the lip.* leaves are trainable.
        let lip_grads: NamedTensors =
            grads.iter().filter(|(k, _)| k.starts_with("lip.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        adam_step(&mut lip.params, &lip_grads, &mut adam, config.lr)?;
        let _ = &mut grads;
    }
    let heldout_final = heldout_metric(&tg, &lip, &heldout, basis)?;
    Ok((lip, LipaintTrainReport { log, heldout_initial, heldout_final }))
}

fn merge_lip_grads(total: &mut NamedTensors, extra: NamedTensors) {
    for (name, tensor) in extra {
        if !name.starts_with("lip.") {
            continue;
        }
        match total.get_mut(&name) {
            Some(slot) => {
                for (a, b) in slot.data_mut().iter_mut().zip(tensor.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(name, tensor);
            }
        }
    }
}

/// Write the training log as CSV (step, l_ldm, l_3dmm, l_gan, total).
pub fn write_training_log(path: &std::path::Path, report: &LipaintTrainReport) -> Result<()> {
    let mut out = String::from("step,l_ldm,l_3dmm,l_gan,total\n");
    for row in &report.log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.l_ldm, row.l_3dmm, row.l_gan, row.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Persist LipaintNet parameters in the shared checkpoint format.
pub fn save_lipaint(path: &std::path::Path, lip: &LipaintParams) -> Result<()> {
    save_tensors(path, &lip.params)
}

// ---------------------------------------------------------------------------
// Optional learned audio regressor
// ---------------------------------------------------------------------------

/// Distill the deterministic energy-to-jaw mapping into a small regressor
/// (the optional "learned" audio backend). Returns the parameter map used
/// by `audio::ExpressionBackend::Learned`.
pub fn train_audio_regressor(
    mel_config: &crate::audio::MelConfig,
    k_exp: usize,
    window_frames: usize,
    steps: usize,
    seed: u64,
) -> Result<NamedTensors> {
    let in_dim = window_frames * mel_config.num_bins;
    let hidden = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound1 = (3.0 / in_dim as f64).sqrt();
    let bound2 = (3.0 / hidden as f64).sqrt();
    let mut params = NamedTensors::new();
    params.insert(
        "audio2exp.w1".into(),
        Tensor::new(
            vec![in_dim, hidden],
            (0..in_dim * hidden).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound1).collect(),
        )?,
    );
    params.insert("audio2exp.b1".into(), Tensor::zeros(&[1, hidden]));
    params.insert(
        "audio2exp.w2".into(),
        Tensor::new(
            vec![hidden, k_exp],
            (0..hidden * k_exp).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound2).collect(),
        )?,
    );
    params.insert("audio2exp.b2".into(), Tensor::zeros(&[1, k_exp]));

    // Training pairs: synthetic windows of constant log-mel level, labeled
    // by the deterministic mapping. Training runs on inputs normalized to
    // roughly [-1, 1]; the affine normalization is folded into the first
    // layer afterwards so inference takes raw mel windows.
    let floor = mel_config.log_floor.ln();
    let center = floor / 2.0;
    let input_scale = -floor / 2.0;

    let mut g = Graph::new();
    let x = g.leaf("x", &[1, in_dim])?;
    let target = g.leaf("target", &[1, k_exp])?;
    let w1 = g.leaf("audio2exp.w1", &[in_dim, hidden])?;
    let b1 = g.leaf("audio2exp.b1", &[1, hidden])?;
    let w2 = g.leaf("audio2exp.w2", &[hidden, k_exp])?;
    let b2 = g.leaf("audio2exp.b2", &[1, k_exp])?;
    let mm1 = g.matmul(x, w1)?;
    let pre1 = g.add(mm1, b1)?;
    let a1 = g.leaky_relu(pre1, 0.2);
    let mm2 = g.matmul(a1, w2)?;
    let out = g.add(mm2, b2)?;
    let diff = g.sub(out, target)?;
    let sq = g.square(diff);
    let loss = g.mean(sq);

    let mut adam = AdamState::new(AdamConfig::default());
    for step in 0..steps {
        let level = floor + (0.0 - floor) * rng.gen::<f64>();
        let noise_amp = 0.3;
        let window: Vec<f64> = (0..in_dim)
            .map(|_| level + noise_amp * (rng.gen::<f64>() - 0.5))
            .collect();
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        let jaw = crate::audio::energy_to_jaw(mean, mel_config.log_floor, 1.0);
        let mut t = vec![0.0; k_exp];
        t[0] = jaw;
        let normalized: Vec<f64> = window.iter().map(|v| (v - center) / input_scale).collect();
        let mut binds = params.clone();
        binds.insert("x".into(), Tensor::new(vec![1, in_dim], normalized)?);
        binds.insert("target".into(), Tensor::new(vec![1, k_exp], t)?);
        let eval = forward(&g, &binds)?;
        if !eval.value(loss).item().is_finite() {
            return Err(Error::NonFiniteLoss { stage: "audio regressor".into(), step });
        }
        let grads = backward(&g, &eval, loss)?;
        let reg_grads: NamedTensors = grads
            .into_iter()
            .filter(|(k, _)| k.starts_with("audio2exp."))
            .collect();
        adam_step(&mut params, &reg_grads, &mut adam, 3e-3)?;
    }
    // Fold the input normalization into the first layer:
    // W1' = W1 / s, b1' = b1 - (c / s) * column_sums(W1).
    let w1_t = params.get_mut("audio2exp.w1").unwrap();
    let mut col_sums = vec![0.0; hidden];
    for i in 0..in_dim {
        for j in 0..hidden {
            col_sums[j] += w1_t.data()[i * hidden + j];
        }
    }
    for v in w1_t.data_mut() {
        *v /= input_scale;
    }
    let b1_t = params.get_mut("audio2exp.b1").unwrap();
    for (j, b) in b1_t.data_mut().iter_mut().enumerate() {
        *b -= center / input_scale * col_sums[j];
    }
    Ok(params)
}
