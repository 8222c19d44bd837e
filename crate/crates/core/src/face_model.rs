//! Linear blendshape face model: mean shape plus identity/expression PCA
//! bases over a procedurally generated, bilaterally symmetric head family.
//!
//! The generator produces a fixed-topology vertex set (ellipsoid cranium,
//! hinged jaw, and two lip rings), samples random parameterizations of it,
//! and runs snapshot PCA on the flattened vertex deviations. The sampling
//! distribution gives the jaw-opening knob the largest variance, so the
//! first expression component is a jaw-opening direction by construction.
//! Shapes evaluate as `mean + alpha * id_basis + beta * exp_basis`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{v_add, v_normalize, v_scale, v_sub, Vec3};

/// Landmark slot for the upper-lip center (see `landmark_indices` ordering).
pub const LM_UPPER_LIP: usize = 0;
/// Landmark slot for the lower-lip center.
pub const LM_LOWER_LIP: usize = 1;
/// Landmark slots for the mouth corners.
pub const LM_MOUTH_LEFT: usize = 2;
pub const LM_MOUTH_RIGHT: usize = 3;

const LIP_RING: usize = 24; // vertices per lip ring
const NUM_ID_KNOBS: usize = 12;
const NUM_EXP_KNOBS: usize = 10;

/// Mean shape plus PCA bases and the vertex index lists derived at
/// generation time.
#[derive(Debug, Clone)]
pub struct BlendshapeBasis {
    num_vertices: usize,
    k_id: usize,
    k_exp: usize,
    /// Flattened mean positions, length 3V (x,y,z per vertex).
    mean_shape: Vec<f64>,
    /// K_id rows of flattened displacement directions, each length 3V.
    id_basis: Vec<f64>,
    /// K_exp rows, same layout.
    exp_basis: Vec<f64>,
    landmark_indices: Vec<usize>,
    mouth_indices: Vec<usize>,
    bbox: (Vec3, Vec3),
}

/// Identity and expression weights for one shape instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoeffs {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ShapeCoeffs {
    pub fn zeros(k_id: usize, k_exp: usize) -> Self {
        ShapeCoeffs { alpha: vec![0.0; k_id], beta: vec![0.0; k_exp] }
    }
}

/// Evaluated vertex positions; shares the generating basis' vertex count.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexSet {
    pub positions: Vec<Vec3>,
}

impl BlendshapeBasis {
    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn k_id(&self) -> usize {
        self.k_id
    }

    pub fn k_exp(&self) -> usize {
        self.k_exp
    }

    pub fn mean_shape(&self) -> &[f64] {
        &self.mean_shape
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn mouth_indices(&self) -> &[usize] {
        &self.mouth_indices
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        self.bbox
    }

    /// Row `k` of the identity basis (flattened 3V displacement direction).
    pub fn id_component(&self, k: usize) -> &[f64] {
        &self.id_basis[k * 3 * self.num_vertices..(k + 1) * 3 * self.num_vertices]
    }

    pub fn exp_component(&self, k: usize) -> &[f64] {
        &self.exp_basis[k * 3 * self.num_vertices..(k + 1) * 3 * self.num_vertices]
    }

    pub fn mean_vertex_set(&self) -> VertexSet {
        VertexSet { positions: unflatten(&self.mean_shape) }
    }
}

fn unflatten(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

// ---------------------------------------------------------------------------
// Procedural head family
// ---------------------------------------------------------------------------

enum TemplateVertex {
    Skin(Vec3),    // unit direction on the sphere
    UpperLip(f64), // ring parameter in [0, pi]
    LowerLip(f64),
}

fn gaussian_bump(d2: f64, width: f64) -> f64 {
    (-d2 / (width * width)).exp()
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn dir_dist2(a: Vec3, b: Vec3) -> f64 {
    let d = v_sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn template(num_vertices: usize) -> Vec<TemplateVertex> {
    let mut verts = Vec::with_capacity(num_vertices);
    for i in 0..LIP_RING {
        let theta = std::f64::consts::PI * (i as f64 + 0.5) / LIP_RING as f64;
        verts.push(TemplateVertex::UpperLip(theta));
    }
    for i in 0..LIP_RING {
        let theta = std::f64::consts::PI * (i as f64 + 0.5) / LIP_RING as f64;
        verts.push(TemplateVertex::LowerLip(theta));
    }
    // Fibonacci sphere for the remaining skin vertices.
    let n = num_vertices - 2 * LIP_RING;
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64;
        verts.push(TemplateVertex::Skin([r * phi.cos(), y, r * phi.sin()]));
    }
    verts
}

/// Evaluate the parameterized head. `id` has `NUM_ID_KNOBS` entries and `ex`
/// has `NUM_EXP_KNOBS`; all knobs are bilaterally symmetric in x.
fn shape_vertex(tv: &TemplateVertex, id: &[f64], ex: &[f64]) -> Vec3 {
    let rx = 0.72 * (1.0 + 0.55 * id[0]);
    let ry = 0.95 * (1.0 + 0.45 * id[1]);
    let rz = 0.78 * (1.0 + 0.50 * id[2]);

    let chin_dir: Vec3 = v_normalize([0.0, -0.85, 0.52]);
    let nose_dir: Vec3 = v_normalize([0.0, -0.05, 1.0]);
    let brow_l: Vec3 = v_normalize([-0.35, 0.35, 0.87]);
    let brow_r: Vec3 = v_normalize([0.35, 0.35, 0.87]);

    let mut p = match tv {
        TemplateVertex::Skin(u) => {
            let mut p = [rx * u[0], ry * u[1], rz * u[2]];
            // Identity morphs: smooth bumps over the template direction.
            let cheek = gaussian_bump(dir_dist2(*u, v_normalize([-0.8, -0.2, 0.55])), 0.55)
                + gaussian_bump(dir_dist2(*u, v_normalize([0.8, -0.2, 0.55])), 0.55);
            p[0] += id[3] * 0.18 * cheek * u[0].signum();
            let chin = gaussian_bump(dir_dist2(*u, chin_dir), 0.45);
            p = v_add(p, v_scale([0.0, -0.75, 0.4], id[4] * 0.22 * chin));
            let jaw_w = gaussian_bump((u[1] + 0.55) * (u[1] + 0.55), 0.35)
                * smoothstep((u[2] + 0.4) / 0.8);
            p[0] += id[5] * 0.2 * jaw_w * u[0].signum();
            let nose = gaussian_bump(dir_dist2(*u, nose_dir), 0.30);
            p[2] += id[6] * 0.2 * nose;
            let brow = gaussian_bump(dir_dist2(*u, brow_l), 0.35)
                + gaussian_bump(dir_dist2(*u, brow_r), 0.35);
            p[2] += id[7] * 0.12 * brow;
            let back = gaussian_bump(dir_dist2(*u, v_normalize([0.0, 0.1, -1.0])), 0.8);
            p[2] -= id[8] * 0.22 * back;
            p[0] *= 1.0 + id[9] * 0.22 * u[1];
            p[1] += id[10] * 0.15 * u[2];
            let forehead = gaussian_bump(dir_dist2(*u, v_normalize([0.0, 0.75, 0.6])), 0.5);
            p[1] += id[11] * 0.18 * forehead;
            // Expression morphs on skin: cheek puff and brow raise.
            p[2] += ex[5] * 0.08 * cheek * smoothstep((u[2] + 0.2) / 0.6);
            p[1] += ex[6] * 0.10 * brow;
            p
        }
        TemplateVertex::UpperLip(theta) | TemplateVertex::LowerLip(theta) => {
            let upper = matches!(tv, TemplateVertex::UpperLip(_));
            let mouth_dir = v_normalize([0.0, -0.38, 0.92]);
            let m0 = [rx * mouth_dir[0], ry * mouth_dir[1], rz * mouth_dir[2]];
            // Fixed tangent frame of the mouth plane.
            let tx: Vec3 = [1.0, 0.0, 0.0];
            let ty: Vec3 = v_normalize([0.0, 0.92, 0.38]);
            let width = 0.26 * (1.0 + 0.45 * id[3] + 0.35 * ex[4]) * (1.0 - 0.45 * ex[1]);
            let lip_h = 0.065 * (1.0 + 0.3 * id[4]) * (1.0 - 0.55 * ex[3]);
            let gap = 0.015;
            let bulge = 0.025 * theta.sin() + 0.09 * ex[1];
            let corner = theta.cos() * theta.cos();
            let vertical = if upper {
                gap / 2.0 + lip_h * theta.sin() + 0.06 * ex[2] * corner
            } else {
                -(gap / 2.0 + 0.8 * lip_h * theta.sin()) + 0.06 * ex[2] * corner
            };
            let mut p = m0;
            p = v_add(p, v_scale(tx, width * theta.cos()));
            p = v_add(p, v_scale(ty, vertical));
            p = v_add(p, v_scale(mouth_dir, bulge));
            p
        }
    };

    // Jaw opening: rotate points below the mouth line about an x-axis hinge.
    // The weight is smooth in the evaluated position; the lower lip sits
    // inside the full-weight region so the mouth opens cleanly.
    let jaw_angle = ex[0] * 0.5 + ex[7] * 0.06;
    if jaw_angle != 0.0 {
        let w = smoothstep((-0.18 - p[1]) / 0.30) * smoothstep((p[2] + 0.25) / 0.45);
        if w > 0.0 {
            let (hy, hz) = (-0.12, -0.18);
            let a = jaw_angle * w;
            let (s, c) = a.sin_cos();
            let (dy, dz) = (p[1] - hy, p[2] - hz);
            p[1] = hy + c * dy - s * dz;
            p[2] = hz + s * dy + c * dz;
        }
    }
    // Jaw thrust: slide the same region forward.
    if ex[8] != 0.0 {
        let w = smoothstep((-0.18 - p[1]) / 0.30) * smoothstep((p[2] + 0.25) / 0.45);
        p[2] += 0.12 * ex[8] * w;
    }
    // Head nod: a gentle global pitch captured as expression.
    if ex[9] != 0.0 {
        let a = 0.05 * ex[9];
        let (s, c) = a.sin_cos();
        let (y, z) = (p[1], p[2]);
        p[1] = c * y - s * z;
        p[2] = s * y + c * z;
    }
    p
}

fn eval_family(verts: &[TemplateVertex], id: &[f64], ex: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(verts.len() * 3);
    for tv in verts {
        let p = shape_vertex(tv, id, ex);
        out.extend_from_slice(&p);
    }
    out
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Snapshot PCA: eigendecompose the n x n Gram matrix of the deviation rows,
/// lift eigenvectors back to data space, and re-orthonormalize. Returns `k`
/// rows of length `dim` (orthonormal as flattened vectors).
fn snapshot_pca(deviations: &[Vec<f64>], k: usize, context: &str) -> Result<Vec<f64>> {
    let n = deviations.len();
    let dim = deviations[0].len();
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let dot: f64 = deviations[i].iter().zip(&deviations[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = dot;
            gram[(j, i)] = dot;
        }
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("eigenvalues are finite")
    });
    let max_ev = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > max_ev * 1e-12 && eig.eigenvalues[i] > 0.0)
        .count();
    if k > rank {
        return Err(Error::RankDeficient { context: context.to_string(), rank, requested: k });
    }
    let mut rows = vec![0.0; k * dim];
    for (slot, &ei) in order[..k].iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[ei].sqrt();
        let row = &mut rows[slot * dim..(slot + 1) * dim];
        for (i, dev) in deviations.iter().enumerate() {
            let u = eig.eigenvectors[(i, ei)] * scale;
            if u != 0.0 {
                for (r, d) in row.iter_mut().zip(dev) {
                    *r += u * d;
                }
            }
        }
    }
    // Modified Gram-Schmidt pass to clean up residual non-orthogonality from
    // the Gram-route lift.
    for i in 0..k {
        for j in 0..i {
            let (head, tail) = rows.split_at_mut(i * dim);
            let prev = &head[j * dim..(j + 1) * dim];
            let cur = &mut tail[..dim];
            let dot: f64 = prev.iter().zip(cur.iter()).map(|(a, b)| a * b).sum();
            for (c, p) in cur.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let row = &mut rows[i * dim..(i + 1) * dim];
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::RankDeficient {
                context: context.to_string(),
                rank: i,
                requested: k,
            });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Build the toy basis: generate the head family, sample it, and run PCA.
/// Deterministic for a fixed seed.
pub fn build_toy_basis(
    seed: u64,
    num_vertices: usize,
    k_id: usize,
    k_exp: usize,
) -> Result<BlendshapeBasis> {
    if num_vertices < 100 {
        return Err(Error::invalid(format!("num_vertices must be >= 100, got {num_vertices}")));
    }
    if k_id == 0 || k_exp == 0 {
        return Err(Error::invalid("k_id and k_exp must be >= 1"));
    }
    let verts = template(num_vertices);
    let zero_id = [0.0; NUM_ID_KNOBS];
    let zero_ex = [0.0; NUM_EXP_KNOBS];
    let mut mean = eval_family(&verts, &zero_id, &zero_ex);

    // Normalize so the mean head fits inside the unit sphere.
    let max_norm = mean
        .chunks_exact(3)
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0_f64, f64::max);
    let unit_scale = 0.95 / max_norm;
    for v in mean.iter_mut() {
        *v *= unit_scale;
    }

    let n_samples = (10 * (k_id + k_exp)).max(60);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller from two uniforms; no state beyond the RNG.
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };

    // Identity family: expression fixed at zero.
    let mut id_devs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut id = [0.0; NUM_ID_KNOBS];
        for v in id.iter_mut() {
            *v = 0.35 * normal(&mut rng);
        }
        let mut s = eval_family(&verts, &id, &zero_ex);
        for (v, m) in s.iter_mut().zip(&mean) {
            *v = *v * unit_scale - m;
        }
        id_devs.push(s);
    }
    // Expression family: identity fixed at zero; jaw opening dominates.
    let exp_sigmas: [f64; NUM_EXP_KNOBS] = [0.9, 0.18, 0.15, 0.15, 0.15, 0.12, 0.12, 0.1, 0.1, 0.1];
    let mut exp_devs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut ex = [0.0; NUM_EXP_KNOBS];
        for (v, sig) in ex.iter_mut().zip(&exp_sigmas) {
            *v = sig * normal(&mut rng);
        }
        let mut s = eval_family(&verts, &zero_id, &ex);
        for (v, m) in s.iter_mut().zip(&mean) {
            *v = *v * unit_scale - m;
        }
        exp_devs.push(s);
    }

    let id_basis = snapshot_pca(&id_devs, k_id, "identity PCA")?;
    let exp_basis = snapshot_pca(&exp_devs, k_exp, "expression PCA")?;

    let landmark_indices = pick_landmarks(&verts, &mean);
    let mouth_indices: Vec<usize> = (0..2 * LIP_RING).collect();

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in mean.chunks_exact(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }

    Ok(BlendshapeBasis {
        num_vertices,
        k_id,
        k_exp,
        mean_shape: mean,
        id_basis,
        exp_basis,
        landmark_indices,
        mouth_indices,
        bbox: (lo, hi),
    })
}

/// Landmark ordering: lip centers and corners first (see the `LM_*`
/// constants), then nose, chin, eyes, brows, cheeks, forehead, and a short
/// jawline arc. Skin landmarks are the nearest template vertex to a fixed
/// direction, deduplicated deterministically.
fn pick_landmarks(verts: &[TemplateVertex], mean: &[f64]) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::new();
    // Lip ring parameters run from theta ~ 0 (x = +width) to ~pi (x = -width);
    // the center of the ring is the vertex closest to theta = pi/2.
    let center = LIP_RING / 2;
    picked.push(center); // upper lip center
    picked.push(LIP_RING + center); // lower lip center
    picked.push(LIP_RING - 1); // mouth corner, -x side (theta ~ pi)
    picked.push(0); // mouth corner, +x side (theta ~ 0)

    let targets: [Vec3; 16] = [
        [0.0, -0.05, 1.0],   // nose tip
        [0.0, -0.85, 0.52],  // chin
        [-0.30, 0.18, 0.92], // eye L
        [0.30, 0.18, 0.92],  // eye R
        [-0.35, 0.38, 0.85], // brow L
        [0.35, 0.38, 0.85],  // brow R
        [-0.75, -0.25, 0.6], // cheek L
        [0.75, -0.25, 0.6],  // cheek R
        [0.0, 0.75, 0.62],   // forehead
        [0.0, 1.0, 0.0],     // crown
        [-0.62, -0.55, 0.5], // jawline L
        [0.62, -0.55, 0.5],  // jawline R
        [-0.95, 0.05, 0.1],  // temple L
        [0.95, 0.05, 0.1],   // temple R
        [0.0, -0.5, 0.88],   // below-lip
        [0.0, -0.2, 0.99],   // philtrum
    ];
    for t in targets {
        let tn = v_normalize(t);
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, tv) in verts.iter().enumerate() {
            if !matches!(tv, TemplateVertex::Skin(_)) || picked.contains(&i) {
                continue;
            }
            let p = [mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]];
            let d = dir_dist2(v_normalize(p), tn);
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        picked.push(best.expect("enough skin vertices for landmarks"));
    }
    picked
}

/// Evaluate `mean + alpha * id_basis + beta * exp_basis` exactly.
pub fn evaluate_shape(basis: &BlendshapeBasis, coeffs: &ShapeCoeffs) -> Result<VertexSet> {
    if coeffs.alpha.len() != basis.k_id || coeffs.beta.len() != basis.k_exp {
        return Err(Error::shape(
            "evaluate_shape coefficients",
            format!("alpha {} / beta {}", basis.k_id, basis.k_exp),
            format!("alpha {} / beta {}", coeffs.alpha.len(), coeffs.beta.len()),
        ));
    }
    let mut flat = basis.mean_shape.clone();
    for (k, &a) in coeffs.alpha.iter().enumerate() {
        if a != 0.0 {
            for (f, b) in flat.iter_mut().zip(basis.id_component(k)) {
                *f += a * b;
            }
        }
    }
    for (k, &b) in coeffs.beta.iter().enumerate() {
        if b != 0.0 {
            for (f, e) in flat.iter_mut().zip(basis.exp_component(k)) {
                *f += b * e;
            }
        }
    }
    Ok(VertexSet { positions: unflatten(&flat) })
}

/// Gather positions at the basis' landmark indices, in order.
pub fn extract_landmarks(basis: &BlendshapeBasis, vertices: &VertexSet) -> Result<Vec<Vec3>> {
    if vertices.positions.len() != basis.num_vertices {
        return Err(Error::shape(
            "extract_landmarks",
            basis.num_vertices,
            vertices.positions.len(),
        ));
    }
    Ok(basis.landmark_indices.iter().map(|&i| vertices.positions[i]).collect())
}

/// Per-vertex displacement, init minus audio (the ray-deformation sign
/// convention: querying the canonical field at `p + delta` renders the
/// audio-driven state).
pub fn vertex_displacement(v_init: &VertexSet, v_audio: &VertexSet) -> Result<Vec<Vec3>> {
    if v_init.positions.len() != v_audio.positions.len() {
        return Err(Error::shape(
            "vertex_displacement",
            v_init.positions.len(),
            v_audio.positions.len(),
        ));
    }
    Ok(v_init.positions.iter().zip(&v_audio.positions).map(|(&a, &b)| v_sub(a, b)).collect())
}

// ---------------------------------------------------------------------------
// Serialization ("NFSB")
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"NFSB";
const VERSION: u32 = 1;

/// Binary basis file: magic "NFSB", version, dims (V, K_id, K_exp, L, M) as
/// u32, then mean/id/exp arrays as row-major f64 in declaration order
/// (id/exp indexed as (vertex, component, k)), then the landmark and mouth
/// index lists as u32.
pub fn save_basis(path: &Path, basis: &BlendshapeBasis) -> Result<()> {
    let v = basis.num_vertices;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in [v, basis.k_id, basis.k_exp, basis.landmark_indices.len(), basis.mouth_indices.len()]
    {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in &basis.mean_shape {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for (k_count, rows) in [(basis.k_id, &basis.id_basis), (basis.k_exp, &basis.exp_basis)] {
        for vc in 0..3 * v {
            for k in 0..k_count {
                buf.extend_from_slice(&rows[k * 3 * v + vc].to_le_bytes());
            }
        }
    }
    for &i in &basis.landmark_indices {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
    }
    for &i in &basis.mouth_indices {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_basis(path: &Path) -> Result<BlendshapeBasis> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format("NFSB basis", "unexpected end of file"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    }
    fn u32_at(bytes: &[u8], pos: &mut usize) -> Result<u32> {
        let b = take(bytes, pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn f64_at(bytes: &[u8], pos: &mut usize) -> Result<f64> {
        let b = take(bytes, pos, 8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
    let magic = take(&bytes, &mut pos, 4)?;
    if magic != MAGIC {
        return Err(Error::format("NFSB basis", format!("bad magic {magic:?}")));
    }
    let version = u32_at(&bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::format("NFSB basis", format!("unsupported version {version}")));
    }
    let v = u32_at(&bytes, &mut pos)? as usize;
    let k_id = u32_at(&bytes, &mut pos)? as usize;
    let k_exp = u32_at(&bytes, &mut pos)? as usize;
    let l = u32_at(&bytes, &mut pos)? as usize;
    let m = u32_at(&bytes, &mut pos)? as usize;
    let mut mean = Vec::with_capacity(3 * v);
    for _ in 0..3 * v {
        mean.push(f64_at(&bytes, &mut pos)?);
    }
    let read_rows = |pos: &mut usize, k_count: usize| -> Result<Vec<f64>> {
        let mut rows = vec![0.0; k_count * 3 * v];
        for vc in 0..3 * v {
            for k in 0..k_count {
                rows[k * 3 * v + vc] = f64_at(&bytes, pos)?;
            }
        }
        Ok(rows)
    };
    let id_basis = read_rows(&mut pos, k_id)?;
    let exp_basis = read_rows(&mut pos, k_exp)?;
    let read_indices = |pos: &mut usize, count: usize| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let idx = u32_at(&bytes, pos)? as usize;
            if idx >= v {
                return Err(Error::format(
                    "NFSB basis",
                    format!("vertex index {idx} out of range"),
                ));
            }
            out.push(idx);
        }
        Ok(out)
    };
    let landmark_indices = read_indices(&mut pos, l)?;
    let mouth_indices = read_indices(&mut pos, m)?;

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in mean.chunks_exact(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    Ok(BlendshapeBasis {
        num_vertices: v,
        k_id,
        k_exp,
        mean_shape: mean,
        id_basis,
        exp_basis,
        landmark_indices,
        mouth_indices,
        bbox: (lo, hi),
    })
}
