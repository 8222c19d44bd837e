//! Binds face-model vertices one-to-one to field-space anchor points on the
//! frontal XY plane and converts per-vertex displacements into a spatial
//! displacement field for ray deformation.
//!
//! Sign convention (easy to invert by mistake): the stored displacement is
//! `delta = V_init - V_audio` mapped into field units. Rendering queries the
//! canonical field at `p + delta` (a backward warp), which produces the
//! audio-driven state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::face_model::VertexSet;
use crate::linalg::{v_scale, Vec3};

/// Uniform scale + translation sending model space into field space.
#[derive(Debug, Clone, Copy)]
pub struct FieldTransform {
    pub scale: f64,
    pub offset: Vec3,
}

impl FieldTransform {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        [
            self.scale * p[0] + self.offset[0],
            self.scale * p[1] + self.offset[1],
            self.scale * p[2] + self.offset[2],
        ]
    }

    /// Linear part only; used for displacement vectors.
    pub fn apply_linear(&self, v: Vec3) -> Vec3 {
        v_scale(v, self.scale)
    }

    pub fn invert(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.offset[0]) / self.scale,
            (p[1] - self.offset[1]) / self.scale,
            (p[2] - self.offset[2]) / self.scale,
        ]
    }
}

/// One-to-one vertex-to-anchor assignment plus the model-to-field transform.
#[derive(Debug, Clone)]
pub struct VertexBinding {
    /// (vertex index, anchor point in field space).
    pub pairs: Vec<(usize, Vec3)>,
    pub scale_transform: FieldTransform,
}

/// Spatial displacement field: anchor points with displacement vectors,
/// interpolated by inverse-distance weighting with smooth compact support.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    anchors: Vec<Vec3>,
    displacements: Vec<Vec3>,
    k_neighbors: usize,
    support_radius: f64,
    cells: HashMap<(i32, i32, i32), Vec<u32>>,
}

/// The face-model bbox maps to a centered box whose largest extent spans
/// this many field units (the head then sits inside [-1,1]^3 with margin).
pub const FIELD_EXTENT: f64 = 1.6;

/// Default interpolation parameters.
pub const DEFAULT_K_NEIGHBORS: usize = 4;
pub const DEFAULT_SUPPORT_RADIUS: f64 = 0.15;

/// Compute field coordinates for a vertex set: bbox center goes to the
/// origin and the largest bbox extent to `FIELD_EXTENT` units. Returns the
/// transformed positions and the transform itself.
pub fn scale_to_field(
    vertices: &VertexSet,
    bbox: (Vec3, Vec3),
) -> Result<(Vec<Vec3>, FieldTransform)> {
    let (lo, hi) = bbox;
    let extent = (0..3).map(|c| hi[c] - lo[c]).fold(f64::NEG_INFINITY, f64::max);
    if !extent.is_finite() || extent <= 0.0 {
        return Err(Error::invalid(format!("degenerate bbox with extent {extent}")));
    }
    let scale = FIELD_EXTENT / extent;
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let offset = [-scale * center[0], -scale * center[1], -scale * center[2]];
    let t = FieldTransform { scale, offset };
    Ok((vertices.positions.iter().map(|&p| t.apply(p)).collect(), t))
}

/// Candidate anchor lattice: the XY pixel-center grid of a `resolution`^2
/// feature map spread over [-1, 1]^2.
pub fn anchor_grid(resolution: usize) -> Vec<(f64, f64)> {
    let mut grid = Vec::with_capacity(resolution * resolution);
    for j in 0..resolution {
        for i in 0..resolution {
            let x = (i as f64 + 0.5) / resolution as f64 * 2.0 - 1.0;
            let y = 1.0 - (j as f64 + 0.5) / resolution as f64 * 2.0;
            grid.push((x, y));
        }
    }
    grid
}

fn xy_dist(v: Vec3, g: (f64, f64)) -> f64 {
    let dx = v[0] - g.0;
    let dy = v[1] - g.1;
    (dx * dx + dy * dy).sqrt()
}

/// One-to-one assignment of vertices to grid points by XY distance. Small
/// instances take the optimal (minimum total distance) assignment; larger
/// ones a greedy pass over globally ascending distances. Each grid point is
/// used at most once; the anchor keeps the vertex's own z.
pub fn bind_vertices(
    vertices_field: &[Vec3],
    grid: &[(f64, f64)],
    transform: FieldTransform,
) -> Result<VertexBinding> {
    let m = vertices_field.len();
    if grid.len() < m {
        return Err(Error::invalid(format!(
            "anchor grid exhausted: {m} vertices but only {} grid points",
            grid.len()
        )));
    }
    // The optimal variant is O(M^2 G); cap the work it may take.
    let assignment = if m <= 256 && m * m * grid.len() <= 200_000_000 {
        assign_optimal(vertices_field, grid)
    } else {
        assign_greedy(vertices_field, grid)
    };
    let pairs = assignment
        .into_iter()
        .enumerate()
        .map(|(vi, gi)| {
            let g = grid[gi];
            (vi, [g.0, g.1, vertices_field[vi][2]])
        })
        .collect();
    Ok(VertexBinding { pairs, scale_transform: transform })
}

/// Greedy matching in ascending order of (distance, vertex, grid) over all
/// candidate pairs.
fn assign_greedy(vertices: &[Vec3], grid: &[(f64, f64)]) -> Vec<usize> {
    let m = vertices.len();
    let g = grid.len();
    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(m * g);
    for (vi, &v) in vertices.iter().enumerate() {
        for (gi, &gp) in grid.iter().enumerate() {
            edges.push((xy_dist(v, gp), vi as u32, gi as u32));
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut vertex_done = vec![false; m];
    let mut grid_done = vec![false; g];
    let mut out = vec![usize::MAX; m];
    let mut assigned = 0;
    for (_, vi, gi) in edges {
        let (vi, gi) = (vi as usize, gi as usize);
        if !vertex_done[vi] && !grid_done[gi] {
            vertex_done[vi] = true;
            grid_done[gi] = true;
            out[vi] = gi;
            assigned += 1;
            if assigned == m {
                break;
            }
        }
    }
    out
}

/// Optimal rectangular assignment (shortest augmenting paths with
/// potentials), minimizing total XY distance.
fn assign_optimal(vertices: &[Vec3], grid: &[(f64, f64)]) -> Vec<usize> {
    let m = vertices.len();
    let g = grid.len();
    let cost = |i: usize, j: usize| xy_dist(vertices[i], grid[j]);
    let mut u = vec![0.0f64; m];
    let mut v = vec![0.0f64; g + 1];
    // p[j] = row assigned to column j (g is the virtual start column).
    let mut p = vec![usize::MAX; g + 1];
    for row in 0..m {
        p[g] = row;
        let mut j0 = g;
        let mut minv = vec![f64::INFINITY; g];
        let mut way = vec![g; g];
        let mut used = vec![false; g + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = g;
            for j in 0..g {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..g {
                if used[j] {
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            for j in 0..=g {
                if used[j] && p[j] != usize::MAX {
                    u[p[j]] += delta;
                }
            }
            v[g] -= delta;
            j0 = j1;
            if p[j0] == usize::MAX {
                break;
            }
        }
        // Augment along the alternating path.
        while j0 != g {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut out = vec![usize::MAX; m];
    for j in 0..g {
        if p[j] != usize::MAX {
            out[p[j]] = j;
        }
    }
    out
}

/// Build the displacement field from a binding and per-vertex model-space
/// displacements (`V_init - V_audio`, covering all vertices of the model).
/// Displacements map through the transform's linear part and are clamped to
/// the support radius.
pub fn build_displacement_field(
    binding: &VertexBinding,
    delta_v: &[Vec3],
    k_neighbors: usize,
    support_radius: f64,
) -> Result<DisplacementField> {
    if k_neighbors == 0 || support_radius <= 0.0 {
        return Err(Error::invalid("k_neighbors and support_radius must be positive"));
    }
    let mut anchors = Vec::with_capacity(binding.pairs.len());
    let mut displacements = Vec::with_capacity(binding.pairs.len());
    for &(vi, anchor) in &binding.pairs {
        let dv = delta_v.get(vi).ok_or_else(|| {
            Error::shape("build_displacement_field", format!("vertex {vi} covered"), delta_v.len())
        })?;
        let mut d = binding.scale_transform.apply_linear(*dv);
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm > support_radius {
            d = v_scale(d, support_radius / norm);
        }
        anchors.push(anchor);
        displacements.push(d);
    }
    // Uniform grid hash with cell size = support radius: a query touches at
    // most the 3x3x3 neighborhood.
    let mut cells: HashMap<(i32, i32, i32), Vec<u32>> = HashMap::new();
    for (i, a) in anchors.iter().enumerate() {
        cells.entry(cell_of(*a, support_radius)).or_default().push(i as u32);
    }
    Ok(DisplacementField { anchors, displacements, k_neighbors, support_radius, cells })
}

fn cell_of(p: Vec3, cell: f64) -> (i32, i32, i32) {
    (
        (p[0] / cell).floor() as i32,
        (p[1] / cell).floor() as i32,
        (p[2] / cell).floor() as i32,
    )
}

impl DisplacementField {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self) -> &[Vec3] {
        &self.anchors
    }

    pub fn displacements(&self) -> &[Vec3] {
        &self.displacements
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// True when every stored displacement is exactly zero; rendering then
    /// skips the lookup entirely so the identity-deformation render is
    /// bit-identical to the undeformed one.
    pub fn is_zero(&self) -> bool {
        self.displacements.iter().all(|d| *d == [0.0, 0.0, 0.0])
    }

    /// Interpolated displacement at an arbitrary point: inverse-distance
    /// weights (power 2) over the k nearest anchors inside the support
    /// radius, each multiplied by the smooth falloff (1 - (d/R)^2)^2. A point
    /// on an anchor returns that anchor's displacement exactly; a point
    /// farther than the radius from every anchor returns zero.
    pub fn displacement_at(&self, p: Vec3) -> Vec3 {
        let r = self.support_radius;
        let r2 = r * r;
        let base = cell_of(p, r);
        let mut candidates: Vec<(f64, u32)> = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let key = (base.0 + dx, base.1 + dy, base.2 + dz);
                    let Some(list) = self.cells.get(&key) else { continue };
                    for &idx in list {
                        let a = self.anchors[idx as usize];
                        let d2 = (p[0] - a[0]).powi(2)
                            + (p[1] - a[1]).powi(2)
                            + (p[2] - a[2]).powi(2);
                        if d2 < r2 {
                            candidates.push((d2, idx));
                        }
                    }
                }
            }
        }
        if candidates.is_empty() {
            return [0.0, 0.0, 0.0];
        }
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
        if candidates[0].0 < 1e-24 {
            return self.displacements[candidates[0].1 as usize];
        }
        let take = self.k_neighbors.min(candidates.len());
        let mut weight_sum = 0.0;
        let mut acc = [0.0, 0.0, 0.0];
        for &(d2, idx) in &candidates[..take] {
            let falloff = 1.0 - d2 / r2;
            let w = (falloff * falloff) / d2;
            let disp = self.displacements[idx as usize];
            acc[0] += w * disp[0];
            acc[1] += w * disp[1];
            acc[2] += w * disp[2];
            weight_sum += w;
        }
        if weight_sum == 0.0 {
            return [0.0, 0.0, 0.0];
        }
        [acc[0] / weight_sum, acc[1] / weight_sum, acc[2] / weight_sum]
    }
}

/// Vertices considered visible on the frontal XY projection (bound into the
/// field); the rest of the head stays static under deformation.
pub fn frontal_vertex_indices(vertices_field: &[Vec3]) -> Vec<usize> {
    (0..vertices_field.len()).filter(|&i| vertices_field[i][2] > 0.0).collect()
}
