//! Dense f64 matrix kernels with a fixed, scheduling-independent summation
//! order.
//!
//! Every kernel accumulates along the contraction axis in ascending order for
//! each output element, so results are bit-identical to a naive per-element
//! loop and do not depend on the rayon worker count. The inner loops run over
//! the trailing (output-column) axis, which keeps them vectorizable without
//! reordering any floating-point additions.

use rayon::prelude::*;

/// Rows below this stay single-threaded; chunking smaller matrices costs more
/// than it saves.
const PAR_MIN_ROWS: usize = 64;

/// out(m x n) = a(m x k) * b(k x n), row-major, out is overwritten.
pub fn gemm(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(out.len(), m * n, "gemm: out size");
    let body = |(row, out_row): (usize, &mut [f64])| {
        out_row.fill(0.0);
        let a_row = &a[row * k..(row + 1) * k];
        for (kk, &s) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += s * bv;
            }
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// out(in x out_dim) += sum_p x_p (outer) dy_p, i.e. out += x^T * dy where
/// x is (p x in) and dy is (p x out_dim). Used for weight gradients; the
/// p-axis is accumulated in ascending order for every output element.
pub fn gemm_acc_xt_y(
    out: &mut [f64],
    x: &[f64],
    dy: &[f64],
    p: usize,
    in_dim: usize,
    out_dim: usize,
) {
    assert_eq!(x.len(), p * in_dim, "gemm_acc_xt_y: x size");
    assert_eq!(dy.len(), p * out_dim, "gemm_acc_xt_y: dy size");
    assert_eq!(out.len(), in_dim * out_dim, "gemm_acc_xt_y: out size");
    let body = |(chunk_idx, out_chunk): (usize, &mut [f64])| {
        let ki0 = chunk_idx; // one input-row per chunk
        for pp in 0..p {
            let s = x[pp * in_dim + ki0];
            if s == 0.0 {
                continue;
            }
            let dy_row = &dy[pp * out_dim..(pp + 1) * out_dim];
            for (o, &dv) in out_chunk.iter_mut().zip(dy_row) {
                *o += s * dv;
            }
        }
    };
    if in_dim >= PAR_MIN_ROWS {
        out.par_chunks_mut(out_dim).enumerate().for_each(body);
    } else {
        out.chunks_mut(out_dim).enumerate().for_each(body);
    }
}

/// Row-major transpose: a(rows x cols) -> (cols x rows).
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols, "transpose: size");
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Three-component vector in scene or model space.
pub type Vec3 = [f64; 3];

pub fn v_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn v_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn v_norm(a: Vec3) -> f64 {
    v_dot(a, a).sqrt()
}

pub fn v_normalize(a: Vec3) -> Vec3 {
    let n = v_norm(a);
    v_scale(a, 1.0 / n)
}
