//! Desk-scale image and motion metrics backing the run report.

use crate::error::{Error, Result};
use crate::face_model::{
    evaluate_shape, extract_landmarks, BlendshapeBasis, ShapeCoeffs, LM_LOWER_LIP, LM_UPPER_LIP,
};

/// PSNR values are capped here so reports stay finite for identical frames.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Per-frame metric series with summary statistics.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricReport {
    pub fn from_values(name: &str, values: Vec<f64>) -> Self {
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        MetricReport { name: name.to_string(), values, mean, min, max }
    }
}

/// Peak signal-to-noise ratio over [0,1] images, `10 log10(1 / MSE)`,
/// capped at 99 dB for identical inputs.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr", a.len(), b.len()));
    }
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Vertical distance between the designated upper/lower lip landmarks of the
/// shape evaluated at `beta` (identity at zero).
pub fn mouth_opening(beta: &[f64], basis: &BlendshapeBasis) -> Result<f64> {
    let coeffs = ShapeCoeffs { alpha: vec![0.0; basis.k_id()], beta: beta.to_vec() };
    let verts = evaluate_shape(basis, &coeffs)?;
    let lms = extract_landmarks(basis, &verts)?;
    Ok((lms[LM_UPPER_LIP][1] - lms[LM_LOWER_LIP][1]).abs())
}

/// Pearson correlation between two equal-length series.
pub fn envelope_correlation(series_a: &[f64], series_b: &[f64]) -> Result<f64> {
    if series_a.len() != series_b.len() {
        return Err(Error::shape("envelope_correlation", series_a.len(), series_b.len()));
    }
    let n = series_a.len();
    if n < 3 {
        return Err(Error::invalid("correlation needs at least 3 points"));
    }
    let mean_a = series_a.iter().sum::<f64>() / n as f64;
    let mean_b = series_b.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in series_a.iter().zip(series_b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::invalid("correlation of a constant series is undefined"));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::build_toy_basis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_conventions() {
        let img = vec![0.25; 48];
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
        // MSE 0.01 -> 20 dB.
        let a = vec![0.5; 100];
        let b = vec![0.6; 100];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        // Random pair against the scalar formula.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let mse: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0;
        let expected = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&x, &y).unwrap() - expected).abs() < 1e-12);
        // Symmetry.
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        assert!(psnr(&x, &y[..10]).is_err());
    }

    #[test]
    fn mouth_opening_monotone_in_jaw() {
        let basis = build_toy_basis(7, 600, 4, 4).unwrap();
        let baseline = mouth_opening(&vec![0.0; 4], &basis).unwrap();
        // Direct landmark-distance oracle at beta = 0.
        let mean = basis.mean_vertex_set();
        let lms = extract_landmarks(&basis, &mean).unwrap();
        let expected = (lms[LM_UPPER_LIP][1] - lms[LM_LOWER_LIP][1]).abs();
        assert!((baseline - expected).abs() < 1e-12);

        let mut last = baseline;
        let sign = {
            let mut b = vec![0.0; 4];
            b[0] = 0.5;
            if mouth_opening(&b, &basis).unwrap() > baseline {
                1.0
            } else {
                -1.0
            }
        };
        for step in 1..=4 {
            let mut b = vec![0.0; 4];
            b[0] = sign * 0.3 * step as f64;
            let gap = mouth_opening(&b, &basis).unwrap();
            assert!(gap >= last - 1e-12, "jaw scaling must not close the mouth: {last} -> {gap}");
            last = gap;
        }
    }

    #[test]
    fn correlation_conventions() {
        let a = vec![1.0, 2.0, 3.0, 5.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((envelope_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((envelope_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(envelope_correlation(&a, &vec![2.0; 4]).is_err());

        // Textbook-formula oracle on a random pair.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..50).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.gen::<f64>()).collect();
        let n = 50.0;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let syy: f64 = y.iter().map(|v| v * v).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let oracle = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert!((envelope_correlation(&x, &y).unwrap() - oracle).abs() < 1e-12);

        // Affine invariance.
        let scaled: Vec<f64> = x.iter().map(|v| 3.5 * v - 2.0).collect();
        let r1 = envelope_correlation(&x, &y).unwrap();
        let r2 = envelope_correlation(&scaled, &y).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }
}
