//! Small dense kernels for K×K lower-triangular factors stored row-major.
//!
//! K is the number of latent attributes (single digits in practice), so these
//! stay allocation-free and avoid a general linear-algebra dependency in the
//! per-individual hot path.

use crate::error::{Error, Result};

/// Solves `L x = b` by forward substitution.
pub fn solve_lower(l: &[f64], k: usize, b: &[f64], x: &mut [f64]) {
    for r in 0..k {
        let row = &l[r * k..r * k + r];
        let s: f64 = row.iter().zip(&x[..r]).map(|(a, b)| a * b).sum();
        x[r] = (b[r] - s) / l[r * k + r];
    }
}

/// Solves `Lᵀ x = b` by back substitution.
pub fn solve_lower_transpose(l: &[f64], k: usize, b: &[f64], x: &mut [f64]) {
    for r in (0..k).rev() {
        let mut s = 0.0;
        for c in r + 1..k {
            s += l[c * k + r] * x[c];
        }
        x[r] = (b[r] - s) / l[r * k + r];
    }
}

/// `y = L x`.
pub fn lower_matvec(l: &[f64], k: usize, x: &[f64], y: &mut [f64]) {
    for r in 0..k {
        y[r] = l[r * k..r * k + r + 1]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// `L Lᵀ` as a dense row-major matrix.
pub fn gram_lower(l: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for r in 0..k {
        for c in 0..=r {
            let m = c.min(r);
            let v: f64 = (0..=m).map(|t| l[r * k + t] * l[c * k + t]).sum();
            out[r * k + c] = v;
            out[c * k + r] = v;
        }
    }
    out
}

/// Sum of `ln |L_kk|`, i.e. half the log-determinant of `L Lᵀ`.
pub fn half_log_det(l: &[f64], k: usize) -> f64 {
    (0..k).map(|r| l[r * k + r].abs().ln()).sum()
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &[f64], k: usize) -> Result<Vec<f64>> {
    if a.len() != k * k {
        return Err(Error::Shape(format!("expected {k}x{k} matrix")));
    }
    let mut l = vec![0.0; k * k];
    for r in 0..k {
        for c in 0..=r {
            let s: f64 = (0..c).map(|t| l[r * k + t] * l[c * k + t]).sum();
            if r == c {
                let d = a[r * k + r] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::domain(format!(
                        "matrix is not positive definite (pivot {r} = {d})"
                    )));
                }
                l[r * k + r] = d.sqrt();
            } else {
                l[r * k + c] = (a[r * k + c] - s) / l[c * k + c];
            }
        }
    }
    Ok(l)
}
