//! Marginal log-likelihood: importance sampling with posterior-moment
//! proposals, and tensor Gauss-Hermite quadrature for small dimensions.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::PosteriorMoments;
use crate::likelihood::{mvn_log_density, Evaluation, LatentModel};
use crate::linalg;
use crate::model::{Dataset, LowerTriangular};
use crate::rng::{self, DOMAIN_IS};

/// Default number of importance draws per individual.
pub const DEFAULT_DRAWS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsEstimate {
    pub loglik: f64,
    pub per_unit: Vec<f64>,
    /// Delta-method Monte Carlo standard error of each `per_unit` term.
    pub per_unit_se: Vec<f64>,
    /// Individuals whose proposal fell back to an identity covariance.
    pub fallbacks: Vec<usize>,
}

impl IsEstimate {
    /// Standard error of the total, treating individuals as independent.
    pub fn se(&self) -> f64 {
        self.per_unit_se.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// `ln Σ exp(x)` without overflow; `−∞` for an empty or all-`−∞` input.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log of the mean importance weight and its delta-method standard error.
fn summarize(log_w: &[f64]) -> (f64, f64) {
    let m = log_w.len() as f64;
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let (s1, s2) = log_w.iter().fold((0.0, 0.0), |(a, b), v| {
        let w = (v - top).exp();
        (a + w, b + w * w)
    });
    let mean = s1 / m;
    let var = ((s2 - m * mean * mean) / (m - 1.0)).max(0.0);
    (top + mean.ln(), (var / m).sqrt() / mean)
}

/// Importance-sampling estimate of `Σ_i ln ∫ f(y_i | z) p(z) dz` with proposal
/// `N(μ̂_i, Σ̂_i + I)` for each individual.
pub fn is_loglik<M: LatentModel>(
    model: &M,
    data: &Dataset,
    moments: &PosteriorMoments,
    draws: usize,
    seed: u64,
) -> Result<IsEstimate> {
    if draws < 2 {
        return Err(Error::domain(
            "importance sampling needs at least two draws",
        ));
    }
    let k = model.attributes();
    if moments.individuals() != data.individuals()
        || moments.k != k
        || data.items() != model.items()
    {
        return Err(Error::Shape("moments, data and model disagree".into()));
    }
    let per: Vec<(f64, f64, bool)> = (0..data.individuals())
        .into_par_iter()
        .map(|i| -> Result<(f64, f64, bool)> {
            let mut cov = moments.cov[i].clone();
            for c in 0..k {
                cov[c * k + c] += 1.0;
            }
            let (factor, fallback) = match linalg::cholesky(&cov, k) {
                Ok(l) => (l, false),
                Err(_) => {
                    log::warn!(
                        "individual {}: proposal covariance not positive definite, using identity",
                        i + 1
                    );
                    (LowerTriangular::identity(k).as_slice().to_vec(), true)
                }
            };
            let lq = LowerTriangular::from_dense(k, factor)?;
            let mean = &moments.mean[i];
            let y = data.row(i);
            let mut rng = rng::stream(seed, &[DOMAIN_IS, i as u64]);
            let mut eval = Evaluation::new(k, model.items());
            let mut e = vec![0.0; k];
            let mut z = vec![0.0; k];
            let mut log_w = Vec::with_capacity(draws);
            for _ in 0..draws {
                e.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                linalg::lower_matvec(lq.as_slice(), k, &e, &mut z);
                z.iter_mut().zip(mean).for_each(|(a, m)| *a += m);
                let joint = model.evaluate(y, &z, &mut eval)?;
                log_w.push(joint - mvn_log_density(&z, mean, &lq));
            }
            let (l, se) = summarize(&log_w);
            Ok((l, se, fallback))
        })
        .collect::<Result<_>>()?;
    let per_unit: Vec<f64> = per.iter().map(|p| p.0).collect();
    Ok(IsEstimate {
        loglik: per_unit.iter().sum(),
        per_unit,
        per_unit_se: per.iter().map(|p| p.1).collect(),
        fallbacks: per
            .iter()
            .enumerate()
            .filter(|(_, p)| p.2)
            .map(|(i, _)| i)
            .collect(),
    })
}

/// Nodes and weights of `n`-point Gauss-Hermite quadrature for the weight
/// `exp(−x²)`, by Newton iteration on the orthonormal recurrence.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::domain("quadrature needs at least one node"));
    }
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NumericalFailure {
                item: usize::MAX,
                detail: format!("Gauss-Hermite root {i} of {n} did not converge"),
            });
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // ascending order
    x.reverse();
    w.reverse();
    Ok((x, w))
}

/// Marginal log-likelihood by tensor Gauss-Hermite quadrature on the
/// Gaussian scale, `z = μ + √2 L x`. Limited to three attributes.
pub fn quad_loglik<M: LatentModel>(model: &M, data: &Dataset, nodes: usize) -> Result<f64> {
    let k = model.attributes();
    if k > 3 {
        return Err(Error::Unsupported(format!(
            "quadrature is limited to K <= 3, got {k}"
        )));
    }
    if data.items() != model.items() {
        return Err(Error::Shape("data and model disagree".into()));
    }
    if model.items() == 0 {
        return Ok(0.0);
    }
    let (x, w) = gauss_hermite(nodes)?;
    let (mean, l) = model.prior();
    let zero = vec![0.0; k];
    let mean = mean.unwrap_or(&zero);
    let total = nodes.pow(k as u32);
    // lattice of latent points and log-weights, shared by all individuals
    let mut points = Vec::with_capacity(total);
    let mut log_weights = Vec::with_capacity(total);
    let norm = -0.5 * k as f64 * std::f64::consts::PI.ln();
    let mut idx = vec![0usize; k];
    let mut xs = vec![0.0; k];
    let mut z = vec![0.0; k];
    for _ in 0..total {
        let mut lw = norm;
        for c in 0..k {
            xs[c] = std::f64::consts::SQRT_2 * x[idx[c]];
            lw += w[idx[c]].ln();
        }
        linalg::lower_matvec(l.as_slice(), k, &xs, &mut z);
        let zp: Vec<f64> = z.iter().zip(mean).map(|(a, m)| a + m).collect();
        let prior = mvn_log_density(&zp, mean, l);
        points.push((zp, prior));
        log_weights.push(lw);
        for c in 0..k {
            idx[c] += 1;
            if idx[c] < nodes {
                break;
            }
            idx[c] = 0;
        }
    }
    let per: Vec<f64> = (0..data.individuals())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let y = data.row(i);
            let mut eval = Evaluation::new(k, model.items());
            let mut terms = Vec::with_capacity(total);
            for ((zp, prior), lw) in points.iter().zip(&log_weights) {
                let joint = model.evaluate(y, zp, &mut eval)?;
                terms.push(lw + joint - prior);
            }
            Ok(log_sum_exp(&terms))
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum())
}
