//! Closed-form mirror-ascent updates: exponentiated gradient on simplexes and
//! projected gradient on the unit sphere, plus the decreasing step schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::ApmGradient;
use crate::model::{ApmParams, ItemWeights, LowerTriangular, QMatrix, DIAG_FLOOR};

/// Step constants per parameter block; `γ_t = μ · t^(−0.5−ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub mu_alpha: f64,
    pub mu_theta: f64,
    pub mu_l: f64,
    pub mu_delta: f64,
    pub epsilon: f64,
}

impl StepSchedule {
    /// `μ_α = μ_θ = μ_l = 1/N`.
    pub fn gapm_default(n: usize) -> Self {
        let mu = 1.0 / n.max(1) as f64;
        StepSchedule {
            mu_alpha: mu,
            mu_theta: mu,
            mu_l: mu,
            mu_delta: mu,
            epsilon: 0.01,
        }
    }

    /// `μ_δ = μ_l = 1/N`, or `0.3/N` when the data may come from another model.
    pub fn apm_default(n: usize, misspecified: bool) -> Self {
        let mu = if misspecified { 0.3 } else { 1.0 } / n.max(1) as f64;
        StepSchedule {
            mu_alpha: mu,
            mu_theta: mu,
            mu_l: mu,
            mu_delta: mu,
            epsilon: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mu_alpha", self.mu_alpha),
            ("mu_theta", self.mu_theta),
            ("mu_l", self.mu_l),
            ("mu_delta", self.mu_delta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

pub fn step_size(t: u64, mu: f64, epsilon: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::domain("step index starts at 1"));
    }
    Ok(mu * (t as f64).powf(-0.5 - epsilon))
}

/// Largest change of any coordinate's log-ratio to the weighted mean in
/// one exponentiated-gradient step.
pub const MAX_LOG_STEP: f64 = 1.0;

/// In-place exponentiated-gradient step on the entries selected by `mask`
/// (all entries when `None`). Returns false for a non-finite gradient or
/// when no active entry is positive.
///
/// Near a face of the simplex the gradient of a coordinate grows like the
/// reciprocal of the coordinate, and a single step can throw all mass onto
/// one vertex. Each coordinate's exponent `γ(g_i − ḡ)`, with `ḡ` the
/// gradient averaged under the current iterate, is therefore clipped to
/// `±MAX_LOG_STEP`. Active entries are kept at or above the smallest normal
/// float so that none can underflow to a zero that could never recover.
fn exp_grad_in_place(x: &mut [f64], grad: &[f64], gamma: f64, mask: Option<&[u8]>) -> bool {
    let active = |i: usize| mask.is_none_or(|m| m[i] == 1);
    let live: Vec<usize> = (0..x.len()).filter(|&i| active(i) && x[i] > 0.0).collect();
    if live.is_empty() || (0..x.len()).any(|i| active(i) && !grad[i].is_finite()) {
        return false;
    }
    let mass: f64 = live.iter().map(|&i| x[i]).sum();
    let mean = live.iter().map(|&i| x[i] * grad[i]).sum::<f64>() / mass;
    let step = |i: usize| (gamma * (grad[i] - mean)).clamp(-MAX_LOG_STEP, MAX_LOG_STEP);
    let shift = live
        .iter()
        .map(|&i| step(i))
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return false;
    }
    let mut total = 0.0;
    for i in 0..x.len() {
        x[i] = if active(i) {
            (x[i] * (step(i) - shift).exp()).max(f64::MIN_POSITIVE)
        } else {
            0.0
        };
        total += x[i];
    }
    x.iter_mut().for_each(|v| *v /= total);
    true
}

/// `α ← α ⊙ exp(γ·grad) ⊙ q`, renormalized over the active attributes.
pub fn update_weights(
    alpha: &ItemWeights,
    grad: &[f64],
    gamma: f64,
    q_row: &[u8],
) -> Result<ItemWeights> {
    let mut out = alpha.clone();
    if !exp_grad_in_place(&mut out.alpha, grad, gamma, Some(q_row)) {
        return Err(Error::InvalidState(
            "weight update has no active entry or a non-finite gradient".into(),
        ));
    }
    Ok(out)
}

/// Exponentiated-gradient step for the sieve increments.
pub fn update_theta(theta: &[f64], grad: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let mut out = theta.to_vec();
    if !exp_grad_in_place(&mut out, grad, gamma, None) {
        return Err(Error::InvalidState(
            "sieve update has no positive entry or a non-finite gradient".into(),
        ));
    }
    Ok(out)
}

pub(crate) fn update_theta_in_place(theta: &mut [f64], grad: &[f64], gamma: f64) -> Result<()> {
    if !exp_grad_in_place(theta, grad, gamma, None) {
        return Err(Error::InvalidState(
            "sieve update has no positive entry or a non-finite gradient".into(),
        ));
    }
    Ok(())
}

/// Gradient step on a row of the correlation factor followed by projection
/// back to the unit sphere. The last entry is the diagonal and is floored.
pub fn update_chol_row(row: &[f64], grad: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = row.iter().zip(grad).map(|(r, g)| r + gamma * g).collect();
    project_sphere_row(&mut out)?;
    Ok(out)
}

/// Floors the trailing diagonal entry and rescales to unit Euclidean norm.
pub(crate) fn project_sphere_row(row: &mut [f64]) -> Result<()> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= 1e-12) {
        return Err(Error::DegenerateUpdate(format!(
            "correlation row collapsed (norm {norm:e})"
        )));
    }
    if let Some(d) = row.last_mut() {
        *d = d.max(DIAG_FLOOR * norm);
    }
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter_mut().for_each(|v| *v /= norm);
    Ok(())
}

/// Updates the additive model: the intercept, active slopes and slack of each
/// item share one simplex; mean and covariance factor take plain ascent steps.
pub fn update_apm(
    params: &ApmParams,
    grads: &ApmGradient,
    gamma_delta: f64,
    gamma_musig: f64,
    q: &QMatrix,
) -> Result<ApmParams> {
    let k = q.attributes();
    let mut out = params.clone();
    let mut aug = vec![0.0; k + 2];
    let mut g = vec![0.0; k + 2];
    for j in 0..q.items() {
        let d = &params.delta[j];
        let used: f64 = d[0]
            + (0..k)
                .filter(|&c| q.get(j, c))
                .map(|c| d[c + 1])
                .sum::<f64>();
        aug[..=k].copy_from_slice(d);
        aug[k + 1] = (1.0 - used).max(0.0);
        g[..=k].copy_from_slice(&grads.d_delta[j]);
        g[k + 1] = 0.0;
        let mut mask = vec![1u8; k + 2];
        mask[1..=k].copy_from_slice(q.row(j));
        if !exp_grad_in_place(&mut aug, &g, gamma_delta, Some(&mask)) {
            return Err(Error::InvalidState(format!(
                "intercept/slope update of item {j} collapsed"
            )));
        }
        out.delta[j].copy_from_slice(&aug[..=k]);
    }
    for c in 0..k {
        out.mean[c] += gamma_musig * grads.d_mean[c];
    }
    let mut data = params.cov_chol.as_slice().to_vec();
    for r in 0..k {
        for c in 0..=r {
            data[r * k + c] += gamma_musig * grads.d_chol[r * k + c];
        }
        data[r * k + r] = data[r * k + r].max(DIAG_FLOOR);
    }
    out.cov_chol = LowerTriangular::from_dense(k, data)?;
    Ok(out)
}
