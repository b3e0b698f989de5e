//! Complete-data log-density on the Gaussian latent scale and its exact
//! gradients.
//!
//! For an individual with responses `y` and latent position `z` (with
//! `u = Φ(z)`) the complete-data log-density is
//! `Σ_j [y_j ln π_j(u) + (1 − y_j) ln(1 − π_j(u))] + ln N_K(z; μ, L Lᵀ)`.
//! Both models share one evaluation routine that produces the value, the
//! gradient in `z` and the intermediate quantities needed for the parameter
//! gradient, so a sampler step and a gradient accumulation reuse the same work.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    normal_cdf, normal_pdf, ApmParams, GapmParams, KnotGrid, LowerTriangular, QMatrix,
};

/// Item probabilities are clamped into `[PI_EPS, 1 − PI_EPS]` before logs.
pub const PI_EPS: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A latent position on the Gaussian scale with its uniform-scale image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentPoint {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

impl LatentPoint {
    pub fn from_z(z: Vec<f64>) -> Self {
        let u = z.iter().map(|&v| normal_cdf(v)).collect();
        LatentPoint { z, u }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Work buffers and results of one density evaluation.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub log_density: f64,
    pub grad_z: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    phi: Vec<f64>,
    seg: Vec<usize>,
    frac: Vec<f64>,
    /// `y_j/π_j − (1 − y_j)/(1 − π_j)` per item.
    resid: Vec<f64>,
    /// `Σ⁻¹ (z − μ)`.
    prior_w: Vec<f64>,
    /// `L⁻¹ (z − μ)`.
    prior_v: Vec<f64>,
    centered: Vec<f64>,
}

impl Evaluation {
    pub fn new(k: usize, j: usize) -> Self {
        let mut e = Evaluation::default();
        e.resize(k, j);
        e
    }

    fn resize(&mut self, k: usize, j: usize) {
        for v in [
            &mut self.grad_z,
            &mut self.z,
            &mut self.u,
            &mut self.phi,
            &mut self.frac,
            &mut self.prior_w,
            &mut self.prior_v,
            &mut self.centered,
        ] {
            v.resize(k, 0.0);
        }
        self.seg.resize(k, 0);
        self.resid.resize(j, 0.0);
    }

    pub fn point(&self) -> LatentPoint {
        LatentPoint {
            z: self.z.clone(),
            u: self.u.clone(),
        }
    }

    fn load(&mut self, z: &[f64], k: usize, j: usize) {
        self.resize(k, j);
        self.z.copy_from_slice(z);
        for c in 0..k {
            self.u[c] = normal_cdf(z[c]);
            self.phi[c] = normal_pdf(z[c]);
        }
        self.grad_z.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Gaussian prior `N(mean, L Lᵀ)` contribution; `mean = None` is zero.
    fn add_gaussian_prior(&mut self, l: &[f64], k: usize, mean: Option<&[f64]>) -> f64 {
        for c in 0..k {
            self.centered[c] = self.z[c] - mean.map_or(0.0, |m| m[c]);
        }
        linalg::solve_lower(l, k, &self.centered, &mut self.prior_v);
        linalg::solve_lower_transpose(l, k, &self.prior_v, &mut self.prior_w);
        let quad: f64 = self.prior_v.iter().map(|v| v * v).sum();
        for c in 0..k {
            self.grad_z[c] -= self.prior_w[c];
        }
        -0.5 * k as f64 * LN_2PI - linalg::half_log_det(l, k) - 0.5 * quad
    }
}

#[inline]
fn bernoulli_term(y: u8, pi: f64) -> (f64, f64) {
    let p = pi.clamp(PI_EPS, 1.0 - PI_EPS);
    if y == 1 {
        (p.ln(), 1.0 / p)
    } else {
        ((1.0 - p).ln(), -1.0 / (1.0 - p))
    }
}

fn check_finite(eval: &Evaluation, item_terms: impl Iterator<Item = f64>) -> Result<()> {
    if eval.log_density.is_finite() && eval.grad_z.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    let item = item_terms
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map_or(usize::MAX, |(j, _)| j);
    Err(Error::NumericalFailure {
        item,
        detail: "non-finite complete-data log-density".into(),
    })
}

/// A latent-variable model whose complete-data density can be evaluated and
/// differentiated; parameter gradients accumulate into `Gradient`.
pub trait LatentModel: Sync {
    type Gradient: Send + Clone;

    fn attributes(&self) -> usize;
    fn items(&self) -> usize;

    /// Evaluates the complete-data log-density and its z-gradient at `z`.
    fn evaluate(&self, y: &[u8], z: &[f64], eval: &mut Evaluation) -> Result<f64>;

    fn zero_gradient(&self) -> Self::Gradient;

    /// Adds the parameter gradient at the point held by `eval`.
    fn accumulate_gradient(&self, y: &[u8], eval: &Evaluation, acc: &mut Self::Gradient);

    fn merge_gradient(acc: &mut Self::Gradient, other: &Self::Gradient);

    /// Item response probability of item `j` at `u`.
    fn irf(&self, j: usize, u: &[f64]) -> f64;

    /// Mean (`None` for zero) and Cholesky factor of the Gaussian prior on z.
    fn prior(&self) -> (Option<&[f64]>, &LowerTriangular);
}

/// Gradient of the generalized additive model's complete-data log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    /// Per item, length K.
    pub d_alpha: Vec<Vec<f64>>,
    /// Per `(j, k)` with `q_jk = 1`, length S.
    pub d_theta: Vec<Vec<Option<Vec<f64>>>>,
    /// Row-major K×K, lower triangle only.
    pub d_chol: Vec<f64>,
}

/// Accumulator form of [`ParamGradient`].
///
/// Sieve gradients are kept in a compressed form: adding `c` to every
/// increment below segment `m` is recorded as `below[m] += c` and expanded
/// once by a suffix sum in [`GapmGradient::finish`].
#[derive(Debug, Clone, PartialEq)]
pub struct GapmGradient {
    pub(crate) k: usize,
    pub(crate) s: usize,
    pub(crate) d_alpha: Vec<f64>,
    pub(crate) theta_at: Vec<f64>,
    pub(crate) theta_below: Vec<f64>,
    pub(crate) d_chol: Vec<f64>,
}

impl GapmGradient {
    /// Expanded per-increment sieve gradient of pair `(j, k)`.
    pub(crate) fn theta_grad(&self, j: usize, k: usize, out: &mut [f64]) {
        let base = (j * self.k + k) * self.s;
        let at = &self.theta_at[base..base + self.s];
        let below = &self.theta_below[base..base + self.s];
        let mut tail = 0.0;
        for m in (0..self.s).rev() {
            out[m] = at[m] + tail;
            tail += below[m];
        }
    }

    pub(crate) fn alpha(&self, j: usize) -> &[f64] {
        &self.d_alpha[j * self.k..(j + 1) * self.k]
    }

    pub fn finish(&self, q: &QMatrix) -> ParamGradient {
        let d_alpha = (0..q.items()).map(|j| self.alpha(j).to_vec()).collect();
        let d_theta = (0..q.items())
            .map(|j| {
                (0..self.k)
                    .map(|k| {
                        q.get(j, k).then(|| {
                            let mut v = vec![0.0; self.s];
                            self.theta_grad(j, k, &mut v);
                            v
                        })
                    })
                    .collect()
            })
            .collect();
        ParamGradient {
            d_alpha,
            d_theta,
            d_chol: self.d_chol.clone(),
        }
    }
}

fn add_slices(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Generalized additive model with precomputed sieve tables.
#[derive(Debug, Clone)]
pub struct GapmModel {
    q: QMatrix,
    params: GapmParams,
    grid: Arc<KnotGrid>,
    /// Active attributes per item.
    active: Vec<Vec<usize>>,
    /// Prefix sums of increments per `(j, k)`, length S + 1.
    cum: Vec<f64>,
    /// Segment slopes per `(j, k)`, length S.
    slope: Vec<f64>,
}

impl GapmModel {
    pub fn new(q: QMatrix, params: GapmParams) -> Result<Self> {
        params.validate(&q)?;
        Self::new_unvalidated(q, params)
    }

    /// Builds the model without checking the simplex and sphere constraints,
    /// so the density can be evaluated (and differentiated numerically) on the
    /// ambient parameter space. Shapes must still agree with `q`.
    pub fn new_unvalidated(q: QMatrix, params: GapmParams) -> Result<Self> {
        if params.weights.len() != q.items()
            || params.sieves.len() != q.items()
            || params.chol.factor().dim() != q.attributes()
        {
            return Err(Error::Shape("parameter bundle does not match Q".into()));
        }
        // a test with no items has no sieves; any grid will do
        let grid = match params.grid() {
            Some(g) => g.clone(),
            None => Arc::new(KnotGrid::uniform(2)?),
        };
        let active = (0..q.items())
            .map(|j| (0..q.attributes()).filter(|&k| q.get(j, k)).collect())
            .collect();
        let s = grid.segments();
        let mut m = GapmModel {
            cum: vec![0.0; q.items() * q.attributes() * (s + 1)],
            slope: vec![0.0; q.items() * q.attributes() * s],
            q,
            params,
            grid,
            active,
        };
        m.refresh();
        Ok(m)
    }

    /// Rebuilds the sieve tables after the parameters changed.
    pub(crate) fn refresh(&mut self) {
        let s = self.grid.segments();
        let widths = self.grid.widths();
        let k_dim = self.q.attributes();
        for j in 0..self.q.items() {
            for &k in &self.active[j] {
                let theta = self.params.sieves[j][k].as_ref().unwrap().theta();
                let idx = j * k_dim + k;
                let cum = &mut self.cum[idx * (s + 1)..(idx + 1) * (s + 1)];
                cum[0] = 0.0;
                for m in 0..s {
                    cum[m + 1] = cum[m] + theta[m];
                }
                let slope = &mut self.slope[idx * s..(idx + 1) * s];
                for m in 0..s {
                    slope[m] = theta[m] / widths[m];
                }
            }
        }
    }

    pub fn params(&self) -> &GapmParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut GapmParams {
        &mut self.params
    }

    pub fn q(&self) -> &QMatrix {
        &self.q
    }

    pub fn grid(&self) -> &Arc<KnotGrid> {
        &self.grid
    }

    pub fn into_params(self) -> GapmParams {
        self.params
    }

    #[inline]
    fn sieve_value(&self, idx: usize, seg: usize, frac: f64) -> f64 {
        let s = self.grid.segments();
        let cum = &self.cum[idx * (s + 1)..];
        cum[seg] + (cum[seg + 1] - cum[seg]) * frac
    }
}

impl LatentModel for GapmModel {
    type Gradient = GapmGradient;

    fn attributes(&self) -> usize {
        self.q.attributes()
    }

    fn items(&self) -> usize {
        self.q.items()
    }

    fn evaluate(&self, y: &[u8], z: &[f64], eval: &mut Evaluation) -> Result<f64> {
        let k_dim = self.q.attributes();
        let j_dim = self.q.items();
        let s = self.grid.segments();
        eval.load(z, k_dim, j_dim);
        for c in 0..k_dim {
            let (m, f) = self.grid.locate(eval.u[c]);
            eval.seg[c] = m;
            eval.frac[c] = f;
        }
        let mut ll = 0.0;
        for j in 0..j_dim {
            let alpha = &self.params.weights[j].alpha;
            let mut pi = 0.0;
            for &k in &self.active[j] {
                pi += alpha[k] * self.sieve_value(j * k_dim + k, eval.seg[k], eval.frac[k]);
            }
            let (term, r) = bernoulli_term(y[j], pi);
            ll += term;
            eval.resid[j] = r;
            for &k in &self.active[j] {
                let slope = self.slope[(j * k_dim + k) * s + eval.seg[k]];
                eval.grad_z[k] += r * alpha[k] * slope * eval.phi[k];
            }
        }
        let l = self.params.chol.factor().as_slice();
        ll += eval.add_gaussian_prior(l, k_dim, None);
        eval.log_density = ll;
        check_finite(eval, eval.resid.iter().copied())?;
        Ok(ll)
    }

    fn zero_gradient(&self) -> GapmGradient {
        let k = self.q.attributes();
        let j = self.q.items();
        let s = self.grid.segments();
        GapmGradient {
            k,
            s,
            d_alpha: vec![0.0; j * k],
            theta_at: vec![0.0; j * k * s],
            theta_below: vec![0.0; j * k * s],
            d_chol: vec![0.0; k * k],
        }
    }

    fn accumulate_gradient(&self, _y: &[u8], eval: &Evaluation, acc: &mut GapmGradient) {
        let k_dim = self.q.attributes();
        let s = self.grid.segments();
        for j in 0..self.q.items() {
            let r = eval.resid[j];
            let alpha = &self.params.weights[j].alpha;
            for &k in &self.active[j] {
                let idx = j * k_dim + k;
                let seg = eval.seg[k];
                acc.d_alpha[idx] += r * self.sieve_value(idx, seg, eval.frac[k]);
                let c = r * alpha[k];
                acc.theta_at[idx * s + seg] += c * eval.frac[k];
                acc.theta_below[idx * s + seg] += c;
            }
        }
        let l = self.params.chol.factor();
        for r in 0..k_dim {
            for c in 0..=r {
                acc.d_chol[r * k_dim + c] += eval.prior_w[r] * eval.prior_v[c];
            }
            acc.d_chol[r * k_dim + r] -= 1.0 / l.get(r, r);
        }
    }

    fn merge_gradient(acc: &mut GapmGradient, other: &GapmGradient) {
        add_slices(&mut acc.d_alpha, &other.d_alpha);
        add_slices(&mut acc.theta_at, &other.theta_at);
        add_slices(&mut acc.theta_below, &other.theta_below);
        add_slices(&mut acc.d_chol, &other.d_chol);
    }

    fn irf(&self, j: usize, u: &[f64]) -> f64 {
        self.params.irf(&self.q, j, u)
    }

    fn prior(&self) -> (Option<&[f64]>, &LowerTriangular) {
        (None, self.params.chol.factor())
    }
}

/// Gradient of the additive model's complete-data log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct ApmGradient {
    /// Per item, `(∂δ_0, ∂δ_1, …, ∂δ_K)`.
    pub d_delta: Vec<Vec<f64>>,
    pub d_mean: Vec<f64>,
    /// Row-major K×K, lower triangle only.
    pub d_chol: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ApmModel {
    q: QMatrix,
    params: ApmParams,
}

impl ApmModel {
    pub fn new(q: QMatrix, params: ApmParams) -> Result<Self> {
        params.validate(&q)?;
        Ok(ApmModel { q, params })
    }

    /// See [`GapmModel::new_unvalidated`].
    pub fn new_unvalidated(q: QMatrix, params: ApmParams) -> Result<Self> {
        if params.delta.len() != q.items() || params.mean.len() != q.attributes() {
            return Err(Error::Shape("aPM parameter bundle does not match Q".into()));
        }
        Ok(ApmModel { q, params })
    }

    pub fn params(&self) -> &ApmParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ApmParams {
        &mut self.params
    }

    pub fn q(&self) -> &QMatrix {
        &self.q
    }

    pub fn into_params(self) -> ApmParams {
        self.params
    }
}

impl LatentModel for ApmModel {
    type Gradient = ApmGradient;

    fn attributes(&self) -> usize {
        self.q.attributes()
    }

    fn items(&self) -> usize {
        self.q.items()
    }

    fn evaluate(&self, y: &[u8], z: &[f64], eval: &mut Evaluation) -> Result<f64> {
        let k_dim = self.q.attributes();
        let j_dim = self.q.items();
        eval.load(z, k_dim, j_dim);
        let mut ll = 0.0;
        for j in 0..j_dim {
            let d = &self.params.delta[j];
            let q_row = self.q.row(j);
            let mut pi = d[0];
            for k in 0..k_dim {
                if q_row[k] == 1 {
                    pi += d[k + 1] * eval.u[k];
                }
            }
            let (term, r) = bernoulli_term(y[j], pi);
            ll += term;
            eval.resid[j] = r;
            for k in 0..k_dim {
                if q_row[k] == 1 {
                    eval.grad_z[k] += r * d[k + 1] * eval.phi[k];
                }
            }
        }
        let l = self.params.cov_chol.as_slice();
        ll += eval.add_gaussian_prior(l, k_dim, Some(&self.params.mean));
        eval.log_density = ll;
        check_finite(eval, eval.resid.iter().copied())?;
        Ok(ll)
    }

    fn zero_gradient(&self) -> ApmGradient {
        let k = self.q.attributes();
        ApmGradient {
            d_delta: vec![vec![0.0; k + 1]; self.q.items()],
            d_mean: vec![0.0; k],
            d_chol: vec![0.0; k * k],
        }
    }

    fn accumulate_gradient(&self, _y: &[u8], eval: &Evaluation, acc: &mut ApmGradient) {
        let k_dim = self.q.attributes();
        for j in 0..self.q.items() {
            let r = eval.resid[j];
            let q_row = self.q.row(j);
            let d = &mut acc.d_delta[j];
            d[0] += r;
            for k in 0..k_dim {
                if q_row[k] == 1 {
                    d[k + 1] += r * eval.u[k];
                }
            }
        }
        let l = &self.params.cov_chol;
        for r in 0..k_dim {
            acc.d_mean[r] += eval.prior_w[r];
            for c in 0..=r {
                acc.d_chol[r * k_dim + c] += eval.prior_w[r] * eval.prior_v[c];
            }
            acc.d_chol[r * k_dim + r] -= 1.0 / l.get(r, r);
        }
    }

    fn merge_gradient(acc: &mut ApmGradient, other: &ApmGradient) {
        for (a, b) in acc.d_delta.iter_mut().zip(&other.d_delta) {
            add_slices(a, b);
        }
        add_slices(&mut acc.d_mean, &other.d_mean);
        add_slices(&mut acc.d_chol, &other.d_chol);
    }

    fn irf(&self, j: usize, u: &[f64]) -> f64 {
        self.params.irf(&self.q, j, u)
    }

    fn prior(&self) -> (Option<&[f64]>, &LowerTriangular) {
        (Some(&self.params.mean), &self.params.cov_chol)
    }
}

fn gapm_model(params: &GapmParams, q: &QMatrix) -> Result<GapmModel> {
    GapmModel::new(q.clone(), params.clone())
}

/// Complete-data log-density `ln f(y, z)` of the generalized additive model.
pub fn complete_loglik(
    y: &[u8],
    point: &LatentPoint,
    params: &GapmParams,
    q: &QMatrix,
) -> Result<f64> {
    let m = gapm_model(params, q)?;
    let mut e = Evaluation::new(q.attributes(), q.items());
    m.evaluate(y, &point.z, &mut e)
}

/// `∇_z ln f(y, z)`; the Langevin drift.
pub fn grad_z(y: &[u8], point: &LatentPoint, params: &GapmParams, q: &QMatrix) -> Result<Vec<f64>> {
    let m = gapm_model(params, q)?;
    let mut e = Evaluation::new(q.attributes(), q.items());
    m.evaluate(y, &point.z, &mut e)?;
    Ok(e.grad_z)
}

/// Gradient of `ln f(y, z)` with respect to weights, sieve increments and the
/// correlation factor.
pub fn grad_params(
    y: &[u8],
    point: &LatentPoint,
    params: &GapmParams,
    q: &QMatrix,
) -> Result<ParamGradient> {
    let m = gapm_model(params, q)?;
    let mut e = Evaluation::new(q.attributes(), q.items());
    m.evaluate(y, &point.z, &mut e)?;
    let mut acc = m.zero_gradient();
    m.accumulate_gradient(y, &e, &mut acc);
    Ok(acc.finish(q))
}

/// Complete-data log-density of the additive model.
pub fn apm_complete_loglik(
    y: &[u8],
    point: &LatentPoint,
    params: &ApmParams,
    q: &QMatrix,
) -> Result<f64> {
    let m = ApmModel::new(q.clone(), params.clone())?;
    let mut e = Evaluation::new(q.attributes(), q.items());
    m.evaluate(y, &point.z, &mut e)
}

/// z-gradient and parameter gradient of the additive model.
pub fn apm_grads(
    y: &[u8],
    point: &LatentPoint,
    params: &ApmParams,
    q: &QMatrix,
) -> Result<(Vec<f64>, ApmGradient)> {
    let m = ApmModel::new(q.clone(), params.clone())?;
    let mut e = Evaluation::new(q.attributes(), q.items());
    m.evaluate(y, &point.z, &mut e)?;
    let mut acc = m.zero_gradient();
    m.accumulate_gradient(y, &e, &mut acc);
    Ok((e.grad_z.clone(), acc))
}

/// Log-density of `N(mean, L Lᵀ)` at `z`, used by tests and the IS proposal.
pub fn mvn_log_density(z: &[f64], mean: &[f64], l: &LowerTriangular) -> f64 {
    let k = z.len();
    let d: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut v = vec![0.0; k];
    linalg::solve_lower(l.as_slice(), k, &d, &mut v);
    -0.5 * k as f64 * LN_2PI
        - linalg::half_log_det(l.as_slice(), k)
        - 0.5 * v.iter().map(|x| x * x).sum::<f64>()
}
