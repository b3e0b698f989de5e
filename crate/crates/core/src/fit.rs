//! Stochastic-approximation mirror-descent fitting.
//!
//! Each iteration moves every individual's Langevin chain one step under the
//! current parameters, sums the complete-data gradients at the new draws and
//! takes one mirror-ascent step per parameter block. Parameters and latent
//! draws after burn-in are averaged.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::average_ranks;
use crate::likelihood::{ApmGradient, ApmModel, GapmGradient, GapmModel, LatentModel};
use crate::mala::{ChainState, MalaConfig, Sampler};
use crate::mirror_descent::{self, step_size, StepSchedule};
use crate::model::{
    normal_quantile, ApmParams, Dataset, GapmParams, KnotGrid, QMatrix, DIAG_FLOOR,
};
use crate::rng::{self, DOMAIN_INIT, DOMAIN_MALA, DOMAIN_MOMENTS};

/// Individuals per work unit. Fixed so that sums are formed in the same
/// order whatever the number of worker threads.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Confirmatory,
    /// Every item loads on every attribute.
    Exploratory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gapm,
    Apm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: u64,
    pub burn_in: u64,
    pub schedule: StepSchedule,
    pub mala: MalaConfig,
    pub seed: u64,
    pub mode: Mode,
    /// Iterations between progress checkpoints; `None` gives `max(1, T/100)`.
    pub checkpoint_every: Option<u64>,
}

impl FitConfig {
    /// Default constants for `n` individuals and `k` attributes.
    pub fn new(
        kind: ModelKind,
        iterations: u64,
        burn_in: u64,
        n: usize,
        k: usize,
        seed: u64,
    ) -> Self {
        let schedule = match kind {
            ModelKind::Gapm => StepSchedule::gapm_default(n),
            ModelKind::Apm => StepSchedule::apm_default(n, true),
        };
        FitConfig {
            iterations,
            burn_in,
            schedule,
            mala: MalaConfig::default_for(k),
            seed,
            mode: Mode::Confirmatory,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in ({}) must be smaller than the number of iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        self.schedule.validate()?;
        self.mala.validate()
    }

    fn checkpoint_interval(&self) -> u64 {
        self.checkpoint_every
            .unwrap_or((self.iterations / 100).max(1))
    }
}

/// Running posterior mean and covariance of each individual's latent draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMoments {
    pub k: usize,
    pub mean: Vec<Vec<f64>>,
    /// Row-major `K × K` per individual.
    pub cov: Vec<Vec<f64>>,
    /// Draws absorbed per individual.
    pub count: u64,
}

impl PosteriorMoments {
    pub fn new(n: usize, k: usize) -> Self {
        PosteriorMoments {
            k,
            mean: vec![vec![0.0; k]; n],
            cov: vec![vec![0.0; k * k]; n],
            count: 0,
        }
    }

    pub fn individuals(&self) -> usize {
        self.mean.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        PosteriorMoments {
            k: self.k,
            mean: idx.iter().map(|&i| self.mean[i].clone()).collect(),
            cov: idx.iter().map(|&i| self.cov[i].clone()).collect(),
            count: self.count,
        }
    }
}

/// Absorbs draw number `t` (0-based) into a running mean and covariance.
pub fn update_posterior_moments(mean: &mut [f64], cov: &mut [f64], z: &[f64], t: u64) {
    let k = z.len();
    let t = t as f64;
    let w = t / ((t + 1.0) * (t + 1.0));
    for r in 0..k {
        let dr = z[r] - mean[r];
        for c in 0..=r {
            let dc = z[c] - mean[c];
            let v = t * cov[r * k + c] / (t + 1.0) + w * dr * dc;
            cov[r * k + c] = v;
            cov[c * k + r] = v;
        }
    }
    for c in 0..k {
        mean[c] += (z[c] - mean[c]) / (t + 1.0);
    }
}

/// Per-individual mean of stored uniform-scale draws, indexed `[draw][i][k]`.
pub fn eap_scores(draws: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = draws
        .first()
        .ok_or_else(|| Error::domain("EAP scores need at least one draw"))?;
    let mut out = vec![vec![0.0; first.first().map_or(0, Vec::len)]; first.len()];
    for d in draws {
        for (acc, u) in out.iter_mut().zip(d) {
            acc.iter_mut().zip(u).for_each(|(a, v)| *a += v);
        }
    }
    let m = draws.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= m);
    Ok(out)
}

/// One progress record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<P> {
    pub iteration: u64,
    /// Acceptance rate over all proposals so far.
    pub acceptance_rate: f64,
    /// Summed complete-data log-density at the current draws.
    pub complete_loglik: f64,
    pub params: P,
}

impl<P> fmt::Display for Checkpoint<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} accept={:.4} loglik={:.6}",
            self.iteration, self.acceptance_rate, self.complete_loglik
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<P> {
    /// Post-burn-in average of the parameter trajectory.
    pub params: P,
    /// Post-burn-in mean of each individual's uniform-scale draws.
    pub eap_scores: Vec<Vec<f64>>,
    pub moments: PosteriorMoments,
    pub acceptance_rate: f64,
    pub trajectory: Vec<Checkpoint<P>>,
    /// Mean complete-data log-likelihood over the first and last tenth of
    /// the iterations.
    pub early_loglik: f64,
    pub late_loglik: f64,
    /// Proposals rejected for a non-finite acceptance ratio.
    pub numerical_warnings: u64,
    pub warnings: Vec<String>,
    /// Final latent position of each chain.
    pub final_z: Vec<Vec<f64>>,
}

/// A model that the driver can update in place and average.
pub trait SaMdModel: LatentModel + Sized {
    type Params: Clone;

    fn current(&self) -> &Self::Params;

    /// One mirror-ascent step with the summed gradient at iteration `t ≥ 1`.
    fn md_update(&mut self, grad: &Self::Gradient, t: u64, schedule: &StepSchedule) -> Result<()>;

    fn flat_len(&self) -> usize;

    /// Adds the flattened parameters into `acc`.
    fn accumulate_flat(&self, acc: &mut [f64]);

    /// Parameters from an averaged flat vector, projected onto the constraints.
    fn averaged(&self, avg: &[f64]) -> Result<Self::Params>;

    fn check_invariants(&self) -> Result<()>;
}

impl SaMdModel for GapmModel {
    type Params = GapmParams;

    fn current(&self) -> &GapmParams {
        self.params()
    }

    fn md_update(&mut self, grad: &GapmGradient, t: u64, schedule: &StepSchedule) -> Result<()> {
        let eps = schedule.epsilon;
        let g_alpha = step_size(t, schedule.mu_alpha, eps)?;
        let g_theta = step_size(t, schedule.mu_theta, eps)?;
        let g_l = step_size(t, schedule.mu_l, eps)?;
        let q = self.q().clone();
        let k_dim = q.attributes();
        let mut buf = vec![0.0; self.grid().segments()];
        let params = self.params_mut();
        for j in 0..q.items() {
            params.weights[j] = mirror_descent::update_weights(
                &params.weights[j],
                grad.alpha(j),
                g_alpha,
                q.row(j),
            )
            .map_err(|e| annotate(e, j))?;
            for k in 0..k_dim {
                if let Some(sieve) = params.sieves[j][k].as_mut() {
                    grad.theta_grad(j, k, &mut buf);
                    mirror_descent::update_theta_in_place(sieve.theta_mut(), &buf, g_theta)
                        .map_err(|e| annotate(e, j))?;
                }
            }
        }
        let l = params.chol.factor_mut();
        for r in 1..k_dim {
            let row = l.row_mut(r);
            for c in 0..=r {
                row[c] += g_l * grad.d_chol[r * k_dim + c];
            }
            mirror_descent::project_sphere_row(row)?;
        }
        self.refresh();
        Ok(())
    }

    fn flat_len(&self) -> usize {
        let q = self.q();
        let k = q.attributes();
        let active: usize = (0..q.items()).map(|j| q.row_count(j)).sum();
        q.items() * k + active * self.grid().segments() + k * k
    }

    fn accumulate_flat(&self, acc: &mut [f64]) {
        let p = self.params();
        let mut i = 0;
        for w in &p.weights {
            for &a in &w.alpha {
                acc[i] += a;
                i += 1;
            }
        }
        for s in p.sieves.iter().flatten().flatten() {
            for &v in s.theta() {
                acc[i] += v;
                i += 1;
            }
        }
        for &v in p.chol.factor().as_slice() {
            acc[i] += v;
            i += 1;
        }
    }

    fn averaged(&self, avg: &[f64]) -> Result<GapmParams> {
        let mut p = self.params().clone();
        let k = self.q().attributes();
        let mut i = 0;
        for w in p.weights.iter_mut() {
            w.alpha.copy_from_slice(&avg[i..i + k]);
            let s: f64 = w.alpha.iter().sum();
            w.alpha.iter_mut().for_each(|v| *v /= s);
            i += k;
        }
        for s in p.sieves.iter_mut().flatten().flatten() {
            let theta = s.theta_mut();
            let n = theta.len();
            theta.copy_from_slice(&avg[i..i + n]);
            let total: f64 = theta.iter().sum();
            theta.iter_mut().for_each(|v| *v /= total);
            i += n;
        }
        let l = p.chol.factor_mut();
        l.as_mut_slice().copy_from_slice(&avg[i..i + k * k]);
        for r in 1..k {
            mirror_descent::project_sphere_row(l.row_mut(r))?;
        }
        p.validate(self.q())?;
        Ok(p)
    }

    fn check_invariants(&self) -> Result<()> {
        self.params().validate(self.q())
    }
}

impl SaMdModel for ApmModel {
    type Params = ApmParams;

    fn current(&self) -> &ApmParams {
        self.params()
    }

    fn md_update(&mut self, grad: &ApmGradient, t: u64, schedule: &StepSchedule) -> Result<()> {
        let g_delta = step_size(t, schedule.mu_delta, schedule.epsilon)?;
        let g_l = step_size(t, schedule.mu_l, schedule.epsilon)?;
        let next = mirror_descent::update_apm(self.params(), grad, g_delta, g_l, self.q())?;
        *self.params_mut() = next;
        Ok(())
    }

    fn flat_len(&self) -> usize {
        let k = self.q().attributes();
        self.q().items() * (k + 1) + k + k * k
    }

    fn accumulate_flat(&self, acc: &mut [f64]) {
        let p = self.params();
        let flat = p
            .delta
            .iter()
            .flatten()
            .chain(&p.mean)
            .chain(p.cov_chol.as_slice());
        acc.iter_mut().zip(flat).for_each(|(a, v)| *a += v);
    }

    fn averaged(&self, avg: &[f64]) -> Result<ApmParams> {
        let mut p = self.params().clone();
        let k = self.q().attributes();
        let mut i = 0;
        for d in p.delta.iter_mut() {
            d.copy_from_slice(&avg[i..i + k + 1]);
            i += k + 1;
        }
        p.mean.copy_from_slice(&avg[i..i + k]);
        i += k;
        let l = p.cov_chol.as_mut_slice();
        l.copy_from_slice(&avg[i..i + k * k]);
        for r in 0..k {
            l[r * k + r] = l[r * k + r].max(DIAG_FLOOR);
        }
        p.validate(self.q())?;
        Ok(p)
    }

    fn check_invariants(&self) -> Result<()> {
        self.params().validate(self.q())
    }
}

fn annotate(e: Error, item: usize) -> Error {
    match e {
        Error::InvalidState(msg) => Error::InvalidState(format!("item {}: {msg}", item + 1)),
        other => other,
    }
}

/// Starting latent positions: the normal quantile of each individual's
/// rank-based proportion correct, copied to every attribute, plus N(0, 0.1²)
/// jitter.
pub fn initial_latent(data: &Dataset, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = data.individuals();
    let scores = data.proportion_correct();
    let ranks = average_ranks(&scores);
    (0..n)
        .map(|i| {
            let p = (ranks[i] / (n as f64 + 1.0)).clamp(0.01, 0.99);
            let base = normal_quantile(p).expect("clamped probability");
            let mut rng = rng::stream(seed, &[DOMAIN_INIT, i as u64]);
            (0..k)
                .map(|_| base + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// The design actually fitted: all ones in exploratory mode.
pub fn effective_q(q: &QMatrix, mode: Mode) -> QMatrix {
    match mode {
        Mode::Confirmatory => q.clone(),
        Mode::Exploratory => QMatrix::exploratory(q.items(), q.attributes()),
    }
}

/// Starting parameters and latent positions for the generalized model.
pub fn init_gapm(
    data: &Dataset,
    q: &QMatrix,
    grid: &Arc<KnotGrid>,
    seed: u64,
) -> Result<(GapmParams, Vec<Vec<f64>>)> {
    check_shapes(data, q)?;
    if let Some(j) = (0..q.items()).find(|&j| q.row_count(j) == 0) {
        return Err(Error::InvalidDesign(format!(
            "row {} of the Q-matrix measures no attribute",
            j + 1
        )));
    }
    let params = GapmParams::initial(q, grid)?;
    Ok((params, initial_latent(data, q.attributes(), seed)))
}

/// Starting parameters for the additive model: intercept and slack 0.1.
pub fn init_apm(data: &Dataset, q: &QMatrix, seed: u64) -> Result<(ApmParams, Vec<Vec<f64>>)> {
    check_shapes(data, q)?;
    let params = ApmParams::initial(q, 0.1, 0.1)?;
    Ok((params, initial_latent(data, q.attributes(), seed)))
}

fn check_shapes(data: &Dataset, q: &QMatrix) -> Result<()> {
    if data.items() != q.items() {
        return Err(Error::Shape(format!(
            "data has {} items but the Q-matrix has {}",
            data.items(),
            q.items()
        )));
    }
    if data.individuals() == 0 {
        return Err(Error::Shape("no individuals".into()));
    }
    Ok(())
}

fn degeneracy_warnings(data: &Dataset) -> Vec<String> {
    data.degenerate_items()
        .into_iter()
        .map(|j| {
            let msg = format!("item {} has no response variation", j + 1);
            log::warn!("{msg}");
            msg
        })
        .collect()
}

/// Fits the generalized additive model.
pub fn fit_gapm(
    data: &Dataset,
    q: &QMatrix,
    grid: &Arc<KnotGrid>,
    config: &FitConfig,
) -> Result<FitResult<GapmParams>> {
    config.validate()?;
    let q = effective_q(q, config.mode);
    let (params, starts) = init_gapm(data, &q, grid, config.seed)?;
    let model = GapmModel::new(q, params)?;
    run(model, data, starts, config)
}

/// Fits the additive model.
pub fn fit_apm(data: &Dataset, q: &QMatrix, config: &FitConfig) -> Result<FitResult<ApmParams>> {
    config.validate()?;
    let q = effective_q(q, config.mode);
    let (params, starts) = init_apm(data, &q, config.seed)?;
    let model = ApmModel::new(q, params)?;
    run(model, data, starts, config)
}

/// Either kind of fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FittedModel {
    Gapm(FitResult<GapmParams>),
    Apm(FitResult<ApmParams>),
}

pub fn fit(
    data: &Dataset,
    q: &QMatrix,
    grid: &Arc<KnotGrid>,
    config: &FitConfig,
    kind: ModelKind,
) -> Result<FittedModel> {
    Ok(match kind {
        ModelKind::Gapm => FittedModel::Gapm(fit_gapm(data, q, grid, config)?),
        ModelKind::Apm => FittedModel::Apm(fit_apm(data, q, config)?),
    })
}

struct Individual {
    chain: ChainState,
    eap_sum: Vec<f64>,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

struct Work<G> {
    sampler: Sampler,
    grad: G,
    loglik: f64,
}

/// Runs the driver from explicit starting values.
pub fn run<M: SaMdModel>(
    mut model: M,
    data: &Dataset,
    starts: Vec<Vec<f64>>,
    config: &FitConfig,
) -> Result<FitResult<M::Params>> {
    config.validate()?;
    let n = data.individuals();
    let k = model.attributes();
    let j = model.items();
    if data.items() != j || starts.len() != n {
        return Err(Error::Shape(
            "data, design and starting values disagree".into(),
        ));
    }
    let warnings = degeneracy_warnings(data);
    let h = config.mala.step_size(k);
    let inner = config.mala.inner_steps;
    let t_total = config.iterations;
    let every = config.checkpoint_interval();
    let decile = (t_total / 10).max(1);

    let mut people: Vec<Individual> = starts
        .into_iter()
        .map(|z| Individual {
            chain: ChainState::new(z),
            eap_sum: vec![0.0; k],
            mean: vec![0.0; k],
            cov: vec![0.0; k * k],
        })
        .collect();
    let mut work: Vec<Work<M::Gradient>> = (0..n.div_ceil(CHUNK))
        .map(|_| Work {
            sampler: Sampler::new(k, j),
            grad: model.zero_gradient(),
            loglik: 0.0,
        })
        .collect();

    let mut flat_sum = vec![0.0; model.flat_len()];
    let mut trajectory = Vec::new();
    let (mut early, mut late) = (0.0, 0.0);
    let mut late_count = 0u64;

    for t in 1..=t_total {
        let post = t > config.burn_in;
        let draw_index = t.saturating_sub(config.burn_in + 1);
        let model_ref = &model;
        people
            .par_chunks_mut(CHUNK)
            .zip(work.par_iter_mut())
            .enumerate()
            .try_for_each(|(c, (group, w))| -> Result<()> {
                w.grad = model_ref.zero_gradient();
                w.loglik = 0.0;
                for (off, person) in group.iter_mut().enumerate() {
                    let i = c * CHUNK + off;
                    let y = data.row(i);
                    let mut rng = rng::stream(config.seed, &[DOMAIN_MALA, i as u64, t]);
                    w.sampler
                        .transition(model_ref, y, &mut person.chain, h, inner, &mut rng)?;
                    let eval = w.sampler.current();
                    w.loglik += eval.log_density;
                    model_ref.accumulate_gradient(y, eval, &mut w.grad);
                    if post {
                        let p = &person.chain.point;
                        person
                            .eap_sum
                            .iter_mut()
                            .zip(&p.u)
                            .for_each(|(a, v)| *a += v);
                        update_posterior_moments(
                            &mut person.mean,
                            &mut person.cov,
                            &p.z,
                            draw_index,
                        );
                    }
                }
                Ok(())
            })?;

        let mut grad = model.zero_gradient();
        let mut loglik = 0.0;
        for w in &work {
            M::merge_gradient(&mut grad, &w.grad);
            loglik += w.loglik;
        }
        if t <= decile {
            early += loglik;
        }
        if t > t_total - decile {
            late += loglik;
            late_count += 1;
        }

        model.md_update(&grad, t, &config.schedule)?;
        if cfg!(debug_assertions) && t % 1000 == 0 {
            model.check_invariants()?;
        }
        if post {
            model.accumulate_flat(&mut flat_sum);
        }
        if t % every == 0 || t == t_total {
            let cp = Checkpoint {
                iteration: t,
                acceptance_rate: acceptance(&people),
                complete_loglik: loglik,
                params: model.current().clone(),
            };
            log::info!("{cp}");
            trajectory.push(cp);
        }
    }

    let kept = (t_total - config.burn_in) as f64;
    flat_sum.iter_mut().for_each(|v| *v /= kept);
    let params = model.averaged(&flat_sum)?;
    let numerical_warnings = people.iter().map(|p| p.chain.warnings).sum();
    let acceptance_rate = acceptance(&people);
    let eap_scores = people
        .iter()
        .map(|p| p.eap_sum.iter().map(|v| v / kept).collect())
        .collect();
    let final_z = people.iter().map(|p| p.chain.point.z.clone()).collect();
    let moments = PosteriorMoments {
        k,
        mean: people.iter().map(|p| p.mean.clone()).collect(),
        cov: people.into_iter().map(|p| p.cov).collect(),
        count: t_total - config.burn_in,
    };
    Ok(FitResult {
        params,
        eap_scores,
        moments,
        acceptance_rate,
        trajectory,
        early_loglik: early / decile.min(t_total) as f64,
        late_loglik: late / late_count.max(1) as f64,
        numerical_warnings,
        warnings,
        final_z,
    })
}

fn acceptance(people: &[Individual]) -> f64 {
    let (a, p) = people.iter().fold((0u64, 0u64), |(a, p), x| {
        (a + x.chain.accepts, p + x.chain.proposals)
    });
    if p == 0 {
        0.0
    } else {
        a as f64 / p as f64
    }
}

/// Posterior moments of latent positions with the parameters held fixed,
/// from `iterations` Langevin steps per individual of which the first
/// `burn_in` are discarded.
pub fn frozen_posterior_moments<M: LatentModel>(
    model: &M,
    data: &Dataset,
    starts: Vec<Vec<f64>>,
    mala: &MalaConfig,
    iterations: u64,
    burn_in: u64,
    seed: u64,
) -> Result<PosteriorMoments> {
    if burn_in >= iterations {
        return Err(Error::Config(
            "burn-in must be smaller than the number of iterations".into(),
        ));
    }
    mala.validate()?;
    let k = model.attributes();
    let j = model.items();
    if data.items() != j || starts.len() != data.individuals() {
        return Err(Error::Shape(
            "data, design and starting values disagree".into(),
        ));
    }
    let h = mala.step_size(k);
    let per: Vec<(Vec<f64>, Vec<f64>)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(i, z)| -> Result<(Vec<f64>, Vec<f64>)> {
            let y = data.row(i);
            let mut rng = rng::stream(seed, &[DOMAIN_MOMENTS, i as u64]);
            let mut chain = ChainState::new(z);
            let mut sampler = Sampler::new(k, j);
            let mut mean = vec![0.0; k];
            let mut cov = vec![0.0; k * k];
            for t in 0..iterations {
                sampler.transition(model, y, &mut chain, h, mala.inner_steps, &mut rng)?;
                if t >= burn_in {
                    update_posterior_moments(&mut mean, &mut cov, &chain.point.z, t - burn_in);
                }
            }
            Ok((mean, cov))
        })
        .collect::<Result<_>>()?;
    let (mean, cov) = per.into_iter().unzip();
    Ok(PosteriorMoments {
        k,
        mean,
        cov,
        count: iterations - burn_in,
    })
}
