//! Recovery metrics, held-out likelihood comparison, cross-validation of the
//! number of attributes and the simulation-study harness.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{self, initial_latent, FitConfig, FitResult, Mode, ModelKind};
use crate::likelihood::{ApmModel, GapmModel, LatentModel};
use crate::mala::MalaConfig;
use crate::marginal::{is_loglik, IsEstimate, DEFAULT_DRAWS};
use crate::model::{ApmParams, Dataset, GapmParams, KnotGrid, QMatrix};
use crate::rng::{self, DOMAIN_ISE, DOMAIN_SPLIT};
use crate::simgen::{self, SimModel, Simulation, Truth};

/// Default number of quasi-random points for integrated squared error.
pub const DEFAULT_ISE_POINTS: usize = 1 << 14;

/// Mean squared deviation of replicated estimates from the truth.
pub fn mse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::domain("mean squared error of no estimates"));
    }
    Ok(estimates
        .iter()
        .map(|e| (e - truth) * (e - truth))
        .sum::<f64>()
        / estimates.len() as f64)
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while index > 0 {
        out += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    out
}

/// `n` Halton points in `[0,1)^k` with a seeded random shift modulo one.
pub fn shifted_halton(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k > PRIMES.len() {
        return Err(Error::Unsupported(format!(
            "Halton points limited to {} dimensions",
            PRIMES.len()
        )));
    }
    let mut rng = rng::stream(seed, &[DOMAIN_ISE, k as u64]);
    let shift: Vec<f64> = (0..k).map(|_| rng.random()).collect();
    Ok((1..=n as u64)
        .map(|i| {
            (0..k)
                .map(|c| (radical_inverse(i, PRIMES[c]) + shift[c]).fract())
                .collect()
        })
        .collect())
}

/// `∫_{[0,1]^K} (π̂ − π)² du` over a shifted Halton point set.
pub fn ise(
    pi_hat: impl Fn(&[f64]) -> f64,
    pi_true: impl Fn(&[f64]) -> f64,
    k: usize,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::domain(
            "integrated squared error needs at least one point",
        ));
    }
    let pts = shifted_halton(n_mc, k, seed)?;
    Ok(pts
        .iter()
        .map(|u| {
            let d = pi_hat(u) - pi_true(u);
            d * d
        })
        .sum::<f64>()
        / n_mc as f64)
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&o| ranks[o] = r);
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "an input has zero rank variance".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape("spearman inputs differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::domain("spearman needs at least two observations"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn column(m: &[Vec<f64>], c: usize) -> Vec<f64> {
    m.iter().map(|r| r[c]).collect()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                prefix.push(c);
                rec(prefix, used, out);
                prefix.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Column matching of estimated scores to true attributes: `perm[c]` is the
/// estimated column paired with true column `c`, chosen to maximize the
/// summed Spearman correlation (first maximizer in lexicographic order).
pub fn align_attributes(eap: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<usize>> {
    let k = truth.first().map_or(0, Vec::len);
    if k > 8 {
        return Err(Error::Unsupported(format!(
            "alignment is limited to K <= 8, got {k}"
        )));
    }
    if eap.len() != truth.len() || eap.first().map_or(0, Vec::len) != k {
        return Err(Error::Shape("score matrices differ in shape".into()));
    }
    let mut rho = vec![0.0; k * k];
    for a in 0..k {
        let est = column(eap, a);
        for c in 0..k {
            rho[a * k + c] = spearman(&est, &column(truth, c))?;
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for p in permutations(k) {
        let total: f64 = (0..k).map(|c| rho[p[c] * k + c]).sum();
        if total > best.0 {
            best = (total, p);
        }
    }
    Ok(best.1)
}

/// Reorders score columns so column `c` of the output is column `perm[c]`.
pub fn apply_permutation(scores: &[Vec<f64>], perm: &[usize]) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|r| perm.iter().map(|&c| r[c]).collect())
        .collect()
}

/// Per-attribute Spearman correlation between estimated and true scores.
pub fn attribute_spearman(eap: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = truth.first().map_or(0, Vec::len);
    if eap.len() != truth.len() || eap.iter().chain(truth).any(|r| r.len() != k) {
        return Err(Error::Shape("score matrices differ in shape".into()));
    }
    (0..k)
        .map(|c| spearman(&column(eap, c), &column(truth, c)))
        .collect()
}

/// Per-item integrated squared error between two item response functions.
pub fn item_ise(
    est: impl Fn(usize, &[f64]) -> f64 + Sync,
    truth: &Truth,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let q = truth.q();
    (0..q.items())
        .into_par_iter()
        .map(|j| {
            ise(
                |u| est(j, u),
                |u| truth.irf(j, u),
                q.attributes(),
                n_mc,
                seed,
            )
        })
        .collect()
}

/// Settings for marginal likelihood on data the model was not fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutConfig {
    /// Langevin steps per individual for the proposal moments, and how many
    /// of them to discard.
    pub moment_iterations: u64,
    pub moment_burn_in: u64,
    pub draws: usize,
    pub seed: u64,
}

impl HeldoutConfig {
    pub fn new(seed: u64) -> Self {
        HeldoutConfig {
            moment_iterations: 1000,
            moment_burn_in: 200,
            draws: DEFAULT_DRAWS,
            seed,
        }
    }
}

/// Marginal log-likelihood of `data` under fixed parameters. Proposal moments
/// come from Langevin chains run with the parameters held fixed.
pub fn heldout_loglik<M: LatentModel>(
    model: &M,
    data: &Dataset,
    mala: &MalaConfig,
    cfg: &HeldoutConfig,
) -> Result<IsEstimate> {
    let starts = initial_latent(data, model.attributes(), cfg.seed);
    let moments = fit::frozen_posterior_moments(
        model,
        data,
        starts,
        mala,
        cfg.moment_iterations,
        cfg.moment_burn_in,
        cfg.seed,
    )?;
    is_loglik(model, data, &moments, cfg.draws, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutResult {
    /// `ℓ_GaPM − ℓ_aPM` on the test data; positive favours the generalized model.
    pub d: f64,
    pub gapm_loglik: f64,
    pub apm_loglik: f64,
    /// Joint Monte Carlo standard error of `d`.
    pub se: f64,
}

/// Compares already fitted parameter bundles on test data.
pub fn compare_heldout(
    q: &QMatrix,
    gapm: &GapmParams,
    apm: &ApmParams,
    test: &Dataset,
    mala: &MalaConfig,
    cfg: &HeldoutConfig,
) -> Result<HoldoutResult> {
    let g = heldout_loglik(&GapmModel::new(q.clone(), gapm.clone())?, test, mala, cfg)?;
    let a = heldout_loglik(&ApmModel::new(q.clone(), apm.clone())?, test, mala, cfg)?;
    Ok(HoldoutResult {
        d: g.loglik - a.loglik,
        gapm_loglik: g.loglik,
        apm_loglik: a.loglik,
        se: (g.se().powi(2) + a.se().powi(2)).sqrt(),
    })
}

/// Fits both models on `train` and compares them on `test`.
pub fn holdout_d(
    train: &Dataset,
    test: &Dataset,
    q: &QMatrix,
    grid: &Arc<KnotGrid>,
    gapm_cfg: &FitConfig,
    apm_cfg: &FitConfig,
    heldout: &HeldoutConfig,
) -> Result<HoldoutResult> {
    if train.items() != test.items() {
        return Err(Error::Shape(
            "train and test data have different items".into(),
        ));
    }
    let g = fit::fit_gapm(train, q, grid, gapm_cfg)?;
    let a = fit::fit_apm(train, q, apm_cfg)?;
    compare_heldout(q, &g.params, &a.params, test, &gapm_cfg.mala, heldout)
}

/// Random split into training and test indices, without replacement.
pub fn split_indices(
    n: usize,
    train_fraction: f64,
    seed: u64,
    split: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!(
            "training fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[DOMAIN_SPLIT, split]));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let cut = cut.clamp(1, n.saturating_sub(1));
    let test = idx.split_off(cut);
    Ok((idx, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub candidates: Vec<usize>,
    pub splits: usize,
    pub train_fraction: f64,
    pub iterations: u64,
    pub burn_in: u64,
    pub heldout: HeldoutConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub k: usize,
    /// Test log-likelihood of each split.
    pub split_loglik: Vec<f64>,
    pub mean_loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub entries: Vec<CvEntry>,
    pub k_hat: usize,
}

/// Chooses the number of attributes by repeated random splits, fitting the
/// exploratory generalized model on each training part and scoring the test
/// part by its marginal log-likelihood.
pub fn cv_select_k(data: &Dataset, grid: &Arc<KnotGrid>, cfg: &CvConfig) -> Result<CvResult> {
    if cfg.candidates.is_empty() || cfg.candidates.contains(&0) {
        return Err(Error::domain(
            "candidate attribute counts must be positive and non-empty",
        ));
    }
    if cfg.splits == 0 {
        return Err(Error::domain("at least one split is required"));
    }
    let splits: Vec<(Dataset, Dataset)> = (0..cfg.splits as u64)
        .map(|r| {
            let (tr, te) = split_indices(data.individuals(), cfg.train_fraction, cfg.seed, r)?;
            Ok((data.subset(&tr), data.subset(&te)))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = cfg
        .candidates
        .iter()
        .flat_map(|&k| (0..cfg.splits).map(move |r| (k, r)))
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(k, r)| -> Result<f64> {
            let (train, test) = &splits[r];
            let fit_seed = rng::mix(cfg.seed, &[k as u64, r as u64]);
            let mut fc = FitConfig::new(
                ModelKind::Gapm,
                cfg.iterations,
                cfg.burn_in,
                train.individuals(),
                k,
                fit_seed,
            );
            fc.mode = Mode::Exploratory;
            let q = QMatrix::exploratory(data.items(), k);
            let res = fit::fit_gapm(train, &q, grid, &fc)?;
            let model = GapmModel::new(q, res.params)?;
            let mut held = cfg.heldout.clone();
            held.seed = fit_seed;
            Ok(heldout_loglik(&model, test, &fc.mala, &held)?.loglik)
        })
        .collect::<Result<_>>()?;
    let entries: Vec<CvEntry> = cfg
        .candidates
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let split_loglik = scores[c * cfg.splits..(c + 1) * cfg.splits].to_vec();
            let mean_loglik = split_loglik.iter().sum::<f64>() / cfg.splits as f64;
            CvEntry {
                k,
                split_loglik,
                mean_loglik,
            }
        })
        .collect();
    let k_hat = entries
        .iter()
        .fold(None::<&CvEntry>, |best, e| match best {
            Some(b) if b.mean_loglik >= e.mean_loglik => Some(b),
            _ => Some(e),
        })
        .map(|e| e.k)
        .expect("non-empty candidates");
    Ok(CvResult { entries, k_hat })
}

/// Off-diagonal entries of a row-major correlation matrix, upper triangle.
pub fn off_diagonal(corr: &[f64], k: usize) -> Vec<f64> {
    (0..k)
        .flat_map(|r| (r + 1..k).map(move |c| (r, c)))
        .map(|(r, c)| corr[r * k + c])
        .collect()
}

/// Covariance to correlation, row-major.
pub fn to_correlation(cov: &[f64], k: usize) -> Vec<f64> {
    (0..k * k)
        .map(|i| cov[i] / (cov[(i / k) * k + i / k] * cov[(i % k) * k + i % k]).sqrt())
        .collect()
}

/// Recovery of one fitted model against the simulation truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub item_ise: Vec<f64>,
    pub av_ise: f64,
    pub spearman: Vec<f64>,
    pub av_c: f64,
    /// Estimated latent correlations, upper triangle.
    pub correlations: Vec<f64>,
    /// Column permutation applied to the scores before comparison.
    pub permutation: Vec<usize>,
    pub acceptance_rate: f64,
}

/// Recovery from an estimated IRF, latent correlation matrix and EAP scores.
/// With `align`, estimated attributes are matched to true ones first.
#[allow(clippy::too_many_arguments)]
pub fn recovery(
    eap_scores: &[Vec<f64>],
    acceptance_rate: f64,
    irf: impl Fn(usize, &[f64]) -> f64 + Sync,
    corr: Vec<f64>,
    truth: &Truth,
    u: &[Vec<f64>],
    align: bool,
    n_mc: usize,
    seed: u64,
) -> Result<Recovery> {
    let k = truth.q().attributes();
    if corr.len() != k * k {
        return Err(Error::Shape(
            "estimated and true attribute counts differ".into(),
        ));
    }
    let permutation = if align {
        align_attributes(eap_scores, u)?
    } else {
        (0..k).collect()
    };
    let scores = apply_permutation(eap_scores, &permutation);
    let spearman = attribute_spearman(&scores, u)?;
    let item_ise = if align {
        // permute the estimated IRF's arguments to the true attribute order
        let inv: Vec<usize> = (0..k)
            .map(|a| permutation.iter().position(|&p| p == a).unwrap())
            .collect();
        item_ise(
            |j, u| {
                let v: Vec<f64> = inv.iter().map(|&c| u[c]).collect();
                irf(j, &v)
            },
            truth,
            n_mc,
            seed,
        )?
    } else {
        item_ise(&irf, truth, n_mc, seed)?
    };
    let av_ise = item_ise.iter().sum::<f64>() / item_ise.len().max(1) as f64;
    let av_c = spearman.iter().sum::<f64>() / spearman.len().max(1) as f64;
    let corr = {
        let c: Vec<f64> = (0..k * k)
            .map(|i| corr[permutation[i / k] * k + permutation[i % k]])
            .collect();
        off_diagonal(&c, k)
    };
    Ok(Recovery {
        item_ise,
        av_ise,
        spearman,
        av_c,
        correlations: corr,
        permutation,
        acceptance_rate,
    })
}

pub fn gapm_recovery(
    fit: &FitResult<GapmParams>,
    q: &QMatrix,
    sim: &Simulation,
    align: bool,
    n_mc: usize,
    seed: u64,
) -> Result<Recovery> {
    let p = &fit.params;
    recovery(
        &fit.eap_scores,
        fit.acceptance_rate,
        |j, u| p.irf(q, j, u),
        p.chol.correlation(),
        &sim.truth,
        &sim.u,
        align,
        n_mc,
        seed,
    )
}

pub fn apm_recovery(
    fit: &FitResult<ApmParams>,
    q: &QMatrix,
    sim: &Simulation,
    n_mc: usize,
    seed: u64,
) -> Result<Recovery> {
    let p = &fit.params;
    let k = q.attributes();
    let corr = to_correlation(&p.cov_chol.gram(), k);
    recovery(
        &fit.eap_scores,
        fit.acceptance_rate,
        |j, u| p.irf(q, j, u),
        corr,
        &sim.truth,
        &sim.u,
        false,
        n_mc,
        seed,
    )
}

/// One simulation-study configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub truth: SimModel,
    pub q: QMatrix,
    pub n: usize,
    pub sigma: f64,
    pub replications: usize,
    pub iterations: u64,
    pub burn_in: u64,
    /// Knot grid for the generalized model.
    pub grid: KnotGrid,
    /// Fresh individuals for the held-out comparison; 0 skips it.
    pub test_n: usize,
    pub fit_apm: bool,
    pub exploratory: bool,
    pub ise_points: usize,
    pub heldout: HeldoutConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub gapm: Recovery,
    pub apm: Option<Recovery>,
    pub exploratory: Option<Recovery>,
    pub holdout: Option<HoldoutResult>,
    /// Mean complete-data log-likelihood of the generalized fit over the
    /// first and last tenth of its iterations.
    pub gapm_early_loglik: f64,
    pub gapm_late_loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub gapm_av_ise: f64,
    pub gapm_av_c: f64,
    /// Mean squared error of the latent correlations, averaged over pairs.
    pub gapm_av_mse_corr: f64,
    pub apm_av_ise: Option<f64>,
    pub apm_av_c: Option<f64>,
    pub apm_av_mse_corr: Option<f64>,
    pub exploratory_av_c: Option<f64>,
    pub mean_d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub records: Vec<ReplicationRecord>,
    pub summary: StudySummary,
}

/// Seed of replication `r`.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    rng::mix(seed, &[r as u64])
}

/// Runs one replication of a study.
pub fn run_replication(cfg: &StudyConfig, r: usize) -> Result<ReplicationRecord> {
    let seed = replication_seed(cfg.seed, r);
    let sim = simgen::simulate(cfg.truth, &cfg.q, cfg.n, cfg.sigma, seed)?;
    let grid = Arc::new(cfg.grid.clone());
    let k = cfg.q.attributes();
    let gcfg = FitConfig::new(ModelKind::Gapm, cfg.iterations, cfg.burn_in, cfg.n, k, seed);
    let g = fit::fit_gapm(&sim.data, &cfg.q, &grid, &gcfg)?;
    let gapm = gapm_recovery(&g, &cfg.q, &sim, false, cfg.ise_points, seed)?;

    let mut apm = None;
    let mut holdout = None;
    if cfg.fit_apm {
        let mut acfg = FitConfig::new(ModelKind::Apm, cfg.iterations, cfg.burn_in, cfg.n, k, seed);
        acfg.schedule =
            crate::mirror_descent::StepSchedule::apm_default(cfg.n, cfg.truth != SimModel::Apm);
        let a = fit::fit_apm(&sim.data, &cfg.q, &acfg)?;
        apm = Some(apm_recovery(&a, &cfg.q, &sim, cfg.ise_points, seed)?);
        if cfg.test_n > 0 {
            let test = simgen::resample(&sim.truth, cfg.test_n, seed)?;
            let mut held = cfg.heldout.clone();
            held.seed = seed;
            holdout = Some(compare_heldout(
                &cfg.q, &g.params, &a.params, &test.data, &gcfg.mala, &held,
            )?);
        }
    }
    let exploratory = if cfg.exploratory {
        let mut ecfg = gcfg.clone();
        ecfg.mode = Mode::Exploratory;
        let e = fit::fit_gapm(&sim.data, &cfg.q, &grid, &ecfg)?;
        let eq = fit::effective_q(&cfg.q, Mode::Exploratory);
        Some(gapm_recovery(&e, &eq, &sim, true, cfg.ise_points, seed)?)
    } else {
        None
    };
    Ok(ReplicationRecord {
        replication: r,
        seed,
        gapm,
        apm,
        exploratory,
        holdout,
        gapm_early_loglik: g.early_loglik,
        gapm_late_loglik: g.late_loglik,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn mse_corr(records: &[&Recovery], truth: &[f64]) -> Result<f64> {
    let pairs = truth.len();
    if pairs == 0 {
        return Ok(0.0);
    }
    let total = (0..pairs)
        .map(|p| {
            mse(
                &records
                    .iter()
                    .map(|r| r.correlations[p])
                    .collect::<Vec<_>>(),
                truth[p],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(total.iter().sum::<f64>() / pairs as f64)
}

/// Aggregates per-replication records.
pub fn summarize(cfg: &StudyConfig, records: Vec<ReplicationRecord>) -> Result<StudyReport> {
    let k = cfg.q.attributes();
    let truth_corr = off_diagonal(&simgen::make_equicorr(k, cfg.sigma)?, k);
    let g: Vec<&Recovery> = records.iter().map(|r| &r.gapm).collect();
    let a: Vec<&Recovery> = records.iter().filter_map(|r| r.apm.as_ref()).collect();
    let e: Vec<&Recovery> = records
        .iter()
        .filter_map(|r| r.exploratory.as_ref())
        .collect();
    let d: Vec<f64> = records
        .iter()
        .filter_map(|r| r.holdout.as_ref().map(|h| h.d))
        .collect();
    let summary = StudySummary {
        gapm_av_ise: mean(g.iter().map(|r| r.av_ise)),
        gapm_av_c: mean(g.iter().map(|r| r.av_c)),
        gapm_av_mse_corr: mse_corr(&g, &truth_corr)?,
        apm_av_ise: (!a.is_empty()).then(|| mean(a.iter().map(|r| r.av_ise))),
        apm_av_c: (!a.is_empty()).then(|| mean(a.iter().map(|r| r.av_c))),
        apm_av_mse_corr: if a.is_empty() {
            None
        } else {
            Some(mse_corr(&a, &truth_corr)?)
        },
        exploratory_av_c: (!e.is_empty()).then(|| mean(e.iter().map(|r| r.av_c))),
        mean_d: (!d.is_empty()).then(|| mean(d.iter().copied())),
    };
    Ok(StudyReport { records, summary })
}

/// Runs all replications of a study, in parallel, and aggregates them.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    let records = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, r))
        .collect::<Result<Vec<_>>>()?;
    summarize(cfg, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.3, 0.3], 0.3).unwrap(), 0.0);
        assert!((mse(&[0.4, 0.2, 0.4, 0.2], 0.3).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse(&[], 0.0).is_err());
        let e = [0.1, 0.5, -0.2, 0.33];
        let mean_sq = e.iter().map(|v: &f64| (v - 0.2).powi(2)).sum::<f64>() / 4.0;
        assert!((mse(&e, 0.2).unwrap() - mean_sq).abs() < 1e-14);
    }

    #[test]
    fn ise_examples() {
        let f = |u: &[f64]| u[0] * u[1];
        assert_eq!(ise(f, f, 2, 1000, 1).unwrap(), 0.0);
        let v = ise(|u: &[f64]| f(u) + 0.1, f, 2, 1000, 1).unwrap();
        assert!((v - 0.01).abs() < 1e-12);
    }

    #[test]
    fn ise_one_dimension_matches_simpson() {
        let a = |u: &[f64]| crate::model::beta_cdf(3.0, 3.0, u[0]).unwrap();
        let b = |u: &[f64]| u[0].sqrt();
        let got = ise(a, b, 1, 1 << 16, 2).unwrap();
        let n = 20_000;
        let h = 1.0 / n as f64;
        let g = |x: f64| (a(&[x]) - b(&[x])).powi(2);
        let simpson = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * g(i as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0;
        assert!((got - simpson).abs() < 1e-4, "{got} vs {simpson}");
    }

    #[test]
    fn halton_is_reproducible_and_in_unit_cube() {
        let a = shifted_halton(100, 3, 5).unwrap();
        assert_eq!(a, shifted_halton(100, 3, 5).unwrap());
        assert!(a.iter().flatten().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[0.5, 0.1, 0.5, 0.9]),
            vec![2.5, 1.0, 2.5, 4.0]
        );
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(),
            -1.0
        );
        assert!(matches!(
            spearman(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        // ties: ranks (1.5, 1.5, 3) against (1, 2, 3)
        let rx = [1.5, 1.5, 3.0];
        let ry = [1.0, 2.0, 3.0];
        let mx = 2.0;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - mx)).sum();
        let den = (rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>()
            * ry.iter().map(|b| (b - mx).powi(2)).sum::<f64>())
        .sqrt();
        assert_eq!(
            spearman(&[1.0, 1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap(),
            num / den
        );
    }

    fn random_scores(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(seed, &[]);
        (0..n)
            .map(|_| (0..k).map(|_| rng.random()).collect())
            .collect()
    }

    #[test]
    fn alignment_examples() {
        let t = random_scores(50, 3, 1);
        assert_eq!(align_attributes(&t, &t).unwrap(), vec![0, 1, 2]);
        let swapped = apply_permutation(&t, &[1, 0, 2]);
        let perm = align_attributes(&swapped, &t).unwrap();
        assert_eq!(perm, vec![1, 0, 2]);
        assert_eq!(apply_permutation(&swapped, &perm), t);
        assert!(align_attributes(&random_scores(5, 9, 2), &random_scores(5, 9, 3)).is_err());
    }

    #[test]
    fn alignment_maximizes_summed_correlation() {
        let t = random_scores(40, 3, 4);
        let noisy: Vec<Vec<f64>> = random_scores(40, 3, 5)
            .iter()
            .zip(&t)
            .map(|(e, r)| vec![r[2] + e[0], r[0] + 0.5 * e[1], e[2]])
            .collect();
        let perm = align_attributes(&noisy, &t).unwrap();
        let score = |p: &[usize]| {
            (0..3)
                .map(|c| spearman(&column(&noisy, p[c]), &column(&t, c)).unwrap())
                .sum::<f64>()
        };
        let best = permutations(3)
            .iter()
            .map(|p| score(p))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(score(&perm), best);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn splits_partition_indices() {
        let (tr, te) = split_indices(100, 0.8, 3, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_ne!(split_indices(100, 0.8, 3, 1).unwrap().0, tr);
        assert!(split_indices(10, 1.0, 3, 0).is_err());
    }

    #[test]
    fn correlation_conversion() {
        let cov = [4.0, 1.0, 1.0, 1.0];
        let c = to_correlation(&cov, 2);
        assert!((c[1] - 0.5).abs() < 1e-15 && c[0] == 1.0);
        assert_eq!(
            off_diagonal(&[1.0, 0.2, 0.3, 0.2, 1.0, 0.4, 0.3, 0.4, 1.0], 3),
            vec![0.2, 0.3, 0.4]
        );
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(
            x in prop::collection::vec(-5.0f64..5.0, 3..30),
            seed in 0u64..1000,
        ) {
            let mut rng = rng::stream(seed, &[]);
            let y: Vec<f64> = x.iter().map(|_| rng.random()).collect();
            if let Ok(base) = spearman(&x, &y) {
                let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                let gy: Vec<f64> = y.iter().map(|v| v * v * v + 2.0).collect();
                prop_assert!((spearman(&fx, &gy).unwrap() - base).abs() < 1e-12);
            }
        }

        #[test]
        fn ise_is_nonnegative(c in -1.0f64..1.0, seed in 0u64..100) {
            let v = ise(|u: &[f64]| u[0] * c, |u: &[f64]| u[1], 2, 256, seed).unwrap();
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn alignment_is_a_bijection(seed in 0u64..200, k in 1usize..5) {
            let a = random_scores(20, k, seed);
            let b = random_scores(20, k, seed + 1000);
            let mut p = align_attributes(&a, &b).unwrap();
            p.sort();
            prop_assert_eq!(p, (0..k).collect::<Vec<_>>());
        }
    }
}
