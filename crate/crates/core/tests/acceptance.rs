//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use gapm::eval::{self, CvConfig, HeldoutConfig, StudyConfig, StudyReport};
use gapm::fit::{self, FitConfig, ModelKind};
use gapm::io::{self, Provenance};
use gapm::likelihood::{ApmGradient, ApmModel, GapmModel, LatentModel};
use gapm::mala::{ChainState, MalaConfig, Sampler};
use gapm::marginal;
use gapm::mirror_descent::{update_apm, update_chol_row, update_theta, update_weights};
use gapm::model::{normal_cdf, Dataset, GapmParams, KnotGrid, QMatrix};
use gapm::rng;
use gapm::simgen::{self, SimModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

const SEED: u64 = 20240601;
const TOL: f64 = 1e-10;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &'static str, pass: bool, elapsed: Duration, detail: String) -> Outcome {
    let detail = format!("{detail}; {:.1}s", elapsed.as_secs_f64());
    println!(
        "criterion {id} [{name}]: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    Outcome {
        id,
        name,
        pass,
        detail,
    }
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
}

fn bytes<T: Serialize>(value: &T) -> String {
    io::to_json(value, &Provenance::new(SEED, &"acceptance").unwrap()).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut ez, mut ep, mut ea) = (0.0f64, 0.0f64, 0.0f64);
    let mut n = 0;
    while n < 100 {
        let (k, j) = (rng.random_range(1..=3), rng.random_range(1..=10));
        let inst = random_gapm(&mut rng, k, j);
        if near_kink(&inst) {
            continue;
        }
        ez = ez.max(gapm_grad_z_error(&inst));
        n += 1;
    }
    for _ in 0..100 {
        let (k, j) = (rng.random_range(1..=3), rng.random_range(1..=10));
        ep = ep.max(gapm_grad_params_error(&random_gapm(&mut rng, k, j)));
        let (k, j) = (rng.random_range(1..=3), rng.random_range(1..=10));
        ea = ea.max(apm_grads_error(&random_apm(&mut rng, k, j)));
    }
    let elapsed = start.elapsed();
    let pass = ez < 1e-5 && ep < 1e-5 && ea < 1e-5 && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient oracles",
        pass,
        elapsed,
        format!("max rel err grad_z {ez:.2e}, grad_params {ep:.2e}, aPM {ea:.2e}"),
    )
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut worst = 0.0f64;
    let mut mask_ok = true;
    let mut failures = 0;
    let draw = |rng: &mut ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect()
    };
    for _ in 0..10_000 {
        let k = rng.random_range(1..=5);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let gamma = 10f64.powf(rng.random_range(-3.0..0.0));

        let q = random_q(&mut rng, 1, k);
        let q_row = q.row(0).to_vec();
        let active: Vec<usize> = (0..k).filter(|&c| q_row[c] == 1).collect();
        let w = random_simplex(&mut rng, active.len());
        let mut alpha = vec![0.0; k];
        active.iter().zip(&w).for_each(|(&c, &v)| alpha[c] = v);
        let g = draw(&mut rng, k, scale);
        match update_weights(&gapm::model::ItemWeights { alpha }, &g, gamma, &q_row) {
            Ok(a) => {
                worst = worst.max((a.alpha.iter().sum::<f64>() - 1.0).abs());
                mask_ok &= a
                    .alpha
                    .iter()
                    .zip(&q_row)
                    .all(|(&v, &m)| v >= 0.0 && (m == 1 || v == 0.0));
            }
            Err(_) => failures += 1,
        }

        let s = rng.random_range(2..=20);
        let theta = random_simplex(&mut rng, s);
        let g = draw(&mut rng, s, scale);
        match update_theta(&theta, &g, gamma) {
            Ok(t) => {
                worst = worst.max((t.iter().sum::<f64>() - 1.0).abs());
                mask_ok &= t.iter().all(|&v| v >= 0.0);
            }
            Err(_) => failures += 1,
        }

        let chol = random_chol(&mut rng, k);
        let r = k - 1;
        let row = chol.row(r).to_vec();
        let g = draw(&mut rng, r + 1, scale);
        match update_chol_row(&row, &g, gamma) {
            Ok(row) => {
                worst = worst.max((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
            }
            Err(_) => failures += 1,
        }

        let inst = random_apm(&mut rng, k, 1);
        let grads = ApmGradient {
            d_delta: vec![draw(&mut rng, k + 1, scale)],
            d_mean: draw(&mut rng, k, scale),
            d_chol: draw(&mut rng, k * k, scale),
        };
        match update_apm(&inst.params, &grads, gamma, gamma * 1e-3, &inst.q) {
            Ok(p) => {
                let d = &p.delta[0];
                let sum: f64 = d.iter().sum();
                worst = worst.max((sum - 1.0).max(0.0));
                mask_ok &= d.iter().all(|&v| v >= 0.0);
                mask_ok &= (0..k).all(|c| inst.q.get(0, c) || d[c + 1] == 0.0);
            }
            Err(_) => failures += 1,
        }
    }
    let pass = worst <= TOL && mask_ok && failures == 0;
    report(
        2,
        "geometry invariants",
        pass,
        start.elapsed(),
        format!("4x10^4 updates, max constraint violation {worst:.1e}, masks/nonnegativity ok: {mask_ok}, update errors {failures}"),
    )
}

fn ks_distance(draws: &mut [f64]) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

fn sampler() -> Outcome {
    let start = Instant::now();
    let q = QMatrix::exploratory(0, 3);
    let grid = Arc::new(KnotGrid::preset("k2").unwrap());
    let target = GapmModel::new(q.clone(), GapmParams::initial(&q, &grid).unwrap()).unwrap();
    let mut rng = rng::stream(0, &[rng::DOMAIN_MALA]);
    let mut state = ChainState::new(vec![0.0; 3]);
    let mut s = Sampler::new(3, 0);
    s.load(&target, &[], &state).unwrap();
    let mut draws: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(100_000)).collect();
    for _ in 0..100_000 {
        s.transition(&target, &[], &mut state, 0.2, 1, &mut rng)
            .unwrap();
        draws
            .iter_mut()
            .zip(&state.point.z)
            .for_each(|(d, &z)| d.push(z));
    }
    let ks: Vec<f64> = draws.iter_mut().map(|d| ks_distance(d)).collect();

    let q3 = simgen::builtin_q("Q3").unwrap();
    let sim = simgen::simulate(SimModel::Gapm, &q3, 1000, 0.7, SEED).unwrap();
    let mut cfg = FitConfig::new(ModelKind::Gapm, 1000, 500, 1000, 3, SEED);
    cfg.mala = MalaConfig::fixed(0.2);
    let fitted = fit::fit_gapm(
        &sim.data,
        &q3,
        &Arc::new(KnotGrid::preset("k1").unwrap()),
        &cfg,
    )
    .unwrap();
    let acc = fitted.acceptance_rate;

    let elapsed = start.elapsed();
    let pass = ks.iter().all(|&d| d < 0.01)
        && (0.4..=0.9).contains(&acc)
        && elapsed < Duration::from_secs(120);
    report(
        3,
        "sampler calibration",
        pass,
        elapsed,
        format!(
            "KS per marginal {:.4?}, acceptance on GaPM data {acc:.3}",
            ks
        ),
    )
}

fn simulate_responses<M: LatentModel>(
    model: &M,
    mean: &[f64],
    l: &[f64],
    k: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let rows = (0..n)
        .map(|_| {
            let e: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let u: Vec<f64> = (0..k)
                .map(|r| normal_cdf(mean[r] + (0..=r).map(|c| l[r * k + c] * e[c]).sum::<f64>()))
                .collect();
            (0..model.items())
                .map(|j| u8::from(rng.random::<f64>() < model.irf(j, &u)))
                .collect()
        })
        .collect();
    Dataset::from_rows(rows).unwrap()
}

fn is_versus_quad<M: LatentModel>(model: &M, data: &Dataset, seed: u64) -> (f64, f64, f64) {
    let k = model.attributes();
    let moments = fit::frozen_posterior_moments(
        model,
        data,
        vec![vec![0.0; k]; data.individuals()],
        &MalaConfig::default_for(k),
        1000,
        200,
        seed,
    )
    .unwrap();
    let est = marginal::is_loglik(model, data, &moments, 2000, seed).unwrap();
    let quad = marginal::quad_loglik(model, data, 40).unwrap();
    (est.loglik, est.se(), quad)
}

fn marginal_likelihood() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let k = 1 + i % 2;
        let (est, se, quad) = if i < 10 {
            let inst = random_gapm(&mut rng, k, 10);
            let l = inst.params.chol.factor().as_slice().to_vec();
            let model = GapmModel::new(inst.q, inst.params).unwrap();
            let data = simulate_responses(&model, &vec![0.0; k], &l, k, 50, &mut rng);
            is_versus_quad(&model, &data, SEED + i as u64)
        } else {
            let inst = random_apm(&mut rng, k, 10);
            let (mean, l) = (
                inst.params.mean.clone(),
                inst.params.cov_chol.as_slice().to_vec(),
            );
            let model = ApmModel::new(inst.q, inst.params).unwrap();
            let data = simulate_responses(&model, &mean, &l, k, 50, &mut rng);
            is_versus_quad(&model, &data, SEED + i as u64)
        };
        let bound = (3.0 * se).max(1e-3 * quad.abs());
        worst = worst.max((est - quad).abs() / bound);
        passed += usize::from((est - quad).abs() <= bound);
    }
    let elapsed = start.elapsed();
    report(
        4,
        "IS vs quadrature",
        passed == 20 && elapsed < Duration::from_secs(120),
        elapsed,
        format!("{passed}/20 instances within bound, worst |diff|/bound {worst:.3}"),
    )
}

fn study_config(truth: SimModel, exploratory: bool) -> StudyConfig {
    StudyConfig {
        truth,
        q: simgen::builtin_q("Q3").unwrap(),
        n: 1000,
        sigma: 0.7,
        replications: 5,
        iterations: 20_000,
        burn_in: 10_000,
        grid: KnotGrid::preset("k1").unwrap(),
        test_n: 500,
        fit_apm: true,
        exploratory,
        ise_points: eval::DEFAULT_ISE_POINTS,
        heldout: HeldoutConfig::new(SEED),
        seed: SEED,
    }
}

fn cv_data(rep: u64) -> Dataset {
    let q = simgen::builtin_q("Q3").unwrap();
    simgen::simulate(SimModel::Gapm, &q, 1000, 0.7, rng::mix(SEED, &[8, rep]))
        .unwrap()
        .data
}

fn cv_config(rep: u64) -> CvConfig {
    CvConfig {
        candidates: vec![2, 3, 4],
        splits: 2,
        train_fraction: 0.8,
        iterations: 4000,
        burn_in: 2000,
        heldout: HeldoutConfig::new(SEED),
        seed: rng::mix(SEED, &[8, rep, 1]),
    }
}

fn run_cv(rep: u64) -> eval::CvResult {
    let grid = Arc::new(KnotGrid::preset("k1").unwrap());
    eval::cv_select_k(&cv_data(rep), &grid, &cv_config(rep)).unwrap()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn main() {
    let mut outcomes = vec![gradients(), geometry(), sampler(), marginal_likelihood()];
    let single = pool(1);

    let start = Instant::now();
    let cfg_g = study_config(SimModel::Gapm, true);
    let study_g: StudyReport = single.install(|| eval::run_study(&cfg_g)).unwrap();
    let elapsed_g = start.elapsed();
    let s = &study_g.summary;
    let av_c = s.gapm_av_c;
    let d = s.mean_d.unwrap();
    outcomes.push(report(
        5,
        "Study I, true GaPM",
        av_c >= 0.85 && s.gapm_av_ise <= 0.010 && d > 0.0,
        elapsed_g,
        format!(
            "AvC {av_c:.4} (>= 0.85), AvISE {:.4} (<= 0.010), mean D {d:.2} (> 0); per-replication D {:?}",
            s.gapm_av_ise,
            study_g.records.iter().map(|r| (r.holdout.as_ref().unwrap().d * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    ));

    let start = Instant::now();
    let cfg_a = study_config(SimModel::Apm, false);
    let study_a: StudyReport = single.install(|| eval::run_study(&cfg_a)).unwrap();
    let s_a = &study_a.summary;
    let gap = s_a.gapm_av_c - s_a.apm_av_c.unwrap();
    let d_a = s_a.mean_d.unwrap();
    outcomes.push(report(
        6,
        "Study I, true aPM",
        d_a <= 0.0 && gap.abs() <= 0.02,
        start.elapsed(),
        format!(
            "AvC GaPM {:.4} vs aPM {}, gap {gap:+.4} (|gap| <= 0.02), mean D {d_a:.2} (<= 0)",
            s_a.gapm_av_c,
            fmt_opt(s_a.apm_av_c)
        ),
    ));

    let explo = s.exploratory_av_c.unwrap();
    outcomes.push(report(
        7,
        "exploratory Study II",
        av_c - explo <= 0.02,
        elapsed_g,
        format!(
            "exploratory AvC {explo:.4} vs confirmatory {av_c:.4}, loss {:+.4} (<= 0.02)",
            av_c - explo
        ),
    ));

    let start = Instant::now();
    let cv: Vec<eval::CvResult> = single.install(|| (0..5).map(run_cv).collect());
    let picks: Vec<usize> = cv.iter().map(|r| r.k_hat).collect();
    let hits = picks.iter().filter(|&&k| k == 3).count();
    outcomes.push(report(
        8,
        "CV selects K",
        hits >= 3,
        start.elapsed(),
        format!("K-hat per repetition {picks:?}, {hits}/5 pick 3 (>= 3)"),
    ));

    let start = Instant::now();
    let double = pool(2);
    let rerun_g = double.install(|| eval::run_replication(&cfg_g, 0)).unwrap();
    let rerun_a = double.install(|| eval::run_replication(&cfg_a, 0)).unwrap();
    let rerun_cv = double.install(|| run_cv(0));
    let same_g = bytes(&rerun_g) == bytes(&study_g.records[0]);
    let same_a = bytes(&rerun_a) == bytes(&study_a.records[0]);
    let same_cv = bytes(&rerun_cv) == bytes(&cv[0]);
    outcomes.push(report(
        9,
        "determinism across thread counts",
        same_g && same_a && same_cv,
        start.elapsed(),
        format!(
            "1 vs 2 threads byte-identical: Study I GaPM rep 0 {same_g}, aPM rep 0 {same_a}, CV rep 0 {same_cv}"
        ),
    ));

    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({}): {}", o.id, o.name, o.detail))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        for f in &failed {
            println!("failed: {f}");
        }
        std::process::exit(1);
    }
}
