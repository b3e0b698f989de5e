#![allow(dead_code)]

use std::sync::Arc;

use gapm::likelihood::{ApmModel, Evaluation, GapmModel, LatentModel, LatentPoint};
use gapm::model::{
    ApmParams, CholeskyCorrelation, GapmParams, ItemWeights, KnotGrid, LowerTriangular, QMatrix,
    SieveMonotone,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_q(rng: &mut ChaCha8Rng, j: usize, k: usize) -> QMatrix {
    let rows = (0..j)
        .map(|_| loop {
            let r: Vec<u8> = (0..k).map(|_| rng.random_range(0..2u8)).collect();
            if r.contains(&1) {
                break r;
            }
        })
        .collect();
    QMatrix::new(rows).unwrap()
}

pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Random correlation factor with unit rows and a comfortably positive diagonal.
pub fn random_chol(rng: &mut ChaCha8Rng, k: usize) -> LowerTriangular {
    let mut data = vec![0.0; k * k];
    data[0] = 1.0;
    for r in 1..k {
        let mut row: Vec<f64> = (0..=r).map(|_| rng.random_range(-0.6..0.6)).collect();
        row[r] = rng.random_range(0.5..1.0);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..=r {
            data[r * k + c] = row[c] / n;
        }
    }
    LowerTriangular::from_dense(k, data).unwrap()
}

pub fn random_grid(rng: &mut ChaCha8Rng) -> Arc<KnotGrid> {
    let s = rng.random_range(2..12usize);
    let mut cuts: Vec<f64> = (1..s)
        .map(|i| i as f64 / s as f64 + rng.random_range(-0.02..0.02))
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Arc::new(KnotGrid::from_interior(&cuts).unwrap())
}

pub struct GapmInstance {
    pub q: QMatrix,
    pub params: GapmParams,
    pub y: Vec<u8>,
    pub z: Vec<f64>,
}

pub fn random_gapm(rng: &mut ChaCha8Rng, k: usize, j: usize) -> GapmInstance {
    let q = random_q(rng, j, k);
    let grid = random_grid(rng);
    let s = grid.segments();
    let mut weights = Vec::new();
    let mut sieves = Vec::new();
    for jj in 0..j {
        let active: Vec<usize> = (0..k).filter(|&c| q.get(jj, c)).collect();
        let w = random_simplex(rng, active.len());
        let mut alpha = vec![0.0; k];
        active.iter().zip(&w).for_each(|(&c, &v)| alpha[c] = v);
        weights.push(ItemWeights { alpha });
        sieves.push(
            (0..k)
                .map(|c| {
                    q.get(jj, c)
                        .then(|| SieveMonotone::new(grid.clone(), random_simplex(rng, s)).unwrap())
                })
                .collect(),
        );
    }
    let chol = CholeskyCorrelation::new(random_chol(rng, k)).unwrap();
    let params = GapmParams {
        weights,
        sieves,
        chol,
    };
    let y = (0..j).map(|_| rng.random_range(0..2u8)).collect();
    let z = (0..k)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.9)
        .collect();
    GapmInstance { q, params, y, z }
}

pub struct ApmInstance {
    pub q: QMatrix,
    pub params: ApmParams,
    pub y: Vec<u8>,
    pub z: Vec<f64>,
}

pub fn random_apm(rng: &mut ChaCha8Rng, k: usize, j: usize) -> ApmInstance {
    let q = random_q(rng, j, k);
    let delta = (0..j)
        .map(|jj| {
            let mut d = vec![rng.random_range(0.02..0.2)];
            let active = q.row_count(jj) as f64;
            for c in 0..k {
                d.push(if q.get(jj, c) {
                    rng.random_range(0.05..0.7) / active
                } else {
                    0.0
                });
            }
            d
        })
        .collect();
    let mean = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut cov = random_chol(rng, k).as_slice().to_vec();
    for r in 0..k {
        for c in 0..=r {
            cov[r * k + c] *= rng.random_range(0.7..1.4);
        }
    }
    let cov_chol = LowerTriangular::from_dense(k, cov).unwrap();
    let params = ApmParams {
        delta,
        mean,
        cov_chol,
    };
    let y = (0..j).map(|_| rng.random_range(0..2u8)).collect();
    let z = (0..k)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.9)
        .collect();
    ApmInstance { q, params, y, z }
}

pub const FD_STEP: f64 = 1e-6;

/// `|analytic − fd| / max(|analytic|, 1)`.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

fn gapm_value(q: &QMatrix, p: &GapmParams, y: &[u8], z: &[f64]) -> f64 {
    let m = GapmModel::new_unvalidated(q.clone(), p.clone()).unwrap();
    let mut e = Evaluation::new(q.attributes(), q.items());
    m.evaluate(y, z, &mut e).unwrap()
}

fn apm_value(q: &QMatrix, p: &ApmParams, y: &[u8], z: &[f64]) -> f64 {
    let m = ApmModel::new_unvalidated(q.clone(), p.clone()).unwrap();
    let mut e = Evaluation::new(q.attributes(), q.items());
    m.evaluate(y, z, &mut e).unwrap()
}

/// Whether any `Φ(z_k ± h)` straddles a knot, where the density has a kink.
pub fn near_kink(inst: &GapmInstance) -> bool {
    let grid = inst.params.grid().unwrap();
    inst.z.iter().any(|&z| {
        let lo = gapm::model::normal_cdf(z - 10.0 * FD_STEP);
        let hi = gapm::model::normal_cdf(z + 10.0 * FD_STEP);
        grid.breakpoints().iter().any(|&b| b >= lo && b <= hi)
    })
}

/// Worst relative error of the analytic z-gradient against central differences.
pub fn gapm_grad_z_error(inst: &GapmInstance) -> f64 {
    let analytic = gapm::likelihood::grad_z(
        &inst.y,
        &LatentPoint::from_z(inst.z.clone()),
        &inst.params,
        &inst.q,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for c in 0..inst.z.len() {
        let mut up = inst.z.clone();
        let mut dn = inst.z.clone();
        up[c] += FD_STEP;
        dn[c] -= FD_STEP;
        let fd = (gapm_value(&inst.q, &inst.params, &inst.y, &up)
            - gapm_value(&inst.q, &inst.params, &inst.y, &dn))
            / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[c], fd));
    }
    worst
}

/// Worst relative error over the weight, sieve and correlation-factor blocks.
pub fn gapm_grad_params_error(inst: &GapmInstance) -> f64 {
    let g = gapm::likelihood::grad_params(
        &inst.y,
        &LatentPoint::from_z(inst.z.clone()),
        &inst.params,
        &inst.q,
    )
    .unwrap();
    let (q, y, z) = (&inst.q, &inst.y, &inst.z);
    let fd = |perturb: &dyn Fn(&mut GapmParams, f64)| {
        let mut up = inst.params.clone();
        let mut dn = inst.params.clone();
        perturb(&mut up, FD_STEP);
        perturb(&mut dn, -FD_STEP);
        (gapm_value(q, &up, y, z) - gapm_value(q, &dn, y, z)) / (2.0 * FD_STEP)
    };
    let mut worst: f64 = 0.0;
    let k_dim = q.attributes();
    for j in 0..q.items() {
        for k in 0..k_dim {
            if !q.get(j, k) {
                continue;
            }
            let v = fd(&|p: &mut GapmParams, h| p.weights[j].alpha[k] += h);
            worst = worst.max(rel_err(g.d_alpha[j][k], v));
            let s = g.d_theta[j][k].as_ref().unwrap().len();
            for m in 0..s {
                let v = fd(&|p: &mut GapmParams, h| {
                    let old = p.sieves[j][k].as_ref().unwrap();
                    let mut theta = old.theta().to_vec();
                    theta[m] += h;
                    p.sieves[j][k] = Some(SieveMonotone::from_raw(old.grid().clone(), theta));
                });
                worst = worst.max(rel_err(g.d_theta[j][k].as_ref().unwrap()[m], v));
            }
        }
    }
    for r in 0..k_dim {
        for c in 0..=r {
            let v = fd(&|p: &mut GapmParams, h| {
                let mut data = p.chol.factor().as_slice().to_vec();
                data[r * k_dim + c] += h;
                p.chol = CholeskyCorrelation::from_raw(
                    LowerTriangular::from_dense(k_dim, data).unwrap(),
                );
            });
            worst = worst.max(rel_err(g.d_chol[r * k_dim + c], v));
        }
    }
    worst
}

/// Worst relative error over z, δ, μ and covariance-factor gradients.
pub fn apm_grads_error(inst: &ApmInstance) -> f64 {
    let (gz, g) = gapm::likelihood::apm_grads(
        &inst.y,
        &LatentPoint::from_z(inst.z.clone()),
        &inst.params,
        &inst.q,
    )
    .unwrap();
    let (q, y, z) = (&inst.q, &inst.y, &inst.z);
    let k_dim = q.attributes();
    let mut worst: f64 = 0.0;
    for c in 0..k_dim {
        let mut up = z.clone();
        let mut dn = z.clone();
        up[c] += FD_STEP;
        dn[c] -= FD_STEP;
        let v = (apm_value(q, &inst.params, y, &up) - apm_value(q, &inst.params, y, &dn))
            / (2.0 * FD_STEP);
        worst = worst.max(rel_err(gz[c], v));
    }
    let fd = |perturb: &dyn Fn(&mut ApmParams, f64)| {
        let mut up = inst.params.clone();
        let mut dn = inst.params.clone();
        perturb(&mut up, FD_STEP);
        perturb(&mut dn, -FD_STEP);
        (apm_value(q, &up, y, z) - apm_value(q, &dn, y, z)) / (2.0 * FD_STEP)
    };
    for j in 0..q.items() {
        for c in 0..=k_dim {
            if c > 0 && !q.get(j, c - 1) {
                continue;
            }
            let v = fd(&|p: &mut ApmParams, h| p.delta[j][c] += h);
            worst = worst.max(rel_err(g.d_delta[j][c], v));
        }
    }
    for c in 0..k_dim {
        let v = fd(&|p: &mut ApmParams, h| p.mean[c] += h);
        worst = worst.max(rel_err(g.d_mean[c], v));
    }
    for r in 0..k_dim {
        for c in 0..=r {
            let v = fd(&|p: &mut ApmParams, h| {
                let mut data = p.cov_chol.as_slice().to_vec();
                data[r * k_dim + c] += h;
                p.cov_chol = LowerTriangular::from_dense(k_dim, data).unwrap();
            });
            worst = worst.max(rel_err(g.d_chol[r * k_dim + c], v));
        }
    }
    worst
}
