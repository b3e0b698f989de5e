#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use gapm::likelihood::{complete_loglik, LatentPoint};
use gapm::linalg;
use gapm::model::{normal_cdf, QMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gapm_z_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 100 {
        let k = rng.random_range(1..=3);
        let j = rng.random_range(1..=10);
        let inst = random_gapm(&mut rng, k, j);
        if near_kink(&inst) {
            continue;
        }
        let err = gapm_grad_z_error(&inst);
        assert!(err < 1e-5, "relative error {err}");
        checked += 1;
    }
}

#[test]
fn gapm_param_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let k = rng.random_range(1..=3);
        let j = rng.random_range(1..=10);
        let inst = random_gapm(&mut rng, k, j);
        let err = gapm_grad_params_error(&inst);
        assert!(err < 1e-5, "relative error {err}");
    }
}

#[test]
fn apm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let k = rng.random_range(1..=3);
        let j = rng.random_range(1..=10);
        let inst = random_apm(&mut rng, k, j);
        let err = apm_grads_error(&inst);
        assert!(err < 1e-5, "relative error {err}");
    }
}

/// Bernoulli log-masses plus a multivariate normal log-density obtained from
/// an explicitly inverted covariance matrix (Gauss-Jordan), independent of the
/// triangular-solve path.
fn reference_loglik(inst: &GapmInstance) -> f64 {
    let k = inst.q.attributes();
    let u: Vec<f64> = inst.z.iter().map(|&z| normal_cdf(z)).collect();
    let mut total = 0.0;
    for j in 0..inst.q.items() {
        let mut pi = 0.0;
        for c in 0..k {
            if inst.q.get(j, c) {
                let g = inst.params.sieves[j][c].as_ref().unwrap();
                pi += inst.params.weights[j].alpha[c] * g.eval(u[c]).unwrap();
            }
        }
        total += if inst.y[j] == 1 {
            pi.ln()
        } else {
            (1.0 - pi).ln()
        };
    }
    let sigma = inst.params.chol.correlation();
    // invert by Gauss-Jordan with the determinant from the pivots
    let mut a = sigma.clone();
    let mut inv = vec![0.0; k * k];
    (0..k).for_each(|r| inv[r * k + r] = 1.0);
    let mut det = 1.0;
    for col in 0..k {
        let piv = a[col * k + col];
        det *= piv;
        for c in 0..k {
            a[col * k + c] /= piv;
            inv[col * k + c] /= piv;
        }
        for r in 0..k {
            if r != col {
                let f = a[r * k + col];
                for c in 0..k {
                    a[r * k + c] -= f * a[col * k + c];
                    inv[r * k + c] -= f * inv[col * k + c];
                }
            }
        }
    }
    let mut quad = 0.0;
    for r in 0..k {
        for c in 0..k {
            quad += inst.z[r] * inv[r * k + c] * inst.z[c];
        }
    }
    total - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad
}

#[test]
fn loglik_matches_independent_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let inst = random_gapm(&mut rng, 3, 5);
        let got = complete_loglik(
            &inst.y,
            &LatentPoint::from_z(inst.z.clone()),
            &inst.params,
            &inst.q,
        )
        .unwrap();
        let want = reference_loglik(&inst);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn loglik_invariant_under_item_and_attribute_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..30 {
        let inst = random_gapm(&mut rng, 3, 6);
        let base = complete_loglik(
            &inst.y,
            &LatentPoint::from_z(inst.z.clone()),
            &inst.params,
            &inst.q,
        )
        .unwrap();

        // items reversed
        let order: Vec<usize> = (0..6).rev().collect();
        let mut p = inst.params.clone();
        p.weights = order
            .iter()
            .map(|&j| inst.params.weights[j].clone())
            .collect();
        p.sieves = order
            .iter()
            .map(|&j| inst.params.sieves[j].clone())
            .collect();
        let q = QMatrix::new(order.iter().map(|&j| inst.q.row(j).to_vec()).collect()).unwrap();
        let y: Vec<u8> = order.iter().map(|&j| inst.y[j]).collect();
        let v = complete_loglik(&y, &LatentPoint::from_z(inst.z.clone()), &p, &q).unwrap();
        assert!((v - base).abs() < 1e-11);

        // attributes permuted; the correlation factor is re-derived from the
        // permuted correlation matrix
        let perm = [2usize, 0, 1];
        let sigma = inst.params.chol.correlation();
        let sp: Vec<f64> = (0..9)
            .map(|i| sigma[perm[i / 3] * 3 + perm[i % 3]])
            .collect();
        let mut p = inst.params.clone();
        p.chol = gapm::model::CholeskyCorrelation::from_correlation(3, &sp).unwrap();
        for j in 0..6 {
            p.weights[j].alpha = perm
                .iter()
                .map(|&c| inst.params.weights[j].alpha[c])
                .collect();
            p.sieves[j] = perm
                .iter()
                .map(|&c| inst.params.sieves[j][c].clone())
                .collect();
        }
        let q = QMatrix::new(
            (0..6)
                .map(|j| perm.iter().map(|&c| inst.q.row(j)[c]).collect())
                .collect(),
        )
        .unwrap();
        let z: Vec<f64> = perm.iter().map(|&c| inst.z[c]).collect();
        let v = complete_loglik(&inst.y, &LatentPoint::from_z(z), &p, &q).unwrap();
        assert!((v - base).abs() < 1e-10, "{v} vs {base}");
    }
}

#[test]
fn prior_score_without_items() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let l = random_chol(&mut rng, 3);
        let params = gapm::model::GapmParams {
            weights: vec![],
            sieves: vec![],
            chol: gapm::model::CholeskyCorrelation::new(l.clone()).unwrap(),
        };
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = gapm::likelihood::grad_z(
            &[],
            &LatentPoint::from_z(z.clone()),
            &params,
            &QMatrix::exploratory(0, 3),
        )
        .unwrap();
        // -Σ⁻¹ z via an explicit solve against Σ's own Cholesky factor
        let sigma = l.gram();
        let lc = linalg::cholesky(&sigma, 3).unwrap();
        let mut t = [0.0; 3];
        let mut w = [0.0; 3];
        linalg::solve_lower(&lc, 3, &z, &mut t);
        linalg::solve_lower_transpose(&lc, 3, &t, &mut w);
        for c in 0..3 {
            assert!((g[c] + w[c]).abs() < 1e-10);
        }
    }
}
