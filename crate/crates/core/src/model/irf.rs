use super::{ItemWeights, SieveMonotone};

/// Generalized additive IRF `Σ_k α_k q_k g_k(U_k)`.
pub fn irf_gapm(
    weights: &ItemWeights,
    sieves: &[Option<SieveMonotone>],
    q_row: &[u8],
    u: &[f64],
) -> f64 {
    let mut pi = 0.0;
    for k in 0..q_row.len() {
        if q_row[k] == 1 {
            if let Some(g) = &sieves[k] {
                pi += weights.alpha[k] * g.eval_unchecked(u[k].clamp(0.0, 1.0));
            }
        }
    }
    pi.clamp(0.0, 1.0)
}

/// Linear IRF `δ_0 + Σ_k δ_k q_k U_k`; `delta` holds `(δ_0, δ_1, …, δ_K)`.
pub fn irf_apm(delta: &[f64], q_row: &[u8], u: &[f64]) -> f64 {
    let mut pi = delta[0];
    for k in 0..q_row.len() {
        if q_row[k] == 1 {
            pi += delta[k + 1] * u[k];
        }
    }
    pi.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::KnotGrid;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn identity_sieves(k: usize) -> Vec<Option<SieveMonotone>> {
        let grid = Arc::new(KnotGrid::preset("k1").unwrap());
        (0..k)
            .map(|_| Some(SieveMonotone::identity(grid.clone())))
            .collect()
    }

    #[test]
    fn weighted_average_of_identities() {
        let w = ItemWeights {
            alpha: vec![0.5, 0.5],
        };
        let pi = irf_gapm(&w, &identity_sieves(2), &[1, 1], &[0.2, 0.6]);
        assert!((pi - 0.4).abs() < 1e-12);
        assert_eq!(irf_gapm(&w, &identity_sieves(2), &[1, 1], &[0.0, 0.0]), 0.0);
        assert_eq!(irf_gapm(&w, &identity_sieves(2), &[1, 1], &[1.0, 1.0]), 1.0);
    }

    #[test]
    fn linear_irf_examples() {
        let d = [0.1, 0.4, 0.4, 0.0];
        assert!((irf_apm(&d, &[1, 1, 0], &[0.5, 0.5, 0.9]) - 0.5).abs() < 1e-15);
        assert!((irf_apm(&d, &[1, 1, 0], &[1.0, 1.0, 0.3]) - 0.9).abs() < 1e-15);
        assert!((irf_apm(&[0.1, 0.0, 0.0], &[1, 1], &[0.7, 0.2]) - 0.1).abs() < 1e-15);
    }

    fn arb_item(k: usize) -> impl Strategy<Value = (ItemWeights, Vec<Option<SieveMonotone>>)> {
        (
            proptest::collection::vec(0.01f64..1.0, k),
            proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 10), k),
        )
            .prop_map(move |(a, thetas)| {
                let s: f64 = a.iter().sum();
                let w = ItemWeights {
                    alpha: a.iter().map(|v| v / s).collect(),
                };
                let grid = Arc::new(KnotGrid::preset("k2").unwrap());
                let sieves = thetas
                    .into_iter()
                    .map(|mut t| {
                        t[0] += 1e-3;
                        let s: f64 = t.iter().sum();
                        t.iter_mut().for_each(|v| *v /= s);
                        let s: f64 = t.iter().sum();
                        t[9] += 1.0 - s;
                        Some(SieveMonotone::new(grid.clone(), t).unwrap())
                    })
                    .collect();
                (w, sieves)
            })
    }

    proptest! {
        #[test]
        fn monotone_and_permutation_invariant(
            (w, sieves) in arb_item(3),
            u in proptest::collection::vec(0.0f64..=1.0, 3),
            bump in proptest::collection::vec(0.0f64..=0.5, 3),
        ) {
            let q = [1u8, 1, 1];
            let hi: Vec<f64> = u.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect();
            prop_assert!(irf_gapm(&w, &sieves, &q, &hi) >= irf_gapm(&w, &sieves, &q, &u) - 1e-15);
            let perm = [2usize, 0, 1];
            let wp = ItemWeights { alpha: perm.iter().map(|&p| w.alpha[p]).collect() };
            let sp: Vec<_> = perm.iter().map(|&p| sieves[p].clone()).collect();
            let up: Vec<f64> = perm.iter().map(|&p| u[p]).collect();
            let a = irf_gapm(&w, &sieves, &q, &u);
            let b = irf_gapm(&wp, &sp, &q, &up);
            prop_assert!((a - b).abs() < 1e-14);
        }

        #[test]
        fn boundaries_on_relevant_attributes((w, sieves) in arb_item(3), other in 0.0f64..1.0) {
            let q = [1u8, 0, 1];
            let mut w = w;
            w.alpha[1] = 0.0;
            let s: f64 = w.alpha.iter().sum();
            w.alpha.iter_mut().for_each(|a| *a /= s);
            prop_assert_eq!(irf_gapm(&w, &sieves, &q, &[0.0, other, 0.0]), 0.0);
            prop_assert!((irf_gapm(&w, &sieves, &q, &[1.0, other, 1.0]) - 1.0).abs() < 1e-14);
        }
    }
}
