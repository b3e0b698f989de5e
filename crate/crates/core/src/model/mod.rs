//! Domain types for partial-mastery diagnosis models and their item response
//! functions.

mod irf;
pub mod sieve;
pub mod special;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub use irf::{irf_apm, irf_gapm};
pub use sieve::{KnotGrid, SieveMonotone};
pub use special::{beta_cdf, normal_cdf, normal_pdf, normal_quantile};

pub(crate) const SIMPLEX_TOL: f64 = 1e-10;
/// Smallest admissible magnitude of a Cholesky diagonal entry.
pub const DIAG_FLOOR: f64 = 1e-6;

/// Binary item-by-attribute design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<u8>>", try_from = "Vec<Vec<u8>>")]
pub struct QMatrix {
    items: usize,
    attributes: usize,
    entries: Vec<u8>,
}

impl QMatrix {
    /// Confirmatory design: every row must measure at least one attribute.
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self> {
        let q = Self::from_rows_unchecked(rows)?;
        if let Some(j) = (0..q.items).find(|&j| q.row(j).iter().all(|&v| v == 0)) {
            return Err(Error::InvalidDesign(format!(
                "row {} of the Q-matrix measures no attribute",
                j + 1
            )));
        }
        Ok(q)
    }

    fn from_rows_unchecked(rows: Vec<Vec<u8>>) -> Result<Self> {
        let items = rows.len();
        let attributes = rows.first().map_or(0, Vec::len);
        if attributes == 0 {
            return Err(Error::InvalidDesign("Q-matrix has no attributes".into()));
        }
        if rows.iter().any(|r| r.len() != attributes) {
            return Err(Error::InvalidDesign("ragged Q-matrix rows".into()));
        }
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(Error::InvalidDesign(
                "Q-matrix entries must be 0 or 1".into(),
            ));
        }
        Ok(QMatrix {
            items,
            attributes,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    /// Exploratory design: every item loads on every attribute.
    pub fn exploratory(items: usize, attributes: usize) -> Self {
        QMatrix {
            items,
            attributes,
            entries: vec![1; items * attributes],
        }
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[u8] {
        &self.entries[j * self.attributes..(j + 1) * self.attributes]
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> bool {
        self.entries[j * self.attributes + k] == 1
    }

    pub fn is_exploratory(&self) -> bool {
        self.entries.iter().all(|&v| v == 1)
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.entries
            .chunks(self.attributes)
            .map(<[u8]>::to_vec)
            .collect()
    }

    /// Number of attributes measured by item `j`.
    pub fn row_count(&self, j: usize) -> usize {
        self.row(j).iter().filter(|&&v| v == 1).count()
    }
}

impl From<QMatrix> for Vec<Vec<u8>> {
    fn from(q: QMatrix) -> Self {
        q.rows()
    }
}

impl TryFrom<Vec<Vec<u8>>> for QMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        QMatrix::from_rows_unchecked(rows)
    }
}

/// Nonnegative attribute weights of one item, summing to one over the
/// attributes the item measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemWeights {
    pub alpha: Vec<f64>,
}

impl ItemWeights {
    /// Equal weights over the active attributes of `q_row`.
    pub fn equal(q_row: &[u8]) -> Result<Self> {
        let active = q_row.iter().filter(|&&v| v == 1).count();
        if active == 0 {
            return Err(Error::InvalidDesign("item measures no attribute".into()));
        }
        let w = 1.0 / active as f64;
        Ok(ItemWeights {
            alpha: q_row
                .iter()
                .map(|&v| if v == 1 { w } else { 0.0 })
                .collect(),
        })
    }

    pub fn validate(&self, q_row: &[u8]) -> Result<()> {
        if self.alpha.len() != q_row.len() {
            return Err(Error::Shape("weight vector length differs from K".into()));
        }
        let mut sum = 0.0;
        for (a, &q) in self.alpha.iter().zip(q_row) {
            if !(*a >= 0.0) || !a.is_finite() {
                return Err(Error::domain("weights must be nonnegative"));
            }
            if q == 0 && *a != 0.0 {
                return Err(Error::domain("weights must vanish where q_jk = 0"));
            }
            sum += a;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::domain(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Row-major lower-triangular K×K matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct LowerTriangular {
    k: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn identity(k: usize) -> Self {
        let mut data = vec![0.0; k * k];
        (0..k).for_each(|r| data[r * k + r] = 1.0);
        LowerTriangular { k, data }
    }

    pub fn from_dense(k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * k {
            return Err(Error::Shape(format!("expected {} entries", k * k)));
        }
        for r in 0..k {
            for c in r + 1..k {
                if data[r * k + c] != 0.0 {
                    return Err(Error::domain("entries above the diagonal must be zero"));
                }
            }
        }
        Ok(LowerTriangular { k, data })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.k + c]
    }

    /// Row `r` restricted to its first `r + 1` entries.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.k..r * self.k + r + 1]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.k..r * self.k + r + 1]
    }

    /// `L Lᵀ`.
    pub fn gram(&self) -> Vec<f64> {
        linalg::gram_lower(&self.data, self.k)
    }
}

impl From<LowerTriangular> for Vec<Vec<f64>> {
    fn from(l: LowerTriangular) -> Self {
        l.data.chunks(l.k).map(<[f64]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for LowerTriangular {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("triangular factor must be square".into()));
        }
        LowerTriangular::from_dense(k, rows.into_iter().flatten().collect())
    }
}

/// Cholesky factor of a correlation matrix: unit-norm rows, first row fixed
/// to `e_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CholeskyCorrelation(LowerTriangular);

impl CholeskyCorrelation {
    pub fn identity(k: usize) -> Self {
        CholeskyCorrelation(LowerTriangular::identity(k))
    }

    pub fn new(factor: LowerTriangular) -> Result<Self> {
        let c = CholeskyCorrelation(factor);
        c.validate()?;
        Ok(c)
    }

    /// Skips validation; used for numerical differentiation off the sphere.
    pub fn from_raw(factor: LowerTriangular) -> Self {
        CholeskyCorrelation(factor)
    }

    /// Factorizes a correlation matrix.
    pub fn from_correlation(k: usize, corr: &[f64]) -> Result<Self> {
        let l = linalg::cholesky(corr, k)?;
        let mut f = LowerTriangular { k, data: l };
        for r in 0..k {
            let row = f.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(f)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.0.k;
        if k == 0 {
            return Err(Error::Shape("empty correlation factor".into()));
        }
        for r in 0..k {
            let row = self.0.row(r);
            let norm2: f64 = row.iter().map(|v| v * v).sum();
            if (norm2.sqrt() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::domain(format!(
                    "row {r} of L does not have unit norm"
                )));
            }
            if row[r].abs() < DIAG_FLOOR {
                return Err(Error::domain(format!(
                    "diagonal {r} of L is below the floor"
                )));
            }
        }
        if self.0.get(0, 0) != 1.0 {
            return Err(Error::domain("first row of L must be e_1"));
        }
        Ok(())
    }

    pub fn factor(&self) -> &LowerTriangular {
        &self.0
    }

    pub(crate) fn factor_mut(&mut self) -> &mut LowerTriangular {
        &mut self.0
    }

    /// Correlation matrix `Σ = L Lᵀ`.
    pub fn correlation(&self) -> Vec<f64> {
        self.0.gram()
    }
}

/// Full parameter bundle of the generalized additive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapmParams {
    pub weights: Vec<ItemWeights>,
    /// One sieve per `(j, k)` with `q_jk = 1`; `None` elsewhere.
    pub sieves: Vec<Vec<Option<SieveMonotone>>>,
    pub chol: CholeskyCorrelation,
}

impl GapmParams {
    /// Starting values: equal weights, identity sieves and `Σ = I`.
    pub fn initial(q: &QMatrix, grid: &Arc<KnotGrid>) -> Result<Self> {
        let weights = (0..q.items())
            .map(|j| ItemWeights::equal(q.row(j)))
            .collect::<Result<Vec<_>>>()?;
        let sieves = (0..q.items())
            .map(|j| {
                q.row(j)
                    .iter()
                    .map(|&v| (v == 1).then(|| SieveMonotone::identity(grid.clone())))
                    .collect()
            })
            .collect();
        Ok(GapmParams {
            weights,
            sieves,
            chol: CholeskyCorrelation::identity(q.attributes()),
        })
    }

    pub fn validate(&self, q: &QMatrix) -> Result<()> {
        if self.weights.len() != q.items() || self.sieves.len() != q.items() {
            return Err(Error::Shape("parameter bundle does not match J".into()));
        }
        if self.chol.factor().dim() != q.attributes() {
            return Err(Error::Shape("correlation factor does not match K".into()));
        }
        let mut grid: Option<&KnotGrid> = None;
        for j in 0..q.items() {
            self.weights[j].validate(q.row(j))?;
            if self.sieves[j].len() != q.attributes() {
                return Err(Error::Shape(format!(
                    "item {j} sieve list does not match K"
                )));
            }
            for (k, s) in self.sieves[j].iter().enumerate() {
                match (q.get(j, k), s) {
                    (true, Some(s)) => {
                        s.validate()?;
                        match grid {
                            None => grid = Some(s.grid()),
                            Some(g) if g != s.grid().as_ref() => {
                                return Err(Error::domain("all sieves must share one knot grid"))
                            }
                            _ => {}
                        }
                    }
                    (true, None) => {
                        return Err(Error::domain(format!(
                            "missing sieve for item {j}, attribute {k}"
                        )))
                    }
                    (false, Some(_)) => {
                        return Err(Error::domain(format!(
                            "unexpected sieve for item {j}, attribute {k}"
                        )))
                    }
                    (false, None) => {}
                }
            }
        }
        self.chol.validate()
    }

    /// Knot grid shared by all sieves.
    pub fn grid(&self) -> Option<&Arc<KnotGrid>> {
        self.sieves
            .iter()
            .flatten()
            .flatten()
            .next()
            .map(SieveMonotone::grid)
    }

    pub fn attributes(&self) -> usize {
        self.chol.factor().dim()
    }

    /// IRF of item `j` at `u`.
    pub fn irf(&self, q: &QMatrix, j: usize, u: &[f64]) -> f64 {
        irf_gapm(&self.weights[j], &self.sieves[j], q.row(j), u)
    }
}

/// Parameter bundle of the additive partial-mastery model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApmParams {
    /// Per item `(δ_j0, δ_j1, …, δ_jK)`.
    pub delta: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub cov_chol: LowerTriangular,
}

impl ApmParams {
    /// Starting values: intercept `guess`, equal active slopes leaving slack
    /// `slip`, zero mean and identity covariance.
    pub fn initial(q: &QMatrix, guess: f64, slip: f64) -> Result<Self> {
        if !(guess >= 0.0 && slip >= 0.0 && guess + slip < 1.0) {
            return Err(Error::domain("need guess, slip >= 0 with guess + slip < 1"));
        }
        let delta = (0..q.items())
            .map(|j| {
                let active = q.row_count(j);
                if active == 0 {
                    return Err(Error::InvalidDesign(format!(
                        "item {j} measures no attribute"
                    )));
                }
                let slope = (1.0 - guess - slip) / active as f64;
                let mut d = vec![guess];
                d.extend(q.row(j).iter().map(|&v| if v == 1 { slope } else { 0.0 }));
                Ok(d)
            })
            .collect::<Result<Vec<_>>>()?;
        let k = q.attributes();
        Ok(ApmParams {
            delta,
            mean: vec![0.0; k],
            cov_chol: LowerTriangular::identity(k),
        })
    }

    pub fn validate(&self, q: &QMatrix) -> Result<()> {
        let k = q.attributes();
        if self.delta.len() != q.items() || self.mean.len() != k || self.cov_chol.dim() != k {
            return Err(Error::Shape("aPM parameter bundle does not match Q".into()));
        }
        for (j, d) in self.delta.iter().enumerate() {
            if d.len() != k + 1 {
                return Err(Error::Shape(format!("item {j} needs K+1 delta entries")));
            }
            if d.iter().any(|v| !(*v >= -SIMPLEX_TOL) || !v.is_finite()) {
                return Err(Error::domain(format!("item {j} has a negative delta")));
            }
            let total: f64 = d[0]
                + (0..k)
                    .filter(|&c| q.get(j, c))
                    .map(|c| d[c + 1])
                    .sum::<f64>();
            if total > 1.0 + SIMPLEX_TOL {
                return Err(Error::domain(format!(
                    "item {j} intercept plus slopes exceed 1"
                )));
            }
        }
        if (0..k).any(|r| !(self.cov_chol.get(r, r) > 0.0)) {
            return Err(Error::domain("covariance factor needs a positive diagonal"));
        }
        Ok(())
    }

    pub fn attributes(&self) -> usize {
        self.mean.len()
    }

    pub fn irf(&self, q: &QMatrix, j: usize, u: &[f64]) -> f64 {
        irf_apm(&self.delta[j], q.row(j), u)
    }
}

/// Binary responses of `N` individuals to `J` items, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    n: usize,
    j: usize,
    responses: Vec<u8>,
}

impl Dataset {
    pub fn new(n: usize, j: usize, responses: Vec<u8>) -> Result<Self> {
        if responses.len() != n * j {
            return Err(Error::Shape(format!(
                "expected {} responses, got {}",
                n * j,
                responses.len()
            )));
        }
        if responses.iter().any(|&v| v > 1) {
            return Err(Error::domain("responses must be 0 or 1"));
        }
        Ok(Dataset { n, j, responses })
    }

    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        let n = rows.len();
        let j = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != j) {
            return Err(Error::Shape("ragged response rows".into()));
        }
        Self::new(n, j, rows.into_iter().flatten().collect())
    }

    pub fn individuals(&self) -> usize {
        self.n
    }

    pub fn items(&self) -> usize {
        self.j
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.responses[i * self.j..(i + 1) * self.j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.responses.chunks(self.j.max(1)).take(self.n)
    }

    /// Individuals selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut responses = Vec::with_capacity(idx.len() * self.j);
        idx.iter()
            .for_each(|&i| responses.extend_from_slice(self.row(i)));
        Dataset {
            n: idx.len(),
            j: self.j,
            responses,
        }
    }

    /// Items whose responses are all zero or all one.
    pub fn degenerate_items(&self) -> Vec<usize> {
        (0..self.j)
            .filter(|&c| {
                let s: usize = (0..self.n).map(|i| self.row(i)[c] as usize).sum();
                s == 0 || s == self.n
            })
            .collect()
    }

    /// Proportion of correct responses per individual.
    pub fn proportion_correct(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let s: usize = self.row(i).iter().map(|&v| v as usize).sum();
                if self.j == 0 {
                    0.5
                } else {
                    s as f64 / self.j as f64
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qmatrix_rules() {
        assert!(QMatrix::new(vec![vec![1, 0], vec![0, 0]]).is_err());
        assert!(QMatrix::new(vec![vec![1, 2]]).is_err());
        assert!(QMatrix::new(vec![vec![1, 0], vec![1]]).is_err());
        let q = QMatrix::new(vec![vec![1, 0], vec![1, 1]]).unwrap();
        assert_eq!(q.row_count(1), 2);
        assert!(!q.is_exploratory());
        assert!(QMatrix::exploratory(3, 2).is_exploratory());
        let json = serde_json::to_string(&q).unwrap();
        assert_eq!(json, "[[1,0],[1,1]]");
    }

    #[test]
    fn equal_weights_follow_mask() {
        let w = ItemWeights::equal(&[1, 1, 0]).unwrap();
        assert_eq!(w.alpha, vec![0.5, 0.5, 0.0]);
        w.validate(&[1, 1, 0]).unwrap();
        assert!(w.validate(&[1, 0, 0]).is_err());
    }

    #[test]
    fn correlation_factor_checks() {
        let c = CholeskyCorrelation::from_correlation(
            3,
            &[1.0, 0.7, 0.7, 0.7, 1.0, 0.7, 0.7, 0.7, 1.0],
        )
        .unwrap();
        let s = c.correlation();
        for r in 0..3 {
            assert!((s[r * 3 + r] - 1.0).abs() < 1e-12);
        }
        assert!((s[1] - 0.7).abs() < 1e-12);
        let bad = LowerTriangular::from_dense(2, vec![1.0, 0.0, 0.6, 0.6]).unwrap();
        assert!(CholeskyCorrelation::new(bad).is_err());
        assert!(LowerTriangular::from_dense(2, vec![1.0, 0.1, 0.0, 1.0]).is_err());
        assert_eq!(
            CholeskyCorrelation::identity(3).correlation(),
            LowerTriangular::identity(3).gram()
        );
    }

    #[test]
    fn apm_initial_layout() {
        let q = QMatrix::new(vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]).unwrap();
        let p = ApmParams::initial(&q, 0.1, 0.1).unwrap();
        assert_eq!(p.delta[0], vec![0.1, 0.8, 0.0, 0.0]);
        let d1: Vec<f64> = p.delta[1]
            .iter()
            .map(|v| (v * 1e12).round() / 1e12)
            .collect();
        assert_eq!(d1, vec![0.1, 0.4, 0.4, 0.0]);
        for v in &p.delta[2][1..] {
            assert!((v - 0.8 / 3.0).abs() < 1e-15);
        }
        p.validate(&q).unwrap();
    }

    #[test]
    fn dataset_shapes() {
        assert!(Dataset::new(2, 2, vec![0, 1, 1]).is_err());
        assert!(Dataset::new(1, 2, vec![0, 2]).is_err());
        let d = Dataset::from_rows(vec![vec![1, 0, 1], vec![1, 1, 1]]).unwrap();
        assert_eq!(d.degenerate_items(), vec![0, 2]);
        assert_eq!(d.subset(&[1]).row(0), &[1, 1, 1]);
    }
}
