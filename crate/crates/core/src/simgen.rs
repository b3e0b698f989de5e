//! Synthetic data: Gaussian-copula attributes, true item response functions
//! and the built-in Q-matrices.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{beta_cdf, irf_apm, normal_cdf, Dataset, ItemWeights, QMatrix};
use crate::rng::{self, DOMAIN_SIM};

/// `σ 1 1ᵀ + (1 − σ) I`, row-major.
pub fn make_equicorr(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::domain(format!(
            "equicorrelation must lie in [0, 1), got {sigma}"
        )));
    }
    if k == 0 {
        return Err(Error::domain("need at least one attribute"));
    }
    Ok((0..k * k)
        .map(|i| if i / k == i % k { 1.0 } else { sigma })
        .collect())
}

/// `n` draws of `U = Φ(Z)` with `Z ~ N(0, corr)`.
pub fn sample_copula<R: Rng + ?Sized>(
    n: usize,
    corr: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let l = linalg::cholesky(corr, k)?;
    let mut e = vec![0.0; k];
    let mut z = vec![0.0; k];
    Ok((0..n)
        .map(|_| {
            e.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            linalg::lower_matvec(&l, k, &e, &mut z);
            z.iter().map(|&v| normal_cdf(v)).collect()
        })
        .collect())
}

/// Shape parameters of a Beta distribution whose CDF serves as a true `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaShape {
    pub a: f64,
    pub b: f64,
}

impl BetaShape {
    pub fn cdf(&self, x: f64) -> f64 {
        beta_cdf(self.a, self.b, x.clamp(0.0, 1.0)).expect("valid shape")
    }
}

/// The four shapes cycled through when assigning true functions.
pub const BETA_SHAPES: [BetaShape; 4] = [
    BetaShape { a: 3.0, b: 3.0 },
    BetaShape {
        a: 1.0 / 3.0,
        b: 1.0 / 3.0,
    },
    BetaShape { a: 1.0, b: 3.0 },
    BetaShape { a: 3.0, b: 1.0 },
];

/// Assigns shapes to the active `(j, k)` pairs in row-major order, cycling
/// through [`BETA_SHAPES`].
pub fn cycle_shapes(q: &QMatrix) -> Vec<Vec<Option<BetaShape>>> {
    let mut next = 0;
    (0..q.items())
        .map(|j| {
            (0..q.attributes())
                .map(|k| {
                    q.get(j, k).then(|| {
                        let s = BETA_SHAPES[next % BETA_SHAPES.len()];
                        next += 1;
                        s
                    })
                })
                .collect()
        })
        .collect()
}

/// True generalized additive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapmTruth {
    pub q: QMatrix,
    pub weights: Vec<ItemWeights>,
    pub shapes: Vec<Vec<Option<BetaShape>>>,
    pub corr: Vec<f64>,
}

impl GapmTruth {
    pub fn irf(&self, j: usize, u: &[f64]) -> f64 {
        let alpha = &self.weights[j].alpha;
        self.shapes[j]
            .iter()
            .zip(u)
            .enumerate()
            .filter_map(|(k, (s, &x))| s.map(|s| alpha[k] * s.cdf(x)))
            .sum::<f64>()
            .min(1.0)
    }
}

/// True additive model, with the slipping probability of each item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApmTruth {
    pub q: QMatrix,
    pub delta: Vec<Vec<f64>>,
    pub slip: Vec<f64>,
    pub corr: Vec<f64>,
    pub mean: Vec<f64>,
}

impl ApmTruth {
    pub fn irf(&self, j: usize, u: &[f64]) -> f64 {
        irf_apm(&self.delta[j], self.q.row(j), u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Truth {
    Gapm(GapmTruth),
    Apm(ApmTruth),
}

impl Truth {
    pub fn irf(&self, j: usize, u: &[f64]) -> f64 {
        match self {
            Truth::Gapm(t) => t.irf(j, u),
            Truth::Apm(t) => t.irf(j, u),
        }
    }

    pub fn q(&self) -> &QMatrix {
        match self {
            Truth::Gapm(t) => &t.q,
            Truth::Apm(t) => &t.q,
        }
    }
}

fn draw_responses<R: Rng + ?Sized>(
    u: &[Vec<f64>],
    items: usize,
    irf: impl Fn(usize, &[f64]) -> f64,
    rng: &mut R,
) -> Dataset {
    let mut responses = Vec::with_capacity(u.len() * items);
    for ui in u {
        for j in 0..items {
            let p = irf(j, ui);
            responses.push(u8::from(rng.random::<f64>() < p));
        }
    }
    Dataset::new(u.len(), items, responses).expect("consistent shape")
}

/// Simulates from the generalized additive model. Returns the responses,
/// the true model and the latent draws.
pub fn gen_gapm<R: Rng + ?Sized>(
    n: usize,
    q: &QMatrix,
    shapes: Vec<Vec<Option<BetaShape>>>,
    weights: Vec<ItemWeights>,
    corr: &[f64],
    rng: &mut R,
) -> Result<(Dataset, GapmTruth, Vec<Vec<f64>>)> {
    let k = q.attributes();
    if shapes.len() != q.items() || weights.len() != q.items() {
        return Err(Error::Shape(
            "one shape row and weight vector per item required".into(),
        ));
    }
    for (j, w) in weights.iter().enumerate() {
        w.validate(q.row(j))?;
        if (0..k).any(|c| q.get(j, c) != shapes[j][c].is_some()) {
            return Err(Error::Shape(format!(
                "shape pattern of item {} does not match Q",
                j + 1
            )));
        }
    }
    let truth = GapmTruth {
        q: q.clone(),
        weights,
        shapes,
        corr: corr.to_vec(),
    };
    let u = sample_copula(n, corr, k, rng)?;
    let data = draw_responses(&u, q.items(), |j, x| truth.irf(j, x), rng);
    Ok((data, truth, u))
}

/// Simulates from the additive model with intercepts and slipping
/// probabilities drawn uniformly on `[0, 0.2]`.
pub fn gen_apm<R: Rng + ?Sized>(
    n: usize,
    q: &QMatrix,
    corr: &[f64],
    mean: &[f64],
    rng: &mut R,
) -> Result<(Dataset, ApmTruth, Vec<Vec<f64>>)> {
    let k = q.attributes();
    if mean.len() != k {
        return Err(Error::Shape("latent mean must have K entries".into()));
    }
    let mut delta = Vec::with_capacity(q.items());
    let mut slip = Vec::with_capacity(q.items());
    for j in 0..q.items() {
        let d0: f64 = rng.random_range(0.0..0.2);
        let s: f64 = rng.random_range(0.0..0.2);
        let budget = 1.0 - d0 - s;
        let mut d = vec![d0];
        let raw: Vec<f64> = (0..k)
            .map(|c| {
                if q.get(j, c) {
                    rng.random_range(0.0..budget)
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        d.extend(raw.iter().map(|v| v * budget / total));
        delta.push(d);
        slip.push(s);
    }
    let truth = ApmTruth {
        q: q.clone(),
        delta,
        slip,
        corr: corr.to_vec(),
        mean: mean.to_vec(),
    };
    let l = linalg::cholesky(corr, k)?;
    let mut e = vec![0.0; k];
    let mut z = vec![0.0; k];
    let u: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            e.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            linalg::lower_matvec(&l, k, &e, &mut z);
            z.iter().zip(mean).map(|(v, m)| normal_cdf(v + m)).collect()
        })
        .collect();
    let data = draw_responses(&u, q.items(), |j, x| truth.irf(j, x), rng);
    Ok((data, truth, u))
}

const Q3_T: [&str; 3] = [
    "10010010011011011111",
    "01001001010110110111",
    "00100100101101101111",
];

const Q5_T: [&str; 5] = [
    "10000100001000110011",
    "01000010001100011001",
    "00100001000110011100",
    "00010000100011001110",
    "00001000010001100111",
];

/// The built-in 20-item designs `Q3` and `Q5`.
pub fn builtin_q(name: &str) -> Result<QMatrix> {
    let rows: &[&str] = match name {
        "Q3" | "q3" => &Q3_T,
        "Q5" | "q5" => &Q5_T,
        other => {
            return Err(Error::domain(format!(
                "unknown built-in Q-matrix {other:?}"
            )))
        }
    };
    let items = rows[0].len();
    QMatrix::new(
        (0..items)
            .map(|j| rows.iter().map(|r| r.as_bytes()[j] - b'0').collect())
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimModel {
    Gapm,
    Apm,
}

/// A simulated data set with everything needed to score a fit against it.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub data: Dataset,
    pub truth: Truth,
    pub u: Vec<Vec<f64>>,
}

/// Simulates `n` individuals from the built-in design with equicorrelation
/// `sigma`, cycled Beta shapes and equal weights (generalized model) or the
/// uniform guessing/slipping scheme (additive model). Fully determined by
/// `seed`.
pub fn simulate(
    model: SimModel,
    q: &QMatrix,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<Simulation> {
    let k = q.attributes();
    let corr = make_equicorr(k, sigma)?;
    let mut rng = rng::stream(seed, &[DOMAIN_SIM]);
    let (data, truth, u) = match model {
        SimModel::Gapm => {
            let weights = (0..q.items())
                .map(|j| ItemWeights::equal(q.row(j)))
                .collect::<Result<Vec<_>>>()?;
            let (d, t, u) = gen_gapm(n, q, cycle_shapes(q), weights, &corr, &mut rng)?;
            (d, Truth::Gapm(t), u)
        }
        SimModel::Apm => {
            let (d, t, u) = gen_apm(n, q, &corr, &vec![0.0; k], &mut rng)?;
            (d, Truth::Apm(t), u)
        }
    };
    Ok(Simulation { data, truth, u })
}

/// Fresh individuals from an existing truth, for held-out evaluation.
pub fn resample(truth: &Truth, n: usize, seed: u64) -> Result<Simulation> {
    let mut rng = rng::stream(seed, &[DOMAIN_SIM, 1]);
    let q = truth.q();
    let k = q.attributes();
    let (corr, mean) = match truth {
        Truth::Gapm(t) => (t.corr.clone(), vec![0.0; k]),
        Truth::Apm(t) => (t.corr.clone(), t.mean.clone()),
    };
    let l = linalg::cholesky(&corr, k)?;
    let mut e = vec![0.0; k];
    let mut z = vec![0.0; k];
    let u: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            e.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            linalg::lower_matvec(&l, k, &e, &mut z);
            z.iter()
                .zip(&mean)
                .map(|(v, m)| normal_cdf(v + m))
                .collect()
        })
        .collect();
    let data = draw_responses(&u, q.items(), |j, x| truth.irf(j, x), &mut rng);
    Ok(Simulation {
        data,
        truth: truth.clone(),
        u,
    })
}
