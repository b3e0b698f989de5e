//! Monotone piecewise-linear functions on `[0, 1]`.
//!
//! A sieve function is described by a knot grid `0 = b_0 < … < b_S = 1` and a
//! vector of nonnegative segment increments summing to one, so `g(0) = 0`,
//! `g(1) = 1` and `g` rises by `theta[m]` over segment `m`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    breakpoints: Vec<f64>,
}

impl KnotGrid {
    /// Builds a grid from the full breakpoint list, endpoints included.
    pub fn new(breakpoints: Vec<f64>) -> Result<Self> {
        let grid = KnotGrid { breakpoints };
        grid.validate()?;
        Ok(grid)
    }

    /// Builds a grid from interior knots `0 < k_1 < … < k_L < 1`.
    pub fn from_interior(knots: &[f64]) -> Result<Self> {
        let mut b = Vec::with_capacity(knots.len() + 2);
        b.push(0.0);
        b.extend_from_slice(knots);
        b.push(1.0);
        Self::new(b)
    }

    /// `S` equal-width segments.
    pub fn uniform(segments: usize) -> Result<Self> {
        if segments < 2 {
            return Err(Error::domain("a knot grid needs at least two segments"));
        }
        let b = (0..=segments).map(|i| i as f64 / segments as f64).collect();
        Self::new(b)
    }

    /// Named knot sets: `k1` (0.05 steps), `k0` (boundary-augmented 0.1
    /// steps), `k2` (0.1 steps) and `ecpe` (0.1 steps plus 0.025/0.05 and
    /// 0.95/0.975 near the boundaries).
    pub fn preset(name: &str) -> Result<Self> {
        let tenths: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let interior: Vec<f64> = match name {
            "k1" => (1..=19).map(|i| i as f64 / 20.0).collect(),
            "k0" => {
                let mut v = vec![0.05];
                v.extend(&tenths);
                v.push(0.95);
                v
            }
            "k2" => tenths,
            "ecpe" => {
                let mut v = vec![0.025, 0.05];
                v.extend(&tenths);
                v.extend([0.95, 0.975]);
                v
            }
            other => {
                return Err(Error::domain(format!("unknown knot preset `{other}`")));
            }
        };
        Self::from_interior(&interior)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.breakpoints;
        if b.len() < 3 {
            return Err(Error::domain("a knot grid needs at least two segments"));
        }
        if b[0] != 0.0 || *b.last().unwrap() != 1.0 {
            return Err(Error::domain("knot grid must start at 0 and end at 1"));
        }
        if b.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("knot grid must be strictly increasing"));
        }
        Ok(())
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn interior(&self) -> &[f64] {
        &self.breakpoints[1..self.breakpoints.len() - 1]
    }

    /// Number of segments `S`.
    pub fn segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    /// Segment widths; these are the increments of the identity function.
    pub fn widths(&self) -> Vec<f64> {
        self.breakpoints.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Segment containing `x` and the fractional position inside it.
    ///
    /// Segments are closed on the left, so a breakpoint belongs to the segment
    /// on its right; `x = 1` belongs to the last segment with fraction 1.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let b = &self.breakpoints;
        let s = b.len() - 1;
        let m = b[1..s].partition_point(|&k| k <= x);
        let frac = (x - b[m]) / (b[m + 1] - b[m]);
        (m, frac.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveMonotone {
    grid: Arc<KnotGrid>,
    theta: Vec<f64>,
}

impl SieveMonotone {
    pub fn new(grid: Arc<KnotGrid>, theta: Vec<f64>) -> Result<Self> {
        let g = SieveMonotone { grid, theta };
        g.validate()?;
        Ok(g)
    }

    /// Skips validation; used for numerical differentiation off the simplex.
    pub fn from_raw(grid: Arc<KnotGrid>, theta: Vec<f64>) -> Self {
        SieveMonotone { grid, theta }
    }

    /// The sieve representing `g(x) = x`.
    pub fn identity(grid: Arc<KnotGrid>) -> Self {
        let theta = grid.widths();
        SieveMonotone { grid, theta }
    }

    /// Piecewise-linear interpolant of a monotone `f` with `f(0)=0`, `f(1)=1`
    /// at the grid breakpoints.
    pub fn interpolate<F: Fn(f64) -> f64>(grid: Arc<KnotGrid>, f: F) -> Result<Self> {
        let vals: Vec<f64> = grid.breakpoints().iter().map(|&x| f(x)).collect();
        let theta = vals
            .windows(2)
            .map(|w| (w[1] - w[0]).max(0.0))
            .collect::<Vec<_>>();
        let total: f64 = theta.iter().sum();
        if !(total > 0.0) {
            return Err(Error::domain("interpolated function is flat"));
        }
        Self::new(grid, theta.into_iter().map(|t| t / total).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.theta.len() != self.grid.segments() {
            return Err(Error::domain(format!(
                "sieve has {} increments for {} segments",
                self.theta.len(),
                self.grid.segments()
            )));
        }
        if self.theta.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::domain("sieve increments must be nonnegative"));
        }
        let sum: f64 = self.theta.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::domain(format!(
                "sieve increments sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> &Arc<KnotGrid> {
        &self.grid
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut Vec<f64> {
        &mut self.theta
    }

    fn check_domain(x: f64) -> Result<()> {
        if (0.0..=1.0).contains(&x) {
            Ok(())
        } else {
            Err(Error::domain(format!("sieve argument {x} outside [0,1]")))
        }
    }

    /// Evaluates `g(x)`; exact at both endpoints.
    pub fn eval(&self, x: f64) -> Result<f64> {
        Self::check_domain(x)?;
        Ok(self.eval_unchecked(x))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let (m, frac) = self.grid.locate(x);
        let below: f64 = self.theta[..m].iter().sum();
        (below + self.theta[m] * frac).min(1.0)
    }

    /// Slope of `g` at `x` (right-hand slope at breakpoints, last segment at
    /// `x = 1`) and the gradient of `g(x)` with respect to the increments.
    pub fn derivatives(&self, x: f64) -> Result<(f64, Vec<f64>)> {
        Self::check_domain(x)?;
        let b = self.grid.breakpoints();
        let (m, frac) = self.grid.locate(x);
        let slope = self.theta[m] / (b[m + 1] - b[m]);
        let mut d = vec![0.0; self.theta.len()];
        d[..m].iter_mut().for_each(|v| *v = 1.0);
        d[m] = frac;
        Ok((slope, d))
    }
}
