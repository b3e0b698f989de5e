//! Metropolis-adjusted Langevin sampler for one individual's latent position.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{Evaluation, LatentModel, LatentPoint};

const LN_4PI: f64 = 2.531_024_246_969_290_7;

/// How the Langevin step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// A fixed `h`.
    Fixed(f64),
    /// `h = mu_z · K^(−1/3)`.
    Scaled { mu_z: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MalaConfig {
    pub step: StepRule,
    /// Transitions per individual per outer iteration.
    pub inner_steps: usize,
}

impl MalaConfig {
    pub fn fixed(h: f64) -> Self {
        MalaConfig {
            step: StepRule::Fixed(h),
            inner_steps: 1,
        }
    }

    /// 0.2 up to three attributes, 0.1 from five, 0.15 in between.
    pub fn default_for(k: usize) -> Self {
        Self::fixed(match k {
            0..=3 => 0.2,
            4 => 0.15,
            _ => 0.1,
        })
    }

    pub fn step_size(&self, k: usize) -> f64 {
        match self.step {
            StepRule::Fixed(h) => h,
            StepRule::Scaled { mu_z } => mu_z * (k.max(1) as f64).powf(-1.0 / 3.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match self.step {
            StepRule::Fixed(h) => h,
            StepRule::Scaled { mu_z } => mu_z,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!(
                "MALA step must be positive, got {v}"
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("MALA inner steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// A persistent chain with its acceptance bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub point: LatentPoint,
    pub proposals: u64,
    pub accepts: u64,
    /// Proposals rejected because the acceptance ratio was not finite.
    pub warnings: u64,
}

impl ChainState {
    pub fn new(z: Vec<f64>) -> Self {
        ChainState {
            point: LatentPoint::from_z(z),
            proposals: 0,
            accepts: 0,
            warnings: 0,
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }
}

/// Euler-Maruyama step of the Langevin diffusion: `z + h·drift + √(2h)·noise`.
pub fn propose(z: &[f64], drift: &[f64], h: f64, noise: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    propose_into(z, drift, h, noise, &mut out);
    out
}

fn propose_into(z: &[f64], drift: &[f64], h: f64, noise: &[f64], out: &mut [f64]) {
    let s = (2.0 * h).sqrt();
    for c in 0..z.len() {
        out[c] = z[c] + h * drift[c] + s * noise[c];
    }
}

/// Log-density of the Langevin proposal from `z_from` to `z_to`.
pub fn log_kernel(z_to: &[f64], z_from: &[f64], drift_from: &[f64], h: f64) -> f64 {
    let sq: f64 = z_to
        .iter()
        .zip(z_from)
        .zip(drift_from)
        .map(|((t, f), d)| {
            let r = t - f - h * d;
            r * r
        })
        .sum();
    -0.5 * z_to.len() as f64 * (LN_4PI + h.ln()) - sq / (4.0 * h)
}

/// Metropolis-Hastings log-ratio for moving from the current point to a proposal.
pub fn log_acceptance_ratio(ll_prop: f64, ll_cur: f64, kernel_back: f64, kernel_fwd: f64) -> f64 {
    (ll_prop + kernel_back) - (ll_cur + kernel_fwd)
}

/// Reusable buffers for chain transitions. After `transition` returns,
/// `current()` holds the evaluation at the chain's new position.
#[derive(Debug, Clone)]
pub struct Sampler {
    cur: Evaluation,
    prop: Evaluation,
    z_prop: Vec<f64>,
    noise: Vec<f64>,
}

impl Sampler {
    pub fn new(k: usize, j: usize) -> Self {
        Sampler {
            cur: Evaluation::new(k, j),
            prop: Evaluation::new(k, j),
            z_prop: vec![0.0; k],
            noise: vec![0.0; k],
        }
    }

    pub fn current(&self) -> &Evaluation {
        &self.cur
    }

    /// Evaluates the model at the chain's present position without moving it.
    pub fn load<M: LatentModel>(&mut self, model: &M, y: &[u8], state: &ChainState) -> Result<()> {
        model.evaluate(y, &state.point.z, &mut self.cur)?;
        Ok(())
    }

    /// Performs `steps` MALA transitions in place. The current position must
    /// evaluate finitely; non-finite proposals are rejected and counted.
    pub fn transition<M: LatentModel, R: Rng + ?Sized>(
        &mut self,
        model: &M,
        y: &[u8],
        state: &mut ChainState,
        h: f64,
        steps: usize,
        rng: &mut R,
    ) -> Result<()> {
        let k = state.point.z.len();
        self.z_prop.resize(k, 0.0);
        self.noise.resize(k, 0.0);
        self.load(model, y, state)?;
        for _ in 0..steps {
            for v in self.noise.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            propose_into(
                &self.cur.z,
                &self.cur.grad_z,
                h,
                &self.noise,
                &mut self.z_prop,
            );
            state.proposals += 1;
            let uniform: f64 = rng.random();
            let accepted = match model.evaluate(y, &self.z_prop, &mut self.prop) {
                Ok(ll_prop) => {
                    let fwd = log_kernel(&self.z_prop, &self.cur.z, &self.cur.grad_z, h);
                    let back = log_kernel(&self.cur.z, &self.z_prop, &self.prop.grad_z, h);
                    let ratio = log_acceptance_ratio(ll_prop, self.cur.log_density, back, fwd);
                    if ratio.is_nan() {
                        state.warnings += 1;
                        false
                    } else {
                        ratio >= 0.0 || uniform.ln() < ratio
                    }
                }
                Err(e) if e.is_numerical() => {
                    state.warnings += 1;
                    false
                }
                Err(e) => return Err(e),
            };
            if accepted {
                std::mem::swap(&mut self.cur, &mut self.prop);
                state.accepts += 1;
                state.point.z.copy_from_slice(&self.cur.z);
                state.point.u.copy_from_slice(&self.cur.u);
            }
        }
        Ok(())
    }
}

/// One MALA transition (or `config.inner_steps` of them) from `state`.
pub fn mala_step<M: LatentModel, R: Rng + ?Sized>(
    mut state: ChainState,
    y: &[u8],
    model: &M,
    config: &MalaConfig,
    rng: &mut R,
) -> Result<ChainState> {
    config.validate()?;
    let k = model.attributes();
    let mut sampler = Sampler::new(k, model.items());
    sampler.transition(
        model,
        y,
        &mut state,
        config.step_size(k),
        config.inner_steps,
        rng,
    )?;
    Ok(state)
}
