//! Noise schedules, closed-form forward noising and the deterministic DDIM
//! update.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpgError};
use crate::par;
use crate::tensor::{ensure_same_shape, hex, Latent};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_DDIM_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    /// Betas linear in `sqrt(beta)`; the Stable Diffusion family default.
    ScaledLinear { beta_start: f64, beta_end: f64 },
    Linear { beta_start: f64, beta_end: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::ScaledLinear {
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl BetaSchedule {
    pub fn alpha_bar(&self, train_steps: usize) -> Vec<f64> {
        let betas: Vec<f64> = match *self {
            BetaSchedule::ScaledLinear { beta_start, beta_end } => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                lerp(a, b, train_steps).map(|x| x * x).collect()
            }
            BetaSchedule::Linear { beta_start, beta_end } => {
                lerp(beta_start, beta_end, train_steps).collect()
            }
        };
        let mut acc = 1.0;
        betas
            .into_iter()
            .map(|beta| {
                acc *= 1.0 - beta;
                acc
            })
            .collect()
    }
}

fn lerp(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    let denom = (n.max(2) - 1) as f64;
    (0..n).map(move |i| a + (b - a) * i as f64 / denom)
}

/// Serializable description from which a [`DiffusionSchedule`] is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub beta_schedule: BetaSchedule,
    pub train_steps: usize,
    pub ddim_steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            beta_schedule: BetaSchedule::default(),
            train_steps: DEFAULT_TRAIN_STEPS,
            ddim_steps: DEFAULT_DDIM_STEPS,
        }
    }
}

impl ScheduleSpec {
    pub fn with_steps(mut self, ddim_steps: usize) -> Self {
        self.ddim_steps = ddim_steps;
        self
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.beta_schedule.alpha_bar(self.train_steps), self.ddim_steps)
    }
}

/// Cumulative noise coefficients plus the DDIM timestep subsequence.
///
/// The update after the last subsequence entry re-noises to `alpha_bar = 1`,
/// so the sampler's final output is the clean predicted latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
    timesteps: Vec<usize>,
    eta: f64,
}

impl DiffusionSchedule {
    /// Evenly spaced "leading" subsequence with an offset of one, i.e.
    /// `981, 961, ..., 1` for 50 of 1000 train steps.
    pub fn new(alpha_bar: Vec<f64>, ddim_steps: usize) -> Result<Self> {
        let total = alpha_bar.len();
        if ddim_steps == 0 || ddim_steps > total {
            return Err(SpgError::Schedule(format!(
                "ddim_steps must be in 1..={total}, got {ddim_steps}"
            )));
        }
        let ratio = total / ddim_steps;
        let offset = if ratio > 1 { 1 } else { 0 };
        let timesteps = (0..ddim_steps).rev().map(|i| i * ratio + offset).collect();
        Self::from_parts(alpha_bar, timesteps)
    }

    pub fn from_parts(alpha_bar: Vec<f64>, timesteps: Vec<usize>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(SpgError::Schedule("empty alpha_bar".into()));
        }
        if let Some(a) = alpha_bar.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(SpgError::Schedule(format!("alpha_bar {a} outside (0, 1]")));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(SpgError::Schedule("alpha_bar must be strictly decreasing".into()));
        }
        if timesteps.is_empty() {
            return Err(SpgError::Schedule("empty timestep subsequence".into()));
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(SpgError::Schedule(
                "timestep subsequence must be strictly decreasing".into(),
            ));
        }
        if timesteps[0] >= alpha_bar.len() {
            return Err(SpgError::Schedule(format!(
                "timestep {} outside [0, {})",
                timesteps[0],
                alpha_bar.len()
            )));
        }
        Ok(DiffusionSchedule {
            alpha_bar,
            timesteps,
            eta: 0.0,
        })
    }

    pub fn total_train_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn ddim_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar` at a train timestep.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            SpgError::invalid(format!(
                "timestep {t} outside [0, {})",
                self.alpha_bar.len()
            ))
        })
    }

    /// Train timestep of sampling step `step`.
    pub fn timestep(&self, step: usize) -> Result<usize> {
        self.timesteps.get(step).copied().ok_or_else(|| {
            SpgError::invalid(format!(
                "step index {step} outside [0, {})",
                self.timesteps.len()
            ))
        })
    }

    /// `(alpha_bar_t, alpha_bar_prev)` for sampling step `step`.
    pub fn step_alphas(&self, step: usize) -> Result<(f64, f64)> {
        let t = self.timestep(step)?;
        let a = self.alpha_bar[t];
        let a_prev = match self.timesteps.get(step + 1) {
            Some(&tp) => self.alpha_bar[tp],
            None => 1.0,
        };
        Ok((a, a_prev))
    }

    /// Short stable identifier; caches are bound to it.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.alpha_bar {
            h.update(a.to_bits().to_le_bytes());
        }
        for t in &self.timesteps {
            h.update((*t as u64).to_le_bytes());
        }
        h.update(self.eta.to_bits().to_le_bytes());
        let d: [u8; 32] = h.finalize().into();
        hex(&d[..8])
    }
}

fn check_alpha(a: f64) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(SpgError::Schedule(format!("alpha_bar {a} outside (0, 1]")))
    }
}

/// `sqrt(a) * x0 + sqrt(1 - a) * noise` at train timestep `t`.
pub fn forward_noise(x0: &Latent, t: usize, noise: &Latent, schedule: &DiffusionSchedule) -> Result<Latent> {
    let a = schedule.alpha_bar(t)?;
    forward_noise_at(x0, a, noise)
}

pub fn forward_noise_at(x0: &Latent, alpha_bar: f64, noise: &Latent) -> Result<Latent> {
    ensure_same_shape(x0, noise, "forward_noise")?;
    check_alpha(alpha_bar)?;
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(par::zip2_map(x0, noise, move |x, n| sa * x + sn * n))
}

/// Invert the noising formula for `x0` given the noise estimate.
pub fn predict_x0(z_t: &Latent, eps: &Latent, alpha_bar: f64) -> Result<Latent> {
    ensure_same_shape(z_t, eps, "predict_x0")?;
    check_alpha(alpha_bar)?;
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(par::zip2_map(z_t, eps, move |z, e| (z - sn * e) / sa))
}

/// One deterministic DDIM transition between noise levels.
///
/// No clamping or thresholding is applied to the predicted `x0`.
pub fn ddim_transition(z_t: &Latent, eps: &Latent, alpha_bar: f64, alpha_bar_next: f64) -> Result<Latent> {
    check_alpha(alpha_bar_next)?;
    let x0 = predict_x0(z_t, eps, alpha_bar)?;
    let (sa, sn) = (alpha_bar_next.sqrt(), (1.0 - alpha_bar_next).sqrt());
    Ok(par::zip2_map(&x0, eps, move |x, e| sa * x + sn * e))
}

/// DDIM update from sampling step `step` to the next (less noisy) level.
pub fn ddim_step(z_t: &Latent, eps_hat: &Latent, step: usize, schedule: &DiffusionSchedule) -> Result<Latent> {
    let (a, a_prev) = schedule.step_alphas(step)?;
    ddim_transition(z_t, eps_hat, a, a_prev)
}
