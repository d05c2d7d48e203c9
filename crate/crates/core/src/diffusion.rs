//! Variance-preserving diffusion: schedule, forward noising, the Tweedie
//! clean-image estimate and the DDPM / DDIM reverse steps.
//!
//! Model outputs follow the noise-prediction convention throughout:
//! `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps` and the network predicts
//! `eps`. All time indices are 1-based with `abar_0 = 1` by convention.

use crate::error::{config, Result};
use crate::geometry::Image;
use crate::rng::{standard_normal, Rng};

/// Linear beta ramp parameters, stored in run manifests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// T = 1000 with betas from 1e-4 to 0.02.
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// Shorter chain whose endpoints are stretched by `1000 / steps`, so that
    /// `abar` at a given fraction of the chain matches the 1000-step default.
    pub fn scaled(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * k,
            beta_end: 0.02 * k,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    // index 0 holds the t = 0 convention
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return config("schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return config(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            ));
        }
        let mut beta = vec![0.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            beta[t] = beta_start + (beta_end - beta_start) * frac;
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Self {
            config: ScheduleConfig {
                steps,
                beta_start,
                beta_end,
            },
            beta,
            alpha_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `1 - abar_t`.
    pub fn beta_bar(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return config(format!(
                "time step {t} outside schedule of {} steps",
                self.steps()
            ));
        }
        Ok(())
    }

    /// DDIM noise scale for a jump `t -> s` (`s < t`):
    /// `eta * sqrt(bbar_s / bbar_t) * sqrt(1 - abar_t / abar_s)`.
    pub fn ddim_sigma(&self, t: usize, s: usize, eta: f64) -> f64 {
        let bb_t = self.beta_bar(t);
        if bb_t <= 0.0 {
            return 0.0;
        }
        eta * (self.beta_bar(s) / bb_t).sqrt()
            * (1.0 - self.alpha_bar(t) / self.alpha_bar(s))
                .max(0.0)
                .sqrt()
    }

    /// Standard deviation of the DDPM ancestral step, the posterior
    /// `sqrt(beta_t * bbar_{t-1} / bbar_t)`.
    pub fn ddpm_sigma(&self, t: usize) -> f64 {
        (self.beta(t) * self.beta_bar(t - 1) / self.beta_bar(t)).sqrt()
    }
}

fn same_grid(a: &Image, b: &Image) -> Result<()> {
    a.ensure_grid(b.grid())
}

/// `sqrt(abar_t) x0 + sqrt(bbar_t) noise`.
pub fn forward_diffuse(
    x0: &Image,
    t: usize,
    noise: &Image,
    sched: &NoiseSchedule,
) -> Result<Image> {
    sched.check_step(t)?;
    same_grid(x0, noise)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), sched.beta_bar(t).sqrt());
    let v = x0
        .values()
        .iter()
        .zip(noise.values())
        .map(|(x, n)| a * x + b * n)
        .collect();
    Image::new(x0.grid(), v)
}

/// Tweedie clean-image estimate from a noise prediction,
/// `(x_t - sqrt(bbar_t) eps) / sqrt(abar_t)`.
pub fn tweedie_x0(x_t: &Image, t: usize, eps_pred: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_step(t)?;
    same_grid(x_t, eps_pred)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), sched.beta_bar(t).sqrt());
    let v = x_t
        .values()
        .iter()
        .zip(eps_pred.values())
        .map(|(x, e)| (x - b * e) / a)
        .collect();
    Image::new(x_t.grid(), v)
}

/// Generalized DDIM jump from `t` to `s < t`:
/// `sqrt(abar_s) x0 + sqrt(bbar_s - sigma^2) eps + sigma noise`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_jump(
    t: usize,
    s: usize,
    eps_pred: &Image,
    x0_hat: &Image,
    eta: f64,
    noise: &Image,
    sched: &NoiseSchedule,
) -> Result<Image> {
    sched.check_step(t)?;
    if s >= t || t == 0 {
        return config(format!("DDIM jump needs 0 <= s < t, got t={t}, s={s}"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return config(format!("eta {eta} outside [0, 1]"));
    }
    same_grid(eps_pred, x0_hat)?;
    same_grid(eps_pred, noise)?;
    let sigma = sched.ddim_sigma(t, s, eta);
    let c_x0 = sched.alpha_bar(s).sqrt();
    let c_eps = (sched.beta_bar(s) - sigma * sigma).max(0.0).sqrt();
    let v = x0_hat
        .values()
        .iter()
        .zip(eps_pred.values())
        .zip(noise.values())
        .map(|((x0, e), u)| c_x0 * x0 + c_eps * e + sigma * u)
        .collect();
    Image::new(x0_hat.grid(), v)
}

/// One DDIM step `t -> t-1`. `noise` is ignored when `eta = 0`.
pub fn ddim_step(
    t: usize,
    eps_pred: &Image,
    x0_hat: &Image,
    eta: f64,
    noise: &Image,
    sched: &NoiseSchedule,
) -> Result<Image> {
    if t == 0 {
        return config("DDIM step needs t >= 1");
    }
    ddim_jump(t, t - 1, eps_pred, x0_hat, eta, noise, sched)
}

/// DDPM ancestral step,
/// `(x_t - beta_t / sqrt(bbar_t) eps) / sqrt(alpha_t) + sigma_t noise`.
pub fn ddpm_step(
    x_t: &Image,
    t: usize,
    eps_pred: &Image,
    noise: &Image,
    sched: &NoiseSchedule,
) -> Result<Image> {
    sched.check_step(t)?;
    if t == 0 {
        return config("DDPM step needs t >= 1");
    }
    same_grid(x_t, eps_pred)?;
    same_grid(x_t, noise)?;
    let c_eps = sched.beta(t) / sched.beta_bar(t).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let sigma = sched.ddpm_sigma(t);
    let v = x_t
        .values()
        .iter()
        .zip(eps_pred.values())
        .zip(noise.values())
        .map(|((x, e), u)| inv * (x - c_eps * e) + sigma * u)
        .collect();
    Image::new(x_t.grid(), v)
}

/// Reverse DDIM chain from `x_start` at `t_start` down to `t = 0`.
///
/// `eps_fn(x_t, t)` supplies the noise prediction. Fresh noise is drawn from
/// `rng` only when `eta > 0`. Returns `x_0`, which equals the last clean
/// estimate because `bbar_0 = 0`.
pub fn ddim_sample(
    x_start: Image,
    t_start: usize,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    mut eps_fn: impl FnMut(&Image, usize) -> Result<Image>,
) -> Result<Image> {
    sched.check_step(t_start)?;
    let grid = x_start.grid();
    let mut x = x_start;
    for t in (1..=t_start).rev() {
        let eps = eps_fn(&x, t)?;
        let x0 = tweedie_x0(&x, t, &eps, sched)?;
        let noise = if eta > 0.0 {
            Image::new(grid, standard_normal(rng, grid.len()))?
        } else {
            Image::zeros(grid)
        };
        x = ddim_step(t, &eps, &x0, eta, &noise, sched)?;
    }
    Ok(x)
}
