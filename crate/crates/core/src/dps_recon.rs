//! Diffusion posterior sampling with a preconditioned Poisson gradient.
//!
//! Each reverse step takes a DDIM step and then moves the state along
//! `lambda * (x0/S) * (A^T (y / (A x0 + b)) - S)`, evaluated at the clean
//! estimate. The Jacobian of the clean estimate with respect to the state is
//! taken as the identity.
//!
//! That surrogate is only stable where `sqrt(abar_t)` is not small: Tweedie
//! divides by it, so the guidance feeds back with gain of order
//! `lambda / sqrt(abar_t)`. The defaults therefore start from a noised MLEM
//! image at the same `T'` as the DDIP reconstructor rather than from noise.

use crate::ddip_recon::{init_x_tprime, ReconInput};
use crate::diffusion::{ddim_step, tweedie_x0, NoiseSchedule};
use crate::error::{config, Error, Result};
use crate::geometry::{Image, Projector, Sinogram};
use crate::rng::{standard_normal, Rng};
use crate::score::NoisePredictor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpsConfig {
    pub lambda_step: f64,
    pub eta: f64,
    pub t_start: usize,
    /// MLEM length for the noised start used when `t_start < T`.
    pub mlem_init_iters: usize,
}

impl Default for DpsConfig {
    fn default() -> Self {
        Self {
            lambda_step: 1.0,
            eta: 1.0,
            t_start: 200,
            mlem_init_iters: 20,
        }
    }
}

impl DpsConfig {
    /// Defaults for a 400-step schedule.
    pub fn desk() -> Self {
        Self {
            t_start: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.lambda_step >= 0.0 && self.lambda_step.is_finite()) {
            return config(format!(
                "step size must be non-negative, got {}",
                self.lambda_step
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return config(format!("eta {} outside [0, 1]", self.eta));
        }
        if self.t_start == 0 || self.t_start > sched.steps() {
            return config(format!(
                "start step {} outside 1..={}",
                self.t_start,
                sched.steps()
            ));
        }
        Ok(())
    }
}

/// `(x0/S) * (A^T (y / (A x0 + b)) - S)` in count space, for `x0 >= 0`.
///
/// Bins with zero expected counts are left out of the ratio; the second
/// value counts those among them that carry data.
pub fn dps_likelihood_grad(
    p: &Projector,
    x0_hat: &Image,
    y: &Sinogram,
    b: &Sinogram,
    sens: &Image,
) -> Result<(Image, usize)> {
    x0_hat.ensure_grid(p.grid())?;
    y.ensure_proj(p.proj())?;
    b.ensure_proj(p.proj())?;
    if x0_hat.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(
            "clean estimate must be clamped to be non-negative".into(),
        ));
    }
    let ax = p.forward_raw(x0_hat.values());
    let mut excluded = 0;
    let ratio: Vec<f64> = ax
        .iter()
        .zip(b.values())
        .zip(y.values())
        .map(|((&a, &bi), &yi)| {
            let mean = a + bi;
            if mean > 0.0 {
                yi / mean
            } else {
                excluded += usize::from(yi > 0.0);
                0.0
            }
        })
        .collect();
    let bp = p.back_raw(&ratio);
    let grad = x0_hat
        .values()
        .iter()
        .zip(&bp)
        .zip(sens.values())
        .map(|((&x, &r), &s)| if s > 0.0 { x / s * (r - s) } else { 0.0 })
        .collect();
    Ok((Image::new(p.grid(), grad)?, excluded))
}

/// Data-consistency direction used by the sampler.
pub trait LikelihoodGuide {
    /// Direction and data-fit value at a clean estimate, both in the
    /// sampler's units.
    fn direction(&self, x0_hat: &Image) -> Result<(Image, f64)>;
}

/// Poisson guide in activity units: the count-space gradient at
/// `max(x0, 0) * scale`, divided by `scale`. The data-fit value is the
/// log-likelihood.
pub struct PoissonGuide<'a> {
    input: ReconInput<'a>,
    sens: Image,
    excluded: std::cell::Cell<usize>,
}

impl<'a> PoissonGuide<'a> {
    pub fn new(input: ReconInput<'a>) -> Result<Self> {
        input.validate()?;
        Ok(Self {
            sens: input.projector.sensitivity(),
            input,
            excluded: std::cell::Cell::new(0),
        })
    }

    /// Running total of excluded bins over all evaluations.
    pub fn excluded_bins(&self) -> usize {
        self.excluded.get()
    }
}

impl LikelihoodGuide for PoissonGuide<'_> {
    fn direction(&self, x0_hat: &Image) -> Result<(Image, f64)> {
        let inp = &self.input;
        let x = x0_hat.clamp_min(0.0).scaled(inp.scale);
        let (grad, excluded) = dps_likelihood_grad(inp.projector, &x, inp.y, inp.b, &self.sens)?;
        self.excluded.set(self.excluded.get() + excluded);
        let loglik = if excluded == 0 {
            inp.projector.log_likelihood(inp.y, &x, inp.b)?
        } else {
            f64::NEG_INFINITY
        };
        Ok((grad.scaled(1.0 / inp.scale), loglik))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpsStepRecord {
    pub t: usize,
    /// Data-fit value of the clean estimate at this step.
    pub data_fit: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DpsDiagnostics {
    pub records: Vec<DpsStepRecord>,
    pub excluded_bins: usize,
}

/// Guided reverse chain from `x_start` at `cfg.t_start` to `t = 0`.
/// With `lambda_step = 0` the guide is never evaluated and the result equals
/// plain DDIM sampling with the same random stream.
#[allow(clippy::too_many_arguments)]
pub fn dps_sample(
    guide: &dyn LikelihoodGuide,
    predictor: &dyn NoisePredictor,
    g: &Image,
    x_start: Image,
    cfg: &DpsConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    diag: &mut DpsDiagnostics,
) -> Result<Image> {
    cfg.validate(sched)?;
    let grid = x_start.grid();
    let mut x = x_start;
    for t in (1..=cfg.t_start).rev() {
        let eps = predictor.predict(&x, t, g)?;
        let x0 = tweedie_x0(&x, t, &eps, sched)?;
        let noise = if cfg.eta > 0.0 {
            Image::new(grid, standard_normal(rng, grid.len()))?
        } else {
            Image::zeros(grid)
        };
        x = ddim_step(t, &eps, &x0, cfg.eta, &noise, sched)?;
        if cfg.lambda_step > 0.0 {
            let (dir, fit) = guide.direction(&x0)?;
            let lam = cfg.lambda_step;
            let v = x
                .values()
                .iter()
                .zip(dir.values())
                .map(|(a, d)| a + lam * d)
                .collect();
            x = Image::new(grid, v)?;
            diag.records.push(DpsStepRecord { t, data_fit: fit });
        }
        if !x.is_finite() {
            return Err(Error::Diverged(format!(
                "sampler state non-finite after t={t}"
            )));
        }
    }
    Ok(x)
}

/// Full reconstruction in count space. Starts from pure noise when
/// `t_start = T`, otherwise from a noised MLEM image.
pub fn dps_reconstruct(
    input: &ReconInput<'_>,
    predictor: &dyn NoisePredictor,
    cfg: &DpsConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    diag: &mut DpsDiagnostics,
) -> Result<Image> {
    cfg.validate(sched)?;
    let guide = PoissonGuide::new(*input)?;
    let grid = input.projector.grid();
    let x_start = if cfg.t_start == sched.steps() {
        Image::new(grid, standard_normal(rng, grid.len()))?
    } else {
        init_x_tprime(input, cfg.mlem_init_iters, cfg.t_start, sched, rng)?.0
    };
    let out = dps_sample(&guide, predictor, input.g, x_start, cfg, sched, rng, diag);
    diag.excluded_bins = guide.excluded_bins();
    Ok(out?.clamp_min(0.0).scaled(input.scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ddim_sample, ScheduleConfig};
    use crate::geometry::{simulate_counts, GridSpec, ProjSpec};
    use crate::phantom::{make_phantom, ContrastSpec};
    use crate::rng::rng_from_seed;
    use crate::score::{GaussianOracle, ScheduledOracle};
    use rand::Rng as _;

    fn desk_like() -> (Projector, Image) {
        let grid = GridSpec::new(16, 16, 8.0).unwrap();
        let p = Projector::new(grid, ProjSpec::new(20, 25, 8.0).unwrap()).unwrap();
        (p, make_phantom(3, &ContrastSpec::fdg(), grid).activity)
    }

    #[test]
    fn gradient_vanishes_at_consistent_data_and_at_zero() {
        let (p, truth) = desk_like();
        let sens = p.sensitivity();
        let b = Sinogram::filled(p.proj(), 0.2);
        let mean = p.forward(&truth).unwrap();
        let y = Sinogram::new(p.proj(), mean.values().iter().map(|m| m + 0.2).collect()).unwrap();
        let (grad, excluded) = dps_likelihood_grad(&p, &truth, &y, &b, &sens).unwrap();
        assert_eq!(excluded, 0);
        assert!(
            grad.values().iter().all(|v| v.abs() < 1e-9 * truth.max()),
            "{}",
            grad.max()
        );
        let (grad, _) = dps_likelihood_grad(&p, &Image::zeros(p.grid()), &y, &b, &sens).unwrap();
        assert!(grad.values().iter().all(|v| *v == 0.0));
        let (_, excluded) = dps_likelihood_grad(
            &p,
            &Image::zeros(p.grid()),
            &y,
            &Sinogram::zeros(p.proj()),
            &sens,
        )
        .unwrap();
        assert_eq!(excluded, y.values().iter().filter(|v| **v > 0.0).count());
        assert!(dps_likelihood_grad(&p, &truth.scaled(-1.0), &y, &b, &sens).is_err());
    }

    #[test]
    fn small_steps_increase_likelihood() {
        let (p, truth) = desk_like();
        let sens = p.sensitivity();
        let b = Sinogram::zeros(p.proj());
        let mut increases = 0;
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let (y, scale) = simulate_counts(&p.forward(&truth).unwrap(), 1e5, &mut rng).unwrap();
            let x = Image::new(
                p.grid(),
                truth
                    .values()
                    .iter()
                    .map(|v| scale * (v + 0.3 * rng.random::<f64>()))
                    .collect(),
            )
            .unwrap();
            let (grad, _) = dps_likelihood_grad(&p, &x, &y, &b, &sens).unwrap();
            let stepped = Image::new(
                p.grid(),
                x.values()
                    .iter()
                    .zip(grad.values())
                    .map(|(a, d)| a + 1e-3 * d)
                    .collect(),
            )
            .unwrap();
            if p.log_likelihood(&y, &stepped, &b).unwrap() > p.log_likelihood(&y, &x, &b).unwrap() {
                increases += 1;
            }
        }
        assert!(increases >= 18, "{increases}");
    }

    /// Observes the first half of the pixels: `y = M x_true`.
    struct MaskGuide {
        y: Vec<f64>,
        step: f64,
    }

    impl LikelihoodGuide for MaskGuide {
        fn direction(&self, x0: &Image) -> Result<(Image, f64)> {
            let mut dir = vec![0.0; x0.values().len()];
            let mut r2 = 0.0;
            for ((d, y), x) in dir.iter_mut().zip(&self.y).zip(x0.values()) {
                let r = y - x;
                *d = self.step * r;
                r2 += r * r;
            }
            Ok((Image::new(x0.grid(), dir)?, r2.sqrt()))
        }
    }

    #[test]
    fn toy_gaussian_problem_converges_in_the_tail() {
        let grid = GridSpec::new(8, 8, 1.0).unwrap();
        let sched = ScheduleConfig::scaled(100).build().unwrap();
        let oracle = GaussianOracle::new(Image::filled(grid, 0.5), 1.0).unwrap();
        let predictor = ScheduledOracle {
            oracle: &oracle,
            sched: &sched,
        };
        let mut rng = rng_from_seed(4);
        let guide = MaskGuide {
            y: (0..32).map(|_| rng.random::<f64>() * 2.0).collect(),
            step: 1.0,
        };
        let cfg = DpsConfig {
            lambda_step: 0.5,
            eta: 0.0,
            t_start: 100,
            mlem_init_iters: 1,
        };
        let start = Image::new(grid, standard_normal(&mut rng, 64)).unwrap();
        let mut diag = DpsDiagnostics::default();
        let out = dps_sample(
            &guide,
            &predictor,
            &Image::zeros(grid),
            start,
            &cfg,
            &sched,
            &mut rng,
            &mut diag,
        )
        .unwrap();
        assert!(out.is_finite());
        let tail = &diag.records[diag.records.len() - 20..];
        for w in tail.windows(2) {
            assert!(
                w[1].data_fit <= w[0].data_fit + 1e-12,
                "{} -> {}",
                w[0].data_fit,
                w[1].data_fit
            );
        }
    }

    #[test]
    fn zero_step_is_plain_sampling() {
        let grid = GridSpec::new(8, 8, 1.0).unwrap();
        let sched = ScheduleConfig::scaled(50).build().unwrap();
        let oracle = GaussianOracle::new(Image::filled(grid, 0.2), 0.3).unwrap();
        let predictor = ScheduledOracle {
            oracle: &oracle,
            sched: &sched,
        };
        let guide = MaskGuide {
            y: vec![1.0; 8],
            step: 1.0,
        };
        let start = Image::new(grid, standard_normal(&mut rng_from_seed(5), 64)).unwrap();
        let cfg = DpsConfig {
            lambda_step: 0.0,
            eta: 1.0,
            t_start: 50,
            mlem_init_iters: 1,
        };
        let mut diag = DpsDiagnostics::default();
        let a = dps_sample(
            &guide,
            &predictor,
            &Image::zeros(grid),
            start.clone(),
            &cfg,
            &sched,
            &mut rng_from_seed(6),
            &mut diag,
        )
        .unwrap();
        let b = ddim_sample(start, 50, 1.0, &sched, &mut rng_from_seed(6), |x, t| {
            predictor.predict(x, t, &Image::zeros(grid))
        })
        .unwrap();
        assert_eq!(a, b);
        assert!(diag.records.is_empty());
    }

    #[test]
    fn config_validation() {
        let sched = ScheduleConfig::scaled(400).build().unwrap();
        DpsConfig::desk().validate(&sched).unwrap();
        assert!(DpsConfig {
            t_start: 401,
            ..DpsConfig::desk()
        }
        .validate(&sched)
        .is_err());
        assert!(DpsConfig {
            lambda_step: -1.0,
            ..DpsConfig::desk()
        }
        .validate(&sched)
        .is_err());
        assert!(DpsConfig {
            eta: 2.0,
            ..DpsConfig::desk()
        }
        .validate(&sched)
        .is_err());
    }
}
