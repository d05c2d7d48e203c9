//! Anatomically guided reconstruction with a deep diffusion image prior.
//!
//! Starting from a noised MLEM image at `t = T'`, every time step runs `N`
//! rounds of
//!
//! 1. anchor `a = max(x0_hat(x_t, t, g), 0)` from the current network,
//! 2. `M1` half-quadratic-splitting image steps, each one MLEM sub-update
//!    followed by the voxel-wise closed-form coupling to `a`,
//! 3. `M2` optimizer steps pulling `x0_hat(x_t, t, g)` toward the result,
//!
//! followed by one DDIM step to `t - 1`. Adapters persist across steps.
//!
//! The network works in activity units and the projector in count space;
//! `ReconInput::scale` converts between them.

use crate::classical::{mlem, ratio_backprojection};
use crate::diffusion::{ddim_step, forward_diffuse, tweedie_x0, NoiseSchedule};
use crate::error::{config, Error, Result};
use crate::geometry::{Image, Projector, Sinogram};
use crate::rng::{standard_normal, Rng};
use crate::score::{
    from_scalar, to_scalar, AdamW, Adapted, ConvScoreNet, ForwardPass, LoraSet, LAYOUT,
};

/// Measured data and conditioning shared by the diffusion reconstructors.
#[derive(Debug, Clone, Copy)]
pub struct ReconInput<'a> {
    pub projector: &'a Projector,
    pub y: &'a Sinogram,
    pub b: &'a Sinogram,
    /// Anatomical prior on the image grid.
    pub g: &'a Image,
    /// Expected counts per unit of `A x` in activity units.
    pub scale: f64,
}

impl ReconInput<'_> {
    pub fn validate(&self) -> Result<()> {
        self.y.ensure_proj(self.projector.proj())?;
        self.b.ensure_proj(self.projector.proj())?;
        self.g.ensure_grid(self.projector.grid())?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return config(format!("count scale must be positive, got {}", self.scale));
        }
        Ok(())
    }
}

/// Starting iterates of the MLEM sub-updates are floored at this fraction of
/// one activity unit, so that voxels clamped to zero can recover.
pub const ANCHOR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdipConfig {
    /// Outer rounds per time step (`N`).
    pub n_outer: usize,
    /// Image steps per round (`M1`).
    pub m1: usize,
    /// Network steps per round (`M2`).
    pub m2: usize,
    /// `T'`.
    pub t_start: usize,
    pub beta: f64,
    pub eta: f64,
    /// Adapter rank; 0 fine-tunes every network parameter.
    pub rank: usize,
    pub mlem_init_iters: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Keep a clean-image snapshot every this many steps; 0 disables.
    pub snapshot_every: usize,
    /// Replace `g` by a zero image.
    pub unconditional: bool,
}

impl Default for DdipConfig {
    fn default() -> Self {
        Self {
            n_outer: 2,
            m1: 5,
            m2: 1,
            t_start: 200,
            beta: 0.01,
            eta: 0.0,
            rank: 4,
            mlem_init_iters: 20,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            snapshot_every: 0,
            unconditional: false,
        }
    }
}

impl DdipConfig {
    /// Defaults for a 400-step schedule.
    pub fn desk() -> Self {
        Self {
            t_start: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.n_outer == 0 || self.m1 == 0 || self.m2 == 0 || self.mlem_init_iters == 0 {
            return config("N, M1, M2 and the MLEM initialization length must be positive");
        }
        if self.t_start == 0 || self.t_start > sched.steps() {
            return config(format!(
                "T' = {} outside 1..={}",
                self.t_start,
                sched.steps()
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return config(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return config(format!("eta {} outside [0, 1]", self.eta));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return config("learning rate and weight decay must be non-negative");
        }
        Ok(())
    }
}

/// Runs MLEM from a uniform start and forward-diffuses the result to `T'`.
/// Returns `(x_T', x_em_init)` in activity units.
pub fn init_x_tprime(
    input: &ReconInput<'_>,
    mlem_iters: usize,
    t_start: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Image, Image)> {
    input.validate()?;
    if mlem_iters == 0 {
        return config("MLEM initialization needs at least one iteration");
    }
    let (x_em, _) = mlem(
        input.projector,
        input.y,
        input.b,
        mlem_iters,
        None,
        |_, _| {},
    )?;
    let x_em = x_em.scaled(1.0 / input.scale);
    let grid = x_em.grid();
    let noise = Image::new(grid, standard_normal(rng, grid.len()))?;
    Ok((forward_diffuse(&x_em, t_start, &noise, sched)?, x_em))
}

/// Non-negative root of `c (x_em / x - 1) = x - a`, i.e.
/// `(a - c)/2 + sqrt((a - c)^2 + 4 c x_em)/2` with `c = S / beta`.
pub fn closed_form_update(a: f64, c: f64, x_em: f64) -> f64 {
    let d = a - c;
    let root = (d * d + 4.0 * c * x_em).sqrt();
    if d >= 0.0 {
        0.5 * (d + root)
    } else if root - d > 0.0 {
        // same value without cancellation when c dominates
        2.0 * c * x_em / (root - d)
    } else {
        0.0
    }
}

/// `sum_j S_j (x_em_j log x_j - x_j)`, the separable EM surrogate of the
/// log-likelihood around the iterate that produced `x_em`.
pub fn surrogate_q(x: &Image, x_em: &Image, sens: &Image) -> f64 {
    x.values()
        .iter()
        .zip(x_em.values())
        .zip(sens.values())
        .filter(|(_, &s)| s > 0.0)
        .map(|((&xj, &ej), &s)| {
            let log_term = if ej > 0.0 { ej * xj.ln() } else { 0.0 };
            s * (log_term - xj)
        })
        .sum()
}

/// `-L(y | x) + beta/2 |x - a|^2`, the objective of the image step.
pub fn hqs_objective(
    p: &Projector,
    y: &Sinogram,
    b: &Sinogram,
    x: &Image,
    anchor: &Image,
    beta: f64,
) -> Result<f64> {
    let l = p.log_likelihood(y, x, b)?;
    let d2: f64 = x
        .values()
        .iter()
        .zip(anchor.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(-l + 0.5 * beta * d2)
}

/// `m1` chained image steps from `x_prev`, all coupled to the same anchor.
/// Everything is in count space. Voxels without sensitivity are set to 0.
#[allow(clippy::too_many_arguments)]
pub fn hqs_image_update(
    p: &Projector,
    anchor: &Image,
    x_prev: &Image,
    y: &Sinogram,
    b: &Sinogram,
    sens: &Image,
    beta: f64,
    m1: usize,
) -> Result<Image> {
    anchor.ensure_grid(p.grid())?;
    x_prev.ensure_grid(p.grid())?;
    sens.ensure_grid(p.grid())?;
    if beta.is_nan() || beta <= 0.0 {
        return config(format!("beta must be positive, got {beta}"));
    }
    if anchor.values().iter().any(|&a| a < 0.0) {
        return Err(Error::Domain("anchor must be non-negative".into()));
    }
    let mut x = x_prev.clone();
    for _ in 0..m1 {
        let (bp, _) = ratio_backprojection(p, x.values(), y, b)?;
        let next = (0..x.values().len())
            .map(|j| {
                let s = sens.values()[j];
                if s <= 0.0 {
                    return 0.0;
                }
                let x_em = x.values()[j] / s * bp[j];
                closed_form_update(anchor.values()[j], s / beta, x_em)
            })
            .collect();
        x = Image::new(p.grid(), next)?;
    }
    Ok(x)
}

/// Which parameters the per-subject fine-tuning updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    Lora { rank: usize },
    Full,
}

impl FineTuneMode {
    pub fn from_rank(rank: usize) -> Self {
        if rank == 0 {
            Self::Full
        } else {
            Self::Lora { rank }
        }
    }
}

/// Network state owned by one reconstruction: frozen base weights plus
/// either adapters or a private copy of all weights, and optimizer state.
#[derive(Debug, Clone)]
pub struct Tuner<'a> {
    base: &'a ConvScoreNet<f32>,
    full: Option<ConvScoreNet<f32>>,
    lora: Option<LoraSet<f32>>,
    opt: AdamW,
}

impl<'a> Tuner<'a> {
    pub fn new(
        base: &'a ConvScoreNet<f32>,
        mode: FineTuneMode,
        lr: f64,
        weight_decay: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match mode {
            FineTuneMode::Lora { rank } => {
                let lora = LoraSet::new(rank, rng)?;
                let opt = AdamW::new(lora.len(), lr, weight_decay);
                Self {
                    base,
                    full: None,
                    lora: Some(lora),
                    opt,
                }
            }
            FineTuneMode::Full => Self {
                base,
                full: Some(base.clone()),
                lora: None,
                opt: AdamW::new(LAYOUT.total, lr, weight_decay),
            },
        })
    }

    pub fn net(&self) -> &ConvScoreNet<f32> {
        self.full.as_ref().unwrap_or(self.base)
    }

    pub fn lora(&self) -> Option<&LoraSet<f32>> {
        self.lora.as_ref()
    }

    pub fn predictor(&self) -> Adapted<'_, f32> {
        Adapted {
            net: self.net(),
            lora: self.lora.as_ref(),
        }
    }

    pub fn trainable_len(&self) -> usize {
        self.lora.as_ref().map_or(LAYOUT.total, LoraSet::len)
    }

    pub fn forward(&self, x_t: &Image, g: &Image, t: usize) -> Result<ForwardPass<f32>> {
        x_t.ensure_grid(g.grid())?;
        let grid = x_t.grid();
        self.net().forward(
            self.lora.as_ref(),
            &to_scalar(x_t),
            &to_scalar(g),
            t,
            grid.nx,
            grid.ny,
        )
    }

    fn step(&mut self, pass: &ForwardPass<f32>, d_out: &[f32]) -> Result<()> {
        if let Some(lora) = self.lora.as_mut() {
            let grad = self.base.backward_lora(lora, pass, d_out)?;
            self.opt.step(lora.params_mut(), &grad);
        } else {
            let net = self
                .full
                .as_mut()
                .expect("full fine-tuning keeps a private copy");
            let grad = net.backward(pass, d_out)?;
            self.opt.step(net.params_mut(), &grad);
        }
        Ok(())
    }
}

/// `m2` optimizer steps on `mean_j (x_target - x0_hat(x_t, t, g))_j^2`,
/// differentiating through the Tweedie estimate. `pass` may carry a forward
/// pass already evaluated at `(x_t, t, g)` with the current parameters.
/// Returns the loss before each step.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune_step(
    tuner: &mut Tuner<'_>,
    x_target: &Image,
    x_t: &Image,
    t: usize,
    g: &Image,
    m2: usize,
    sched: &NoiseSchedule,
    mut pass: Option<ForwardPass<f32>>,
) -> Result<Vec<f64>> {
    x_target.ensure_grid(x_t.grid())?;
    g.ensure_grid(x_t.grid())?;
    let n = x_t.values().len() as f64;
    let (sa, sb) = (sched.alpha_bar(t).sqrt(), sched.beta_bar(t).sqrt());
    let mut losses = Vec::with_capacity(m2);
    for step in 0..m2 {
        let current = match pass.take() {
            Some(p) => p,
            None => tuner.forward(x_t, g, t)?,
        };
        let mut loss = 0.0;
        let d_out: Vec<f32> = current
            .output
            .iter()
            .zip(x_t.values())
            .zip(x_target.values())
            .map(|((&e, &x), &target)| {
                let x0 = (x - sb * e as f64) / sa;
                let r = x0 - target;
                loss += r * r;
                (2.0 * r / n * (-sb / sa)) as f32
            })
            .collect();
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "fine-tuning loss non-finite at t={t}, step {step}"
            )));
        }
        tuner.step(&current, &d_out)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// One `(t, n)` round of the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub n: usize,
    /// Log-likelihood of the image-step output.
    pub log_likelihood: f64,
    pub hqs_objective: f64,
    /// Fine-tuning loss before the first network step of the round.
    pub finetune_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DdipDiagnostics {
    pub records: Vec<StepRecord>,
    /// `(t, clean estimate in count space)` at the configured cadence.
    pub snapshots: Vec<(usize, Image)>,
    /// MLEM initialization in count space.
    pub x_em_init: Option<Image>,
    pub trainable_params: usize,
}

/// Full reconstruction. The result is in count space. Diagnostics are
/// written into `diag` as the run proceeds, so they survive an abort.
pub fn ddip_reconstruct(
    input: &ReconInput<'_>,
    net: &ConvScoreNet<f32>,
    cfg: &DdipConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    diag: &mut DdipDiagnostics,
) -> Result<Image> {
    cfg.validate(sched)?;
    input.validate()?;
    let p = input.projector;
    let grid = p.grid();
    let sens = p.sensitivity();
    let zero_g;
    let g = if cfg.unconditional {
        zero_g = Image::zeros(grid);
        &zero_g
    } else {
        input.g
    };

    let mut tuner = Tuner::new(
        net,
        FineTuneMode::from_rank(cfg.rank),
        cfg.learning_rate,
        cfg.weight_decay,
        rng,
    )?;
    diag.trainable_params = tuner.trainable_len();
    let (mut x_t, x_em) = init_x_tprime(input, cfg.mlem_init_iters, cfg.t_start, sched, rng)?;
    diag.x_em_init = Some(x_em.scaled(input.scale));

    let floor = ANCHOR_FLOOR * input.scale;
    let mut last_x0 = x_em;
    for t in (1..=cfg.t_start).rev() {
        for n in 1..=cfg.n_outer {
            let pass = tuner.forward(&x_t, g, t)?;
            let eps = from_scalar(&x_t, &pass.output)?;
            let x0 = tweedie_x0(&x_t, t, &eps, sched)?;
            if !x0.is_finite() {
                return Err(Error::Diverged(format!(
                    "clean estimate non-finite at t={t}, round {n}"
                )));
            }
            let anchor = x0.clamp_min(0.0).scaled(input.scale);
            let start = anchor.clamp_min(floor);
            let x_img = hqs_image_update(
                p, &anchor, &start, input.y, input.b, &sens, cfg.beta, cfg.m1,
            )?;
            let log_likelihood = p.log_likelihood(input.y, &x_img, input.b)?;
            let d2: f64 = x_img
                .values()
                .iter()
                .zip(anchor.values())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let target = x_img.scaled(1.0 / input.scale);
            let losses =
                fine_tune_step(&mut tuner, &target, &x_t, t, g, cfg.m2, sched, Some(pass))?;
            diag.records.push(StepRecord {
                t,
                n,
                log_likelihood,
                hqs_objective: -log_likelihood + 0.5 * cfg.beta * d2,
                finetune_loss: losses[0],
            });
        }
        let pass = tuner.forward(&x_t, g, t)?;
        let eps = from_scalar(&x_t, &pass.output)?;
        let x0 = tweedie_x0(&x_t, t, &eps, sched)?;
        let noise = if cfg.eta > 0.0 {
            Image::new(grid, standard_normal(rng, grid.len()))?
        } else {
            Image::zeros(grid)
        };
        x_t = ddim_step(t, &eps, &x0, cfg.eta, &noise, sched)?;
        if !x_t.is_finite() {
            return Err(Error::Diverged(format!(
                "sampler state non-finite after t={t}"
            )));
        }
        if cfg.snapshot_every > 0 && (t % cfg.snapshot_every == 0 || t == 1) {
            diag.snapshots
                .push((t, x0.clamp_min(0.0).scaled(input.scale)));
        }
        last_x0 = x0;
    }
    Ok(last_x0.clamp_min(0.0).scaled(input.scale))
}
