use rand::seq::SliceRandom;
use rand::Rng as _;

use super::net::{ConvScoreNet, LAYOUT};
use super::optim::AdamW;
use super::to_scalar;
use crate::diffusion::NoiseSchedule;
use crate::error::{config, Error, Result};
use crate::geometry::Image;
use crate::rng::{rng_from_seed, standard_normal, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config("epochs and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-image denoising loss over the epoch's batches.
    pub loss: f64,
}

/// Denoising score matching with AdamW on `(activity, mr_prior)` pairs.
///
/// Each batch element draws `t` uniformly from `1..=T` and fresh noise.
/// `on_epoch` observes the loss curve as it is produced. A non-finite
/// batch loss aborts with [`Error::Diverged`].
pub fn train_score(
    dataset: &[(Image, Image)],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ConvScoreNet<f32>, Vec<EpochRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return config("empty training set");
    }
    let grid = dataset[0].0.grid();
    for (x0, g) in dataset {
        x0.ensure_grid(grid)?;
        g.ensure_grid(grid)?;
    }
    let hw = grid.len();
    let data: Vec<(Vec<f32>, Vec<f32>)> = dataset
        .iter()
        .map(|(x, g)| (to_scalar(x), to_scalar(g)))
        .collect();

    let mut net = ConvScoreNet::<f32>::new(&mut stream_rng(cfg.rng_seed, 0));
    let mut opt = AdamW::new(LAYOUT.total, cfg.learning_rate, cfg.weight_decay);
    let mut rng = rng_from_seed(crate::rng::stream_seed(cfg.rng_seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0f32; LAYOUT.total];
            let mut batch_loss = 0.0;
            let scale = 2.0 / chunk.len() as f32;
            for &i in chunk {
                let (x0, g) = &data[i];
                let t = rng.random_range(1..=sched.steps());
                let eps = standard_normal(&mut rng, hw);
                let (a, b) = (sched.alpha_bar(t).sqrt(), sched.beta_bar(t).sqrt());
                let x_t: Vec<f32> = x0
                    .iter()
                    .zip(&eps)
                    .map(|(&x, &e)| (a * x as f64 + b * e) as f32)
                    .collect();
                let pass = net.forward(None, &x_t, g, t, grid.nx, grid.ny)?;
                let mut d_out = vec![0.0f32; hw];
                for ((d, &p), &e) in d_out.iter_mut().zip(&pass.output).zip(&eps) {
                    let r = p - e as f32;
                    batch_loss += (r as f64) * (r as f64);
                    *d = scale * r;
                }
                let gi = net.backward(&pass, &d_out)?;
                for (acc, v) in grad.iter_mut().zip(&gi) {
                    *acc += *v;
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {batches}"
                )));
            }
            opt.step(net.params_mut(), &grad);
            epoch_loss += batch_loss;
            batches += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: epoch_loss / batches as f64,
        };
        on_epoch(&rec);
        curve.push(rec);
    }
    Ok((net, curve))
}
