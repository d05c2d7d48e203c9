//! Noise predictors: the common interface, an exact Gaussian oracle, the
//! trainable convolutional network with low-rank adapters, and training.

mod checkpoint;
mod lora;
mod net;
mod optim;
mod scalar;
mod train;

pub use checkpoint::{
    decode_lora, decode_net, encode_lora, encode_net, load_lora, load_net, net_digest, save_lora,
    save_net, CHECKPOINT_VERSION, LORA_MAGIC, NET_MAGIC,
};
pub use lora::{lora_param_count, AdapterShape, LoraSet};
pub use net::{
    time_features, ConvScoreNet, ForwardPass, Layout, Span, CHANNELS, CONV_DIMS, EMBED_DIM, KERNEL,
    LAYOUT, NUM_CONVS,
};
pub use optim::AdamW;
pub use scalar::Scalar;
pub use train::{train_score, EpochRecord, TrainConfig};

use crate::diffusion::NoiseSchedule;
use crate::error::{config, Result};
use crate::geometry::Image;

/// `eps_theta(x_t, t, g)`: predicted noise with the shape of `x_t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Image, t: usize, g: &Image) -> Result<Image>;
}

pub(crate) fn to_scalar<F: Scalar>(img: &Image) -> Vec<F> {
    img.values().iter().map(|&v| F::of(v)).collect()
}

pub(crate) fn from_scalar<F: Scalar>(like: &Image, values: &[F]) -> Result<Image> {
    Image::new(like.grid(), values.iter().map(|v| v.f64()).collect())
}

/// Network prediction with optional adapters applied to the base weights.
pub fn net_predict<F: Scalar>(
    net: &ConvScoreNet<F>,
    adapters: Option<&LoraSet<F>>,
    x_t: &Image,
    t: usize,
    g: &Image,
) -> Result<Image> {
    x_t.ensure_grid(g.grid())?;
    let grid = x_t.grid();
    let pass = net.forward(
        adapters,
        &to_scalar(x_t),
        &to_scalar(g),
        t,
        grid.nx,
        grid.ny,
    )?;
    from_scalar(x_t, &pass.output)
}

/// Loss value and adapter gradient for a loss on the network output.
/// `loss_fn` maps the output to `(loss, d loss / d output)`.
pub fn grad_lora<F: Scalar>(
    net: &ConvScoreNet<F>,
    adapters: &LoraSet<F>,
    x_t: &[F],
    g: &[F],
    t: usize,
    (nx, ny): (usize, usize),
    loss_fn: impl FnOnce(&[F]) -> (f64, Vec<F>),
) -> Result<(f64, Vec<F>)> {
    let pass = net.forward(Some(adapters), x_t, g, t, nx, ny)?;
    let (loss, d_out) = loss_fn(&pass.output);
    Ok((loss, net.backward_lora(adapters, &pass, &d_out)?))
}

impl<F: Scalar> NoisePredictor for ConvScoreNet<F> {
    fn predict(&self, x_t: &Image, t: usize, g: &Image) -> Result<Image> {
        net_predict(self, None, x_t, t, g)
    }
}

/// A network viewed together with a set of adapters.
#[derive(Debug, Clone, Copy)]
pub struct Adapted<'a, F: Scalar = f32> {
    pub net: &'a ConvScoreNet<F>,
    pub lora: Option<&'a LoraSet<F>>,
}

impl<F: Scalar> NoisePredictor for Adapted<'_, F> {
    fn predict(&self, x_t: &Image, t: usize, g: &Image) -> Result<Image> {
        net_predict(self.net, self.lora, x_t, t, g)
    }
}

/// Data distribution `N(mean, var * I)`, whose noise predictor is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: Image,
    pub var: f64,
}

impl GaussianOracle {
    pub fn new(mean: Image, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return config(format!("oracle variance must be positive, got {var}"));
        }
        Ok(Self { mean, var })
    }

    /// Exact `E[x_0 | x_t]`: `(sqrt(abar) s^2 x_t + bbar mu) / (abar s^2 + bbar)`.
    pub fn posterior_mean(&self, x_t: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
        x_t.ensure_grid(self.mean.grid())?;
        let (ab, bb) = (sched.alpha_bar(t), sched.beta_bar(t));
        let denom = ab * self.var + bb;
        let v = x_t
            .values()
            .iter()
            .zip(self.mean.values())
            .map(|(x, m)| (ab.sqrt() * self.var * x + bb * m) / denom)
            .collect();
        Image::new(x_t.grid(), v)
    }
}

/// `sqrt(bbar) (x_t - sqrt(abar) mu) / (abar s^2 + bbar)`, the minimizer of
/// the denoising objective for Gaussian data.
pub fn oracle_predict(
    o: &GaussianOracle,
    x_t: &Image,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Image> {
    sched.check_step(t)?;
    x_t.ensure_grid(o.mean.grid())?;
    let (ab, bb) = (sched.alpha_bar(t), sched.beta_bar(t));
    let c = bb.sqrt() / (ab * o.var + bb);
    let v = x_t
        .values()
        .iter()
        .zip(o.mean.values())
        .map(|(x, m)| c * (x - ab.sqrt() * m))
        .collect();
    Image::new(x_t.grid(), v)
}

/// The oracle bound to a schedule, usable wherever a predictor is expected.
/// The conditioning image is ignored.
#[derive(Debug, Clone, Copy)]
pub struct ScheduledOracle<'a> {
    pub oracle: &'a GaussianOracle,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for ScheduledOracle<'_> {
    fn predict(&self, x_t: &Image, t: usize, _g: &Image) -> Result<Image> {
        oracle_predict(self.oracle, x_t, t, self.sched)
    }
}

/// Mean over the batch of `|eps - eps_theta(sqrt(abar) x0 + sqrt(bbar) eps, t, g)|^2`.
/// `batch` holds `(x0, g)` pairs; `ts` and `noises` hold one draw per pair.
pub fn dsm_loss(
    model: &dyn NoisePredictor,
    batch: &[(Image, Image)],
    ts: &[usize],
    noises: &[Image],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return config("empty batch");
    }
    if ts.len() != batch.len() || noises.len() != batch.len() {
        return config("one time step and one noise draw per batch element");
    }
    let mut total = 0.0;
    for (((x0, g), &t), eps) in batch.iter().zip(ts).zip(noises) {
        if t == 0 {
            return config("time steps start at 1");
        }
        let x_t = crate::diffusion::forward_diffuse(x0, t, eps, sched)?;
        let pred = model.predict(&x_t, t, g)?;
        total += pred
            .values()
            .iter()
            .zip(eps.values())
            .map(|(p, e)| (p - e).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}
