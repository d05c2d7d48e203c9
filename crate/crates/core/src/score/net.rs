//! Five-layer conditional denoiser.
//!
//! ```text
//! [x_t, g] -> conv1 (+temb_a) -> silu = h1
//!          -> conv2 -> silu = h2
//!   h1+h2  -> conv3 (+temb_b) -> silu -> conv4 -> silu -> conv5 = eps
//! ```
//!
//! All convolutions are 3x3 with zero padding. The time embedding is a
//! sinusoidal code of `t` passed through `fc1 -> silu -> fc2`, whose 64
//! outputs are split into the per-channel offsets `temb_a` and `temb_b`.

use rand_distr::{Distribution, Normal};

use super::lora::LoraSet;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHANNELS: usize = 32;
pub const EMBED_DIM: usize = 32;
pub const NUM_CONVS: usize = 5;
/// `(in_channels, out_channels)` per convolution.
pub const CONV_DIMS: [(usize, usize); NUM_CONVS] = [
    (2, CHANNELS),
    (CHANNELS, CHANNELS),
    (CHANNELS, CHANNELS),
    (CHANNELS, CHANNELS),
    (CHANNELS, 1),
];
pub const KERNEL: usize = 9;
pub const MIN_SIDE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Parameter offsets in declaration order: conv weights and biases
/// interleaved per layer, then `fc1` and `fc2` weights and biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub conv_w: [Span; NUM_CONVS],
    pub conv_b: [Span; NUM_CONVS],
    pub fc1_w: Span,
    pub fc1_b: Span,
    pub fc2_w: Span,
    pub fc2_b: Span,
    pub total: usize,
}

const fn build_layout() -> Layout {
    let empty = Span { start: 0, len: 0 };
    let mut conv_w = [empty; NUM_CONVS];
    let mut conv_b = [empty; NUM_CONVS];
    let mut at = 0;
    let mut i = 0;
    while i < NUM_CONVS {
        let (cin, cout) = CONV_DIMS[i];
        conv_w[i] = Span {
            start: at,
            len: cout * cin * KERNEL,
        };
        at += cout * cin * KERNEL;
        conv_b[i] = Span {
            start: at,
            len: cout,
        };
        at += cout;
        i += 1;
    }
    let fc1_w = Span {
        start: at,
        len: EMBED_DIM * EMBED_DIM,
    };
    at += EMBED_DIM * EMBED_DIM;
    let fc1_b = Span {
        start: at,
        len: EMBED_DIM,
    };
    at += EMBED_DIM;
    let fc2_w = Span {
        start: at,
        len: 2 * CHANNELS * EMBED_DIM,
    };
    at += 2 * CHANNELS * EMBED_DIM;
    let fc2_b = Span {
        start: at,
        len: 2 * CHANNELS,
    };
    at += 2 * CHANNELS;
    Layout {
        conv_w,
        conv_b,
        fc1_w,
        fc1_b,
        fc2_w,
        fc2_b,
        total: at,
    }
}

pub const LAYOUT: Layout = build_layout();

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Sinusoidal code of the time index: 16 sines then 16 cosines with
/// geometrically spaced frequencies from 1 down to 1e-4.
pub fn time_features<F: Scalar>(t: usize) -> Vec<F> {
    let half = EMBED_DIM / 2;
    let mut out = vec![F::zero(); EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = F::of(a.sin());
        out[half + i] = F::of(a.cos());
    }
    out
}

/// Zero-padded 3x3 patch matrix, `(c * 9) x (ny * nx)`.
fn im2col<F: Scalar>(input: &[F], channels: usize, nx: usize, ny: usize) -> Vec<F> {
    let hw = nx * ny;
    let mut col = vec![F::zero(); channels * KERNEL * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(c * KERNEL + ky * 3 + kx) * hw..][..hw];
                for y in 0..ny {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * nx..][..nx];
                    let dst = &mut row[y * nx..][..nx];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..nx - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..nx - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `out`.
fn col2im_add<F: Scalar>(col: &[F], channels: usize, nx: usize, ny: usize, out: &mut [F]) {
    let hw = nx * ny;
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(c * KERNEL + ky * 3 + kx) * hw..][..hw];
                for y in 0..ny {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * nx..][..nx];
                    let src = &row[y * nx..][..nx];
                    let (d, s) = match kx {
                        0 => (&mut dst[..nx - 1], &src[1..]),
                        1 => (&mut dst[..], src),
                        _ => (&mut dst[1..], &src[..nx - 1]),
                    };
                    for (a, b) in d.iter_mut().zip(s) {
                        *a = *a + *b;
                    }
                }
            }
        }
    }
}

/// `out[c_out x hw] = w[c_out x k] * col[k x hw] + bias`.
fn conv_apply<F: Scalar>(
    w: &[F],
    bias: &[F],
    col: &[F],
    c_out: usize,
    k: usize,
    hw: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); c_out * hw];
    for (c, plane) in out.chunks_exact_mut(hw).enumerate() {
        plane.fill(bias[c]);
    }
    F::gemm(
        c_out,
        k,
        hw,
        F::one(),
        w,
        k as isize,
        1,
        col,
        hw as isize,
        1,
        F::one(),
        &mut out,
        hw as isize,
        1,
    );
    out
}

fn fc_apply<F: Scalar>(w: &[F], b: &[F], x: &[F]) -> Vec<F> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            bo + w[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(a, b)| *a * *b)
                .sum()
        })
        .collect()
}

/// Everything the backward pass needs, plus the prediction itself.
#[derive(Debug, Clone)]
pub struct ForwardPass<F: Scalar> {
    pub nx: usize,
    pub ny: usize,
    pub output: Vec<F>,
    weights: Vec<Vec<F>>,
    cols: Vec<Vec<F>>,
    pre: Vec<Vec<F>>,
    t_feat: Vec<F>,
    e_pre: Vec<F>,
    e_act: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvScoreNet<F: Scalar = f32> {
    params: Vec<F>,
}

impl<F: Scalar> ConvScoreNet<F> {
    /// He-normal convolution and embedding weights, zero biases; the last
    /// convolution uses unit fan-in scaling.
    pub fn new(rng: &mut Rng) -> Self {
        let mut params = vec![F::zero(); LAYOUT.total];
        let mut fill = |span: Span, std: f64, rng: &mut Rng| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[span.range()] {
                *p = F::of(normal.sample(rng));
            }
        };
        for (i, &(cin, _)) in CONV_DIMS.iter().enumerate() {
            let fan_in = (cin * KERNEL) as f64;
            let gain = if i + 1 == NUM_CONVS { 1.0 } else { 2.0 };
            fill(LAYOUT.conv_w[i], (gain / fan_in).sqrt(), rng);
        }
        fill(LAYOUT.fc1_w, (2.0 / EMBED_DIM as f64).sqrt(), rng);
        fill(LAYOUT.fc2_w, (1.0 / EMBED_DIM as f64).sqrt(), rng);
        Self { params }
    }

    pub fn from_params(params: Vec<F>) -> Result<Self> {
        if params.len() != LAYOUT.total {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                LAYOUT.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite network parameter".into()));
        }
        Ok(Self { params })
    }

    pub fn param_count() -> usize {
        LAYOUT.total
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> ConvScoreNet<G> {
        ConvScoreNet {
            params: self.params.iter().map(|p| G::of(p.f64())).collect(),
        }
    }

    pub fn conv_weight(&self, i: usize) -> &[F] {
        &self.params[LAYOUT.conv_w[i].range()]
    }

    fn slice(&self, span: Span) -> &[F] {
        &self.params[span.range()]
    }

    /// Forward pass on a single image. `x` and `g` are `ny x nx` row-major.
    pub fn forward(
        &self,
        lora: Option<&LoraSet<F>>,
        x: &[F],
        g: &[F],
        t: usize,
        nx: usize,
        ny: usize,
    ) -> Result<ForwardPass<F>> {
        let hw = nx * ny;
        if nx < MIN_SIDE || ny < MIN_SIDE {
            return Err(Error::Config(format!(
                "network needs at least {MIN_SIDE}x{MIN_SIDE} inputs"
            )));
        }
        if x.len() != hw || g.len() != hw {
            return Err(Error::Config(format!(
                "inputs of length {} and {} for a {nx}x{ny} grid",
                x.len(),
                g.len()
            )));
        }
        let weights: Vec<Vec<F>> = (0..NUM_CONVS)
            .map(|i| match lora {
                Some(l) => l.effective_weight(i, self.conv_weight(i)),
                None => self.conv_weight(i).to_vec(),
            })
            .collect();

        let t_feat = time_features::<F>(t);
        let e_pre = fc_apply(self.slice(LAYOUT.fc1_w), self.slice(LAYOUT.fc1_b), &t_feat);
        let e_act: Vec<F> = e_pre.iter().map(|&v| silu(v)).collect();
        let temb = fc_apply(self.slice(LAYOUT.fc2_w), self.slice(LAYOUT.fc2_b), &e_act);

        let mut cols = Vec::with_capacity(NUM_CONVS);
        let mut pre = Vec::with_capacity(NUM_CONVS - 1);
        let conv = |i: usize, input: &[F], cols: &mut Vec<Vec<F>>| {
            let (cin, cout) = CONV_DIMS[i];
            let col = im2col(input, cin, nx, ny);
            let out = conv_apply(
                &weights[i],
                &self.params[LAYOUT.conv_b[i].range()],
                &col,
                cout,
                cin * KERNEL,
                hw,
            );
            cols.push(col);
            out
        };
        let add_temb = |z: &mut [F], offset: usize| {
            for (c, plane) in z.chunks_exact_mut(hw).enumerate() {
                let e = temb[offset + c];
                plane.iter_mut().for_each(|v| *v = *v + e);
            }
        };

        let mut input = Vec::with_capacity(2 * hw);
        input.extend_from_slice(x);
        input.extend_from_slice(g);

        let mut z1 = conv(0, &input, &mut cols);
        add_temb(&mut z1, 0);
        let h1: Vec<F> = z1.iter().map(|&v| silu(v)).collect();
        let z2 = conv(1, &h1, &mut cols);
        let skip: Vec<F> = z2.iter().zip(&h1).map(|(&z, &h)| silu(z) + h).collect();
        let mut z3 = conv(2, &skip, &mut cols);
        add_temb(&mut z3, CHANNELS);
        let h3: Vec<F> = z3.iter().map(|&v| silu(v)).collect();
        let z4 = conv(3, &h3, &mut cols);
        let h4: Vec<F> = z4.iter().map(|&v| silu(v)).collect();
        let output = conv(4, &h4, &mut cols);
        pre.extend([z1, z2, z3, z4]);

        Ok(ForwardPass {
            nx,
            ny,
            output,
            weights,
            cols,
            pre,
            t_feat,
            e_pre,
            e_act,
        })
    }

    /// Gradient of `sum(d_out * output)` with respect to every parameter,
    /// in [`LAYOUT`] order. Weight slots hold the gradient with respect to
    /// the effective (adapted) weights used in the forward pass.
    pub fn backward(&self, pass: &ForwardPass<F>, d_out: &[F]) -> Result<Vec<F>> {
        let (nx, ny) = (pass.nx, pass.ny);
        let hw = nx * ny;
        if d_out.len() != hw {
            return Err(Error::Config(format!(
                "output gradient of length {} for {hw} pixels",
                d_out.len()
            )));
        }
        let mut grad = vec![F::zero(); LAYOUT.total];

        // Accumulates weight and bias gradients of conv `i` from `dz` and
        // returns the gradient with respect to its input when requested.
        let mut conv_back = |i: usize, dz: &[F], want_input: bool| -> Option<Vec<F>> {
            let (cin, cout) = CONV_DIMS[i];
            let k = cin * KERNEL;
            let col = &pass.cols[i];
            {
                let dw = &mut grad[LAYOUT.conv_w[i].range()];
                F::gemm(
                    cout,
                    hw,
                    k,
                    F::one(),
                    dz,
                    hw as isize,
                    1,
                    col,
                    1,
                    hw as isize,
                    F::zero(),
                    dw,
                    k as isize,
                    1,
                );
            }
            let db = &mut grad[LAYOUT.conv_b[i].range()];
            for (c, plane) in dz.chunks_exact(hw).enumerate() {
                db[c] = plane.iter().copied().sum();
            }
            if !want_input {
                return None;
            }
            let mut dcol = vec![F::zero(); k * hw];
            F::gemm(
                k,
                cout,
                hw,
                F::one(),
                &pass.weights[i],
                1,
                k as isize,
                dz,
                hw as isize,
                1,
                F::zero(),
                &mut dcol,
                hw as isize,
                1,
            );
            let mut din = vec![F::zero(); cin * hw];
            col2im_add(&dcol, cin, nx, ny, &mut din);
            Some(din)
        };
        let through_silu = |d: &mut [F], z: &[F]| {
            for (a, &zv) in d.iter_mut().zip(z) {
                *a = *a * silu_grad(zv);
            }
        };

        let (z1, z2, z3, z4) = (&pass.pre[0], &pass.pre[1], &pass.pre[2], &pass.pre[3]);
        let mut d = conv_back(4, d_out, true).expect("input gradient");
        through_silu(&mut d, z4);
        let mut d = conv_back(3, &d, true).expect("input gradient");
        through_silu(&mut d, z3);
        let dz3 = d;
        let d_skip = conv_back(2, &dz3, true).expect("input gradient");
        let mut dz2 = d_skip.clone();
        through_silu(&mut dz2, z2);
        let mut dh1 = conv_back(1, &dz2, true).expect("input gradient");
        for (a, b) in dh1.iter_mut().zip(&d_skip) {
            *a = *a + *b;
        }
        through_silu(&mut dh1, z1);
        let dz1 = dh1;
        conv_back(0, &dz1, false);

        let mut d_temb = [F::zero(); 2 * CHANNELS];
        for (c, plane) in dz1.chunks_exact(hw).enumerate() {
            d_temb[c] = plane.iter().copied().sum();
        }
        for (c, plane) in dz3.chunks_exact(hw).enumerate() {
            d_temb[CHANNELS + c] = plane.iter().copied().sum();
        }
        let fc2_w = self.slice(LAYOUT.fc2_w).to_vec();
        let mut d_eact = [F::zero(); EMBED_DIM];
        for (o, &dt) in d_temb.iter().enumerate() {
            grad[LAYOUT.fc2_b.start + o] = dt;
            for j in 0..EMBED_DIM {
                grad[LAYOUT.fc2_w.start + o * EMBED_DIM + j] = dt * pass.e_act[j];
                d_eact[j] = d_eact[j] + dt * fc2_w[o * EMBED_DIM + j];
            }
        }
        for o in 0..EMBED_DIM {
            let de = d_eact[o] * silu_grad(pass.e_pre[o]);
            grad[LAYOUT.fc1_b.start + o] = de;
            for j in 0..EMBED_DIM {
                grad[LAYOUT.fc1_w.start + o * EMBED_DIM + j] = de * pass.t_feat[j];
            }
        }
        Ok(grad)
    }

    /// Gradient of `sum(d_out * output)` with respect to the adapter factors.
    pub fn backward_lora(
        &self,
        lora: &LoraSet<F>,
        pass: &ForwardPass<F>,
        d_out: &[F],
    ) -> Result<Vec<F>> {
        let grad = self.backward(pass, d_out)?;
        let dw: Vec<&[F]> = (0..NUM_CONVS)
            .map(|i| &grad[LAYOUT.conv_w[i].range()])
            .collect();
        Ok(lora.factor_gradients(&dw))
    }
}
