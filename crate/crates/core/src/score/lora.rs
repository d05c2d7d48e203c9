//! Low-rank adapters `W = W0 + U V` on every convolution.
//!
//! A 3x3 convolution weight is viewed as a `d x k` matrix with
//! `d = out_channels` and `k = in_channels * 9`. The rank of each adapter is
//! capped at `min(r, d, k)`, so the single-output last layer gets rank 1.

use rand_distr::{Distribution, Normal};

use super::net::{CONV_DIMS, KERNEL, NUM_CONVS};
use super::scalar::Scalar;
use crate::error::{config, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterShape {
    pub d: usize,
    pub k: usize,
    pub r: usize,
}

impl AdapterShape {
    pub fn len(&self) -> usize {
        self.r * (self.d + self.k)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn shapes(rank: usize) -> Vec<AdapterShape> {
    CONV_DIMS
        .iter()
        .map(|&(cin, cout)| {
            let (d, k) = (cout, cin * KERNEL);
            AdapterShape {
                d,
                k,
                r: rank.min(d).min(k),
            }
        })
        .collect()
}

/// Number of trainable adapter entries at nominal rank `r`; zero when
/// adaptation is disabled.
pub fn lora_param_count(r: usize) -> usize {
    shapes(r).iter().map(AdapterShape::len).sum()
}

/// Adapter factors for all convolutions, stored flat as `U_0, V_0, U_1, ...`
/// with `U_i` row-major `d x r` and `V_i` row-major `r x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet<F: Scalar = f32> {
    rank: usize,
    shapes: Vec<AdapterShape>,
    offsets: Vec<usize>,
    params: Vec<F>,
}

impl<F: Scalar> LoraSet<F> {
    /// `U ~ N(0, 1/r)` entrywise and `V = 0`.
    pub fn new(rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return config("adapter rank must be at least 1");
        }
        let shapes = shapes(rank);
        let mut offsets = Vec::with_capacity(NUM_CONVS);
        let mut params = Vec::with_capacity(lora_param_count(rank));
        for s in &shapes {
            offsets.push(params.len());
            let normal = Normal::new(0.0, (1.0 / s.r as f64).sqrt()).expect("positive std");
            params.extend((0..s.d * s.r).map(|_| F::of(normal.sample(rng))));
            params.extend(std::iter::repeat_n(F::zero(), s.r * s.k));
        }
        Ok(Self {
            rank,
            shapes,
            offsets,
            params,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn shapes(&self) -> &[AdapterShape] {
        &self.shapes
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn u(&self, i: usize) -> &[F] {
        let s = self.shapes[i];
        &self.params[self.offsets[i]..][..s.d * s.r]
    }

    pub fn v(&self, i: usize) -> &[F] {
        let s = self.shapes[i];
        &self.params[self.offsets[i] + s.d * s.r..][..s.r * s.k]
    }

    pub(crate) fn set_params(&mut self, params: Vec<F>) -> Result<()> {
        if params.len() != self.params.len() {
            return config(format!(
                "expected {} adapter entries, got {}",
                self.params.len(),
                params.len()
            ));
        }
        self.params = params;
        Ok(())
    }

    /// `w0 + U_i V_i`.
    pub fn effective_weight(&self, i: usize, w0: &[F]) -> Vec<F> {
        let s = self.shapes[i];
        let mut w = w0.to_vec();
        F::gemm(
            s.d,
            s.r,
            s.k,
            F::one(),
            self.u(i),
            s.r as isize,
            1,
            self.v(i),
            s.k as isize,
            1,
            F::one(),
            &mut w,
            s.k as isize,
            1,
        );
        w
    }

    /// Chain rule from effective-weight gradients: `dU = dW V^T`,
    /// `dV = U^T dW`, laid out like [`Self::params`].
    pub fn factor_gradients(&self, dw: &[&[F]]) -> Vec<F> {
        let mut grad = vec![F::zero(); self.params.len()];
        for (i, s) in self.shapes.iter().enumerate() {
            let (du, dv) = grad[self.offsets[i]..][..s.len()].split_at_mut(s.d * s.r);
            F::gemm(
                s.d,
                s.k,
                s.r,
                F::one(),
                dw[i],
                s.k as isize,
                1,
                self.v(i),
                1,
                s.k as isize,
                F::zero(),
                du,
                s.r as isize,
                1,
            );
            F::gemm(
                s.r,
                s.d,
                s.k,
                F::one(),
                self.u(i),
                1,
                s.r as isize,
                dw[i],
                s.k as isize,
                1,
                F::zero(),
                dv,
                s.k as isize,
                1,
            );
        }
        grad
    }

    pub fn cast<G: Scalar>(&self) -> LoraSet<G> {
        LoraSet {
            rank: self.rank,
            shapes: self.shapes.clone(),
            offsets: self.offsets.clone(),
            params: self.params.iter().map(|p| G::of(p.f64())).collect(),
        }
    }
}
