//! Gradient-adaptive low-rank adapters.
//!
//! The update is `ΔW = γ·B·A` with `γ = α / r^p + β`. The three scalars are
//! learnable and are projected back into fixed boxes around their initial
//! values after every optimiser step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Binder, Tape, Tensor, Var};

/// Initial values and clip half-widths for the adapter scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalConstants {
    pub alpha0: f64,
    pub p0: f64,
    pub beta0: f64,
    /// Half-width for `alpha` and `beta`.
    pub eps: f64,
    /// Half-width for `p`.
    pub delta: f64,
}

impl Default for GalConstants {
    fn default() -> Self {
        Self { alpha0: 16.0, p0: 0.5, beta0: 0.0, eps: 0.05, delta: 0.01 }
    }
}

impl GalConstants {
    pub fn alpha_box(&self) -> (f64, f64) {
        (self.alpha0 - self.eps, self.alpha0 + self.eps)
    }

    pub fn p_box(&self) -> (f64, f64) {
        (self.p0 - self.delta, self.p0 + self.delta)
    }

    pub fn beta_box(&self) -> (f64, f64) {
        (self.beta0 - self.eps, self.beta0 + self.eps)
    }

    /// Minimum and maximum of `γ` over the eight corners of the clip box.
    pub fn gamma_range(&self, rank: usize) -> (f64, f64) {
        let r = rank as f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in [self.alpha_box().0, self.alpha_box().1] {
            for p in [self.p_box().0, self.p_box().1] {
                for b in [self.beta_box().0, self.beta_box().1] {
                    let g = a / r.powf(p) + b;
                    lo = lo.min(g);
                    hi = hi.max(g);
                }
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalAdapter {
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// `[rank × d_in]`.
    pub a: Tensor,
    /// `[d_out × rank]`, zero at construction.
    pub b: Tensor,
    pub alpha: Tensor,
    pub p: Tensor,
    pub beta: Tensor,
    pub consts: GalConstants,
}

pub fn gal_new(d_in: usize, d_out: usize, rank: usize, rng: &mut SeededRng) -> Result<GalAdapter> {
    GalAdapter::new(d_in, d_out, rank, GalConstants::default(), rng)
}

impl GalAdapter {
    pub fn new(d_in: usize, d_out: usize, rank: usize, consts: GalConstants, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::usage(format!(
                "adapter rank {rank} must lie in 1..={} for a {d_out}×{d_in} weight",
                d_in.min(d_out)
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            rank,
            d_in,
            d_out,
            a: Tensor::uniform(&[rank, d_in], bound, rng).with_requires_grad(true),
            b: Tensor::zeros(&[d_out, rank]).with_requires_grad(true),
            alpha: Tensor::scalar(consts.alpha0).with_requires_grad(true),
            p: Tensor::scalar(consts.p0).with_requires_grad(true),
            beta: Tensor::scalar(consts.beta0).with_requires_grad(true),
            consts,
        })
    }

    pub fn scaling_factor(&self) -> f64 {
        self.alpha.item() / (self.rank as f64).powf(self.p.item()) + self.beta.item()
    }

    /// `γ` recorded on the tape.
    pub fn scaling_var(&self, tape: &mut Tape, binder: &mut Binder) -> Result<Var> {
        let alpha = binder.bind(tape, &self.alpha);
        let p = binder.bind(tape, &self.p);
        let beta = binder.bind(tape, &self.beta);
        tape.gal_scale(alpha, p, beta, self.rank)
    }

    /// `w0x + γ·(x·Aᵀ)·Bᵀ` for `x[M×d_in]` and `w0x[M×d_out]`.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var, w0x: Var) -> Result<Var> {
        let a = binder.bind(tape, &self.a);
        let b = binder.bind(tape, &self.b);
        let gamma = self.scaling_var(tape, binder)?;
        let xa = tape.matmul_nt(x, a)?;
        let xab = tape.matmul_nt(xa, b)?;
        let delta = tape.scale_by(xab, gamma)?;
        tape.add(w0x, delta)
    }

    /// Projects `alpha`, `p` and `beta` into their boxes. Idempotent.
    pub fn clip_params(&mut self) {
        let c = self.consts;
        for (t, (lo, hi)) in [
            (&mut self.alpha, c.alpha_box()),
            (&mut self.p, c.p_box()),
            (&mut self.beta, c.beta_box()),
        ] {
            let v = &mut t.data_mut()[0];
            *v = v.clamp(lo, hi);
        }
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 5] {
        [("A", &self.a), ("B", &self.b), ("alpha", &self.alpha), ("p", &self.p), ("beta", &self.beta)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("A", &mut self.a),
            ("B", &mut self.b),
            ("alpha", &mut self.alpha),
            ("p", &mut self.p),
            ("beta", &mut self.beta),
        ]
    }
}

/// Free-function form of [`GalAdapter::forward`].
pub fn gal_forward(g: &GalAdapter, tape: &mut Tape, binder: &mut Binder, x: Var, w0x: Var) -> Result<Var> {
    g.forward(tape, binder, x, w0x)
}

/// Free-function form of [`GalAdapter::clip_params`].
pub fn clip_params(g: &mut GalAdapter) {
    g.clip_params();
}
