//! Pointwise losses with derivatives and Fenchel conjugates.
//!
//! The solver minimizes the mean of per-observation losses; the conjugates
//! feed the dual objective used for duality-gap certificates.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    Logistic,
}

/// One observation's loss: compares a predicted value against the target `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub t: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::InvalidParam(format!(
                "loss target must be finite, got {t}"
            )));
        }
        if kind == LossKind::Logistic && t != 1.0 && t != -1.0 {
            return Err(Error::InvalidParam(format!(
                "logistic targets must be -1 or +1, got {t}"
            )));
        }
        Ok(Self { kind, t })
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `x * log(x)` extended by continuity with `0 * log 0 = 0`.
pub(crate) fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Loss value at prediction `v`: `0.5 (t - v)^2` or `log(1 + exp(-t v))`.
pub fn loss_eval(spec: &LossSpec, v: f64) -> f64 {
    match spec.kind {
        LossKind::Squared => 0.5 * (spec.t - v) * (spec.t - v),
        LossKind::Logistic => softplus(-spec.t * v),
    }
}

/// Derivative of [`loss_eval`] in `v`.
pub fn loss_grad(spec: &LossSpec, v: f64) -> f64 {
    match spec.kind {
        LossKind::Squared => v - spec.t,
        LossKind::Logistic => {
            // -t * sigmoid(-t v), evaluated stably
            let z = -spec.t * v;
            -spec.t / (1.0 + (-z).exp())
        }
    }
}

/// Fenchel conjugate `sup_v { beta v - loss(v) }`; `f64::INFINITY` outside
/// the logistic domain `beta * t` in `[-1, 0]` (endpoints by their limits).
pub fn loss_conjugate(spec: &LossSpec, beta: f64) -> f64 {
    match spec.kind {
        LossKind::Squared => 0.5 * beta * beta + beta * spec.t,
        LossKind::Logistic => {
            let bt = beta * spec.t;
            if !(-1.0..=0.0).contains(&bt) {
                return f64::INFINITY;
            }
            xlogx(1.0 + bt) + xlogx(-bt)
        }
    }
}
