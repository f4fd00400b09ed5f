//! Spectral penalties: functions of a matrix through its singular values.
//!
//! Each penalty sums a scalar function over the spectrum: the trace norm
//! sums `sigma`, the squared Frobenius norm sums `sigma^2`, rank caps are
//! indicator terms, and the smooth trace penalty replaces `|sigma|` by a
//! softplus-based approximation so first-order solvers can run on it.

use crate::error::{Error, Result};
use crate::losses::xlogx;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyKind {
    /// Zero inside `rank <= r`, infinite beyond.
    RankCap(usize),
    /// Sum of singular values.
    Trace,
    /// Sum of squared singular values.
    Frobenius,
    /// Trace norm restricted to `rank <= r`.
    TracePlusRank(usize),
    /// Squared Frobenius norm restricted to `rank <= r`.
    FrobeniusPlusRank(usize),
    /// Smooth approximation of the trace norm with sharpness `epsilon`.
    SmoothTrace(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind) -> Result<Self> {
        match kind {
            PenaltyKind::RankCap(r)
            | PenaltyKind::TracePlusRank(r)
            | PenaltyKind::FrobeniusPlusRank(r) => {
                if r < 1 {
                    return Err(Error::InvalidParam("rank bound must be >= 1".into()));
                }
            }
            PenaltyKind::SmoothTrace(eps) => {
                if !(eps > 0.0) {
                    return Err(Error::InvalidParam(format!(
                        "smoothing epsilon must be > 0, got {eps}"
                    )));
                }
            }
            PenaltyKind::Trace | PenaltyKind::Frobenius => {}
        }
        Ok(Self { kind })
    }

    /// True for kinds the factored first-order solver can differentiate.
    pub fn is_smooth(&self) -> bool {
        matches!(
            self.kind,
            PenaltyKind::SmoothTrace(_)
                | PenaltyKind::Frobenius
                | PenaltyKind::FrobeniusPlusRank(_)
                | PenaltyKind::TracePlusRank(_)
        )
    }
}

/// Non-increasing sequence of non-negative singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
}

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let scale = values.iter().cloned().fold(0.0f64, f64::max);
        let slack = 1e-12 * scale.max(1.0);
        for w in values.windows(2) {
            if w[1] > w[0] + slack {
                return Err(Error::InvalidParam(
                    "singular values must be sorted in descending order".into(),
                ));
            }
        }
        if values.iter().any(|&v| !v.is_finite() || v < -slack) {
            return Err(Error::InvalidParam(
                "singular values must be finite and non-negative".into(),
            ));
        }
        let values = values.into_iter().map(|v| v.max(0.0)).collect();
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn largest(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// Count of singular values above `1e-12` times the largest.
    pub fn numerical_rank(&self) -> usize {
        let tol = 1e-12 * self.largest();
        self.values.iter().filter(|&&v| v > tol).count()
    }
}

/// Smooth scalar `s(sigma) = eps log(1+e^(sigma/eps)) + eps log(1+e^(-sigma/eps)) - 2 eps log 2`,
/// offset so `s(0) = 0`; equals `2 eps logcosh(sigma / (2 eps))`, within
/// `2 eps log 2` of `|sigma|` everywhere.
pub fn smooth_trace_eval(eps: f64, sigma: f64) -> f64 {
    debug_assert!(eps > 0.0);
    // |sigma| + 2 eps log1p(e^(-|sigma|/eps)) - 2 eps log 2, stable for |sigma/eps| up to 1e4 and beyond
    sigma.abs() + 2.0 * eps * ((-sigma.abs() / eps).exp().ln_1p() - std::f64::consts::LN_2)
}

/// Derivative of [`smooth_trace_eval`] in `sigma`: `tanh(sigma / (2 eps))`.
pub fn smooth_trace_deriv(eps: f64, sigma: f64) -> f64 {
    debug_assert!(eps > 0.0);
    (sigma / (2.0 * eps)).tanh()
}

/// Fenchel conjugate of the smooth trace scalar:
/// `eps [ (1+tau) log(1+tau) + (1-tau) log(1-tau) ]` for `|tau| <= 1`,
/// infinite outside.
pub fn smooth_trace_conjugate(eps: f64, tau: f64) -> f64 {
    debug_assert!(eps > 0.0);
    if tau.abs() > 1.0 {
        return f64::INFINITY;
    }
    eps * (xlogx(1.0 + tau) + xlogx(1.0 - tau))
}

/// Derivative of the scalar penalty term, defined for smooth kinds;
/// rank-capped variants are differentiated inside their cap.
pub fn scalar_deriv(spec: &PenaltySpec, sigma: f64) -> Result<f64> {
    match spec.kind {
        PenaltyKind::SmoothTrace(eps) => Ok(smooth_trace_deriv(eps, sigma)),
        PenaltyKind::Frobenius | PenaltyKind::FrobeniusPlusRank(_) => Ok(2.0 * sigma),
        PenaltyKind::TracePlusRank(_) | PenaltyKind::Trace | PenaltyKind::RankCap(_) => {
            Err(Error::UnsupportedPenalty(
                "penalty has no usable derivative; use the smooth variant".into(),
            ))
        }
    }
}

/// Penalty value on a spectrum; `f64::INFINITY` marks violated rank caps.
pub fn penalty_eval(spec: &PenaltySpec, s: &Spectrum) -> f64 {
    let vals = s.values();
    match spec.kind {
        PenaltyKind::RankCap(r) => {
            if s.numerical_rank() <= r {
                0.0
            } else {
                f64::INFINITY
            }
        }
        PenaltyKind::Trace => vals.iter().sum(),
        PenaltyKind::Frobenius => vals.iter().map(|v| v * v).sum(),
        PenaltyKind::TracePlusRank(r) => {
            if s.numerical_rank() <= r {
                vals.iter().sum()
            } else {
                f64::INFINITY
            }
        }
        PenaltyKind::FrobeniusPlusRank(r) => {
            if s.numerical_rank() <= r {
                vals.iter().map(|v| v * v).sum()
            } else {
                f64::INFINITY
            }
        }
        PenaltyKind::SmoothTrace(eps) => vals.iter().map(|&v| smooth_trace_eval(eps, v)).sum(),
    }
}

/// Fenchel conjugate of the penalty, evaluated on the spectrum of the dual
/// matrix: the sum of scalar conjugates over singular values.
///
/// For the trace norm this is the indicator of the unit spectral ball; for
/// the squared Frobenius norm (`s(sigma) = sigma^2`) the scalar conjugate is
/// `tau^2 / 4`; rank-capped variants take the sum over the top `r` values
/// (`(tau - 1)_+` per value for the trace cap).
pub fn penalty_conjugate(spec: &PenaltySpec, s: &Spectrum) -> f64 {
    let vals = s.values();
    match spec.kind {
        PenaltyKind::Trace => {
            if s.largest() <= 1.0 {
                0.0
            } else {
                f64::INFINITY
            }
        }
        PenaltyKind::Frobenius => vals.iter().map(|v| v * v / 4.0).sum(),
        PenaltyKind::RankCap(_) => {
            if s.numerical_rank() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        }
        PenaltyKind::TracePlusRank(r) => vals.iter().take(r).map(|&v| (v - 1.0).max(0.0)).sum(),
        PenaltyKind::FrobeniusPlusRank(r) => vals.iter().take(r).map(|v| v * v / 4.0).sum(),
        PenaltyKind::SmoothTrace(eps) => {
            let mut acc = 0.0;
            for &v in vals {
                acc += smooth_trace_conjugate(eps, v);
                if acc.is_infinite() {
                    return f64::INFINITY;
                }
            }
            acc
        }
    }
}
