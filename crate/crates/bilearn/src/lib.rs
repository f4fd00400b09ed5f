//! Learning bilinear operators between a "user" space and an "object" space
//! under spectral regularization.
//!
//! A predictor is a bilinear form `f(x, y) = <x, F y>` whose regularizer
//! depends on `F` only through its singular values: rank caps, the trace
//! norm, the squared Frobenius norm, hybrids of norm and rank, and a smooth
//! approximation of the trace norm. Every problem over `F` is reduced to a
//! finite coefficient matrix `alpha` over Gram-matrix square roots, which is
//! what the solvers in this crate optimize.
//!
//! Module map:
//!
//! * [`kernels`]: Gram matrices from identities and/or attributes, convex
//!   combination of the two, multitask offsets, and square-root factorization.
//! * [`losses`]: pointwise losses (squared, logistic) with derivatives and
//!   Fenchel conjugates.
//! * [`penalties`]: spectral penalties on singular-value sequences with
//!   derivatives and conjugates.
//! * [`model`]: the reduced model (`alpha` over factors), in-sample and
//!   out-of-sample prediction, and binary persistence.
//! * [`solver`]: low-rank factored first-order solver with rank escalation,
//!   the column-product Frobenius baseline, and duality-gap certification.
//! * [`mkl`]: multiple kernel learning over a bank of kernel pairs with
//!   summed spectral penalties.
//! * [`data`]: MovieLens-100k ingestion, synthetic generation,
//!   cross-validation splits, metrics, and export.
//! * [`oracle`]: independent brute-force references (proximal full-matrix
//!   solver, numeric conjugates, finite differences, projection checks).
//! * [`cli`]: experiment driver (grids, MKL sweeps, penalty comparisons) and
//!   config handling behind the `bilearn` binary.

// Validation sites use `!(x > 0.0)` so that NaN fails the check; the
// clippy rewrite to a plain comparison would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod mkl;
pub mod model;
pub mod oracle;
pub mod penalties;
pub mod solver;

pub use error::{Error, Result};
