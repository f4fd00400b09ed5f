//! Python bindings for the core crate, exposed as the `bilearn_rs` module.
//!
//! The surface is intentionally small: generate a synthetic ratings problem,
//! train with the same kernel mixing the experiment CLI uses, predict, score,
//! and persist. Anything heavier (grids, cross-validation, kernel banks)
//! belongs to the `bilearn` binary.

use std::path::PathBuf;

use bilearn::data::{rmse as rmse_of, synth_generate, SynthConfig};
use bilearn::kernels::{factor_gram, AttrKernel, AttributeMatrix, GramFactor, KernelSpec, Side};
use bilearn::losses::LossKind;
use bilearn::model::{OperatorModel, RatingsDataset};
use bilearn::penalties::{PenaltyKind, PenaltySpec};
use bilearn::solver::{solve_frob_lowrank, solve_lowrank, FrobLowRankOpts, SolveConfig};
use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

const FACTOR_TOL: f64 = 1e-10;

/// `(ratings, user_attrs, item_attrs)` as plain Python-friendly lists.
type SynthData = (Vec<(usize, usize, f64)>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn fail(e: bilearn::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_attrs(rows: Vec<Vec<f64>>, n: usize, side: &str) -> PyResult<AttributeMatrix> {
    if rows.len() != n {
        return Err(PyValueError::new_err(format!(
            "{side} attributes have {} rows for {n} entities",
            rows.len()
        )));
    }
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!(
            "{side} attribute rows must share one nonzero width"
        )));
    }
    let m = DMatrix::from_fn(n, width, |i, j| rows[i][j]);
    AttributeMatrix::new(m).map_err(fail)
}

fn side_factor(
    side: Side,
    weight: f64,
    attrs: Option<&AttributeMatrix>,
    n: usize,
) -> PyResult<GramFactor> {
    let name = match side {
        Side::User => "user",
        Side::Object => "item",
    };
    if weight > 0.0 && attrs.is_none() {
        return Err(PyValueError::new_err(format!(
            "{name} kernel weight {weight} needs {name}_attrs"
        )));
    }
    let family = (weight > 0.0).then_some(AttrKernel::Linear);
    let spec = KernelSpec::new(side, weight, family, None).map_err(fail)?;
    let gram = spec.build_gram(n, attrs).map_err(fail)?;
    factor_gram(&gram, FACTOR_TOL).map_err(fail)
}

fn attr_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Draws a synthetic ratings problem: latent features on both sides, a dense
/// bilinear operator, rated pairs without replacement, and noisy labels.
/// Returns `(ratings, user_attrs, item_attrs)` where ratings are
/// `(user, item, value)` triples and the attribute lists keep only the first
/// `d_obs` of the `d_full` latent coordinates per entity.
#[pyfunction]
#[pyo3(signature = (n_x=50, n_y=50, d_full=6, d_obs=3, noise_sd=0.1, n_ratings=800, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synth_dataset(
    n_x: usize,
    n_y: usize,
    d_full: usize,
    d_obs: usize,
    noise_sd: f64,
    n_ratings: usize,
    seed: u64,
) -> PyResult<SynthData> {
    let cfg = SynthConfig {
        n_x,
        n_y,
        d_full,
        d_obs,
        noise_sd,
        n_ratings,
        seed,
    };
    let (d, users, items, _) = synth_generate(&cfg).map_err(fail)?;
    Ok((
        d.observations().to_vec(),
        attr_rows(users.features()),
        attr_rows(items.features()),
    ))
}

/// A trained bilinear model plus the solver report that produced it.
#[pyclass]
struct Model {
    inner: OperatorModel,
    objective: Option<f64>,
    gap: Option<f64>,
    rank_deficient: bool,
    hit_rank_cap: bool,
}

#[pymethods]
impl Model {
    /// Final objective value, `None` on a model loaded from disk.
    #[getter]
    fn objective(&self) -> Option<f64> {
        self.objective
    }

    /// Duality-gap certificate where the penalty admits one.
    #[getter]
    fn gap(&self) -> Option<f64> {
        self.gap
    }

    #[getter]
    fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    #[getter]
    fn hit_rank_cap(&self) -> bool {
        self.hit_rank_cap
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    /// Singular values of the learned operator, largest first.
    fn singular_values(&self) -> Vec<f64> {
        self.inner.singular_values().values().to_vec()
    }

    fn predict_pair(&self, user: usize, item: usize) -> PyResult<f64> {
        self.inner.predict_pair(user, item).map_err(fail)
    }

    fn predict(&self, pairs: Vec<(usize, usize)>) -> PyResult<Vec<f64>> {
        pairs
            .into_iter()
            .map(|(a, b)| self.inner.predict_pair(a, b).map_err(fail))
            .collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(fail)
    }

    fn __repr__(&self) -> String {
        let (nx, ny) = self.inner.coeffs().shape();
        format!(
            "Model(coeffs={}x{}, mean={:.4}, objective={:?})",
            nx,
            ny,
            self.inner.mean(),
            self.objective
        )
    }
}

/// Trains a bilinear model on `(user, item, value)` triples.
///
/// `eta` and `zeta` mix each side's kernel between the identity (0.0) and the
/// linear attribute kernel (1.0), exactly as the experiment grids do.
/// `penalty` is one of `"trace"` (smoothed trace norm with rank escalation),
/// `"frobenius"`, or `"frobenius-rank"` (squared Frobenius at a fixed rank
/// cap given by `rank`).
#[pyfunction]
#[pyo3(signature = (
    ratings, n_x, n_y, user_attrs=None, item_attrs=None, eta=0.0, zeta=0.0,
    lam=0.1, penalty="trace", rank=6, seed=0, max_iter=500, grad_tol=1e-5
))]
#[allow(clippy::too_many_arguments)]
fn train(
    ratings: Vec<(usize, usize, f64)>,
    n_x: usize,
    n_y: usize,
    user_attrs: Option<Vec<Vec<f64>>>,
    item_attrs: Option<Vec<Vec<f64>>>,
    eta: f64,
    zeta: f64,
    lam: f64,
    penalty: &str,
    rank: usize,
    seed: u64,
    max_iter: usize,
    grad_tol: f64,
) -> PyResult<Model> {
    let d = RatingsDataset::new(ratings, n_x, n_y).map_err(fail)?;
    let ua = user_attrs
        .map(|rows| rows_to_attrs(rows, n_x, "user"))
        .transpose()?;
    let ia = item_attrs
        .map(|rows| rows_to_attrs(rows, n_y, "item"))
        .transpose()?;
    let fx = side_factor(Side::User, eta, ua.as_ref(), n_x)?;
    let fy = side_factor(Side::Object, zeta, ia.as_ref(), n_y)?;
    let (inner, report) = match penalty {
        "trace" => {
            let mut sc = SolveConfig::smoothed_trace_for(lam, &d).map_err(fail)?;
            sc.seed = seed;
            sc.max_iter = max_iter;
            sc.grad_tol = grad_tol;
            sc.delta_rank = 1e-2;
            solve_lowrank(&d, &fx, &fy, &sc).map_err(fail)?
        }
        "frobenius" => {
            let mut sc = SolveConfig::new(
                lam,
                PenaltySpec::new(PenaltyKind::Frobenius).map_err(fail)?,
                LossKind::Squared,
            )
            .map_err(fail)?;
            sc.seed = seed;
            sc.max_iter = max_iter;
            sc.grad_tol = grad_tol;
            solve_lowrank(&d, &fx, &fy, &sc).map_err(fail)?
        }
        "frobenius-rank" => {
            let r = rank.min(fx.m()).min(fy.m()).max(1);
            let opts = FrobLowRankOpts {
                restarts: 3,
                max_iter,
                grad_tol,
                center: true,
                seed,
            };
            solve_frob_lowrank(&d, &fx, &fy, r, lam, &opts).map_err(fail)?
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown penalty {other:?}; use \"trace\", \"frobenius\", or \"frobenius-rank\""
            )))
        }
    };
    Ok(Model {
        inner,
        objective: Some(report.objective),
        gap: report.gap,
        rank_deficient: report.rank_deficient,
        hit_rank_cap: report.hit_rank_cap,
    })
}

/// Loads a model saved by [`Model::save`]. Report fields are `None`.
#[pyfunction]
fn load_model(path: PathBuf) -> PyResult<Model> {
    let inner = OperatorModel::load(&path).map_err(fail)?;
    Ok(Model {
        inner,
        objective: None,
        gap: None,
        rank_deficient: false,
        hit_rank_cap: false,
    })
}

/// Root mean squared error between two equal-length sequences.
#[pyfunction]
fn rmse(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    rmse_of(&pred, &truth).map_err(fail)
}

#[pymodule]
fn bilearn_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
