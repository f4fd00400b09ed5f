//! Learning with a bank of several kernel pairs at once: the prediction is
//! the sum of one bilinear term per pair and the penalty is the sum of the
//! per-pair spectral penalties, so blocks whose kernels do not help are
//! driven to zero and the surviving blocks identify the useful kernels.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{
    factor_gram, pivoted_cholesky, AttrKernel, AttributeMatrix, GramFactor, GramMatrix, KernelSpec,
    Side,
};
use crate::model::{Coeffs, OperatorModel, RatingsDataset};
use crate::solver::{solve_blocks, SolveConfig, SolveReport};

const FACTOR_TOL: f64 = 1e-10;

/// A bank of kernel pairs over a shared pair of entity sets.
#[derive(Debug, Clone)]
pub struct KernelBank {
    pairs: Vec<(GramFactor, GramFactor)>,
}

impl KernelBank {
    pub fn new(pairs: Vec<(GramFactor, GramFactor)>) -> Result<Self> {
        let (first_x, first_y) = match pairs.first() {
            Some((x, y)) => (x.n(), y.n()),
            None => {
                return Err(Error::EmptyInput(
                    "kernel bank needs at least one pair".into(),
                ))
            }
        };
        for (k, (x, y)) in pairs.iter().enumerate() {
            if x.n() != first_x || y.n() != first_y {
                return Err(Error::DimMismatch(format!(
                    "bank pair {k} covers {}x{} entities, pair 0 covers {first_x}x{first_y}",
                    x.n(),
                    y.n()
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pairs(&self) -> &[(GramFactor, GramFactor)] {
        &self.pairs
    }

    pub fn n_x(&self) -> usize {
        self.pairs[0].0.n()
    }

    pub fn n_y(&self) -> usize {
        self.pairs[0].1.n()
    }
}

/// Joint minimization over all bank blocks: one model per pair, sharing the
/// rating mean through the first block only so the sum of per-model
/// predictions is the ensemble prediction. The report's per-block trace
/// norms show which kernels carry weight.
pub fn solve_mkl(
    d: &RatingsDataset,
    bank: &KernelBank,
    cfg: &SolveConfig,
) -> Result<(Vec<OperatorModel>, SolveReport)> {
    if bank.n_x() != d.n_x() || bank.n_y() != d.n_y() {
        return Err(Error::DimMismatch(format!(
            "bank over {}x{} entities, dataset over {}x{}",
            bank.n_x(),
            bank.n_y(),
            d.n_x(),
            d.n_y()
        )));
    }
    let mean = if cfg.center { d.mean_rating() } else { 0.0 };
    let centered = d.with_shifted_targets(-mean);
    let xs: Vec<&DMatrix<f64>> = bank.pairs.iter().map(|(x, _)| x.x()).collect();
    let ys: Vec<&DMatrix<f64>> = bank.pairs.iter().map(|(_, y)| y.x()).collect();
    let (blocks, report) = solve_blocks(xs, ys, &centered, cfg)?;
    let mut models = Vec::with_capacity(blocks.len());
    for (k, (u, v)) in blocks.into_iter().enumerate() {
        let (xf, yf) = &bank.pairs[k];
        let block_mean = if k == 0 { mean } else { 0.0 };
        models.push(OperatorModel::new(
            xf.clone(),
            yf.clone(),
            Coeffs::Factored { u, v },
            block_mean,
        )?);
    }
    Ok((models, report))
}

/// Sum of the per-block predictions for every observation of `d`, in
/// observation order.
pub fn predict_sum(models: &[OperatorModel], d: &RatingsDataset) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::EmptyInput("no models to predict with".into()));
    }
    let mut total = models[0].predict_all(d)?;
    for m in &models[1..] {
        let part = m.predict_all(d)?;
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    Ok(total)
}

/// The four elementary kernel pairs: identity on both sides, identity vs
/// attributes, attributes vs identity, attributes on both sides. Attribute
/// Grams use the linear kernel on length-normalized rows.
pub fn corner_bank(
    user_attrs: Option<&AttributeMatrix>,
    object_attrs: Option<&AttributeMatrix>,
    n_x: usize,
    n_y: usize,
) -> Result<KernelBank> {
    let (ua, oa) = match (user_attrs, object_attrs) {
        (Some(u), Some(o)) => (u, o),
        _ => {
            return Err(Error::InvalidParam(
                "corner bank needs attributes on both sides".into(),
            ))
        }
    };
    let dirac_x = dirac_factor(Side::User, n_x)?;
    let dirac_y = dirac_factor(Side::Object, n_y)?;
    let attr_x = attr_factor(Side::User, n_x, ua)?;
    let attr_y = attr_factor(Side::Object, n_y, oa)?;
    KernelBank::new(vec![
        (dirac_x.clone(), dirac_y.clone()),
        (dirac_x, attr_y.clone()),
        (attr_x.clone(), dirac_y),
        (attr_x, attr_y),
    ])
}

fn dirac_factor(side: Side, n: usize) -> Result<GramFactor> {
    let gram = KernelSpec::dirac(side).build_gram(n, None)?;
    factor_gram(&gram, FACTOR_TOL)
}

fn attr_factor(side: Side, n: usize, attrs: &AttributeMatrix) -> Result<GramFactor> {
    let spec = KernelSpec::new(side, 1.0, Some(AttrKernel::Linear), None)?;
    let gram = spec.build_gram(n, Some(attrs))?;
    factor_gram(&gram, FACTOR_TOL)
}

/// Checks that the positive singular values of `X^T B Y` agree across two
/// independently computed square roots of `K` and `G` (eigenvalue-based and
/// pivoted-Cholesky roots), within `1e-8`. This is the computable face of
/// the statement that the learning problem depends on the Gram matrices
/// only, not on the chosen feature maps.
pub fn kron_invariance_check(k: &GramMatrix, g: &GramMatrix, b: &DMatrix<f64>) -> Result<bool> {
    if b.nrows() != k.n() || b.ncols() != g.n() {
        return Err(Error::DimMismatch(format!(
            "test matrix is {}x{}, Grams are {} and {}",
            b.nrows(),
            b.ncols(),
            k.n(),
            g.n()
        )));
    }
    let x1 = factor_gram(k, FACTOR_TOL)?;
    let y1 = factor_gram(g, FACTOR_TOL)?;
    let x2 = pivoted_cholesky(k, FACTOR_TOL)?;
    let y2 = pivoted_cholesky(g, FACTOR_TOL)?;
    let s1 = projected_singulars(&x1, b, &y1);
    let s2 = projected_singulars(&x2, b, &y2);
    let width = s1.len().max(s2.len());
    let at = |s: &[f64], i: usize| s.get(i).copied().unwrap_or(0.0);
    Ok((0..width).all(|i| (at(&s1, i) - at(&s2, i)).abs() <= 1e-8))
}

fn projected_singulars(x: &GramFactor, b: &DMatrix<f64>, y: &GramFactor) -> Vec<f64> {
    let m = x.x().transpose() * b * y.x();
    let svd = m.svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}
