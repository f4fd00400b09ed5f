//! Gram matrices for users and objects, their combinations, and square-root
//! factorizations.
//!
//! Entities on one side are described either by their identity alone (Dirac
//! kernel, orthonormal entities) or by attribute vectors (linear or RBF
//! kernel), and the two descriptions are mixed by a convex combination
//! weight. A [`GramFactor`] is a matrix `X` with `K = X * X^T`; all solvers
//! work in the coordinates given by such factors.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Per-entity attribute vectors, one row per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMatrix {
    features: DMatrix<f64>,
}

impl AttributeMatrix {
    pub fn new(features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyInput("attribute matrix has no rows".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(
                "attribute matrix contains non-finite values".into(),
            ));
        }
        Ok(Self { features })
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Copy with every row scaled to unit Euclidean norm (zero rows stay zero).
    ///
    /// Mixing an attribute kernel with a Dirac kernel is scale-sensitive, so
    /// the kernel-building pipeline normalizes entities first; both kernels
    /// then share a unit diagonal and the mix weight is meaningful.
    pub fn l2_normalized(&self) -> Self {
        let mut f = self.features.clone();
        for mut row in f.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        Self { features: f }
    }
}

/// Symmetric positive-semidefinite kernel matrix over `n` entities.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
}

impl GramMatrix {
    /// Validates squareness, finiteness, and symmetry (within `1e-10`
    /// relative to the largest entry), then stores the symmetrized matrix.
    /// Positive semidefiniteness is enforced when the matrix is factored.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 {
            return Err(Error::EmptyInput("gram matrix has no rows".into()));
        }
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimMismatch(format!(
                "gram matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(
                "gram matrix contains non-finite values".into(),
            ));
        }
        let scale = entries.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let mut max_asym = 0.0f64;
        for i in 0..entries.nrows() {
            for j in (i + 1)..entries.ncols() {
                max_asym = max_asym.max((entries[(i, j)] - entries[(j, i)]).abs());
            }
        }
        if max_asym > 1e-10 * scale {
            return Err(Error::InvalidParam(format!(
                "gram matrix is asymmetric: max |K_ij - K_ji| = {max_asym:.3e}"
            )));
        }
        let sym = (&entries + entries.transpose()) * 0.5;
        Ok(Self { entries: sym })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// A square root `X` (`n x m`) of a Gram matrix: `K = X * X^T`, with
/// linearly independent columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GramFactor {
    x: DMatrix<f64>,
}

impl GramFactor {
    /// Wraps an explicit root; the caller asserts column independence.
    pub fn from_matrix(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::EmptyInput("gram factor has no entries".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(
                "gram factor contains non-finite values".into(),
            ));
        }
        Ok(Self { x })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
}

/// Which side of the bilinear form a kernel describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Object,
}

/// Attribute-kernel family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttrKernel {
    Linear,
    Rbf { bandwidth: f64 },
}

/// Recipe for one side's Gram matrix: a convex mix of an attribute kernel
/// (weight `w`) and the Dirac kernel (weight `1 - w`), with an optional
/// constant multitask offset added to the Dirac part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub side: Side,
    pub weight: f64,
    pub family: Option<AttrKernel>,
    pub multitask_offset: Option<f64>,
}

impl KernelSpec {
    pub fn new(
        side: Side,
        weight: f64,
        family: Option<AttrKernel>,
        multitask_offset: Option<f64>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidParam(format!(
                "kernel mix weight must be in [0,1], got {weight}"
            )));
        }
        if let Some(AttrKernel::Rbf { bandwidth }) = family {
            if !(bandwidth > 0.0) {
                return Err(Error::InvalidParam(format!(
                    "rbf bandwidth must be > 0, got {bandwidth}"
                )));
            }
        }
        if let Some(c) = multitask_offset {
            if c < 0.0 {
                return Err(Error::InvalidParam(format!(
                    "multitask offset must be >= 0, got {c}"
                )));
            }
        }
        if weight > 0.0 && family.is_none() {
            return Err(Error::InvalidParam(
                "attribute weight > 0 requires an attribute kernel family".into(),
            ));
        }
        Ok(Self {
            side,
            weight,
            family,
            multitask_offset,
        })
    }

    pub fn dirac(side: Side) -> Self {
        Self {
            side,
            weight: 0.0,
            family: None,
            multitask_offset: None,
        }
    }

    /// Builds the Gram matrix this spec describes for `n` entities.
    /// Attribute rows are L2-normalized before the attribute kernel is
    /// evaluated, so the Dirac and attribute parts share a unit diagonal.
    pub fn build_gram(&self, n: usize, attrs: Option<&AttributeMatrix>) -> Result<GramMatrix> {
        let mut identity_part = dirac_gram(n)?;
        if let Some(c) = self.multitask_offset {
            identity_part = multitask_gram(&identity_part, c)?;
        }
        if self.weight == 0.0 {
            return Ok(identity_part);
        }
        let attrs = attrs.ok_or_else(|| {
            Error::InvalidParam("attribute weight > 0 but no attributes supplied".into())
        })?;
        if attrs.rows() != n {
            return Err(Error::DimMismatch(format!(
                "{} attribute rows for {} entities",
                attrs.rows(),
                n
            )));
        }
        let normalized = attrs.l2_normalized();
        let attr_gram = match self.family {
            Some(AttrKernel::Linear) => linear_gram(&normalized)?,
            Some(AttrKernel::Rbf { bandwidth }) => rbf_gram(&normalized, bandwidth)?,
            None => unreachable!("validated in new()"),
        };
        combine(&attr_gram, &identity_part, self.weight)
    }
}

/// Identity kernel: distinct entities are orthonormal.
pub fn dirac_gram(n: usize) -> Result<GramMatrix> {
    if n == 0 {
        return Err(Error::EmptyInput("dirac kernel over zero entities".into()));
    }
    GramMatrix::from_entries(DMatrix::identity(n, n))
}

/// Raw inner products between attribute rows: `K_ij = <row_i, row_j>`.
pub fn linear_gram(a: &AttributeMatrix) -> Result<GramMatrix> {
    let f = a.features();
    GramMatrix::from_entries(f * f.transpose())
}

/// Gaussian kernel `K_ij = exp(-\|row_i - row_j\|^2 / (2 h^2))`.
pub fn rbf_gram(a: &AttributeMatrix, bandwidth: f64) -> Result<GramMatrix> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidParam(format!(
            "rbf bandwidth must be > 0, got {bandwidth}"
        )));
    }
    let f = a.features();
    let n = f.nrows();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let d2 = (f.row(i) - f.row(j)).norm_squared();
            let v = (-d2 * inv).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    GramMatrix::from_entries(k)
}

/// Convex combination `w * attr + (1 - w) * dirac`.
pub fn combine(attr: &GramMatrix, dirac: &GramMatrix, w: f64) -> Result<GramMatrix> {
    if attr.n() != dirac.n() {
        return Err(Error::DimMismatch(format!(
            "combine: {} vs {} entities",
            attr.n(),
            dirac.n()
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidParam(format!(
            "combination weight must be in [0,1], got {w}"
        )));
    }
    GramMatrix::from_entries(attr.entries() * w + dirac.entries() * (1.0 - w))
}

/// Adds a constant `c` to every entry: identity sharing across entities.
pub fn multitask_gram(dirac: &GramMatrix, c: f64) -> Result<GramMatrix> {
    if c < 0.0 {
        return Err(Error::InvalidParam(format!(
            "multitask offset must be >= 0, got {c}"
        )));
    }
    GramMatrix::from_entries(dirac.entries().add_scalar(c))
}

/// Square root by symmetric eigendecomposition with eigenvalue clipping.
///
/// Eigenvalues above `tol * lambda_max` are kept; eigenvalues in
/// `[-1e-8 * lambda_max, tol * lambda_max]` are clipped to zero; anything
/// more negative is rejected as not PSD. The returned factor has
/// `m = ` number of kept eigenvalues.
pub fn factor_gram(k: &GramMatrix, tol: f64) -> Result<GramFactor> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParam(format!(
            "factorization threshold must be > 0, got {tol}"
        )));
    }
    let eig = k.entries().clone().symmetric_eigen();
    let lambda_max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(lambda_max > 0.0) {
        return Err(Error::InvalidParam(
            "gram matrix has no positive eigenvalue; nothing to factor".into(),
        ));
    }
    let lambda_min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if lambda_min < -1e-8 * lambda_max {
        return Err(Error::NotPsd(format!(
            "smallest eigenvalue {lambda_min:.3e} below -1e-8 * largest ({lambda_max:.3e})"
        )));
    }
    let mut kept: Vec<(f64, usize)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l > tol * lambda_max).then_some((l, i)))
        .collect();
    kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = k.n();
    let m = kept.len();
    let mut x = DMatrix::zeros(n, m);
    for (col, &(l, src)) in kept.iter().enumerate() {
        let scale = l.sqrt();
        for row in 0..n {
            x[(row, col)] = eig.eigenvectors[(row, src)] * scale;
        }
    }
    GramFactor::from_matrix(x)
}

/// Square root by diagonally pivoted Cholesky; an independent alternative to
/// [`factor_gram`] with the same `X * X^T = K` contract, used to exercise
/// invariance of downstream results under the choice of root.
pub fn pivoted_cholesky(k: &GramMatrix, tol: f64) -> Result<GramFactor> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParam(format!(
            "factorization threshold must be > 0, got {tol}"
        )));
    }
    let a = k.entries();
    let n = k.n();
    let mut diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let d0 = diag.iter().cloned().fold(0.0f64, f64::max);
    if !(d0 > 0.0) {
        return Err(Error::InvalidParam(
            "gram matrix has a nonpositive diagonal; nothing to factor".into(),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::zeros(n, n);
    let mut m = 0;
    for col in 0..n {
        let mut best = col;
        for i in (col + 1)..n {
            if diag[perm[i]] > diag[perm[best]] {
                best = i;
            }
        }
        perm.swap(col, best);
        let p = perm[col];
        let d = diag[p];
        if d < -1e-8 * d0 {
            return Err(Error::NotPsd(format!(
                "pivoted cholesky hit negative pivot {d:.3e}"
            )));
        }
        if d <= tol * d0 {
            break;
        }
        let root = d.sqrt();
        l[(p, col)] = root;
        for &q in &perm[col + 1..n] {
            let mut v = a[(q, p)];
            for j in 0..col {
                v -= l[(q, j)] * l[(p, j)];
            }
            let lv = v / root;
            l[(q, col)] = lv;
            diag[q] -= lv * lv;
        }
        m = col + 1;
    }
    if m == 0 {
        return Err(Error::InvalidParam(
            "gram matrix is numerically zero; nothing to factor".into(),
        ));
    }
    GramFactor::from_matrix(l.columns(0, m).into_owned())
}
