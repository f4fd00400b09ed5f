//! The reduced model: a finite coefficient matrix over Gram-factor
//! coordinates, with in-sample and out-of-sample prediction and a flat
//! binary persistence format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{AttrKernel, GramFactor, KernelSpec, Side};
use crate::penalties::Spectrum;

/// Observations of one rating matrix: `(user index, object index, rating)`
/// triplets plus the entity counts on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsDataset {
    observations: Vec<(usize, usize, f64)>,
    n_x: usize,
    n_y: usize,
}

impl RatingsDataset {
    pub fn new(observations: Vec<(usize, usize, f64)>, n_x: usize, n_y: usize) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::EmptyInput("dataset has no observations".into()));
        }
        if n_x == 0 || n_y == 0 {
            return Err(Error::EmptyInput(
                "dataset has zero entities on one side".into(),
            ));
        }
        for &(a, b, t) in &observations {
            if a >= n_x || b >= n_y {
                return Err(Error::IndexOutOfRange(format!(
                    "observation ({a}, {b}) outside {n_x} x {n_y}"
                )));
            }
            if !t.is_finite() {
                return Err(Error::InvalidParam("non-finite rating".into()));
            }
        }
        Ok(Self {
            observations,
            n_x,
            n_y,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn observations(&self) -> &[(usize, usize, f64)] {
        &self.observations
    }

    pub fn targets(&self) -> Vec<f64> {
        self.observations.iter().map(|&(_, _, t)| t).collect()
    }

    pub fn mean_rating(&self) -> f64 {
        let sum: f64 = self.observations.iter().map(|&(_, _, t)| t).sum();
        sum / self.observations.len() as f64
    }

    /// Mean absolute rating; the scale used to size solver tolerances.
    pub fn rating_scale(&self) -> f64 {
        let sum: f64 = self.observations.iter().map(|&(_, _, t)| t.abs()).sum();
        (sum / self.observations.len() as f64).max(f64::MIN_POSITIVE)
    }

    /// Same observations with `delta` added to every rating.
    pub fn with_shifted_targets(&self, delta: f64) -> Self {
        Self {
            observations: self
                .observations
                .iter()
                .map(|&(a, b, t)| (a, b, t + delta))
                .collect(),
            n_x: self.n_x,
            n_y: self.n_y,
        }
    }

    /// The observations at `indices`, keeping entity counts.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut obs = Vec::with_capacity(indices.len());
        for &i in indices {
            let &o = self
                .observations
                .get(i)
                .ok_or_else(|| Error::IndexOutOfRange(format!("observation index {i}")))?;
            obs.push(o);
        }
        Self::new(obs, self.n_x, self.n_y)
    }
}

/// Coefficient storage: dense `alpha`, or `alpha = U * V^T` kept factored.
#[derive(Debug, Clone, PartialEq)]
pub enum Coeffs {
    Dense(DMatrix<f64>),
    Factored { u: DMatrix<f64>, v: DMatrix<f64> },
}

impl Coeffs {
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Coeffs::Dense(a) => a.clone(),
            Coeffs::Factored { u, v } => u * v.transpose(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Coeffs::Dense(a) => (a.nrows(), a.ncols()),
            Coeffs::Factored { u, v } => (u.nrows(), v.nrows()),
        }
    }
}

/// A trained bilinear predictor: Gram factors for both sides, the
/// coefficient matrix between them, and the training rating mean (ratings
/// are centered for training; the mean is re-added at prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    xfactor: GramFactor,
    yfactor: GramFactor,
    coeffs: Coeffs,
    mean: f64,
    xspec: Option<KernelSpec>,
    yspec: Option<KernelSpec>,
}

impl OperatorModel {
    pub fn new(
        xfactor: GramFactor,
        yfactor: GramFactor,
        coeffs: Coeffs,
        mean: f64,
    ) -> Result<Self> {
        let (cm_x, cm_y) = coeffs.shape();
        if cm_x != xfactor.m() || cm_y != yfactor.m() {
            return Err(Error::DimMismatch(format!(
                "coefficients {}x{} do not match factor widths {} and {}",
                cm_x,
                cm_y,
                xfactor.m(),
                yfactor.m()
            )));
        }
        if let Coeffs::Factored { u, v } = &coeffs {
            if u.ncols() != v.ncols() {
                return Err(Error::DimMismatch(format!(
                    "factored coefficients with {} vs {} columns",
                    u.ncols(),
                    v.ncols()
                )));
            }
            if u.ncols() > cm_x.min(cm_y) {
                return Err(Error::DimMismatch(format!(
                    "factor width {} exceeds min({cm_x}, {cm_y})",
                    u.ncols()
                )));
            }
        }
        if !mean.is_finite() {
            return Err(Error::InvalidParam("rating mean must be finite".into()));
        }
        Ok(Self {
            xfactor,
            yfactor,
            coeffs,
            mean,
            xspec: None,
            yspec: None,
        })
    }

    pub fn with_kernel_specs(mut self, xspec: KernelSpec, yspec: KernelSpec) -> Self {
        self.xspec = Some(xspec);
        self.yspec = Some(yspec);
        self
    }

    pub fn xfactor(&self) -> &GramFactor {
        &self.xfactor
    }

    pub fn yfactor(&self) -> &GramFactor {
        &self.yfactor
    }

    pub fn coeffs(&self) -> &Coeffs {
        &self.coeffs
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn kernel_specs(&self) -> (Option<&KernelSpec>, Option<&KernelSpec>) {
        (self.xspec.as_ref(), self.yspec.as_ref())
    }

    pub fn alpha_dense(&self) -> DMatrix<f64> {
        self.coeffs.to_dense()
    }

    /// Singular values of the coefficient matrix, descending.
    pub fn singular_values(&self) -> Spectrum {
        let svd = self.alpha_dense().svd(false, false);
        Spectrum::new(svd.singular_values.iter().cloned().collect())
            .expect("svd returns sorted non-negative values")
    }

    /// Score for one (user, object) pair of training entities.
    pub fn predict_pair(&self, a: usize, b: usize) -> Result<f64> {
        if a >= self.xfactor.n() || b >= self.yfactor.n() {
            return Err(Error::IndexOutOfRange(format!(
                "pair ({a}, {b}) outside {} x {}",
                self.xfactor.n(),
                self.yfactor.n()
            )));
        }
        let alpha = self.coeffs.to_dense();
        let left = self.xfactor.x().row(a) * alpha;
        Ok((left * self.yfactor.x().row(b).transpose())[(0, 0)] + self.mean)
    }

    /// Scores for every observation of `d`, without materializing the full
    /// `n_x x n_y` score matrix.
    pub fn predict_all(&self, d: &RatingsDataset) -> Result<Vec<f64>> {
        if d.n_x() != self.xfactor.n() || d.n_y() != self.yfactor.n() {
            return Err(Error::DimMismatch(format!(
                "dataset over {} x {} entities, model over {} x {}",
                d.n_x(),
                d.n_y(),
                self.xfactor.n(),
                self.yfactor.n()
            )));
        }
        let alpha = self.coeffs.to_dense();
        let left = self.xfactor.x() * alpha; // n_x x m_y
        let y = self.yfactor.x();
        Ok(d.observations()
            .iter()
            .map(|&(a, b, _)| left.row(a).dot(&y.row(b)) + self.mean)
            .collect())
    }

    /// Compact binary container: dimensions, rating mean, kernel specs, and
    /// the factor/coefficient matrices in row-major 64-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u64(&mut w, self.xfactor.n() as u64)?;
        write_u64(&mut w, self.yfactor.n() as u64)?;
        write_u64(&mut w, self.xfactor.m() as u64)?;
        write_u64(&mut w, self.yfactor.m() as u64)?;
        write_f64(&mut w, self.mean)?;
        match &self.coeffs {
            Coeffs::Dense(_) => {
                w.write_all(&[0u8])?;
            }
            Coeffs::Factored { u, .. } => {
                w.write_all(&[1u8])?;
                write_u64(&mut w, u.ncols() as u64)?;
            }
        }
        write_spec(&mut w, self.xspec.as_ref())?;
        write_spec(&mut w, self.yspec.as_ref())?;
        write_matrix(&mut w, self.xfactor.x())?;
        write_matrix(&mut w, self.yfactor.x())?;
        match &self.coeffs {
            Coeffs::Dense(a) => write_matrix(&mut w, a)?,
            Coeffs::Factored { u, v } => {
                write_matrix(&mut w, u)?;
                write_matrix(&mut w, v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidParam(format!(
                "not a model file: bad magic {magic:?}"
            )));
        }
        let n_x = read_u64(&mut r)? as usize;
        let n_y = read_u64(&mut r)? as usize;
        let m_x = read_u64(&mut r)? as usize;
        let m_y = read_u64(&mut r)? as usize;
        let mean = read_f64(&mut r)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let rank = if tag[0] == 1 {
            Some(read_u64(&mut r)? as usize)
        } else if tag[0] == 0 {
            None
        } else {
            return Err(Error::InvalidParam(format!(
                "bad coefficient storage tag {}",
                tag[0]
            )));
        };
        let xspec = read_spec(&mut r)?;
        let yspec = read_spec(&mut r)?;
        let xfactor = GramFactor::from_matrix(read_matrix(&mut r, n_x, m_x)?)?;
        let yfactor = GramFactor::from_matrix(read_matrix(&mut r, n_y, m_y)?)?;
        let coeffs = match rank {
            None => Coeffs::Dense(read_matrix(&mut r, m_x, m_y)?),
            Some(rk) => Coeffs::Factored {
                u: read_matrix(&mut r, m_x, rk)?,
                v: read_matrix(&mut r, m_y, rk)?,
            },
        };
        let mut model = Self::new(xfactor, yfactor, coeffs, mean)?;
        model.xspec = xspec;
        model.yspec = yspec;
        Ok(model)
    }
}

/// Least-squares coordinates of a new entity in a factor's column basis:
/// `argmin_c \|X c - k\|` for a kernel vector `k` of similarities to the
/// training entities.
pub fn embed_new(f: &GramFactor, k: &[f64]) -> Result<DVector<f64>> {
    if k.len() != f.n() {
        return Err(Error::DimMismatch(format!(
            "kernel vector of length {} for {} training entities",
            k.len(),
            f.n()
        )));
    }
    let rhs = DVector::from_column_slice(k);
    let svd = f.x().clone().svd(true, true);
    svd.solve(&rhs, 1e-12)
        .map_err(|e| Error::Numerical(format!("embedding solve failed: {e}")))
}

/// Out-of-sample score from kernel vectors to the training entities on each
/// side; coincides with [`OperatorModel::predict_pair`] when the vectors are
/// training kernel rows.
pub fn predict_new(m: &OperatorModel, k_x: &[f64], k_y: &[f64]) -> Result<f64> {
    let cx = embed_new(m.xfactor(), k_x)?;
    let cy = embed_new(m.yfactor(), k_y)?;
    let alpha = m.alpha_dense();
    Ok((cx.transpose() * alpha * cy)[(0, 0)] + m.mean())
}

const MAGIC: &[u8; 8] = b"BLNM0001";

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            write_f64(w, m[(i, j)])?;
        }
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut data = vec![0.0; rows * cols];
    for v in data.iter_mut() {
        *v = read_f64(r)?;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn write_spec<W: Write>(w: &mut W, spec: Option<&KernelSpec>) -> Result<()> {
    match spec {
        None => w.write_all(&[0u8])?,
        Some(s) => {
            w.write_all(&[1u8])?;
            w.write_all(&[match s.side {
                Side::User => 0u8,
                Side::Object => 1u8,
            }])?;
            write_f64(w, s.weight)?;
            match s.family {
                None => {
                    w.write_all(&[0u8])?;
                    write_f64(w, 0.0)?;
                }
                Some(AttrKernel::Linear) => {
                    w.write_all(&[1u8])?;
                    write_f64(w, 0.0)?;
                }
                Some(AttrKernel::Rbf { bandwidth }) => {
                    w.write_all(&[2u8])?;
                    write_f64(w, bandwidth)?;
                }
            }
            match s.multitask_offset {
                None => {
                    w.write_all(&[0u8])?;
                    write_f64(w, 0.0)?;
                }
                Some(c) => {
                    w.write_all(&[1u8])?;
                    write_f64(w, c)?;
                }
            }
        }
    }
    Ok(())
}

fn read_spec<R: Read>(r: &mut R) -> Result<Option<KernelSpec>> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if tag[0] == 0 {
        return Ok(None);
    }
    let mut side = [0u8; 1];
    r.read_exact(&mut side)?;
    let side = match side[0] {
        0 => Side::User,
        1 => Side::Object,
        other => {
            return Err(Error::InvalidParam(format!("bad kernel side tag {other}")));
        }
    };
    let weight = read_f64(r)?;
    let mut fam = [0u8; 1];
    r.read_exact(&mut fam)?;
    let bw = read_f64(r)?;
    let family = match fam[0] {
        0 => None,
        1 => Some(AttrKernel::Linear),
        2 => Some(AttrKernel::Rbf { bandwidth: bw }),
        other => {
            return Err(Error::InvalidParam(format!(
                "bad kernel family tag {other}"
            )));
        }
    };
    let mut off = [0u8; 1];
    r.read_exact(&mut off)?;
    let offv = read_f64(r)?;
    let multitask_offset = (off[0] == 1).then_some(offv);
    Ok(Some(KernelSpec::new(
        side,
        weight,
        family,
        multitask_offset,
    )?))
}
