//! Experiment driver: key-value config with CLI overrides, (eta, zeta)
//! kernel-mix grids with cross-validated RMSE and inner lambda selection,
//! four-corner kernel-bank sweeps, trace vs fixed-rank penalty comparisons,
//! synthetic data export, and a certification pass over the reference
//! implementations. Every CSV row carries the hash of the configuration that
//! produced it and runs are byte-deterministic for a fixed config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{
    kfold_split, load_movielens, rmse, subsample, synth_generate, write_attributes_csv,
    write_triplets, SynthConfig,
};
use crate::error::{Error, Result};
use crate::kernels::{
    combine, dirac_gram, factor_gram, linear_gram, AttrKernel, AttributeMatrix, GramFactor,
    GramMatrix, KernelSpec, Side,
};
use crate::losses::LossKind;
use crate::mkl::{corner_bank, kron_invariance_check, predict_sum, solve_mkl};
use crate::model::RatingsDataset;
use crate::oracle::{
    lowrank_equivalence_check, projection_lemma_check, representer_equivalence_check,
};
use crate::penalties::{PenaltyKind, PenaltySpec};
use crate::solver::{solve_frob_lowrank, solve_lowrank, FrobLowRankOpts, SolveConfig};

const FACTOR_TOL: f64 = 1e-10;

/// Where the ratings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    MovieLens,
}

/// Which regularizer the grid runner fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridPenalty {
    /// Smoothed trace norm with rank escalation.
    Trace,
    /// Frobenius penalty with rank escalation.
    Frobenius,
    /// Fixed-rank factorization with the column-product penalty.
    FrobeniusRank,
}

impl GridPenalty {
    fn label(self) -> &'static str {
        match self {
            GridPenalty::Trace => "trace",
            GridPenalty::Frobenius => "frobenius",
            GridPenalty::FrobeniusRank => "frobenius-rank",
        }
    }
}

/// Everything one experiment run needs. Built from defaults, then a config
/// file, then command-line overrides, each layer via [`apply_kv`].
///
/// [`apply_kv`]: ExperimentConfig::apply_kv
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub movielens_dir: Option<PathBuf>,
    /// Keep only this many users (0 = all), re-drawn per `seed`.
    pub subsample_users: usize,
    pub subsample_items: usize,
    pub synth: SynthConfig,
    pub etas: Vec<f64>,
    pub zetas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub penalty: GridPenalty,
    /// Width of the fixed-rank method.
    pub rank: usize,
    pub folds: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads for grid cells; 0 picks one per core.
    pub workers: usize,
    pub x_kernel: AttrKernel,
    pub y_kernel: AttrKernel,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub delta_rank: f64,
    pub r_max: usize,
    /// Random restarts of the fixed-rank method.
    pub restarts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            movielens_dir: None,
            subsample_users: 0,
            subsample_items: 0,
            synth: SynthConfig::default(),
            etas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            zetas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            lambdas: vec![0.01, 0.03, 0.1, 0.3],
            penalty: GridPenalty::Trace,
            rank: 6,
            folds: 10,
            seed: 0,
            out: PathBuf::from("out.csv"),
            workers: 0,
            x_kernel: AttrKernel::Linear,
            y_kernel: AttrKernel::Linear,
            grad_tol: 1e-5,
            max_iter: 500,
            delta_rank: 1e-2,
            r_max: 16,
            restarts: 3,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the ratings-data pipeline: 200x400 entity subsample,
    /// 3x3 mix grid, 5 folds.
    pub fn movielens_defaults(dir: PathBuf) -> Self {
        Self {
            source: DataSource::MovieLens,
            movielens_dir: Some(dir),
            subsample_users: 200,
            subsample_items: 400,
            etas: vec![0.0, 0.5, 1.0],
            zetas: vec![0.0, 0.5, 1.0],
            lambdas: vec![0.03, 0.1, 0.3],
            folds: 5,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text)
            .map_err(|e| with_context(format!("{}", path.display()), e))
    }

    /// Applies `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())
                .map_err(|e| with_context(format!("line {}", lineno + 1), e))?;
        }
        Ok(())
    }

    /// Sets one config field from its textual form.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "source" => {
                self.source = match value {
                    "synth" => DataSource::Synth,
                    "movielens" => DataSource::MovieLens,
                    other => {
                        return Err(Error::Config(format!(
                            "source must be synth or movielens, got {other}"
                        )))
                    }
                }
            }
            "movielens_dir" => self.movielens_dir = Some(PathBuf::from(value)),
            "subsample_users" => self.subsample_users = parse_num(key, value)?,
            "subsample_items" => self.subsample_items = parse_num(key, value)?,
            "n_x" => self.synth.n_x = parse_num(key, value)?,
            "n_y" => self.synth.n_y = parse_num(key, value)?,
            "d_full" => self.synth.d_full = parse_num(key, value)?,
            "d_obs" => self.synth.d_obs = parse_num(key, value)?,
            "noise_sd" => self.synth.noise_sd = parse_num(key, value)?,
            "n_ratings" => self.synth.n_ratings = parse_num(key, value)?,
            "etas" => self.etas = parse_list(key, value)?,
            "zetas" => self.zetas = parse_list(key, value)?,
            "lambdas" => self.lambdas = parse_list(key, value)?,
            "penalty" => {
                self.penalty = match value {
                    "trace" => GridPenalty::Trace,
                    "frobenius" => GridPenalty::Frobenius,
                    "frobenius-rank" => GridPenalty::FrobeniusRank,
                    other => {
                        return Err(Error::Config(format!(
                            "penalty must be trace, frobenius, or frobenius-rank, got {other}"
                        )))
                    }
                }
            }
            "rank" => self.rank = parse_num(key, value)?,
            "folds" => self.folds = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "workers" => self.workers = parse_num(key, value)?,
            "x_kernel" => self.x_kernel = parse_kernel(value)?,
            "y_kernel" => self.y_kernel = parse_kernel(value)?,
            "grad_tol" => self.grad_tol = parse_num(key, value)?,
            "max_iter" => self.max_iter = parse_num(key, value)?,
            "delta_rank" => self.delta_rank = parse_num(key, value)?,
            "r_max" => self.r_max = parse_num(key, value)?,
            "restarts" => self.restarts = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, grid) in [("etas", &self.etas), ("zetas", &self.zetas)] {
            if grid.is_empty() {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
            if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("{name} values must lie in [0, 1]")));
            }
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::Config(
                "lambdas must be a non-empty list of finite values > 0".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be >= 2, got {}",
                self.folds
            )));
        }
        if self.rank < 1 || self.restarts < 1 || self.max_iter < 1 {
            return Err(Error::Config(
                "rank, restarts, and max_iter must be >= 1".into(),
            ));
        }
        if !(self.grad_tol > 0.0) || !(self.delta_rank > 0.0) {
            return Err(Error::Config("grad_tol and delta_rank must be > 0".into()));
        }
        if self.source == DataSource::MovieLens && self.movielens_dir.is_none() {
            return Err(Error::Config(
                "source = movielens needs movielens_dir".into(),
            ));
        }
        Ok(())
    }

    /// Canonical textual form of every result-affecting field, in a fixed
    /// order. `out` and `workers` are excluded: they change where results go
    /// and how fast they arrive, not what they are.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let dir = self
            .movielens_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "source={}",
            match self.source {
                DataSource::Synth => "synth",
                DataSource::MovieLens => "movielens",
            }
        );
        let _ = writeln!(s, "movielens_dir={dir}");
        let _ = writeln!(s, "subsample_users={}", self.subsample_users);
        let _ = writeln!(s, "subsample_items={}", self.subsample_items);
        let _ = writeln!(s, "n_x={}", self.synth.n_x);
        let _ = writeln!(s, "n_y={}", self.synth.n_y);
        let _ = writeln!(s, "d_full={}", self.synth.d_full);
        let _ = writeln!(s, "d_obs={}", self.synth.d_obs);
        let _ = writeln!(s, "noise_sd={}", self.synth.noise_sd);
        let _ = writeln!(s, "n_ratings={}", self.synth.n_ratings);
        let _ = writeln!(s, "etas={}", join_floats(&self.etas));
        let _ = writeln!(s, "zetas={}", join_floats(&self.zetas));
        let _ = writeln!(s, "lambdas={}", join_floats(&self.lambdas));
        let _ = writeln!(s, "penalty={}", self.penalty.label());
        let _ = writeln!(s, "rank={}", self.rank);
        let _ = writeln!(s, "folds={}", self.folds);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "x_kernel={}", kernel_label(self.x_kernel));
        let _ = writeln!(s, "y_kernel={}", kernel_label(self.y_kernel));
        let _ = writeln!(s, "grad_tol={}", self.grad_tol);
        let _ = writeln!(s, "max_iter={}", self.max_iter);
        let _ = writeln!(s, "delta_rank={}", self.delta_rank);
        let _ = writeln!(s, "r_max={}", self.r_max);
        let _ = writeln!(s, "restarts={}", self.restarts);
        s
    }

    /// Hex SHA-256 of [`canonical`](Self::canonical); stamped on every CSV
    /// row.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut s = String::with_capacity(64);
        for byte in digest {
            let _ = write!(s, "{byte:02x}");
        }
        s
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_kernel(value: &str) -> Result<AttrKernel> {
    if value == "linear" {
        return Ok(AttrKernel::Linear);
    }
    if let Some(bw) = value.strip_prefix("rbf:") {
        let bandwidth: f64 = parse_num("rbf bandwidth", bw)?;
        if !(bandwidth > 0.0) {
            return Err(Error::Config(format!(
                "rbf bandwidth must be > 0, got {bandwidth}"
            )));
        }
        return Ok(AttrKernel::Rbf { bandwidth });
    }
    Err(Error::Config(format!(
        "kernel must be linear or rbf:BANDWIDTH, got {value}"
    )))
}

fn kernel_label(k: AttrKernel) -> String {
    match k {
        AttrKernel::Linear => "linear".into(),
        AttrKernel::Rbf { bandwidth } => format!("rbf:{bandwidth}"),
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn with_context(context: String, source: Error) -> Error {
    Error::Context {
        context,
        source: Box::new(source),
    }
}

/// Loads the configured dataset plus both attribute matrices, applying the
/// entity subsample when requested.
pub fn load_source(
    cfg: &ExperimentConfig,
) -> Result<(RatingsDataset, AttributeMatrix, AttributeMatrix)> {
    let (d, users, items) = match cfg.source {
        DataSource::Synth => {
            let mut sc = cfg.synth;
            sc.seed = cfg.seed;
            let (d, u, i, _) = synth_generate(&sc)?;
            (d, u, i)
        }
        DataSource::MovieLens => {
            let dir = cfg
                .movielens_dir
                .as_ref()
                .ok_or_else(|| Error::Config("source = movielens needs movielens_dir".into()))?;
            load_movielens(dir)?
        }
    };
    if cfg.subsample_users == 0 && cfg.subsample_items == 0 {
        return Ok((d, users, items));
    }
    let nu = if cfg.subsample_users == 0 {
        d.n_x()
    } else {
        cfg.subsample_users
    };
    let ni = if cfg.subsample_items == 0 {
        d.n_y()
    } else {
        cfg.subsample_items
    };
    subsample(&d, &users, &items, nu, ni, cfg.seed)
}

/// One heat-map cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub eta: f64,
    pub zeta: f64,
    /// The lambda the inner validation split selected.
    pub lambda: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    /// Largest fitted factor width across folds.
    pub rank: usize,
    pub config_hash: String,
}

pub const GRID_HEADER: &str = "eta,zeta,lambda,rmse_mean,rmse_std,rank,config_hash";

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from(GRID_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{},{}",
            r.eta, r.zeta, r.lambda, r.rmse_mean, r.rmse_std, r.rank, r.config_hash
        );
    }
    s
}

/// One penalty-comparison row; `method` is `trace` or `frobenius-rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: &'static str,
    pub eta: f64,
    pub zeta: f64,
    pub lambda: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub rank: usize,
    pub config_hash: String,
}

pub const COMPARE_HEADER: &str = "method,eta,zeta,lambda,rmse_mean,rmse_std,rank,config_hash";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from(COMPARE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{},{}",
            r.method, r.eta, r.zeta, r.lambda, r.rmse_mean, r.rmse_std, r.rank, r.config_hash
        );
    }
    s
}

/// One kernel-bank sweep row: cross-validated RMSE at `lambda` plus the mean
/// trace norm of each block, in bank order (identity/identity,
/// identity/attribute, attribute/identity, attribute/attribute).
#[derive(Debug, Clone, PartialEq)]
pub struct MklRow {
    pub lambda: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub block_norms: Vec<f64>,
    pub config_hash: String,
}

pub const MKL_HEADER: &str =
    "lambda,rmse_mean,rmse_std,norm_dirac_dirac,norm_dirac_attr,norm_attr_dirac,norm_attr_attr,config_hash";

pub fn mkl_csv(rows: &[MklRow]) -> String {
    let mut s = String::from(MKL_HEADER);
    s.push('\n');
    for r in rows {
        let norms = r
            .block_norms
            .iter()
            .map(|n| format!("{n:.6e}"))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{}",
            r.lambda, r.rmse_mean, r.rmse_std, norms, r.config_hash
        );
    }
    s
}

/// Cross-validated heat map over the (eta, zeta) grid with the configured
/// penalty; writes `cfg.out` and returns the rows sorted by
/// (eta, zeta, lambda).
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let (d, users, items) = load_source(cfg)?;
    let hash = cfg.hash();
    let cells: Vec<(f64, f64)> = cfg
        .etas
        .iter()
        .flat_map(|&eta| cfg.zetas.iter().map(move |&zeta| (eta, zeta)))
        .collect();
    let mut rows = in_pool(cfg.workers, || {
        cells
            .par_iter()
            .map(|&(eta, zeta)| {
                eval_cell(cfg.penalty, &d, &users, &items, eta, zeta, cfg)
                    .map(|c| GridRow {
                        eta,
                        zeta,
                        lambda: c.lambda,
                        rmse_mean: c.rmse_mean,
                        rmse_std: c.rmse_std,
                        rank: c.rank,
                        config_hash: hash.clone(),
                    })
                    .map_err(|e| with_context(format!("grid cell (eta={eta}, zeta={zeta})"), e))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    rows.sort_by(|a, b| {
        a.eta
            .total_cmp(&b.eta)
            .then(a.zeta.total_cmp(&b.zeta))
            .then(a.lambda.total_cmp(&b.lambda))
    });
    write_out(&cfg.out, &grid_csv(&rows))?;
    Ok(rows)
}

/// Runs the smoothed-trace and fixed-rank methods on identical folds for
/// every grid cell; writes `cfg.out` and returns rows sorted by
/// (method, eta, zeta, lambda).
pub fn run_compare_penalties(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    let (d, users, items) = load_source(cfg)?;
    let hash = cfg.hash();
    let mut jobs = Vec::new();
    for method in [GridPenalty::Trace, GridPenalty::FrobeniusRank] {
        for &eta in &cfg.etas {
            for &zeta in &cfg.zetas {
                jobs.push((method, eta, zeta));
            }
        }
    }
    let mut rows = in_pool(cfg.workers, || {
        jobs.par_iter()
            .map(|&(method, eta, zeta)| {
                eval_cell(method, &d, &users, &items, eta, zeta, cfg)
                    .map(|c| CompareRow {
                        method: method.label(),
                        eta,
                        zeta,
                        lambda: c.lambda,
                        rmse_mean: c.rmse_mean,
                        rmse_std: c.rmse_std,
                        rank: c.rank,
                        config_hash: hash.clone(),
                    })
                    .map_err(|e| {
                        with_context(
                            format!("{} cell (eta={eta}, zeta={zeta})", method.label()),
                            e,
                        )
                    })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    rows.sort_by(|a, b| {
        a.method
            .cmp(b.method)
            .then(a.eta.total_cmp(&b.eta))
            .then(a.zeta.total_cmp(&b.zeta))
            .then(a.lambda.total_cmp(&b.lambda))
    });
    write_out(&cfg.out, &compare_csv(&rows))?;
    Ok(rows)
}

/// Cross-validated sweep of the four-corner kernel bank over the lambda
/// list; writes `cfg.out` and returns rows sorted by lambda.
pub fn run_mkl(cfg: &ExperimentConfig) -> Result<Vec<MklRow>> {
    cfg.validate()?;
    let (d, users, items) = load_source(cfg)?;
    let hash = cfg.hash();
    let bank = corner_bank(Some(&users), Some(&items), d.n_x(), d.n_y())?;
    let folds = kfold_split(&d, cfg.folds, cfg.seed)?;
    let mut rows = in_pool(cfg.workers, || {
        cfg.lambdas
            .par_iter()
            .map(|&lambda| {
                mkl_point(&d, &bank, &folds, lambda, cfg)
                    .map(|(rmse_mean, rmse_std, block_norms)| MklRow {
                        lambda,
                        rmse_mean,
                        rmse_std,
                        block_norms,
                        config_hash: hash.clone(),
                    })
                    .map_err(|e| with_context(format!("kernel bank at lambda={lambda}"), e))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    write_out(&cfg.out, &mkl_csv(&rows))?;
    Ok(rows)
}

fn mkl_point(
    d: &RatingsDataset,
    bank: &crate::mkl::KernelBank,
    folds: &[(Vec<usize>, Vec<usize>)],
    lambda: f64,
    cfg: &ExperimentConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut scores = Vec::with_capacity(folds.len());
    let mut norms = vec![0.0; bank.len()];
    for (tr, te) in folds {
        let train = d.subset(tr)?;
        let test = d.subset(te)?;
        let mut sc = SolveConfig::smoothed_trace_for(lambda, &train)?;
        tune(&mut sc, cfg);
        let (models, report) = solve_mkl(&train, bank, &sc)?;
        let preds = predict_sum(&models, &test)?;
        scores.push(rmse(&preds, &test.targets())?);
        for (slot, n) in norms.iter_mut().zip(&report.block_trace_norms) {
            *slot += n / folds.len() as f64;
        }
    }
    let (mean, std) = mean_std(&scores);
    Ok((mean, std, norms))
}

struct CellEval {
    lambda: f64,
    rmse_mean: f64,
    rmse_std: f64,
    rank: usize,
}

fn eval_cell(
    method: GridPenalty,
    d: &RatingsDataset,
    users: &AttributeMatrix,
    items: &AttributeMatrix,
    eta: f64,
    zeta: f64,
    cfg: &ExperimentConfig,
) -> Result<CellEval> {
    let fx = side_factor(Side::User, eta, cfg.x_kernel, users, d.n_x())?;
    let fy = side_factor(Side::Object, zeta, cfg.y_kernel, items, d.n_y())?;
    let folds = kfold_split(d, cfg.folds, cfg.seed)?;
    let lambda = select_lambda(method, d, &folds[0].0, &fx, &fy, cfg)?;
    let mut scores = Vec::with_capacity(folds.len());
    let mut rank = 0;
    for (tr, te) in &folds {
        let train = d.subset(tr)?;
        let test = d.subset(te)?;
        let (score, r) = fit_and_rmse(method, &train, &test, &fx, &fy, lambda, cfg)?;
        scores.push(score);
        rank = rank.max(r);
    }
    let (rmse_mean, rmse_std) = mean_std(&scores);
    Ok(CellEval {
        lambda,
        rmse_mean,
        rmse_std,
        rank,
    })
}

/// Picks the best lambda on a held-out tenth of the first fold's training
/// observations; ties go to the smallest lambda.
fn select_lambda(
    method: GridPenalty,
    d: &RatingsDataset,
    train_idx: &[usize],
    fx: &GramFactor,
    fy: &GramFactor,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    if cfg.lambdas.len() == 1 {
        return Ok(cfg.lambdas[0]);
    }
    let mut idx = train_idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    idx.shuffle(&mut rng);
    let n_val = (idx.len() / 10).max(1);
    if idx.len() <= n_val {
        return Err(Error::Config(
            "too few observations to hold out a validation split".into(),
        ));
    }
    let (val_idx, fit_idx) = idx.split_at(n_val);
    let fit_d = d.subset(fit_idx)?;
    let val_d = d.subset(val_idx)?;
    let mut lams = cfg.lambdas.clone();
    lams.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, lams[0]);
    for &lambda in &lams {
        let (score, _) = fit_and_rmse(method, &fit_d, &val_d, fx, fy, lambda, cfg)?;
        if score < best.0 {
            best = (score, lambda);
        }
    }
    Ok(best.1)
}

fn fit_and_rmse(
    method: GridPenalty,
    train: &RatingsDataset,
    test: &RatingsDataset,
    fx: &GramFactor,
    fy: &GramFactor,
    lambda: f64,
    cfg: &ExperimentConfig,
) -> Result<(f64, usize)> {
    let (model, report) = match method {
        GridPenalty::Trace => {
            let mut sc = SolveConfig::smoothed_trace_for(lambda, train)?;
            tune(&mut sc, cfg);
            solve_lowrank(train, fx, fy, &sc)?
        }
        GridPenalty::Frobenius => {
            let mut sc = SolveConfig::new(
                lambda,
                PenaltySpec::new(PenaltyKind::Frobenius)?,
                LossKind::Squared,
            )?;
            tune(&mut sc, cfg);
            solve_lowrank(train, fx, fy, &sc)?
        }
        GridPenalty::FrobeniusRank => {
            let r = cfg.rank.min(fx.m()).min(fy.m()).max(1);
            let opts = FrobLowRankOpts {
                restarts: cfg.restarts,
                max_iter: cfg.max_iter,
                grad_tol: cfg.grad_tol,
                center: true,
                seed: cfg.seed,
            };
            solve_frob_lowrank(train, fx, fy, r, lambda, &opts)?
        }
    };
    let preds = model.predict_all(test)?;
    Ok((rmse(&preds, &test.targets())?, report.rank))
}

fn tune(sc: &mut SolveConfig, cfg: &ExperimentConfig) {
    sc.grad_tol = cfg.grad_tol;
    sc.max_iter = cfg.max_iter;
    sc.delta_rank = cfg.delta_rank;
    sc.r_max = cfg.r_max;
    sc.seed = cfg.seed;
}

fn side_factor(
    side: Side,
    weight: f64,
    family: AttrKernel,
    attrs: &AttributeMatrix,
    n: usize,
) -> Result<GramFactor> {
    let family = (weight > 0.0).then_some(family);
    let spec = KernelSpec::new(side, weight, family, None)?;
    let gram = spec.build_gram(n, Some(attrs))?;
    factor_gram(&gram, FACTOR_TOL)
}

fn mean_std(scores: &[f64]) -> (f64, f64) {
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
    (mean, var.sqrt())
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("worker pool");
    pool.install(f)
}

fn write_out(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, content)?;
    Ok(())
}

/// Generates the configured synthetic dataset and writes it under `cfg.out`
/// (a directory): 1-based tab-separated `ratings.tsv` plus `users.csv` and
/// `items.csv` attribute sidecars. Returns the three paths.
pub fn run_synth_gen(cfg: &ExperimentConfig) -> Result<[PathBuf; 3]> {
    let mut sc = cfg.synth;
    sc.seed = cfg.seed;
    let (d, users, items, _) = synth_generate(&sc)?;
    fs::create_dir_all(&cfg.out)?;
    let paths = [
        cfg.out.join("ratings.tsv"),
        cfg.out.join("users.csv"),
        cfg.out.join("items.csv"),
    ];
    write_triplets(&paths[0], &d)?;
    write_attributes_csv(&paths[1], &users)?;
    write_attributes_csv(&paths[2], &items)?;
    Ok(paths)
}

/// One named certification check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertifyOutcome {
    pub name: String,
    pub pass: bool,
}

/// Runs the reference-equivalence suite on seeded random instances: the
/// full-space vs reduced-space solves at three kernel mixes, the fixed-rank
/// solver against the convex reference, singular-value projection dominance,
/// and Gram-root invariance.
pub fn run_certify(seed: u64) -> Result<Vec<CertifyOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mixes = [
        ("reduction equivalence, identity kernels", 0.0, 0.0),
        ("reduction equivalence, mixed kernels", 0.5, 0.5),
        ("reduction equivalence, attribute kernels", 1.0, 1.0),
    ];
    let mut last = None;
    for (name, eta, zeta) in mixes {
        let (d, k, g) = random_instance(&mut rng, 8, 7, 20, eta, zeta)?;
        let pass = representer_equivalence_check(&d, &k, &g, 0.05)?;
        out.push(CertifyOutcome {
            name: name.into(),
            pass,
        });
        last = Some((d, k, g));
    }
    let (d, k, g) = last.expect("three mixes ran");
    out.push(CertifyOutcome {
        name: "fixed-rank solver matches the convex reference".into(),
        pass: lowrank_equivalence_check(&d, &k, &g, 2, 0.05, 4, seed)?,
    });
    let mut projections_ok = true;
    for trial in 0..20 {
        let f = DMatrix::from_fn(6, 5, |_, _| rng.random_range(-1.0..1.0));
        for dim in 0..=6 {
            projections_ok &= projection_lemma_check(&f, dim, seed.wrapping_add(trial))?;
        }
    }
    out.push(CertifyOutcome {
        name: "singular-value projection dominance, 20 trials".into(),
        pass: projections_ok,
    });
    let mut invariance_ok = true;
    for (dx, dy) in [(6, 6), (3, 2)] {
        let ua = AttributeMatrix::new(DMatrix::from_fn(7, dx, |_, _| rng.random_range(-1.0..1.0)))?;
        let oa = AttributeMatrix::new(DMatrix::from_fn(6, dy, |_, _| rng.random_range(-1.0..1.0)))?;
        let k = linear_gram(&ua.l2_normalized())?;
        let g = linear_gram(&oa.l2_normalized())?;
        let b = DMatrix::from_fn(7, 6, |_, _| rng.random_range(-1.0..1.0));
        invariance_ok &= kron_invariance_check(&k, &g, &b)?;
    }
    out.push(CertifyOutcome {
        name: "gram-root invariance, full and deficient rank".into(),
        pass: invariance_ok,
    });
    Ok(out)
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    n_x: usize,
    n_y: usize,
    n_obs: usize,
    eta: f64,
    zeta: f64,
) -> Result<(RatingsDataset, GramMatrix, GramMatrix)> {
    let ua = AttributeMatrix::new(DMatrix::from_fn(n_x, 3, |_, _| rng.random_range(-1.0..1.0)))?
        .l2_normalized();
    let oa = AttributeMatrix::new(DMatrix::from_fn(n_y, 2, |_, _| rng.random_range(-1.0..1.0)))?
        .l2_normalized();
    let k = combine(&linear_gram(&ua)?, &dirac_gram(n_x)?, eta)?;
    let g = combine(&linear_gram(&oa)?, &dirac_gram(n_y)?, zeta)?;
    let mut cells: Vec<usize> = (0..n_x * n_y).collect();
    let (picked, _) = cells.partial_shuffle(rng, n_obs);
    let obs: Vec<(usize, usize, f64)> = picked
        .iter()
        .map(|&c| (c / n_y, c % n_y, rng.random_range(-1.5..1.5)))
        .collect();
    Ok((RatingsDataset::new(obs, n_x, n_y)?, k, g))
}
