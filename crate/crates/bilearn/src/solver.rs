//! First-order minimization of `mean loss + lambda * spectral penalty` over
//! factored coefficients `alpha = U V^T`, with incremental rank escalation.
//!
//! The factor width starts small and grows one column at a time: a local
//! minimum whose factors are rank deficient certifies that widening cannot
//! help, so the solve stops there; otherwise a fresh near-zero column is
//! appended and optimization resumes. The same engine drives a bank of
//! several kernel pairs at once (the multiple-kernel setting), where the
//! prediction is the sum over blocks and the penalty the sum of per-block
//! penalties. Duality gaps certify solutions of the convex penalties.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::GramFactor;
use crate::losses::{loss_conjugate, loss_eval, loss_grad, LossKind, LossSpec};
use crate::model::{Coeffs, OperatorModel, RatingsDataset};
use crate::penalties::{
    penalty_conjugate, penalty_eval, scalar_deriv, PenaltyKind, PenaltySpec, Spectrum,
};

/// Knobs for one solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    /// Regularization weight; `0` is allowed and means pure risk minimization.
    pub lambda: f64,
    pub penalty: PenaltySpec,
    pub loss: LossKind,
    /// Initial factor width.
    pub r0: usize,
    /// Width cap; `0` means `min(m_x, m_y)`.
    pub r_max: usize,
    /// Stop a stage when the gradient norm falls below this times `1 + |objective|`.
    pub grad_tol: f64,
    /// Iteration cap per rank stage.
    pub max_iter: usize,
    /// Rank-deficiency threshold, relative to the factor scale.
    pub delta_rank: f64,
    /// Center ratings by their training mean before solving.
    pub center: bool,
    pub seed: u64,
}

impl SolveConfig {
    pub fn new(lambda: f64, penalty: PenaltySpec, loss: LossKind) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParam(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self {
            lambda,
            penalty,
            loss,
            r0: 1,
            r_max: 0,
            grad_tol: 1e-6,
            max_iter: 500,
            delta_rank: 1e-6,
            center: true,
            seed: 0,
        })
    }

    /// Smoothed-trace config with the default sharpness `1e-3` times the
    /// mean absolute rating of `d`.
    pub fn smoothed_trace_for(lambda: f64, d: &RatingsDataset) -> Result<Self> {
        let eps = 1e-3 * d.rating_scale();
        Self::new(
            lambda,
            PenaltySpec::new(PenaltyKind::SmoothTrace(eps))?,
            LossKind::Squared,
        )
    }

    pub(crate) fn validate(&self, m_x: usize, m_y: usize) -> Result<usize> {
        if !(self.grad_tol > 0.0) || !(self.delta_rank > 0.0) {
            return Err(Error::InvalidParam("tolerances must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParam("max_iter must be >= 1".into()));
        }
        let cap = m_x.min(m_y);
        let r_max = if self.r_max == 0 {
            cap
        } else {
            self.r_max.min(cap)
        };
        if self.r0 < 1 || self.r0 > r_max {
            return Err(Error::InvalidParam(format!(
                "initial rank {} outside [1, {r_max}]",
                self.r0
            )));
        }
        Ok(r_max)
    }
}

/// Outcome summary of one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Final objective value of the problem actually optimized
    /// (centered targets when centering is on).
    pub objective: f64,
    /// Final factor width (largest across blocks for multi-block solves).
    pub rank: usize,
    /// Accepted iterations per rank stage.
    pub stage_iterations: Vec<usize>,
    /// Duality gap at the solution when the penalty admits one.
    pub gap: Option<f64>,
    pub wall_seconds: f64,
    /// True when optimization stopped at the width cap while escalation
    /// still wanted to widen some block.
    pub hit_rank_cap: bool,
    /// True when every block terminated rank deficient (the escalation
    /// certificate of global optimality for convex penalties).
    pub rank_deficient: bool,
    /// Trace norm of each block's coefficient matrix.
    pub block_trace_norms: Vec<f64>,
}

/// Objective for dense coefficients: `mean loss + lambda * penalty(spectrum)`.
pub fn objective_dense(
    alpha: &DMatrix<f64>,
    d: &RatingsDataset,
    xf: &GramFactor,
    yf: &GramFactor,
    cfg: &SolveConfig,
) -> Result<f64> {
    check_shapes(d, xf, yf)?;
    if alpha.nrows() != xf.m() || alpha.ncols() != yf.m() {
        return Err(Error::DimMismatch(format!(
            "alpha {}x{} vs factor widths {} and {}",
            alpha.nrows(),
            alpha.ncols(),
            xf.m(),
            yf.m()
        )));
    }
    let losses = loss_specs(d, cfg.loss)?;
    let left = xf.x() * alpha;
    let y = yf.x();
    let mut acc = 0.0;
    for (i, &(a, b, _)) in d.observations().iter().enumerate() {
        acc += loss_eval(&losses[i], left.row(a).dot(&y.row(b)));
    }
    let risk = acc / d.len() as f64;
    if cfg.lambda == 0.0 {
        return Ok(risk);
    }
    let svd = alpha.clone().svd(false, false);
    let spectrum = Spectrum::new(svd.singular_values.iter().cloned().collect())?;
    Ok(risk + cfg.lambda * penalty_eval(&cfg.penalty, &spectrum))
}

/// Objective for factored coefficients `alpha = u v^T`; singular values come
/// from thin QR of the factors followed by an `r x r` SVD, never from the
/// dense product.
pub fn objective_factored(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    d: &RatingsDataset,
    xf: &GramFactor,
    yf: &GramFactor,
    cfg: &SolveConfig,
) -> Result<f64> {
    let p = problem_for(d, xf, yf, cfg)?;
    let state = vec![(u.clone(), v.clone())];
    check_factor_shapes(&p, &state)?;
    p.objective(&state)
}

/// Gradient of [`objective_factored`] in `(u, v)`; defined for smooth
/// penalties (smooth trace, Frobenius, Frobenius within a rank cap).
pub fn gradient(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    d: &RatingsDataset,
    xf: &GramFactor,
    yf: &GramFactor,
    cfg: &SolveConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = problem_for(d, xf, yf, cfg)?;
    p.require_smooth()?;
    let state = vec![(u.clone(), v.clone())];
    check_factor_shapes(&p, &state)?;
    let g = p.gradient(&state)?;
    let (gu, gv) = g.into_iter().next().expect("one block");
    Ok((gu, gv))
}

/// Minimizes over a single kernel pair with rank escalation; returns the
/// trained model (factored coefficients) and a report. The rating mean is
/// removed before solving when `cfg.center` is set and restored at
/// prediction time through the model.
pub fn solve_lowrank(
    d: &RatingsDataset,
    xf: &GramFactor,
    yf: &GramFactor,
    cfg: &SolveConfig,
) -> Result<(OperatorModel, SolveReport)> {
    check_shapes(d, xf, yf)?;
    let mean = if cfg.center { d.mean_rating() } else { 0.0 };
    let centered = d.with_shifted_targets(-mean);
    let p = BlockProblem::new(vec![xf.x()], vec![yf.x()], &centered, cfg)?;
    p.require_smooth()?;
    let (mut blocks, mut report) = run_escalation(&p, cfg)?;
    let (u, v) = blocks.pop().expect("one block");
    let model = OperatorModel::new(xf.clone(), yf.clone(), Coeffs::Factored { u, v }, mean)?;
    report.gap = certificate_gap(&model, d, cfg);
    Ok((model, report))
}

/// One `(U, V)` coefficient pair per kernel block.
pub(crate) type FactorPairs = Vec<(DMatrix<f64>, DMatrix<f64>)>;

/// Multi-block escalation solve over a bank of factor pairs; predictions sum
/// across blocks and the penalty is summed per block. Returns one `(U, V)`
/// pair per block. Exposed for the kernel-learning layer.
pub(crate) fn solve_blocks(
    xs: Vec<&DMatrix<f64>>,
    ys: Vec<&DMatrix<f64>>,
    d: &RatingsDataset,
    cfg: &SolveConfig,
) -> Result<(FactorPairs, SolveReport)> {
    let p = BlockProblem::new(xs, ys, d, cfg)?;
    p.require_smooth()?;
    run_escalation(&p, cfg)
}

/// Options for the column-product low-rank baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrobLowRankOpts {
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub center: bool,
    pub seed: u64,
}

impl Default for FrobLowRankOpts {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iter: 500,
            grad_tol: 1e-6,
            center: true,
            seed: 0,
        }
    }
}

/// Fixed-rank baseline with the column-wise product penalty
/// `lambda * sum_k \|U(:,k)\|^2 \|V(:,k)\|^2`; multiple random restarts,
/// keeping the best local minimum.
pub fn solve_frob_lowrank(
    d: &RatingsDataset,
    xf: &GramFactor,
    yf: &GramFactor,
    r: usize,
    lambda: f64,
    opts: &FrobLowRankOpts,
) -> Result<(OperatorModel, SolveReport)> {
    check_shapes(d, xf, yf)?;
    if r < 1 || r > xf.m().min(yf.m()) {
        return Err(Error::InvalidParam(format!(
            "rank {r} outside [1, {}]",
            xf.m().min(yf.m())
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParam(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    if opts.restarts == 0 {
        return Err(Error::InvalidParam("need at least one restart".into()));
    }
    let start = std::time::Instant::now();
    let mean = if opts.center { d.mean_rating() } else { 0.0 };
    let centered = d.with_shifted_targets(-mean);
    let losses = loss_specs(&centered, LossKind::Squared)?;
    let scale = centered.rating_scale().sqrt();
    let mut best: Option<(f64, DMatrix<f64>, DMatrix<f64>, usize)> = None;
    for restart in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(restart as u64));
        let init_amp = 0.1 * scale / (r as f64).sqrt();
        let mut u = random_matrix(&mut rng, xf.m(), r, init_amp);
        let mut v = random_matrix(&mut rng, yf.m(), r, init_amp);
        let objective = |uu: &DMatrix<f64>, vv: &DMatrix<f64>| -> f64 {
            let mut preds = vec![0.0; centered.len()];
            accumulate_predictions(xf.x(), yf.x(), uu, vv, centered.observations(), &mut preds);
            let risk: f64 = preds
                .iter()
                .zip(&losses)
                .map(|(&p, l)| loss_eval(l, p))
                .sum::<f64>()
                / centered.len() as f64;
            let pen: f64 = (0..r)
                .map(|k| uu.column(k).norm_squared() * vv.column(k).norm_squared())
                .sum();
            risk + lambda * pen
        };
        let mut f0 = objective(&u, &v);
        let mut step: f64 = 1.0;
        let mut iters = 0usize;
        let mut stall = 0usize;
        for _ in 0..opts.max_iter {
            let mut preds = vec![0.0; centered.len()];
            accumulate_predictions(xf.x(), yf.x(), &u, &v, centered.observations(), &mut preds);
            let g: Vec<f64> = preds
                .iter()
                .zip(&losses)
                .map(|(&p, l)| loss_grad(l, p) / centered.len() as f64)
                .collect();
            let (mut gu, mut gv) =
                loss_gradient_uv(xf.x(), yf.x(), &u, &v, centered.observations(), &g);
            for k in 0..r {
                let un = u.column(k).norm_squared();
                let vn = v.column(k).norm_squared();
                let mut cu = gu.column_mut(k);
                cu += u.column(k) * (2.0 * lambda * vn);
                let mut cv = gv.column_mut(k);
                cv += v.column(k) * (2.0 * lambda * un);
            }
            let gnorm2 = gu.norm_squared() + gv.norm_squared();
            if gnorm2.sqrt() <= opts.grad_tol * (1.0 + f0.abs()) {
                break;
            }
            let mut t = (step * 2.0).min(1e6);
            let mut accepted = false;
            while t > 1e-18 {
                let ut = &u - &gu * t;
                let vt = &v - &gv * t;
                let f1 = objective(&ut, &vt);
                if f1.is_finite() && f1 <= f0 - 1e-4 * t * gnorm2 {
                    if (f0 - f1).abs() <= 1e-12 * (1.0 + f0.abs()) {
                        stall += 1;
                    } else {
                        stall = 0;
                    }
                    u = ut;
                    v = vt;
                    f0 = f1;
                    step = t;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            iters += 1;
            if stall >= 15 {
                break;
            }
        }
        if !f0.is_finite() {
            return Err(Error::Numerical(format!(
                "column-product solve diverged on restart {restart}"
            )));
        }
        if best.as_ref().is_none_or(|(bf, ..)| f0 < *bf) {
            best = Some((f0, u, v, iters));
        }
    }
    let (objective, u, v, iters) = best.expect("at least one restart ran");
    let trace = factored_spectrum(&u, &v)?.values().iter().sum();
    let model = OperatorModel::new(xf.clone(), yf.clone(), Coeffs::Factored { u, v }, mean)?;
    let report = SolveReport {
        objective,
        rank: r,
        stage_iterations: vec![iters],
        gap: None,
        wall_seconds: start.elapsed().as_secs_f64(),
        hit_rank_cap: false,
        rank_deficient: false,
        block_trace_norms: vec![trace],
    };
    Ok((model, report))
}

/// Primal objective minus the Fenchel dual objective at the dual candidate
/// built from the model's residuals. Supports the trace and Frobenius
/// penalties (the two with exact conjugates in the dual). Non-negative up to
/// roundoff; small values certify near-optimality of the convex problem.
pub fn duality_gap(m: &OperatorModel, d: &RatingsDataset, cfg: &SolveConfig) -> Result<f64> {
    if !matches!(
        cfg.penalty.kind,
        PenaltyKind::Trace | PenaltyKind::Frobenius
    ) {
        return Err(Error::UnsupportedPenalty(
            "duality gap requires the trace or frobenius penalty".into(),
        ));
    }
    if !(cfg.lambda > 0.0) {
        return Err(Error::InvalidParam(
            "duality gap requires lambda > 0".into(),
        ));
    }
    if d.n_x() != m.xfactor().n() || d.n_y() != m.yfactor().n() {
        return Err(Error::DimMismatch(
            "dataset entities do not match the model factors".into(),
        ));
    }
    let n = d.len() as f64;
    let centered = d.with_shifted_targets(-m.mean());
    let losses = loss_specs(&centered, cfg.loss)?;
    let alpha = m.alpha_dense();
    let left = m.xfactor().x() * &alpha;
    let y = m.yfactor().x();
    let preds: Vec<f64> = centered
        .observations()
        .iter()
        .map(|&(a, b, _)| left.row(a).dot(&y.row(b)))
        .collect();
    let risk: f64 = preds
        .iter()
        .zip(&losses)
        .map(|(&p, l)| loss_eval(l, p))
        .sum::<f64>()
        / n;
    let svd = alpha.clone().svd(false, false);
    let spectrum = Spectrum::new(svd.singular_values.iter().cloned().collect())?;
    let primal = risk + cfg.lambda * penalty_eval(&cfg.penalty, &spectrum);

    // dual candidate from the primal residuals: beta_i = psi_i'(v_i) / N
    let mut beta: Vec<f64> = preds
        .iter()
        .zip(&losses)
        .map(|(&p, l)| loss_grad(l, p) / n)
        .collect();
    let dual_matrix = |beta: &[f64]| -> DMatrix<f64> {
        let mut s = DMatrix::zeros(d.n_x(), d.n_y());
        for (i, &(a, b, _)) in centered.observations().iter().enumerate() {
            s[(a, b)] += beta[i];
        }
        m.xfactor().x().transpose() * s * m.yfactor().x() * (-1.0 / cfg.lambda)
    };
    let b = dual_matrix(&beta);
    let bsvd = b.svd(false, false);
    let mut bvals: Vec<f64> = bsvd.singular_values.iter().cloned().collect();
    if cfg.penalty.kind == PenaltyKind::Trace {
        // scale the candidate into the unit spectral ball so the conjugate is
        // finite; the clamp absorbs the roundoff of the rescale itself
        let top = bvals.first().copied().unwrap_or(0.0);
        if top > 1.0 {
            let c = 1.0 / top;
            for bi in beta.iter_mut() {
                *bi *= c;
            }
            for s in bvals.iter_mut() {
                *s = (*s * c).min(1.0);
            }
        }
    }
    let bspec = Spectrum::new(bvals)?;
    let conj_pen = penalty_conjugate(&cfg.penalty, &bspec);
    let mut conj_loss = 0.0;
    for (i, l) in losses.iter().enumerate() {
        let c = loss_conjugate(l, n * beta[i]);
        if !c.is_finite() {
            return Err(Error::Numerical(
                "dual candidate left the loss conjugate domain".into(),
            ));
        }
        conj_loss += c / n;
    }
    let dual = -conj_loss - cfg.lambda * conj_pen;
    Ok(primal - dual)
}

// ---------------------------------------------------------------------------
// engine internals

struct BlockProblem<'a> {
    xs: Vec<&'a DMatrix<f64>>,
    ys: Vec<&'a DMatrix<f64>>,
    obs: &'a [(usize, usize, f64)],
    losses: Vec<LossSpec>,
    lambda: f64,
    penalty: PenaltySpec,
    n: f64,
    scale: f64,
}

impl<'a> BlockProblem<'a> {
    fn new(
        xs: Vec<&'a DMatrix<f64>>,
        ys: Vec<&'a DMatrix<f64>>,
        d: &'a RatingsDataset,
        cfg: &SolveConfig,
    ) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::DimMismatch(
                "need the same nonzero number of factors on both sides".into(),
            ));
        }
        for (x, y) in xs.iter().zip(&ys) {
            if x.nrows() != d.n_x() || y.nrows() != d.n_y() {
                return Err(Error::DimMismatch(format!(
                    "factor over {}x{} entities, dataset over {}x{}",
                    x.nrows(),
                    y.nrows(),
                    d.n_x(),
                    d.n_y()
                )));
            }
        }
        Ok(Self {
            xs,
            ys,
            obs: d.observations(),
            losses: loss_specs(d, cfg.loss)?,
            lambda: cfg.lambda,
            penalty: cfg.penalty,
            n: d.len() as f64,
            scale: d.rating_scale(),
        })
    }

    fn require_smooth(&self) -> Result<()> {
        if self.lambda > 0.0 && scalar_deriv(&self.penalty, 1.0).is_err() {
            return Err(Error::UnsupportedPenalty(format!(
                "{:?} cannot drive the first-order solver; use its smooth counterpart",
                self.penalty.kind
            )));
        }
        Ok(())
    }

    fn predictions(&self, state: &[(DMatrix<f64>, DMatrix<f64>)]) -> Vec<f64> {
        let mut v = vec![0.0; self.obs.len()];
        for (k, (u, vv)) in state.iter().enumerate() {
            accumulate_predictions(self.xs[k], self.ys[k], u, vv, self.obs, &mut v);
        }
        v
    }

    fn objective(&self, state: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<f64> {
        let preds = self.predictions(state);
        let mut acc = 0.0;
        for (p, l) in preds.iter().zip(&self.losses) {
            acc += loss_eval(l, *p);
        }
        let mut total = acc / self.n;
        if self.lambda > 0.0 {
            for (u, v) in state {
                let spectrum = factored_spectrum(u, v)?;
                total += self.lambda * penalty_eval(&self.penalty, &spectrum);
            }
        }
        Ok(total)
    }

    fn gradient(
        &self,
        state: &[(DMatrix<f64>, DMatrix<f64>)],
    ) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
        let preds = self.predictions(state);
        let g: Vec<f64> = preds
            .iter()
            .zip(&self.losses)
            .map(|(&p, l)| loss_grad(l, p) / self.n)
            .collect();
        let mut out = Vec::with_capacity(state.len());
        for (k, (u, v)) in state.iter().enumerate() {
            let (mut gu, mut gv) = loss_gradient_uv(self.xs[k], self.ys[k], u, v, self.obs, &g);
            if self.lambda > 0.0 {
                let (pu, pv) = spectral_gradient_uv(u, v, &self.penalty)?;
                gu += pu * self.lambda;
                gv += pv * self.lambda;
            }
            out.push((gu, gv));
        }
        Ok(out)
    }
}

fn run_escalation(p: &BlockProblem<'_>, cfg: &SolveConfig) -> Result<(FactorPairs, SolveReport)> {
    let start = std::time::Instant::now();
    let mut r_max = usize::MAX;
    for (x, y) in p.xs.iter().zip(&p.ys) {
        r_max = r_max.min(cfg.validate(x.ncols(), y.ncols())?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init_amp = 1e-3 * p.scale.sqrt().max(f64::MIN_POSITIVE);
    let mut state: Vec<(DMatrix<f64>, DMatrix<f64>)> =
        p.xs.iter()
            .zip(&p.ys)
            .map(|(x, y)| {
                (
                    random_matrix(&mut rng, x.ncols(), cfg.r0, init_amp),
                    random_matrix(&mut rng, y.ncols(), cfg.r0, init_amp),
                )
            })
            .collect();
    let mut stage_iterations = Vec::new();
    let mut hit_rank_cap = false;
    let rank_deficient;
    loop {
        let iters = minimize_stage(p, cfg, &mut state)?;
        stage_iterations.push(iters);
        let deficient: Vec<bool> = state
            .iter()
            .map(|(u, v)| factor_pair_deficient(u, v, cfg.delta_rank, p.scale))
            .collect();
        if deficient.iter().all(|&b| b) {
            rank_deficient = true;
            break;
        }
        let mut grew = false;
        let mut capped = false;
        for (k, (u, v)) in state.iter_mut().enumerate() {
            if deficient[k] {
                continue;
            }
            if u.ncols() >= r_max {
                capped = true;
                continue;
            }
            append_column(u, &mut rng, init_amp);
            append_column(v, &mut rng, init_amp);
            grew = true;
        }
        if !grew {
            hit_rank_cap = capped;
            rank_deficient = false;
            break;
        }
    }
    let objective = p.objective(&state)?;
    if !objective.is_finite() {
        return Err(Error::Numerical(format!(
            "objective became non-finite at rank {}",
            state.iter().map(|(u, _)| u.ncols()).max().unwrap_or(0)
        )));
    }
    let mut block_trace_norms = Vec::with_capacity(state.len());
    for (u, v) in &state {
        block_trace_norms.push(factored_spectrum(u, v)?.values().iter().sum());
    }
    let report = SolveReport {
        objective,
        rank: state.iter().map(|(u, _)| u.ncols()).max().unwrap_or(0),
        stage_iterations,
        gap: None,
        wall_seconds: start.elapsed().as_secs_f64(),
        hit_rank_cap,
        rank_deficient,
        block_trace_norms,
    };
    Ok((state, report))
}

/// Armijo-backtracked gradient descent until the stage converges; the
/// objective never increases across accepted iterations.
fn minimize_stage(
    p: &BlockProblem<'_>,
    cfg: &SolveConfig,
    state: &mut Vec<(DMatrix<f64>, DMatrix<f64>)>,
) -> Result<usize> {
    let mut f0 = p.objective(state)?;
    if !f0.is_finite() {
        return Err(Error::Numerical(
            "objective non-finite at stage start".into(),
        ));
    }
    let mut step: f64 = 1.0;
    let mut iters = 0usize;
    let mut stall = 0usize;
    for _ in 0..cfg.max_iter {
        let grads = p.gradient(state)?;
        let gnorm2: f64 = grads
            .iter()
            .map(|(gu, gv)| gu.norm_squared() + gv.norm_squared())
            .sum();
        if gnorm2.sqrt() <= cfg.grad_tol * (1.0 + f0.abs()) {
            break;
        }
        let mut t = (step * 2.0).min(1e6);
        let mut accepted = false;
        while t > 1e-18 {
            let trial: Vec<(DMatrix<f64>, DMatrix<f64>)> = state
                .iter()
                .zip(&grads)
                .map(|((u, v), (gu, gv))| (u - gu * t, v - gv * t))
                .collect();
            let f1 = p.objective(&trial)?;
            if f1.is_finite() && f1 <= f0 - 1e-4 * t * gnorm2 {
                if f1 > f0 {
                    return Err(Error::Numerical(
                        "line search accepted an ascent step".into(),
                    ));
                }
                if (f0 - f1).abs() <= 1e-12 * (1.0 + f0.abs()) {
                    stall += 1;
                } else {
                    stall = 0;
                }
                *state = trial;
                f0 = f1;
                step = t;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        iters += 1;
        if stall >= 15 {
            break;
        }
    }
    Ok(iters)
}

fn check_shapes(d: &RatingsDataset, xf: &GramFactor, yf: &GramFactor) -> Result<()> {
    if xf.n() != d.n_x() || yf.n() != d.n_y() {
        return Err(Error::DimMismatch(format!(
            "dataset over {}x{} entities, factors over {}x{}",
            d.n_x(),
            d.n_y(),
            xf.n(),
            yf.n()
        )));
    }
    Ok(())
}

fn check_factor_shapes(p: &BlockProblem<'_>, state: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<()> {
    for (k, (u, v)) in state.iter().enumerate() {
        if u.nrows() != p.xs[k].ncols() || v.nrows() != p.ys[k].ncols() {
            return Err(Error::DimMismatch(format!(
                "factor block {k}: U has {} rows for width {}, V has {} rows for width {}",
                u.nrows(),
                p.xs[k].ncols(),
                v.nrows(),
                p.ys[k].ncols()
            )));
        }
        if u.ncols() != v.ncols() {
            return Err(Error::DimMismatch(format!(
                "factor block {k}: U and V widths differ ({} vs {})",
                u.ncols(),
                v.ncols()
            )));
        }
    }
    Ok(())
}

fn problem_for<'a>(
    d: &'a RatingsDataset,
    xf: &'a GramFactor,
    yf: &'a GramFactor,
    cfg: &SolveConfig,
) -> Result<BlockProblem<'a>> {
    check_shapes(d, xf, yf)?;
    BlockProblem::new(vec![xf.x()], vec![yf.x()], d, cfg)
}

fn loss_specs(d: &RatingsDataset, kind: LossKind) -> Result<Vec<LossSpec>> {
    d.observations()
        .iter()
        .map(|&(_, _, t)| LossSpec::new(kind, t))
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-amp..=amp))
}

fn append_column(m: &mut DMatrix<f64>, rng: &mut ChaCha8Rng, amp: f64) {
    let rows = m.nrows();
    let cols = m.ncols();
    let mut grown = DMatrix::zeros(rows, cols + 1);
    grown.view_mut((0, 0), (rows, cols)).copy_from(m);
    for i in 0..rows {
        grown[(i, cols)] = rng.random_range(-amp..=amp);
    }
    *m = grown;
}

/// Singular values of `u v^T` via thin QR of both factors and an `r x r` SVD.
pub(crate) fn factored_spectrum(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Spectrum> {
    let (_, ru) = thin_qr(u);
    let (_, rv) = thin_qr(v);
    let core = ru * rv.transpose();
    let svd = core.svd(false, false);
    Spectrum::new(svd.singular_values.iter().cloned().collect())
}

fn thin_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = m.clone().qr();
    (qr.q(), qr.r())
}

/// Gradient of `lambda`-free spectral penalty term of `W = U V^T` in `(U, V)`:
/// with `W = P diag(sigma) Q^T`, the matrix gradient is `P diag(s'(sigma)) Q^T`
/// and the chain rule gives `(grad W) V` and `(grad W)^T U`. Everything is
/// computed in the `r x r` core of the thin QR factors.
fn spectral_gradient_uv(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    penalty: &PenaltySpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (qu, ru) = thin_qr(u);
    let (qv, rv) = thin_qr(v);
    let core = &ru * rv.transpose();
    let svd = core.svd(true, true);
    let pc = svd.u.expect("requested");
    let qct = svd.v_t.expect("requested");
    let r = svd.singular_values.len();
    let mut d = DMatrix::zeros(r, r);
    for i in 0..r {
        d[(i, i)] = scalar_deriv(penalty, svd.singular_values[i])?;
    }
    // Q^T V = Qc^T (Qv^T Qv) Rv = Qc^T Rv, and P^T U = Pc^T Ru
    let gu = &qu * (&pc * &d * (&qct * &rv));
    let gv = &qv * (qct.transpose() * (&d * (pc.transpose() * &ru)));
    Ok((gu, gv))
}

/// Loss part of the factored gradient: `X^T S (Y V)` and `Y^T S^T (X U)`
/// with `S` the sparse residual matrix, never materialized densely.
fn loss_gradient_uv(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    obs: &[(usize, usize, f64)],
    g: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = u.ncols();
    let a = (x * u).transpose(); // r x n_x, columns are entity rows
    let b = (y * v).transpose(); // r x n_y
    let mut tx = DMatrix::zeros(r, x.nrows()); // accumulates S (Y V), transposed
    let mut ty = DMatrix::zeros(r, y.nrows()); // accumulates S^T (X U), transposed
    for (i, &(ai, bi, _)) in obs.iter().enumerate() {
        let gi = g[i];
        {
            let src = b.column(bi);
            let mut dst = tx.column_mut(ai);
            dst.axpy(gi, &src, 1.0);
        }
        {
            let src = a.column(ai);
            let mut dst = ty.column_mut(bi);
            dst.axpy(gi, &src, 1.0);
        }
    }
    let gu = x.transpose() * tx.transpose();
    let gv = y.transpose() * ty.transpose();
    (gu, gv)
}

/// Adds `sum_k (X U)_a . (Y V)_b` for each observation into `out`.
fn accumulate_predictions(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    obs: &[(usize, usize, f64)],
    out: &mut [f64],
) {
    let a = (x * u).transpose(); // r x n_x, contiguous per-entity columns
    let b = (y * v).transpose();
    for (slot, &(ai, bi, _)) in out.iter_mut().zip(obs) {
        *slot += a.column(ai).dot(&b.column(bi));
    }
}

fn factor_pair_deficient(u: &DMatrix<f64>, v: &DMatrix<f64>, delta: f64, t_scale: f64) -> bool {
    let su = thin_qr(u).1.svd(false, false).singular_values;
    let sv = thin_qr(v).1.svd(false, false).singular_values;
    let smallest = su[su.len() - 1].min(sv[sv.len() - 1]);
    let reference = su[0].max(sv[0]).max(t_scale.sqrt());
    smallest < delta * reference
}

/// Gap certificate matching the penalty the solve used: smoothed-trace
/// solves are certified against the exact trace-norm problem, Frobenius
/// solves against themselves; other penalties carry no certificate.
fn certificate_gap(m: &OperatorModel, d: &RatingsDataset, cfg: &SolveConfig) -> Option<f64> {
    if !(cfg.lambda > 0.0) {
        return None;
    }
    let kind = match cfg.penalty.kind {
        PenaltyKind::SmoothTrace(_) | PenaltyKind::Trace => PenaltyKind::Trace,
        PenaltyKind::Frobenius => PenaltyKind::Frobenius,
        _ => return None,
    };
    let mut gap_cfg = *cfg;
    gap_cfg.penalty = PenaltySpec::new(kind).ok()?;
    duality_gap(m, d, &gap_cfg).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalties::PenaltyKind;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_factor(rng: &mut ChaCha8Rng, n: usize, m: usize) -> GramFactor {
        GramFactor::from_matrix(random_matrix(rng, n, m, 1.0)).unwrap()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n_x: usize, n_y: usize, n: usize) -> RatingsDataset {
        let mut seen = std::collections::HashSet::new();
        let mut obs = Vec::new();
        while obs.len() < n {
            let a = rng.random_range(0..n_x);
            let b = rng.random_range(0..n_y);
            if seen.insert((a, b)) {
                obs.push((a, b, rng.random_range(-1.5..1.5)));
            }
        }
        RatingsDataset::new(obs, n_x, n_y).unwrap()
    }

    fn cfg_with(lambda: f64, kind: PenaltyKind) -> SolveConfig {
        SolveConfig::new(lambda, PenaltySpec::new(kind).unwrap(), LossKind::Squared).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(7);
        let xf = random_factor(&mut r, 5, 4);
        let yf = random_factor(&mut r, 6, 3);
        for kind in [
            PenaltyKind::SmoothTrace(0.05),
            PenaltyKind::Frobenius,
            PenaltyKind::FrobeniusPlusRank(2),
        ] {
            let d = random_dataset(&mut r, 5, 6, 12);
            let cfg = cfg_with(0.1, kind);
            let u0 = random_matrix(&mut r, 4, 2, 0.8);
            let v0 = random_matrix(&mut r, 3, 2, 0.8);
            let (gu, gv) = gradient(&u0, &v0, &d, &xf, &yf, &cfg).unwrap();
            let h = 1e-5;
            let scale = 1.0 + gu.amax().max(gv.amax());
            for i in 0..u0.nrows() {
                for j in 0..u0.ncols() {
                    let mut up = u0.clone();
                    let mut um = u0.clone();
                    up[(i, j)] += h;
                    um[(i, j)] -= h;
                    let fd = (objective_factored(&up, &v0, &d, &xf, &yf, &cfg).unwrap()
                        - objective_factored(&um, &v0, &d, &xf, &yf, &cfg).unwrap())
                        / (2.0 * h);
                    assert!(
                        (fd - gu[(i, j)]).abs() <= 1e-5 * scale,
                        "{kind:?} dU({i},{j}): fd {fd} vs {}",
                        gu[(i, j)]
                    );
                }
            }
            for i in 0..v0.nrows() {
                for j in 0..v0.ncols() {
                    let mut vp = v0.clone();
                    let mut vm = v0.clone();
                    vp[(i, j)] += h;
                    vm[(i, j)] -= h;
                    let fd = (objective_factored(&u0, &vp, &d, &xf, &yf, &cfg).unwrap()
                        - objective_factored(&u0, &vm, &d, &xf, &yf, &cfg).unwrap())
                        / (2.0 * h);
                    assert!(
                        (fd - gv[(i, j)]).abs() <= 1e-5 * scale,
                        "{kind:?} dV({i},{j}): fd {fd} vs {}",
                        gv[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn frobenius_spectral_gradient_matches_closed_form() {
        let mut r = rng(11);
        let u = random_matrix(&mut r, 6, 3, 1.0);
        let v = random_matrix(&mut r, 5, 3, 1.0);
        let spec = PenaltySpec::new(PenaltyKind::Frobenius).unwrap();
        let (gu, gv) = spectral_gradient_uv(&u, &v, &spec).unwrap();
        // for sum of squared singular values the matrix gradient of u v^T is
        // 2 u v^T, so d/du = 2 u (v^T v) and d/dv = 2 v (u^T u)
        let cu = &u * (v.transpose() * &v) * 2.0;
        let cv = &v * (u.transpose() * &u) * 2.0;
        assert_relative_eq!(gu, cu, epsilon = 1e-10, max_relative = 1e-10);
        assert_relative_eq!(gv, cv, epsilon = 1e-10, max_relative = 1e-10);
    }

    #[test]
    fn factored_and_dense_objectives_agree() {
        let mut r = rng(3);
        let xf = random_factor(&mut r, 6, 4);
        let yf = random_factor(&mut r, 5, 4);
        let d = random_dataset(&mut r, 6, 5, 14);
        let u = random_matrix(&mut r, 4, 2, 1.0);
        let v = random_matrix(&mut r, 4, 2, 1.0);
        let alpha = &u * v.transpose();
        for kind in [
            PenaltyKind::Trace,
            PenaltyKind::SmoothTrace(0.01),
            PenaltyKind::Frobenius,
            PenaltyKind::TracePlusRank(2),
        ] {
            let cfg = cfg_with(0.2, kind);
            let fd = objective_dense(&alpha, &d, &xf, &yf, &cfg).unwrap();
            let ff = objective_factored(&u, &v, &d, &xf, &yf, &cfg).unwrap();
            assert_relative_eq!(fd, ff, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn dirac_ridge_solve_matches_closed_form() {
        // identity factors decouple the frobenius-penalized problem per
        // observed cell: a* = t / (1 + 2 lambda N)
        let n = 4usize;
        let obs = vec![
            (0usize, 1usize, 1.2),
            (1, 0, -0.7),
            (2, 3, 0.9),
            (3, 2, -1.4),
            (0, 0, 0.4),
            (2, 1, 1.1),
        ];
        let d = RatingsDataset::new(obs.clone(), n, n).unwrap();
        let xf = GramFactor::from_matrix(DMatrix::identity(n, n)).unwrap();
        let yf = GramFactor::from_matrix(DMatrix::identity(n, n)).unwrap();
        let lambda = 0.05;
        let nn = obs.len() as f64;
        let expected: f64 = obs
            .iter()
            .map(|&(_, _, t)| {
                let a = t / (1.0 + 2.0 * lambda * nn);
                0.5 * (t - a) * (t - a) / nn + lambda * a * a
            })
            .sum();
        let mut cfg = cfg_with(lambda, PenaltyKind::Frobenius);
        cfg.center = false;
        cfg.grad_tol = 1e-9;
        cfg.max_iter = 3000;
        let (model, report) = solve_lowrank(&d, &xf, &yf, &cfg).unwrap();
        assert_relative_eq!(report.objective, expected, max_relative = 1e-6);
        let gap = report.gap.expect("frobenius solves carry a certificate");
        assert!(gap.abs() <= 1e-6 * (1.0 + expected), "gap {gap}");
        for &(a, b, t) in &obs {
            let want = t / (1.0 + 2.0 * lambda * nn);
            assert_relative_eq!(model.predict_pair(a, b).unwrap(), want, epsilon = 1e-4);
        }
    }

    #[test]
    fn huge_lambda_collapses_to_rank_one_deficient() {
        let mut r = rng(21);
        let xf = random_factor(&mut r, 8, 5);
        let yf = random_factor(&mut r, 7, 4);
        let d = random_dataset(&mut r, 8, 7, 20);
        let mut cfg = cfg_with(100.0, PenaltyKind::SmoothTrace(1e-3));
        cfg.delta_rank = 1e-2;
        let (model, report) = solve_lowrank(&d, &xf, &yf, &cfg).unwrap();
        assert_eq!(report.rank, 1);
        assert!(report.rank_deficient);
        assert!(model.singular_values().largest() <= 1e-5);
    }

    #[test]
    fn rank_cap_is_respected() {
        let mut r = rng(33);
        let xf = random_factor(&mut r, 8, 6);
        let yf = random_factor(&mut r, 8, 6);
        let d = random_dataset(&mut r, 8, 8, 30);
        let mut cfg = cfg_with(1e-6, PenaltyKind::SmoothTrace(1e-4));
        cfg.r_max = 2;
        let (_, report) = solve_lowrank(&d, &xf, &yf, &cfg).unwrap();
        assert!(report.rank <= 2);
        assert!(report.hit_rank_cap);
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let mut r = rng(5);
        let xf = random_factor(&mut r, 6, 4);
        let yf = random_factor(&mut r, 6, 4);
        let d = random_dataset(&mut r, 6, 6, 15);
        let mut cfg = cfg_with(0.05, PenaltyKind::SmoothTrace(1e-3));
        cfg.seed = 42;
        let (m1, r1) = solve_lowrank(&d, &xf, &yf, &cfg).unwrap();
        let (m2, r2) = solve_lowrank(&d, &xf, &yf, &cfg).unwrap();
        assert_eq!(r1.objective.to_bits(), r2.objective.to_bits());
        assert_eq!(m1.alpha_dense(), m2.alpha_dense());
    }

    #[test]
    fn duality_gap_positive_away_from_optimum() {
        let mut r = rng(9);
        let xf = random_factor(&mut r, 6, 4);
        let yf = random_factor(&mut r, 6, 4);
        let d = random_dataset(&mut r, 6, 6, 15);
        let zero = OperatorModel::new(
            xf.clone(),
            yf.clone(),
            Coeffs::Dense(DMatrix::zeros(4, 4)),
            0.0,
        )
        .unwrap();
        let cfg = cfg_with(1e-3, PenaltyKind::Trace);
        let gap = duality_gap(&zero, &d, &cfg).unwrap();
        assert!(gap.is_finite() && gap > 1e-6, "gap {gap}");
    }

    #[test]
    fn smoothed_trace_solve_certifies_small_gap() {
        let mut r = rng(17);
        let xf = random_factor(&mut r, 7, 5);
        let yf = random_factor(&mut r, 6, 4);
        let d = random_dataset(&mut r, 7, 6, 18);
        let eps = 1e-6 * d.rating_scale();
        let mut cfg = cfg_with(0.05, PenaltyKind::SmoothTrace(eps));
        cfg.grad_tol = 1e-9;
        cfg.max_iter = 5000;
        cfg.delta_rank = 1e-2;
        let (_, report) = solve_lowrank(&d, &xf, &yf, &cfg).unwrap();
        let gap = report.gap.expect("smoothed trace certifies against trace");
        assert!(gap >= -1e-9, "gap {gap}");
        assert!(
            gap <= 1e-3 * (1.0 + report.objective.abs()),
            "gap {gap} too large for objective {}",
            report.objective
        );
    }

    #[test]
    fn frob_lowrank_improves_on_zero() {
        let mut r = rng(25);
        let xf = random_factor(&mut r, 7, 5);
        let yf = random_factor(&mut r, 7, 5);
        let d = random_dataset(&mut r, 7, 7, 20);
        let opts = FrobLowRankOpts {
            restarts: 3,
            ..FrobLowRankOpts::default()
        };
        let (model, report) = solve_frob_lowrank(&d, &xf, &yf, 2, 1e-3, &opts).unwrap();
        let centered = d.with_shifted_targets(-model.mean());
        let zero_risk: f64 =
            centered.targets().iter().map(|t| 0.5 * t * t).sum::<f64>() / d.len() as f64;
        assert!(report.objective < zero_risk);
        assert_eq!(report.rank, 2);
        let (m2, r2) = solve_frob_lowrank(&d, &xf, &yf, 2, 1e-3, &opts).unwrap();
        assert_eq!(report.objective.to_bits(), r2.objective.to_bits());
        assert_eq!(model.alpha_dense(), m2.alpha_dense());
    }

    #[test]
    fn nonsmooth_penalties_are_rejected_by_the_engine() {
        let mut r = rng(1);
        let xf = random_factor(&mut r, 4, 3);
        let yf = random_factor(&mut r, 4, 3);
        let d = random_dataset(&mut r, 4, 4, 6);
        for kind in [
            PenaltyKind::Trace,
            PenaltyKind::TracePlusRank(2),
            PenaltyKind::RankCap(2),
        ] {
            let cfg = cfg_with(0.1, kind);
            assert!(matches!(
                solve_lowrank(&d, &xf, &yf, &cfg),
                Err(Error::UnsupportedPenalty(_))
            ));
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranks() {
        let cfg = cfg_with(0.1, PenaltyKind::SmoothTrace(1e-3));
        let mut bad = cfg;
        bad.r0 = 5;
        bad.r_max = 3;
        assert!(bad.validate(10, 10).is_err());
        assert!(SolveConfig::new(-1.0, cfg.penalty, LossKind::Squared).is_err());
        assert_eq!(cfg.validate(6, 9).unwrap(), 6);
    }
}
