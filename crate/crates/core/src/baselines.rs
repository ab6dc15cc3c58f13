//! Closed-form competing compressions (Gaussian information bottleneck,
//! privacy funnel, generalized-eigenvector compressive privacy) and a
//! tradeoff calibration helper.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lds::CompressionPlan;
use crate::linalg::{complement_basis, generalized_spectrum, generalized_top_eigvecs, sym_inverse, Matrix, SymMatrix};
use crate::objectives::{PrivacySpec, StepGeometry};

/// Floor on bottleneck eigenvalues before they enter a row scale.
const LAMBDA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Ib,
    Pf,
    Cp,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Ib => "ib",
            BaselineKind::Pf => "pf",
            BaselineKind::Cp => "cp",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ib" => Ok(BaselineKind::Ib),
            "pf" => Ok(BaselineKind::Pf),
            "cp" => Ok(BaselineKind::Cp),
            other => Err(Error::Config(format!("unknown baseline '{other}' (expected ib, pf or cp)"))),
        }
    }
}

/// Generalized eigenpairs of `(Σ_{z|y}, T)` in ascending order, where `y` is
/// the sub-state `idx`. The vectors are the left eigenvectors of
/// `Σ_{z|y} T⁻¹`, normalized to unit Euclidean norm.
pub fn bottleneck_directions(geom: &StepGeometry, h: &Matrix, idx: &[usize]) -> Result<(Vec<f64>, Matrix)> {
    let p = geom.p_pred[0].as_matrix();
    if h.ncols() != p.nrows() || h.nrows() != geom.dim_meas() {
        return Err(Error::dims("bottleneck", geom.dim_meas(), h.nrows()));
    }
    // Cross-covariance between the measurement and the relevance sub-state.
    let sigma_zy = h * p.select_columns(idx);
    let p_yy = geom.p_pred[0].principal(idx);
    let p_yy_inv = sym_inverse(&p_yy, "relevance covariance")?;
    let cond = geom.t.sub(&p_yy_inv.congruence(&sigma_zy));
    let spec = generalized_spectrum(&cond, &geom.t)?;
    let n = spec.len();
    let values: Vec<f64> = (0..n).rev().map(|i| spec.values[i]).collect();
    let order: Vec<usize> = (0..n).rev().collect();
    Ok((values, spec.vectors.select_columns(&order)))
}

/// Information-bottleneck compression with the public sub-state as the
/// relevance variable. Rows whose scale would be imaginary are dropped, so
/// the plan may have fewer than `m` rows (possibly none).
pub fn ib_compression(geom: &StepGeometry, h: &Matrix, spec: &PrivacySpec, gamma: f64, m: usize) -> Result<CompressionPlan> {
    check_tradeoff(gamma)?;
    let (values, vectors) = bottleneck_directions(geom, h, spec.public_idx())?;
    let mut rows = Vec::new();
    for (i, &lambda) in values.iter().enumerate().take(m) {
        let num = gamma * (1.0 - lambda) - 1.0;
        if num <= 0.0 {
            continue;
        }
        let v = vectors.column(i);
        let t_norm = (v.transpose() * geom.t.as_matrix() * v)[(0, 0)];
        let alpha = (num / (lambda.max(LAMBDA_FLOOR) * t_norm)).sqrt();
        rows.push((v * alpha).transpose());
    }
    plan_from_rows(&rows, geom.dim_meas())
}

/// Privacy-funnel compression with the private sub-state as the relevance
/// variable: the `m` least informative directions, unit-norm rows.
pub fn pf_compression(geom: &StepGeometry, h: &Matrix, spec: &PrivacySpec, gamma: f64, m: usize) -> Result<CompressionPlan> {
    check_tradeoff(gamma)?;
    let (_, vectors) = bottleneck_directions(geom, h, spec.private_idx())?;
    let n = vectors.ncols();
    let rows: Vec<_> = (0..m.min(n)).map(|i| vectors.column(n - 1 - i).transpose()).collect();
    plan_from_rows(&rows, geom.dim_meas())
}

/// Rows projecting onto the directions of `range(h_other)`'s orthogonal complement.
fn projection_rows(h_other: &Matrix, which: &'static str) -> Result<Matrix> {
    let basis = complement_basis(h_other);
    if basis.ncols() == 0 {
        return Err(Error::EmptyNullspace(which));
    }
    Ok(basis.transpose())
}

/// `T Γᵀ (Γ T Γᵀ)⁻¹ Γ T`.
fn projected_information(t: &SymMatrix, gamma_rows: &Matrix) -> Result<SymMatrix> {
    let inner = sym_inverse(&t.congruence(gamma_rows), "projected innovation covariance")?;
    let tg = t.as_matrix() * gamma_rows.transpose();
    Ok(inner.congruence(&tg))
}

/// Compressive-privacy compression: principal generalized eigenvectors of
/// `(Ω − γ Π, T)`, where `Ω` and `Π` carry the information of the
/// measurement parts free of private and public states respectively.
pub fn cp_compression(geom: &StepGeometry, h: &Matrix, spec: &PrivacySpec, gamma: f64, m: usize) -> Result<CompressionPlan> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Config(format!("tradeoff must be non-negative, got {gamma}")));
    }
    let gamma_p = projection_rows(&h.select_columns(spec.private_idx()), "private")?;
    let gamma_q = projection_rows(&h.select_columns(spec.public_idx()), "public")?;
    let omega = projected_information(&geom.t, &gamma_p)?;
    let pi = projected_information(&geom.t, &gamma_q)?;
    let sel = generalized_top_eigvecs(&omega.sub(&pi.scale(gamma)), &geom.t, m)?;
    CompressionPlan::new(sel.vectors.transpose(), true)
}

pub fn baseline_plan(
    kind: BaselineKind,
    geom: &StepGeometry,
    h: &Matrix,
    spec: &PrivacySpec,
    gamma: f64,
    m: usize,
) -> Result<CompressionPlan> {
    match kind {
        BaselineKind::Ib => ib_compression(geom, h, spec, gamma, m),
        BaselineKind::Pf => pf_compression(geom, h, spec, gamma, m),
        BaselineKind::Cp => cp_compression(geom, h, spec, gamma, m),
    }
}

fn check_tradeoff(gamma: f64) -> Result<()> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::Config(format!("tradeoff must be positive, got {gamma}")));
    }
    Ok(())
}

fn plan_from_rows(rows: &[nalgebra::RowDVector<f64>], n: usize) -> Result<CompressionPlan> {
    if rows.is_empty() {
        return Ok(CompressionPlan::discard(n, true));
    }
    CompressionPlan::new(Matrix::from_rows(rows), true)
}

/// Search box for [`calibrate_tradeoff`].
#[derive(Debug, Clone)]
pub struct CalibrationBudget {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    /// Log-spaced grid points per dimension.
    pub grid: usize,
    /// Bisection steps inside the best bracketing grid cell.
    pub refine: usize,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub gamma: f64,
    pub m: usize,
    pub eta: f64,
    /// `|eta − target| / target`.
    pub rel_gap: f64,
}

/// Picks `(γ, M)` whose closed-loop private error `eval(γ, M)` lies closest
/// to `target`. Failed evaluations are skipped.
pub fn calibrate_tradeoff<E>(mut eval: E, target: f64, budget: &CalibrationBudget) -> Option<Calibration>
where
    E: FnMut(f64, usize) -> Result<f64>,
{
    let grid = budget.grid.max(2);
    let (lo, hi) = (budget.gamma_lo.ln(), budget.gamma_hi.ln());
    let gammas: Vec<f64> = (0..grid)
        .map(|i| (lo + (hi - lo) * i as f64 / (grid - 1) as f64).exp())
        .collect();
    let mut best: Option<Calibration> = None;
    let consider = |gamma: f64, m: usize, eta: f64, best: &mut Option<Calibration>| {
        let rel_gap = (eta - target).abs() / target.abs().max(f64::MIN_POSITIVE);
        if best.is_none_or(|b| rel_gap < b.rel_gap) {
            *best = Some(Calibration { gamma, m, eta, rel_gap });
        }
    };
    for &m in &budget.dims {
        let etas: Vec<Option<f64>> = gammas.iter().map(|&g| eval(g, m).ok()).collect();
        for (g, e) in gammas.iter().zip(&etas) {
            if let Some(e) = e {
                consider(*g, m, *e, &mut best);
            }
        }
        for i in 0..grid - 1 {
            let (Some(ea), Some(eb)) = (etas[i], etas[i + 1]) else {
                continue;
            };
            if (ea - target) * (eb - target) > 0.0 {
                continue;
            }
            let (mut ga, mut gb, mut fa) = (gammas[i], gammas[i + 1], ea - target);
            for _ in 0..budget.refine {
                let mid = (ga * gb).sqrt();
                let Ok(em) = eval(mid, m) else { break };
                consider(mid, m, em, &mut best);
                if (em - target) * fa > 0.0 {
                    ga = mid;
                    fa = em - target;
                } else {
                    gb = mid;
                }
            }
        }
    }
    best
}
