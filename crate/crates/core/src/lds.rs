//! Linear dynamical system model, ground-truth simulation, and the
//! (compressed) Kalman filter recursions.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{has_full_row_rank, sym_inverse_floored, sym_sqrt, Matrix, SymMatrix, Vector};

/// Eigenvalue floor used when inverting innovation covariances.
pub const INNOVATION_FLOOR: f64 = 1e-12;

pub type MatrixFn = Arc<dyn Fn(usize) -> Matrix + Send + Sync>;
pub type MeasurementFn = Arc<dyn Fn(usize) -> (Matrix, Matrix) + Send + Sync>;

/// Source of a time-indexed matrix.
#[derive(Clone)]
pub enum Provider {
    Constant(Matrix),
    PerStep(MatrixFn),
}

impl Provider {
    pub fn at(&self, k: usize) -> Matrix {
        match self {
            Provider::Constant(m) => m.clone(),
            Provider::PerStep(f) => f(k),
        }
    }
}

impl fmt::Debug for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provider::Constant(m) => write!(f, "Constant({}x{})", m.nrows(), m.ncols()),
            Provider::PerStep(_) => write!(f, "PerStep(..)"),
        }
    }
}

/// Time-varying linear-Gaussian system
///
/// `x_k = F_k x_{k-1} + v_k`, `v_k ~ N(0, Q_k)`
///
/// `z_k = H_k x_k + n_k`, `n_k ~ N(0, R_k)`
///
/// `F` and `Q` must be available for every `k ≥ 1`; `(H_k, R_k)` only needs to
/// be known once step `k` is reached, and its row count may change per step.
#[derive(Clone)]
pub struct LdsModel {
    pub dim_state: usize,
    pub dim_meas: usize,
    transition: Provider,
    process_noise: Provider,
    measurement: MeasurementFn,
}

impl LdsModel {
    pub fn new(
        dim_state: usize,
        dim_meas: usize,
        transition: Provider,
        process_noise: Provider,
        measurement: MeasurementFn,
    ) -> Self {
        LdsModel {
            dim_state,
            dim_meas,
            transition,
            process_noise,
            measurement,
        }
    }

    /// Time-invariant model.
    pub fn constant(f: Matrix, q: Matrix, h: Matrix, r: Matrix) -> Self {
        let (l, n) = (f.nrows(), h.nrows());
        let hr = (h, r);
        LdsModel::new(
            l,
            n,
            Provider::Constant(f),
            Provider::Constant(q),
            Arc::new(move |_| hr.clone()),
        )
    }

    pub fn transition(&self, k: usize) -> Result<Matrix> {
        let f = self.transition.at(k);
        if f.nrows() != self.dim_state || f.ncols() != self.dim_state {
            return Err(Error::dims("transition", self.dim_state, format!("{}x{}", f.nrows(), f.ncols())));
        }
        Ok(f)
    }

    pub fn process_noise(&self, k: usize) -> Result<SymMatrix> {
        let q = SymMatrix::try_new(self.process_noise.at(k))?;
        if q.dim() != self.dim_state {
            return Err(Error::dims("process_noise", self.dim_state, q.dim()));
        }
        q.check_psd()?;
        Ok(q)
    }

    /// `(H_k, R_k)`; `R_k` is checked positive definite unless `H_k` has no rows.
    pub fn measurement(&self, k: usize) -> Result<(Matrix, SymMatrix)> {
        let (h, r) = (self.measurement)(k);
        let r = SymMatrix::try_new(r)?;
        if h.ncols() != self.dim_state || r.dim() != h.nrows() {
            return Err(Error::dims(
                "measurement",
                format!("Nx{} with NxN noise", self.dim_state),
                format!("{}x{} with {}x{} noise", h.nrows(), h.ncols(), r.dim(), r.dim()),
            ));
        }
        if r.dim() > 0 {
            let min_eig = r.min_eigenvalue();
            if min_eig <= 0.0 {
                return Err(Error::Singular {
                    context: "measurement noise",
                    min_eig,
                });
            }
        }
        Ok((h, r))
    }

    /// `F_{k+1}, …, F_{k+r}`.
    pub fn future_transitions(&self, k: usize, r: usize) -> Result<Vec<Matrix>> {
        (k + 1..=k + r).map(|i| self.transition(i)).collect()
    }

    /// `Q_{k+1}, …, Q_{k+r}`.
    pub fn future_process_noises(&self, k: usize, r: usize) -> Result<Vec<SymMatrix>> {
        (k + 1..=k + r).map(|i| self.process_noise(i)).collect()
    }
}

impl fmt::Debug for LdsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LdsModel")
            .field("dim_state", &self.dim_state)
            .field("dim_meas", &self.dim_meas)
            .field("transition", &self.transition)
            .field("process_noise", &self.process_noise)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// `(k | k-1)`
    Predicted,
    /// `(k | k)`
    Updated,
}

/// State estimate and error covariance at one filtering stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector,
    pub cov: SymMatrix,
    pub stage: Stage,
}

impl GaussianBelief {
    pub fn new(mean: Vector, cov: SymMatrix, stage: Stage) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::dims("GaussianBelief", cov.dim(), mean.len()));
        }
        cov.check_psd()?;
        Ok(GaussianBelief { mean, cov, stage })
    }

    /// Posterior-stage belief, the usual starting point of a filter run.
    pub fn prior(mean: Vector, cov: SymMatrix) -> Result<Self> {
        Self::new(mean, cov, Stage::Updated)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::WrongStage {
                expected: match stage {
                    Stage::Predicted => "predicted",
                    Stage::Updated => "updated",
                },
            });
        }
        Ok(())
    }
}

/// Per-step compression matrix `C_k` (`M × N`). `M = 0` discards the measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionPlan {
    matrix: Matrix,
    pub feasible: bool,
}

impl CompressionPlan {
    /// Fails unless `matrix` has full row rank.
    pub fn new(matrix: Matrix, feasible: bool) -> Result<Self> {
        if !has_full_row_rank(&matrix) {
            return Err(Error::Singular {
                context: "compression plan rank",
                min_eig: crate::linalg::singular_values(&matrix).last().copied().unwrap_or(0.0),
            });
        }
        Ok(CompressionPlan { matrix, feasible })
    }

    pub fn identity(n: usize) -> Self {
        CompressionPlan {
            matrix: Matrix::identity(n, n),
            feasible: true,
        }
    }

    pub fn discard(n: usize, feasible: bool) -> Self {
        CompressionPlan {
            matrix: Matrix::zeros(0, n),
            feasible,
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Compressed dimension `M`.
    pub fn rank(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_discard(&self) -> bool {
        self.matrix.nrows() == 0
    }
}

/// Time update: `x' = F x`, `P' = F P Fᵀ + Q`.
pub fn predict(belief: &GaussianBelief, f: &Matrix, q: &SymMatrix) -> Result<GaussianBelief> {
    belief.expect(Stage::Updated)?;
    let l = belief.dim();
    if f.nrows() != l || f.ncols() != l || q.dim() != l {
        return Err(Error::dims("predict", l, format!("F {}x{}, Q {}", f.nrows(), f.ncols(), q.dim())));
    }
    Ok(GaussianBelief {
        mean: f * &belief.mean,
        cov: belief.cov.congruence(f).add(q),
        stage: Stage::Predicted,
    })
}

/// Measurement update with the simple-form covariance `(I - K H) P`.
pub fn update(belief: &GaussianBelief, z: &Vector, h: &Matrix, r: &SymMatrix) -> Result<GaussianBelief> {
    belief.expect(Stage::Predicted)?;
    let l = belief.dim();
    let n = h.nrows();
    if h.ncols() != l || z.len() != n || r.dim() != n {
        return Err(Error::dims(
            "update",
            format!("H Nx{l}, z N, R NxN"),
            format!("H {}x{}, z {}, R {}", n, h.ncols(), z.len(), r.dim()),
        ));
    }
    if n == 0 {
        return Ok(GaussianBelief {
            stage: Stage::Updated,
            ..belief.clone()
        });
    }
    let p = belief.cov.as_matrix();
    let pht = p * h.transpose();
    let s = SymMatrix::new(h * &pht + r.as_matrix());
    let spec = s.eigen();
    let max_eig = spec.values[0];
    let min_eig = spec.values[n - 1];
    if max_eig <= 0.0 || min_eig < -s.tol_psd() {
        return Err(Error::Singular {
            context: "innovation covariance",
            min_eig,
        });
    }
    let (s_inv, clamped) = sym_inverse_floored(&s, INNOVATION_FLOOR);
    if clamped {
        log::warn!("innovation covariance near-singular (min eigenvalue {min_eig:e}); floored");
    }
    let gain = &pht * s_inv.as_matrix();
    let innovation = z - h * &belief.mean;
    let mean = &belief.mean + &gain * innovation;
    let cov = (Matrix::identity(l, l) - &gain * h) * p;
    Ok(GaussianBelief {
        mean,
        cov: SymMatrix::new(cov),
        stage: Stage::Updated,
    })
}

/// Update with the compressed measurement `C z`, `C H`, `C R Cᵀ`.
pub fn compressed_update(
    belief: &GaussianBelief,
    z: &Vector,
    h: &Matrix,
    r: &SymMatrix,
    plan: &CompressionPlan,
) -> Result<GaussianBelief> {
    let c = plan.matrix();
    if c.ncols() != h.nrows() || z.len() != h.nrows() {
        return Err(Error::dims(
            "compressed_update",
            format!("C Mx{n}, z {n}", n = h.nrows()),
            format!("C {}x{}, z {}", c.nrows(), c.ncols(), z.len()),
        ));
    }
    if plan.is_discard() {
        belief.expect(Stage::Predicted)?;
        return Ok(GaussianBelief {
            stage: Stage::Updated,
            ..belief.clone()
        });
    }
    update(belief, &(c * z), &(c * h), &r.congruence(c))
}

/// `F_{b:a} = F_a ⋯ F_b` over the slice (empty slice gives the identity).
pub fn transition_product(f_seq: &[Matrix], dim: usize) -> Matrix {
    f_seq.iter().fold(Matrix::identity(dim, dim), |acc, f| f * acc)
}

/// n-step prediction covariance from a posterior covariance.
pub fn n_step_cov(cov: &SymMatrix, f_seq: &[Matrix], q_seq: &[SymMatrix]) -> Result<SymMatrix> {
    if f_seq.len() != q_seq.len() {
        return Err(Error::dims("n_step_cov", f_seq.len(), q_seq.len()));
    }
    let l = cov.dim();
    let mut acc = cov.as_matrix().clone();
    for (f, q) in f_seq.iter().zip(q_seq) {
        if f.nrows() != l || f.ncols() != l || q.dim() != l {
            return Err(Error::dims("n_step_cov", l, format!("{}x{}", f.nrows(), f.ncols())));
        }
        acc = f * acc * f.transpose() + q.as_matrix();
    }
    Ok(SymMatrix::new(acc))
}

/// Draws a zero-mean Gaussian vector with covariance `cov`.
pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, cov: &SymMatrix) -> Result<Vector> {
    let factor = sym_sqrt(cov)?;
    let xi = Vector::from_iterator(cov.dim(), (0..cov.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok(factor.as_matrix() * xi)
}

/// One ground-truth transition and measurement.
pub fn simulate_step<R: Rng + ?Sized>(
    rng: &mut R,
    x: &Vector,
    f: &Matrix,
    q: &SymMatrix,
    h: &Matrix,
    r: &SymMatrix,
) -> Result<(Vector, Vector)> {
    let l = x.len();
    if f.nrows() != l || f.ncols() != l || q.dim() != l || h.ncols() != l || r.dim() != h.nrows() {
        return Err(Error::dims("simulate_step", l, format!("F {}x{}, H {}x{}", f.nrows(), f.ncols(), h.nrows(), h.ncols())));
    }
    let v = sample_gaussian(rng, q)?;
    let x_next = f * x + v;
    let n = sample_gaussian(rng, r)?;
    let z = h * &x_next + n;
    Ok((x_next, z))
}
