//! Utility and privacy quantities of one filtering step: public/private error
//! measures, the step geometry, error reductions, loss thresholds, and the
//! minimum look-ahead bound.

use crate::error::{Error, Result};
use crate::lds::{n_step_cov, transition_product, CompressionPlan, GaussianBelief, Stage};
use crate::linalg::{sym_inverse, Matrix, SymMatrix, Vector};

/// Cap on the number of horizons scanned by [`min_lookahead`].
pub const MAX_LOOKAHEAD_SCAN: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lookahead {
    Fixed(usize),
    /// Recompute the horizon each step from the predicted covariance's
    /// smallest eigenvalue, with growth rate `xi` and noise floor `eps`.
    AutoProp1 { xi: f64, eps: f64 },
}

/// Public/private partition of the state and the linear privacy map.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacySpec {
    public_idx: Vec<usize>,
    private_idx: Vec<usize>,
    map: Matrix,
    pub delta: f64,
    pub lookahead: Lookahead,
}

impl PrivacySpec {
    /// Indices are 0-based and must partition `0..public_idx.len() + private_idx.len()`.
    pub fn new(
        public_idx: Vec<usize>,
        private_idx: Vec<usize>,
        map: Matrix,
        delta: f64,
        lookahead: Lookahead,
    ) -> Result<Self> {
        let l = public_idx.len() + private_idx.len();
        let mut seen = vec![false; l];
        for &i in public_idx.iter().chain(&private_idx) {
            if i >= l || seen[i] {
                return Err(Error::InvalidSpec(format!(
                    "index {i} repeated or out of range for a {l}-dimensional state"
                )));
            }
            seen[i] = true;
        }
        if private_idx.is_empty() {
            return Err(Error::InvalidSpec("private index set is empty".into()));
        }
        if map.ncols() != private_idx.len() || map.nrows() == 0 {
            return Err(Error::InvalidSpec(format!(
                "privacy map must be F x {}, got {}x{}",
                private_idx.len(),
                map.nrows(),
                map.ncols()
            )));
        }
        if map.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(Error::InvalidSpec("privacy map entries must be finite and non-negative".into()));
        }
        if !delta.is_finite() || delta < 0.0 {
            return Err(Error::InvalidSpec(format!("delta must be a finite non-negative value, got {delta}")));
        }
        match lookahead {
            Lookahead::AutoProp1 { xi, eps } if !(xi > 0.0 && eps > 0.0) => {
                return Err(Error::InvalidSpec(format!("look-ahead needs xi > 0 and eps > 0, got ({xi}, {eps})")));
            }
            _ => {}
        }
        Ok(PrivacySpec {
            public_idx,
            private_idx,
            map,
            delta,
            lookahead,
        })
    }

    /// Public states first (`0..n_public`), private states after.
    pub fn contiguous(n_public: usize, n_private: usize, map: Matrix, delta: f64, lookahead: Lookahead) -> Result<Self> {
        Self::new(
            (0..n_public).collect(),
            (n_public..n_public + n_private).collect(),
            map,
            delta,
            lookahead,
        )
    }

    /// `1 x q` all-ones map: the sum of private variances.
    pub fn trace_map(q: usize) -> Matrix {
        Matrix::from_element(1, q, 1.0)
    }

    /// `q x q` identity map: every private variance separately.
    pub fn elementwise_map(q: usize) -> Matrix {
        Matrix::identity(q, q)
    }

    pub fn public_idx(&self) -> &[usize] {
        &self.public_idx
    }

    pub fn private_idx(&self) -> &[usize] {
        &self.private_idx
    }

    pub fn map(&self) -> &Matrix {
        &self.map
    }

    pub fn dim_state(&self) -> usize {
        self.public_idx.len() + self.private_idx.len()
    }

    /// `|F|`, the number of privacy constraints per horizon.
    pub fn n_outputs(&self) -> usize {
        self.map.nrows()
    }

    /// `F(δ 1)`.
    pub fn floor(&self) -> Vector {
        self.map_ones() * self.delta
    }

    /// `F(1)`.
    pub fn map_ones(&self) -> Vector {
        self.map.column_sum()
    }

    /// Look-ahead horizon for the current step, given the smallest eigenvalue
    /// of the predicted covariance.
    pub fn horizon(&self, nu: f64) -> Result<usize> {
        match self.lookahead {
            Lookahead::Fixed(r) => Ok(r),
            Lookahead::AutoProp1 { xi, eps } => min_lookahead(self, nu, xi, eps),
        }
    }

    fn check_dim(&self, context: &'static str, dim: usize) -> Result<()> {
        if dim != self.dim_state() {
            return Err(Error::dims(context, self.dim_state(), dim));
        }
        Ok(())
    }
}

/// Covariance-derived quantities of one step that do not depend on the
/// compression.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGeometry {
    /// `H P Hᵀ + R`.
    pub t: SymMatrix,
    /// Cross-covariances `H P F_{k+1:k+n}ᵀ`, `n = 0..=r`.
    pub g: Vec<Matrix>,
    /// Update-free n-step predicted covariances, `n = 0..=r`.
    pub p_pred: Vec<SymMatrix>,
}

impl StepGeometry {
    pub fn horizon(&self) -> usize {
        self.g.len() - 1
    }

    pub fn dim_meas(&self) -> usize {
        self.t.dim()
    }

    pub fn dim_state(&self) -> usize {
        self.p_pred[0].dim()
    }
}

pub fn public_error_trace(cov: &SymMatrix, spec: &PrivacySpec) -> f64 {
    spec.public_idx.iter().map(|&i| cov[(i, i)]).sum()
}

/// Diagonal of the private sub-block of `cov`.
pub fn private_variances(cov: &Matrix, spec: &PrivacySpec) -> Vector {
    Vector::from_iterator(spec.private_idx.len(), spec.private_idx.iter().map(|&i| cov[(i, i)]))
}

/// `A · vecdiag(cov[Q, Q])`.
pub fn private_error(cov: &SymMatrix, spec: &PrivacySpec) -> Vector {
    &spec.map * private_variances(cov, spec)
}

pub fn step_geometry(
    pred: &GaussianBelief,
    h: &Matrix,
    r: &SymMatrix,
    f_future: &[Matrix],
    q_future: &[SymMatrix],
) -> Result<StepGeometry> {
    if pred.stage != Stage::Predicted {
        return Err(Error::WrongStage { expected: "predicted" });
    }
    let l = pred.dim();
    if h.ncols() != l || r.dim() != h.nrows() {
        return Err(Error::dims(
            "step_geometry",
            format!("H Nx{l}, R NxN"),
            format!("H {}x{}, R {}", h.nrows(), h.ncols(), r.dim()),
        ));
    }
    if f_future.len() != q_future.len() {
        return Err(Error::dims("step_geometry", f_future.len(), q_future.len()));
    }
    let cov = &pred.cov;
    let hp = h * cov.as_matrix();
    let t = SymMatrix::new(&hp * h.transpose() + r.as_matrix());
    let mut g = Vec::with_capacity(f_future.len() + 1);
    let mut p_pred = Vec::with_capacity(f_future.len() + 1);
    for n in 0..=f_future.len() {
        let prod = transition_product(&f_future[..n], l);
        g.push(&hp * prod.transpose());
        p_pred.push(n_step_cov(cov, &f_future[..n], &q_future[..n])?);
    }
    Ok(StepGeometry { t, g, p_pred })
}

/// `Gᵀ Cᵀ (C T Cᵀ)⁻¹ C G` at horizon `n`.
pub fn error_reduction(geom: &StepGeometry, plan: &CompressionPlan, n: usize) -> Result<SymMatrix> {
    let g = horizon_g(geom, n)?;
    let c = plan.matrix();
    if c.ncols() != geom.dim_meas() {
        return Err(Error::dims("error_reduction", geom.dim_meas(), c.ncols()));
    }
    if plan.is_discard() {
        return Ok(SymMatrix::zeros(g.ncols()));
    }
    let cg = c * g;
    let inner = sym_inverse(&geom.t.congruence(c), "compressed innovation covariance")?;
    Ok(inner.congruence(&cg.transpose()))
}

/// Trace of the public block of the horizon-0 reduction.
pub fn utility(geom: &StepGeometry, plan: &CompressionPlan, spec: &PrivacySpec) -> Result<f64> {
    spec.check_dim("utility", geom.dim_state())?;
    Ok(public_error_trace(&error_reduction(geom, plan, 0)?, spec))
}

pub fn privacy_loss(geom: &StepGeometry, plan: &CompressionPlan, spec: &PrivacySpec, n: usize) -> Result<Vector> {
    spec.check_dim("privacy_loss", geom.dim_state())?;
    Ok(private_error(&error_reduction(geom, plan, n)?, spec))
}

/// `A (vecdiag(P̃_{k+n|k-1}[Q, Q]) − δ 1)`; negative entries mean even `M = 0`
/// violates the floor.
pub fn loss_thresholds(geom: &StepGeometry, spec: &PrivacySpec, n: usize) -> Result<Vector> {
    spec.check_dim("loss_thresholds", geom.dim_state())?;
    let p = geom
        .p_pred
        .get(n)
        .ok_or_else(|| Error::dims("loss_thresholds", format!("horizon <= {}", geom.horizon()), n))?;
    Ok(private_error(p, spec) - spec.floor())
}

fn horizon_g(geom: &StepGeometry, n: usize) -> Result<&Matrix> {
    geom.g
        .get(n)
        .ok_or_else(|| Error::dims("horizon", format!("<= {}", geom.horizon()), n))
}

/// Smallest look-ahead horizon that guarantees the privacy floor can be
/// restored, given `P̃_{k|k-1} ⪰ nu I` and a process noise bounded below by
/// `eps` with growth rate `xi`. Clamped at 0.
pub fn min_lookahead(spec: &PrivacySpec, nu: f64, xi: f64, eps: f64) -> Result<usize> {
    if !(xi > 0.0 && eps > 0.0 && nu > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "look-ahead bound needs positive xi, eps, nu; got ({xi}, {eps}, {nu})"
        )));
    }
    let ones = spec.map_ones();
    let floor = spec.floor();
    if xi < 1.0 {
        let limit = eps / (1.0 - xi);
        if nu >= limit {
            return Err(Error::NoFiniteBound(format!("nu = {nu} is not below eps/(1-xi) = {limit}")));
        }
        if (0..ones.len()).any(|f| floor[f] > ones[f] * limit) {
            return Err(Error::NoFiniteBound(format!(
                "privacy floor exceeds the reachable variance eps/(1-xi) = {limit}"
            )));
        }
    }
    let bound = |r: usize| -> f64 {
        let xr = xi.powi(r as i32);
        let growth = if xi == 1.0 { r as f64 } else { (1.0 - xr) / (1.0 - xi) };
        eps * growth + xr * nu
    };
    for r in 0..=MAX_LOOKAHEAD_SCAN {
        let b = bound(r);
        let ok = (0..ones.len()).all(|f| ones[f] * b >= floor[f] - 1e-12 * floor[f].abs());
        if ok {
            return Ok(r.saturating_sub(1));
        }
    }
    Err(Error::NoFiniteBound(format!(
        "floor not reached within {MAX_LOOKAHEAD_SCAN} steps"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::compressed_update;
    use crate::linalg::max_abs_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let x = randn(rng, n, n);
        SymMatrix::new(&x * x.transpose() + Matrix::identity(n, n) * 0.3)
    }

    fn trace_spec(p: usize, q: usize, delta: f64) -> PrivacySpec {
        PrivacySpec::contiguous(p, q, PrivacySpec::trace_map(q), delta, Lookahead::Fixed(0)).unwrap()
    }

    fn scalar_geom() -> StepGeometry {
        let pred = GaussianBelief::new(Vector::zeros(1), SymMatrix::identity(1), Stage::Predicted).unwrap();
        step_geometry(&pred, &Matrix::identity(1, 1), &SymMatrix::identity(1), &[], &[]).unwrap()
    }

    #[test]
    fn public_trace_cases() {
        let spec = trace_spec(2, 2, 1.0);
        let d = SymMatrix::from_diagonal(&[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(public_error_trace(&d, &spec), 5.0);
        assert_eq!(public_error_trace(&SymMatrix::zeros(4), &spec), 0.0);
    }

    #[test]
    fn private_error_maps() {
        let cov = SymMatrix::from_diagonal(&[1.0, 3.0, 4.0]);
        let sum = trace_spec(1, 2, 1.0);
        assert_eq!(private_error(&cov, &sum).as_slice(), &[7.0]);
        let elem = PrivacySpec::contiguous(1, 2, PrivacySpec::elementwise_map(2), 1.0, Lookahead::Fixed(0)).unwrap();
        assert_eq!(private_error(&cov, &elem).as_slice(), &[3.0, 4.0]);
        let mixed = PrivacySpec::contiguous(
            1,
            2,
            Matrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]),
            1.0,
            Lookahead::Fixed(0),
        )
        .unwrap();
        assert_eq!(private_error(&cov, &mixed).as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn spec_validation() {
        let neg = Matrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert!(PrivacySpec::contiguous(1, 2, neg, 1.0, Lookahead::Fixed(0)).is_err());
        assert!(PrivacySpec::new(vec![0, 0], vec![1], PrivacySpec::trace_map(1), 1.0, Lookahead::Fixed(0)).is_err());
        assert!(PrivacySpec::contiguous(1, 2, PrivacySpec::trace_map(3), 1.0, Lookahead::Fixed(0)).is_err());
        assert!(PrivacySpec::contiguous(1, 2, PrivacySpec::trace_map(2), -1.0, Lookahead::Fixed(0)).is_err());
    }

    #[test]
    fn scalar_geometry_and_reduction() {
        let geom = scalar_geom();
        assert_eq!(geom.t[(0, 0)], 2.0);
        assert_eq!(geom.g[0][(0, 0)], 1.0);
        assert_eq!(geom.p_pred[0][(0, 0)], 1.0);
        let d = error_reduction(&geom, &CompressionPlan::identity(1), 0).unwrap();
        assert!((d[(0, 0)] - 0.5).abs() < 1e-15);
        let z = error_reduction(&geom, &CompressionPlan::discard(1, true), 0).unwrap();
        assert_eq!(z[(0, 0)], 0.0);
    }

    #[test]
    fn zero_horizon_g_is_h_times_cov() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_pd(&mut rng, 4);
        let h = randn(&mut rng, 3, 4);
        let pred = GaussianBelief::new(Vector::zeros(4), cov.clone(), Stage::Predicted).unwrap();
        let geom = step_geometry(&pred, &h, &SymMatrix::identity(3), &[], &[]).unwrap();
        assert!(max_abs_diff(&geom.g[0], &(&h * cov.as_matrix())) < 1e-14);
    }

    #[test]
    fn horizon_covariances_match_direct_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cov = random_pd(&mut rng, 3);
        let fs: Vec<Matrix> = (0..2).map(|_| randn(&mut rng, 3, 3)).collect();
        let qs: Vec<SymMatrix> = (0..2).map(|_| random_pd(&mut rng, 3)).collect();
        let pred = GaussianBelief::new(Vector::zeros(3), cov.clone(), Stage::Predicted).unwrap();
        let geom = step_geometry(&pred, &Matrix::identity(3, 3), &SymMatrix::identity(3), &fs, &qs).unwrap();
        let mut p = cov.as_matrix().clone();
        for n in 1..=2 {
            p = &fs[n - 1] * &p * fs[n - 1].transpose() + qs[n - 1].as_matrix();
            assert!(max_abs_diff(&geom.p_pred[n], &p) < 1e-10);
        }
    }

    #[test]
    fn reduction_matches_filter_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cov = random_pd(&mut rng, 4);
        let h = randn(&mut rng, 5, 4);
        let r = random_pd(&mut rng, 5);
        let c = randn(&mut rng, 2, 5);
        let fs: Vec<Matrix> = (0..2).map(|_| randn(&mut rng, 4, 4)).collect();
        let qs: Vec<SymMatrix> = (0..2).map(|_| random_pd(&mut rng, 4)).collect();
        let pred = GaussianBelief::new(Vector::zeros(4), cov, Stage::Predicted).unwrap();
        let geom = step_geometry(&pred, &h, &r, &fs, &qs).unwrap();
        let plan = CompressionPlan::new(c, true).unwrap();
        let post = compressed_update(&pred, &Vector::zeros(5), &h, &r, &plan).unwrap();
        for n in 0..=2 {
            let after = n_step_cov(&post.cov, &fs[..n], &qs[..n]).unwrap();
            let d = error_reduction(&geom, &plan, n).unwrap();
            let diff = geom.p_pred[n].sub(&d);
            assert!(max_abs_diff(&diff, &after) < 1e-8, "horizon {n}");
            assert!(d.min_eigenvalue() > -1e-9);
        }
    }

    #[test]
    fn decoupled_coordinates() {
        let spec = trace_spec(1, 1, 0.5);
        let pred = GaussianBelief::new(Vector::zeros(2), SymMatrix::from_diagonal(&[2.0, 3.0]), Stage::Predicted).unwrap();
        let geom = step_geometry(&pred, &Matrix::identity(2, 2), &SymMatrix::identity(2), &[], &[]).unwrap();
        let plan = CompressionPlan::new(Matrix::from_row_slice(1, 2, &[1.0, 0.0]), true).unwrap();
        assert_eq!(privacy_loss(&geom, &plan, &spec, 0).unwrap()[0], 0.0);
        let u = utility(&geom, &plan, &spec).unwrap();
        assert!((u - 4.0 / 3.0).abs() < 1e-14);
        let none = CompressionPlan::discard(2, true);
        assert_eq!(utility(&geom, &none, &spec).unwrap(), 0.0);
        assert_eq!(privacy_loss(&geom, &none, &spec, 0).unwrap()[0], 0.0);
    }

    #[test]
    fn utility_plus_loss_is_full_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = trace_spec(2, 3, 0.5);
        let pred = GaussianBelief::new(Vector::zeros(5), random_pd(&mut rng, 5), Stage::Predicted).unwrap();
        let geom = step_geometry(&pred, &randn(&mut rng, 4, 5), &random_pd(&mut rng, 4), &[], &[]).unwrap();
        let plan = CompressionPlan::new(randn(&mut rng, 3, 4), true).unwrap();
        let d = error_reduction(&geom, &plan, 0).unwrap();
        let u = utility(&geom, &plan, &spec).unwrap();
        let l = privacy_loss(&geom, &plan, &spec, 0).unwrap()[0];
        assert!((u + l - d.trace()).abs() < 1e-10);
    }

    #[test]
    fn thresholds() {
        let spec = trace_spec(1, 1, 3.0);
        let pred = GaussianBelief::new(Vector::zeros(2), SymMatrix::from_diagonal(&[1.0, 5.0]), Stage::Predicted).unwrap();
        let geom = step_geometry(&pred, &Matrix::identity(2, 2), &SymMatrix::identity(2), &[], &[]).unwrap();
        assert_eq!(loss_thresholds(&geom, &spec, 0).unwrap().as_slice(), &[2.0]);
        let high = trace_spec(1, 1, 10.0);
        assert!(loss_thresholds(&geom, &high, 0).unwrap()[0] < 0.0);
    }

    #[test]
    fn lookahead_examples() {
        let spec = trace_spec(4, 4, 3.0);
        assert_eq!(min_lookahead(&spec, 0.01, 1.0, 2.0).unwrap(), 1);
        let scalar = trace_spec(1, 1, 1.0);
        assert_eq!(min_lookahead(&scalar, 2.0, 1.0, 2.0).unwrap(), 0);
        let s = trace_spec(1, 1, 1.5);
        let got = min_lookahead(&s, 0.1, 0.5, 1.0).unwrap();
        let f = |r: i32| 1.0 * (1.0 - 0.5f64.powi(r)) / 0.5 + 0.5f64.powi(r) * 0.1;
        let first = (0..).find(|&r| f(r) >= 1.5).unwrap();
        assert_eq!(got, (first as usize).saturating_sub(1));
    }

    #[test]
    fn lookahead_without_finite_bound() {
        let s = trace_spec(1, 1, 3.0);
        assert!(matches!(min_lookahead(&s, 0.1, 0.5, 1.0), Err(Error::NoFiniteBound(_))));
        let s = trace_spec(1, 1, 1.0);
        assert!(matches!(min_lookahead(&s, 2.5, 0.5, 1.0), Err(Error::NoFiniteBound(_))));
    }
}
