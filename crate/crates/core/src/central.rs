//! Single-sensor compression design: whitened quadratic forms, the
//! multiplier search on the stationarity eigenproblem, and the
//! dimension-descent loop.

use crate::error::Result;
use crate::lds::{CompressionPlan, GaussianBelief};
use crate::linalg::{sym_inv_sqrt, top_nonzero_eigvecs, EigenSelection, Matrix, SymMatrix, Vector};
use crate::objectives::{loss_thresholds, step_geometry, PrivacySpec, StepGeometry};

/// Sweep budget of the cyclic multiplier search.
pub const MAX_SWEEPS: usize = 200;
/// Doublings allowed beyond the initial multiplier bracket.
pub const MAX_DOUBLINGS: usize = 10;
/// Sweeps without incumbent improvement before the search stops.
const STALE_SWEEPS: usize = 2;
const BISECTION_REL_TOL: f64 = 1e-9;
const MAX_BISECTION_STEPS: usize = 80;
const FEAS_REL_TOL: f64 = 1e-9;

/// Quadratic forms `W[:, I] W[:, I]ᵀ` of the whitened cross-covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSet {
    pub theta_p: SymMatrix,
    /// Indexed `[n][j]` over horizons and private states.
    pub theta_q: Vec<Vec<SymMatrix>>,
}

impl ThetaSet {
    pub fn horizon(&self) -> usize {
        self.theta_q.len() - 1
    }
}

fn column_outer(w: &Matrix, idx: &[usize]) -> SymMatrix {
    let cols = w.select_columns(idx);
    SymMatrix::new(&cols * cols.transpose())
}

/// Builds the quadratic forms from whitened matrices `W_n` (one per horizon).
pub fn thetas_from_whitened(w_by_n: &[Matrix], spec: &PrivacySpec) -> ThetaSet {
    ThetaSet {
        theta_p: column_outer(&w_by_n[0], spec.public_idx()),
        theta_q: w_by_n
            .iter()
            .map(|w| spec.private_idx().iter().map(|&j| column_outer(w, &[j])).collect())
            .collect(),
    }
}

/// `W_n = T^{-1/2} G_n` for every horizon.
pub fn whitened_cross(geom: &StepGeometry) -> Result<(SymMatrix, Vec<Matrix>)> {
    let t_inv_sqrt = sym_inv_sqrt(&geom.t)?;
    let w = geom.g.iter().map(|g| t_inv_sqrt.as_matrix() * g).collect();
    Ok((t_inv_sqrt, w))
}

pub fn build_thetas(geom: &StepGeometry, spec: &PrivacySpec) -> Result<ThetaSet> {
    let (_, w) = whitened_cross(geom)?;
    Ok(thetas_from_whitened(&w, spec))
}

/// Non-negative Lagrange multipliers indexed by horizon and map output.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierVector {
    pub outputs: usize,
    pub gamma: Vec<f64>,
}

impl MultiplierVector {
    pub fn zeros(horizons: usize, outputs: usize) -> Self {
        MultiplierVector {
            outputs,
            gamma: vec![0.0; horizons * outputs],
        }
    }

    pub fn get(&self, n: usize, f: usize) -> f64 {
        self.gamma[n * self.outputs + f]
    }

    pub fn set(&mut self, n: usize, f: usize, value: f64) {
        self.gamma[n * self.outputs + f] = value;
    }
}

/// Trace-quadratic program `max tr(Uᵀ Θ_P U)` subject to
/// `tr(Uᵀ Λ_c U) ≤ b_c`, one constraint per (horizon, map output).
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub theta_p: SymMatrix,
    pub constraints: Vec<SymMatrix>,
    pub thresholds: Vec<f64>,
    /// Upper bound on the useful compressed dimension.
    pub max_rank: usize,
    outputs: usize,
}

/// Stationary basis for one multiplier vector, with its objective values.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub gamma: Vec<f64>,
    pub basis: EigenSelection,
    pub utility: f64,
    pub losses: Vec<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct MultiplierSolution {
    pub gamma: MultiplierVector,
    pub basis: EigenSelection,
    pub utility: f64,
    pub losses: Vec<f64>,
    pub feasible: bool,
}

fn quad_trace(u: &Matrix, a: &SymMatrix) -> f64 {
    if u.ncols() == 0 {
        return 0.0;
    }
    (u.transpose() * a.as_matrix() * u).trace()
}

fn feasible_loss(loss: f64, threshold: f64) -> bool {
    loss <= threshold + FEAS_REL_TOL * threshold.abs().max(1.0)
}

impl DesignProblem {
    /// `thresholds[n]` holds the `|F|` loss budgets at horizon `n`.
    pub fn new(thetas: &ThetaSet, spec: &PrivacySpec, thresholds: &[Vector]) -> Self {
        let map = spec.map();
        let outputs = map.nrows();
        let dim = thetas.theta_p.dim();
        let mut constraints = Vec::with_capacity(thetas.theta_q.len() * outputs);
        let mut budgets = Vec::with_capacity(constraints.capacity());
        for (n, per_state) in thetas.theta_q.iter().enumerate() {
            for f in 0..outputs {
                let mut acc = Matrix::zeros(dim, dim);
                for (j, theta) in per_state.iter().enumerate() {
                    let a = map[(f, j)];
                    if a != 0.0 {
                        acc += theta.as_matrix() * a;
                    }
                }
                constraints.push(SymMatrix::new(acc));
                budgets.push(thresholds[n][f]);
            }
        }
        let max_rank = dim.min(spec.public_idx().len() + thetas.theta_q.len() * spec.private_idx().len());
        DesignProblem {
            theta_p: thetas.theta_p.clone(),
            constraints,
            thresholds: budgets,
            max_rank,
            outputs,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_p.dim()
    }

    /// `Θ_P − Σ_c γ_c Λ_c`.
    pub fn lagrangian(&self, gamma: &[f64]) -> SymMatrix {
        let mut phi = self.theta_p.as_matrix().clone();
        for (g, lam) in gamma.iter().zip(&self.constraints) {
            if *g != 0.0 {
                phi -= lam.as_matrix() * *g;
            }
        }
        SymMatrix::new(phi)
    }

    /// Stationary basis at `gamma`: the leading `m` eigenvectors of the
    /// Lagrangian with positive eigenvalue. Negative directions lower the
    /// Lagrangian, so fewer than `m` columns may come back.
    pub fn evaluate(&self, gamma: &[f64], m: usize) -> Candidate {
        let basis = top_nonzero_eigvecs(&self.lagrangian(gamma), m, None);
        let positive = basis.values.iter().take_while(|&&v| v > 0.0).count();
        self.assess(gamma.to_vec(), basis.truncate(positive))
    }

    /// Objective values of an arbitrary orthonormal basis.
    pub fn assess(&self, gamma: Vec<f64>, basis: EigenSelection) -> Candidate {
        let u = &basis.vectors;
        let utility = quad_trace(u, &self.theta_p);
        let losses: Vec<f64> = self.constraints.iter().map(|c| quad_trace(u, c)).collect();
        let feasible = losses.iter().zip(&self.thresholds).all(|(l, b)| feasible_loss(*l, *b));
        Candidate {
            gamma,
            basis,
            utility,
            losses,
            feasible,
        }
    }

    fn initial_bracket(&self, c: usize) -> f64 {
        let scale = self.theta_p.trace().max(1e-12);
        1e3 * scale / self.thresholds[c].max(1e-6)
    }

    /// Longest feasible leading sub-basis of `cand`; losses grow with every
    /// added column, so it is also the best feasible one.
    fn feasible_prefix(&self, cand: &Candidate) -> Option<Candidate> {
        let u = &cand.basis.vectors;
        let mut utility = 0.0;
        let mut losses = vec![0.0; self.constraints.len()];
        let mut keep = 0;
        for i in 0..u.ncols() {
            let col = u.column(i);
            let next: Vec<f64> = self
                .constraints
                .iter()
                .zip(&losses)
                .map(|(c, l)| l + (col.transpose() * c.as_matrix() * col)[(0, 0)])
                .collect();
            if !next.iter().zip(&self.thresholds).all(|(l, b)| feasible_loss(*l, *b)) {
                break;
            }
            utility += (col.transpose() * self.theta_p.as_matrix() * col)[(0, 0)];
            losses = next;
            keep = i + 1;
        }
        if keep == 0 {
            return None;
        }
        let basis = cand.basis.truncate(keep);
        Some(Candidate {
            gamma: cand.gamma.clone(),
            basis,
            utility,
            losses,
            feasible: true,
        })
    }

    /// Keeps the better of `best` and the best feasible part of `cand`.
    fn record(&self, cand: &Candidate, best: &mut Option<Candidate>) {
        let found = if cand.feasible {
            Some(cand.clone())
        } else {
            self.feasible_prefix(cand)
        };
        if let Some(f) = found {
            if best.as_ref().is_none_or(|b| f.utility > b.utility) {
                *best = Some(f);
            }
        }
    }

    /// Appends directions from the orthogonal complement of a feasible
    /// candidate while a single loss budget has slack, up to `m` columns.
    fn fill_slack(&self, mut cand: Candidate, m: usize) -> Candidate {
        if self.constraints.len() != 1 || !cand.feasible {
            return cand;
        }
        while cand.basis.len() < m.min(self.dim()) {
            let Some((dir, value)) = self.best_complement_direction(&cand) else {
                break;
            };
            let k = cand.basis.len();
            let mut vectors = cand.basis.vectors.clone().insert_column(k, 0.0);
            vectors.set_column(k, &dir);
            let values = cand.basis.values.clone().insert_row(k, value);
            let next = self.assess(cand.gamma.clone(), EigenSelection { vectors, values });
            if !next.feasible || next.utility <= cand.utility {
                break;
            }
            cand = next;
        }
        cand
    }

    /// Best unit direction orthogonal to `cand` for the remaining budget.
    /// The joint range of two quadratic forms over the sphere is convex, so
    /// the optimum mixes the two leading eigenvectors of `A − μB` at the
    /// multiplier where the budget becomes tight.
    fn best_complement_direction(&self, cand: &Candidate) -> Option<(Vector, f64)> {
        let dim = self.dim();
        let u = &cand.basis.vectors;
        let proj = SymMatrix::new(Matrix::identity(dim, dim) - u * u.transpose());
        let comp = top_nonzero_eigvecs(&proj, dim - u.ncols(), Some(0.5)).vectors;
        if comp.ncols() == 0 {
            return None;
        }
        let a = comp.transpose() * self.theta_p.as_matrix() * &comp;
        let b = comp.transpose() * self.constraints[0].as_matrix() * &comp;
        let cost = |y: &Vector| y.dot(&(&b * y));
        let fits = |y: &Vector| feasible_loss(cand.losses[0] + cost(y), self.thresholds[0]);
        let top = |mu: f64| SymMatrix::new(&a - &b * mu).eigen().vectors.column(0).into_owned();

        let y0 = top(0.0);
        let y = if fits(&y0) {
            y0
        } else {
            let b_sym = SymMatrix::new(b.clone());
            if !feasible_loss(cand.losses[0] + b_sym.min_eigenvalue(), self.thresholds[0]) {
                return None;
            }
            let scale = SymMatrix::new(a.clone()).eigen().radius().max(1e-300) / b_sym.eigen().radius().max(1e-300);
            let (mut lo, mut y_lo) = (0.0, y0);
            let mut hi = scale;
            let mut y_hi = top(hi);
            for _ in 0..200 {
                if fits(&y_hi) {
                    break;
                }
                (lo, y_lo) = (hi, y_hi);
                hi *= 2.0;
                y_hi = top(hi);
            }
            if !fits(&y_hi) {
                return None;
            }
            for _ in 0..100 {
                if hi - lo <= 1e-13 * hi {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let y = top(mid);
                if fits(&y) {
                    (hi, y_hi) = (mid, y);
                } else {
                    (lo, y_lo) = (mid, y);
                }
            }
            let along = y_hi.dot(&y_lo);
            let w = &y_lo - &y_hi * along;
            let w_norm = w.norm();
            if w_norm < 1e-12 {
                y_hi
            } else {
                let w = w / w_norm;
                let (mut t_fit, mut t_over) = (0.0, y_lo.dot(&w).atan2(along));
                let at = |t: f64| &y_hi * t.cos() + &w * t.sin();
                for _ in 0..60 {
                    let mid = 0.5 * (t_fit + t_over);
                    if fits(&at(mid)) {
                        t_fit = mid;
                    } else {
                        t_over = mid;
                    }
                }
                let mixed = at(t_fit);
                if mixed.dot(&(&a * &mixed)) > y_hi.dot(&(&a * &y_hi)) {
                    mixed
                } else {
                    y_hi
                }
            }
        };
        let gain = y.dot(&(&a * &y));
        (gain > 0.0).then(|| (&comp * &y, gain))
    }

    /// Smallest `γ_c` meeting constraint `c` with the other multipliers held.
    /// The bracket starts from the current `γ_c`; the root of the loss excess
    /// is refined by Illinois-style false position.
    fn coordinate_bisection(
        &self,
        gamma: &mut Vec<f64>,
        c: usize,
        m: usize,
        incumbent: &mut Option<Candidate>,
    ) -> Option<Candidate> {
        let b = self.thresholds[c];
        let warm = gamma[c];
        let mut probe = |g: f64, gamma: &mut Vec<f64>| {
            gamma[c] = g;
            let cand = self.evaluate(gamma, m);
            self.record(&cand, incumbent);
            cand
        };

        let at_zero = probe(0.0, gamma);
        if feasible_loss(at_zero.losses[c], b) {
            return Some(at_zero);
        }
        let (mut lo, mut f_lo) = (0.0, at_zero.losses[c] - b);
        let mut hi = if warm > 0.0 { warm } else { self.initial_bracket(c) };
        let mut best = None;
        for _ in 0..=MAX_DOUBLINGS + 40 {
            let cand = probe(hi, gamma);
            let excess = cand.losses[c] - b;
            if feasible_loss(cand.losses[c], b) {
                best = Some((cand, excess));
                break;
            }
            (lo, f_lo) = (hi, excess);
            hi *= 2.0;
        }
        let (mut best, mut f_hi) = best?;
        if warm > 0.0 && hi == warm {
            let mut down = 0.5 * hi;
            for _ in 0..40 {
                if down <= lo {
                    break;
                }
                let cand = probe(down, gamma);
                let excess = cand.losses[c] - b;
                if feasible_loss(cand.losses[c], b) {
                    (hi, f_hi, best) = (down, excess, cand);
                    down *= 0.5;
                } else {
                    (lo, f_lo) = (down, excess);
                    break;
                }
            }
        }

        let tight = FEAS_REL_TOL * b.abs().max(1.0);
        let mut side = 0i8;
        for _ in 0..MAX_BISECTION_STEPS {
            if hi - lo <= BISECTION_REL_TOL * hi || f_hi.abs() <= tight {
                break;
            }
            let width = hi - lo;
            let mut mid = if f_lo > 0.0 && f_hi < 0.0 {
                hi - f_hi * width / (f_hi - f_lo)
            } else {
                0.5 * (lo + hi)
            };
            if !(mid > lo + 0.01 * width && mid < hi - 0.01 * width) {
                mid = 0.5 * (lo + hi);
            }
            let cand = probe(mid, gamma);
            let excess = cand.losses[c] - b;
            if feasible_loss(cand.losses[c], b) {
                (hi, f_hi, best) = (mid, excess, cand);
                if side == 1 {
                    f_lo *= 0.5;
                }
                side = 1;
            } else {
                (lo, f_lo) = (mid, excess);
                if side == -1 {
                    f_hi *= 0.5;
                }
                side = -1;
            }
        }
        gamma[c] = hi;
        Some(best)
    }

    /// Multiplier search at a fixed dimension `m ≥ 1`. Every evaluated basis
    /// also offers its feasible leading columns, so the result may have fewer
    /// than `m` columns.
    pub fn solve(&self, m: usize) -> MultiplierSolution {
        let count = self.constraints.len();
        let mut gamma = vec![0.0; count];
        let start = self.evaluate(&gamma, m);
        if start.feasible || self.thresholds.iter().any(|&b| b < 0.0) {
            return self.finish(start);
        }
        let mut best: Option<Candidate> = None;
        self.record(&start, &mut best);
        let mut last = start;
        let mut stale = 0;
        for _ in 0..MAX_SWEEPS {
            let best_before = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.utility);
            let before = gamma.clone();
            for c in 0..count {
                match self.coordinate_bisection(&mut gamma, c, m, &mut best) {
                    Some(cand) => last = cand,
                    None => return self.conclude(best, last, m),
                }
            }
            if count > 1 {
                last = self.evaluate(&gamma, m);
            }
            self.record(&last, &mut best);
            let moved = gamma
                .iter()
                .zip(&before)
                .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-300))
                .fold(0.0, f64::max);
            let best_after = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.utility);
            if best_after > best_before + 1e-12 * best_after.abs().max(1.0) {
                stale = 0;
            } else {
                stale += 1;
            }
            if count == 1 || (last.feasible && moved < 1e-6) || moved < 1e-12 || stale >= STALE_SWEEPS {
                break;
            }
        }
        self.conclude(best, last, m)
    }

    /// Best feasible candidate (the empty basis if nothing else fits) with
    /// any remaining budget filled; `last` when even that is infeasible.
    fn conclude(&self, best: Option<Candidate>, last: Candidate, m: usize) -> MultiplierSolution {
        let chosen = match best {
            Some(b) => b,
            None => {
                let empty = self.assess(last.gamma.clone(), EigenSelection::empty(self.dim()));
                if empty.feasible {
                    empty
                } else {
                    last
                }
            }
        };
        self.finish(self.fill_slack(chosen, m))
    }

    fn finish(&self, cand: Candidate) -> MultiplierSolution {
        MultiplierSolution {
            gamma: MultiplierVector {
                outputs: self.outputs,
                gamma: cand.gamma,
            },
            basis: cand.basis,
            utility: cand.utility,
            losses: cand.losses,
            feasible: cand.feasible,
        }
    }

    /// Descends `M` from `max_rank`; returns the first feasible solution, or
    /// `None` when every `M ≥ 1` fails.
    pub fn descend(&self) -> Option<MultiplierSolution> {
        if self.thresholds.iter().any(|&b| b < 0.0) {
            return None;
        }
        for m in (1..=self.max_rank).rev() {
            let sol = self.solve(m);
            if sol.feasible && !sol.basis.is_empty() {
                return Some(sol);
            }
        }
        None
    }

    /// Whether forwarding the whole whitened measurement meets every budget.
    pub fn full_information_feasible(&self) -> bool {
        self.constraints
            .iter()
            .zip(&self.thresholds)
            .all(|(c, &b)| feasible_loss(c.trace(), b))
    }

    /// Whether the empty compression meets every budget.
    pub fn discard_feasible(&self) -> bool {
        self.thresholds.iter().all(|&b| feasible_loss(0.0, b))
    }
}

pub fn solve_multipliers(
    thetas: &ThetaSet,
    geom: &StepGeometry,
    spec: &PrivacySpec,
    m: usize,
) -> Result<MultiplierSolution> {
    let thresholds = all_thresholds(geom, spec)?;
    Ok(DesignProblem::new(thetas, spec, &thresholds).solve(m))
}

pub(crate) fn all_thresholds(geom: &StepGeometry, spec: &PrivacySpec) -> Result<Vec<Vector>> {
    (0..=geom.horizon()).map(|n| loss_thresholds(geom, spec, n)).collect()
}

/// Turns an orthonormal basis in whitened coordinates into `C = Uᵀ T^{-1/2}`.
pub(crate) fn plan_from_basis(
    basis: Option<&EigenSelection>,
    t_inv_sqrt: &SymMatrix,
    discard_feasible: bool,
) -> Result<CompressionPlan> {
    match basis {
        Some(sel) => CompressionPlan::new(sel.vectors.transpose() * t_inv_sqrt.as_matrix(), true),
        None => Ok(CompressionPlan::discard(t_inv_sqrt.dim(), discard_feasible)),
    }
}

/// Full-information plan when it meets every budget, otherwise the descent
/// over `M`. `w0` is the whitened cross-covariance at the current step; its
/// range contains that of every later horizon.
pub(crate) fn design_plan(problem: &DesignProblem, t_inv_sqrt: &SymMatrix, w0: &Matrix) -> Result<CompressionPlan> {
    if problem.full_information_feasible() {
        let gram = SymMatrix::new(w0 * w0.transpose());
        let range = top_nonzero_eigvecs(&gram, gram.dim(), None);
        if range.is_empty() {
            return Ok(CompressionPlan::discard(t_inv_sqrt.dim(), true));
        }
        return plan_from_basis(Some(&range), t_inv_sqrt, true);
    }
    let sol = problem.descend();
    plan_from_basis(sol.as_ref().map(|s| &s.basis), t_inv_sqrt, problem.discard_feasible())
}

/// Compression design from a precomputed step geometry.
pub fn design_from_geometry(geom: &StepGeometry, spec: &PrivacySpec) -> Result<CompressionPlan> {
    let (t_inv_sqrt, w) = whitened_cross(geom)?;
    let thetas = thetas_from_whitened(&w, spec);
    let thresholds = all_thresholds(geom, spec)?;
    design_plan(&DesignProblem::new(&thetas, spec, &thresholds), &t_inv_sqrt, &w[0])
}

pub fn solve_centralized(
    pred: &GaussianBelief,
    h: &Matrix,
    r: &SymMatrix,
    f_future: &[Matrix],
    q_future: &[SymMatrix],
    spec: &PrivacySpec,
) -> Result<CompressionPlan> {
    let geom = step_geometry(pred, h, r, f_future, q_future)?;
    design_from_geometry(&geom, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::Stage;
    use crate::linalg::{inertia, max_abs_diff};
    use crate::objectives::{privacy_loss, utility, Lookahead};
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

    fn instance(seed: u64, l: usize, n: usize, r: usize) -> (GaussianBelief, Matrix, SymMatrix, Vec<Matrix>, Vec<SymMatrix>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = GaussianBelief::new(Vector::zeros(l), random_pd(&mut rng, l), Stage::Predicted).unwrap();
        let h = randn(&mut rng, n, l);
        let rr = SymMatrix::identity(n);
        let fs = (0..r).map(|_| randn(&mut rng, l, l) * 0.5).collect();
        let qs = (0..r).map(|_| SymMatrix::identity(l)).collect();
        (pred, h, rr, fs, qs)
    }

    fn spec(p: usize, q: usize, delta: f64) -> PrivacySpec {
        PrivacySpec::contiguous(p, q, PrivacySpec::trace_map(q), delta, Lookahead::Fixed(0)).unwrap()
    }

    #[test]
    fn scalar_theta() {
        let pred = GaussianBelief::new(Vector::zeros(1), SymMatrix::identity(1), Stage::Predicted).unwrap();
        let geom = step_geometry(&pred, &Matrix::identity(1, 1), &SymMatrix::identity(1), &[], &[]).unwrap();
        let spec = PrivacySpec::new(vec![], vec![0], PrivacySpec::trace_map(1), 0.0, Lookahead::Fixed(0)).unwrap();
        let th = build_thetas(&geom, &spec).unwrap();
        assert!((th.theta_q[0][0][(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(th.theta_p[(0, 0)], 0.0);
    }

    #[test]
    fn disjoint_sets_on_diagonal_g_are_orthogonal() {
        let pred = GaussianBelief::new(Vector::zeros(2), SymMatrix::from_diagonal(&[2.0, 3.0]), Stage::Predicted).unwrap();
        let geom = step_geometry(&pred, &Matrix::identity(2, 2), &SymMatrix::identity(2), &[], &[]).unwrap();
        let th = build_thetas(&geom, &spec(1, 1, 0.0)).unwrap();
        let prod = th.theta_p.as_matrix() * th.theta_q[0][0].as_matrix();
        assert!(prod.amax() < 1e-15);
    }

    #[test]
    fn theta_trace_matches_reduction_path() {
        let (pred, h, r, fs, qs) = instance(21, 4, 5, 1);
        let geom = step_geometry(&pred, &h, &r, &fs, &qs).unwrap();
        let sp = spec(2, 2, 0.0);
        let (_, w) = whitened_cross(&geom).unwrap();
        let th = thetas_from_whitened(&w, &sp);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = randn(&mut rng, 3, 5);
        // Orthonormal basis for the rows of C in whitened coordinates.
        let whitened_rows = (&c * crate::linalg::sym_sqrt(&geom.t).unwrap().as_matrix()).transpose();
        let u = whitened_rows.qr().q();
        let plan = CompressionPlan::new(c, true).unwrap();
        let ut = quad_trace(&u, &th.theta_p);
        assert!((ut - utility(&geom, &plan, &sp).unwrap()).abs() < 1e-9);
        let loss1: f64 = th.theta_q[1].iter().map(|t| quad_trace(&u, t)).sum();
        assert!((loss1 - privacy_loss(&geom, &plan, &sp, 1).unwrap()[0]).abs() < 1e-9);
    }

    #[test]
    fn zero_multipliers_give_public_principal_directions() {
        let (pred, h, r, _, _) = instance(4, 4, 6, 0);
        let geom = step_geometry(&pred, &h, &r, &[], &[]).unwrap();
        let sp = spec(2, 2, 0.0);
        let th = build_thetas(&geom, &sp).unwrap();
        let problem = DesignProblem::new(&th, &sp, &all_thresholds(&geom, &sp).unwrap());
        let cand = problem.evaluate(&[0.0], 2);
        let direct = top_nonzero_eigvecs(&th.theta_p, 2, None);
        assert!(max_abs_diff(&cand.basis.vectors, &direct.vectors) < 1e-12);
    }

    #[test]
    fn selection_respects_inertia_bound() {
        let (pred, h, r, fs, qs) = instance(5, 4, 8, 1);
        let geom = step_geometry(&pred, &h, &r, &fs, &qs).unwrap();
        let sp = spec(2, 2, 0.0);
        let th = build_thetas(&geom, &sp).unwrap();
        let problem = DesignProblem::new(&th, &sp, &all_thresholds(&geom, &sp).unwrap());
        let gamma = [0.7, 1.3];
        let phi = problem.lagrangian(&gamma);
        let inr = inertia(&phi, 1e-10 * phi.eigen().radius());
        let cand = problem.evaluate(&gamma, 8);
        assert!(cand.basis.len() <= inr.positive + inr.negative);
        assert!(cand.basis.len() <= problem.max_rank);
        assert_eq!(problem.max_rank, 6);
    }

    #[test]
    fn slack_constraints_return_zero_multiplier() {
        let (pred, h, r, _, _) = instance(6, 4, 6, 0);
        let geom = step_geometry(&pred, &h, &r, &[], &[]).unwrap();
        let sp = spec(2, 2, 0.0);
        let th = build_thetas(&geom, &sp).unwrap();
        let sol = solve_multipliers(&th, &geom, &sp, 2).unwrap();
        assert!(sol.feasible);
        assert_eq!(sol.gamma.gamma, vec![0.0]);
    }

    #[test]
    fn single_constraint_bisection_beats_grid() {
        for seed in 0..5 {
            let (pred, h, r, _, _) = instance(100 + seed, 4, 6, 0);
            let geom = step_geometry(&pred, &h, &r, &[], &[]).unwrap();
            let sp = spec(2, 2, 0.0);
            let th = build_thetas(&geom, &sp).unwrap();
            let mut thresholds = all_thresholds(&geom, &sp).unwrap();
            let full = DesignProblem::new(&th, &sp, &thresholds).evaluate(&[0.0], 2).losses[0];
            thresholds[0][0] = 0.4 * full;
            let problem = DesignProblem::new(&th, &sp, &thresholds);
            let sol = problem.solve(2);
            let gmax = sol.gamma.gamma[0].max(problem.initial_bracket(0)) * 20.0;
            let mut any = false;
            for i in 0..=1000 {
                let cand = problem.evaluate(&[gmax * i as f64 / 1000.0], 2);
                if cand.feasible {
                    any = true;
                    assert!(sol.feasible, "seed {seed}: grid found a feasible point");
                    assert!(sol.utility >= cand.utility - 1e-6, "seed {seed}: grid point {i} better");
                }
            }
            if any {
                assert!(sol.losses[0] <= thresholds[0][0] * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn vacuous_floor_recovers_full_public_utility() {
        let (pred, h, r, _, _) = instance(7, 4, 6, 0);
        let sp = spec(2, 2, 0.0);
        let plan = solve_centralized(&pred, &h, &r, &[], &[], &sp).unwrap();
        let geom = step_geometry(&pred, &h, &r, &[], &[]).unwrap();
        let full = utility(&geom, &CompressionPlan::identity(6), &sp).unwrap();
        assert!((utility(&geom, &plan, &sp).unwrap() - full).abs() < 1e-8);
        assert!(plan.feasible);
    }

    #[test]
    fn negative_threshold_discards() {
        let (pred, h, r, _, _) = instance(8, 4, 6, 0);
        let sp = spec(2, 2, 1e6);
        let plan = solve_centralized(&pred, &h, &r, &[], &[], &sp).unwrap();
        assert!(plan.is_discard());
        assert!(!plan.feasible);
    }

    #[test]
    fn returned_plan_is_whitened_and_feasible() {
        for seed in 0..10 {
            let (pred, h, r, fs, qs) = instance(200 + seed, 4, 6, 1);
            let geom = step_geometry(&pred, &h, &r, &fs, &qs).unwrap();
            let prior = crate::objectives::private_error(&geom.p_pred[0], &spec(2, 2, 0.0))[0];
            let sp = spec(2, 2, 0.3 * prior / 2.0);
            let plan = design_from_geometry(&geom, &sp).unwrap();
            if plan.is_discard() {
                continue;
            }
            let c = plan.matrix();
            let gram = c * geom.t.as_matrix() * c.transpose();
            assert!(max_abs_diff(&gram, &Matrix::identity(c.nrows(), c.nrows())) < 1e-8);
            for n in 0..=1 {
                let loss = privacy_loss(&geom, &plan, &sp, n).unwrap()[0];
                let b = loss_thresholds(&geom, &sp, n).unwrap()[0];
                assert!(loss <= b + 1e-6, "seed {seed} horizon {n}: {loss} > {b}");
            }
        }
    }
}
