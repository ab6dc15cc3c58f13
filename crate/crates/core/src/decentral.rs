//! Multi-sensor compression design with block-diagonal plans: exact
//! evaluation, the independent per-sensor approximation, and the sequential
//! broadcast schedule.

use crate::central::{all_thresholds, design_plan, solve_centralized, thetas_from_whitened, DesignProblem};
use crate::error::{Error, Result};
use crate::lds::{CompressionPlan, GaussianBelief};
use crate::linalg::{block_diagonal, sym_inv_sqrt, sym_inverse_floored, sym_sqrt, Matrix, SymMatrix, Vector};
use crate::objectives::{private_error, public_error_trace, step_geometry, PrivacySpec, StepGeometry};

/// Eigenvalue floor for the Gram blocks inverted during block evaluation.
pub const GRAM_FLOOR: f64 = 1e-12;

/// Ordered partition of the measurement rows among sensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorPartition {
    blocks: Vec<Vec<usize>>,
    dim_meas: usize,
}

impl SensorPartition {
    pub fn new(blocks: Vec<Vec<usize>>) -> Result<Self> {
        let n: usize = blocks.iter().map(Vec::len).sum();
        let mut seen = vec![false; n];
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::Config("every sensor needs at least one measurement row".into()));
            }
            for &i in b {
                if i >= n || seen[i] {
                    return Err(Error::Config(format!("row {i} repeated or out of range in sensor partition")));
                }
                seen[i] = true;
            }
        }
        if blocks.is_empty() {
            return Err(Error::Config("sensor partition is empty".into()));
        }
        Ok(SensorPartition { blocks, dim_meas: n })
    }

    /// Contiguous blocks of near-equal size (earlier sensors take the remainder).
    pub fn even(n: usize, sensors: usize) -> Result<Self> {
        if sensors == 0 || sensors > n {
            return Err(Error::Config(format!("cannot split {n} rows among {sensors} sensors")));
        }
        let base = n / sensors;
        let extra = n % sensors;
        let mut start = 0;
        let blocks = (0..sensors)
            .map(|s| {
                let len = base + usize::from(s < extra);
                let b = (start..start + len).collect();
                start += len;
                b
            })
            .collect();
        Self::new(blocks)
    }

    pub fn sensors(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, s: usize) -> &[usize] {
        &self.blocks[s]
    }

    pub fn dim_meas(&self) -> usize {
        self.dim_meas
    }

    /// Rows of every sensor except `s`, in sensor order.
    pub fn others(&self, s: usize) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != s)
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    /// Sensor `s`'s rows of `h`.
    pub fn rows(&self, h: &Matrix, s: usize) -> Matrix {
        h.select_rows(self.block(s))
    }

    /// Sensor `s`'s diagonal block of `r`.
    pub fn noise(&self, r: &SymMatrix, s: usize) -> SymMatrix {
        r.principal(self.block(s))
    }

    /// `r` with every cross-sensor block set to zero.
    pub fn independent_noise(&self, r: &SymMatrix) -> SymMatrix {
        let mut out = Matrix::zeros(r.dim(), r.dim());
        for b in &self.blocks {
            for &i in b {
                for &j in b {
                    out[(i, j)] = r[(i, j)];
                }
            }
        }
        SymMatrix::new(out)
    }

    fn check(&self, dim: usize) -> Result<()> {
        if dim != self.dim_meas {
            return Err(Error::dims("sensor partition", self.dim_meas, dim));
        }
        Ok(())
    }
}

/// Per-sensor compression blocks `C_s` (`M_s × N_s`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub blocks: Vec<CompressionPlan>,
}

impl BlockPlan {
    pub fn discard(part: &SensorPartition) -> Self {
        BlockPlan {
            blocks: part.blocks.iter().map(|b| CompressionPlan::discard(b.len(), true)).collect(),
        }
    }

    pub fn comp_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(CompressionPlan::rank).collect()
    }

    pub fn total_rank(&self) -> usize {
        self.blocks.iter().map(CompressionPlan::rank).sum()
    }

    /// Block-diagonal `C` in global row order.
    pub fn assembled(&self, part: &SensorPartition) -> Matrix {
        let mut c = Matrix::zeros(self.total_rank(), part.dim_meas());
        let mut row = 0;
        for (s, plan) in self.blocks.iter().enumerate() {
            let m = plan.matrix();
            for i in 0..m.nrows() {
                for (j, &col) in part.block(s).iter().enumerate() {
                    c[(row + i, col)] = m[(i, j)];
                }
            }
            row += m.nrows();
        }
        c
    }

    /// The assembled plan; `feasible` is the caller's global verdict.
    pub fn to_plan(&self, part: &SensorPartition, feasible: bool) -> Result<CompressionPlan> {
        CompressionPlan::new(self.assembled(part), feasible)
    }
}

fn floored_inverse(m: &SymMatrix, context: &str) -> Result<SymMatrix> {
    if m.dim() == 0 {
        return Ok(SymMatrix::zeros(0));
    }
    let spec = m.eigen();
    let max = spec.values[0];
    if max <= 0.0 {
        return Err(Error::Singular {
            context: "block Gram matrix",
            min_eig: spec.values[m.dim() - 1],
        });
    }
    let (inv, clamped) = sym_inverse_floored(m, GRAM_FLOOR);
    if clamped {
        log::warn!("{context} near-singular (min eigenvalue {:e}); floored", spec.values[m.dim() - 1]);
    }
    Ok(inv)
}

/// Error-covariance reduction at horizon `n` evaluated block by block from
/// the per-sensor compressions and all pairwise innovation cross-covariances.
pub fn exact_block_reduction(
    geom: &StepGeometry,
    part: &SensorPartition,
    plan: &BlockPlan,
    n: usize,
) -> Result<SymMatrix> {
    part.check(geom.dim_meas())?;
    let g = geom
        .g
        .get(n)
        .ok_or_else(|| Error::dims("exact_block_reduction", format!("horizon <= {}", geom.horizon()), n))?;
    let active: Vec<usize> = (0..part.sensors()).filter(|&s| !plan.blocks[s].is_discard()).collect();
    let l = g.ncols();
    if active.is_empty() {
        return Ok(SymMatrix::zeros(l));
    }
    let dims: Vec<usize> = active.iter().map(|&s| plan.blocks[s].rank()).collect();
    let total: usize = dims.iter().sum();
    let mut y = Matrix::zeros(total, l);
    let mut psi = Matrix::zeros(total, total);
    let mut oi = 0;
    for (a, &si) in active.iter().enumerate() {
        let ci = plan.blocks[si].matrix();
        let yi = ci * g.select_rows(part.block(si));
        y.view_mut((oi, 0), (dims[a], l)).copy_from(&yi);
        let mut oj = 0;
        for (b, &sj) in active.iter().enumerate() {
            let cj = plan.blocks[sj].matrix();
            let t_ij = geom.t.select_rows(part.block(si)).select_columns(part.block(sj));
            let blk = ci * t_ij * cj.transpose();
            psi.view_mut((oi, oj), (dims[a], dims[b])).copy_from(&blk);
            oj += dims[b];
        }
        oi += dims[a];
    }
    let psi_inv = floored_inverse(&SymMatrix::new(psi), "cross-sensor innovation Gram matrix")?;
    Ok(psi_inv.congruence(&y.transpose()))
}

/// Focal-sensor view of the step geometry with the other blocks held fixed.
#[derive(Debug, Clone)]
pub struct SequentialContext {
    pub sensor: usize,
    /// Innovation covariance of sensor `s` conditioned on the others' compressed measurements.
    pub t_eff: SymMatrix,
    pub t_eff_inv_sqrt: SymMatrix,
    /// `T_eff^{-1/2} G_n[I_s]` per horizon.
    pub g_own: Vec<Matrix>,
    /// Whitened part of `G_n[I_s]` already explained by the others, per horizon.
    pub g_others: Vec<Matrix>,
    /// Reduction contributed by the other sensors alone, per horizon.
    pub fixed_reduction: Vec<SymMatrix>,
}

impl SequentialContext {
    /// `g_own − g_others` per horizon.
    pub fn whitened(&self) -> Vec<Matrix> {
        self.g_own.iter().zip(&self.g_others).map(|(a, b)| a - b).collect()
    }

    /// Total reduction at horizon `n` when sensor `s` applies `c_s`.
    pub fn decomposed_reduction(&self, c_s: &Matrix, n: usize) -> Result<SymMatrix> {
        let fixed = &self.fixed_reduction[n];
        if c_s.nrows() == 0 {
            return Ok(fixed.clone());
        }
        let w = &self.g_own[n] - &self.g_others[n];
        let z = c_s * sym_sqrt(&self.t_eff)?.as_matrix() * w;
        let gram = floored_inverse(&self.t_eff.congruence(c_s), "focal-sensor Gram matrix")?;
        Ok(fixed.add(&gram.congruence(&z.transpose())))
    }
}

pub fn sequential_context(
    geom: &StepGeometry,
    part: &SensorPartition,
    plan: &BlockPlan,
    s: usize,
) -> Result<SequentialContext> {
    part.check(geom.dim_meas())?;
    let own = part.block(s);
    let t_ss = geom.t.principal(own);
    let others: Vec<usize> = (0..part.sensors()).filter(|&o| o != s && !plan.blocks[o].is_discard()).collect();
    let l = geom.dim_state();
    let horizons = geom.g.len();

    if others.is_empty() {
        let t_inv_sqrt = sym_inv_sqrt(&t_ss)?;
        return Ok(SequentialContext {
            sensor: s,
            g_own: geom.g.iter().map(|g| t_inv_sqrt.as_matrix() * g.select_rows(own)).collect(),
            g_others: vec![Matrix::zeros(own.len(), l); horizons],
            fixed_reduction: vec![SymMatrix::zeros(l); horizons],
            t_eff: t_ss,
            t_eff_inv_sqrt: t_inv_sqrt,
        });
    }

    let rows_o: Vec<usize> = others.iter().flat_map(|&o| part.block(o).iter().copied()).collect();
    let c_o = block_diagonal(&others.iter().map(|&o| plan.blocks[o].matrix().clone()).collect::<Vec<_>>());
    let phi_o = geom.t.principal(&rows_o).congruence(&c_o);
    let phi_inv = floored_inverse(&phi_o, "other sensors' Gram matrix")?;
    let t_so = geom.t.select_rows(own).select_columns(&rows_o);
    // Gain from the others' compressed innovations onto sensor s's rows.
    let k = &t_so * c_o.transpose() * phi_inv.as_matrix();
    let t_eff = SymMatrix::new(t_ss.as_matrix() - &k * &c_o * t_so.transpose());
    let t_inv_sqrt = sym_inv_sqrt(&t_eff)?;
    let mut g_own = Vec::with_capacity(horizons);
    let mut g_others = Vec::with_capacity(horizons);
    let mut fixed = Vec::with_capacity(horizons);
    for g in &geom.g {
        let cg_o = &c_o * g.select_rows(&rows_o);
        g_own.push(t_inv_sqrt.as_matrix() * g.select_rows(own));
        g_others.push(t_inv_sqrt.as_matrix() * &k * &cg_o);
        fixed.push(phi_inv.congruence(&cg_o.transpose()));
    }
    Ok(SequentialContext {
        sensor: s,
        t_eff,
        t_eff_inv_sqrt: t_inv_sqrt,
        g_own,
        g_others,
        fixed_reduction: fixed,
    })
}

/// Best block for the focal sensor given the fixed others, against the
/// global loss budgets `thresholds[n]`. Returns the 0-row block when the
/// others already exhaust a budget.
pub fn solve_local_given_others(
    ctx: &SequentialContext,
    spec: &PrivacySpec,
    thresholds: &[Vector],
) -> Result<CompressionPlan> {
    let w = ctx.whitened();
    let xi = thetas_from_whitened(&w, spec);
    let local: Vec<Vector> = thresholds
        .iter()
        .zip(&ctx.fixed_reduction)
        .map(|(b, d)| b - private_error(d, spec))
        .collect();
    design_plan(&DesignProblem::new(&xi, spec, &local), &ctx.t_eff_inv_sqrt, &w[0])
}

/// Each sensor designs its block from its own local belief and rows alone,
/// with per-sensor floor `delta_s`. A sensor whose design fails sends nothing.
pub fn solve_no_exchange(
    local_preds: &[GaussianBelief],
    h_blocks: &[Matrix],
    r_blocks: &[SymMatrix],
    f_future: &[Matrix],
    q_future: &[SymMatrix],
    spec: &PrivacySpec,
    delta_s: f64,
) -> Result<BlockPlan> {
    if local_preds.len() != h_blocks.len() || h_blocks.len() != r_blocks.len() {
        return Err(Error::dims("solve_no_exchange", local_preds.len(), h_blocks.len()));
    }
    let mut local_spec = spec.clone();
    local_spec.delta = delta_s;
    let blocks = local_preds
        .iter()
        .zip(h_blocks)
        .zip(r_blocks)
        .enumerate()
        .map(|(s, ((pred, h), r))| {
            solve_centralized(pred, h, r, f_future, q_future, &local_spec).unwrap_or_else(|e| {
                log::warn!("sensor {s}: local design failed ({e}); sending nothing");
                CompressionPlan::discard(h.nrows(), false)
            })
        })
        .collect();
    Ok(BlockPlan { blocks })
}

/// Value snapshot exchanged between sensors during the sequential schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Model { h: Matrix, r: SymMatrix },
    Compression(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sweep: usize,
    pub from: usize,
    pub payload: Payload,
}

#[derive(Debug, Clone)]
pub struct SequentialOptions {
    pub eps_conv: f64,
    pub max_iter: usize,
    /// Sensor visiting order within a sweep; ascending when `None`.
    pub order: Option<Vec<usize>>,
}

impl Default for SequentialOptions {
    fn default() -> Self {
        SequentialOptions {
            eps_conv: 1e-6,
            max_iter: 10,
            order: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequentialOutcome {
    pub plan: BlockPlan,
    /// Global utility of the starting plan followed by one entry per sweep.
    pub trace: Vec<f64>,
    pub feasible: bool,
    pub messages: Vec<Message>,
}

/// Global utility and feasibility of a block plan.
pub fn evaluate_blocks(
    geom: &StepGeometry,
    part: &SensorPartition,
    plan: &BlockPlan,
    spec: &PrivacySpec,
    thresholds: &[Vector],
) -> Result<(f64, bool)> {
    let mut feasible = true;
    let mut util = 0.0;
    for (n, b) in thresholds.iter().enumerate() {
        let d = exact_block_reduction(geom, part, plan, n)?;
        if n == 0 {
            util = public_error_trace(&d, spec);
        }
        let loss = private_error(&d, spec);
        feasible &= loss.iter().zip(b.iter()).all(|(l, b)| *l <= b + 1e-9 * b.abs().max(1.0));
    }
    Ok((util, feasible))
}

/// Sequential broadcast schedule on the fusion center's predicted belief.
///
/// Starts from the independent per-sensor design (each sensor using its own
/// rows with floor `δ/S`), or from an empty plan if that start violates a
/// global budget, then lets each sensor in turn re-solve its block given the
/// latest blocks of the others. A sensor keeps its previous block when the
/// re-solve does not improve the global utility.
#[allow(clippy::too_many_arguments)]
pub fn run_sequential(
    pred: &GaussianBelief,
    h: &Matrix,
    r: &SymMatrix,
    f_future: &[Matrix],
    q_future: &[SymMatrix],
    spec: &PrivacySpec,
    part: &SensorPartition,
    opts: &SequentialOptions,
) -> Result<SequentialOutcome> {
    part.check(h.nrows())?;
    let sensors = part.sensors();
    let order: Vec<usize> = opts.order.clone().unwrap_or_else(|| (0..sensors).collect());
    let geom = step_geometry(pred, h, r, f_future, q_future)?;
    let thresholds = all_thresholds(&geom, spec)?;
    let mut messages = Vec::new();

    if thresholds.iter().any(|b| b.iter().any(|&x| x < 0.0)) {
        let mut plan = BlockPlan::discard(part);
        for b in &mut plan.blocks {
            b.feasible = false;
        }
        return Ok(SequentialOutcome {
            plan,
            trace: vec![0.0],
            feasible: false,
            messages,
        });
    }

    let h_blocks: Vec<Matrix> = (0..sensors).map(|s| part.rows(h, s)).collect();
    let r_blocks: Vec<SymMatrix> = (0..sensors).map(|s| part.noise(r, s)).collect();
    let preds = vec![pred.clone(); sensors];
    let mut plan = solve_no_exchange(
        &preds,
        &h_blocks,
        &r_blocks,
        f_future,
        q_future,
        spec,
        spec.delta / sensors as f64,
    )?;
    let (mut util, ok) = evaluate_blocks(&geom, part, &plan, spec, &thresholds)?;
    if !ok {
        plan = BlockPlan::discard(part);
        util = 0.0;
    }
    let mut trace = vec![util];

    for sweep in 1..=opts.max_iter {
        for &s in &order {
            if sweep == 1 {
                messages.push(Message {
                    sweep,
                    from: s,
                    payload: Payload::Model {
                        h: h_blocks[s].clone(),
                        r: r_blocks[s].clone(),
                    },
                });
            }
            let ctx = sequential_context(&geom, part, &plan, s)?;
            let candidate = solve_local_given_others(&ctx, spec, &thresholds)?;
            let mut trial = plan.clone();
            trial.blocks[s] = candidate;
            let (u, ok) = evaluate_blocks(&geom, part, &trial, spec, &thresholds)?;
            if ok && u > util {
                plan = trial;
                util = u;
            }
            messages.push(Message {
                sweep,
                from: s,
                payload: Payload::Compression(plan.blocks[s].matrix().clone()),
            });
        }
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(util);
        if (util - prev).abs() < opts.eps_conv {
            break;
        }
    }
    for b in &mut plan.blocks {
        b.feasible = true;
    }
    Ok(SequentialOutcome {
        plan,
        trace,
        feasible: true,
        messages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::Stage;
    use crate::linalg::max_abs_diff;
    use crate::objectives::{error_reduction, Lookahead};
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

    fn geometry(rng: &mut ChaCha8Rng, l: usize, n: usize, r: usize) -> (GaussianBelief, Matrix, SymMatrix, StepGeometry) {
        let pred = GaussianBelief::new(Vector::zeros(l), random_pd(rng, l), Stage::Predicted).unwrap();
        let h = randn(rng, n, l);
        let rr = random_pd(rng, n);
        let fs: Vec<Matrix> = (0..r).map(|_| randn(rng, l, l) * 0.5).collect();
        let qs: Vec<SymMatrix> = (0..r).map(|_| SymMatrix::identity(l)).collect();
        let geom = step_geometry(&pred, &h, &rr, &fs, &qs).unwrap();
        (pred, h, rr, geom)
    }

    fn random_blocks(rng: &mut ChaCha8Rng, part: &SensorPartition) -> BlockPlan {
        BlockPlan {
            blocks: (0..part.sensors())
                .map(|s| {
                    let ns = part.block(s).len();
                    let m = rng.random_range(0..=ns);
                    CompressionPlan::new(randn(rng, m, ns), true).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn even_partition() {
        let p = SensorPartition::even(7, 3).unwrap();
        assert_eq!(p.block(0), &[0, 1, 2]);
        assert_eq!(p.block(2), &[5, 6]);
        assert!(SensorPartition::even(2, 3).is_err());
        assert!(SensorPartition::new(vec![vec![0], vec![0]]).is_err());
    }

    #[test]
    fn assembled_is_block_diagonal() {
        let part = SensorPartition::even(5, 2).unwrap();
        let plan = BlockPlan {
            blocks: vec![
                CompressionPlan::new(Matrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]), true).unwrap(),
                CompressionPlan::new(Matrix::from_row_slice(1, 2, &[4.0, 5.0]), true).unwrap(),
            ],
        };
        let c = plan.assembled(&part);
        let want = Matrix::from_row_slice(2, 5, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0, 5.0]);
        assert_eq!(c, want);
    }

    #[test]
    fn single_sensor_matches_central_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, _, _, geom) = geometry(&mut rng, 4, 5, 1);
        let part = SensorPartition::even(5, 1).unwrap();
        let plan = BlockPlan {
            blocks: vec![CompressionPlan::new(randn(&mut rng, 2, 5), true).unwrap()],
        };
        for n in 0..=1 {
            let a = exact_block_reduction(&geom, &part, &plan, n).unwrap();
            let b = error_reduction(&geom, &plan.blocks[0], n).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-10);
        }
        let none = BlockPlan::discard(&part);
        assert_eq!(exact_block_reduction(&geom, &part, &none, 0).unwrap(), SymMatrix::zeros(4));
    }

    #[test]
    fn block_reduction_equals_assembled_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, _, _, geom) = geometry(&mut rng, 4, 7, 1);
        let part = SensorPartition::even(7, 2).unwrap();
        let plan = BlockPlan {
            blocks: vec![
                CompressionPlan::new(randn(&mut rng, 2, 4), true).unwrap(),
                CompressionPlan::new(randn(&mut rng, 1, 3), true).unwrap(),
            ],
        };
        let full = plan.to_plan(&part, true).unwrap();
        for n in 0..=1 {
            let a = exact_block_reduction(&geom, &part, &plan, n).unwrap();
            let b = error_reduction(&geom, &full, n).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-9);
        }
    }

    #[test]
    fn decomposition_matches_exact_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let sensors = rng.random_range(2..=3);
            let n = sensors * rng.random_range(2..=4);
            let (_, _, _, geom) = geometry(&mut rng, 4, n, 1);
            let part = SensorPartition::even(n, sensors).unwrap();
            let plan = random_blocks(&mut rng, &part);
            let s = rng.random_range(0..sensors);
            let ctx = sequential_context(&geom, &part, &plan, s).unwrap();
            for h in 0..=1 {
                let exact = exact_block_reduction(&geom, &part, &plan, h).unwrap();
                let dec = ctx.decomposed_reduction(plan.blocks[s].matrix(), h).unwrap();
                assert!(max_abs_diff(&exact, &dec) < 1e-8);
                assert!(ctx.fixed_reduction[h].min_eigenvalue() > -1e-9);
            }
        }
    }

    #[test]
    fn empty_others_reduce_to_local_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, _, _, geom) = geometry(&mut rng, 3, 6, 0);
        let part = SensorPartition::even(6, 2).unwrap();
        let ctx = sequential_context(&geom, &part, &BlockPlan::discard(&part), 1).unwrap();
        assert!(max_abs_diff(&ctx.t_eff, &geom.t.principal(part.block(1))) < 1e-15);
        assert_eq!(ctx.g_others[0].amax(), 0.0);
    }

    #[test]
    fn exact_reduction_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, _, _, geom) = geometry(&mut rng, 4, 6, 0);
        let part = SensorPartition::even(6, 3).unwrap();
        let plan = random_blocks(&mut rng, &part);
        let swapped = SensorPartition::new(vec![part.block(2).to_vec(), part.block(0).to_vec(), part.block(1).to_vec()]).unwrap();
        let swapped_plan = BlockPlan {
            blocks: vec![plan.blocks[2].clone(), plan.blocks[0].clone(), plan.blocks[1].clone()],
        };
        let a = exact_block_reduction(&geom, &part, &plan, 0).unwrap();
        let b = exact_block_reduction(&geom, &swapped, &swapped_plan, 0).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-10);
    }

    fn spec(delta: f64) -> PrivacySpec {
        PrivacySpec::contiguous(2, 2, PrivacySpec::trace_map(2), delta, Lookahead::Fixed(0)).unwrap()
    }

    #[test]
    fn single_sensor_local_equals_centralized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (pred, h, r, geom) = geometry(&mut rng, 4, 6, 0);
        let sp = spec(0.5);
        let part = SensorPartition::even(6, 1).unwrap();
        let ctx = sequential_context(&geom, &part, &BlockPlan::discard(&part), 0).unwrap();
        let local = solve_local_given_others(&ctx, &sp, &all_thresholds(&geom, &sp).unwrap()).unwrap();
        let central = solve_centralized(&pred, &h, &r, &[], &[], &sp).unwrap();
        assert!(max_abs_diff(local.matrix(), central.matrix()) < 1e-10);
    }

    #[test]
    fn exhausted_budget_sends_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (_, _, _, geom) = geometry(&mut rng, 4, 6, 0);
        let sp = spec(0.1);
        let part = SensorPartition::even(6, 2).unwrap();
        let plan = BlockPlan {
            blocks: vec![CompressionPlan::identity(3), CompressionPlan::identity(3)],
        };
        let ctx = sequential_context(&geom, &part, &plan, 1).unwrap();
        let mut thresholds = all_thresholds(&geom, &sp).unwrap();
        thresholds[0][0] = private_error(&ctx.fixed_reduction[0], &sp)[0] * 0.5;
        let out = solve_local_given_others(&ctx, &sp, &thresholds).unwrap();
        assert!(out.is_discard());
    }

    #[test]
    fn decoupled_sensors_match_exact_evaluation() {
        let l = 4;
        let pred = GaussianBelief::new(Vector::zeros(l), SymMatrix::from_diagonal(&[1.0, 2.0, 3.0, 4.0]), Stage::Predicted).unwrap();
        let h = Matrix::from_row_slice(4, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let r = SymMatrix::identity(4);
        let part = SensorPartition::even(4, 2).unwrap();
        let sp = spec(0.5);
        let geom = step_geometry(&pred, &h, &r, &[], &[]).unwrap();
        assert!(geom.t.select_rows(part.block(0)).select_columns(part.block(1)).amax() == 0.0);
        let preds = vec![pred.clone(), pred.clone()];
        let hb: Vec<Matrix> = (0..2).map(|s| part.rows(&h, s)).collect();
        let rb: Vec<SymMatrix> = (0..2).map(|s| part.noise(&r, s)).collect();
        let plan = solve_no_exchange(&preds, &hb, &rb, &[], &[], &sp, 0.25).unwrap();
        let exact = exact_block_reduction(&geom, &part, &plan, 0).unwrap();
        let mut sum = SymMatrix::zeros(l);
        for s in 0..2 {
            let local = step_geometry(&pred, &hb[s], &rb[s], &[], &[]).unwrap();
            sum = sum.add(&error_reduction(&local, &plan.blocks[s], 0).unwrap());
        }
        assert!(max_abs_diff(&exact, &sum) < 1e-12);
    }

    #[test]
    fn sequential_trace_is_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (pred, h, r, geom) = geometry(&mut rng, 4, 9, 1);
            let prior = private_error(&geom.p_pred[0], &spec(0.0))[0];
            let sp = spec(0.35 * prior / 2.0);
            let part = SensorPartition::even(9, 3).unwrap();
            let fs: Vec<Matrix> = vec![];
            let out = run_sequential(&pred, &h, &r, &fs, &[], &sp, &part, &SequentialOptions::default()).unwrap();
            for w in out.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8);
            }
            let bound = public_error_trace(&pred.cov, &sp);
            assert!(*out.trace.last().unwrap() <= bound + 1e-9);
            let models = out.messages.iter().filter(|m| matches!(m.payload, Payload::Model { .. })).count();
            assert_eq!(models, 3);
        }
    }

    #[test]
    fn single_sensor_sequential_is_centralized() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (pred, h, r, geom) = geometry(&mut rng, 4, 6, 0);
        let sp = spec(0.4);
        let part = SensorPartition::even(6, 1).unwrap();
        let out = run_sequential(&pred, &h, &r, &[], &[], &sp, &part, &SequentialOptions::default()).unwrap();
        let central = solve_centralized(&pred, &h, &r, &[], &[], &sp).unwrap();
        let a = error_reduction(&geom, &out.plan.blocks[0], 0).unwrap();
        let b = error_reduction(&geom, &central, 0).unwrap();
        assert!((public_error_trace(&a, &sp) - public_error_trace(&b, &sp)).abs() < 1e-8);
    }

    #[test]
    fn independent_noise_zeroes_cross_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_pd(&mut rng, 4);
        let part = SensorPartition::even(4, 2).unwrap();
        let ind = part.independent_noise(&r);
        assert_eq!(ind[(0, 3)], 0.0);
        assert_eq!(ind[(1, 1)], r[(1, 1)]);
        assert_eq!(part.independent_noise(&ind), ind);
    }
}
