//! Random problem instances for self-checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::decentral::{BlockPlan, SensorPartition};
use crate::error::Result;
use crate::lds::{CompressionPlan, GaussianBelief, Stage};
use crate::linalg::{Matrix, SymMatrix, Vector};
use crate::objectives::{step_geometry, StepGeometry};

pub fn randn<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// `X Xᵀ + floor·I` with Gaussian `X`.
pub fn random_pd<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> SymMatrix {
    let x = randn(rng, n, n);
    SymMatrix::new(&x * x.transpose() + Matrix::identity(n, n) * floor)
}

/// One filtering step: predicted belief, measurement model and `horizon`
/// future transitions.
#[derive(Debug, Clone)]
pub struct StepInstance {
    pub pred: GaussianBelief,
    pub h: Matrix,
    pub r: SymMatrix,
    pub f_future: Vec<Matrix>,
    pub q_future: Vec<SymMatrix>,
}

impl StepInstance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, l: usize, n: usize, horizon: usize) -> Result<Self> {
        let mean = Vector::from_iterator(l, (0..l).map(|_| rng.sample(StandardNormal)));
        let pred = GaussianBelief::new(mean, random_pd(rng, l, 0.1), Stage::Predicted)?;
        let h = randn(rng, n, l);
        let r = random_pd(rng, n, 0.5);
        let f_future = (0..horizon).map(|_| randn(rng, l, l) / (l as f64).sqrt()).collect();
        let q_future = (0..horizon).map(|_| random_pd(rng, l, 0.1).scale(0.2)).collect();
        Ok(StepInstance {
            pred,
            h,
            r,
            f_future,
            q_future,
        })
    }

    pub fn geometry(&self) -> Result<StepGeometry> {
        step_geometry(&self.pred, &self.h, &self.r, &self.f_future, &self.q_future)
    }
}

/// Compression with `m` rows for `n` inputs and singular values in
/// `[0.5, 2]`; `m = 0` gives the empty plan.
pub fn random_plan<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize) -> Result<CompressionPlan> {
    if m == 0 {
        return Ok(CompressionPlan::discard(n, true));
    }
    let u = randn(rng, m, m).qr().q();
    let v = randn(rng, n, n).qr().q();
    let s = Matrix::from_fn(m, m, |i, j| if i == j { rng.random_range(0.5..=2.0) } else { 0.0 });
    CompressionPlan::new(u * s * v.rows(0, m), true)
}

/// Random per-sensor blocks with `M_s` drawn from `0..=N_s`.
pub fn random_block_plan<R: Rng + ?Sized>(rng: &mut R, part: &SensorPartition) -> Result<BlockPlan> {
    let blocks = (0..part.sensors())
        .map(|s| {
            let n = part.block(s).len();
            let m = rng.random_range(0..=n);
            random_plan(rng, m, n)
        })
        .collect::<Result<_>>()?;
    Ok(BlockPlan { blocks })
}
