//! Range-only localization of a unicycle target with an extended Kalman
//! filter, with and without measurement compression.
//!
//! State layout is `[speed, heading, x, y]`; speed is public, heading and
//! position are private.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::central::solve_centralized;
use crate::error::{Error, Result};
use crate::lds::{compressed_update, predict, sample_gaussian, update, GaussianBelief, Stage};
use crate::linalg::{Matrix, SymMatrix, Vector};
use crate::objectives::{Lookahead, PrivacySpec};

pub const DIM_STATE: usize = 4;
const SPEED: usize = 0;
const HEADING: usize = 1;
const POS_X: usize = 2;
const POS_Y: usize = 3;
const MIN_ANCHOR_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EkfSetup {
    pub dt: f64,
    pub steps: usize,
    pub anchors: Vec<[f64; 2]>,
    /// Closed loop visited by the true target.
    pub waypoints: Vec<[f64; 2]>,
    /// True speed on the leg leaving each waypoint.
    pub leg_speeds: Vec<f64>,
    pub p0_scale: f64,
    pub r_var: f64,
    pub q_var: f64,
    /// Floor on the summed private error variance.
    pub private_floor: f64,
    pub seed: u64,
}

impl Default for EkfSetup {
    fn default() -> Self {
        EkfSetup {
            dt: 0.1,
            steps: 318,
            anchors: vec![[-2.0, -2.0], [10.0, -2.0], [10.0, 8.0], [-2.0, 8.0], [4.0, 3.0]],
            waypoints: vec![[0.0, 0.0], [8.0, 0.0], [8.0, 6.0], [0.0, 6.0]],
            leg_speeds: vec![1.0, 1.0, 1.0, 1.0],
            p0_scale: 0.01,
            r_var: 0.04,
            q_var: 0.04,
            private_floor: 2.0,
            seed: 0,
        }
    }
}

impl EkfSetup {
    pub fn privacy_spec(&self) -> Result<PrivacySpec> {
        PrivacySpec::new(
            vec![SPEED],
            vec![HEADING, POS_X, POS_Y],
            PrivacySpec::trace_map(3),
            self.private_floor / 3.0,
            Lookahead::Fixed(0),
        )
    }
}

pub fn motion(x: &Vector, dt: f64) -> Vector {
    let (v, th) = (x[SPEED], x[HEADING]);
    Vector::from_vec(vec![v, th, x[POS_X] + dt * v * th.cos(), x[POS_Y] + dt * v * th.sin()])
}

pub fn motion_jacobian(x: &Vector, dt: f64) -> Matrix {
    let (v, th) = (x[SPEED], x[HEADING]);
    let mut f = Matrix::identity(DIM_STATE, DIM_STATE);
    f[(POS_X, SPEED)] = dt * th.cos();
    f[(POS_X, HEADING)] = -dt * v * th.sin();
    f[(POS_Y, SPEED)] = dt * th.sin();
    f[(POS_Y, HEADING)] = dt * v * th.cos();
    f
}

fn anchor_offset(x: &Vector, anchor: &[f64; 2], index: usize) -> Result<(f64, f64, f64)> {
    let dx = anchor[0] - x[POS_X];
    let dy = anchor[1] - x[POS_Y];
    let d = dx.hypot(dy);
    if d < MIN_ANCHOR_DISTANCE {
        return Err(Error::AnchorCollision { anchor: index, distance: d });
    }
    Ok((dx, dy, d))
}

pub fn ranges(x: &Vector, anchors: &[[f64; 2]]) -> Result<Vector> {
    let d: Vec<f64> = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| anchor_offset(x, a, i).map(|(_, _, d)| d))
        .collect::<Result<_>>()?;
    Ok(Vector::from_vec(d))
}

pub fn range_jacobian(x: &Vector, anchors: &[[f64; 2]]) -> Result<Matrix> {
    let mut h = Matrix::zeros(anchors.len(), DIM_STATE);
    for (i, a) in anchors.iter().enumerate() {
        let (dx, dy, d) = anchor_offset(x, a, i)?;
        h[(i, POS_X)] = -dx / d;
        h[(i, POS_Y)] = -dy / d;
    }
    Ok(h)
}

/// Noise-free target path: constant speed on each leg, heading steered toward
/// the next waypoint.
pub fn truth_trajectory(setup: &EkfSetup) -> Vec<Vector> {
    let wp = &setup.waypoints;
    let start = wp[0];
    let first = wp[1 % wp.len()];
    let leg_speed = |target: usize| setup.leg_speeds[(target + wp.len() - 1) % wp.len() % setup.leg_speeds.len()];
    let mut x = Vector::from_vec(vec![leg_speed(1 % wp.len()), (first[1] - start[1]).atan2(first[0] - start[0]), start[0], start[1]]);
    let mut target = 1 % wp.len();
    let mut path = Vec::with_capacity(setup.steps + 1);
    path.push(x.clone());
    for _ in 1..=setup.steps {
        let goal = wp[target];
        if (goal[0] - x[POS_X]).hypot(goal[1] - x[POS_Y]) < x[SPEED] * setup.dt {
            target = (target + 1) % wp.len();
        }
        let goal = wp[target];
        let bearing = (goal[1] - x[POS_Y]).atan2(goal[0] - x[POS_X]);
        let turn = (bearing - x[HEADING] + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        x[HEADING] += turn;
        x[SPEED] = leg_speed(target);
        x = motion(&x, setup.dt);
        path.push(x.clone());
    }
    path
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfRun {
    /// Index 0 holds the initial state; index `k` the state after step `k`.
    pub truth: Vec<Vector>,
    pub plain: Vec<Vector>,
    pub sanitized: Vec<Vector>,
    /// Compressed dimension per step of the sanitized filter.
    pub m_used: Vec<usize>,
    pub feasible: Vec<bool>,
}

fn ekf_predict(belief: &GaussianBelief, dt: f64, q: &SymMatrix) -> Result<GaussianBelief> {
    let f = motion_jacobian(&belief.mean, dt);
    let mut pred = predict(belief, &f, q)?;
    pred.mean = motion(&belief.mean, dt);
    Ok(pred)
}

/// Linearized measurement at the predicted mean, returned as `(H, z̃)` with
/// `z̃ − H x̂ = z − h(x̂)`.
fn linearize(pred: &GaussianBelief, z: &Vector, anchors: &[[f64; 2]]) -> Result<(Matrix, Vector)> {
    let h = range_jacobian(&pred.mean, anchors)?;
    let pseudo = z - ranges(&pred.mean, anchors)? + &h * &pred.mean;
    Ok((h, pseudo))
}

pub fn run_ekf(setup: &EkfSetup) -> Result<EkfRun> {
    if setup.anchors.is_empty() || setup.waypoints.len() < 2 || setup.leg_speeds.is_empty() {
        return Err(Error::Config("need at least one anchor, two waypoints and one leg speed".into()));
    }
    let spec = setup.privacy_spec()?;
    let truth = truth_trajectory(setup);
    let q = SymMatrix::scaled_identity(DIM_STATE, setup.q_var);
    let r = SymMatrix::scaled_identity(setup.anchors.len(), setup.r_var);
    let prior = GaussianBelief::new(truth[0].clone(), SymMatrix::scaled_identity(DIM_STATE, setup.p0_scale), Stage::Updated)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let (mut plain, mut sanitized) = (prior.clone(), prior);
    let mut run = EkfRun {
        plain: vec![plain.mean.clone()],
        sanitized: vec![sanitized.mean.clone()],
        m_used: Vec::with_capacity(setup.steps),
        feasible: Vec::with_capacity(setup.steps),
        truth: Vec::new(),
    };
    for x in &truth[1..] {
        let z = ranges(x, &setup.anchors)? + sample_gaussian(&mut rng, &r)?;

        let pred = ekf_predict(&plain, setup.dt, &q)?;
        let (h, pseudo) = linearize(&pred, &z, &setup.anchors)?;
        plain = update(&pred, &pseudo, &h, &r)?;

        let pred = ekf_predict(&sanitized, setup.dt, &q)?;
        let (h, pseudo) = linearize(&pred, &z, &setup.anchors)?;
        let plan = solve_centralized(&pred, &h, &r, &[], &[], &spec)?;
        run.m_used.push(plan.rank());
        run.feasible.push(plan.feasible);
        sanitized = compressed_update(&pred, &pseudo, &h, &r, &plan)?;

        run.plain.push(plain.mean.clone());
        run.sanitized.push(sanitized.mean.clone());
    }
    run.truth = truth;
    Ok(run)
}

fn central_difference(f: impl Fn(&Vector) -> Result<Vector>, x: &Vector) -> Result<Matrix> {
    let step = 1e-6;
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += step;
        minus[j] -= step;
        cols.push((f(&plus)? - f(&minus)?) / (2.0 * step));
    }
    Ok(Matrix::from_columns(&cols))
}

/// Largest entrywise gap between the analytic Jacobians and central
/// differences over `samples` random states inside the anchor hull's box.
pub fn jacobian_fd_error<R: Rng + ?Sized>(setup: &EkfSetup, rng: &mut R, samples: usize) -> f64 {
    let (lo, hi) = setup.anchors.iter().fold(([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]), |(lo, hi), a| {
        ([lo[0].min(a[0]), lo[1].min(a[1])], [hi[0].max(a[0]), hi[1].max(a[1])])
    });
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = Vector::from_vec(vec![
            rng.random_range(0.1..2.0),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.random_range(lo[0]..=hi[0]),
            rng.random_range(lo[1]..=hi[1]),
        ]);
        let fd = central_difference(|x| Ok(motion(x, setup.dt)), &x).expect("motion model is total");
        worst = worst.max((fd - motion_jacobian(&x, setup.dt)).amax());
        let (Ok(fd), Ok(h)) = (
            central_difference(|x| ranges(x, &setup.anchors), &x),
            range_jacobian(&x, &setup.anchors),
        ) else {
            continue;
        };
        worst = worst.max((fd - h).amax());
    }
    worst
}

fn rmse(est: &[Vector], truth: &[Vector], err: impl Fn(&Vector, &Vector) -> f64) -> f64 {
    let n = est.len().min(truth.len()).saturating_sub(1);
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = est[1..=n].iter().zip(&truth[1..=n]).map(|(e, t)| err(e, t)).sum();
    (sum / n as f64).sqrt()
}

/// Position RMSE over steps `1..`.
pub fn location_rmse(est: &[Vector], truth: &[Vector]) -> f64 {
    rmse(est, truth, |e, t| (e[POS_X] - t[POS_X]).powi(2) + (e[POS_Y] - t[POS_Y]).powi(2))
}

pub fn speed_rmse(est: &[Vector], truth: &[Vector]) -> f64 {
    rmse(est, truth, |e, t| (e[SPEED] - t[SPEED]).powi(2))
}

pub const TRAJECTORY_HEADER: &str = "k,true_x,true_y,plain_x,plain_y,sanitized_x,sanitized_y";
pub const SPEED_HEADER: &str = "k,true_v,plain_v,sanitized_v";

pub fn write_trajectory<W: Write + ?Sized>(w: &mut W, run: &EkfRun) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for (k, ((t, p), s)) in run.truth.iter().zip(&run.plain).zip(&run.sanitized).enumerate() {
        writeln!(w, "{k},{},{},{},{},{},{}", t[POS_X], t[POS_Y], p[POS_X], p[POS_Y], s[POS_X], s[POS_Y])?;
    }
    Ok(())
}

pub fn write_speed<W: Write + ?Sized>(w: &mut W, run: &EkfRun) -> Result<()> {
    writeln!(w, "{SPEED_HEADER}")?;
    for (k, ((t, p), s)) in run.truth.iter().zip(&run.plain).zip(&run.sanitized).enumerate() {
        writeln!(w, "{k},{},{},{}", t[SPEED], p[SPEED], s[SPEED])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobians_match_finite_differences() {
        let setup = EkfSetup::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(jacobian_fd_error(&setup, &mut rng, 50) < 1e-5);
    }

    #[test]
    fn anchor_collision_is_reported() {
        let x = Vector::from_vec(vec![1.0, 0.0, 4.0, 3.0]);
        let err = ranges(&x, &EkfSetup::default().anchors).unwrap_err();
        assert!(matches!(err, Error::AnchorCollision { anchor: 4, .. }));
    }

    #[test]
    fn truth_visits_waypoints() {
        let setup = EkfSetup::default();
        let path = truth_trajectory(&setup);
        assert_eq!(path.len(), setup.steps + 1);
        for wp in &setup.waypoints[1..] {
            let closest = path
                .iter()
                .map(|x| (x[POS_X] - wp[0]).hypot(x[POS_Y] - wp[1]))
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.2, "{wp:?}: {closest}");
        }
    }

    #[test]
    fn short_run_is_deterministic() {
        let setup = EkfSetup {
            steps: 30,
            seed: 5,
            ..EkfSetup::default()
        };
        let a = run_ekf(&setup).unwrap();
        assert_eq!(a, run_ekf(&setup).unwrap());
        assert_eq!(a.sanitized.len(), 31);
    }
}
