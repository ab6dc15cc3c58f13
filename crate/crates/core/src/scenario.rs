//! Scenario configuration, model generators, and the closed-loop experiment
//! driver.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::baselines::{baseline_plan, calibrate_tradeoff, BaselineKind, Calibration, CalibrationBudget};
use crate::central::{all_thresholds, solve_centralized};
use crate::decentral::{evaluate_blocks, run_sequential, solve_no_exchange, SensorPartition, SequentialOptions};
use crate::error::{Error, Result};
use crate::lds::{compressed_update, predict, sample_gaussian, update, CompressionPlan, GaussianBelief, LdsModel, Provider};
use crate::linalg::{Matrix, SymMatrix, Vector};
use crate::objectives::{private_error, public_error_trace, step_geometry, Lookahead, PrivacySpec};

const STREAM_TRANSITION: u64 = 1;
const STREAM_MEASUREMENT: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `t` in a multi-trial run.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    seed ^ splitmix64(t as u64)
}

/// Deterministic RNG for `(seed, stream, index)`.
pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}

fn parse_call(s: &str) -> Result<(String, Vec<String>)> {
    let s = s.trim();
    match s.find('(') {
        None => Ok((s.to_string(), Vec::new())),
        Some(open) => {
            let inner = s[open + 1..]
                .strip_suffix(')')
                .ok_or_else(|| Error::Config(format!("unbalanced parentheses in '{s}'")))?;
            let args = inner.split(',').map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect();
            Ok((s[..open].trim().to_string(), args))
        }
    }
}

fn numeric_args(name: &str, args: &[String], count: usize) -> Result<Vec<f64>> {
    if args.len() != count {
        return Err(Error::Config(format!("'{name}' takes {count} argument(s), got {}", args.len())));
    }
    args.iter()
        .map(|a| a.parse::<f64>().map_err(|_| Error::Config(format!("'{a}' is not a number in '{name}'"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FGenerator {
    /// Random orthonormal factors around singular values uniform in `[lo, hi]`.
    RandomSv { lo: f64, hi: f64 },
    /// Gaussian base with diagonal blocks scaled by `ω` and off-diagonal
    /// blocks by `1 − ω`, rows normalized afterwards.
    Mixing { omega: f64 },
    /// Public and private states swap roles every step.
    Flip,
    Identity,
}

impl FromStr for FGenerator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = parse_call(s)?;
        match name.as_str() {
            "random_sv" => {
                let v = numeric_args(&name, &args, 2)?;
                if !(v[0] > 0.0 && v[1] >= v[0]) {
                    return Err(Error::Config(format!("random_sv needs 0 < lo <= hi, got ({}, {})", v[0], v[1])));
                }
                Ok(FGenerator::RandomSv { lo: v[0], hi: v[1] })
            }
            "mixing" => {
                let v = numeric_args(&name, &args, 1)?;
                if !(0.0..=1.0).contains(&v[0]) {
                    return Err(Error::Config(format!("mixing weight must lie in [0, 1], got {}", v[0])));
                }
                Ok(FGenerator::Mixing { omega: v[0] })
            }
            "flip" => numeric_args(&name, &args, 0).map(|_| FGenerator::Flip),
            "identity" => numeric_args(&name, &args, 0).map(|_| FGenerator::Identity),
            _ => Err(Error::Config(format!("unknown f_generator '{s}'"))),
        }
    }
}

impl fmt::Display for FGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FGenerator::RandomSv { lo, hi } => write!(f, "random_sv({lo},{hi})"),
            FGenerator::Mixing { omega } => write!(f, "mixing({omega})"),
            FGenerator::Flip => f.write_str("flip"),
            FGenerator::Identity => f.write_str("identity"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HGenerator {
    Gaussian,
    /// Orthonormal rows or columns from a QR factorization.
    Orthogonal,
    Identity,
}

impl FromStr for HGenerator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(HGenerator::Gaussian),
            "orthogonal" => Ok(HGenerator::Orthogonal),
            "identity" => Ok(HGenerator::Identity),
            other => Err(Error::Config(format!("unknown h_generator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrivacyMapKind {
    Trace,
    Elementwise,
}

impl FromStr for PrivacyMapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "trace" => Ok(PrivacyMapKind::Trace),
            "elementwise" => Ok(PrivacyMapKind::Elementwise),
            other => Err(Error::Config(format!("unknown privacy_map '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// No compression.
    Plain,
    Centralized,
    NoExchange,
    Sequential,
    Baseline(BaselineKind),
}

impl Scheme {
    pub fn is_decentralized(&self) -> bool {
        matches!(self, Scheme::NoExchange | Scheme::Sequential)
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = parse_call(s)?;
        match (name.as_str(), args.as_slice()) {
            ("plain", []) => Ok(Scheme::Plain),
            ("centralized", []) => Ok(Scheme::Centralized),
            ("no_exchange", []) => Ok(Scheme::NoExchange),
            ("sequential", []) => Ok(Scheme::Sequential),
            ("baseline", [kind]) => Ok(Scheme::Baseline(kind.parse()?)),
            _ => Err(Error::Config(format!("unknown scheme '{s}'"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Plain => f.write_str("plain"),
            Scheme::Centralized => f.write_str("centralized"),
            Scheme::NoExchange => f.write_str("no_exchange"),
            Scheme::Sequential => f.write_str("sequential"),
            Scheme::Baseline(k) => write!(f, "baseline({k})"),
        }
    }
}

pub fn parse_lookahead(s: &str) -> Result<Lookahead> {
    let (name, args) = parse_call(s)?;
    match name.as_str() {
        "fixed" => {
            let v = numeric_args(&name, &args, 1)?;
            if !(v[0] >= 0.0 && v[0].fract() == 0.0) {
                return Err(Error::Config(format!("fixed look-ahead must be a non-negative integer, got {}", v[0])));
            }
            Ok(Lookahead::Fixed(v[0] as usize))
        }
        "auto_prop1" => {
            let v = numeric_args(&name, &args, 2)?;
            Ok(Lookahead::AutoProp1 { xi: v[0], eps: v[1] })
        }
        _ => Err(Error::Config(format!("unknown lookahead '{s}'"))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    seed: u64,
    steps: usize,
    dim_state: usize,
    dim_meas: usize,
    n_public: usize,
    n_private: usize,
    delta: f64,
    lookahead: String,
    q_scale: f64,
    r_scale: f64,
    p0_scale: f64,
    f_generator: String,
    h_generator: String,
    privacy_map: String,
    sensors: usize,
    scheme: String,
    drop_prob: f64,
    baseline_gamma: f64,
    baseline_m: usize,
    eps_conv: f64,
    max_iter: usize,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            seed: 0,
            steps: 20,
            dim_state: 8,
            dim_meas: 8,
            n_public: 4,
            n_private: 4,
            delta: 1.0,
            lookahead: "fixed(0)".into(),
            q_scale: 2.0,
            r_scale: 1.0,
            p0_scale: 0.01,
            f_generator: "random_sv(1,1.2)".into(),
            h_generator: "gaussian".into(),
            privacy_map: "trace".into(),
            sensors: 1,
            scheme: "centralized".into(),
            drop_prob: 0.0,
            baseline_gamma: 1.0,
            baseline_m: 4,
            eps_conv: 1e-6,
            max_iter: 10,
        }
    }
}

/// Complete description of one experiment; every run is a pure function of
/// this value.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct ScenarioConfig {
    pub seed: u64,
    pub steps: usize,
    pub dim_state: usize,
    pub dim_meas: usize,
    pub n_public: usize,
    pub n_private: usize,
    pub delta: f64,
    pub lookahead: Lookahead,
    pub q_scale: f64,
    pub r_scale: f64,
    pub p0_scale: f64,
    pub f_generator: FGenerator,
    pub h_generator: HGenerator,
    pub privacy_map: PrivacyMapKind,
    pub sensors: usize,
    pub scheme: Scheme,
    pub drop_prob: f64,
    pub baseline_gamma: f64,
    pub baseline_m: usize,
    pub eps_conv: f64,
    pub max_iter: usize,
}

impl TryFrom<RawConfig> for ScenarioConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        let cfg = ScenarioConfig {
            seed: raw.seed,
            steps: raw.steps,
            dim_state: raw.dim_state,
            dim_meas: raw.dim_meas,
            n_public: raw.n_public,
            n_private: raw.n_private,
            delta: raw.delta,
            lookahead: parse_lookahead(&raw.lookahead)?,
            q_scale: raw.q_scale,
            r_scale: raw.r_scale,
            p0_scale: raw.p0_scale,
            f_generator: raw.f_generator.parse()?,
            h_generator: raw.h_generator.parse()?,
            privacy_map: raw.privacy_map.parse()?,
            sensors: raw.sensors,
            scheme: raw.scheme.parse()?,
            drop_prob: raw.drop_prob,
            baseline_gamma: raw.baseline_gamma,
            baseline_m: raw.baseline_m,
            eps_conv: raw.eps_conv,
            max_iter: raw.max_iter,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::try_from(RawConfig::default()).expect("default config is valid")
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_public + self.n_private != self.dim_state {
            return bad(format!(
                "n_public + n_private = {} must equal dim_state = {}",
                self.n_public + self.n_private,
                self.dim_state
            ));
        }
        if self.n_private == 0 || self.dim_meas == 0 {
            return bad("n_private and dim_meas must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad(format!("drop_prob must lie in [0, 1], got {}", self.drop_prob));
        }
        if !(self.q_scale >= 0.0 && self.r_scale > 0.0 && self.p0_scale >= 0.0) {
            return bad("noise scales must be non-negative (r_scale positive)".into());
        }
        if self.sensors == 0 || self.sensors > self.dim_meas {
            return bad(format!("cannot split {} measurement rows among {} sensors", self.dim_meas, self.sensors));
        }
        if self.scheme.is_decentralized() && self.drop_prob > 0.0 {
            return bad("row dropping is only supported for single-sensor schemes".into());
        }
        if !self.scheme.is_decentralized() && self.sensors != 1 {
            return bad(format!("scheme {} uses a single sensor; set sensors = 1", self.scheme));
        }
        if self.h_generator == HGenerator::Identity && self.dim_meas > self.dim_state {
            return bad("identity measurement needs dim_meas <= dim_state".into());
        }
        if self.eps_conv <= 0.0 {
            return bad("eps_conv must be positive".into());
        }
        self.privacy_spec().map(|_| ())
    }

    pub fn privacy_spec(&self) -> Result<PrivacySpec> {
        let map = match self.privacy_map {
            PrivacyMapKind::Trace => PrivacySpec::trace_map(self.n_private),
            PrivacyMapKind::Elementwise => PrivacySpec::elementwise_map(self.n_private),
        };
        PrivacySpec::contiguous(self.n_public, self.n_private, map, self.delta, self.lookahead)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// The same scenario with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        ScenarioConfig { seed, ..self.clone() }
    }
}

fn randn<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn normalize_rows(m: &mut Matrix) {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Orthonormal basis of the column space of a random square matrix.
fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Matrix {
    randn(rng, n, n).qr().q()
}

/// Transition matrix for one step; states `0..n_public` are public.
pub fn gen_f<R: Rng + ?Sized>(kind: FGenerator, rng: &mut R, l: usize, n_public: usize) -> Matrix {
    match kind {
        FGenerator::RandomSv { lo, hi } => {
            let u = random_orthogonal(rng, l);
            let v = random_orthogonal(rng, l);
            let d = Vector::from_iterator(l, (0..l).map(|_| rng.random_range(lo..=hi)));
            u * Matrix::from_diagonal(&d) * v.transpose()
        }
        FGenerator::Mixing { omega } => mixed(rng, l, n_public, omega),
        FGenerator::Flip => mixed(rng, l, n_public, 0.0),
        FGenerator::Identity => Matrix::identity(l, l),
    }
}

fn mixed<R: Rng + ?Sized>(rng: &mut R, l: usize, n_public: usize, omega: f64) -> Matrix {
    let mut f = randn(rng, l, l);
    for i in 0..l {
        for j in 0..l {
            let same = (i < n_public) == (j < n_public);
            f[(i, j)] *= if same { omega } else { 1.0 - omega };
        }
    }
    normalize_rows(&mut f);
    f
}

pub fn gen_h<R: Rng + ?Sized>(kind: HGenerator, rng: &mut R, n: usize, l: usize) -> Matrix {
    match kind {
        HGenerator::Gaussian => randn(rng, n, l),
        HGenerator::Orthogonal => {
            let q = random_orthogonal(rng, n.max(l));
            q.view((0, 0), (n, l)).into_owned()
        }
        HGenerator::Identity => Matrix::identity(n, l),
    }
}

/// Keeps each measurement row independently with probability `1 − p`.
pub fn drop_rows<R: Rng + ?Sized>(h: &Matrix, r: &SymMatrix, p: f64, rng: &mut R) -> (Matrix, SymMatrix) {
    let keep: Vec<usize> = (0..h.nrows()).filter(|_| !rng.random_bool(p)).collect();
    (h.select_rows(&keep), r.principal(&keep))
}

/// Linear-Gaussian model of a scenario with lazily generated, seed-derived
/// per-step matrices.
pub fn scenario_model(cfg: &ScenarioConfig) -> LdsModel {
    let (l, n, p) = (cfg.dim_state, cfg.dim_meas, cfg.n_public);
    let seed = cfg.seed;
    let fgen = cfg.f_generator;
    let hgen = cfg.h_generator;
    let r = Matrix::identity(n, n) * cfg.r_scale;
    LdsModel::new(
        l,
        n,
        Provider::PerStep(Arc::new(move |k| gen_f(fgen, &mut substream(seed, STREAM_TRANSITION, k as u64), l, p))),
        Provider::Constant(Matrix::identity(l, l) * cfg.q_scale),
        Arc::new(move |k| (gen_h(hgen, &mut substream(seed, STREAM_MEASUREMENT, k as u64), n, l), r.clone())),
    )
}

/// Per-step outcome of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub tau: f64,
    pub eta: Vec<f64>,
    pub eta_min: f64,
    pub eta_sum: f64,
    /// Compressed dimension per sensor.
    pub m_used: Vec<usize>,
    pub feasible: bool,
    pub utility: f64,
    pub wall_ns: u64,
}

impl StepRecord {
    pub fn m_total(&self) -> usize {
        self.m_used.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_timing: bool,
}

/// Fusion-center belief plus the per-sensor local beliefs used by the
/// independent scheme.
struct FilterState {
    fusion: GaussianBelief,
    local: Vec<GaussianBelief>,
}

pub fn run_experiment(cfg: &ScenarioConfig) -> Result<Vec<StepRecord>> {
    run_experiment_with(cfg, RunOptions::default())
}

/// Smallest eigenvalue of the posterior covariance after the uncompressed
/// update, a lower bound for every compressed posterior at this step.
fn posterior_eigen_floor(pred: &GaussianBelief, h: &Matrix, r: &SymMatrix) -> Result<f64> {
    let cov = if h.nrows() == 0 {
        pred.cov.clone()
    } else {
        update(pred, &Vector::zeros(h.nrows()), h, r)?.cov
    };
    Ok(cov.min_eigenvalue().max(f64::MIN_POSITIVE))
}

pub fn run_experiment_with(cfg: &ScenarioConfig, opts: RunOptions) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let spec = cfg.privacy_spec()?;
    let model = scenario_model(cfg);
    let l = cfg.dim_state;
    let part = SensorPartition::even(cfg.dim_meas, cfg.sensors)?;
    let p0 = SymMatrix::scaled_identity(l, cfg.p0_scale);
    let mut noise = substream(cfg.seed, STREAM_NOISE, 0);
    let mut x = sample_gaussian(&mut noise, &p0)?;
    let prior = GaussianBelief::prior(Vector::zeros(l), p0)?;
    let mut state = FilterState {
        local: vec![prior.clone(); if cfg.scheme == Scheme::NoExchange { cfg.sensors } else { 0 }],
        fusion: prior,
    };
    let seq_opts = SequentialOptions {
        eps_conv: cfg.eps_conv,
        max_iter: cfg.max_iter,
        order: None,
    };

    let mut records = Vec::with_capacity(cfg.steps);
    for k in 1..=cfg.steps {
        let f = model.transition(k)?;
        let q = model.process_noise(k)?;
        x = &f * &x + sample_gaussian(&mut noise, &q)?;
        let (h_full, r_full) = model.measurement(k)?;
        let (h, r) = if cfg.drop_prob > 0.0 {
            drop_rows(&h_full, &r_full, cfg.drop_prob, &mut noise)
        } else {
            (h_full, r_full)
        };
        let z = &h * &x + sample_gaussian(&mut noise, &r)?;

        let pred = predict(&state.fusion, &f, &q)?;
        let horizon = spec.horizon(posterior_eigen_floor(&pred, &h, &r)?)?;
        let f_future = model.future_transitions(k, horizon)?;
        let q_future = model.future_process_noises(k, horizon)?;

        let started = Instant::now();
        let (plan, m_used, feasible) = match cfg.scheme {
            Scheme::Plain => (CompressionPlan::identity(h.nrows()), vec![h.nrows()], true),
            Scheme::Centralized => {
                let plan = solve_centralized(&pred, &h, &r, &f_future, &q_future, &spec)?;
                let (m, ok) = (plan.rank(), plan.feasible);
                (plan, vec![m], ok)
            }
            Scheme::Baseline(kind) => {
                let geom = step_geometry(&pred, &h, &r, &[], &[])?;
                let plan = baseline_plan(kind, &geom, &h, &spec, cfg.baseline_gamma, cfg.baseline_m)?;
                let m = plan.rank();
                (plan, vec![m], true)
            }
            Scheme::Sequential => {
                let out = run_sequential(&pred, &h, &r, &f_future, &q_future, &spec, &part, &seq_opts)?;
                let dims = out.plan.comp_dims();
                (out.plan.to_plan(&part, out.feasible)?, dims, out.feasible)
            }
            Scheme::NoExchange => {
                let local_preds: Vec<GaussianBelief> =
                    state.local.iter().map(|b| predict(b, &f, &q)).collect::<Result<_>>()?;
                let hb: Vec<Matrix> = (0..cfg.sensors).map(|s| part.rows(&h, s)).collect();
                let rb: Vec<SymMatrix> = (0..cfg.sensors).map(|s| part.noise(&r, s)).collect();
                let blocks = solve_no_exchange(
                    &local_preds,
                    &hb,
                    &rb,
                    &f_future,
                    &q_future,
                    &spec,
                    spec.delta / cfg.sensors as f64,
                )?;
                for s in 0..cfg.sensors {
                    let zs = z.select_rows(part.block(s));
                    state.local[s] = compressed_update(&local_preds[s], &zs, &hb[s], &rb[s], &blocks.blocks[s])?;
                }
                let geom = step_geometry(&pred, &h, &r, &f_future, &q_future)?;
                let thresholds = all_thresholds(&geom, &spec)?;
                let (_, ok) = evaluate_blocks(&geom, &part, &blocks, &spec, &thresholds)?;
                let ok = ok && thresholds.iter().all(|b| b.iter().all(|&v| v >= 0.0));
                let dims = blocks.comp_dims();
                (blocks.to_plan(&part, ok)?, dims, ok)
            }
        };
        let wall_ns = if opts.record_timing {
            started.elapsed().as_nanos() as u64
        } else {
            0
        };

        state.fusion = compressed_update(&pred, &z, &h, &r, &plan)?;
        let cov = &state.fusion.cov;
        let tau = public_error_trace(cov, &spec);
        let eta: Vec<f64> = private_error(cov, &spec).iter().copied().collect();
        records.push(StepRecord {
            k,
            tau,
            eta_min: eta.iter().copied().fold(f64::INFINITY, f64::min),
            eta_sum: eta.iter().sum(),
            eta,
            m_used,
            feasible,
            utility: public_error_trace(&pred.cov, &spec) - tau,
            wall_ns,
        });
    }
    Ok(records)
}

/// Runs `trials` independent trials with derived seeds.
pub fn run_trials(cfg: &ScenarioConfig, trials: usize) -> Result<Vec<Vec<StepRecord>>> {
    (0..trials)
        .map(|t| run_experiment(&cfg.with_seed(trial_seed(cfg.seed, t))))
        .collect()
}

pub const RECORD_HEADER: &str = "k,tau,eta_min,eta_sum,M,feasible,utility,wall_ns";

pub fn write_records<W: Write + ?Sized>(w: &mut W, records: &[StepRecord]) -> Result<()> {
    writeln!(w, "{RECORD_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.k,
            r.tau,
            r.eta_min,
            r.eta_sum,
            r.m_total(),
            r.feasible,
            r.utility,
            r.wall_ns
        )?;
    }
    Ok(())
}

/// Per-step means over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub k: usize,
    pub mean_tau: f64,
    pub mean_eta_min: f64,
    pub mean_eta_sum: f64,
    pub frac_feasible: f64,
}

pub fn summarize(runs: &[Vec<StepRecord>]) -> Vec<StepSummary> {
    let steps = runs.iter().map(Vec::len).min().unwrap_or(0);
    let t = runs.len() as f64;
    (0..steps)
        .map(|i| {
            let mean = |f: &dyn Fn(&StepRecord) -> f64| runs.iter().map(|r| f(&r[i])).sum::<f64>() / t;
            StepSummary {
                k: runs[0][i].k,
                mean_tau: mean(&|r| r.tau),
                mean_eta_min: mean(&|r| r.eta_min),
                mean_eta_sum: mean(&|r| r.eta_sum),
                frac_feasible: mean(&|r| f64::from(u8::from(r.feasible))),
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "k,mean_tau,mean_eta_min,mean_eta_sum,frac_feasible";

pub fn write_summary<W: Write + ?Sized>(w: &mut W, rows: &[StepSummary]) -> Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.k, r.mean_tau, r.mean_eta_min, r.mean_eta_sum, r.frac_feasible)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Delta,
    Omega,
    Lookahead,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepParam::Delta),
            "omega" => Ok(SweepParam::Omega),
            "lookahead" | "r" => Ok(SweepParam::Lookahead),
            other => Err(Error::Config(format!("cannot sweep over '{other}' (expected delta, omega or lookahead)"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Delta => "delta",
            SweepParam::Omega => "omega",
            SweepParam::Lookahead => "lookahead",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub mean_tau: f64,
    pub mean_eta_min: f64,
    pub frac_feasible: f64,
}

/// The scenario with one parameter replaced.
pub fn with_param(cfg: &ScenarioConfig, param: SweepParam, value: f64) -> Result<ScenarioConfig> {
    let mut out = cfg.clone();
    match param {
        SweepParam::Delta => out.delta = value,
        SweepParam::Omega => out.f_generator = FGenerator::Mixing { omega: value },
        SweepParam::Lookahead => {
            if !(value >= 0.0 && value.fract() == 0.0) {
                return Err(Error::Config(format!("look-ahead must be a non-negative integer, got {value}")));
            }
            out.lookahead = Lookahead::Fixed(value as usize);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Final-step means over `trials` trials at every grid value.
pub fn sweep(cfg: &ScenarioConfig, param: SweepParam, values: &[f64], trials: usize) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&value| {
            let runs = run_trials(&with_param(cfg, param, value)?, trials)?;
            let t = runs.len() as f64;
            let last = |r: &Vec<StepRecord>| r.last().cloned();
            let finals: Vec<StepRecord> = runs.iter().filter_map(last).collect();
            let feasible_steps: usize = runs.iter().flatten().filter(|r| r.feasible).count();
            let total_steps: usize = runs.iter().map(Vec::len).sum();
            Ok(SweepRow {
                param,
                value,
                mean_tau: finals.iter().map(|r| r.tau).sum::<f64>() / t,
                mean_eta_min: finals.iter().map(|r| r.eta_min).sum::<f64>() / t,
                frac_feasible: feasible_steps as f64 / total_steps.max(1) as f64,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "param,value,mean_tau,mean_eta_min,frac_feasible";

pub fn write_sweep<W: Write + ?Sized>(w: &mut W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.param, r.value, r.mean_tau, r.mean_eta_min, r.frac_feasible)?;
    }
    Ok(())
}

/// Per-step means of one scheme in a baseline comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRun {
    pub scheme: Scheme,
    /// Calibrated `(γ, M)`; `None` for the proposed scheme.
    pub calibration: Option<Calibration>,
    pub summary: Vec<StepSummary>,
}

/// Proposed centralized design against the three baselines, each baseline
/// calibrated so that its final private error is closest to the floor sum.
/// Calibration uses the first `calibration_trials` trials.
pub fn compare_baselines(
    cfg: &ScenarioConfig,
    trials: usize,
    calibration_trials: usize,
    budget: &CalibrationBudget,
) -> Result<Vec<ComparisonRun>> {
    let spec = cfg.privacy_spec()?;
    let target = spec.floor().sum();
    let proposed = ScenarioConfig {
        scheme: Scheme::Centralized,
        ..cfg.clone()
    };
    let mut out = vec![ComparisonRun {
        scheme: Scheme::Centralized,
        calibration: None,
        summary: summarize(&run_trials(&proposed, trials)?),
    }];
    for kind in [BaselineKind::Ib, BaselineKind::Pf, BaselineKind::Cp] {
        let at = |gamma: f64, m: usize| ScenarioConfig {
            scheme: Scheme::Baseline(kind),
            baseline_gamma: gamma,
            baseline_m: m,
            ..cfg.clone()
        };
        let eval = |gamma: f64, m: usize| -> Result<f64> {
            let runs = run_trials(&at(gamma, m), calibration_trials.max(1))?;
            let finals: Vec<f64> = runs.iter().filter_map(|r| r.last().map(|s| s.eta_sum)).collect();
            Ok(finals.iter().sum::<f64>() / finals.len().max(1) as f64)
        };
        let Some(cal) = calibrate_tradeoff(eval, target, budget) else {
            log::warn!("{kind}: no admissible (gamma, M) during calibration");
            continue;
        };
        out.push(ComparisonRun {
            scheme: Scheme::Baseline(kind),
            calibration: Some(cal),
            summary: summarize(&run_trials(&at(cal.gamma, cal.m), trials)?),
        });
    }
    Ok(out)
}

pub const COMPARISON_HEADER: &str = "scheme,gamma,M,k,mean_tau,mean_eta_sum";

pub fn write_comparison<W: Write + ?Sized>(w: &mut W, runs: &[ComparisonRun]) -> Result<()> {
    writeln!(w, "{COMPARISON_HEADER}")?;
    for run in runs {
        let (gamma, m) = match run.calibration {
            Some(c) => (c.gamma.to_string(), c.m.to_string()),
            None => (String::new(), String::new()),
        };
        for s in &run.summary {
            writeln!(w, "{},{gamma},{m},{},{},{}", run.scheme, s.k, s.mean_tau, s.mean_eta_sum)?;
        }
    }
    Ok(())
}
