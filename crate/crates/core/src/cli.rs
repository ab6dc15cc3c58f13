//! Command-line front end.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::CalibrationBudget;
use crate::decentral::{exact_block_reduction, sequential_context, SensorPartition};
use crate::ekf::{self, EkfSetup};
use crate::error::{Error, Result};
use crate::instances::{random_block_plan, random_plan, StepInstance};
use crate::lds::compressed_update;
use crate::linalg::{max_abs_diff, Vector};
use crate::objectives::error_reduction;
use crate::scenario::{
    compare_baselines, run_experiment_with, run_trials, summarize, sweep, write_comparison, write_records,
    write_summary, write_sweep, RunOptions, ScenarioConfig, Scheme, SweepParam,
};

#[derive(Debug, Parser)]
#[command(name = "cpkf", version, about = "Privacy-aware measurement compression for Kalman filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML scenario file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    /// Fill the wall_ns column with design time; output is then not reproducible.
    #[arg(long)]
    record_timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One scenario, one seed, per-step records.
    Simulate(CommonArgs),
    /// Final-step means over a parameter grid.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// delta, omega or lookahead.
        #[arg(long)]
        param: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Proposed design against calibrated baselines.
    CompareBaselines {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 3)]
        calibration_trials: usize,
    },
    /// Multi-sensor run, per-step means over trials.
    Decentralized(CommonArgs),
    /// Range-only localization; writes trajectory and speed CSVs.
    EkfLoc(CommonArgs),
    /// Oracle consistency checks on random instances.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidSpec(_) | Error::Io(_) => 1,
        _ => 2,
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            ScenarioConfig::from_toml(&text)?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = common.steps {
        cfg.steps = steps;
    }
    if let Some(scheme) = &common.scheme {
        cfg.scheme = scheme.parse()?;
    }
    if common.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_output(out: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            body(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            body(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(common) => {
            let cfg = load_config(&common)?;
            let opts = RunOptions {
                record_timing: common.record_timing,
            };
            let records = run_experiment_with(&cfg, opts)?;
            with_output(common.out.as_deref(), |w| write_records(w, &records))
        }
        Command::Sweep { common, param, values } => {
            let cfg = load_config(&common)?;
            let rows = sweep(&cfg, param.parse::<SweepParam>()?, &values, common.trials)?;
            with_output(common.out.as_deref(), |w| write_sweep(w, &rows))
        }
        Command::CompareBaselines {
            common,
            calibration_trials,
        } => {
            let cfg = load_config(&common)?;
            let budget = CalibrationBudget {
                gamma_lo: 1e-3,
                gamma_hi: 1e3,
                grid: 13,
                refine: 8,
                dims: (1..=cfg.dim_meas).collect(),
            };
            let runs = compare_baselines(&cfg, common.trials, calibration_trials, &budget)?;
            with_output(common.out.as_deref(), |w| write_comparison(w, &runs))
        }
        Command::Decentralized(common) => {
            let mut cfg = load_config(&common)?;
            if common.scheme.is_none() {
                cfg.scheme = Scheme::Sequential;
            }
            if !cfg.scheme.is_decentralized() {
                return Err(Error::Config(format!(
                    "decentralized runs need scheme no_exchange or sequential, got {}",
                    cfg.scheme
                )));
            }
            cfg.validate()?;
            let summary = summarize(&run_trials(&cfg, common.trials)?);
            with_output(common.out.as_deref(), |w| write_summary(w, &summary))
        }
        Command::EkfLoc(common) => run_ekf_loc(&common),
        Command::Selftest { seed, instances } => selftest(seed, instances),
    }
}

fn run_ekf_loc(common: &CommonArgs) -> Result<()> {
    let mut setup = EkfSetup::default();
    if let Some(seed) = common.seed {
        setup.seed = seed;
    }
    if let Some(steps) = common.steps {
        setup.steps = steps;
    }
    let run = ekf::run_ekf(&setup)?;
    log::info!(
        "location RMSE plain {:.4} sanitized {:.4}; speed RMSE plain {:.4} sanitized {:.4}",
        ekf::location_rmse(&run.plain, &run.truth),
        ekf::location_rmse(&run.sanitized, &run.truth),
        ekf::speed_rmse(&run.plain, &run.truth),
        ekf::speed_rmse(&run.sanitized, &run.truth),
    );
    match &common.out {
        Some(path) => {
            with_output(Some(path), |w| ekf::write_trajectory(w, &run))?;
            with_output(Some(&speed_path(path)), |w| ekf::write_speed(w, &run))
        }
        None => with_output(None, |w| {
            ekf::write_trajectory(w, &run)?;
            writeln!(w)?;
            ekf::write_speed(w, &run)
        }),
    }
}

/// `<dir>/<stem>_speed.csv` next to the trajectory file.
pub fn speed_path(trajectory: &Path) -> PathBuf {
    let stem = trajectory.file_stem().and_then(|s| s.to_str()).unwrap_or("ekf");
    trajectory.with_file_name(format!("{stem}_speed.csv"))
}

struct Check {
    name: &'static str,
    worst: f64,
    tol: f64,
}

fn selftest(seed: u64, instances: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![
        Check {
            name: "error reduction vs filter update",
            worst: 0.0,
            tol: 1e-8,
        },
        Check {
            name: "sequential decomposition vs joint block reduction",
            worst: 0.0,
            tol: 1e-8,
        },
        Check {
            name: "localization Jacobians vs finite differences",
            worst: 0.0,
            tol: 1e-5,
        },
    ];
    for _ in 0..instances {
        let inst = StepInstance::random(&mut rng, 5, 6, 2)?;
        let geom = inst.geometry()?;
        let plan = random_plan(&mut rng, 3, 6)?;
        let post = compressed_update(&inst.pred, &Vector::zeros(6), &inst.h, &inst.r, &plan)?;
        let d = error_reduction(&geom, &plan, 0)?;
        let direct = inst.pred.cov.sub(&post.cov);
        checks[0].worst = checks[0].worst.max(max_abs_diff(d.as_matrix(), direct.as_matrix()));

        let part = SensorPartition::even(6, 3)?;
        let blocks = random_block_plan(&mut rng, &part)?;
        for s in 0..part.sensors() {
            let ctx = sequential_context(&geom, &part, &blocks, s)?;
            for n in 0..=geom.horizon() {
                let exact = exact_block_reduction(&geom, &part, &blocks, n)?;
                let split = ctx.decomposed_reduction(blocks.blocks[s].matrix(), n)?;
                checks[1].worst = checks[1].worst.max(max_abs_diff(exact.as_matrix(), split.as_matrix()));
            }
        }
    }
    checks[2].worst = ekf::jacobian_fd_error(&EkfSetup::default(), &mut rng, instances);

    let mut ok = true;
    for c in &checks {
        let pass = c.worst < c.tol;
        ok &= pass;
        println!("{} {}: max diff {:.3e} (tol {:.0e})", if pass { "PASS" } else { "FAIL" }, c.name, c.worst, c.tol);
    }
    if ok {
        Ok(())
    } else {
        Err(Error::CheckFailed("oracle mismatch beyond tolerance".into()))
    }
}
