//! `nhloop`: simulate slowly driven non-Hermitian two-level loops and extract
//! critical periods, sweeps, scaling fits, chirality verdicts and plateaus.

mod config;
mod output;
mod validate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nhloop::experiments::{
    chirality_test, fit_scaling, measure_tcr, plateau_measure, sweep, write_sweep_csv, ScalingModel, SweepAxis,
    TcrOptions,
};
use nhloop::model::select_branch;
use nhloop::propagator::{end_of_period_ln_ratio, propagate_schrodinger};
use serde_json::json;

use config::{load_config, RunConfig};
use output::{manifest, DtRecord, Outputs};

/// Failure reported on standard error as JSON.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub usage: bool,
}

impl CliError {
    pub fn usage(code: &str, message: String) -> Self {
        Self { code: code.into(), message, usage: true }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: "IO_ERROR".into(), message: format!("{}: {e}", path.display()), usage: false }
    }

    fn exit_code(&self) -> u8 {
        if self.usage {
            1
        } else {
            2
        }
    }
}

impl From<nhloop::Error> for CliError {
    fn from(e: nhloop::Error) -> Self {
        Self { code: e.code().into(), message: e.to_string(), usage: e.is_usage() }
    }
}

#[derive(Parser)]
#[command(name = "nhloop", version, about = "Population dynamics of slowly driven non-Hermitian loops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Loop centre on the real axis.
    #[arg(long, allow_hyphen_values = true)]
    g0: Option<f64>,
    /// Loop radius.
    #[arg(long)]
    r: Option<f64>,
    /// Starting phase in radians.
    #[arg(long, allow_hyphen_values = true)]
    phi0: Option<f64>,
    /// Loop period.
    #[arg(long = "T")]
    period: Option<f64>,
    /// Significand bits m.
    #[arg(long)]
    bits: Option<u32>,
    /// RK4 step.
    #[arg(long)]
    dt: Option<f64>,
    /// cw, ccw, +1 or -1.
    #[arg(long, allow_hyphen_values = true)]
    direction: Option<String>,
    /// `floor` or `inject:<amplitude>` (e.g. `inject:2^-53`).
    #[arg(long)]
    seed_mode: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One period from the selected eigenstate; writes trajectory.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of recorded samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Critical period T_cr; writes tcr.json.
    Tcr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t_max: Option<f64>,
        /// Skip the dt/2 re-evaluation of the bracket.
        #[arg(long)]
        no_dt_check: bool,
    },
    /// T_cr (or end-of-period ln|R| on the period axis) over one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// radius, phi0, g0, bits or period.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated ascending values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Option<Vec<f64>>,
        #[arg(long)]
        t_max: Option<f64>,
        /// Scaling model for the fit; chosen from the axis when omitted.
        #[arg(long)]
        model: Option<String>,
    },
    /// Final branch for both traversal directions at period T.
    Chirality {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-transition |R-(T)| on an EP-centred loop.
    Plateau {
        #[command(flatten)]
        common: Common,
        /// Periods to sample; defaults to fractions of the measured T_cr.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Runs the invariant suite.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, extra: RunConfig) -> Result<RunConfig, CliError> {
    let flags = RunConfig {
        g0: common.g0,
        r: common.r,
        phi0: common.phi0,
        period: common.period,
        bits: common.bits,
        dt: common.dt,
        direction: common.direction.clone(),
        seed_mode: common.seed_mode.clone(),
        out: common.out.clone(),
        ..extra
    };
    let file = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    Ok(flags.or(file).or(RunConfig::defaults()))
}

fn stdout_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn run(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, samples } => {
            let cfg = resolve(&common, RunConfig { samples, ..RunConfig::default() })?;
            let (geom, spec) = (cfg.geometry()?, cfg.precision()?);
            let sel = select_branch(&geom)?;
            let rec = propagate_schrodinger(&geom, sel, &spec, cfg.samples.unwrap_or(4096))?;
            let half = spec.with_dt(spec.dt() / 2.0)?;
            let b = end_of_period_ln_ratio(&geom, sel, &half)?;
            let a = rec.final_ln_abs_ratio();
            let deviation = (a - b).abs() / a.abs().max(1.0);
            let mut csv = Vec::new();
            rec.write_csv(&mut csv).map_err(|e| CliError::io(Path::new("trajectory.csv"), e))?;
            let mut out = Outputs::new(cfg.out_dir())?;
            out.write("trajectory.csv", &csv)?;
            let mut m = manifest("simulate", argv);
            m.geometry = Some(to_value(&geom));
            m.precision = Some(to_value(&spec));
            m.dt_convergence = Some(DtRecord {
                dt: spec.dt(),
                dt_half: half.dt(),
                max_deviation: Some(deviation),
                passed: deviation < nhloop::propagator::DT_PLATEAU_TOL,
            });
            let files = out.finish(m)?;
            stdout_json(&json!({
                "final_ln_abs_ratio": a,
                "ln_abs_ratio_half_step": b,
                "steps": rec.steps,
                "dt_used": rec.dt_used,
                "injected_at": rec.flags.injected_at,
                "outputs": files,
            }));
            Ok(())
        }
        Command::Tcr { common, t_max, no_dt_check } => {
            let cfg = resolve(&common, RunConfig { t_max, ..RunConfig::default() })?;
            let (geom, spec) = (cfg.geometry()?, cfg.precision()?);
            let opts = TcrOptions { t_max: cfg.t_max.unwrap_or(1e6), check_dt: !no_dt_check, ..TcrOptions::default() };
            let res = measure_tcr(&geom, &spec, &opts)?;
            let mut out = Outputs::new(cfg.out_dir())?;
            out.write_json("tcr.json", &res)?;
            let mut m = manifest("tcr", argv);
            m.geometry = Some(to_value(&geom));
            m.precision = Some(to_value(&spec));
            m.dt_convergence = opts.check_dt.then(|| DtRecord {
                dt: spec.dt(),
                dt_half: spec.dt() / 2.0,
                max_deviation: None,
                passed: res.dt_check_passed,
            });
            out.finish(m)?;
            stdout_json(&to_value(&res));
            Ok(())
        }
        Command::Sweep { common, axis, values, t_max, model } => {
            let cfg = resolve(&common, RunConfig { axis, values, t_max, ..RunConfig::default() })?;
            let axis: SweepAxis = cfg
                .axis
                .as_deref()
                .ok_or_else(|| CliError::usage("MISSING_AXIS", "sweep needs --axis".into()))?
                .parse()?;
            let values = cfg.values.clone().ok_or_else(|| CliError::usage("MISSING_VALUES", "sweep needs --values".into()))?;
            let (geom, spec) = (cfg.geometry()?, cfg.precision()?);
            let opts = TcrOptions { t_max: cfg.t_max.unwrap_or(1e6), ..TcrOptions::default() };
            let points = sweep(&geom, axis, &values, &spec, &opts)?;
            let mut csv = Vec::new();
            write_sweep_csv(axis, &points, &mut csv).map_err(|e| CliError::io(Path::new("sweep.csv"), e))?;
            let mut out = Outputs::new(cfg.out_dir())?;
            out.write("sweep.csv", &csv)?;
            let model = match model {
                Some(m) => Some(m.parse::<ScalingModel>()?),
                None => ScalingModel::for_axis(axis, &geom),
            };
            let criticals: Vec<_> = points.iter().filter_map(|p| p.critical().cloned()).collect();
            let fit = match model {
                Some(model) => match fit_scaling(&criticals, model) {
                    Ok(fit) => {
                        out.write_json("fit.json", &fit)?;
                        json!(fit)
                    }
                    Err(e) => json!({ "error": e.code(), "message": e.to_string() }),
                },
                None => serde_json::Value::Null,
            };
            let mut m = manifest("sweep", argv);
            m.geometry = Some(to_value(&geom));
            m.precision = Some(to_value(&spec));
            let files = out.finish(m)?;
            stdout_json(&json!({ "axis": axis.to_string(), "points": points, "fit": fit, "outputs": files }));
            Ok(())
        }
        Command::Chirality { common } => {
            let cfg = resolve(&common, RunConfig::default())?;
            let (geom, spec) = (cfg.geometry()?, cfg.precision()?);
            let v = chirality_test(&geom, geom.period(), &spec)?;
            let mut out = Outputs::new(cfg.out_dir())?;
            out.write_json("chirality.json", &v)?;
            let mut m = manifest("chirality", argv);
            m.geometry = Some(to_value(&geom));
            m.precision = Some(to_value(&spec));
            out.finish(m)?;
            stdout_json(&to_value(&v));
            Ok(())
        }
        Command::Plateau { common, values } => {
            let cfg = resolve(&common, RunConfig { values, ..RunConfig::default() })?;
            let (geom, spec) = (cfg.geometry()?, cfg.precision()?);
            let periods = match cfg.values.clone() {
                Some(v) => v,
                None => {
                    let opts = TcrOptions { check_dt: false, t_max: cfg.t_max.unwrap_or(1e6), ..TcrOptions::default() };
                    let t_cr = measure_tcr(&geom, &spec, &opts)?.t_cr;
                    [0.35, 0.5, 0.65].iter().map(|f| f * t_cr).collect()
                }
            };
            let p = plateau_measure(&geom, &spec, &periods)?;
            let mut out = Outputs::new(cfg.out_dir())?;
            out.write_json("plateau.json", &p)?;
            let mut m = manifest("plateau", argv);
            m.geometry = Some(to_value(&geom));
            m.precision = Some(to_value(&spec));
            out.finish(m)?;
            stdout_json(&to_value(&p));
            Ok(())
        }
        Command::Validate { common } => {
            let _ = resolve(&common, RunConfig::default())?;
            let checks = validate::run_suite()?;
            let passed = checks.iter().all(|c| c.passed);
            stdout_json(&json!({ "passed": passed, "checks": checks }));
            if passed {
                Ok(())
            } else {
                let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
                Err(CliError { code: "VALIDATION_FAILED".into(), message: format!("failed checks: {}", failed.join(", ")), usage: false })
            }
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({ "error": { "code": "USAGE", "message": e.to_string() } }));
            return ExitCode::from(1);
        }
    };
    match run(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "code": e.code, "message": e.message } }));
            ExitCode::from(e.exit_code())
        }
    }
}
