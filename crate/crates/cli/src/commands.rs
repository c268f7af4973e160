//! The subcommands. Each returns the files it wrote and the exit code.

use std::path::PathBuf;

use serde::Serialize;
use ttsa_core::clt_predictor::{self, CltPrediction};
use ttsa_core::hypergradient::{audit_gradients, GradientAudit};
use ttsa_core::mc_verifier::{find_optimum, verify_clt};
use ttsa_core::problem_model::{check_assumptions, random_points, AssumptionReport};
use ttsa_core::sde_engine::{integrate, Termination};
use ttsa_core::{McReport, Vector};

use crate::config::{Resolved, RunConfig};
use crate::output::{now_unix, to_json, trajectory_csv, Manifest, OutDir, OutputFile, Unhashed};
use crate::CliError;

#[derive(Debug)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub exit_code: i32,
    /// One-line description for the terminal.
    pub message: String,
}

fn write_manifest<S: Serialize>(
    dir: &OutDir,
    command: &'static str,
    config: &RunConfig,
    outputs: Vec<OutputFile>,
    status: S,
) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        tool: "ttsa",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.engine.seed,
        config,
        outputs,
        status,
        excluded_from_hash: Unhashed {
            created_unix_seconds: now_unix(),
        },
    };
    dir.write("manifest.json", &to_json(&manifest)?)
}

fn optimum(r: &Resolved) -> Result<(Vector, Vector), CliError> {
    match r.problem.known_optimum() {
        Some(opt) => Ok(opt),
        None => Ok(find_optimum(
            r.problem.as_ref(),
            &r.engine.x0,
            0.1,
            1e-10,
            1_000_000,
        )?),
    }
}

#[derive(Serialize)]
struct PredictOutput<'a> {
    problem: &'a str,
    x_star: Vec<f64>,
    y_star: Vec<f64>,
    prediction: &'a CltPrediction,
}

pub fn predict(r: &Resolved) -> Result<Outcome, CliError> {
    let (x, y) = optimum(r)?;
    let prediction = clt_predictor::predict(r.problem.as_ref(), &r.noise, &x, &y)?;
    let out = PredictOutput {
        problem: r.problem.name(),
        x_star: x.iter().copied().collect(),
        y_star: y.iter().copied().collect(),
        prediction: &prediction,
    };
    let dir = OutDir::create(&r.config.output)?;
    let path = dir.write("predict.json", &to_json(&out)?)?;
    Ok(Outcome {
        written: vec![path],
        exit_code: 0,
        message: format!(
            "Sigma_x trace {:.6e}, Sigma_y trace {:.6e}",
            prediction.sigma_x.trace(),
            prediction.sigma_y.trace()
        ),
    })
}

#[derive(Serialize)]
struct RunStatus {
    steps: usize,
    final_time: f64,
    logged_rows: usize,
    terminated_early: Option<Termination>,
}

pub fn run(r: &Resolved) -> Result<Outcome, CliError> {
    let dir = OutDir::create(&r.config.output)?;
    let tr = integrate(&r.engine, r.problem.as_ref(), &r.noise)?;
    let csv = trajectory_csv(&tr);
    let csv_path = dir.write("trajectory.csv", &csv)?;
    let status = RunStatus {
        steps: r.engine.steps(),
        final_time: tr.final_time,
        logged_rows: tr.len(),
        terminated_early: tr.terminated_early.clone(),
    };
    let manifest = write_manifest(
        &dir,
        "run",
        &r.config,
        vec![OutputFile::new("trajectory.csv", &csv)],
        status,
    )?;
    let (exit_code, message) = match &tr.terminated_early {
        Some(t) => (4, format!("terminated early: {t}")),
        None => (0, format!("{} rows logged", tr.len())),
    };
    Ok(Outcome {
        written: vec![csv_path, manifest],
        exit_code,
        message,
    })
}

pub fn mc(r: &Resolved) -> Result<Outcome, CliError> {
    let dir = OutDir::create(&r.config.output)?;
    let report: McReport = verify_clt(&r.mc, r.problem.as_ref(), &r.noise)?;
    let json = to_json(&report)?;
    let summary = report.summary();
    let paths = vec![
        dir.write("mc_report.json", &json)?,
        dir.write("summary.txt", summary.as_bytes())?,
    ];
    #[derive(Serialize)]
    struct McStatus {
        pass: bool,
        replicates: usize,
        blown_up: usize,
    }
    let manifest = write_manifest(
        &dir,
        "mc",
        &r.config,
        vec![
            OutputFile::new("mc_report.json", &json),
            OutputFile::new("summary.txt", summary.as_bytes()),
        ],
        McStatus {
            pass: report.pass,
            replicates: report.replicates,
            blown_up: report.blown_up,
        },
    )?;
    let mut written = paths;
    written.push(manifest);
    Ok(Outcome {
        written,
        exit_code: 0,
        message: format!("pass={}", report.pass),
    })
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    problem: &'a str,
    seed: u64,
    radius: f64,
    audit: &'a GradientAudit,
    /// Coordinate with the largest hypergradient deviation, when failing.
    offending_coordinate: Option<usize>,
    pass: bool,
}

pub fn check_grad(r: &Resolved) -> Result<Outcome, CliError> {
    let c = &r.config.check;
    let points: Vec<Vector> = random_points(r.problem.as_ref(), c.points, c.radius, c.seed)
        .into_iter()
        .map(|(x, _)| x)
        .collect();
    let audit = audit_gradients(r.problem.as_ref(), &points, c.tolerance)?;
    let out = CheckOutput {
        problem: r.problem.name(),
        seed: c.seed,
        radius: c.radius,
        offending_coordinate: (!audit.pass).then_some(audit.worst_coordinate),
        pass: audit.pass,
        audit: &audit,
    };
    let dir = OutDir::create(&r.config.output)?;
    let path = dir.write("check.json", &to_json(&out)?)?;
    Ok(Outcome {
        written: vec![path],
        exit_code: 0,
        message: format!("max error {:.3e}, pass={}", audit.max_error, audit.pass),
    })
}

#[derive(Serialize)]
struct ValidateOutput<'a> {
    problem: &'a str,
    d1: usize,
    d2: usize,
    steps: usize,
    assumptions: &'a AssumptionReport,
}

/// Loads and checks everything without simulating; also samples the
/// problem's regularity assumptions.
pub fn validate(r: &Resolved) -> Result<Outcome, CliError> {
    let c = &r.config.check;
    let points = random_points(r.problem.as_ref(), c.points, c.radius, c.seed);
    let report = check_assumptions(r.problem.as_ref(), &points, c.seed)?;
    if !report.passed() {
        return Err(CliError::Config(format!(
            "sampled regularity checks failed: {}",
            serde_json::to_string(&report).unwrap_or_default()
        )));
    }
    let out = ValidateOutput {
        problem: r.problem.name(),
        d1: r.problem.d1(),
        d2: r.problem.d2(),
        steps: r.engine.steps(),
        assumptions: &report,
    };
    let text = String::from_utf8(to_json(&out)?).unwrap_or_default();
    Ok(Outcome {
        written: Vec::new(),
        exit_code: 0,
        message: format!("configuration is valid\n{}", text.trim_end()),
    })
}
