//! The JSON run configuration.
//!
//! Every field is checked when the file is loaded; the same checks the
//! library applies before simulating are re-run here so a bad file fails
//! before any work is done.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttsa_core::mc_verifier::{McConfig, Tolerances};
use ttsa_core::problems::{
    langevin_toy, make_maml, quadratic_1d, CorruptedGradient, QuadraticBilevel,
};
use ttsa_core::sde_engine::{DiffusionTransient, DEFAULT_BLOWUP_BOUND};
use ttsa_core::{BilevelProblem, Matrix, NoiseModel, SchedulePair, TtsaConfig, Vector};

use crate::CliError;

/// A matrix given either as nested rows or as a scalar multiple of the
/// (possibly rectangular) identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl Default for MatrixSpec {
    fn default() -> Self {
        MatrixSpec::Scalar(0.0)
    }
}

impl MatrixSpec {
    fn resolve(&self, field: &str, rows: usize, cols: usize) -> Result<Matrix, CliError> {
        let m = match self {
            MatrixSpec::Scalar(s) => Matrix::identity(rows, cols) * *s,
            MatrixSpec::Rows(r) => ttsa_core::linalg::rows::from_rows(r)
                .map_err(|e| CliError::Config(format!("{field}: {e}")))?,
        };
        if m.shape() != (rows, cols) {
            return Err(CliError::Config(format!(
                "{field}: expected a {rows}x{cols} matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(m)
    }

    fn square(&self, field: &str) -> Result<Matrix, CliError> {
        match self {
            MatrixSpec::Scalar(_) => Err(CliError::Config(format!(
                "{field}: dimensions cannot be inferred from a scalar"
            ))),
            MatrixSpec::Rows(r) => self.resolve(field, r.len(), r.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", deny_unknown_fields)]
pub enum ProblemSpec {
    #[serde(rename = "quadratic1d")]
    Quadratic1d,
    /// `f = ½xᵀP_f x + ½yᵀR_f y`, `g = ½(y − Cᵀx − c₀)ᵀP_g(y − Cᵀx − c₀)`.
    #[serde(rename = "quadratic")]
    Quadratic {
        p_f: MatrixSpec,
        r_f: MatrixSpec,
        p_g: MatrixSpec,
        c: MatrixSpec,
        c0: Vec<f64>,
    },
    #[serde(rename = "maml")]
    Maml {
        tasks: usize,
        p: usize,
        seed: u64,
        lambda: f64,
    },
    #[serde(rename = "langevin_toy")]
    LangevinToy {
        p: MatrixSpec,
        m_map: MatrixSpec,
        m: Vec<f64>,
    },
}

/// Test fixture: adds `offset` to one coordinate of `∇_x f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptGradient {
    pub coordinate: usize,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockPair<T> {
    pub outer: T,
    pub inner: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransientSpec {
    pub outer: MatrixSpec,
    pub inner: MatrixSpec,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub bias_amp: Option<BlockPair<Vec<f64>>>,
    pub bias_rho: f64,
    pub diff_const: Option<BlockPair<MatrixSpec>>,
    pub diff_transient: Option<TransientSpec>,
    pub cross_corr: MatrixSpec,
}

fn default_stride() -> usize {
    1
}

fn default_bound() -> f64 {
    DEFAULT_BLOWUP_BOUND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    pub dt: f64,
    #[serde(rename = "T", alias = "horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub log_stride: usize,
    #[serde(default = "default_bound")]
    pub blowup_bound: f64,
    /// Defaults to zeros.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSpec {
    pub replicates: usize,
    pub tolerances: Tolerances,
}

impl Default for McSpec {
    fn default() -> Self {
        Self {
            replicates: 1000,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSpec {
    pub points: usize,
    pub radius: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self {
            points: 20,
            radius: 1.0,
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_gradient: Option<CorruptGradient>,
    pub schedules: SchedulePair,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub engine: EngineSpec,
    #[serde(default)]
    pub mc: McSpec,
    #[serde(default)]
    pub check: CheckSpec,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub threads: Option<usize>,
}

/// A loaded configuration with every library object built and validated.
pub struct Resolved {
    /// The configuration as run: overrides applied, defaults filled in.
    pub config: RunConfig,
    pub problem: Box<dyn BilevelProblem>,
    pub noise: NoiseModel,
    pub engine: TtsaConfig,
    pub mc: McConfig,
}

impl std::fmt::Debug for Resolved {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Resolved")
            .field("config", &self.config)
            .field("problem", &self.problem.name())
            .finish_non_exhaustive()
    }
}

/// Parses `text`; errors carry the field path and line/column.
pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("field `{path}`: {}", e.inner()))
    })?;
    de.end()
        .map_err(|e| CliError::Config(format!("trailing input: {e}")))?;
    Ok(config)
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Resolved, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    resolve(config, overrides)
}

fn build_problem(spec: &ProblemSpec) -> Result<Box<dyn BilevelProblem>, CliError> {
    Ok(match spec {
        ProblemSpec::Quadratic1d => Box::new(quadratic_1d()),
        ProblemSpec::Quadratic {
            p_f,
            r_f,
            p_g,
            c,
            c0,
        } => {
            let p_f = p_f.square("problem.p_f")?;
            let r_f = r_f.square("problem.r_f")?;
            let (d1, d2) = (p_f.nrows(), r_f.nrows());
            let p_g = p_g.resolve("problem.p_g", d2, d2)?;
            let c = c.resolve("problem.c", d1, d2)?;
            if c0.len() != d2 {
                return Err(CliError::Config(format!(
                    "problem.c0: expected length {d2}"
                )));
            }
            Box::new(QuadraticBilevel::new(
                p_f,
                r_f,
                p_g,
                c,
                Vector::from_column_slice(c0),
            )?)
        }
        ProblemSpec::Maml {
            tasks,
            p,
            seed,
            lambda,
        } => Box::new(make_maml(*tasks, *p, *seed, *lambda)?),
        ProblemSpec::LangevinToy { p, m_map, m } => {
            let d1 = m.len();
            let pm = p.square("problem.p")?;
            let m_map = m_map.resolve("problem.m_map", d1, pm.nrows())?;
            Box::new(langevin_toy(pm, m_map, Vector::from_column_slice(m))?)
        }
    })
}

fn build_noise(spec: &NoiseSpec, d1: usize, d2: usize) -> Result<NoiseModel, CliError> {
    let mut noise = NoiseModel::zero(d1, d2);
    if let Some(dc) = &spec.diff_const {
        noise.diff_const = (
            dc.outer.resolve("noise.diff_const.outer", d1, d1)?,
            dc.inner.resolve("noise.diff_const.inner", d2, d2)?,
        );
    }
    noise.cross_corr = spec.cross_corr.resolve("noise.cross_corr", d1, d2)?;
    if let Some(b) = &spec.bias_amp {
        noise.bias_amp = (
            Vector::from_column_slice(&b.outer),
            Vector::from_column_slice(&b.inner),
        );
    }
    noise.bias_rho = spec.bias_rho;
    if let Some(t) = &spec.diff_transient {
        noise.diff_transient = Some(DiffusionTransient {
            outer: t.outer.resolve("noise.diff_transient.outer", d1, d1)?,
            inner: t.inner.resolve("noise.diff_transient.inner", d2, d2)?,
            kappa: t.kappa,
        });
    }
    Ok(noise)
}

/// Applies overrides, builds the library objects and runs all validations.
pub fn resolve(mut config: RunConfig, overrides: &Overrides) -> Result<Resolved, CliError> {
    if let Some(out) = &overrides.out {
        config.output = out.clone();
    }
    if let Some(seed) = overrides.seed {
        config.engine.seed = seed;
    }
    if let Some(r) = overrides.replicates {
        config.mc.replicates = r;
    }
    config.schedules.check()?;

    let mut problem = build_problem(&config.problem)?;
    let (d1, d2) = (problem.d1(), problem.d2());
    if let Some(fixture) = &config.corrupt_gradient {
        if fixture.coordinate >= d1 {
            return Err(CliError::Config(format!(
                "corrupt_gradient.coordinate: {} out of range for d1 = {d1}",
                fixture.coordinate
            )));
        }
        problem = Box::new(CorruptedGradient::new(
            problem,
            fixture.coordinate,
            fixture.offset,
        ));
    }

    let e = &mut config.engine;
    let x0 = e.x0.get_or_insert_with(|| vec![0.0; d1]).clone();
    let y0 = e.y0.get_or_insert_with(|| vec![0.0; d2]).clone();
    let mut engine = TtsaConfig::new(
        e.dt,
        e.horizon,
        config.schedules,
        Vector::from_vec(x0),
        Vector::from_vec(y0),
    );
    engine.seed = e.seed;
    engine.log_stride = e.log_stride;
    engine.blowup_bound = e.blowup_bound;
    engine.validate(problem.as_ref())?;

    let noise = build_noise(&config.noise, d1, d2)?;
    noise.validate(d1, d2, &config.schedules)?;

    let mut mc = McConfig::new(config.mc.replicates, engine.clone());
    mc.tolerances = config.mc.tolerances;
    mc.threads = overrides.threads;

    let c = &config.check;
    if c.points == 0
        || c.radius.is_nan()
        || c.radius <= 0.0
        || c.tolerance.is_nan()
        || c.tolerance <= 0.0
    {
        return Err(CliError::Config(
            "check: points, radius and tolerance must be positive".into(),
        ));
    }

    Ok(Resolved {
        config,
        problem,
        noise,
        engine,
        mc,
    })
}

/// Reads the worker cap from `TTSA_THREADS`.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("TTSA_THREADS") {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "TTSA_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}
