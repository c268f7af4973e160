//! Replicated trajectories checked against the limit theorems.
//!
//! Replicate `r` integrates on stream `r` of the base seed, so the set of
//! final states does not depend on how many worker threads ran them.
//! Aggregation always walks replicates in index order.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clt_predictor::{self, CltPrediction};
use crate::error::{Error, Result};
use crate::hypergradient::{hypergrad, solve_inner};
use crate::linalg::{self, rows};
use crate::problem_model::{BilevelProblem, Matrix, Vector};
use crate::schedule::SchedulePair;
use crate::sde_engine::{run_observed, NoiseModel, Termination, TtsaConfig};

/// KS tests need at least this many replicates.
pub const KS_MIN_SAMPLES: usize = 20;
/// Seed of the fixed random projection that gets its own KS test.
const PROJECTION_SEED: u64 = 0x005e_ed0f_9e0c;

#[derive(Debug, Clone)]
pub struct McConfig {
    pub replicates: usize,
    pub base: TtsaConfig,
    /// Worker count hint; `None` uses rayon's default.
    pub threads: Option<usize>,
    pub tolerances: Tolerances,
}

/// Pass/fail thresholds applied to a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative Frobenius error of each covariance block.
    pub cov_rel: f64,
    /// Largest |correlation| between a rescaled x and a rescaled y coordinate.
    pub cross_corr: f64,
    /// Smallest acceptable KS p-value per coordinate.
    pub ks_p: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            cov_rel: 0.20,
            cross_corr: 0.15,
            ks_p: 0.01,
        }
    }
}

impl McConfig {
    pub fn new(replicates: usize, base: TtsaConfig) -> Self {
        Self {
            replicates,
            base,
            threads: None,
            tolerances: Tolerances::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!(
                "Monte Carlo needs at least 2 replicates, got {}",
                self.replicates
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("worker count must be positive".into()));
        }
        Ok(())
    }
}

/// Final states of the surviving replicates, in replicate order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSet {
    pub finals: Vec<(Vector, Vector)>,
    /// Replicate indices of the survivors.
    pub indices: Vec<usize>,
    pub final_time: f64,
    /// Logged times of the convergence curve.
    pub times: Vec<f64>,
    /// `‖x_t − x*‖` at `times`, one row per survivor (empty without `x*`).
    pub errors: Vec<Vec<f64>>,
    pub blown_up: Vec<(usize, Termination)>,
}

struct ReplicateRun {
    final_x: Vector,
    final_y: Vector,
    final_time: f64,
    times: Vec<f64>,
    errors: Vec<f64>,
    terminated: Option<Termination>,
}

fn run_one<P: BilevelProblem + ?Sized>(
    base: &TtsaConfig,
    prob: &P,
    noise: &NoiseModel,
    index: usize,
    x_star: Option<&Vector>,
) -> Result<ReplicateRun> {
    let mut times = Vec::new();
    let mut errors = Vec::new();
    let outcome = run_observed(base, prob, noise, index as u64, |t, x, _y| {
        if let Some(xs) = x_star {
            times.push(t);
            let e = x
                .iter()
                .zip(xs.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            errors.push(e);
        }
    })?;
    Ok(ReplicateRun {
        final_x: outcome.final_x,
        final_y: outcome.final_y,
        final_time: outcome.final_time,
        times,
        errors,
        terminated: outcome.terminated_early,
    })
}

fn in_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Runs `mc.replicates` independent trajectories.
///
/// Replicates that trip the blowup guard are dropped and listed; more than
/// 1% of them invalidates the experiment.
pub fn run_replicates<P: BilevelProblem + ?Sized>(
    mc: &McConfig,
    prob: &P,
    noise: &NoiseModel,
    x_star: Option<&Vector>,
) -> Result<ReplicateSet> {
    mc.validate()?;
    mc.base.validate(prob)?;
    noise.validate(prob.d1(), prob.d2(), &mc.base.schedules)?;

    let runs: Vec<Result<ReplicateRun>> = in_pool(mc.threads, || {
        (0..mc.replicates)
            .into_par_iter()
            .map(|r| run_one(&mc.base, prob, noise, r, x_star))
            .collect()
    })?;

    let mut set = ReplicateSet {
        finals: Vec::with_capacity(mc.replicates),
        indices: Vec::with_capacity(mc.replicates),
        final_time: 0.0,
        times: Vec::new(),
        errors: Vec::new(),
        blown_up: Vec::new(),
    };
    for (r, run) in runs.into_iter().enumerate() {
        let run = run?;
        if let Some(term) = run.terminated {
            set.blown_up.push((r, term));
            continue;
        }
        if set.indices.is_empty() {
            set.final_time = run.final_time;
            set.times = run.times.clone();
        }
        set.finals.push((run.final_x, run.final_y));
        set.indices.push(r);
        if x_star.is_some() {
            set.errors.push(run.errors);
        }
    }
    if set.blown_up.len() * 100 > mc.replicates {
        return Err(Error::ExperimentInvalid {
            blown_up: set.blown_up.len(),
            replicates: mc.replicates,
        });
    }
    Ok(set)
}

/// Maps final states to `(γ₁(T)^{-1/2}(x_T − x*), γ₂(T)^{-1/2}(y_T − y*))`,
/// one row per replicate.
pub fn rescale_errors(
    finals: &[(Vector, Vector)],
    schedules: &SchedulePair,
    horizon: f64,
    x_star: &Vector,
    y_star: &Vector,
) -> Result<(Matrix, Matrix)> {
    let g1 = schedules.outer.eval(horizon)?;
    let g2 = schedules.inner.eval(horizon)?;
    let (s1, s2) = (g1.sqrt().recip(), g2.sqrt().recip());
    let (d1, d2) = (x_star.len(), y_star.len());
    let mut sx = DMatrix::zeros(finals.len(), d1);
    let mut sy = DMatrix::zeros(finals.len(), d2);
    for (r, (x, y)) in finals.iter().enumerate() {
        if x.len() != d1 || y.len() != d2 {
            return Err(Error::Argument(
                "final state has the wrong dimensions".into(),
            ));
        }
        for j in 0..d1 {
            sx[(r, j)] = (x[j] - x_star[j]) * s1;
        }
        for j in 0..d2 {
            sy[(r, j)] = (y[j] - y_star[j]) * s2;
        }
    }
    Ok((sx, sy))
}

fn column_means(samples: &Matrix) -> Vector {
    let n = samples.nrows() as f64;
    Vector::from_fn(samples.ncols(), |j, _| {
        samples.column(j).iter().sum::<f64>() / n
    })
}

/// Sample cross-covariance of the columns of `a` and `b` (denominator `R − 1`).
pub fn empirical_cross_cov(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let r = a.nrows();
    if r < 2 || b.nrows() != r {
        return Err(Error::Argument(format!(
            "covariance needs at least 2 paired samples, got {r}"
        )));
    }
    let (ma, mb) = (column_means(a), column_means(b));
    let mut c = DMatrix::zeros(a.ncols(), b.ncols());
    for i in 0..a.ncols() {
        for j in 0..b.ncols() {
            let mut acc = 0.0;
            for k in 0..r {
                acc += (a[(k, i)] - ma[i]) * (b[(k, j)] - mb[j]);
            }
            c[(i, j)] = acc / (r - 1) as f64;
        }
    }
    Ok(c)
}

/// Sample covariance of the rows of `samples` about the sample mean.
pub fn empirical_cov(samples: &Matrix) -> Result<Matrix> {
    Ok(linalg::symmetrize(&empirical_cross_cov(samples, samples)?))
}

/// `‖emp − theory‖_F / ‖theory‖_F`; infinite when the theory is zero but the
/// estimate is not.
pub fn compare_cov(emp: &Matrix, theory: &Matrix) -> Result<f64> {
    if emp.shape() != theory.shape() {
        return Err(Error::Argument("covariance shapes differ".into()));
    }
    let tn = theory.norm();
    let diff = (emp - theory).norm();
    if tn == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(diff / tn)
}

fn normal_cdf(x: f64, sd: f64) -> f64 {
    0.5 * libm::erfc(-x / (sd * std::f64::consts::SQRT_2))
}

/// Survival function of the Kolmogorov distribution,
/// `P(K > λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // The alternating series converges slowly here; use the theta-function
        // form of the CDF instead.
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut cdf = 0.0;
        for k in 1..=100 {
            let term = (c * ((2 * k - 1) as f64).powi(2)).exp();
            cdf += term;
            if term < 1e-10 {
                break;
            }
        }
        let cdf = cdf * (2.0 * std::f64::consts::PI).sqrt() / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-10 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against `N(0, variance)`.
///
/// Returns the statistic and its asymptotic p-value.
pub fn ks_normality(samples: &[f64], variance: f64) -> Result<(f64, f64)> {
    if !(variance > 0.0) {
        return Err(Error::Argument(format!(
            "KS reference variance must be positive, got {variance}"
        )));
    }
    if samples.len() < KS_MIN_SAMPLES {
        return Err(Error::Argument(format!(
            "KS test needs at least {KS_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let sd = variance.sqrt();
    let stat = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x, sd);
            let above = (i + 1) as f64 / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max);
    Ok((stat, kolmogorov_sf(n.sqrt() * stat)))
}

#[derive(Debug, Clone, Serialize)]
pub struct KsResult {
    pub label: String,
    pub variance: f64,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub replicates: usize,
    pub survivors: usize,
    pub blown_up: usize,
    pub horizon: f64,
    pub gamma1_at_horizon: f64,
    pub gamma2_at_horizon: f64,
    #[serde(with = "rows")]
    pub x_star: Matrix,
    #[serde(with = "rows")]
    pub y_star: Matrix,
    #[serde(with = "rows")]
    pub empirical_sigma_x: Matrix,
    #[serde(with = "rows")]
    pub empirical_sigma_y: Matrix,
    #[serde(with = "rows")]
    pub empirical_sigma_xy: Matrix,
    #[serde(with = "rows")]
    pub theory_sigma_x: Matrix,
    #[serde(with = "rows")]
    pub theory_sigma_y: Matrix,
    /// `None` when the theoretical block is zero (degenerate comparison).
    pub rel_error_x: Option<f64>,
    pub rel_error_y: Option<f64>,
    pub degenerate: bool,
    /// `‖Σ̂_xy‖_F / √(‖Σ_x‖_F ‖Σ_y‖_F)`.
    pub cross_block_norm: Option<f64>,
    /// Largest |correlation coefficient| between rescaled x and y coordinates.
    pub max_cross_correlation: Option<f64>,
    pub ks: Vec<KsResult>,
    pub ks_skipped: Option<String>,
    pub mean_rescaled_x: Vec<f64>,
    pub mean_rescaled_y: Vec<f64>,
    /// `‖mean rescaled error‖`, compared with `3·√(tr Σ / R)`.
    pub mean_norm: f64,
    pub mean_bound: f64,
    pub curve_times: Vec<f64>,
    pub curve_median_error: Vec<f64>,
    pub tolerances: Tolerances,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl McReport {
    /// Median `‖x_t − x*‖` at the logged time closest to `t`.
    pub fn median_error_at(&self, t: f64) -> Option<f64> {
        self.curve_times
            .iter()
            .zip(&self.curve_median_error)
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .map(|(_, &e)| e)
    }

    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "replicates: {} ({} blown up)",
            self.replicates, self.blown_up
        );
        let _ = writeln!(s, "horizon T: {}", self.horizon);
        let _ = writeln!(
            s,
            "relative covariance error: x {}  y {}{}",
            fmt_opt(self.rel_error_x),
            fmt_opt(self.rel_error_y),
            if self.degenerate {
                "  (degenerate)"
            } else {
                ""
            }
        );
        let _ = writeln!(
            s,
            "cross block: norm {}  max |corr| {}",
            fmt_opt(self.cross_block_norm),
            fmt_opt(self.max_cross_correlation)
        );
        match &self.ks_skipped {
            Some(reason) => {
                let _ = writeln!(s, "KS: skipped ({reason})");
            }
            None => {
                for k in &self.ks {
                    let _ = writeln!(
                        s,
                        "KS {}: D = {:.4}, p = {:.4}",
                        k.label, k.statistic, k.p_value
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            "mean rescaled error: {:.4} (bound {:.4})",
            self.mean_norm, self.mean_bound
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "[{}] {}: {:.4} vs {:.4}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold
            );
        }
        let _ = writeln!(s, "pass={}", self.pass);
        s
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Deterministic gradient descent on `Φ` via the hypergradient, for
/// problems that do not expose their optimum.
pub fn find_optimum<P: BilevelProblem + ?Sized>(
    prob: &P,
    x0: &Vector,
    step: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(Vector, Vector)> {
    let mut x = x0.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let y = solve_inner(prob, &x, tol * 1e-2, 1_000_000)?;
        let g = hypergrad(prob, &x, &y)?.value;
        residual = g.norm();
        if residual <= tol {
            return Ok((x, y));
        }
        x -= g * step;
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        residual,
    })
}

fn fixed_projection(dim: usize) -> Vector {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let v = Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    let n = v.norm();
    v / n
}

/// Runs the replicates, compares them with the predicted limits and
/// evaluates the tolerances.
pub fn verify_clt<P: BilevelProblem + ?Sized>(
    mc: &McConfig,
    prob: &P,
    noise: &NoiseModel,
) -> Result<McReport> {
    let (x_star, y_star) = match prob.known_optimum() {
        Some(opt) => opt,
        None => find_optimum(prob, &mc.base.x0, 0.1, 1e-10, 1_000_000)
            .map_err(|e| e.at("locate optimum"))?,
    };
    let prediction: CltPrediction =
        clt_predictor::predict(prob, noise, &x_star, &y_star).map_err(|e| e.at("predict"))?;
    let set = run_replicates(mc, prob, noise, Some(&x_star)).map_err(|e| e.at("replicates"))?;
    build_report(mc, &set, &prediction, &x_star, &y_star)
}

/// Assembles a report from finished replicates and a prediction.
pub fn build_report(
    mc: &McConfig,
    set: &ReplicateSet,
    prediction: &CltPrediction,
    x_star: &Vector,
    y_star: &Vector,
) -> Result<McReport> {
    let schedules = &mc.base.schedules;
    let horizon = set.final_time;
    let (sx, sy) = rescale_errors(&set.finals, schedules, horizon, x_star, y_star)?;
    let r = sx.nrows();
    let (d1, d2) = (sx.ncols(), sy.ncols());
    let tol = mc.tolerances;

    let emp_x = empirical_cov(&sx).map_err(|e| e.at("covariance"))?;
    let emp_y = empirical_cov(&sy).map_err(|e| e.at("covariance"))?;
    let emp_xy = empirical_cross_cov(&sx, &sy)?;
    let (th_x, th_y) = (&prediction.sigma_x, &prediction.sigma_y);
    let degenerate = th_x.norm() == 0.0 || th_y.norm() == 0.0;

    let (rel_x, rel_y, cross_norm, max_corr) = if degenerate {
        (None, None, None, None)
    } else {
        let cross = emp_xy.norm() / (th_x.norm() * th_y.norm()).sqrt();
        let mut max_corr = 0.0f64;
        for i in 0..d1 {
            for j in 0..d2 {
                let denom = (emp_x[(i, i)] * emp_y[(j, j)]).sqrt();
                if denom > 0.0 {
                    max_corr = max_corr.max((emp_xy[(i, j)] / denom).abs());
                }
            }
        }
        (
            Some(compare_cov(&emp_x, th_x)?),
            Some(compare_cov(&emp_y, th_y)?),
            Some(cross),
            Some(max_corr),
        )
    };

    let mut ks = Vec::new();
    let ks_skipped = if r < KS_MIN_SAMPLES {
        Some(format!("{r} replicates < {KS_MIN_SAMPLES}"))
    } else if degenerate {
        Some("zero predicted covariance".to_string())
    } else {
        for j in 0..d1 {
            let col: Vec<f64> = sx.column(j).iter().copied().collect();
            let (statistic, p_value) = ks_normality(&col, th_x[(j, j)])?;
            ks.push(KsResult {
                label: format!("x_{j}"),
                variance: th_x[(j, j)],
                statistic,
                p_value,
            });
        }
        for j in 0..d2 {
            let col: Vec<f64> = sy.column(j).iter().copied().collect();
            let (statistic, p_value) = ks_normality(&col, th_y[(j, j)])?;
            ks.push(KsResult {
                label: format!("y_{j}"),
                variance: th_y[(j, j)],
                statistic,
                p_value,
            });
        }
        // one seeded direction through the joint rescaled vector
        let u = fixed_projection(d1 + d2);
        let (ux, uy) = (u.rows(0, d1).into_owned(), u.rows(d1, d2).into_owned());
        let var = (ux.transpose() * th_x * &ux)[(0, 0)] + (uy.transpose() * th_y * &uy)[(0, 0)];
        let proj: Vec<f64> = (0..r)
            .map(|k| sx.row(k).transpose().dot(&ux) + sy.row(k).transpose().dot(&uy))
            .collect();
        let (statistic, p_value) = ks_normality(&proj, var)?;
        ks.push(KsResult {
            label: "projection".to_string(),
            variance: var,
            statistic,
            p_value,
        });
        None
    };

    let mean_x = column_means(&sx);
    let mean_y = column_means(&sy);
    let mean_norm = (mean_x.norm_squared() + mean_y.norm_squared()).sqrt();
    let mean_bound = 3.0 * ((th_x.trace() + th_y.trace()) / r as f64).sqrt();

    let curve_median_error: Vec<f64> = (0..set.times.len())
        .map(|k| {
            let mut col: Vec<f64> = set.errors.iter().map(|row| row[k]).collect();
            median(&mut col)
        })
        .collect();

    let mut checks = Vec::new();
    if let (Some(ex), Some(ey), Some(mc_corr)) = (rel_x, rel_y, max_corr) {
        checks.push(Check {
            name: "rel_error_sigma_x".into(),
            value: ex,
            threshold: tol.cov_rel,
            pass: ex <= tol.cov_rel,
        });
        checks.push(Check {
            name: "rel_error_sigma_y".into(),
            value: ey,
            threshold: tol.cov_rel,
            pass: ey <= tol.cov_rel,
        });
        checks.push(Check {
            name: "max_cross_correlation".into(),
            value: mc_corr,
            threshold: tol.cross_corr,
            pass: mc_corr <= tol.cross_corr,
        });
    }
    for k in ks.iter().filter(|k| k.label != "projection") {
        checks.push(Check {
            name: format!("ks_p_{}", k.label),
            value: k.p_value,
            threshold: tol.ks_p,
            pass: k.p_value >= tol.ks_p,
        });
    }
    let pass = checks.iter().all(|c| c.pass);

    let as_col = |v: &Vector| DMatrix::from_column_slice(1, v.len(), v.as_slice());
    Ok(McReport {
        replicates: mc.replicates,
        survivors: r,
        blown_up: set.blown_up.len(),
        horizon,
        gamma1_at_horizon: schedules.outer.eval(horizon)?,
        gamma2_at_horizon: schedules.inner.eval(horizon)?,
        x_star: as_col(x_star),
        y_star: as_col(y_star),
        empirical_sigma_x: emp_x,
        empirical_sigma_y: emp_y,
        empirical_sigma_xy: emp_xy,
        theory_sigma_x: th_x.clone(),
        theory_sigma_y: th_y.clone(),
        rel_error_x: rel_x,
        rel_error_y: rel_y,
        degenerate,
        cross_block_norm: cross_norm,
        max_cross_correlation: max_corr,
        ks,
        ks_skipped,
        mean_rescaled_x: mean_x.iter().copied().collect(),
        mean_rescaled_y: mean_y.iter().copied().collect(),
        mean_norm,
        mean_bound,
        curve_times: set.times.clone(),
        curve_median_error,
        tolerances: tol,
        checks,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::quadratic_1d;
    use crate::schedule::LearningRateSchedule;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn schedules() -> SchedulePair {
        SchedulePair::new(
            LearningRateSchedule::new(1.0, 1.0, 0.9),
            LearningRateSchedule::new(1.0, 1.0, 0.6),
        )
    }

    fn base(horizon: f64) -> TtsaConfig {
        let mut c = TtsaConfig::new(
            0.01,
            horizon,
            schedules(),
            Vector::from_element(1, 1.0),
            Vector::from_element(1, 1.0),
        );
        c.seed = 17;
        c.log_stride = 100;
        c
    }

    /// Inverse standard normal CDF by bisection on the erfc-based CDF.
    fn normal_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid, 1.0) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn empirical_cov_examples() {
        let s = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        assert_relative_eq!(empirical_cov(&s).unwrap()[(0, 0)], 1.0);
        let s = DMatrix::from_element(5, 2, 3.0);
        assert_eq!(empirical_cov(&s).unwrap(), DMatrix::zeros(2, 2));
        assert!(empirical_cov(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn empirical_variance_of_normal_draws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let s = DMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
        let v = empirical_cov(&s).unwrap()[(0, 0)];
        // standard error of a sample variance: √(2/(n−1))
        let se = (2.0 / (n - 1) as f64).sqrt();
        assert!((v - 1.0).abs() <= 3.0 * se, "{v}");
    }

    #[test]
    fn compare_cov_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_eq!(compare_cov(&i, &i).unwrap(), 0.0);
        let s = |v| DMatrix::from_element(1, 1, v);
        assert_relative_eq!(
            compare_cov(&s(1.1), &s(1.0)).unwrap(),
            0.1,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            compare_cov(&s(0.55), &s(0.5)).unwrap(),
            0.1,
            max_relative = 1e-12
        );
        assert!(compare_cov(&s(0.1), &s(0.0)).unwrap().is_infinite());
    }

    #[test]
    fn ks_on_exact_quantiles() {
        let r = 99;
        let samples: Vec<f64> = (1..=r)
            .map(|i| normal_quantile(i as f64 / (r + 1) as f64))
            .collect();
        let (d, p) = ks_normality(&samples, 1.0).unwrap();
        assert!(d <= 0.01 + 1e-12, "{d}");
        assert!(p > 0.99);
    }

    #[test]
    fn ks_on_point_mass() {
        let (d, p) = ks_normality(&[0.0; 100], 1.0).unwrap();
        assert_relative_eq!(d, 0.5, max_relative = 1e-15);
        assert!(p < 1e-20);
    }

    #[test]
    fn ks_preconditions() {
        assert!(ks_normality(&[0.0; 5], 1.0).is_err());
        assert!(ks_normality(&[0.0; 50], 0.0).is_err());
    }

    #[test]
    fn kolmogorov_survival_reference_values() {
        // Tabulated quantiles of the Kolmogorov distribution.
        assert_abs_diff_eq!(kolmogorov_sf(1.3581), 0.05, epsilon = 1e-4);
        assert_abs_diff_eq!(kolmogorov_sf(1.6276), 0.01, epsilon = 1e-4);
        assert_abs_diff_eq!(kolmogorov_sf(1.2238), 0.10, epsilon = 1e-4);
        // the two branches meet continuously
        assert_abs_diff_eq!(
            kolmogorov_sf(1.0 - 1e-12),
            kolmogorov_sf(1.0),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(kolmogorov_sf(0.1), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rescaling_examples() {
        let s = schedules();
        let x = Vector::from_element(1, 0.0);
        let finals = vec![(x.clone(), x.clone())];
        let (sx, sy) = rescale_errors(&finals, &s, 100.0, &x, &x).unwrap();
        assert_eq!((sx[(0, 0)], sy[(0, 0)]), (0.0, 0.0));

        // γ₁(T) = 1e-4 with γ₀ = 1e-4, η small over δ = 1: use T = 0
        let tiny = SchedulePair::new(
            LearningRateSchedule::new(1e-4, 1.0, 0.9),
            LearningRateSchedule::new(1.0, 1.0, 0.6),
        );
        let finals = vec![(Vector::from_element(1, 0.01), x.clone())];
        let (sx, _) = rescale_errors(&finals, &tiny, 0.0, &x, &x).unwrap();
        assert_relative_eq!(sx[(0, 0)], 1.0, max_relative = 1e-12);

        let finals = vec![(Vector::from_element(1, 0.3), Vector::from_element(1, -0.2))];
        let (sx, sy) = rescale_errors(&finals, &s, 0.0, &x, &x).unwrap();
        assert_eq!((sx[(0, 0)], sy[(0, 0)]), (0.3, -0.2));
    }

    #[test]
    fn zero_noise_replicates_coincide() {
        let mc = McConfig::new(2, base(5.0));
        let set = run_replicates(&mc, &quadratic_1d(), &NoiseModel::zero(1, 1), None).unwrap();
        assert_eq!(set.finals[0], set.finals[1]);
    }

    #[test]
    fn too_few_replicates_is_a_config_error() {
        let mc = McConfig::new(1, base(5.0));
        assert!(matches!(
            run_replicates(&mc, &quadratic_1d(), &NoiseModel::zero(1, 1), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn replicates_are_reproducible_across_thread_counts() {
        let noise = NoiseModel::isotropic(1, 1, 1.0, 1.0);
        let mut mc = McConfig::new(100, base(2.0));
        mc.threads = Some(1);
        let a = run_replicates(&mc, &quadratic_1d(), &noise, None).unwrap();
        mc.threads = Some(3);
        let b = run_replicates(&mc, &quadratic_1d(), &noise, None).unwrap();
        assert_eq!(a, b);
        // replicates draw from distinct streams
        assert_ne!(a.finals[0], a.finals[1]);
    }

    #[test]
    fn blowups_beyond_one_percent_invalidate_the_experiment() {
        let mut b = base(1.0);
        b.blowup_bound = 1.5; // ‖x₀‖ + ‖y₀‖ = 2
        let mc = McConfig::new(10, b);
        assert!(matches!(
            run_replicates(&mc, &quadratic_1d(), &NoiseModel::zero(1, 1), None),
            Err(Error::ExperimentInvalid {
                blown_up: 10,
                replicates: 10
            })
        ));
    }

    #[test]
    fn degenerate_and_gated_reports() {
        let mc = McConfig::new(3, base(5.0));
        let report = verify_clt(&mc, &quadratic_1d(), &NoiseModel::zero(1, 1)).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.empirical_sigma_x[(0, 0)], 0.0);
        assert!(report.rel_error_x.is_none());
        assert!(report.ks_skipped.is_some());

        let mc = McConfig::new(2, base(5.0));
        let report =
            verify_clt(&mc, &quadratic_1d(), &NoiseModel::isotropic(1, 1, 1.0, 1.0)).unwrap();
        assert!(report.ks.is_empty());
        assert!(report.ks_skipped.as_deref().unwrap().contains("< 20"));
    }

    #[test]
    fn median_helper() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn find_optimum_recovers_known_solution() {
        let p = crate::problems::make_maml(2, 2, 1, 3.0).unwrap();
        let (x, _) = find_optimum(&p, &Vector::zeros(2), 1.0, 1e-10, 100_000).unwrap();
        let (xs, _) = p.known_optimum().unwrap();
        assert!((x - xs).norm() < 1e-8);
    }
}
