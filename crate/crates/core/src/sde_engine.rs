//! Euler–Maruyama simulation of the coupled two-timescale recursions.
//!
//! Each step applies
//!
//! ```text
//! x ← x + γ₁(t) · [ −∇̄_x f(x, y) dt + η₁(t) dt + σ₁(t) √dt ξ₁ ]
//! y ← y + γ₂(t) · [ −∇_y g(x, y) dt + η₂(t) dt + σ₂(t) √dt ξ₂ ]
//! ```
//!
//! with the learning rates taken at the left endpoint and `(ξ₁, ξ₂)` a
//! correlated standard Gaussian block. The drifts are negated gradients:
//! the recursion descends both objectives.
//!
//! Every step draws exactly `d1 + d2` standard normals from the trajectory's
//! stream, whether or not the noise amplitudes are zero, so runs that differ
//! only in noise settings see the same Brownian increments.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem_model::{BilevelProblem, Matrix, Vector};
use crate::schedule::SchedulePair;

/// Additive transient on the diffusion coefficients:
/// `σᵢ(t) = σ∞ᵢ + Dᵢ (1 + t)^(−κ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTransient {
    pub outer: Matrix,
    pub inner: Matrix,
    pub kappa: f64,
}

/// Bias and diffusion schedules of the gradient observations.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// `(b₁, b₂)`; the bias is `bᵢ (1 + t)^(−ρ)`.
    pub bias_amp: (Vector, Vector),
    pub bias_rho: f64,
    /// Limiting diffusion coefficients `(σ∞⁽¹⁾, σ∞⁽²⁾)`.
    pub diff_const: (Matrix, Matrix),
    pub diff_transient: Option<DiffusionTransient>,
    /// `d1 × d2` correlation between the two driving Brownian motions.
    pub cross_corr: Matrix,
}

impl NoiseModel {
    pub fn zero(d1: usize, d2: usize) -> Self {
        Self::isotropic(d1, d2, 0.0, 0.0)
    }

    /// Unbiased noise with `σ₁ = s₁ I`, `σ₂ = s₂ I` and independent drivers.
    pub fn isotropic(d1: usize, d2: usize, s1: f64, s2: f64) -> Self {
        Self {
            bias_amp: (DVector::zeros(d1), DVector::zeros(d2)),
            bias_rho: 0.0,
            diff_const: (
                DMatrix::identity(d1, d1) * s1,
                DMatrix::identity(d2, d2) * s2,
            ),
            diff_transient: None,
            cross_corr: DMatrix::zeros(d1, d2),
        }
    }

    pub fn with_cross_corr(mut self, cross_corr: Matrix) -> Self {
        self.cross_corr = cross_corr;
        self
    }

    pub fn with_bias(mut self, outer: Vector, inner: Vector, rho: f64) -> Self {
        self.bias_amp = (outer, inner);
        self.bias_rho = rho;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.diff_const.0.nrows(), self.diff_const.1.nrows())
    }

    pub fn has_bias(&self) -> bool {
        self.bias_amp
            .0
            .iter()
            .chain(self.bias_amp.1.iter())
            .any(|&b| b != 0.0)
    }

    /// Joint correlation matrix `[[I, ρ_c], [ρ_cᵀ, I]]` of `(ξ₁, ξ₂)`.
    pub fn joint_correlation(&self) -> Matrix {
        let (d1, d2) = self.dims();
        let mut m = DMatrix::identity(d1 + d2, d1 + d2);
        m.view_mut((0, d1), (d1, d2)).copy_from(&self.cross_corr);
        m.view_mut((d1, 0), (d2, d1))
            .copy_from(&self.cross_corr.transpose());
        m
    }

    /// Limits `(Γ₁₁, Γ₂₂, Γ₁₂)` of the instantaneous noise covariances:
    /// `Γᵢⱼ = σ∞⁽ⁱ⁾ E[ξᵢ ξⱼᵀ] σ∞⁽ʲ⁾ᵀ`.
    pub fn limit_covariances(&self) -> (Matrix, Matrix, Matrix) {
        let (s1, s2) = &self.diff_const;
        (
            s1 * s1.transpose(),
            s2 * s2.transpose(),
            s1 * &self.cross_corr * s2.transpose(),
        )
    }

    /// Shape and assumption checks for a `(d1, d2)` problem integrated under
    /// `schedules`.
    pub fn validate(&self, d1: usize, d2: usize, schedules: &SchedulePair) -> Result<()> {
        let (s1, s2) = &self.diff_const;
        if s1.shape() != (d1, d1) || s2.shape() != (d2, d2) {
            return Err(Error::Config(format!(
                "diffusion blocks must be {d1}×{d1} and {d2}×{d2}"
            )));
        }
        if self.bias_amp.0.len() != d1 || self.bias_amp.1.len() != d2 {
            return Err(Error::Config(
                "bias amplitudes have the wrong length".into(),
            ));
        }
        if self.cross_corr.shape() != (d1, d2) {
            return Err(Error::Config(format!("cross_corr must be {d1}×{d2}")));
        }
        let all = s1
            .iter()
            .chain(s2.iter())
            .chain(self.cross_corr.iter())
            .chain(self.bias_amp.0.iter())
            .chain(self.bias_amp.1.iter());
        if all.into_iter().any(|v| !v.is_finite()) || !self.bias_rho.is_finite() {
            return Err(Error::Config("noise parameters must be finite".into()));
        }
        if self.cross_corr.iter().any(|c| c.abs() > 1.0) {
            return Err(Error::Config(
                "cross_corr entries must lie in [-1, 1]".into(),
            ));
        }
        if let Some(tr) = &self.diff_transient {
            if tr.outer.shape() != (d1, d1) || tr.inner.shape() != (d2, d2) {
                return Err(Error::Config(
                    "diffusion transient has the wrong shape".into(),
                ));
            }
            if !(tr.kappa > 0.0) {
                return Err(Error::Config("diffusion transient needs kappa > 0".into()));
            }
        }
        if self.bias_rho < 0.0 {
            return Err(Error::Config("bias_rho must be non-negative".into()));
        }
        if self.has_bias() && !(self.bias_rho > schedules.outer.eta / 2.0) {
            return Err(Error::Config(format!(
                "bias-decay assumption violated: bias must vanish faster than the square root \
                 of the outer learning rate, need bias_rho > eta1/2 = {} (got {})",
                schedules.outer.eta / 2.0,
                self.bias_rho
            )));
        }
        linalg::psd_factor(&self.joint_correlation(), 1e-12)?;
        Ok(())
    }
}

/// Discretization and bookkeeping of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsaConfig {
    pub dt: f64,
    pub horizon: f64,
    pub schedules: SchedulePair,
    pub x0: Vector,
    pub y0: Vector,
    pub seed: u64,
    pub log_stride: usize,
    pub blowup_bound: f64,
}

pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

impl TtsaConfig {
    pub fn new(dt: f64, horizon: f64, schedules: SchedulePair, x0: Vector, y0: Vector) -> Self {
        Self {
            dt,
            horizon,
            schedules,
            x0,
            y0,
            seed: 0,
            log_stride: 1,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
        }
    }

    /// Number of Euler steps: the smallest `n` with `n·dt ≥ T` up to a
    /// relative slack of `1e-9`.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt) * (1.0 - 1e-12) - 1e-9)
            .ceil()
            .max(1.0) as usize
    }

    pub fn validate<P: BilevelProblem + ?Sized>(&self, prob: &P) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon T must be positive, got {}",
                self.horizon
            )));
        }
        if self.dt > self.horizon {
            return Err(Error::Config(format!(
                "dt ({}) exceeds the horizon T ({})",
                self.dt, self.horizon
            )));
        }
        if self.log_stride == 0 {
            return Err(Error::Config("log_stride must be at least 1".into()));
        }
        if !(self.blowup_bound > 0.0) {
            return Err(Error::Config("blowup_bound must be positive".into()));
        }
        if self.x0.len() != prob.d1() || self.y0.len() != prob.d2() {
            return Err(Error::Config(format!(
                "initial state must have dimensions ({}, {})",
                prob.d1(),
                prob.d2()
            )));
        }
        self.schedules.check()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Termination {
    /// `‖x‖ + ‖y‖` exceeded the configured bound before step `step`.
    BoundExceeded { step: usize, norm: f64 },
    /// The state became non-finite during step `step`.
    NonFinite { step: usize },
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::BoundExceeded { step, norm } => {
                write!(
                    f,
                    "state norm {norm:.6e} exceeded the blowup bound at step {step}"
                )
            }
            Termination::NonFinite { step } => write!(f, "non-finite state at step {step}"),
        }
    }
}

/// Logged points of one run, every `log_stride` steps from `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub xs: Vec<Vector>,
    pub ys: Vec<Vector>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    /// State after the last completed step, logged or not.
    pub final_time: f64,
    pub final_x: Vector,
    pub final_y: Vector,
    pub terminated_early: Option<Termination>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// The RNG stream owned by one trajectory.
pub fn trajectory_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noise model resolved for stepping: the joint correlation factor is
/// computed once.
#[derive(Debug, Clone)]
pub struct PreparedNoise {
    d1: usize,
    d2: usize,
    corr_factor: Option<Matrix>,
    model: NoiseModel,
}

impl PreparedNoise {
    pub fn new(model: &NoiseModel) -> Result<Self> {
        let (d1, d2) = model.dims();
        let corr_factor = if model.cross_corr.iter().all(|&c| c == 0.0) {
            None
        } else {
            Some(linalg::psd_factor(&model.joint_correlation(), 1e-12)?)
        };
        Ok(Self {
            d1,
            d2,
            corr_factor,
            model: model.clone(),
        })
    }

    /// Draws `(ξ₁, ξ₂)` into `xi` (length `d1 + d2`), using `z` as scratch.
    #[inline]
    fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], xi: &mut [f64]) {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        match &self.corr_factor {
            None => xi.copy_from_slice(z),
            Some(l) => {
                let n = z.len();
                let data = l.as_slice();
                xi.iter_mut().for_each(|v| *v = 0.0);
                for (j, &zj) in z.iter().enumerate() {
                    // lower triangular: column j has nonzeros in rows j..n
                    for i in j..n {
                        xi[i] += data[j * n + i] * zj;
                    }
                }
            }
        }
    }

    /// Adds `σᵢ(t) ξᵢ · scale` into `out`.
    #[inline]
    fn add_diffusion(&self, which: usize, t: f64, xi: &[f64], scale: f64, out: &mut [f64]) {
        let sigma = if which == 0 {
            &self.model.diff_const.0
        } else {
            &self.model.diff_const.1
        };
        add_matvec(sigma, xi, scale, out);
        if let Some(tr) = &self.model.diff_transient {
            let d = if which == 0 { &tr.outer } else { &tr.inner };
            add_matvec(d, xi, scale * (1.0 + t).powf(-tr.kappa), out);
        }
    }

    #[inline]
    fn add_bias(&self, which: usize, t: f64, scale: f64, out: &mut [f64]) {
        let b = if which == 0 {
            &self.model.bias_amp.0
        } else {
            &self.model.bias_amp.1
        };
        let decay = scale * (1.0 + t).powf(-self.model.bias_rho);
        for (o, &bi) in out.iter_mut().zip(b.iter()) {
            *o += bi * decay;
        }
    }
}

#[inline]
fn add_matvec(m: &Matrix, v: &[f64], scale: f64, out: &mut [f64]) {
    let rows = m.nrows();
    let data = m.as_slice();
    for (j, &vj) in v.iter().enumerate() {
        let s = vj * scale;
        if s == 0.0 {
            continue;
        }
        for (o, &mij) in out.iter_mut().zip(&data[j * rows..(j + 1) * rows]) {
            *o += mij * s;
        }
    }
}

/// Reusable buffers for stepping one trajectory.
pub struct Stepper<'a, P: BilevelProblem + ?Sized> {
    prob: &'a P,
    noise: PreparedNoise,
    schedules: SchedulePair,
    z: Vec<f64>,
    xi: Vec<f64>,
    hx: Vec<f64>,
    gy: Vec<f64>,
}

impl<'a, P: BilevelProblem + ?Sized> Stepper<'a, P> {
    pub fn new(prob: &'a P, noise: &NoiseModel, schedules: SchedulePair) -> Result<Self> {
        let noise = PreparedNoise::new(noise)?;
        if (noise.d1, noise.d2) != (prob.d1(), prob.d2()) {
            return Err(Error::Config(
                "noise model dimensions do not match the problem".into(),
            ));
        }
        let d = prob.d1() + prob.d2();
        Ok(Self {
            prob,
            noise,
            schedules,
            z: vec![0.0; d],
            xi: vec![0.0; d],
            hx: vec![0.0; prob.d1()],
            gy: vec![0.0; prob.d2()],
        })
    }

    /// Writes the bracketed observation increments into `dh1`, `dh2`.
    #[allow(clippy::too_many_arguments)]
    pub fn increment<R: rand::Rng + ?Sized>(
        &mut self,
        x: &[f64],
        y: &[f64],
        t: f64,
        dt: f64,
        rng: &mut R,
        dh1: &mut [f64],
        dh2: &mut [f64],
    ) -> Result<()> {
        self.prob.gradient_field(x, y, &mut self.hx, &mut self.gy)?;
        self.noise.draw(rng, &mut self.z, &mut self.xi);
        let d1 = self.hx.len();
        for (o, &h) in dh1.iter_mut().zip(&self.hx) {
            *o = -h * dt;
        }
        for (o, &g) in dh2.iter_mut().zip(&self.gy) {
            *o = -g * dt;
        }
        self.noise.add_bias(0, t, dt, dh1);
        self.noise.add_bias(1, t, dt, dh2);
        let sq = dt.sqrt();
        let (xi1, xi2) = self.xi.split_at(d1);
        self.noise.add_diffusion(0, t, xi1, sq, dh1);
        self.noise.add_diffusion(1, t, xi2, sq, dh2);
        Ok(())
    }

    /// One Euler–Maruyama step in place. Returns `false` if the new state is
    /// not finite.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn step_in_place<R: rand::Rng + ?Sized>(
        &mut self,
        x: &mut [f64],
        y: &mut [f64],
        t: f64,
        dt: f64,
        rng: &mut R,
        dh1: &mut [f64],
        dh2: &mut [f64],
    ) -> Result<bool> {
        self.increment(x, y, t, dt, rng, dh1, dh2)?;
        let g1 = self.schedules.outer.at(t);
        let g2 = self.schedules.inner.at(t);
        let mut finite = true;
        for (xi, &d) in x.iter_mut().zip(dh1.iter()) {
            *xi += g1 * d;
            finite &= xi.is_finite();
        }
        for (yi, &d) in y.iter_mut().zip(dh2.iter()) {
            *yi += g2 * d;
            finite &= yi.is_finite();
        }
        Ok(finite)
    }
}

fn check_state<P: BilevelProblem + ?Sized>(prob: &P, x: &Vector, y: &Vector) -> Result<()> {
    if x.len() != prob.d1() || y.len() != prob.d2() {
        return Err(Error::Argument("state has the wrong dimensions".into()));
    }
    Ok(())
}

/// Bracketed increments `(dh₁, dh₂)` at state `(x, y)`, before scaling by
/// the learning rates.
pub fn observation_increment<P, R>(
    prob: &P,
    noise: &NoiseModel,
    state: (&Vector, &Vector),
    t: f64,
    dt: f64,
    schedules: &SchedulePair,
    rng: &mut R,
) -> Result<(Vector, Vector)>
where
    P: BilevelProblem + ?Sized,
    R: rand::Rng + ?Sized,
{
    let (x, y) = state;
    check_state(prob, x, y)?;
    let mut stepper = Stepper::new(prob, noise, *schedules)?;
    let mut dh1 = vec![0.0; prob.d1()];
    let mut dh2 = vec![0.0; prob.d2()];
    stepper.increment(x.as_slice(), y.as_slice(), t, dt, rng, &mut dh1, &mut dh2)?;
    let (dh1, dh2) = (Vector::from_vec(dh1), Vector::from_vec(dh2));
    if dh1.iter().chain(dh2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Blowup(format!("non-finite increment at t = {t}")));
    }
    Ok((dh1, dh2))
}

/// One Euler–Maruyama step: `state + γ(t) · increment`.
pub fn em_step<P, R>(
    state: (&Vector, &Vector),
    t: f64,
    dt: f64,
    prob: &P,
    noise: &NoiseModel,
    schedules: &SchedulePair,
    rng: &mut R,
) -> Result<(Vector, Vector)>
where
    P: BilevelProblem + ?Sized,
    R: rand::Rng + ?Sized,
{
    let (x, y) = state;
    check_state(prob, x, y)?;
    let mut stepper = Stepper::new(prob, noise, *schedules)?;
    let mut xs = x.as_slice().to_vec();
    let mut ys = y.as_slice().to_vec();
    let mut dh1 = vec![0.0; prob.d1()];
    let mut dh2 = vec![0.0; prob.d2()];
    let finite = stepper.step_in_place(&mut xs, &mut ys, t, dt, rng, &mut dh1, &mut dh2)?;
    if !finite {
        return Err(Error::Blowup(format!(
            "non-finite state after step at t = {t}"
        )));
    }
    Ok((Vector::from_vec(xs), Vector::from_vec(ys)))
}

/// Outcome of [`run_observed`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_time: f64,
    pub final_x: Vector,
    pub final_y: Vector,
    pub terminated_early: Option<Termination>,
}

/// Validates, then integrates from `t = 0` to `T` on the stream
/// `(config.seed, stream)`, calling `observe(t, x, y)` at every logged step.
pub fn run_observed<P, F>(
    config: &TtsaConfig,
    prob: &P,
    noise: &NoiseModel,
    stream: u64,
    mut observe: F,
) -> Result<RunOutcome>
where
    P: BilevelProblem + ?Sized,
    F: FnMut(f64, &[f64], &[f64]),
{
    config.validate(prob)?;
    noise.validate(prob.d1(), prob.d2(), &config.schedules)?;

    let mut stepper = Stepper::new(prob, noise, config.schedules)?;
    let mut rng = trajectory_rng(config.seed, stream);
    let mut x = config.x0.as_slice().to_vec();
    let mut y = config.y0.as_slice().to_vec();
    let mut dh1 = vec![0.0; prob.d1()];
    let mut dh2 = vec![0.0; prob.d2()];
    let n = config.steps();
    let dt = config.dt;
    let bound = config.blowup_bound;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();

    let mut terminated = None;
    let mut t = 0.0;
    observe(0.0, &x, &y);
    for k in 0..n {
        let size = norm(&x) + norm(&y);
        if size > bound {
            terminated = Some(Termination::BoundExceeded {
                step: k,
                norm: size,
            });
            break;
        }
        t = k as f64 * dt;
        let finite = stepper.step_in_place(&mut x, &mut y, t, dt, &mut rng, &mut dh1, &mut dh2)?;
        t = (k + 1) as f64 * dt;
        if !finite {
            terminated = Some(Termination::NonFinite { step: k });
            break;
        }
        if (k + 1) % config.log_stride == 0 {
            observe(t, &x, &y);
        }
    }
    if terminated.is_none() {
        let size = norm(&x) + norm(&y);
        if size > bound {
            terminated = Some(Termination::BoundExceeded {
                step: n,
                norm: size,
            });
        }
    }
    Ok(RunOutcome {
        final_time: t,
        final_x: Vector::from_vec(x),
        final_y: Vector::from_vec(y),
        terminated_early: terminated,
    })
}

/// Integrates one trajectory on stream 0 of `config.seed`.
pub fn integrate<P: BilevelProblem + ?Sized>(
    config: &TtsaConfig,
    prob: &P,
    noise: &NoiseModel,
) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let outcome = run_observed(config, prob, noise, 0, |t, x, y| {
        times.push(t);
        xs.push(Vector::from_column_slice(x));
        ys.push(Vector::from_column_slice(y));
    })?;
    let gamma1 = times
        .iter()
        .map(|&t| config.schedules.outer.at(t))
        .collect();
    let gamma2 = times
        .iter()
        .map(|&t| config.schedules.inner.at(t))
        .collect();
    Ok(Trajectory {
        times,
        xs,
        ys,
        gamma1,
        gamma2,
        final_time: outcome.final_time,
        final_x: outcome.final_x,
        final_y: outcome.final_y,
        terminated_early: outcome.terminated_early,
    })
}
