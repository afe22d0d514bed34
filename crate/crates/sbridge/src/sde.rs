//! SDE/ODE machinery: diffusion schedules, Euler-Maruyama integration of the
//! policy-controlled forward/backward SDEs, the probability-flow ODE, and the
//! path-wise (Y, Yhat) accumulators.

use ndarray::{Array1, Array2};

use crate::autodiff::{divergence_exact_batch, DivergenceMode, VectorField};
use crate::data::PriorSpec;
use crate::error::{Error, Result};
use crate::nets::Policy;
use crate::rng;

/// Base drift of the uncontrolled diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    /// f = 0 (variance-exploding base diffusion).
    Degenerate,
    /// f = alpha(t) x with alpha(t) = -beta(t)/2, beta linear in t.
    Linear,
}

/// Base drift, diffusion schedule, horizon, and uniform time grid.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SdeSpec {
    pub drift: DriftKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_horizon: f64,
    pub steps: usize,
}

const BETA_MIN: f64 = 0.1;
const BETA_MAX: f64 = 20.0;

impl SdeSpec {
    pub fn new(
        drift: DriftKind,
        sigma_min: f64,
        sigma_max: f64,
        t_horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        if sigma_max <= sigma_min || sigma_min <= 0.0 {
            return Err(Error::InvalidSchedule);
        }
        assert!(t_horizon > 0.0 && steps > 0);
        Ok(Self {
            drift,
            sigma_min,
            sigma_max,
            t_horizon,
            steps,
        })
    }

    /// Toy defaults: degenerate drift, sigma in [0.01, 1], T = 1, 100 steps.
    pub fn toy() -> Self {
        Self::new(DriftKind::Degenerate, 0.01, 1.0, 1.0, 100).unwrap()
    }

    pub fn dt(&self) -> f64 {
        self.t_horizon / self.steps as f64
    }

    pub fn t_at(&self, k: usize) -> f64 {
        k as f64 * self.t_horizon / self.steps as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t_at(k)).collect()
    }

    /// g(t) = sigma_min (sigma_max/sigma_min)^{t/T} sqrt(2 ln(sigma_max/sigma_min)).
    pub fn g(&self, t: f64) -> f64 {
        let ratio = self.sigma_max / self.sigma_min;
        self.sigma_min * ratio.powf(t / self.t_horizon) * (2.0 * ratio.ln()).sqrt()
    }

    /// Accumulated diffusion variance of the base VE process,
    /// int_0^t g(s)^2 ds = T sigma_min^2 ((sigma_max/sigma_min)^{2t/T} - 1).
    pub fn sigma_sq_int(&self, t: f64) -> f64 {
        let ratio = self.sigma_max / self.sigma_min;
        self.t_horizon * self.sigma_min * self.sigma_min * (ratio.powf(2.0 * t / self.t_horizon) - 1.0)
    }

    /// Coefficient of the linear base drift; 0 in the degenerate case.
    pub fn alpha(&self, t: f64) -> f64 {
        match self.drift {
            DriftKind::Degenerate => 0.0,
            DriftKind::Linear => {
                let beta = (BETA_MIN + (BETA_MAX - BETA_MIN) * t / self.t_horizon) / self.t_horizon;
                -0.5 * beta
            }
        }
    }

    pub fn base_drift(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        match self.drift {
            DriftKind::Degenerate => Array2::zeros(x.dim()),
            DriftKind::Linear => x * self.alpha(t),
        }
    }

    /// Divergence of the base drift, constant in x.
    pub fn base_drift_div(&self, t: f64, dim: usize) -> f64 {
        dim as f64 * self.alpha(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// A batch of discretized SDE paths. `states[k]` holds the batch at grid
/// time t_k regardless of simulation direction; `noises[k]` holds the
/// standard-normal draws used between t_k and t_{k+1}, so any trajectory is
/// replayable bit-for-bit.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Array2<f64>>,
    pub noises: Vec<Array2<f64>>,
    pub grid: Vec<f64>,
    pub direction: Direction,
}

impl Trajectory {
    pub fn batch(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn terminal(&self) -> &Array2<f64> {
        self.states.last().unwrap()
    }

    pub fn initial(&self) -> &Array2<f64> {
        &self.states[0]
    }
}

fn check_finite(x: &Array2<f64>, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

fn draw_noises(sde: &SdeSpec, batch: usize, dim: usize, seed: u64) -> Vec<Array2<f64>> {
    (0..sde.steps)
        .map(|k| rng::normal_rows(seed, k as u64 + 1, batch, dim))
        .collect()
}

/// Forward Euler-Maruyama under the policy-controlled SDE
/// dX = (f + g Z) dt + g dW, from x0 at t = 0.
pub fn simulate_forward(
    sde: &SdeSpec,
    z: &dyn Policy,
    x0: &Array2<f64>,
    seed: u64,
) -> Result<Trajectory> {
    let noises = draw_noises(sde, x0.nrows(), x0.ncols(), seed);
    simulate_forward_with_noise(sde, z, x0, noises)
}

/// Forward simulation replaying the given noise draws.
pub fn simulate_forward_with_noise(
    sde: &SdeSpec,
    z: &dyn Policy,
    x0: &Array2<f64>,
    noises: Vec<Array2<f64>>,
) -> Result<Trajectory> {
    if x0.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    assert_eq!(noises.len(), sde.steps, "one noise draw per step");
    let dt = sde.dt();
    let sqrt_dt = dt.sqrt();
    let mut states = Vec::with_capacity(sde.steps + 1);
    check_finite(x0, 0)?;
    states.push(x0.clone());
    for k in 0..sde.steps {
        let t = sde.t_at(k);
        let g = sde.g(t);
        let cur = &states[k];
        let drift = sde.base_drift(t, cur) + &(z.eval(t, cur) * g);
        let next = cur + &(drift * dt) + &(&noises[k] * (g * sqrt_dt));
        check_finite(&next, k + 1)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        noises,
        grid: sde.grid(),
        direction: Direction::Forward,
    })
}

/// Reverse-time Euler-Maruyama under dX = (f - g Zhat) dt + g dW, stepping
/// from xT at t = T down to t = 0.
pub fn simulate_backward(
    sde: &SdeSpec,
    zhat: &dyn Policy,
    x_terminal: &Array2<f64>,
    seed: u64,
) -> Result<Trajectory> {
    let noises = draw_noises(sde, x_terminal.nrows(), x_terminal.ncols(), seed);
    simulate_backward_with_noise(sde, zhat, x_terminal, noises)
}

pub fn simulate_backward_with_noise(
    sde: &SdeSpec,
    zhat: &dyn Policy,
    x_terminal: &Array2<f64>,
    noises: Vec<Array2<f64>>,
) -> Result<Trajectory> {
    if x_terminal.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    assert_eq!(noises.len(), sde.steps);
    let dt = sde.dt();
    let sqrt_dt = dt.sqrt();
    let mut states = vec![Array2::zeros(x_terminal.dim()); sde.steps + 1];
    check_finite(x_terminal, sde.steps)?;
    states[sde.steps] = x_terminal.clone();
    for k in (0..sde.steps).rev() {
        let t = sde.t_at(k + 1);
        let g = sde.g(t);
        let cur = &states[k + 1];
        let drift = sde.base_drift(t, cur) - &(zhat.eval(t, cur) * g);
        let prev = cur - &(drift * dt) + &(&noises[k] * (g * sqrt_dt));
        check_finite(&prev, k)?;
        states[k] = prev;
    }
    Ok(Trajectory {
        states,
        noises,
        grid: sde.grid(),
        direction: Direction::Backward,
    })
}

/// Result of probability-flow integration.
pub struct FlowResult {
    /// States at every RK4 grid point, forward in time.
    pub states: Vec<Array2<f64>>,
    /// Per-path accumulated divergence integral int_0^T div F dt.
    pub divergence_integral: Array1<f64>,
}

struct FlowField<'a> {
    sde: &'a SdeSpec,
    z: &'a dyn Policy,
    zhat: &'a dyn Policy,
}

impl FlowField<'_> {
    /// F = f + g Z - (g/2)(Z + Zhat) = f + (g/2)(Z - Zhat)
    fn value(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        let g = self.sde.g(t);
        let z = self.z.eval(t, x);
        let zh = self.zhat.eval(t, x);
        self.sde.base_drift(t, x) + &((z - zh) * (0.5 * g))
    }

    fn value_and_div(&self, t: f64, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let g = self.sde.g(t);
        let div_z = divergence_exact_batch(self.z, t, x);
        let div_zh = divergence_exact_batch(self.zhat, t, x);
        let div = (div_z - div_zh) * (0.5 * g) + self.sde.base_drift_div(t, x.ncols());
        (self.value(t, x), div)
    }
}

/// Fourth-order Runge-Kutta integration of the probability-flow ODE from
/// t = 0 to t = T over `n_steps` uniform steps, optionally co-integrating
/// the divergence of the flow field along the path.
pub fn flow_ode_integrate(
    sde: &SdeSpec,
    z: &dyn Policy,
    zhat: &dyn Policy,
    x0: &Array2<f64>,
    with_divergence: bool,
    n_steps: usize,
) -> Result<FlowResult> {
    if x0.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let field = FlowField { sde, z, zhat };
    let h = sde.t_horizon / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    let mut div_acc = Array1::zeros(x0.nrows());

    let eval = |t: f64, x: &Array2<f64>| -> (Array2<f64>, Array1<f64>) {
        if with_divergence {
            field.value_and_div(t, x)
        } else {
            (field.value(t, x), Array1::zeros(x.nrows()))
        }
    };

    for k in 0..n_steps {
        let t = k as f64 * h;
        let x = states[k].clone();
        let (f1, d1) = eval(t, &x);
        let (f2, d2) = eval(t + 0.5 * h, &(&x + &(&f1 * (0.5 * h))));
        let (f3, d3) = eval(t + 0.5 * h, &(&x + &(&f2 * (0.5 * h))));
        let (f4, d4) = eval(t + h, &(&x + &(&f3 * h)));
        let next = &x + &((&f1 + &(&f2 * 2.0) + &(&f3 * 2.0) + &f4) * (h / 6.0));
        check_finite(&next, k + 1)?;
        div_acc = div_acc + (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (h / 6.0);
        states.push(next);
    }
    Ok(FlowResult {
        states,
        divergence_integral: div_acc,
    })
}

/// Decomposed time integrals of the path-wise likelihood.
#[derive(Debug, Clone, Copy, Default)]
pub struct IntegralTerms {
    /// int (1/2)||Z||^2 dt
    pub kinetic_forward: f64,
    /// int (1/2)||Zhat||^2 dt
    pub kinetic_backward: f64,
    /// int div(g Zhat - f) dt
    pub divergence: f64,
    /// int Zhat^T Z dt
    pub cross: f64,
    /// int (Z + Zhat)^T dW (zero mean; kept so the path-wise sum is exact)
    pub martingale: f64,
}

impl IntegralTerms {
    pub fn total(&self) -> f64 {
        self.kinetic_forward + self.kinetic_backward + self.divergence + self.cross
            + self.martingale
    }
}

/// Batch-mean path-wise log-likelihood along forward trajectories.
#[derive(Debug, Clone)]
pub struct PathLikelihood {
    /// mean log p_prior(X_T)
    pub y_terminal: f64,
    pub integral_terms: IntegralTerms,
    /// mean per-path log-likelihood = y_terminal - total integral terms
    pub loglik: f64,
    /// per-path log-likelihood values
    pub per_path: Array1<f64>,
}

fn divergence_of(
    field: &dyn VectorField,
    mode: DivergenceMode,
    t: f64,
    x: &Array2<f64>,
    probe_seed: u64,
    step: u64,
) -> Array1<f64> {
    match mode {
        DivergenceMode::Exact => divergence_exact_batch(field, t, x),
        DivergenceMode::Hutchinson { probes } => {
            let n = x.nrows();
            let d = x.ncols();
            let mut acc = Array1::zeros(n);
            for p in 0..probes {
                let draw = rng::normal_rows(probe_seed, (step + 1) * 1000 + p as u64, n, d);
                let eps = draw.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
                let (_, jvps) = field.eval_jvp(t, x, std::slice::from_ref(&eps));
                for i in 0..n {
                    acc[i] += eps.row(i).dot(&jvps[0].row(i));
                }
            }
            acc / probes as f64
        }
    }
}

/// Path-wise log-likelihood of the bridge model: samples forward
/// trajectories through Z and accumulates
/// log p_prior(X_T) - int [ (1/2)||Z||^2 + (1/2)||Zhat||^2
///                          + div(g Zhat - f) + Zhat^T Z ] dt
///                  - int (Z + Zhat)^T dW
/// by left-endpoint quadrature, reusing the stored noise draws for the
/// stochastic integral.
pub fn fbsde_loglik(
    sde: &SdeSpec,
    z: &dyn Policy,
    zhat: &dyn Policy,
    x0: &Array2<f64>,
    seed: u64,
    prior: &PriorSpec,
    mode: DivergenceMode,
) -> Result<PathLikelihood> {
    let traj = simulate_forward(sde, z, x0, seed)?;
    fbsde_loglik_on_trajectory(sde, z, zhat, &traj, prior, mode, seed)
}

pub fn fbsde_loglik_on_trajectory(
    sde: &SdeSpec,
    z: &dyn Policy,
    zhat: &dyn Policy,
    traj: &Trajectory,
    prior: &PriorSpec,
    mode: DivergenceMode,
    probe_seed: u64,
) -> Result<PathLikelihood> {
    let n = traj.batch();
    let d = traj.dim();
    let dt = sde.dt();
    let sqrt_dt = dt.sqrt();
    let mut terms = IntegralTerms::default();
    let mut per_path_sum = Array1::<f64>::zeros(n);

    for k in 0..sde.steps {
        let t = sde.t_at(k);
        let g = sde.g(t);
        let x = &traj.states[k];
        let zv = z.eval(t, x);
        let zh = zhat.eval(t, x);
        let div_zh = divergence_of(zhat, mode, t, x, probe_seed, k as u64);
        let f_div = sde.base_drift_div(t, d);
        for i in 0..n {
            let kf = 0.5 * zv.row(i).dot(&zv.row(i));
            let kb = 0.5 * zh.row(i).dot(&zh.row(i));
            let dv = g * div_zh[i] - f_div;
            let cr = zh.row(i).dot(&zv.row(i));
            let mg: f64 = (0..d)
                .map(|j| (zv[[i, j]] + zh[[i, j]]) * traj.noises[k][[i, j]])
                .sum::<f64>()
                * sqrt_dt;
            terms.kinetic_forward += kf * dt;
            terms.kinetic_backward += kb * dt;
            terms.divergence += dv * dt;
            terms.cross += cr * dt;
            terms.martingale += mg;
            per_path_sum[i] += (kf + kb + dv + cr) * dt + mg;
        }
    }
    let nf = n as f64;
    terms.kinetic_forward /= nf;
    terms.kinetic_backward /= nf;
    terms.divergence /= nf;
    terms.cross /= nf;
    terms.martingale /= nf;

    let log_prior = prior.logpdf_rows(traj.terminal());
    let per_path = &log_prior - &per_path_sum;
    let y_terminal = log_prior.sum() / nf;
    let loglik = per_path.sum() / nf;
    Ok(PathLikelihood {
        y_terminal,
        integral_terms: terms,
        loglik,
        per_path,
    })
}

/// Per-path (Y_t, Yhat_t) series along a stored forward trajectory.
///
/// Terminal split convention: Y_T = 0 and Yhat_T = log p_prior(X_T); only
/// the sum Y_t + Yhat_t enters any tested quantity.
pub struct YzSeries {
    pub y: Vec<Array1<f64>>,
    pub yhat: Vec<Array1<f64>>,
}

impl YzSeries {
    pub fn sum_at(&self, k: usize) -> Array1<f64> {
        &self.y[k] + &self.yhat[k]
    }
}

/// Integrates the two backward SDEs
///   dY    = (1/2)||Z||^2 dt + Z^T dW
///   dYhat = ((1/2)||Zhat||^2 + div(g Zhat - f) + Zhat^T Z) dt + Zhat^T dW
/// along the stored path, reusing its stored noises.
pub fn fbsde_rollout_yz(
    sde: &SdeSpec,
    z: &dyn Policy,
    zhat: &dyn Policy,
    traj: &Trajectory,
    prior: &PriorSpec,
    mode: DivergenceMode,
    probe_seed: u64,
) -> Result<YzSeries> {
    if traj.direction != Direction::Forward {
        return Err(Error::TrajectoryMismatch(
            "rollout expects a forward trajectory".into(),
        ));
    }
    // Replay check: the trajectory must have been generated by this Z.
    {
        let k = 0;
        let t = sde.t_at(k);
        let g = sde.g(t);
        let cur = &traj.states[0];
        let drift = sde.base_drift(t, cur) + &(z.eval(t, cur) * g);
        let next = cur + &(drift * sde.dt()) + &(&traj.noises[0] * (g * sde.dt().sqrt()));
        let err = (&next - &traj.states[1]).iter().map(|v| v.abs()).fold(0.0, f64::max);
        if err > 1e-8 {
            return Err(Error::TrajectoryMismatch(format!(
                "noise replay failed at step 0 (max error {err:.3e})"
            )));
        }
    }

    let n = traj.batch();
    let d = traj.dim();
    let dt = sde.dt();
    let sqrt_dt = dt.sqrt();
    let mut y = vec![Array1::zeros(n); sde.steps + 1];
    let mut yhat = vec![Array1::zeros(n); sde.steps + 1];
    yhat[sde.steps] = prior.logpdf_rows(traj.terminal());

    for k in (0..sde.steps).rev() {
        let t = sde.t_at(k);
        let g = sde.g(t);
        let x = &traj.states[k];
        let zv = z.eval(t, x);
        let zh = zhat.eval(t, x);
        let div_zh = divergence_of(zhat, mode, t, x, probe_seed, k as u64);
        let f_div = sde.base_drift_div(t, d);
        let mut yk = Array1::zeros(n);
        let mut yhk = Array1::zeros(n);
        for i in 0..n {
            let zw: f64 = (0..d).map(|j| zv[[i, j]] * traj.noises[k][[i, j]]).sum();
            let zhw: f64 = (0..d).map(|j| zh[[i, j]] * traj.noises[k][[i, j]]).sum();
            let dy = 0.5 * zv.row(i).dot(&zv.row(i)) * dt + zw * sqrt_dt;
            let dyh = (0.5 * zh.row(i).dot(&zh.row(i)) + g * div_zh[i] - f_div
                + zh.row(i).dot(&zv.row(i)))
                * dt
                + zhw * sqrt_dt;
            yk[i] = y[k + 1][i] - dy;
            yhk[i] = yhat[k + 1][i] - dyh;
        }
        y[k] = yk;
        yhat[k] = yhk;
    }
    Ok(YzSeries { y, yhat })
}

/// The analytic optimal backward policy for Gaussian data under the
/// degenerate base drift: Zhat(t, x) = g(t) grad log p_t(x) with
/// p_t = N(0, (data_var + sigma^2(t)) I).
#[derive(Debug, Clone, Copy)]
pub struct GaussianScorePolicy {
    pub sde: SdeSpec,
    pub data_var: f64,
    pub dim: usize,
}

impl GaussianScorePolicy {
    pub fn marginal_var(&self, t: f64) -> f64 {
        self.data_var + self.sde.sigma_sq_int(t)
    }

    fn coeff(&self, t: f64) -> f64 {
        -self.sde.g(t) / self.marginal_var(t)
    }
}

impl VectorField for GaussianScorePolicy {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        x * self.coeff(t)
    }
    fn eval_jvp(
        &self,
        t: f64,
        x: &Array2<f64>,
        tangents: &[Array2<f64>],
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let c = self.coeff(t);
        (x * c, tangents.iter().map(|u| u * c).collect())
    }
}

impl Policy for GaussianScorePolicy {
    fn tape_forward(
        &self,
        tape: &mut crate::autodiff::Tape,
        t: f64,
        x: crate::autodiff::NodeId,
    ) -> crate::autodiff::NodeId {
        tape.scale(x, self.coeff(t))
    }
    fn tape_forward_dual(
        &self,
        tape: &mut crate::autodiff::Tape,
        t: f64,
        x: crate::autodiff::NodeId,
        tangents: &[crate::autodiff::NodeId],
    ) -> (crate::autodiff::NodeId, Vec<crate::autodiff::NodeId>) {
        let c = self.coeff(t);
        let out = tape.scale(x, c);
        let touts = tangents.iter().map(|&u| tape.scale(u, c)).collect();
        (out, touts)
    }
}

/// Wraps a policy, multiplying its output by g(t)^power. Used to move
/// between score parameterizations (s = Zhat / g) and policies.
pub struct GScaledPolicy<'a, P: Policy> {
    pub inner: &'a P,
    pub power: i32,
    pub sde: SdeSpec,
}

impl<P: Policy> GScaledPolicy<'_, P> {
    fn factor(&self, t: f64) -> f64 {
        self.sde.g(t).powi(self.power)
    }
}

impl<P: Policy> VectorField for GScaledPolicy<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        self.inner.eval(t, x) * self.factor(t)
    }
    fn eval_jvp(
        &self,
        t: f64,
        x: &Array2<f64>,
        tangents: &[Array2<f64>],
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let c = self.factor(t);
        let (v, jvps) = self.inner.eval_jvp(t, x, tangents);
        (v * c, jvps.into_iter().map(|j| j * c).collect())
    }
}

impl<P: Policy> Policy for GScaledPolicy<'_, P> {
    fn tape_forward(
        &self,
        tape: &mut crate::autodiff::Tape,
        t: f64,
        x: crate::autodiff::NodeId,
    ) -> crate::autodiff::NodeId {
        let inner = self.inner.tape_forward(tape, t, x);
        tape.scale(inner, self.factor(t))
    }
    fn tape_forward_dual(
        &self,
        tape: &mut crate::autodiff::Tape,
        t: f64,
        x: crate::autodiff::NodeId,
        tangents: &[crate::autodiff::NodeId],
    ) -> (crate::autodiff::NodeId, Vec<crate::autodiff::NodeId>) {
        let c = self.factor(t);
        let (inner, tinner) = self.inner.tape_forward_dual(tape, t, x, tangents);
        let out = tape.scale(inner, c);
        let touts = tinner.into_iter().map(|u| tape.scale(u, c)).collect();
        (out, touts)
    }
}
