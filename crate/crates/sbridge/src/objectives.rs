//! Likelihood losses: the joint bridge objective, the two alternate
//! (half-bridge) objectives, and the score-model baseline bound. Every loss
//! is reported as a negative log-likelihood bound in nats per sample and is
//! built on the autodiff tape so parameter gradients are exact.

use ndarray::{Array1, Array2};

use crate::autodiff::{DivergenceMode, NodeId, Tape, VectorField};
use crate::data::PriorSpec;
use crate::error::{Error, Result};
use crate::nets::Policy;
use crate::rng;
use crate::sde::{Direction, SdeSpec, Trajectory};

/// Decomposed loss terms, batch means in nats.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    /// mean log p_prior at the path terminal (enters total with a minus sign)
    pub prior: f64,
    /// int (1/2)||Z||^2 dt
    pub kinetic_forward: f64,
    /// int (1/2)||Zhat||^2 dt
    pub kinetic_backward: f64,
    /// divergence integral (exact form depends on the objective)
    pub divergence: f64,
    /// int Zhat^T Z dt
    pub cross: f64,
}

/// A scalar objective with its decomposition:
/// total = -prior + kinetic_forward + kinetic_backward + divergence + cross.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub terms: LossTerms,
    pub batch: usize,
}

/// A loss value retaining its expression graph; run `tape.backward(root)`
/// and collect per-network gradients from the result.
pub struct LossEval {
    pub report: LossReport,
    pub tape: Tape,
    pub root: NodeId,
}

/// Basis tangents e_1..e_d (exact mode) or Rademacher probes (Hutchinson),
/// as constant nodes.
fn divergence_tangents(
    tape: &mut Tape,
    mode: DivergenceMode,
    n: usize,
    d: usize,
    probe_seed: u64,
    step: u64,
) -> Vec<(NodeId, NodeId)> {
    match mode {
        DivergenceMode::Exact => (0..d)
            .map(|i| {
                let mut e = Array2::zeros((n, d));
                e.column_mut(i).fill(1.0);
                let node = tape.constant(e);
                (node, node)
            })
            .collect(),
        DivergenceMode::Hutchinson { probes } => (0..probes)
            .map(|p| {
                let draw = rng::normal_rows(probe_seed, (step + 1) * 1000 + p as u64, n, d);
                let eps = draw.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
                let node = tape.constant(eps);
                (node, node)
            })
            .collect(),
    }
}

/// Divergence of `policy` at the tape state `x` as a (batch, 1) node:
/// sum of tangent-output projections, divided by the probe count in
/// Hutchinson mode.
fn tape_divergence(
    tape: &mut Tape,
    policy: &dyn Policy,
    t: f64,
    x: NodeId,
    mode: DivergenceMode,
    probe_seed: u64,
    step: u64,
) -> (NodeId, NodeId) {
    let (n, d) = tape.value(x).dim();
    let pairs = divergence_tangents(tape, mode, n, d, probe_seed, step);
    let tangents: Vec<NodeId> = pairs.iter().map(|&(t, _)| t).collect();
    let (out, touts) = policy.tape_forward_dual(tape, t, x, &tangents);
    let mut acc: Option<NodeId> = None;
    for (&(_, probe), &tout) in pairs.iter().zip(&touts) {
        let proj = tape.dot_rows(tout, probe);
        acc = Some(match acc {
            Some(a) => tape.add(a, proj),
            None => proj,
        });
    }
    let mut div = acc.expect("at least one tangent");
    if let DivergenceMode::Hutchinson { probes } = mode {
        div = tape.scale(div, 1.0 / probes as f64);
    }
    (out, div)
}

fn finish_report(
    tape: &mut Tape,
    prior_rows: NodeId,
    kf: Option<NodeId>,
    kb: Option<NodeId>,
    dv: Option<NodeId>,
    cr: Option<NodeId>,
    batch: usize,
) -> (LossReport, NodeId) {
    let zero = tape.constant(Array2::zeros((batch, 1)));
    let kf = kf.unwrap_or(zero);
    let kb = kb.unwrap_or(zero);
    let dv = dv.unwrap_or(zero);
    let cr = cr.unwrap_or(zero);
    let s1 = tape.add(kf, kb);
    let s2 = tape.add(dv, cr);
    let int_rows = tape.add(s1, s2);
    let nll_rows = tape.sub(int_rows, prior_rows);
    let root = tape.mean_all(nll_rows);
    let terms = LossTerms {
        prior: mean_of(tape, prior_rows),
        kinetic_forward: mean_of(tape, kf),
        kinetic_backward: mean_of(tape, kb),
        divergence: mean_of(tape, dv),
        cross: mean_of(tape, cr),
    };
    let report = LossReport {
        total: tape.scalar(root),
        terms,
        batch,
    };
    (report, root)
}

fn mean_of(tape: &Tape, rows: NodeId) -> f64 {
    let v = tape.value(rows);
    v.sum() / v.nrows() as f64
}

fn add_acc(tape: &mut Tape, acc: &mut Option<NodeId>, term: NodeId) {
    *acc = Some(match *acc {
        Some(a) => tape.add(a, term),
        None => term,
    });
}

/// The joint bridge objective: simulates the forward controlled SDE with
/// the gradient flow retained through the whole path and accumulates
///   -E[log p_prior(X_T)]
///   + int E[(1/2)||Z||^2 + (1/2)||Zhat||^2 + div(g Zhat - f) + Zhat^T Z] dt
/// by left-endpoint quadrature. Differentiable in both policies.
pub fn loss_sb_joint(
    sde: &SdeSpec,
    z: &dyn Policy,
    zhat: &dyn Policy,
    x0: &Array2<f64>,
    seed: u64,
    prior: &PriorSpec,
    mode: DivergenceMode,
) -> Result<LossEval> {
    if x0.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = x0.nrows();
    let d = x0.ncols();
    let dt = sde.dt();
    let sqrt_dt = dt.sqrt();
    let mut tape = Tape::new();
    let mut cur = tape.constant(x0.clone());
    let (mut kf, mut kb, mut dv, mut cr) = (None, None, None, None);

    for k in 0..sde.steps {
        let t = sde.t_at(k);
        let g = sde.g(t);
        let alpha = sde.alpha(t);

        let z_out = z.tape_forward(&mut tape, t, cur);
        let (zh_out, div_zh) = tape_divergence(&mut tape, zhat, t, cur, mode, seed, k as u64);

        let sq_z = tape.squared_norm_rows(z_out);
        let kf_k = tape.scale(sq_z, 0.5 * dt);
        add_acc(&mut tape, &mut kf, kf_k);

        let sq_zh = tape.squared_norm_rows(zh_out);
        let kb_k = tape.scale(sq_zh, 0.5 * dt);
        add_acc(&mut tape, &mut kb, kb_k);

        let scaled_div = tape.scale(div_zh, g);
        let with_f = tape.add_const(scaled_div, -(d as f64) * alpha);
        let dv_k = tape.scale(with_f, dt);
        add_acc(&mut tape, &mut dv, dv_k);

        let dot = tape.dot_rows(zh_out, z_out);
        let cr_k = tape.scale(dot, dt);
        add_acc(&mut tape, &mut cr, cr_k);

        // X_{k+1} = X_k + (f + g Z) dt + g sqrt(dt) eps_k
        let gz = tape.scale(z_out, g * dt);
        let mut next = tape.add(cur, gz);
        if alpha != 0.0 {
            let fx = tape.scale(cur, alpha * dt);
            next = tape.add(next, fx);
        }
        let eps = rng::normal_rows(seed, k as u64 + 1, n, d);
        let noise = tape.constant(eps * (g * sqrt_dt));
        cur = tape.add(next, noise);
        if !tape.value(cur).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
    }

    let prior_rows = prior.tape_logpdf(&mut tape, cur);
    let (report, root) = finish_report(&mut tape, prior_rows, kf, kb, dv, cr, n);
    Ok(LossEval { report, tape, root })
}

fn replay_check_forward(sde: &SdeSpec, z: &dyn Policy, traj: &Trajectory) -> Result<()> {
    if traj.direction != Direction::Forward {
        return Err(Error::TrajectoryMismatch("expected a forward trajectory".into()));
    }
    let t = 0.0;
    let g = sde.g(t);
    let cur = &traj.states[0];
    let drift = sde.base_drift(t, cur) + &(z.eval(t, cur) * g);
    let next = cur + &(drift * sde.dt()) + &(&traj.noises[0] * (g * sde.dt().sqrt()));
    let err = (&next - &traj.states[1]).iter().map(|v| v.abs()).fold(0.0, f64::max);
    if err > 1e-8 {
        return Err(Error::TrajectoryMismatch(format!(
            "noise replay failed (max error {err:.3e})"
        )));
    }
    Ok(())
}

/// The score-model baseline bound along a base-diffusion trajectory:
///   -E[log p_prior(X_T)] + int E[(1/2) g^2 ||s||^2 + div(g^2 s - f)] dt.
/// The kinetic term is reported under `kinetic_backward` so the collapse
/// identity (s = Zhat / g) aligns term by term.
pub fn loss_sgm(
    sde: &SdeSpec,
    score: &dyn Policy,
    traj: &Trajectory,
    prior: &PriorSpec,
    mode: DivergenceMode,
    probe_seed: u64,
) -> Result<LossEval> {
    replay_check_forward(sde, &crate::nets::ZeroPolicy(traj.dim()), traj)?;
    let n = traj.batch();
    let d = traj.dim();
    let dt = sde.dt();
    let mut tape = Tape::new();
    let (mut kb, mut dv) = (None, None);

    for k in 0..sde.steps {
        let t = sde.t_at(k);
        let g = sde.g(t);
        let alpha = sde.alpha(t);
        let x = tape.constant(traj.states[k].clone());
        let (s_out, div_s) = tape_divergence(&mut tape, score, t, x, mode, probe_seed, k as u64);

        let sq = tape.squared_norm_rows(s_out);
        let kb_k = tape.scale(sq, 0.5 * g * g * dt);
        add_acc(&mut tape, &mut kb, kb_k);

        let scaled_div = tape.scale(div_s, g * g);
        let with_f = tape.add_const(scaled_div, -(d as f64) * alpha);
        let dv_k = tape.scale(with_f, dt);
        add_acc(&mut tape, &mut dv, dv_k);
    }

    let terminal = tape.constant(traj.terminal().clone());
    let prior_rows = prior.tape_logpdf(&mut tape, terminal);
    let (report, root) = finish_report(&mut tape, prior_rows, None, kb, dv, None, n);
    Ok(LossEval { report, tape, root })
}

/// Backward-policy half objective on a cached forward trajectory
/// (states treated as constants, frozen Z evaluated without gradients):
///   int E[(1/2)||Zhat||^2 + g div Zhat + Z^T Zhat] dt.
pub fn loss_alt_backward(
    sde: &SdeSpec,
    z_frozen: &dyn Policy,
    zhat: &dyn Policy,
    traj: &Trajectory,
    mode: DivergenceMode,
    probe_seed: u64,
) -> Result<LossEval> {
    replay_check_forward(sde, z_frozen, traj)?;
    half_loss(sde, z_frozen, zhat, traj, mode, probe_seed, HalfSide::Backward)
}

/// Forward-policy half objective on a cached backward trajectory:
///   int E[(1/2)||Z||^2 + g div Z + Zhat^T Z] dt.
pub fn loss_alt_forward(
    sde: &SdeSpec,
    z: &dyn Policy,
    zhat_frozen: &dyn Policy,
    traj: &Trajectory,
    mode: DivergenceMode,
    probe_seed: u64,
) -> Result<LossEval> {
    if traj.direction != Direction::Backward {
        return Err(Error::TrajectoryMismatch("expected a backward trajectory".into()));
    }
    // Replay the last reverse-time step to confirm the trajectory came from
    // this frozen backward policy.
    {
        let t = sde.t_at(sde.steps);
        let g = sde.g(t);
        let cur = traj.terminal();
        let drift = sde.base_drift(t, cur) - &(zhat_frozen.eval(t, cur) * g);
        let k = sde.steps - 1;
        let prev = cur - &(drift * sde.dt()) + &(&traj.noises[k] * (g * sde.dt().sqrt()));
        let err = (&prev - &traj.states[k]).iter().map(|v| v.abs()).fold(0.0, f64::max);
        if err > 1e-8 {
            return Err(Error::TrajectoryMismatch(format!(
                "noise replay failed (max error {err:.3e})"
            )));
        }
    }
    half_loss(sde, zhat_frozen, z, traj, mode, probe_seed, HalfSide::Forward)
}

enum HalfSide {
    /// Optimizing Zhat against a frozen Z on forward paths.
    Backward,
    /// Optimizing Z against a frozen Zhat on backward paths.
    Forward,
}

fn half_loss(
    sde: &SdeSpec,
    frozen: &dyn Policy,
    live: &dyn Policy,
    traj: &Trajectory,
    mode: DivergenceMode,
    probe_seed: u64,
    side: HalfSide,
) -> Result<LossEval> {
    let n = traj.batch();
    let dt = sde.dt();
    let mut tape = Tape::new();
    let (mut kin, mut dv, mut cr) = (None, None, None);

    for k in 0..sde.steps {
        let t = sde.t_at(k);
        let g = sde.g(t);
        let x = tape.constant(traj.states[k].clone());
        let frozen_out = tape.constant(frozen.eval(t, &traj.states[k]));
        let (live_out, div_live) = tape_divergence(&mut tape, live, t, x, mode, probe_seed, k as u64);

        let sq = tape.squared_norm_rows(live_out);
        let kin_k = tape.scale(sq, 0.5 * dt);
        add_acc(&mut tape, &mut kin, kin_k);

        let dv_k = tape.scale(div_live, g * dt);
        add_acc(&mut tape, &mut dv, dv_k);

        let dot = tape.dot_rows(frozen_out, live_out);
        let cr_k = tape.scale(dot, dt);
        add_acc(&mut tape, &mut cr, cr_k);
    }

    let prior_rows = tape.constant(Array2::zeros((n, 1)));
    let (kf, kb) = match side {
        HalfSide::Backward => (None, kin),
        HalfSide::Forward => (kin, None),
    };
    let (report, root) = finish_report(&mut tape, prior_rows, kf, kb, dv, cr, n);
    Ok(LossEval { report, tape, root })
}

/// Monte-Carlo check of the integration-by-parts identity
///   E[g div v(X)] = E[-g v(X)^T grad log p(X)]
/// for X drawn from a density with analytic score.
#[derive(Debug, Clone, Copy)]
pub struct IbpCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_se: f64,
    pub rhs_se: f64,
}

impl IbpCheck {
    pub fn combined_se(&self) -> f64 {
        (self.lhs_se * self.lhs_se + self.rhs_se * self.rhs_se).sqrt()
    }
}

pub fn integration_by_parts_check(
    field: &dyn VectorField,
    g: f64,
    samples: &Array2<f64>,
    scores: &Array2<f64>,
) -> IbpCheck {
    assert_eq!(samples.dim(), scores.dim());
    let n = samples.nrows();
    let div = crate::autodiff::divergence_exact_batch(field, 0.0, samples);
    let v = field.eval(0.0, samples);
    let lhs_vals: Array1<f64> = div * g;
    let rhs_vals = Array1::from_iter(
        (0..n).map(|i| -g * v.row(i).dot(&scores.row(i))),
    );
    let stats = |vals: &Array1<f64>| {
        let mean = vals.sum() / n as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (mean, (var / n as f64).sqrt())
    };
    let (lhs, lhs_se) = stats(&lhs_vals);
    let (rhs, rhs_se) = stats(&rhs_vals);
    IbpCheck {
        lhs,
        rhs,
        lhs_se,
        rhs_se,
    }
}
