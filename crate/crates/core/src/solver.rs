//! Sliding-window Gauss-Newton over trajectory knots.
//!
//! The window holds `w + 1` knots; frame `i` of the window lies between knots
//! `i` and `i + 1`. Motion-prior factors link consecutive knots, measurement
//! factors of a frame touch its two bracketing knots through GP interpolation,
//! and a dense Gaussian prior on the oldest knot carries the information of
//! everything already marginalized. The normal equations are therefore block
//! tridiagonal with 12x12 blocks.

use log::{debug, warn};
use nalgebra::{DMatrix, SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{StageTimings, STAGE_ASSOCIATION, STAGE_FACTORS, STAGE_MAP_UPDATE, STAGE_MARGINALIZATION, STAGE_SOLVE};
use crate::error::{GpError, SolverError};
use crate::error::FactorError;
use crate::factors::{dv_error, dv_projection, dv_whitening, p2p_error, p2p_pose_jacobian, p2p_whitening, Extrinsic, FactorWeights, RobustConfig};
#[cfg(test)]
use crate::factors::{dv_jacobian, p2p_linearize, LinearizedResidual};
use crate::frontend::{associate, AssociationConfig, Correspondence, LidarFrame, LidarPoint, LocalMap, PlaneCache};
use crate::gp::{extrapolate, prior_error, Matrix12, Segment, TrajectoryKnot, Vector12, WnoaPriorParams};
use crate::liealg::{left_jacobian_inv, Pose};

type Matrix24 = SMatrix<f64, 24, 24>;
type Vector24 = SVector<f64, 24>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    IcpOnly,
    Doppler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub window_size: usize,
    pub max_iterations: usize,
    /// Stop once the norm of the state update falls below this.
    pub convergence_tol: f64,
    /// Gauss-Newton iterations between re-association of the newest frame.
    pub reassociate_every: usize,
    /// Cap on keypoints per frame turned into factors.
    pub max_correspondences: usize,
    pub lm_initial_lambda: f64,
    pub lm_max_tries: usize,
    /// Consecutive growing steps that count as divergence.
    pub divergence_patience: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            window_size: 2,
            max_iterations: 40,
            convergence_tol: 1e-4,
            reassociate_every: 5,
            max_correspondences: 1500,
            lm_initial_lambda: 1e-4,
            lm_max_tries: 8,
            divergence_patience: 5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_size < 1 {
            return Err("window_size must be >= 1".into());
        }
        if self.reassociate_every < 1 {
            return Err("reassociate_every must be >= 1".into());
        }
        if !(self.convergence_tol > 0.0) {
            return Err("convergence_tol must be positive".into());
        }
        Ok(())
    }
}

/// Everything a factor needs besides the measurement itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorSettings {
    pub prior: WnoaPriorParams,
    pub ext: Extrinsic,
    pub weights: FactorWeights,
    pub robust: RobustConfig,
}

impl Default for FactorSettings {
    fn default() -> Self {
        Self {
            prior: WnoaPriorParams::default(),
            ext: Extrinsic::default(),
            weights: FactorWeights::default(),
            robust: RobustConfig::default(),
        }
    }
}

/// Measurement factors living between two consecutive knots.
#[derive(Clone, Debug, Default)]
pub struct SegmentMeasurements {
    pub p2p: Vec<Correspondence>,
    pub doppler: Vec<LidarPoint>,
}

impl SegmentMeasurements {
    pub fn len(&self) -> usize {
        self.p2p.len() + self.doppler.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gaussian on the oldest knot: `cost(x) = 1/2 d^T H d - g^T d`, `d = x ⊟ anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalPrior {
    pub anchor: TrajectoryKnot,
    pub information: Matrix12,
    pub gradient: Vector12,
}

impl MarginalPrior {
    pub fn new(anchor: TrajectoryKnot, information: Matrix12) -> Self {
        Self {
            anchor,
            information,
            gradient: Vector12::zeros(),
        }
    }

    /// Bootstrap prior: pose pinned, twist loosely held at its initial value.
    pub fn bootstrap(anchor: TrajectoryKnot, pose_sigma: f64, twist_sigma: f64) -> Self {
        let mut info = Matrix12::zeros();
        for k in 0..6 {
            info[(k, k)] = 1.0 / (pose_sigma * pose_sigma);
            info[(6 + k, 6 + k)] = 1.0 / (twist_sigma * twist_sigma);
        }
        Self::new(anchor, info)
    }

    /// `(cost, H, b)` linearized at `knot`.
    fn linearize(&self, knot: &TrajectoryKnot) -> Result<(f64, Matrix12, Vector12), SolverError> {
        let d = knot.local_difference(&self.anchor)?;
        let jl = left_jacobian_inv(&d.fixed_rows::<6>(0).into_owned())?;
        let mut jd = Matrix12::identity();
        jd.fixed_view_mut::<6, 6>(0, 0).copy_from(&jl);
        let hd = self.information * d;
        let cost = 0.5 * d.dot(&hd) - self.gradient.dot(&d);
        let h = jd.transpose() * self.information * jd;
        let b = jd.transpose() * (self.gradient - hd);
        Ok((cost, h, b))
    }

    fn cost(&self, knot: &TrajectoryKnot) -> Result<f64, SolverError> {
        let d = knot.local_difference(&self.anchor)?;
        Ok(0.5 * d.dot(&(self.information * d)) - self.gradient.dot(&d))
    }
}

/// Symmetric block-tridiagonal matrix with 12x12 blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<Matrix12>,
    /// `upper[i]` is block `(i, i + 1)`.
    pub upper: Vec<Matrix12>,
}

impl BlockTridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![Matrix12::zeros(); n],
            upper: vec![Matrix12::zeros(); n.saturating_sub(1)],
        }
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    fn add_pair(&mut self, i: usize, h: &Matrix24) {
        self.diag[i] += h.fixed_view::<12, 12>(0, 0);
        self.diag[i + 1] += h.fixed_view::<12, 12>(12, 12);
        self.upper[i] += h.fixed_view::<12, 12>(0, 12);
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.blocks();
        let mut m = DMatrix::zeros(12 * n, 12 * n);
        for i in 0..n {
            m.view_mut((12 * i, 12 * i), (12, 12)).copy_from(&self.diag[i]);
            if i + 1 < n {
                m.view_mut((12 * i, 12 * i + 12), (12, 12)).copy_from(&self.upper[i]);
                m.view_mut((12 * i + 12, 12 * i), (12, 12))
                    .copy_from(&self.upper[i].transpose());
            }
        }
        m
    }

    /// `H + lambda * diag(H)`.
    pub fn damped(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for d in &mut out.diag {
            for k in 0..12 {
                d[(k, k)] *= 1.0 + lambda;
            }
        }
        out
    }

    /// Block Cholesky solve of `H x = b`; `None` if `H` is not positive definite.
    pub fn solve(&self, b: &[Vector12]) -> Option<Vec<Vector12>> {
        let n = self.blocks();
        let mut chol = Vec::with_capacity(n);
        // sub[i] = L(i + 1, i)
        let mut sub: Vec<Matrix12> = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut s = self.diag[i];
            if i > 0 {
                s -= sub[i - 1] * sub[i - 1].transpose();
            }
            let c = s.cholesky()?;
            if i + 1 < n {
                let x = c.l().solve_lower_triangular(&self.upper[i])?;
                sub.push(x.transpose());
            }
            chol.push(c);
        }
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = b[i];
            if i > 0 {
                r -= sub[i - 1] * y[i - 1];
            }
            y.push(chol[i].l().solve_lower_triangular(&r)?);
        }
        let mut x = vec![Vector12::zeros(); n];
        for i in (0..n).rev() {
            let mut r = y[i];
            if i + 1 < n {
                r -= sub[i].transpose() * x[i + 1];
            }
            x[i] = chol[i].l().tr_solve_lower_triangular(&r)?;
        }
        Some(x)
    }
}

#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub h: BlockTridiagonal,
    pub b: Vec<Vector12>,
    /// Total (robust) cost at the linearization point.
    pub cost: f64,
}

impl NormalEquations {
    pub fn b_dense(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(12 * self.b.len(), self.b.iter().flat_map(|v| v.iter().copied()))
    }
}

fn check_in_segment(t: f64, seg: &Segment) -> Result<(), SolverError> {
    if t >= seg.start() && t <= seg.end() {
        Ok(())
    } else {
        Err(SolverError::FactorOutsideWindow {
            time: t,
            start: seg.start(),
            end: seg.end(),
        })
    }
}

/// IRLS contribution `(cost, weight * whitening^2)`; `None` when truncated.
fn robust_irls(error: f64, whitening: f64, truncation: f64, cauchy_k: f64) -> Option<(f64, f64)> {
    if !(error.abs() <= truncation) || whitening == 0.0 {
        return None;
    }
    let u = (whitening * error / cauchy_k).powi(2);
    let cost = 0.5 * cauchy_k * cauchy_k * u.ln_1p();
    Some((cost, whitening * whitening / (1.0 + u)))
}

#[cfg(test)]
fn robust_terms(lin: &LinearizedResidual, truncation: f64, cauchy_k: f64) -> Option<(f64, f64)> {
    robust_irls(lin.error, lin.whitening, truncation, cauchy_k)
}

fn robust_cost(error: f64, whitening: f64, truncation: f64, cauchy_k: f64) -> f64 {
    robust_irls(error, whitening, truncation, cauchy_k).map_or(0.0, |(c, _)| c)
}

#[derive(Clone, Copy)]
enum Residual {
    P2p(usize),
    Doppler(usize),
}

/// Measurements bucketed by identical timestamp, in time order. Points of one
/// scan column share a timestamp, so the trajectory is queried once per bucket.
fn time_groups(seg: &Segment, meas: &SegmentMeasurements) -> Result<Vec<(f64, Vec<Residual>)>, SolverError> {
    let mut items: Vec<(f64, Residual)> = Vec::with_capacity(meas.p2p.len() + meas.doppler.len());
    for (i, c) in meas.p2p.iter().enumerate() {
        check_in_segment(c.query.timestamp, seg)?;
        items.push((c.query.timestamp, Residual::P2p(i)));
    }
    for (i, p) in meas.doppler.iter().enumerate() {
        check_in_segment(p.timestamp, seg)?;
        items.push((p.timestamp, Residual::Doppler(i)));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(items
        .chunk_by(|a, b| a.0 == b.0)
        .map(|g| (g[0].0, g.iter().map(|x| x.1).collect()))
        .collect())
}

/// Cost, local 12x12 information and gradient in `[pose; twist]` at one time.
fn linearize_group(
    pose: &Pose,
    twist: &crate::liealg::Twist,
    group: &[Residual],
    meas: &SegmentMeasurements,
    settings: &FactorSettings,
) -> Result<(f64, Matrix12, Vector12), SolverError> {
    let mut cost = 0.0;
    let mut h = Matrix12::zeros();
    let mut b = Vector12::zeros();
    let r = &settings.robust;
    let mut row = SVector::<f64, 12>::zeros();
    for item in group {
        row.fill(0.0);
        let (e, whitening, trunc, k) = match *item {
            Residual::P2p(i) => {
                let c = &meas.p2p[i];
                let j = p2p_pose_jacobian(c, pose, &settings.ext);
                row.fixed_rows_mut::<6>(0).copy_from(&j.transpose());
                (p2p_error(c, pose, &settings.ext), p2p_whitening(c, &settings.weights), r.p2p_truncation, r.p2p_cauchy_k)
            }
            Residual::Doppler(i) => {
                let p = &meas.doppler[i];
                let measured = p.doppler.ok_or(FactorError::MissingDoppler)?;
                let proj = dv_projection(&p.position, &settings.ext)?;
                row.fixed_rows_mut::<6>(6).copy_from(&(-proj.transpose()));
                let predicted = (proj * twist.to_vector())[0];
                (measured - predicted, dv_whitening(&settings.weights), r.dv_truncation, r.dv_cauchy_k)
            }
        };
        if let Some((c, w)) = robust_irls(e, whitening, trunc, k) {
            cost += c;
            h.ger(w, &row, &row, 1.0);
            b.axpy(-w * e, &row, 1.0);
        }
    }
    Ok((cost, h, b))
}

fn linearize_segment(
    seg: &Segment,
    meas: &SegmentMeasurements,
    settings: &FactorSettings,
) -> Result<(f64, Matrix24, Vector24), SolverError> {
    let groups = time_groups(seg, meas)?;
    let parts: Vec<Result<(f64, Matrix24, Vector24), SolverError>> = groups
        .par_iter()
        .map(|(t, group)| {
            let state = seg.query(*t)?;
            let (c, hl, bl) = linearize_group(&state.pose, &state.twist, group, meas, settings)?;
            let mut j = SMatrix::<f64, 12, 24>::zeros();
            j.fixed_view_mut::<12, 12>(0, 0).copy_from(&state.jac_prev);
            j.fixed_view_mut::<12, 12>(0, 12).copy_from(&state.jac_next);
            Ok((c, j.transpose() * hl * j, j.transpose() * bl))
        })
        .collect();
    let mut cost = 0.0;
    let mut h = Matrix24::zeros();
    let mut b = Vector24::zeros();
    for part in parts {
        let (c, hp, bp) = part?;
        cost += c;
        h += hp;
        b += bp;
    }
    Ok((cost, h, b))
}

fn segment_cost(seg: &Segment, meas: &SegmentMeasurements, settings: &FactorSettings) -> Result<f64, SolverError> {
    let groups = time_groups(seg, meas)?;
    let parts: Vec<Result<f64, SolverError>> = groups
        .par_iter()
        .map(|(t, group)| {
            let (pose, twist) = seg.query_state(*t)?;
            let mut cost = 0.0;
            let r = &settings.robust;
            for item in group {
                cost += match *item {
                    Residual::P2p(i) => {
                        let c = &meas.p2p[i];
                        let e = p2p_error(c, &pose, &settings.ext);
                        robust_cost(e, p2p_whitening(c, &settings.weights), r.p2p_truncation, r.p2p_cauchy_k)
                    }
                    Residual::Doppler(i) => {
                        let e = dv_error(&meas.doppler[i], &twist, &settings.ext)?;
                        robust_cost(e, dv_whitening(&settings.weights), r.dv_truncation, r.dv_cauchy_k)
                    }
                };
            }
            Ok(cost)
        })
        .collect();
    parts.into_iter().sum()
}

fn prior_terms(
    prev: &TrajectoryKnot,
    next: &TrajectoryKnot,
    params: &WnoaPriorParams,
) -> Result<(f64, Matrix24, Vector24), SolverError> {
    let pe = prior_error(prev, next, params)?;
    let mut j = SMatrix::<f64, 12, 24>::zeros();
    j.fixed_view_mut::<12, 12>(0, 0).copy_from(&pe.jac_prev);
    j.fixed_view_mut::<12, 12>(0, 12).copy_from(&pe.jac_next);
    let wj = pe.information * j;
    let cost = 0.5 * pe.error.dot(&(pe.information * pe.error));
    Ok((cost, j.transpose() * wj, -(wj.transpose() * pe.error)))
}

/// Assembles `H = sum J^T W J` and `b = -sum J^T W e` over the motion priors,
/// the marginal prior on the first knot and every measurement factor.
pub fn build_normal_equations(
    knots: &[TrajectoryKnot],
    marginal: Option<&MarginalPrior>,
    segments: &[&SegmentMeasurements],
    settings: &FactorSettings,
) -> Result<NormalEquations, SolverError> {
    let n = knots.len();
    if n < 1 || segments.len() + 1 != n {
        return Err(SolverError::WindowTooSmall(n));
    }
    let mut h = BlockTridiagonal::zeros(n);
    let mut b = vec![Vector12::zeros(); n];
    let mut cost = 0.0;
    if let Some(m) = marginal {
        let (c, hm, bm) = m.linearize(&knots[0])?;
        cost += c;
        h.diag[0] += hm;
        b[0] += bm;
    }
    for i in 0..n - 1 {
        let (c, hp, bp) = prior_terms(&knots[i], &knots[i + 1], &settings.prior)?;
        let seg = Segment::new(&knots[i], &knots[i + 1])?;
        let (cm, hm, bm) = linearize_segment(&seg, segments[i], settings)?;
        cost += c + cm;
        h.add_pair(i, &(hp + hm));
        let bs = bp + bm;
        b[i] += bs.fixed_rows::<12>(0);
        b[i + 1] += bs.fixed_rows::<12>(12);
    }
    for d in &mut h.diag {
        *d = (*d + d.transpose()) * 0.5;
    }
    Ok(NormalEquations { h, b, cost })
}

/// Robust cost of the whole problem without building Jacobians.
pub fn evaluate_cost(
    knots: &[TrajectoryKnot],
    marginal: Option<&MarginalPrior>,
    segments: &[&SegmentMeasurements],
    settings: &FactorSettings,
) -> Result<f64, SolverError> {
    let mut cost = 0.0;
    if let Some(m) = marginal {
        cost += m.cost(&knots[0])?;
    }
    for i in 0..knots.len().saturating_sub(1) {
        let pe = prior_error(&knots[i], &knots[i + 1], &settings.prior)?;
        cost += 0.5 * pe.error.dot(&(pe.information * pe.error));
        let seg = Segment::new(&knots[i], &knots[i + 1])?;
        cost += segment_cost(&seg, segments[i], settings)?;
    }
    Ok(cost)
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub knots: Vec<TrajectoryKnot>,
    pub step_norm: f64,
    /// Damping that was needed (0 for a plain Gauss-Newton step).
    pub lambda: f64,
}

fn apply_step(knots: &[TrajectoryKnot], delta: &[Vector12]) -> Vec<TrajectoryKnot> {
    knots.iter().zip(delta).map(|(k, d)| k.retract(d)).collect()
}

fn step_norm(delta: &[Vector12]) -> f64 {
    delta.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt()
}

fn solve_with_fallback(
    h: &BlockTridiagonal,
    b: &[Vector12],
    lambda0: f64,
    tries: usize,
) -> Result<(Vec<Vector12>, f64), SolverError> {
    if let Some(x) = h.solve(b) {
        return Ok((x, 0.0));
    }
    let mut lambda = lambda0;
    for _ in 0..tries {
        if let Some(x) = h.damped(lambda).solve(b) {
            debug!("normal equations needed damping lambda = {lambda:e}");
            return Ok((x, lambda));
        }
        lambda *= 10.0;
    }
    Err(SolverError::IndefiniteHessian)
}

/// One Gauss-Newton step, falling back to Levenberg damping when `H` is not
/// positive definite.
pub fn gauss_newton_step(
    knots: &[TrajectoryKnot],
    neq: &NormalEquations,
    config: &SolverConfig,
) -> Result<StepResult, SolverError> {
    let (delta, lambda) = solve_with_fallback(&neq.h, &neq.b, config.lm_initial_lambda, config.lm_max_tries)?;
    Ok(StepResult {
        knots: apply_step(knots, &delta),
        step_norm: step_norm(&delta),
        lambda,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationOutcome {
    pub step_norm: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    /// False if no damping level reduced the cost; the state is unchanged.
    pub accepted: bool,
}

/// Gauss-Newton iteration with cost-decrease acceptance; rejected steps are
/// retried with increasing Levenberg damping.
pub fn iterate_once(
    knots: &mut Vec<TrajectoryKnot>,
    marginal: Option<&MarginalPrior>,
    segments: &[&SegmentMeasurements],
    settings: &FactorSettings,
    config: &SolverConfig,
    timings: &mut StageTimings,
) -> Result<IterationOutcome, SolverError> {
    let neq = timings.time(STAGE_FACTORS, || build_normal_equations(knots, marginal, segments, settings))?;
    let (mut delta, mut lambda) = timings.time(STAGE_SOLVE, || {
        solve_with_fallback(&neq.h, &neq.b, config.lm_initial_lambda, config.lm_max_tries)
    })?;
    let cost_before = neq.cost;
    for attempt in 0..=config.lm_max_tries {
        let candidate = apply_step(knots, &delta);
        let cost = timings.time(STAGE_FACTORS, || evaluate_cost(&candidate, marginal, segments, settings));
        match cost {
            Ok(c) if c <= cost_before + 1e-12 * cost_before.abs() => {
                let norm = step_norm(&delta);
                *knots = candidate;
                return Ok(IterationOutcome {
                    step_norm: norm,
                    cost_before,
                    cost_after: c,
                    accepted: true,
                });
            }
            // Steps that push a knot pair past the principal log branch are
            // treated like cost increases.
            Ok(_) | Err(SolverError::Gp(GpError::Lie(_))) => {}
            Err(e) => return Err(e),
        }
        if attempt == config.lm_max_tries {
            break;
        }
        lambda = if lambda == 0.0 { config.lm_initial_lambda } else { lambda * 10.0 };
        let damped = neq.h.damped(lambda);
        delta = match timings.time(STAGE_SOLVE, || damped.solve(&neq.b)) {
            Some(d) => d,
            None => continue,
        };
    }
    Ok(IterationOutcome {
        step_norm: 0.0,
        cost_before,
        cost_after: cost_before,
        accepted: false,
    })
}

/// Gauss-Newton with fixed data association until the step norm drops below
/// `config.convergence_tol` or `config.max_iterations` is reached.
pub fn optimize(
    knots: &mut Vec<TrajectoryKnot>,
    marginal: Option<&MarginalPrior>,
    segments: &[&SegmentMeasurements],
    settings: &FactorSettings,
    config: &SolverConfig,
) -> Result<usize, SolverError> {
    let mut timings = StageTimings::new();
    for iter in 0..config.max_iterations {
        let out = iterate_once(knots, marginal, segments, settings, config, &mut timings)?;
        if !out.accepted || out.step_norm < config.convergence_tol {
            return Ok(iter + 1);
        }
    }
    Ok(config.max_iterations)
}

/// Schur complement of the first 12x12 block of a 24x24 system.
pub fn schur_first_block(h: &Matrix24, b: &Vector24) -> (Matrix12, Vector12) {
    let h00 = h.fixed_view::<12, 12>(0, 0).into_owned();
    let h01 = h.fixed_view::<12, 12>(0, 12).into_owned();
    let h11 = h.fixed_view::<12, 12>(12, 12).into_owned();
    let b0 = b.fixed_rows::<12>(0).into_owned();
    let b1 = b.fixed_rows::<12>(12).into_owned();
    let chol = match h00.cholesky() {
        Some(c) => c,
        None => {
            warn!("singular marginal block; regularizing with 1e-9 I");
            (h00 + Matrix12::identity() * 1e-9)
                .cholesky()
                .unwrap_or_else(|| {
                    // Indefinite even after regularization: fall back to a scaled
                    // identity so the information simply does not flow.
                    (Matrix12::identity() * (1.0 + h00.amax())).cholesky().expect("identity is SPD")
                })
        }
    };
    let x = chol.solve(&h01);
    let y = chol.solve(&b0);
    let hm = h11 - h01.transpose() * x;
    let bm = b1 - h01.transpose() * y;
    ((hm + hm.transpose()) * 0.5, bm)
}

/// Keypoints of one frame and the factors built from them.
#[derive(Clone, Debug)]
pub struct WindowFrame {
    pub index: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub keypoints: Vec<LidarPoint>,
    pub measurements: SegmentMeasurements,
}

#[derive(Clone, Debug)]
pub struct SlidingWindow {
    knots: Vec<TrajectoryKnot>,
    frames: Vec<WindowFrame>,
    marginal: MarginalPrior,
    /// Index of the frame ending at the oldest knot; `None` for the initial knot.
    oldest_frame: Option<usize>,
}

impl SlidingWindow {
    pub fn new(initial: TrajectoryKnot, marginal: MarginalPrior) -> Self {
        Self {
            knots: vec![initial],
            frames: Vec::new(),
            marginal,
            oldest_frame: None,
        }
    }

    /// Active knots, each with the index of the frame ending at it.
    pub fn knot_frames(&self) -> Vec<(Option<usize>, TrajectoryKnot)> {
        std::iter::once(self.oldest_frame)
            .chain(self.frames.iter().map(|f| Some(f.index)))
            .zip(self.knots.iter().copied())
            .collect()
    }

    pub fn knots(&self) -> &[TrajectoryKnot] {
        &self.knots
    }

    pub fn knots_mut(&mut self) -> &mut Vec<TrajectoryKnot> {
        &mut self.knots
    }

    pub fn frames(&self) -> &[WindowFrame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [WindowFrame] {
        &mut self.frames
    }

    pub fn marginal(&self) -> &MarginalPrior {
        &self.marginal
    }

    pub fn newest(&self) -> &TrajectoryKnot {
        self.knots.last().expect("window always holds a knot")
    }

    /// Appends a frame and a new knot at its end time, initialized by
    /// constant-velocity extrapolation.
    pub fn push_frame(&mut self, frame: WindowFrame) -> Result<(), SolverError> {
        let knot = extrapolate(self.newest(), frame.end_time)?;
        if !(knot.time > self.newest().time) {
            return Err(GpError::NonPositiveDt {
                dt: knot.time - self.newest().time,
            }
            .into());
        }
        self.knots.push(knot);
        self.frames.push(frame);
        Ok(())
    }

    pub fn segments(&self) -> Vec<&SegmentMeasurements> {
        self.frames.iter().map(|f| &f.measurements).collect()
    }

    pub fn build(&self, settings: &FactorSettings) -> Result<NormalEquations, SolverError> {
        build_normal_equations(&self.knots, Some(&self.marginal), &self.segments(), settings)
    }

    pub fn cost(&self, settings: &FactorSettings) -> Result<f64, SolverError> {
        evaluate_cost(&self.knots, Some(&self.marginal), &self.segments(), settings)
    }

    pub fn iterate(
        &mut self,
        settings: &FactorSettings,
        config: &SolverConfig,
        timings: &mut StageTimings,
    ) -> Result<IterationOutcome, SolverError> {
        let segs: Vec<&SegmentMeasurements> = self.frames.iter().map(|f| &f.measurements).collect();
        iterate_once(&mut self.knots, Some(&self.marginal), &segs, settings, config, timings)
    }

    pub fn optimize(&mut self, settings: &FactorSettings, config: &SolverConfig) -> Result<usize, SolverError> {
        let segs: Vec<&SegmentMeasurements> = self.frames.iter().map(|f| &f.measurements).collect();
        optimize(&mut self.knots, Some(&self.marginal), &segs, settings, config)
    }

    /// Eliminates the oldest knot by Schur complement over the factors that
    /// touch it, leaving a marginal prior on the new oldest knot. Returns the
    /// departing knot with the index of the frame that ended at it.
    pub fn marginalize_oldest(
        &mut self,
        settings: &FactorSettings,
    ) -> Result<(Option<usize>, TrajectoryKnot), SolverError> {
        if self.knots.len() < 2 {
            return Err(SolverError::WindowTooSmall(self.knots.len()));
        }
        let neq = build_normal_equations(
            &self.knots[..2],
            Some(&self.marginal),
            &[&self.frames[0].measurements],
            settings,
        )?;
        let mut h = Matrix24::zeros();
        h.fixed_view_mut::<12, 12>(0, 0).copy_from(&neq.h.diag[0]);
        h.fixed_view_mut::<12, 12>(12, 12).copy_from(&neq.h.diag[1]);
        h.fixed_view_mut::<12, 12>(0, 12).copy_from(&neq.h.upper[0]);
        h.fixed_view_mut::<12, 12>(12, 0).copy_from(&neq.h.upper[0].transpose());
        let mut b = Vector24::zeros();
        b.fixed_rows_mut::<12>(0).copy_from(&neq.b[0]);
        b.fixed_rows_mut::<12>(12).copy_from(&neq.b[1]);
        let (info, grad) = schur_first_block(&h, &b);
        self.marginal = MarginalPrior {
            anchor: self.knots[1],
            information: info,
            gradient: grad,
        };
        let knot = self.knots.remove(0);
        let frame = self.frames.remove(0);
        let ended = std::mem::replace(&mut self.oldest_frame, Some(frame.index));
        Ok((ended, knot))
    }
}

/// Configuration shared by every frame alignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignContext {
    pub settings: FactorSettings,
    pub solver: SolverConfig,
    pub association: AssociationConfig,
    pub mode: Mode,
}

#[derive(Clone, Debug, Default)]
pub struct FrameAlignment {
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub final_step_norm: f64,
    pub correspondences: usize,
    pub doppler_factors: usize,
    /// Knots that left the window during this call, oldest first, with the
    /// index of the frame that ended at each.
    pub published: Vec<(Option<usize>, TrajectoryKnot)>,
}

/// Evenly strided subset of at most `max` items.
fn stride_subset<T: Copy>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max || max == 0 {
        return items.to_vec();
    }
    (0..max).map(|i| items[i * items.len() / max]).collect()
}

fn reassociate(
    window: &mut SlidingWindow,
    map: &LocalMap,
    ctx: &AlignContext,
    cache: &mut PlaneCache,
) -> Result<usize, SolverError> {
    let n = window.knots.len();
    let seg = Segment::new(&window.knots[n - 2], &window.knots[n - 1])?;
    let frame = window.frames.last_mut().expect("frame pushed before association");
    let mut corrs = Vec::with_capacity(frame.keypoints.len());
    for kp in &frame.keypoints {
        let (pose, _) = seg.query_state(kp.timestamp)?;
        let world = ctx.settings.ext.sensor_to_world(&pose, &kp.position.xyz);
        if let Some(c) = associate(map, kp, &world, &ctx.association, cache)? {
            corrs.push(c);
        }
    }
    let count = corrs.len();
    frame.measurements.p2p = corrs;
    Ok(count)
}

fn same_matches(a: &[Correspondence], b: &[Correspondence]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.query.timestamp == y.query.timestamp && x.query.position == y.query.position && x.map_point == y.map_point)
}

/// Vehicle position in the world for a world-to-vehicle pose.
pub fn vehicle_position(t_vi: &Pose) -> nalgebra::Vector3<f64> {
    t_vi.inverse().translation
}

/// Registers one frame against the map inside the sliding window, inserts its
/// motion-compensated points into the map and slides the window.
///
/// `keypoints` drive the factors; `map_points` are inserted into the map at
/// the converged interpolated poses. When the map is empty (first frame) only
/// Doppler factors can be formed.
pub fn align_frame(
    window: &mut SlidingWindow,
    keypoints: &LidarFrame,
    map_points: &[LidarPoint],
    map: &mut LocalMap,
    ctx: &AlignContext,
    timings: &mut StageTimings,
) -> Result<FrameAlignment, SolverError> {
    let cfg = &ctx.solver;
    let kps = stride_subset(&keypoints.points, cfg.max_correspondences);
    let doppler: Vec<LidarPoint> = match ctx.mode {
        Mode::Doppler => kps
            .iter()
            .filter(|p| p.doppler.is_some_and(f64::is_finite) && p.range() > 0.0)
            .copied()
            .collect(),
        Mode::IcpOnly => Vec::new(),
    };
    let mut report = FrameAlignment {
        doppler_factors: doppler.len(),
        ..Default::default()
    };
    window.push_frame(WindowFrame {
        index: keypoints.index,
        start_time: keypoints.start_time,
        end_time: keypoints.end_time,
        keypoints: kps,
        measurements: SegmentMeasurements {
            p2p: Vec::new(),
            doppler,
        },
    })?;
    let initial = window.knots.clone();

    let mut cache = PlaneCache::new();
    let use_map = !map.is_empty();
    let mut just_associated = false;
    let mut growth = 0usize;
    let mut last_norm = f64::INFINITY;
    for iter in 0..cfg.max_iterations {
        let fresh = use_map && (iter % cfg.reassociate_every == 0 || just_associated);
        if use_map && iter % cfg.reassociate_every == 0 && !just_associated {
            report.correspondences =
                timings.time(STAGE_ASSOCIATION, || reassociate(window, map, ctx, &mut cache))?;
        }
        just_associated = false;
        let out = window.iterate(&ctx.settings, cfg, timings)?;
        report.iterations = iter + 1;
        report.final_step_norm = out.step_norm;
        if out.step_norm > last_norm && out.accepted {
            growth += 1;
        } else {
            growth = 0;
        }
        last_norm = out.step_norm;
        if growth >= cfg.divergence_patience {
            warn!(
                "frame {} diverged (step norm {}); keeping extrapolated state",
                keypoints.index, out.step_norm
            );
            window.knots = initial;
            if let Some(f) = window.frames.last_mut() {
                f.measurements = SegmentMeasurements::default();
            }
            report.diverged = true;
            break;
        }
        if !out.accepted || out.step_norm < cfg.convergence_tol {
            if use_map && !fresh {
                // Converged on stale associations: only stop if they still hold.
                let before = window.frames.last().map(|f| f.measurements.p2p.clone()).unwrap_or_default();
                report.correspondences =
                    timings.time(STAGE_ASSOCIATION, || reassociate(window, map, ctx, &mut cache))?;
                let after = &window.frames.last().expect("frame pushed").measurements.p2p;
                if !same_matches(&before, after) {
                    just_associated = true;
                    continue;
                }
            }
            report.converged = true;
            break;
        }
    }

    if !report.diverged {
        timings.time(STAGE_MAP_UPDATE, || insert_into_map(window, map_points, map, &ctx.settings.ext))?;
    }

    while window.knots.len() > cfg.window_size + 1 {
        let published = timings.time(STAGE_MARGINALIZATION, || window.marginalize_oldest(&ctx.settings))?;
        report.published.push(published);
    }
    Ok(report)
}

fn insert_into_map(
    window: &SlidingWindow,
    points: &[LidarPoint],
    map: &mut LocalMap,
    ext: &Extrinsic,
) -> Result<(), SolverError> {
    let n = window.knots.len();
    let seg = Segment::new(&window.knots[n - 2], &window.knots[n - 1])?;
    let mut world = Vec::with_capacity(points.len());
    for p in points {
        let t = p.timestamp.clamp(seg.start(), seg.end());
        let (pose, _) = seg.query_state(t)?;
        world.push(ext.sensor_to_world(&pose, &p.position.xyz));
    }
    map.set_crop_center(vehicle_position(&window.knots[n - 1].pose));
    map.insert_frame(&world);
    Ok(())
}

/// Randomized trajectory problems with known solutions, for validating the
/// solver against batch and dense references.
pub mod synthetic {
    use super::*;
    use crate::gp::constant_twist_flow;
    use crate::liealg::{exp_se3, Twist};
    use nalgebra::{Vector3, Vector6};
    use rand::Rng;

    fn uniform6(rng: &mut impl Rng, scale: f64) -> Vector6<f64> {
        Vector6::from_fn(|_, _| scale * rng.random_range(-1.0..1.0))
    }

    fn uniform3(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| scale * rng.random_range(-1.0..1.0))
    }

    /// Chain of `n` knots `dt` apart, driving forward at about 8 m/s, with the
    /// twist changing by up to `twist_jitter` per component at each knot.
    pub fn truth_chain(rng: &mut impl Rng, n: usize, dt: f64, twist_jitter: f64) -> Vec<TrajectoryKnot> {
        let mut k = TrajectoryKnot::new(
            0.0,
            exp_se3(&uniform6(rng, 0.5)),
            Twist::from_vector(&(uniform6(rng, 1.0) + Vector6::new(-8.0, 0.0, 0.0, 0.0, 0.0, 0.0))),
        );
        let mut out = vec![k];
        for _ in 1..n {
            let pose = constant_twist_flow(&k.pose, &k.twist, dt);
            let twist = Twist::from_vector(&(k.twist.to_vector() + uniform6(rng, twist_jitter)));
            k = TrajectoryKnot::new(k.time + dt, pose, twist);
            out.push(k);
        }
        out
    }

    /// Point-to-plane and Doppler measurements generated from the interpolated
    /// `truth`, with uniform noise of half-width `noise` (m and m/s).
    pub fn measurements(
        rng: &mut impl Rng,
        truth: &[TrajectoryKnot],
        per_segment: usize,
        noise: f64,
        settings: &FactorSettings,
    ) -> Result<Vec<SegmentMeasurements>, SolverError> {
        let mut out = Vec::new();
        for w in truth.windows(2) {
            let seg = Segment::new(&w[0], &w[1])?;
            let mut m = SegmentMeasurements::default();
            for _ in 0..per_segment {
                let t = rng.random_range(w[0].time..w[1].time);
                let (pose, twist) = seg.query_state(t)?;
                let q = uniform3(rng, 20.0);
                let world = settings.ext.sensor_to_world(&pose, &q);
                let normal = uniform3(rng, 1.0).normalize();
                let offset = noise * rng.random_range(-1.0..1.0);
                m.p2p.push(Correspondence {
                    query: LidarPoint::new(q, t, None),
                    map_point: world + normal * offset,
                    normal,
                    alpha: rng.random_range(0.5..1.0),
                    sigmas: [1.0, 1.0, 0.0],
                });
                let pred = crate::factors::dv_predict(&LidarPoint::new(q, t, None).position, &twist, &settings.ext)?;
                m.doppler
                    .push(LidarPoint::new(q, t, Some(pred + noise * rng.random_range(-1.0..1.0))));
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Runs the same problem through a sliding window of size `w` with
    /// marginalization and through one batch solve over all knots, and returns
    /// the largest state difference (12-vector norm) over the knots the window
    /// still holds at the end.
    pub fn window_batch_discrepancy(
        rng: &mut impl Rng,
        n_knots: usize,
        w: usize,
        per_segment: usize,
        noise: f64,
        settings: &FactorSettings,
    ) -> Result<f64, SolverError> {
        let truth = truth_chain(rng, n_knots, 0.1, 0.01);
        let meas = measurements(rng, &truth, per_segment, noise, settings)?;
        let start = perturb(rng, &truth, 0.002);
        let bootstrap = MarginalPrior::bootstrap(truth[0], 1e-3, 0.5);
        let config = SolverConfig {
            window_size: w,
            max_iterations: 100,
            convergence_tol: 1e-13,
            ..Default::default()
        };

        let mut batch = start.clone();
        let segs: Vec<&SegmentMeasurements> = meas.iter().collect();
        optimize(&mut batch, Some(&bootstrap), &segs, settings, &config)?;

        let mut window = SlidingWindow::new(start[0], bootstrap);
        for i in 1..n_knots {
            window.push_frame(WindowFrame {
                index: i - 1,
                start_time: truth[i - 1].time,
                end_time: truth[i].time,
                keypoints: Vec::new(),
                measurements: meas[i - 1].clone(),
            })?;
            *window.knots_mut().last_mut().expect("knot pushed") = start[i];
            window.optimize(settings, &config)?;
            while window.knots().len() > w + 1 {
                window.marginalize_oldest(settings)?;
            }
        }
        window.optimize(settings, &config)?;
        let retained = window.knots();
        let offset = n_knots - retained.len();
        let mut worst = 0.0f64;
        for (k, b) in retained.iter().zip(&batch[offset..]) {
            worst = worst.max(k.local_difference(b)?.norm());
        }
        Ok(worst)
    }

    /// Each knot retracted by a uniform perturbation of half-width `scale`.
    pub fn perturb(rng: &mut impl Rng, knots: &[TrajectoryKnot], scale: f64) -> Vec<TrajectoryKnot> {
        knots
            .iter()
            .map(|k| k.retract(&Vector12::from_fn(|_, _| scale * rng.random_range(-1.0..1.0))))
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use nalgebra::DVector;

    /// Naive dense assembly of `J^T W J` and `-J^T W e` by stacking every
    /// residual row explicitly.
    pub fn dense_normal_equations(
        knots: &[TrajectoryKnot],
        marginal: Option<&MarginalPrior>,
        segments: &[&SegmentMeasurements],
        settings: &FactorSettings,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let n = knots.len();
        let dim = 12 * n;
        let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new(); // (jacobian row, weight, error)
        let mut h = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        if let Some(m) = marginal {
            let (_, hm, bm) = m.linearize(&knots[0]).unwrap();
            h.view_mut((0, 0), (12, 12)).copy_from(&hm);
            b.rows_mut(0, 12).copy_from(&bm);
        }
        for i in 0..n - 1 {
            let pe = prior_error(&knots[i], &knots[i + 1], &settings.prior).unwrap();
            let mut j = DMatrix::zeros(12, dim);
            j.view_mut((0, 12 * i), (12, 12)).copy_from(&pe.jac_prev);
            j.view_mut((0, 12 * i + 12), (12, 12)).copy_from(&pe.jac_next);
            let w = DMatrix::from_iterator(12, 12, pe.information.iter().copied());
            let e = DVector::from_iterator(12, pe.error.iter().copied());
            h += j.transpose() * &w * &j;
            b -= j.transpose() * &w * e;
            let seg = Segment::new(&knots[i], &knots[i + 1]).unwrap();
            let mut push = |lin: LinearizedResidual, trunc: f64, k: f64| {
                if let Some((_, w)) = robust_terms(&lin, trunc, k) {
                    let mut row = DVector::zeros(dim);
                    for c in 0..24 {
                        row[12 * i + c] = lin.jacobian[c];
                    }
                    rows.push((row, w, lin.error));
                }
            };
            for c in &segments[i].p2p {
                let s = seg.query(c.query.timestamp).unwrap();
                push(
                    p2p_linearize(c, &s, &settings.ext, &settings.weights),
                    settings.robust.p2p_truncation,
                    settings.robust.p2p_cauchy_k,
                );
            }
            for p in &segments[i].doppler {
                let s = seg.query(p.timestamp).unwrap();
                push(
                    dv_jacobian(p, &s, &settings.ext, &settings.weights).unwrap(),
                    settings.robust.dv_truncation,
                    settings.robust.dv_cauchy_k,
                );
            }
        }
        for (row, w, e) in rows {
            h += &row * row.transpose() * w;
            b -= &row * (w * e);
        }
        (h, b)
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::{measurements, perturb, truth_chain, window_batch_discrepancy};
    use super::testing::*;
    use super::*;
    use crate::gp::constant_twist_flow;
    use crate::liealg::testing::rng;
    use crate::liealg::Twist;
    use nalgebra::{DVector, Vector3, Vector6};

    fn settings() -> FactorSettings {
        FactorSettings::default()
    }

    fn const_chain(n: usize) -> Vec<TrajectoryKnot> {
        let twist = Twist::from_vector(&Vector6::new(-5.0, 0.2, 0.0, 0.0, 0.01, 0.05));
        let mut k = TrajectoryKnot::new(0.0, Pose::identity(), twist);
        let mut out = vec![k];
        for _ in 1..n {
            k = TrajectoryKnot::new(k.time + 0.1, constant_twist_flow(&k.pose, &twist, 0.1), twist);
            out.push(k);
        }
        out
    }

    #[test]
    fn prior_only_chain_on_mean_has_zero_gradient() {
        let knots = const_chain(4);
        let empty = SegmentMeasurements::default();
        let segs = vec![&empty; 3];
        let neq = build_normal_equations(&knots, None, &segs, &settings()).unwrap();
        assert!(neq.b.iter().all(|b| b.amax() < 1e-9));
    }

    #[test]
    fn single_p2p_factor_is_rank_one() {
        let knots = const_chain(2);
        let s = settings();
        let q = Vector3::new(5.0, 1.0, 0.5);
        let (pose, _) = Segment::new(&knots[0], &knots[1]).unwrap().query_state(0.04).unwrap();
        let c = Correspondence {
            query: LidarPoint::new(q, 0.04, None),
            map_point: s.ext.sensor_to_world(&pose, &q) + Vector3::new(0.0, 0.6, 0.8) * 0.05,
            normal: Vector3::new(0.0, 0.6, 0.8),
            alpha: 0.9,
            sigmas: [1.0, 1.0, 0.0],
        };
        let meas = SegmentMeasurements {
            p2p: vec![c],
            doppler: vec![],
        };
        let with = build_normal_equations(&knots, None, &[&meas], &s).unwrap();
        let without = build_normal_equations(&knots, None, &[&SegmentMeasurements::default()], &s).unwrap();
        let dh = with.h.to_dense() - without.h.to_dense();
        let state = crate::gp::interpolate(&knots[0], &knots[1], 0.04).unwrap();
        let lin = p2p_linearize(&c, &state, &s.ext, &s.weights);
        let (_, w) = robust_terms(&lin, s.robust.p2p_truncation, s.robust.p2p_cauchy_k).unwrap();
        let j = DVector::from_iterator(24, lin.jacobian.iter().copied());
        let outer = &j * j.transpose() * w;
        assert!((dh - &outer).amax() < 1e-9 * (1.0 + outer.amax()));
        assert_eq!(outer.rank(1e-9 * outer.amax()), 1);
    }

    #[test]
    fn block_assembly_matches_dense_assembly() {
        let mut r = rng(40);
        let s = settings();
        for _ in 0..20 {
            let truth = truth_chain(&mut r, 4, 0.1, 0.3);
            let meas = measurements(&mut r, &truth, 15, 0.05, &s).unwrap();
            let segs: Vec<&SegmentMeasurements> = meas.iter().collect();
            let knots = perturb(&mut r, &truth, 0.02);
            let marginal = MarginalPrior::bootstrap(truth[0], 0.01, 1.0);
            let neq = build_normal_equations(&knots, Some(&marginal), &segs, &s).unwrap();
            let (hd, bd) = dense_normal_equations(&knots, Some(&marginal), &segs, &s);
            let hb = neq.h.to_dense();
            assert!((&hb - &hd).amax() < 1e-10 * (1.0 + hd.amax()));
            assert!((neq.b_dense() - &bd).amax() < 1e-10 * (1.0 + bd.amax()));
            assert!((&hb - hb.transpose()).amax() == 0.0);
        }
    }

    #[test]
    fn block_cholesky_matches_dense_solve() {
        let mut r = rng(41);
        let s = settings();
        let truth = truth_chain(&mut r, 6, 0.1, 0.3);
        let meas = measurements(&mut r, &truth, 10, 0.05, &s).unwrap();
        let segs: Vec<&SegmentMeasurements> = meas.iter().collect();
        let marginal = MarginalPrior::bootstrap(truth[0], 0.01, 1.0);
        let neq = build_normal_equations(&truth, Some(&marginal), &segs, &s).unwrap();
        let x = neq.h.solve(&neq.b).unwrap();
        let xd = neq.h.to_dense().lu().solve(&neq.b_dense()).unwrap();
        let xb = DVector::from_iterator(72, x.iter().flat_map(|v| v.iter().copied()));
        assert!((xb - &xd).amax() < 1e-8 * (1.0 + xd.amax()));
    }

    #[test]
    fn zero_gradient_gives_zero_step() {
        let knots = const_chain(3);
        let empty = SegmentMeasurements::default();
        let marginal = MarginalPrior::bootstrap(knots[0], 0.01, 1.0);
        let neq = build_normal_equations(&knots, Some(&marginal), &[&empty, &empty], &settings()).unwrap();
        let step = gauss_newton_step(&knots, &neq, &SolverConfig::default()).unwrap();
        assert!(step.step_norm < 1e-9);
        for (a, b) in step.knots.iter().zip(&knots) {
            assert!((a.pose.to_matrix() - b.pose.to_matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn indefinite_hessian_triggers_damping() {
        let mut h = BlockTridiagonal::zeros(1);
        h.diag[0] = Matrix12::identity();
        h.diag[0][(3, 3)] = -1e-6;
        assert!(h.solve(&[Vector12::zeros()]).is_none());
        // diag(H) damping cannot fix a negative pivot either way; expect the error.
        let neq = NormalEquations {
            h,
            b: vec![Vector12::repeat(1.0)],
            cost: 0.0,
        };
        let knots = const_chain(1);
        assert!(matches!(
            gauss_newton_step(&knots, &neq, &SolverConfig::default()),
            Err(SolverError::IndefiniteHessian)
        ));
        let mut h = BlockTridiagonal::zeros(1);
        h.diag[0] = Matrix12::identity();
        h.diag[0][(3, 4)] = 1.0 + 1e-9;
        h.diag[0][(4, 3)] = 1.0 + 1e-9;
        let neq = NormalEquations {
            h,
            b: vec![Vector12::repeat(1.0)],
            cost: 0.0,
        };
        let step = gauss_newton_step(&knots, &neq, &SolverConfig::default()).unwrap();
        assert!(step.lambda > 0.0);
    }

    #[test]
    fn gauss_newton_on_quadratic_problem_converges_in_one_step() {
        // Marginal prior alone is quadratic in the local coordinates of knot 0
        // when the anchor equals the linearization point's pose.
        let knots = const_chain(1);
        let mut g = Vector12::zeros();
        g[6] = 0.3;
        g[7] = -0.2;
        let marginal = MarginalPrior {
            anchor: knots[0],
            information: Matrix12::identity() * 4.0,
            gradient: g,
        };
        let mut k = knots.clone();
        let neq = build_normal_equations(&k, Some(&marginal), &[], &settings()).unwrap();
        let step = gauss_newton_step(&k, &neq, &SolverConfig::default()).unwrap();
        k = step.knots;
        let neq = build_normal_equations(&k, Some(&marginal), &[], &settings()).unwrap();
        assert!(neq.b[0].amax() < 1e-12);
        assert!((k[0].twist.to_vector()[0] - knots[0].twist.to_vector()[0] - 0.075).abs() < 1e-12);
    }

    #[test]
    fn cost_never_increases_on_fixed_association() {
        let mut r = rng(42);
        let s = settings();
        for _ in 0..10 {
            let truth = truth_chain(&mut r, 4, 0.1, 0.3);
            let meas = measurements(&mut r, &truth, 30, 0.05, &s).unwrap();
            let segs: Vec<&SegmentMeasurements> = meas.iter().collect();
            let mut knots = perturb(&mut r, &truth, 0.05);
            let marginal = MarginalPrior::bootstrap(truth[0], 0.01, 1.0);
            let mut timings = StageTimings::new();
            let mut last = f64::INFINITY;
            for _ in 0..15 {
                let out = iterate_once(&mut knots, Some(&marginal), &segs, &s, &SolverConfig::default(), &mut timings).unwrap();
                assert!(out.cost_after <= out.cost_before + 1e-12 * out.cost_before.abs());
                assert!(out.cost_before <= last + 1e-9 * last.abs().max(1.0));
                last = out.cost_after;
            }
        }
    }

    #[test]
    fn recovers_truth_from_noiseless_measurements() {
        let mut r = rng(43);
        let mut s = settings();
        // A weak motion prior makes the truth the minimizer of the noiseless problem.
        s.prior.qc_diag = [1e6; 6];
        let truth = truth_chain(&mut r, 5, 0.1, 0.3);
        let meas = measurements(&mut r, &truth, 40, 0.0, &s).unwrap();
        let segs: Vec<&SegmentMeasurements> = meas.iter().collect();
        let mut knots = perturb(&mut r, &truth, 0.01);
        knots[0] = truth[0];
        let marginal = MarginalPrior::bootstrap(truth[0], 1e-4, 1e-2);
        let cfg = SolverConfig {
            convergence_tol: 1e-12,
            ..Default::default()
        };
        let iters = optimize(&mut knots, Some(&marginal), &segs, &s, &cfg).unwrap();
        assert!(iters < cfg.max_iterations);
        for (k, t) in knots.iter().zip(&truth) {
            assert!(k.local_difference(t).unwrap().amax() < 1e-4);
        }
    }

    #[test]
    fn schur_matches_dense_inverse() {
        let mut r = rng(44);
        let a = DMatrix::from_fn(24, 24, |_, _| rand::Rng::random_range(&mut r, -1.0..1.0));
        let hd = &a * a.transpose() + DMatrix::identity(24, 24);
        let h = Matrix24::from_iterator(hd.iter().copied());
        let b = Vector24::from_fn(|_, _| rand::Rng::random_range(&mut r, -1.0..1.0));
        let (hm, bm) = schur_first_block(&h, &b);
        // Marginal covariance is the lower-right block of H^{-1}.
        let cov = hd.try_inverse().unwrap();
        let cov11 = cov.view((12, 12), (12, 12)).into_owned();
        let hm_d = DMatrix::from_iterator(12, 12, hm.iter().copied());
        assert!((hm_d.try_inverse().unwrap() - &cov11).amax() < 1e-9);
        // Marginal mean matches the full solve.
        let x = h.lu().solve(&b).unwrap();
        let x1 = hm.lu().solve(&bm).unwrap();
        assert!((x.fixed_rows::<12>(12) - x1).amax() < 1e-9);
    }

    #[test]
    fn singular_marginal_block_is_regularized() {
        let h = Matrix24::zeros();
        let (hm, bm) = schur_first_block(&h, &Vector24::zeros());
        assert!(hm.amax() < 1e-12 && bm.amax() == 0.0);
    }

    #[test]
    fn marginalizing_unconnected_knot_keeps_estimates() {
        // A vanishing prior (huge Qc) between the oldest knots carries no
        // information, so the remaining estimate must not move.
        let mut r = rng(45);
        let mut s = settings();
        s.prior.qc_diag = [1e12; 6];
        let truth = truth_chain(&mut r, 3, 0.1, 0.3);
        let mut meas = measurements(&mut r, &truth, 30, 0.01, &s).unwrap();
        meas[0] = SegmentMeasurements::default();
        let mut window = SlidingWindow::new(truth[0], MarginalPrior::bootstrap(truth[0], 1e-3, 1.0));
        for (i, k) in truth.iter().enumerate().skip(1) {
            window.knots.push(*k);
            window.frames.push(WindowFrame {
                index: i - 1,
                start_time: truth[i - 1].time,
                end_time: k.time,
                keypoints: vec![],
                measurements: meas[i - 1].clone(),
            });
        }
        let cfg = SolverConfig {
            convergence_tol: 1e-12,
            ..Default::default()
        };
        window.optimize(&s, &cfg).unwrap();
        let before: Vec<_> = window.knots()[1..].to_vec();
        window.marginalize_oldest(&s).unwrap();
        window.optimize(&s, &cfg).unwrap();
        for (a, b) in window.knots().iter().zip(&before) {
            assert!(a.local_difference(b).unwrap().amax() < 1e-8);
        }
    }

    #[test]
    fn prior_only_window_matches_batch() {
        let mut r = rng(46);
        let s = settings();
        for _ in 0..5 {
            let d = window_batch_discrepancy(&mut r, 6, 2, 0, 0.0, &s).unwrap();
            assert!(d < 1e-8, "discrepancy {d}");
        }
    }

    #[test]
    fn sliding_three_times_matches_batch() {
        let mut r = rng(47);
        let s = settings();
        for _ in 0..5 {
            // 6 knots with w = 2 slides the window three times.
            let d = window_batch_discrepancy(&mut r, 6, 2, 20, 1e-5, &s).unwrap();
            assert!(d < 1e-6, "discrepancy {d}");
        }
    }

    #[test]
    fn window_of_one_matches_batch() {
        let mut r = rng(48);
        let d = window_batch_discrepancy(&mut r, 5, 1, 20, 1e-5, &settings()).unwrap();
        assert!(d < 1e-6, "discrepancy {d}");
    }

    /// IRLS weights of every measurement, in the stacking order below.
    fn irls_weights(knots: &[TrajectoryKnot], segs: &[SegmentMeasurements], s: &FactorSettings) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..knots.len() - 1 {
            let seg = Segment::new(&knots[i], &knots[i + 1]).unwrap();
            for c in &segs[i].p2p {
                let lin = p2p_linearize(c, &seg.query(c.query.timestamp).unwrap(), &s.ext, &s.weights);
                out.push(robust_terms(&lin, s.robust.p2p_truncation, s.robust.p2p_cauchy_k).unwrap().1);
            }
            for p in &segs[i].doppler {
                let lin = dv_jacobian(p, &seg.query(p.timestamp).unwrap(), &s.ext, &s.weights).unwrap();
                out.push(robust_terms(&lin, s.robust.dv_truncation, s.robust.dv_cauchy_k).unwrap().1);
            }
        }
        out
    }

    /// Whitened residual vector with fixed IRLS weights.
    fn stacked_residuals(
        knots: &[TrajectoryKnot],
        weights: &[f64],
        marginal: &MarginalPrior,
        segs: &[SegmentMeasurements],
        s: &FactorSettings,
    ) -> DVector<f64> {
        let mut r = Vec::new();
        let l = marginal.information.cholesky().unwrap().l();
        r.extend((l.transpose() * knots[0].local_difference(&marginal.anchor).unwrap()).iter());
        let mut w = weights.iter();
        for i in 0..knots.len() - 1 {
            let pe = prior_error(&knots[i], &knots[i + 1], &s.prior).unwrap();
            let l = pe.information.cholesky().unwrap().l();
            r.extend((l.transpose() * pe.error).iter());
            let seg = Segment::new(&knots[i], &knots[i + 1]).unwrap();
            for c in &segs[i].p2p {
                let (pose, _) = seg.query_state(c.query.timestamp).unwrap();
                r.push(w.next().unwrap().sqrt() * p2p_error(c, &pose, &s.ext));
            }
            for p in &segs[i].doppler {
                let (_, twist) = seg.query_state(p.timestamp).unwrap();
                r.push(w.next().unwrap().sqrt() * dv_error(p, &twist, &s.ext).unwrap());
            }
        }
        DVector::from_vec(r)
    }

    #[test]
    fn matches_dense_finite_difference_reference() {
        let mut r = rng(49);
        let s = settings();
        for _ in 0..3 {
            let truth = truth_chain(&mut r, 4, 0.1, 0.1);
            let meas = measurements(&mut r, &truth, 25, 0.02, &s).unwrap();
            let segs: Vec<&SegmentMeasurements> = meas.iter().collect();
            let start = perturb(&mut r, &truth, 0.005);
            let marginal = MarginalPrior::bootstrap(truth[0], 1e-2, 0.5);
            let cfg = SolverConfig {
                convergence_tol: 1e-12,
                max_iterations: 100,
                ..Default::default()
            };
            let mut fast = start.clone();
            optimize(&mut fast, Some(&marginal), &segs, &s, &cfg).unwrap();

            // Dense Gauss-Newton on the stacked residual with central
            // differences and IRLS weights refreshed each iteration.
            let mut x = start;
            let n = 12 * x.len();
            for _ in 0..50 {
                let w = irls_weights(&x, &meas, &s);
                let r0 = stacked_residuals(&x, &w, &marginal, &meas, &s);
                let mut j = DMatrix::zeros(r0.len(), n);
                let h = 1e-6;
                for col in 0..n {
                    let mut plus = x.clone();
                    let mut minus = x.clone();
                    let mut d = Vector12::zeros();
                    d[col % 12] = h;
                    plus[col / 12] = x[col / 12].retract(&d);
                    minus[col / 12] = x[col / 12].retract(&-d);
                    let diff = (stacked_residuals(&plus, &w, &marginal, &meas, &s)
                        - stacked_residuals(&minus, &w, &marginal, &meas, &s))
                        / (2.0 * h);
                    j.set_column(col, &diff);
                }
                let step = (j.transpose() * &j).lu().solve(&(-j.transpose() * &r0)).unwrap();
                for (k, knot) in x.iter_mut().enumerate() {
                    *knot = knot.retract(&step.fixed_rows::<12>(12 * k).into_owned());
                }
                if step.norm() < 1e-11 {
                    break;
                }
            }
            for (a, b) in fast.iter().zip(&x) {
                let d = a.local_difference(b).unwrap().norm();
                assert!(d < 1e-6, "difference {d}");
            }
        }
    }

    #[test]
    fn stride_subset_is_even() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(stride_subset(&v, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(stride_subset(&v, 20), v);
    }
}
