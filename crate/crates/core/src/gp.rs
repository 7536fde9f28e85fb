//! White-noise-on-acceleration GP trajectory on SE(3).
//!
//! Each knot carries a world-to-vehicle pose `T` and a body twist `w` with
//! `dT/dt = w^ T`. Between two knots the trajectory is expressed in the local
//! coordinates `gamma(t) = [xi(t); J^{-1}(xi(t)) w(t)]`, `xi(t) = log(T(t) T_prev^{-1})`,
//! which evolve as a linear time-invariant system driven by white noise.
//!
//! Knot perturbations are 12-vectors `[delta_pose; delta_twist]` with the pose
//! perturbed on the left (`T <- exp(delta^) T`) and the twist additively.

use nalgebra::{Matrix2, Matrix6, SMatrix, SVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::GpError;
use crate::liealg::{
    adjoint, exp_se3, left_jacobian, left_jacobian_apply_with_derivative,
    left_jacobian_inv_apply_with_derivative, log_se3, Pose, Twist,
};

pub type Vector12 = SVector<f64, 12>;
pub type Matrix12 = SMatrix<f64, 12, 12>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryKnot {
    pub time: f64,
    pub pose: Pose,
    pub twist: Twist,
}

impl TrajectoryKnot {
    pub fn new(time: f64, pose: Pose, twist: Twist) -> Self {
        Self { time, pose, twist }
    }

    /// Applies a 12-dim local perturbation.
    pub fn retract(&self, delta: &Vector12) -> TrajectoryKnot {
        let dp: Vector6<f64> = delta.fixed_rows::<6>(0).into_owned();
        let dw: Vector6<f64> = delta.fixed_rows::<6>(6).into_owned();
        TrajectoryKnot {
            time: self.time,
            pose: exp_se3(&dp).compose(&self.pose),
            twist: Twist::from_vector(&(self.twist.to_vector() + dw)),
        }
    }

    /// 12-dim local difference `self ⊟ reference`.
    pub fn local_difference(&self, reference: &TrajectoryKnot) -> Result<Vector12, GpError> {
        let dp = log_se3(&self.pose.compose(&reference.pose.inverse()))?;
        let dw = self.twist.to_vector() - reference.twist.to_vector();
        let mut v = Vector12::zeros();
        v.fixed_rows_mut::<6>(0).copy_from(&dp);
        v.fixed_rows_mut::<6>(6).copy_from(&dw);
        Ok(v)
    }
}

/// Power-spectral density of the white-noise acceleration, per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WnoaPriorParams {
    pub qc_diag: [f64; 6],
}

impl Default for WnoaPriorParams {
    fn default() -> Self {
        Self {
            qc_diag: [1.0, 1.0, 1.0, 0.1, 0.1, 0.1],
        }
    }
}

impl WnoaPriorParams {
    pub fn is_valid(&self) -> bool {
        self.qc_diag.iter().all(|q| *q > 0.0 && q.is_finite())
    }

    /// `Q(dt) = [[dt^3/3 Qc, dt^2/2 Qc], [dt^2/2 Qc, dt Qc]]`.
    pub fn covariance(&self, dt: f64) -> Matrix12 {
        let s = scalar_q(dt);
        kron2(&s, &self.qc_diag)
    }

    /// Closed-form inverse of [`covariance`](Self::covariance).
    pub fn information(&self, dt: f64) -> Matrix12 {
        let s = scalar_q_inv(dt);
        let inv: [f64; 6] = self.qc_diag.map(|q| 1.0 / q);
        kron2(&s, &inv)
    }
}

fn scalar_q(dt: f64) -> Matrix2<f64> {
    Matrix2::new(
        dt * dt * dt / 3.0,
        dt * dt / 2.0,
        dt * dt / 2.0,
        dt,
    )
}

fn scalar_q_inv(dt: f64) -> Matrix2<f64> {
    Matrix2::new(
        12.0 / (dt * dt * dt),
        -6.0 / (dt * dt),
        -6.0 / (dt * dt),
        4.0 / dt,
    )
}

fn scalar_phi(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

/// `s ⊗ diag(d)` laid out as 2x2 blocks of 6x6.
fn kron2(s: &Matrix2<f64>, d: &[f64; 6]) -> Matrix12 {
    let mut m = Matrix12::zeros();
    for bi in 0..2 {
        for bj in 0..2 {
            for k in 0..6 {
                m[(bi * 6 + k, bj * 6 + k)] = s[(bi, bj)] * d[k];
            }
        }
    }
    m
}

fn kron2_identity(s: &Matrix2<f64>) -> Matrix12 {
    kron2(s, &[1.0; 6])
}

/// Transition matrix `Phi(dt) = [[I, dt I], [0, I]]`.
pub fn transition(dt: f64) -> Matrix12 {
    kron2_identity(&scalar_phi(dt))
}

/// Constant-twist flow `T(t + dt) = exp(dt w^) T(t)`.
pub fn constant_twist_flow(pose: &Pose, twist: &Twist, dt: f64) -> Pose {
    exp_se3(&(twist.to_vector() * dt)).compose(pose)
}

/// Prior residual between neighboring knots with Jacobians w.r.t. both.
#[derive(Clone, Debug)]
pub struct PriorError {
    pub error: Vector12,
    pub covariance: Matrix12,
    pub information: Matrix12,
    pub jac_prev: Matrix12,
    pub jac_next: Matrix12,
}

pub fn prior_error(
    k_prev: &TrajectoryKnot,
    k_next: &TrajectoryKnot,
    params: &WnoaPriorParams,
) -> Result<PriorError, GpError> {
    let dt = k_next.time - k_prev.time;
    if !(dt > 0.0) {
        return Err(GpError::NonPositiveDt { dt });
    }
    let seg = Segment::new(k_prev, k_next)?;
    let w_prev = k_prev.twist.to_vector();
    let mut error = Vector12::zeros();
    error
        .fixed_rows_mut::<6>(0)
        .copy_from(&(seg.xi - w_prev * dt));
    error
        .fixed_rows_mut::<6>(6)
        .copy_from(&(seg.gamma_next_twist - w_prev));

    let mut jac_prev = seg.dgamma2_dprev;
    for k in 0..6 {
        jac_prev[(k, 6 + k)] -= dt;
        jac_prev[(6 + k, 6 + k)] -= 1.0;
    }
    Ok(PriorError {
        error,
        covariance: params.covariance(dt),
        information: params.information(dt),
        jac_prev,
        jac_next: seg.dgamma2_dnext,
    })
}

/// State on the GP at a query time together with its sensitivity to the two
/// bracketing knots.
#[derive(Clone, Copy, Debug)]
pub struct InterpolatedState {
    pub time: f64,
    pub pose: Pose,
    pub twist: Twist,
    /// d[delta_pose; delta_twist] / d(prev knot perturbation)
    pub jac_prev: Matrix12,
    /// d[delta_pose; delta_twist] / d(next knot perturbation)
    pub jac_next: Matrix12,
}

/// Per-interval quantities shared by every query between two knots.
#[derive(Clone, Debug)]
pub struct Segment {
    prev: TrajectoryKnot,
    next: TrajectoryKnot,
    xi: Vector6<f64>,
    gamma_next_twist: Vector6<f64>,
    dgamma2_dprev: Matrix12,
    dgamma2_dnext: Matrix12,
}

impl Segment {
    pub fn new(prev: &TrajectoryKnot, next: &TrajectoryKnot) -> Result<Self, GpError> {
        let t21 = next.pose.compose(&prev.pose.inverse());
        let xi = log_se3(&t21)?;
        let w2 = next.twist.to_vector();
        let (g2, dinv) = left_jacobian_inv_apply_with_derivative(&xi, &w2)?;
        let jinv = crate::liealg::left_jacobian_inv(&xi)?;
        let a_ad = jinv * adjoint(&t21);

        let mut dprev = Matrix12::zeros();
        dprev.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-a_ad));
        dprev
            .fixed_view_mut::<6, 6>(6, 0)
            .copy_from(&(-(dinv * a_ad)));

        let mut dnext = Matrix12::zeros();
        dnext.fixed_view_mut::<6, 6>(0, 0).copy_from(&jinv);
        dnext.fixed_view_mut::<6, 6>(6, 0).copy_from(&(dinv * jinv));
        dnext.fixed_view_mut::<6, 6>(6, 6).copy_from(&jinv);

        Ok(Self {
            prev: *prev,
            next: *next,
            xi,
            gamma_next_twist: g2,
            dgamma2_dprev: dprev,
            dgamma2_dnext: dnext,
        })
    }

    pub fn start(&self) -> f64 {
        self.prev.time
    }

    pub fn end(&self) -> f64 {
        self.next.time
    }

    /// Pose and twist at `tau` without Jacobians.
    pub fn query_state(&self, tau: f64) -> Result<(Pose, Twist), GpError> {
        let (t1, t2) = (self.prev.time, self.next.time);
        if !(tau >= t1 && tau <= t2) {
            return Err(GpError::TauOutOfRange {
                tau,
                start: t1,
                end: t2,
            });
        }
        if tau == t1 {
            return Ok((self.prev.pose, self.prev.twist));
        }
        if tau == t2 {
            return Ok((self.next.pose, self.next.twist));
        }
        let (xi_tau, g_tau, _, _) = self.local_state(tau);
        Ok((
            exp_se3(&xi_tau).compose(&self.prev.pose),
            Twist::from_vector(&(left_jacobian(&xi_tau) * g_tau)),
        ))
    }

    fn local_state(&self, tau: f64) -> (Vector6<f64>, Vector6<f64>, Matrix2<f64>, Matrix2<f64>) {
        let dt = self.next.time - self.prev.time;
        let s = tau - self.prev.time;
        let psi_s = scalar_q(s) * scalar_phi(dt - s).transpose() * scalar_q_inv(dt);
        let lambda_s = scalar_phi(s) - psi_s * scalar_phi(dt);
        let w1 = self.prev.twist.to_vector();
        // gamma_prev = [0; w1], gamma_next = [xi; g2]
        let xi_tau = w1 * lambda_s[(0, 1)]
            + self.xi * psi_s[(0, 0)]
            + self.gamma_next_twist * psi_s[(0, 1)];
        let g_tau = w1 * lambda_s[(1, 1)]
            + self.xi * psi_s[(1, 0)]
            + self.gamma_next_twist * psi_s[(1, 1)];
        (xi_tau, g_tau, lambda_s, psi_s)
    }

    pub fn query(&self, tau: f64) -> Result<InterpolatedState, GpError> {
        let (t1, t2) = (self.prev.time, self.next.time);
        if !(tau >= t1 && tau <= t2) {
            return Err(GpError::TauOutOfRange {
                tau,
                start: t1,
                end: t2,
            });
        }
        if tau == t1 {
            return Ok(InterpolatedState {
                time: tau,
                pose: self.prev.pose,
                twist: self.prev.twist,
                jac_prev: Matrix12::identity(),
                jac_next: Matrix12::zeros(),
            });
        }
        if tau == t2 {
            return Ok(InterpolatedState {
                time: tau,
                pose: self.next.pose,
                twist: self.next.twist,
                jac_prev: Matrix12::zeros(),
                jac_next: Matrix12::identity(),
            });
        }

        let (xi_tau, g_tau, lambda_s, psi_s) = self.local_state(tau);

        let pose = exp_se3(&xi_tau).compose(&self.prev.pose);
        let (twist_vec, dj) = left_jacobian_apply_with_derivative(&xi_tau, &g_tau);
        let j_tau = left_jacobian(&xi_tau);

        let lambda = kron2_identity(&lambda_s);
        let psi = kron2_identity(&psi_s);
        // d gamma_prev / d prev = [[0, 0], [0, I]]
        let mut dg1 = Matrix12::zeros();
        dg1.fixed_view_mut::<6, 6>(6, 6).copy_from(&Matrix6::identity());
        let dgamma_prev = lambda * dg1 + psi * self.dgamma2_dprev;
        let dgamma_next = psi * self.dgamma2_dnext;

        let ad_tau = adjoint(&exp_se3(&xi_tau));
        let to_state = |dgamma: &Matrix12, with_anchor: bool| -> Matrix12 {
            let dxi = dgamma.fixed_view::<6, 12>(0, 0);
            let dg = dgamma.fixed_view::<6, 12>(6, 0);
            let mut out = Matrix12::zeros();
            let mut pose_rows = j_tau * dxi;
            if with_anchor {
                let mut anchor = pose_rows.fixed_view_mut::<6, 6>(0, 0);
                anchor += ad_tau;
            }
            out.fixed_view_mut::<6, 12>(0, 0).copy_from(&pose_rows);
            out.fixed_view_mut::<6, 12>(6, 0)
                .copy_from(&(j_tau * dg + dj * dxi));
            out
        };

        Ok(InterpolatedState {
            time: tau,
            pose,
            twist: Twist::from_vector(&twist_vec),
            jac_prev: to_state(&dgamma_prev, true),
            jac_next: to_state(&dgamma_next, false),
        })
    }
}

pub fn interpolate(
    k_prev: &TrajectoryKnot,
    k_next: &TrajectoryKnot,
    tau: f64,
) -> Result<InterpolatedState, GpError> {
    if !(tau >= k_prev.time && tau <= k_next.time) {
        return Err(GpError::TauOutOfRange {
            tau,
            start: k_prev.time,
            end: k_next.time,
        });
    }
    if !(k_next.time > k_prev.time) {
        return Err(GpError::NonPositiveDt {
            dt: k_next.time - k_prev.time,
        });
    }
    Segment::new(k_prev, k_next)?.query(tau)
}

/// Constant-velocity prediction, the prior mean.
pub fn extrapolate(k: &TrajectoryKnot, tau: f64) -> Result<TrajectoryKnot, GpError> {
    if !(tau >= k.time) {
        return Err(GpError::TauBeforeKnot { tau, knot: k.time });
    }
    if tau == k.time {
        return Ok(*k);
    }
    Ok(TrajectoryKnot {
        time: tau,
        pose: constant_twist_flow(&k.pose, &k.twist, tau - k.time),
        twist: k.twist,
    })
}
