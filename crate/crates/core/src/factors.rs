//! Measurement factors: point-to-plane and Doppler range-rate, with analytic
//! Jacobians through GP interpolation, plus the truncated-Cauchy kernel.
//!
//! Twist convention: the body twist `w` makes `q_dot = w_l^ q` hold for a
//! static point `q` in the lidar frame, so forward motion of the vehicle has a
//! negative x-component of `nu`.

use nalgebra::{Matrix1x6, Matrix6, RowSVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::FactorError;
use crate::frontend::{Correspondence, LidarPoint};
use crate::gp::InterpolatedState;
use crate::liealg::{adjoint, odot, projection_d, skew, HomogeneousPoint, Pose, Twist};

/// Truncated least squares around a Cauchy core, both in whitened units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustKernel {
    pub cauchy_k: f64,
    pub truncation: f64,
}

impl RobustKernel {
    pub fn new(cauchy_k: f64, truncation: f64) -> Self {
        Self {
            cauchy_k,
            truncation,
        }
    }
}

/// `(cost, irls_weight)` for a whitened residual.
pub fn robust_weight(whitened_e: f64, kernel: &RobustKernel) -> (f64, f64) {
    if !(whitened_e.abs() <= kernel.truncation) {
        return (0.0, 0.0);
    }
    let k = kernel.cauchy_k;
    let u = (whitened_e / k).powi(2);
    (0.5 * k * k * u.ln_1p(), 1.0 / (1.0 + u))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorWeights {
    /// Doppler weight applied to the squared error.
    pub beta: f64,
    pub p2p_sigma: f64,
    pub dv_sigma: f64,
}

impl Default for FactorWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            p2p_sigma: 0.1,
            dv_sigma: 0.1,
        }
    }
}

/// Robust-cost parameters. Truncations are in raw error units (m, m/s); the
/// Cauchy scales apply to whitened errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    pub p2p_truncation: f64,
    pub p2p_cauchy_k: f64,
    pub dv_truncation: f64,
    pub dv_cauchy_k: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            p2p_truncation: 0.5,
            p2p_cauchy_k: 1.0,
            dv_truncation: 2.0,
            dv_cauchy_k: 1.0,
        }
    }
}

/// Fixed vehicle-to-lidar transform and its adjoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsic {
    t_lv: Pose,
    t_vl: Pose,
    ad_lv: Matrix6<f64>,
}

impl Default for Extrinsic {
    fn default() -> Self {
        Self::new(Pose::identity())
    }
}

impl Extrinsic {
    pub fn new(t_lv: Pose) -> Self {
        Self {
            t_lv,
            t_vl: t_lv.inverse(),
            ad_lv: adjoint(&t_lv),
        }
    }

    pub fn t_lv(&self) -> &Pose {
        &self.t_lv
    }

    pub fn t_vl(&self) -> &Pose {
        &self.t_vl
    }

    pub fn ad_lv(&self) -> &Matrix6<f64> {
        &self.ad_lv
    }

    /// Sensor point to world, given the world-to-vehicle pose.
    pub fn sensor_to_world(&self, t_vi: &Pose, q: &Vector3<f64>) -> Vector3<f64> {
        t_vi.inverse().transform_point(&self.t_vl.transform_point(q))
    }
}

pub fn p2p_error(corr: &Correspondence, t_vi: &Pose, ext: &Extrinsic) -> f64 {
    let world = ext.sensor_to_world(t_vi, &corr.query.position.xyz);
    corr.normal.dot(&(corr.map_point - world))
}

/// Derivative of [`p2p_error`] w.r.t. a left perturbation of `t_vi`.
pub fn p2p_pose_jacobian(corr: &Correspondence, t_vi: &Pose, ext: &Extrinsic) -> Matrix1x6<f64> {
    let y = ext.t_vl.transform_point(&corr.query.position.xyz);
    let nr = corr.normal.transpose() * t_vi.rotation.transpose();
    let mut j = Matrix1x6::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&nr);
    j.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-(nr * skew(&y))));
    j
}

/// Whitened point-to-plane residual `alpha^2 e / sigma`.
pub fn p2p_whitening(corr: &Correspondence, weights: &FactorWeights) -> f64 {
    corr.alpha * corr.alpha / weights.p2p_sigma
}

/// Robustified cost contribution and IRLS weight for a point-to-plane factor.
pub fn p2p_weighted(
    corr: &Correspondence,
    t_vi: &Pose,
    ext: &Extrinsic,
    weights: &FactorWeights,
    robust: &RobustConfig,
) -> (f64, f64) {
    let e = p2p_error(corr, t_vi, ext);
    if e.abs() > robust.p2p_truncation {
        return (0.0, 0.0);
    }
    let s = p2p_whitening(corr, weights);
    robust_weight(s * e, &RobustKernel::new(robust.p2p_cauchy_k, f64::INFINITY))
}

fn unit_direction(q: &HomogeneousPoint) -> Result<Vector3<f64>, FactorError> {
    let dq = projection_d() * q.to_vector4();
    let r = dq.norm();
    if !(r > 0.0) {
        return Err(FactorError::ZeroRangePoint);
    }
    Ok(dq / r)
}

/// Row `d^T D q^⊙ Ad_lv` mapping a vehicle twist to predicted range-rate.
pub fn dv_projection(q: &HomogeneousPoint, ext: &Extrinsic) -> Result<RowSVector<f64, 6>, FactorError> {
    let d = unit_direction(q)?;
    let dq_odot = projection_d() * odot(q);
    Ok(d.transpose() * dq_odot * ext.ad_lv)
}

pub fn dv_predict(q: &HomogeneousPoint, twist: &Twist, ext: &Extrinsic) -> Result<f64, FactorError> {
    Ok((dv_projection(q, ext)? * twist.to_vector())[0])
}

pub fn dv_error(point: &LidarPoint, twist: &Twist, ext: &Extrinsic) -> Result<f64, FactorError> {
    let measured = point.doppler.ok_or(FactorError::MissingDoppler)?;
    Ok(measured - dv_predict(&point.position, twist, ext)?)
}

/// Whitened Doppler residual scale `sqrt(beta) / sigma`.
pub fn dv_whitening(weights: &FactorWeights) -> f64 {
    weights.beta.sqrt() / weights.dv_sigma
}

pub fn dv_weighted(
    point: &LidarPoint,
    twist: &Twist,
    ext: &Extrinsic,
    weights: &FactorWeights,
    robust: &RobustConfig,
) -> Result<(f64, f64), FactorError> {
    let e = dv_error(point, twist, ext)?;
    if e.abs() > robust.dv_truncation {
        return Ok((0.0, 0.0));
    }
    Ok(robust_weight(
        dv_whitening(weights) * e,
        &RobustKernel::new(robust.dv_cauchy_k, f64::INFINITY),
    ))
}

/// Scalar residual linearized w.r.t. the two bracketing knots.
#[derive(Clone, Copy, Debug)]
pub struct LinearizedResidual {
    /// Raw (unwhitened) error.
    pub error: f64,
    /// Multiplier taking the raw error to whitened units.
    pub whitening: f64,
    /// Raw error gradient w.r.t. `[prev (12); next (12)]`.
    pub jacobian: RowSVector<f64, 24>,
}

fn chain(row: &Matrix1x6<f64>, state: &InterpolatedState, rows: usize) -> RowSVector<f64, 24> {
    let mut j = RowSVector::<f64, 24>::zeros();
    let jp = row * state.jac_prev.fixed_view::<6, 12>(rows, 0);
    let jn = row * state.jac_next.fixed_view::<6, 12>(rows, 0);
    j.fixed_view_mut::<1, 12>(0, 0).copy_from(&jp);
    j.fixed_view_mut::<1, 12>(0, 12).copy_from(&jn);
    j
}

pub fn p2p_linearize(
    corr: &Correspondence,
    state: &InterpolatedState,
    ext: &Extrinsic,
    weights: &FactorWeights,
) -> LinearizedResidual {
    let row = p2p_pose_jacobian(corr, &state.pose, ext);
    LinearizedResidual {
        error: p2p_error(corr, &state.pose, ext),
        whitening: p2p_whitening(corr, weights),
        jacobian: chain(&row, state, 0),
    }
}

/// Doppler residual and its gradient w.r.t. both knots; the error only
/// depends on the interpolated twist.
pub fn dv_jacobian(
    point: &LidarPoint,
    state: &InterpolatedState,
    ext: &Extrinsic,
    weights: &FactorWeights,
) -> Result<LinearizedResidual, FactorError> {
    let measured = point.doppler.ok_or(FactorError::MissingDoppler)?;
    let proj = dv_projection(&point.position, ext)?;
    let predicted = (proj * state.twist.to_vector())[0];
    Ok(LinearizedResidual {
        error: measured - predicted,
        whitening: dv_whitening(weights),
        jacobian: chain(&(-proj), state, 6),
    })
}

/// Twist vector of a pure rotation about the lidar origin, mapped to the vehicle
/// frame. Used to probe the unobservable directions.
pub fn lidar_rotation_as_vehicle_twist(omega_l: &Vector3<f64>, ext: &Extrinsic) -> Vector6<f64> {
    let mut xi_l = Vector6::zeros();
    xi_l.fixed_rows_mut::<3>(3).copy_from(omega_l);
    adjoint(&ext.t_vl) * xi_l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{interpolate, testing::random_pair, TrajectoryKnot, Vector12};
    use crate::liealg::testing::{random_vec3, random_vec6, rng};
    use crate::liealg::exp_se3;
    use rand::Rng;

    fn corr(q: Vector3<f64>, p: Vector3<f64>, n: Vector3<f64>, alpha: f64) -> Correspondence {
        Correspondence {
            query: LidarPoint::new(q, 0.0, None),
            map_point: p,
            normal: n,
            alpha,
            sigmas: [1.0, 1.0, 0.0],
        }
    }

    #[test]
    fn p2p_examples() {
        let ext = Extrinsic::default();
        let id = Pose::identity();
        let c = corr(Vector3::new(1.0, 2.0, 3.0), Vector3::new(1.0, 2.0, 3.0), Vector3::z(), 1.0);
        assert_eq!(p2p_error(&c, &id, &ext), 0.0);
        let c = corr(Vector3::new(1.0, 2.0, 3.0), Vector3::new(1.0, 2.0, 3.2), Vector3::z(), 1.0);
        assert!((p2p_error(&c, &id, &ext) - 0.2).abs() < 1e-12);
        let c = corr(Vector3::new(1.0, 2.0, 3.0), Vector3::new(1.5, 1.0, 3.0), Vector3::z(), 1.0);
        assert_eq!(p2p_error(&c, &id, &ext), 0.0);
    }

    #[test]
    fn p2p_weighted_cases() {
        let ext = Extrinsic::default();
        let id = Pose::identity();
        let w = FactorWeights::default();
        let r = RobustConfig::default();
        let c = corr(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.3), Vector3::z(), 0.0);
        assert_eq!(p2p_weighted(&c, &id, &ext, &w, &r), (0.0, 1.0));
        let c = corr(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.05), Vector3::z(), 1.0);
        let wh = 0.05 / w.p2p_sigma;
        let (cost, weight) = p2p_weighted(&c, &id, &ext, &w, &r);
        assert!((cost - 0.5 * (1.0 + wh * wh).ln()).abs() < 1e-15);
        assert!((weight - 1.0 / (1.0 + wh * wh)).abs() < 1e-15);
        let c = corr(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.6), Vector3::z(), 1.0);
        assert_eq!(p2p_weighted(&c, &id, &ext, &w, &r), (0.0, 0.0));
    }

    #[test]
    fn p2p_invariant_to_global_rigid_transform() {
        let mut r = rng(30);
        for _ in 0..100 {
            let ext = Extrinsic::new(exp_se3(&random_vec6(&mut r, 1.0)));
            let t_vi = exp_se3(&random_vec6(&mut r, 3.0));
            let c = corr(
                random_vec3(&mut r, 20.0),
                random_vec3(&mut r, 20.0),
                random_vec3(&mut r, 1.0).normalize(),
                0.7,
            );
            let g = exp_se3(&random_vec6(&mut r, 3.0));
            let moved = Correspondence {
                map_point: g.transform_point(&c.map_point),
                normal: g.rotation * c.normal,
                ..c
            };
            let t_moved = t_vi.compose(&g.inverse());
            let a = p2p_error(&c, &t_vi, &ext);
            let b = p2p_error(&moved, &t_moved, &ext);
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn dv_predict_examples() {
        let ext = Extrinsic::default();
        let q = HomogeneousPoint::new(10.0, 0.0, 0.0);
        assert_eq!(dv_predict(&q, &Twist::zero(), &ext).unwrap(), 0.0);
        let fwd = Twist::new(Vector3::new(-5.0, 0.0, 0.0), Vector3::zeros());
        assert!((dv_predict(&q, &fwd, &ext).unwrap() + 5.0).abs() < 1e-15);
        let q = HomogeneousPoint::new(3.0, 4.0, 0.0);
        assert!((dv_predict(&q, &fwd, &ext).unwrap() + 3.0).abs() < 1e-15);
        assert_eq!(
            dv_predict(&HomogeneousPoint::new(0.0, 0.0, 0.0), &fwd, &ext),
            Err(FactorError::ZeroRangePoint)
        );
    }

    #[test]
    fn dv_predict_matches_projected_point_velocity() {
        let mut r = rng(31);
        for _ in 0..200 {
            let ext = Extrinsic::new(exp_se3(&random_vec6(&mut r, 1.0)));
            let q = HomogeneousPoint::from_xyz(random_vec3(&mut r, 50.0));
            let w = Twist::from_vector(&random_vec6(&mut r, 10.0));
            // Oracle: transport the vehicle twist to the lidar by conjugation and
            // project q_dot = w_l^ q onto the unit ray.
            let t = ext.t_lv().to_matrix();
            let w_l_hat = t * crate::liealg::hat(&w.to_vector()) * t.try_inverse().unwrap();
            let qdot = (w_l_hat * q.to_vector4()).xyz();
            let expected = q.xyz.normalize().dot(&qdot);
            let got = dv_predict(&q, &w, &ext).unwrap();
            assert!((got - expected).abs() < 1e-10 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn dv_error_cases() {
        let ext = Extrinsic::default();
        let fwd = Twist::new(Vector3::new(-5.0, 0.0, 0.0), Vector3::zeros());
        let p = LidarPoint::new(Vector3::new(10.0, 0.0, 0.0), 0.0, Some(-5.0));
        assert!(dv_error(&p, &fwd, &ext).unwrap().abs() < 1e-15);
        let moving = LidarPoint::new(Vector3::new(10.0, 0.0, 0.0), 0.0, Some(-8.0));
        let e = dv_error(&moving, &Twist::zero(), &ext).unwrap();
        assert_eq!(e, -8.0);
        let (cost, w) = dv_weighted(&moving, &Twist::zero(), &ext, &FactorWeights::default(), &RobustConfig::default()).unwrap();
        assert_eq!((cost, w), (0.0, 0.0));
        let bare = LidarPoint::new(Vector3::new(10.0, 0.0, 0.0), 0.0, None);
        assert_eq!(dv_error(&bare, &fwd, &ext), Err(FactorError::MissingDoppler));
    }

    #[test]
    fn rotation_is_unobservable_and_prediction_is_linear() {
        let mut r = rng(32);
        for _ in 0..1000 {
            let ext = Extrinsic::new(exp_se3(&random_vec6(&mut r, 1.0)));
            let q = HomogeneousPoint::from_xyz(random_vec3(&mut r, 80.0));
            let rot = lidar_rotation_as_vehicle_twist(&random_vec3(&mut r, 2.0), &ext);
            let v = dv_predict(&q, &Twist::from_vector(&rot), &ext).unwrap();
            assert!(v.abs() < 1e-12, "{v}");

            let w1 = random_vec6(&mut r, 5.0);
            let w2 = random_vec6(&mut r, 5.0);
            let (a, b) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            let lhs = dv_predict(&q, &Twist::from_vector(&(w1 * a + w2 * b)), &ext).unwrap();
            let rhs = a * dv_predict(&q, &Twist::from_vector(&w1), &ext).unwrap()
                + b * dv_predict(&q, &Twist::from_vector(&w2), &ext).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()) * 10.0);
        }
    }

    #[test]
    fn dv_predict_depends_only_on_direction_for_translation() {
        let mut r = rng(33);
        let ext = Extrinsic::default();
        for _ in 0..200 {
            let q = random_vec3(&mut r, 30.0);
            let w = Twist::new(random_vec3(&mut r, 10.0), Vector3::zeros());
            let lambda = r.random_range(0.01..100.0);
            let a = dv_predict(&HomogeneousPoint::from_xyz(q), &w, &ext).unwrap();
            let b = dv_predict(&HomogeneousPoint::from_xyz(q * lambda), &w, &ext).unwrap();
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn robust_weight_cases() {
        let k = RobustKernel::new(1.5, 4.0);
        assert_eq!(robust_weight(0.0, &k), (0.0, 1.0));
        assert!((robust_weight(1.5, &k).1 - 0.5).abs() < 1e-15);
        assert_eq!(robust_weight(4.0 + 1e-9, &k), (0.0, 0.0));
        let mut last = -1.0;
        for i in 0..=400 {
            let e = 4.0 * i as f64 / 400.0;
            let (c, _) = robust_weight(e, &k);
            assert!(c >= last);
            assert_eq!(c, robust_weight(-e, &k).0);
            last = c;
        }
    }

    fn fd_check(
        residual: impl Fn(&TrajectoryKnot, &TrajectoryKnot) -> f64,
        analytic: &RowSVector<f64, 24>,
        a: &TrajectoryKnot,
        b: &TrajectoryKnot,
    ) -> f64 {
        let eps = 1e-6;
        let mut fd = RowSVector::<f64, 24>::zeros();
        for k in 0..24 {
            let mut d = Vector12::zeros();
            d[k % 12] = eps;
            let (ap, am, bp, bm) = if k < 12 {
                (a.retract(&d), a.retract(&-d), *b, *b)
            } else {
                (*a, *a, b.retract(&d), b.retract(&-d))
            };
            fd[k] = (residual(&ap, &bp) - residual(&am, &bm)) / (2.0 * eps);
        }
        (analytic - fd).amax() / (1.0 + fd.amax())
    }

    #[test]
    fn p2p_and_dv_jacobians_match_finite_differences() {
        let mut r = rng(34);
        let w = FactorWeights::default();
        for _ in 0..100 {
            let ext = Extrinsic::new(exp_se3(&random_vec6(&mut r, 0.5)));
            let (a, b) = random_pair(&mut r);
            let tau = a.time + r.random_range(0.0..1.0) * (b.time - a.time);
            let state = interpolate(&a, &b, tau).unwrap();
            let q = random_vec3(&mut r, 30.0);
            let c = corr(q, random_vec3(&mut r, 30.0), random_vec3(&mut r, 1.0).normalize(), 0.8);
            let lin = p2p_linearize(&c, &state, &ext, &w);
            let rel = fd_check(
                |ka, kb| p2p_error(&c, &interpolate(ka, kb, tau).unwrap().pose, &ext),
                &lin.jacobian,
                &a,
                &b,
            );
            assert!(rel < 1e-5, "p2p rel {rel}");

            let pt = LidarPoint::new(q, tau, Some(r.random_range(-10.0..10.0)));
            let lin = dv_jacobian(&pt, &state, &ext, &w).unwrap();
            let rel = fd_check(
                |ka, kb| dv_error(&pt, &interpolate(ka, kb, tau).unwrap().twist, &ext).unwrap(),
                &lin.jacobian,
                &a,
                &b,
            );
            assert!(rel < 1e-5, "dv rel {rel}");
        }
    }

    #[test]
    fn dv_gradient_ignores_pose_only_perturbations() {
        // At a knot time the interpolated twist is the knot twist, so the
        // gradient w.r.t. that knot's pose block must vanish.
        let mut r = rng(35);
        let (a, b) = random_pair(&mut r);
        let state = interpolate(&a, &b, a.time).unwrap();
        let pt = LidarPoint::new(Vector3::new(4.0, 1.0, -2.0), a.time, Some(1.0));
        let lin = dv_jacobian(&pt, &state, &Extrinsic::default(), &FactorWeights::default()).unwrap();
        assert!(lin.jacobian.fixed_view::<1, 6>(0, 0).amax() == 0.0);
        assert!(lin.jacobian.fixed_view::<1, 12>(0, 12).amax() == 0.0);
    }

    #[test]
    fn dv_gradient_vanishes_along_rotation_about_ray() {
        let mut r = rng(36);
        let ext = Extrinsic::new(exp_se3(&random_vec6(&mut r, 0.5)));
        for _ in 0..100 {
            let q = HomogeneousPoint::from_xyz(random_vec3(&mut r, 30.0));
            let row = dv_projection(&q, &ext).unwrap();
            let dir = lidar_rotation_as_vehicle_twist(&random_vec3(&mut r, 1.0), &ext);
            assert!((row * dir)[0].abs() < 1e-12);
        }
    }
}
