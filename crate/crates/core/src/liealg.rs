//! SE(3) kernel.
//!
//! Tangent vectors are ordered `[rho; phi]` (translation first, rotation
//! second) so a twist vector reads `[nu; omega]`. Perturbations are applied on
//! the left: `T <- exp(delta^) * T`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x6, Matrix6, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::LieError;

/// Below this rotation angle the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Principal-branch guard for `log`: angles closer than this to pi are refused.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Rigid transform stored as rotation matrix plus translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Projects the rotation back onto SO(3) (polar decomposition). Used after
    /// long chains of compositions.
    pub fn normalized(&self) -> Pose {
        Pose {
            rotation: project_to_so3(&self.rotation),
            translation: self.translation,
        }
    }

    /// Largest deviation of `R^T R` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Body-centric velocity `[nu; omega]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub nu: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(nu: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { nu, omega }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            nu: v.fixed_rows::<3>(0).into_owned(),
            omega: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.nu);
        v.fixed_rows_mut::<3>(3).copy_from(&self.omega);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.nu.iter().chain(self.omega.iter()).all(|v| v.is_finite())
    }
}

/// A measured or map point with implicit homogeneous coordinate `w = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousPoint {
    pub xyz: Vector3<f64>,
}

impl HomogeneousPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            xyz: Vector3::new(x, y, z),
        }
    }

    pub fn from_xyz(xyz: Vector3<f64>) -> Self {
        Self { xyz }
    }

    pub fn w(&self) -> f64 {
        1.0
    }

    pub fn to_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.xyz.x, self.xyz.y, self.xyz.z, 1.0)
    }
}

/// `D = [I | 0]`, drops the homogeneous coordinate.
pub fn projection_d() -> Matrix3x4<f64> {
    Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn split(xi: &Vector6<f64>) -> (Vector3<f64>, Vector3<f64>) {
    (
        xi.fixed_rows::<3>(0).into_owned(),
        xi.fixed_rows::<3>(3).into_owned(),
    )
}

fn join(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Vector6<f64> {
    let mut v = Vector6::zeros();
    v.fixed_rows_mut::<3>(0).copy_from(rho);
    v.fixed_rows_mut::<3>(3).copy_from(phi);
    v
}

/// The `^` operator on se(3): 6-vector to 4x4 matrix.
pub fn hat(xi: &Vector6<f64>) -> Matrix4<f64> {
    let (rho, phi) = split(xi);
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&phi));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&rho);
    m
}

pub fn vee(m: &Matrix4<f64>) -> Vector6<f64> {
    let rho = m.fixed_view::<3, 1>(0, 3).into_owned();
    let phi = unskew(&m.fixed_view::<3, 3>(0, 0).into_owned());
    join(&rho, &phi)
}

/// The adjoint of the algebra, `xi^⋏ = [[phi^, rho^], [0, phi^]]`.
pub fn curly_hat(xi: &Vector6<f64>) -> Matrix6<f64> {
    let (rho, phi) = split(xi);
    let pw = skew(&phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&pw);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&rho));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&pw);
    m
}

/// `q^⊙` such that `odot(q) * xi == hat(xi) * q` for `q.w == 1`.
pub fn odot(q: &HomogeneousPoint) -> Matrix4x6<f64> {
    let mut m = Matrix4x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&q.xyz)));
    m
}

pub fn adjoint(t: &Pose) -> Matrix6<f64> {
    let r = t.rotation;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&t.translation) * r));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m
}

pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + w * a + w * w * b
}

/// Rotation angle of `r` in `[0, pi]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * unskew(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>, LieError> {
    let theta = rotation_angle(r);
    if theta > PI - NEAR_PI_MARGIN {
        return Err(LieError::AngleNearPi { angle: theta });
    }
    let axis_scaled = unskew(&(r - r.transpose()));
    let k = if theta < SMALL_ANGLE {
        0.5 * (1.0 + theta * theta / 6.0)
    } else {
        theta / (2.0 * theta.sin())
    };
    Ok(axis_scaled * k)
}

pub fn left_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * a + w * w * b
}

pub fn left_jacobian_inv_so3(phi: &Vector3<f64>) -> Result<Matrix3<f64>, LieError> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    if theta > PI - NEAR_PI_MARGIN {
        return Err(LieError::AngleNearPi { angle: theta });
    }
    let w = skew(phi);
    let b = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Ok(Matrix3::identity() - w * 0.5 + w * w * b)
}

/// Off-diagonal block `Q(rho, phi)` of the SE(3) left Jacobian.
fn q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (c1, c2, c3) = if theta < 1e-3 {
        // Cancellation in the closed forms is severe here; the series is exact to
        // double precision for these angles.
        (
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
            -1.0 / 24.0 + theta2 / 720.0 - theta2 * theta2 / 40320.0,
            -1.0 / 120.0 + theta2 / 5040.0 - theta2 * theta2 / 362880.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        (
            (theta - s) / t3,
            (1.0 - theta2 / 2.0 - c) / (theta2 * theta2),
            (theta - s - t3 / 6.0) / (t3 * theta2),
        )
    };
    let rx = skew(rho);
    let px = skew(phi);
    let pr = px * rx;
    let rp = rx * px;
    let prp = pr * px;
    let ppr = px * pr;
    let rpp = rp * px;
    rx * 0.5 + (pr + rp + prp) * c1 - (ppr + rpp - prp * 3.0) * c2
        - (prp * px + px * prp) * (0.5 * (c2 - 3.0 * c3))
}

pub fn exp_se3(xi: &Vector6<f64>) -> Pose {
    let (rho, phi) = split(xi);
    Pose {
        rotation: exp_so3(&phi),
        translation: left_jacobian_so3(&phi) * rho,
    }
}

pub fn log_se3(t: &Pose) -> Result<Vector6<f64>, LieError> {
    let phi = log_so3(&t.rotation)?;
    let rho = left_jacobian_inv_so3(&phi)? * t.translation;
    Ok(join(&rho, &phi))
}

pub fn left_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    let (rho, phi) = split(xi);
    let j = left_jacobian_so3(&phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q_block(&rho, &phi));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m
}

pub fn left_jacobian_inv(xi: &Vector6<f64>) -> Result<Matrix6<f64>, LieError> {
    let (rho, phi) = split(xi);
    let ji = left_jacobian_inv_so3(&phi)?;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(ji * q_block(&rho, &phi) * ji)));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    Ok(m)
}

/// Projects a near-rotation onto SO(3) via SVD.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

const SERIES_TERMS: usize = 96;

fn left_jacobian_coeffs() -> &'static [f64; SERIES_TERMS] {
    static C: OnceLock<[f64; SERIES_TERMS]> = OnceLock::new();
    C.get_or_init(|| {
        let mut c = [0.0; SERIES_TERMS];
        let mut fact = 1.0;
        for (n, slot) in c.iter_mut().enumerate() {
            fact *= (n + 1) as f64;
            *slot = 1.0 / fact;
        }
        c
    })
}

/// `B_n / n!` with `B_1 = -1/2`, via `B_2k/(2k)! = (-1)^(k+1) 2 zeta(2k) / (2 pi)^(2k)`.
fn left_jacobian_inv_coeffs() -> &'static [f64; SERIES_TERMS] {
    static C: OnceLock<[f64; SERIES_TERMS]> = OnceLock::new();
    C.get_or_init(|| {
        let mut c = [0.0; SERIES_TERMS];
        c[0] = 1.0;
        c[1] = -0.5;
        let two_pi = 2.0 * PI;
        for n in (2..SERIES_TERMS).step_by(2) {
            let k = n / 2;
            let zeta = match k {
                1 => PI * PI / 6.0,
                2 => PI.powi(4) / 90.0,
                3 => PI.powi(6) / 945.0,
                4 => PI.powi(8) / 9450.0,
                _ => (1..2000).map(|m| (m as f64).powi(-(n as i32))).sum::<f64>(),
            };
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            c[n] = sign * 2.0 * zeta / two_pi.powi(n as i32);
        }
        c
    })
}

fn ad_series_with_derivative(
    xi: &Vector6<f64>,
    v: &Vector6<f64>,
    coeffs: &[f64; SERIES_TERMS],
) -> (Vector6<f64>, Matrix6<f64>) {
    let a = curly_hat(xi);
    let mut vn = *v;
    let mut dn = Matrix6::<f64>::zeros();
    let mut out = *v * coeffs[0];
    let mut dout = Matrix6::<f64>::zeros();
    let scale = 1.0 + v.norm();
    for n in 1..SERIES_TERMS {
        // d(ad(xi)^n v)/dxi = ad(xi) * d(ad^(n-1) v) - ad(ad^(n-1) v)
        dn = a * dn - curly_hat(&vn);
        vn = a * vn;
        let c = coeffs[n];
        if c != 0.0 {
            out += vn * c;
            dout += dn * c;
        }
        let bound = coeffs[n..SERIES_TERMS.min(n + 3)]
            .iter()
            .fold(0.0f64, |m, c| m.max(c.abs()));
        let mag = vn.amax().max(dn.amax());
        if n >= 2 && (mag == 0.0 || bound * mag < 1e-18 * scale) {
            break;
        }
    }
    (out, dout)
}

/// `J(xi) * v` and its derivative with respect to `xi`.
pub fn left_jacobian_apply_with_derivative(
    xi: &Vector6<f64>,
    v: &Vector6<f64>,
) -> (Vector6<f64>, Matrix6<f64>) {
    ad_series_with_derivative(xi, v, left_jacobian_coeffs())
}

/// `J^{-1}(xi) * v` and its derivative with respect to `xi`.
pub fn left_jacobian_inv_apply_with_derivative(
    xi: &Vector6<f64>,
    v: &Vector6<f64>,
) -> Result<(Vector6<f64>, Matrix6<f64>), LieError> {
    let angle = xi.fixed_rows::<3>(3).norm();
    if angle > PI - NEAR_PI_MARGIN {
        return Err(LieError::AngleNearPi { angle });
    }
    Ok(ad_series_with_derivative(xi, v, left_jacobian_inv_coeffs()))
}
