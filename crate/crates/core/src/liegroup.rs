//! The planar-rotation-plus-translation group `SE(2) x R` acting on rigid-body
//! states, together with the handful of `SO(3)` helpers the simulator needs.
//!
//! An element `(theta, lambda)` is the homogeneous transform
//! `[[Rz(theta), lambda], [0, 1]]`: a rotation about the world z-axis followed
//! by a translation. It is the largest subgroup of `SE(3)` that leaves gravity
//! untouched, so the quadrotor and double-integrator flows commute with it.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, Control};
use crate::scalar::Real;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle<T: Real>(theta: T) -> T {
    let two_pi = T::two_pi();
    let wrapped = theta - two_pi * ((theta + T::pi()) / two_pi).floor();
    // floor() can land exactly on +pi through rounding
    if wrapped >= T::pi() {
        wrapped - two_pi
    } else {
        wrapped
    }
}

/// Signed angular distance `a - b` wrapped into `[-pi, pi)`.
pub fn angle_diff<T: Real>(a: T, b: T) -> T {
    wrap_angle(a - b)
}

/// Rotation by `theta` about the world z-axis.
pub fn rot_z<T: Real>(theta: T) -> Matrix3<T> {
    let (s, c) = theta.sin_cos();
    let (z, o) = (T::zero(), T::one());
    Matrix3::new(c, -s, z, s, c, z, z, z, o)
}

pub fn skew<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -w.z, w.y, w.z, z, -w.x, -w.y, w.x, z)
}

pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula for the rotation `exp([w]x)`.
pub fn exp_so3<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let angle = w.norm();
    let k = skew(w);
    let (a, b) = if angle < T::lit(1e-8) {
        (T::one() - angle * angle / T::lit(6.0), T::lit(0.5) - angle * angle / T::lit(24.0))
    } else {
        (angle.sin() / angle, (T::one() - angle.cos()) / (angle * angle))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Nearest rotation in Frobenius norm (polar factor).
pub fn project_to_so3<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let mut r = u * v_t;
    if r.determinant() < T::zero() {
        let mut u = u;
        let flipped = -u.column(2);
        u.set_column(2, &flipped);
        r = u * v_t;
    }
    r
}

/// `R^T R = I` and `det R = 1` within `tol`.
pub fn is_rotation<T: Real>(r: &Matrix3<T>, tol: T) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    err <= tol && (r.determinant() - T::one()).abs() <= tol
}

/// Heading of a body frame: the angle of its first column projected on the
/// horizontal plane. When that column is vertical the second column is used
/// instead, so the result is defined for every rotation.
pub fn yaw_of<T: Real>(r: &Matrix3<T>) -> T {
    let (c0x, c0y) = (r[(0, 0)], r[(1, 0)]);
    if c0x.hypot(c0y) > T::lit(1e-9) {
        c0y.atan2(c0x)
    } else {
        // second column of Rz(psi) is (-sin psi, cos psi, 0)
        (-r[(0, 1)]).atan2(r[(1, 1)])
    }
}

/// Element of `SE(2) x R`: rotation `theta` about z, translation `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct GroupElement<T: Real> {
    theta: T,
    lambda: Vector3<T>,
}

impl<T: Real> Default for GroupElement<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> GroupElement<T> {
    pub fn new(theta: T, lambda: Vector3<T>) -> Self {
        Self { theta: wrap_angle(theta), lambda }
    }

    pub fn identity() -> Self {
        Self { theta: T::zero(), lambda: Vector3::zeros() }
    }

    pub fn rotation(theta: T) -> Self {
        Self::new(theta, Vector3::zeros())
    }

    pub fn translation(lambda: Vector3<T>) -> Self {
        Self::new(T::zero(), lambda)
    }

    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn lambda(&self) -> &Vector3<T> {
        &self.lambda
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        rot_z(self.theta)
    }

    /// Homogeneous 4x4 form.
    pub fn matrix(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.lambda);
        m
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(self.theta + other.theta, self.rotation_matrix() * other.lambda + self.lambda)
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.theta, -(rot_z(-self.theta) * self.lambda))
    }

    pub fn act_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation_matrix() * p + self.lambda
    }

    /// Rotates a free (world-frame) vector; translations do not apply.
    pub fn act_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation_matrix() * v
    }

    /// `p -> Rz p + lambda`, `R -> Rz R`, world velocity `v -> Rz v`; the
    /// body-frame angular rate is unchanged.
    pub fn act_state(&self, x: &AgentState<T>) -> AgentState<T> {
        let rz = self.rotation_matrix();
        AgentState {
            position: rz * x.position + self.lambda,
            rotation: rz * x.rotation,
            velocity: rz * x.velocity,
            angular_velocity: x.angular_velocity,
        }
    }

    /// Body-frame torque and thrust are frame-attached and pass through;
    /// a world-frame acceleration command rotates.
    pub fn act_control(&self, u: &Control<T>) -> Control<T> {
        match u {
            Control::Quadrotor { .. } => *u,
            Control::Accel(a) => Control::Accel(self.rotation_matrix() * a),
        }
    }

    /// Largest componentwise deviation from `other`, comparing angles modulo 2pi.
    pub fn distance(&self, other: &Self) -> T {
        let dt = angle_diff(self.theta, other.theta).abs();
        dt.max((self.lambda - other.lambda).abs().max())
    }
}

/// The group element carried by a state: its heading and its position.
/// Acting with its inverse moves the state to the origin with zero heading.
pub fn frame_of<T: Real>(x: &AgentState<T>) -> GroupElement<T> {
    GroupElement::new(yaw_of(&x.rotation), x.position)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn quarter_turns_wrap_to_minus_pi() {
        let q = GroupElement::<f64>::rotation(FRAC_PI_2);
        let g = q.compose(&q);
        assert_eq!(g.theta(), -PI);
        assert_eq!(g.lambda(), &Vector3::zeros());
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((wrap_angle(-0.25f64) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn quarter_turn_moves_x_to_y() {
        let g = GroupElement::<f64>::rotation(FRAC_PI_2);
        let x = AgentState::at_rest(Vector3::new(1.0, 0.0, 0.0), 0.0);
        let y = g.act_state(&x);
        assert!((y.position - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn frame_of_constructed_state() {
        let x = AgentState::<f64>::at_rest(Vector3::new(1.0, 2.0, 3.0), 0.7);
        let f = frame_of(&x);
        assert!((f.theta() - 0.7).abs() < 1e-15);
        assert_eq!(f.lambda(), &Vector3::new(1.0, 2.0, 3.0));
        let origin = AgentState::<f64>::at_rest(Vector3::zeros(), 0.0);
        assert_eq!(frame_of(&origin), GroupElement::identity());
    }

    #[test]
    fn yaw_survives_vertical_first_column() {
        // body x-axis pointing straight up, heading carried by the y-axis
        let r = rot_z(0.4) * exp_so3(&Vector3::new(0.0, -FRAC_PI_2, 0.0));
        assert!(r[(0, 0)].hypot(r[(1, 0)]) < 1e-12);
        assert!((yaw_of(&r) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn projection_restores_orthonormality() {
        let r = exp_so3(&Vector3::new(0.3, -0.2, 1.1));
        let noisy = r + Matrix3::new(1e-4, 0.0, 2e-4, 0.0, -1e-4, 0.0, 3e-5, 0.0, 0.0);
        let p = project_to_so3(&noisy);
        assert!(is_rotation(&p, 1e-12));
        assert!((p - r).abs().max() < 1e-3);
    }

    #[test]
    fn double_integrator_control_rotates() {
        let g = GroupElement::<f64>::rotation(PI);
        let u = g.act_control(&Control::Accel(Vector3::new(1.0, 0.0, 0.0)));
        match u {
            Control::Accel(a) => assert!((a - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn quadrotor_control_is_frame_attached() {
        let g = GroupElement::new(1.3, Vector3::new(0.5, -2.0, 1.0));
        let u = Control::Quadrotor { torque: Vector3::new(0.01, -0.02, 0.03), thrust: 0.9 };
        assert_eq!(g.act_control(&u), u);
    }

    #[test]
    fn works_in_single_precision() {
        let g = GroupElement::<f32>::new(0.5, Vector3::new(1.0, 2.0, 3.0));
        let e = g.compose(&g.inverse());
        assert!(e.distance(&GroupElement::identity()) < 1e-6);
    }
}
