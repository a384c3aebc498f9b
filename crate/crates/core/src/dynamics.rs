//! Control-affine robot models and their fixed-step integrator.
//!
//! Two systems share one state layout `(p, R, v, omega)`:
//! * the quadrotor, `p'' = g + R e3 F/m`, `omega' = J^-1 (tau - omega x J omega)`,
//!   `R' = [R omega]x R`, controlled by body torque and collective thrust;
//! * the double integrator, `p'' = a` with a world-frame acceleration command.
//!   Its attitude is a passive heading that never changes under the flow.
//!
//! States flatten to 18 numbers `(p, R row-major, v, omega)`; gradients of
//! scalar functions of the state use the same layout.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{project_to_so3, rot_z, skew};
use crate::scalar::Real;

pub const STATE_DIM: usize = 18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("integration produced a non-finite state")]
    NonFinite,
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct AgentState<T: Real> {
    pub position: Vector3<T>,
    pub rotation: Matrix3<T>,
    /// World frame.
    pub velocity: Vector3<T>,
    /// Body frame.
    pub angular_velocity: Vector3<T>,
}

impl<T: Real> AgentState<T> {
    pub fn at_rest(position: Vector3<T>, yaw: T) -> Self {
        Self { position, rotation: rot_z(yaw), velocity: Vector3::zeros(), angular_velocity: Vector3::zeros() }
    }

    /// A static point: identity attitude and zero twist.
    pub fn point(position: Vector3<T>) -> Self {
        Self::at_rest(position, T::zero())
    }

    pub fn to_array(&self) -> [T; STATE_DIM] {
        let mut out = [T::zero(); STATE_DIM];
        out[0..3].copy_from_slice(self.position.as_slice());
        for r in 0..3 {
            for c in 0..3 {
                out[3 + 3 * r + c] = self.rotation[(r, c)];
            }
        }
        out[12..15].copy_from_slice(self.velocity.as_slice());
        out[15..18].copy_from_slice(self.angular_velocity.as_slice());
        out
    }

    pub fn from_array(a: &[T; STATE_DIM]) -> Self {
        Self {
            position: Vector3::new(a[0], a[1], a[2]),
            rotation: Matrix3::new(a[3], a[4], a[5], a[6], a[7], a[8], a[9], a[10], a[11]),
            velocity: Vector3::new(a[12], a[13], a[14]),
            angular_velocity: Vector3::new(a[15], a[16], a[17]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    fn add_scaled(&self, d: &StateDot<T>, h: T) -> Self {
        Self {
            position: self.position + d.dp * h,
            rotation: self.rotation + d.dr * h,
            velocity: self.velocity + d.dv * h,
            angular_velocity: self.angular_velocity + d.domega * h,
        }
    }
}

/// Time derivative of an [`AgentState`] in the ambient coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateDot<T: Real> {
    pub dp: Vector3<T>,
    pub dr: Matrix3<T>,
    pub dv: Vector3<T>,
    pub domega: Vector3<T>,
}

impl<T: Real> StateDot<T> {
    pub fn zero() -> Self {
        Self { dp: Vector3::zeros(), dr: Matrix3::zeros(), dv: Vector3::zeros(), domega: Vector3::zeros() }
    }

    pub fn to_array(&self) -> [T; STATE_DIM] {
        AgentState { position: self.dp, rotation: self.dr, velocity: self.dv, angular_velocity: self.domega }
            .to_array()
    }

    fn axpy(&self, k: T, other: &Self) -> Self {
        Self {
            dp: self.dp + other.dp * k,
            dr: self.dr + other.dr * k,
            dv: self.dv + other.dv * k,
            domega: self.domega + other.domega * k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Quadrotor,
    DoubleIntegrator,
}

impl System {
    pub fn control_dim(self) -> usize {
        match self {
            System::Quadrotor => 4,
            System::DoubleIntegrator => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub enum Control<T: Real> {
    /// Body torque and collective thrust along the body z-axis.
    Quadrotor { torque: Vector3<T>, thrust: T },
    /// World-frame acceleration.
    Accel(Vector3<T>),
}

impl<T: Real> Control<T> {
    pub fn zero(system: System) -> Self {
        match system {
            System::Quadrotor => Control::Quadrotor { torque: Vector3::zeros(), thrust: T::zero() },
            System::DoubleIntegrator => Control::Accel(Vector3::zeros()),
        }
    }

    pub fn system(&self) -> System {
        match self {
            Control::Quadrotor { .. } => System::Quadrotor,
            Control::Accel(_) => System::DoubleIntegrator,
        }
    }

    /// `(tau, F)` for the quadrotor, `a` for the double integrator.
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            Control::Quadrotor { torque, thrust } => vec![torque.x, torque.y, torque.z, *thrust],
            Control::Accel(a) => vec![a.x, a.y, a.z],
        }
    }

    pub fn from_slice(system: System, u: &[T]) -> Self {
        assert_eq!(u.len(), system.control_dim(), "control length for {system:?}");
        match system {
            System::Quadrotor => Control::Quadrotor { torque: Vector3::new(u[0], u[1], u[2]), thrust: u[3] },
            System::DoubleIntegrator => Control::Accel(Vector3::new(u[0], u[1], u[2])),
        }
    }
}

/// Admissible control set of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub enum ControlBounds<T: Real> {
    /// Componentwise `lo <= u <= hi`.
    Box { lo: Vec<T>, hi: Vec<T> },
    /// `|(u0, u1)| <= radius` and `z_lo <= u2 <= z_hi`; invariant under
    /// rotations about z, which a box is not.
    Cylinder { radius: T, z_lo: T, z_hi: T },
}

impl<T: Real> ControlBounds<T> {
    pub fn dim(&self) -> usize {
        match self {
            ControlBounds::Box { lo, .. } => lo.len(),
            ControlBounds::Cylinder { .. } => 3,
        }
    }

    pub fn project(&self, u: &[T]) -> Vec<T> {
        match self {
            ControlBounds::Box { lo, hi } => {
                u.iter().zip(lo.iter().zip(hi)).map(|(&x, (&l, &h))| x.max(l).min(h)).collect()
            }
            ControlBounds::Cylinder { radius, z_lo, z_hi } => {
                let n = u[0].hypot(u[1]);
                let k = if n > *radius { *radius / n } else { T::one() };
                vec![u[0] * k, u[1] * k, u[2].max(*z_lo).min(*z_hi)]
            }
        }
    }

    pub fn contains(&self, u: &[T], tol: T) -> bool {
        match self {
            ControlBounds::Box { lo, hi } => {
                u.iter().zip(lo.iter().zip(hi)).all(|(&x, (&l, &h))| x >= l - tol && x <= h + tol)
            }
            ControlBounds::Cylinder { radius, z_lo, z_hi } => {
                u[0].hypot(u[1]) <= *radius + tol && u[2] >= *z_lo - tol && u[2] <= *z_hi + tol
            }
        }
    }

    /// Support function `sup_{u in set} <d, u>`.
    pub fn support(&self, d: &[T]) -> T {
        match self {
            ControlBounds::Box { lo, hi } => {
                d.iter().zip(lo.iter().zip(hi)).fold(T::zero(), |acc, (&x, (&l, &h))| acc + (x * l).max(x * h))
            }
            ControlBounds::Cylinder { radius, z_lo, z_hi } => {
                *radius * d[0].hypot(d[1]) + (d[2] * *z_lo).max(d[2] * *z_hi)
            }
        }
    }

    /// Half-width of the set along each component.
    pub fn half_range(&self) -> Vec<T> {
        match self {
            ControlBounds::Box { lo, hi } => lo.iter().zip(hi).map(|(&l, &h)| (h - l) / T::lit(2.0)).collect(),
            ControlBounds::Cylinder { radius, z_lo, z_hi } => {
                vec![*radius, *radius, (*z_hi - *z_lo) / T::lit(2.0)]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct ModelParams<T: Real> {
    pub system: System,
    pub mass: T,
    pub inertia: Matrix3<T>,
    pub gravity: Vector3<T>,
    pub dt: T,
    pub max_torque: T,
    pub max_thrust: T,
    /// Horizontal acceleration radius of the double integrator.
    pub max_accel: T,
    pub max_accel_z: T,
}

impl<T: Real> ModelParams<T> {
    pub fn quadrotor() -> Self {
        let mass = T::lit(0.1);
        Self {
            system: System::Quadrotor,
            mass,
            inertia: Matrix3::from_diagonal(&Vector3::new(T::lit(1.5e-4), T::lit(1.5e-4), T::lit(3e-4))),
            gravity: Vector3::new(T::zero(), T::zero(), T::lit(-9.81)),
            dt: T::lit(0.03),
            max_torque: T::lit(0.1),
            max_thrust: T::lit(2.0) * mass * T::lit(9.81),
            max_accel: T::lit(2.0),
            max_accel_z: T::lit(2.0),
        }
    }

    pub fn double_integrator() -> Self {
        Self { system: System::DoubleIntegrator, ..Self::quadrotor() }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidParams(m.to_string()));
        if !(self.mass > T::zero()) {
            return bad("mass must be positive");
        }
        if !(self.dt > T::zero()) {
            return bad("dt must be positive");
        }
        if (self.inertia - self.inertia.transpose()).abs().max() > T::lit(1e-12) {
            return bad("inertia must be symmetric");
        }
        if self.inertia.cholesky().is_none() {
            return bad("inertia must be positive definite");
        }
        if !(self.max_torque > T::zero() && self.max_thrust > T::zero()) {
            return bad("quadrotor control limits must be positive");
        }
        if !(self.max_accel > T::zero() && self.max_accel_z > T::zero()) {
            return bad("acceleration limits must be positive");
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.system.control_dim()
    }

    pub fn bounds(&self) -> ControlBounds<T> {
        match self.system {
            System::Quadrotor => {
                let t = self.max_torque;
                ControlBounds::Box { lo: vec![-t, -t, -t, T::zero()], hi: vec![t, t, t, self.max_thrust] }
            }
            System::DoubleIntegrator => {
                ControlBounds::Cylinder { radius: self.max_accel, z_lo: -self.max_accel_z, z_hi: self.max_accel_z }
            }
        }
    }

    pub fn hover(&self) -> Control<T> {
        match self.system {
            System::Quadrotor => Control::Quadrotor { torque: Vector3::zeros(), thrust: -self.gravity.z * self.mass },
            System::DoubleIntegrator => Control::Accel(Vector3::zeros()),
        }
    }

    /// Maps an unconstrained vector smoothly into the control set; the origin
    /// maps to the centre of the set.
    pub fn squash(&self, raw: &[T]) -> Control<T> {
        match self.system {
            System::Quadrotor => {
                let half = self.max_thrust / T::lit(2.0);
                Control::Quadrotor {
                    torque: Vector3::new(raw[0].tanh(), raw[1].tanh(), raw[2].tanh()) * self.max_torque,
                    thrust: half + half * raw[3].tanh(),
                }
            }
            System::DoubleIntegrator => {
                let n = (raw[0] * raw[0] + raw[1] * raw[1] + T::lit(SQUASH_EPS)).sqrt();
                let k = self.max_accel * n.tanh() / n;
                Control::Accel(Vector3::new(raw[0] * k, raw[1] * k, self.max_accel_z * raw[2].tanh()))
            }
        }
    }

    fn inertia_inv(&self) -> Matrix3<T> {
        self.inertia.try_inverse().expect("validated inertia")
    }

    /// Control-independent part of the vector field.
    pub fn drift(&self, x: &AgentState<T>) -> StateDot<T> {
        match self.system {
            System::Quadrotor => {
                let w = x.angular_velocity;
                StateDot {
                    dp: x.velocity,
                    dr: skew(&(x.rotation * w)) * x.rotation,
                    dv: self.gravity,
                    domega: self.inertia_inv() * (-w.cross(&(self.inertia * w))),
                }
            }
            System::DoubleIntegrator => StateDot { dp: x.velocity, ..StateDot::zero() },
        }
    }

    /// One vector field per control component: `f(x, u) = drift(x) + sum_k u_k actuation(x)[k]`.
    pub fn actuation(&self, x: &AgentState<T>) -> Vec<StateDot<T>> {
        match self.system {
            System::Quadrotor => {
                let jinv = self.inertia_inv();
                let mut cols: Vec<StateDot<T>> = (0..3)
                    .map(|k| StateDot { domega: jinv.column(k).into_owned(), ..StateDot::zero() })
                    .collect();
                cols.push(StateDot { dv: x.rotation.column(2) / self.mass, ..StateDot::zero() });
                cols
            }
            System::DoubleIntegrator => (0..3)
                .map(|k| {
                    let mut e = Vector3::zeros();
                    e[k] = T::one();
                    StateDot { dv: e, ..StateDot::zero() }
                })
                .collect(),
        }
    }

    pub fn derivative(&self, x: &AgentState<T>, u: &Control<T>) -> StateDot<T> {
        match (self.system, u) {
            (System::Quadrotor, Control::Quadrotor { torque, thrust }) => {
                let w = x.angular_velocity;
                StateDot {
                    dp: x.velocity,
                    dr: skew(&(x.rotation * w)) * x.rotation,
                    dv: self.gravity + x.rotation * Vector3::new(T::zero(), T::zero(), *thrust) / self.mass,
                    domega: self.inertia_inv() * (torque - w.cross(&(self.inertia * w))),
                }
            }
            (System::DoubleIntegrator, Control::Accel(a)) => {
                StateDot { dp: x.velocity, dr: Matrix3::zeros(), dv: *a, domega: Vector3::zeros() }
            }
            (system, u) => panic!("control {u:?} does not drive a {system:?}"),
        }
    }

    /// One RK4 step of length `dt` under zero-order-hold control, followed by
    /// re-projection of the attitude onto SO(3).
    pub fn step(&self, x: &AgentState<T>, u: &Control<T>) -> Result<AgentState<T>, DynamicsError> {
        let h = self.dt;
        let two = T::lit(2.0);
        let k1 = self.derivative(x, u);
        let k2 = self.derivative(&x.add_scaled(&k1, h / two), u);
        let k3 = self.derivative(&x.add_scaled(&k2, h / two), u);
        let k4 = self.derivative(&x.add_scaled(&k3, h), u);
        let incr = k1.axpy(two, &k2).axpy(two, &k3).axpy(T::one(), &k4);
        let mut next = x.add_scaled(&incr, h / T::lit(6.0));
        if !next.is_finite() {
            return Err(DynamicsError::NonFinite);
        }
        if self.system == System::Quadrotor {
            next.rotation = project_to_so3(&next.rotation);
        }
        Ok(next)
    }

    /// Translational plus rotational kinetic energy and gravitational potential.
    pub fn energy(&self, x: &AgentState<T>) -> T {
        let half = T::lit(0.5);
        half * self.mass * x.velocity.norm_squared() - self.mass * self.gravity.dot(&x.position)
            + half * x.angular_velocity.dot(&(self.inertia * x.angular_velocity))
    }
}

/// Regulariser inside the radial squashing norm.
pub const SQUASH_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> ModelParams<f64> {
        ModelParams::quadrotor()
    }

    #[test]
    fn hover_is_an_equilibrium_of_the_field() {
        let m = quad();
        let x = AgentState::at_rest(Vector3::new(0.3, 0.2, 1.0), 0.4);
        let d = m.derivative(&x, &m.hover());
        assert!(d.dv.norm() < 1e-15);
        assert!(d.domega.norm() < 1e-15);
    }

    #[test]
    fn zero_thrust_is_free_fall() {
        let m = quad();
        let x = AgentState::at_rest(Vector3::zeros(), 0.0);
        let d = m.derivative(&x, &Control::zero(System::Quadrotor));
        assert_eq!(d.dv, Vector3::new(0.0, 0.0, -9.81));
    }

    #[test]
    fn spin_about_a_principal_axis_of_isotropic_body_is_steady() {
        let mut m = quad();
        m.inertia = Matrix3::identity();
        let mut x = AgentState::at_rest(Vector3::zeros(), 0.0);
        x.angular_velocity = Vector3::new(0.0, 0.0, 1.0);
        let d = m.derivative(&x, &Control::zero(System::Quadrotor));
        assert_eq!(d.domega, Vector3::zeros());
    }

    #[test]
    fn hover_holds_for_100_steps() {
        let m = quad();
        let x0 = AgentState::at_rest(Vector3::new(1.0, 1.0, 1.0), 0.3);
        let mut x = x0;
        for _ in 0..100 {
            x = m.step(&x, &m.hover()).unwrap();
        }
        let diff = x.to_array().iter().zip(x0.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "drift {diff}");
    }

    #[test]
    fn free_fall_for_one_second() {
        let m = ModelParams { dt: 0.01, ..quad() };
        let mut x = AgentState::at_rest(Vector3::zeros(), 0.0);
        for _ in 0..100 {
            x = m.step(&x, &Control::zero(System::Quadrotor)).unwrap();
        }
        assert!((x.position.z + 4.905).abs() < 1e-6, "{}", x.position.z);
    }

    #[test]
    fn affine_split_reproduces_the_field() {
        let m = quad();
        let mut x = AgentState::at_rest(Vector3::new(0.1, 0.2, 0.3), 0.5);
        x.rotation = crate::liegroup::exp_so3(&Vector3::new(0.2, -0.1, 0.4));
        x.velocity = Vector3::new(0.3, -0.2, 0.1);
        x.angular_velocity = Vector3::new(1.0, -2.0, 0.5);
        let u = Control::Quadrotor { torque: Vector3::new(0.01, -0.03, 0.02), thrust: 0.7 };
        let full = m.derivative(&x, &u).to_array();
        let mut sum = m.drift(&x).to_array();
        for (col, uk) in m.actuation(&x).iter().zip(u.to_vec()) {
            for (s, c) in sum.iter_mut().zip(col.to_array()) {
                *s += uk * c;
            }
        }
        for (a, b) in full.iter().zip(sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_reported() {
        let m = quad();
        let mut x = AgentState::at_rest(Vector3::zeros(), 0.0);
        x.velocity.x = f64::NAN;
        assert_eq!(m.step(&x, &m.hover()), Err(DynamicsError::NonFinite));
    }

    #[test]
    fn squash_of_zero_is_the_set_centre() {
        let q = quad();
        match q.squash(&[0.0; 4]) {
            Control::Quadrotor { torque, thrust } => {
                assert_eq!(torque, Vector3::zeros());
                assert!((thrust - 0.981).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        let di = ModelParams::<f64>::double_integrator();
        assert_eq!(di.squash(&[0.0; 3]), Control::Accel(Vector3::zeros()));
        let big = di.squash(&[100.0, 100.0, -100.0]).to_vec();
        assert!(di.bounds().contains(&big, 1e-12));
    }

    #[test]
    fn cylinder_projection_and_support() {
        let c = ControlBounds::<f64>::Cylinder { radius: 2.0, z_lo: -1.0, z_hi: 1.0 };
        let p = c.project(&[3.0, 4.0, 5.0]);
        for (a, b) in p.iter().zip([1.2, 1.6, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((c.support(&[3.0, 4.0, -1.0]) - 11.0).abs() < 1e-12);
        let b = ControlBounds::<f64>::Box { lo: vec![-1.0, 0.0], hi: vec![2.0, 1.0] };
        assert_eq!(b.project(&[5.0, -3.0]), vec![2.0, 0.0]);
        assert!((b.support(&[-1.0, 1.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        let mut m = quad();
        assert!(m.validate().is_ok());
        m.inertia[(0, 1)] = 1.0;
        assert!(m.validate().is_err());
        let m = ModelParams { mass: 0.0, ..quad() };
        assert!(m.validate().is_err());
    }
}
