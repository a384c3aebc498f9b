//! Barrier-function machinery: constraint values, goal-reaching nominal
//! controllers, the min-norm CBF-QP and distance-based baseline barriers.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, Control, ControlBounds, ModelParams, System, STATE_DIM};
use crate::egformer::{EgoGradient, NetParams};
use crate::graph::GraphSnapshot;
use crate::liegroup::{vee, yaw_of};
use crate::world::{Obstacle, WorldConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafeCtrlError {
    #[error("no control given for agent {0}")]
    MissingControl(usize),
}

/// Extended class-K function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassK {
    Linear(f64),
}

impl Default for ClassK {
    fn default() -> Self {
        ClassK::Linear(1.0)
    }
}

impl ClassK {
    pub fn apply(&self, h: f64) -> f64 {
        match self {
            ClassK::Linear(k) => k * h,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NominalGains {
    pub kp: f64,
    pub kd: f64,
    /// Position errors longer than this are shortened, which caps cruise speed
    /// at about `kp * max_error / kd`.
    pub max_error: f64,
    /// Quadrotor outer-loop acceleration limit.
    pub max_accel: f64,
    pub k_rot: f64,
    pub k_rate: f64,
}

impl Default for NominalGains {
    fn default() -> Self {
        Self { kp: 2.0, kd: 2.8, max_error: 1.0, max_accel: 3.0, k_rot: 0.015, k_rate: 0.0024 }
    }
}

fn clip_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Goal-reaching controller without safety awareness. Both laws commute with
/// rotations about z and translations.
pub fn nominal_control(model: &ModelParams<f64>, gains: &NominalGains, x: &AgentState<f64>, target: &Vector3<f64>) -> Control<f64> {
    let accel = -gains.kp * clip_norm(x.position - target, gains.max_error) - gains.kd * x.velocity;
    match model.system {
        System::DoubleIntegrator => Control::from_slice(model.system, &model.bounds().project(accel.as_slice())),
        System::Quadrotor => {
            let a_d = clip_norm(accel, gains.max_accel);
            let force = (a_d - model.gravity) * model.mass;
            let r = x.rotation;
            let thrust = force.dot(&r.column(2)).clamp(0.0, model.max_thrust);
            // the current heading is the yaw reference
            let rd = desired_attitude(&force, yaw_of(&r));
            let e_r = vee(&(rd.transpose() * r - r.transpose() * rd)) * 0.5;
            let w = x.angular_velocity;
            let torque = -gains.k_rot * e_r - gains.k_rate * w + w.cross(&(model.inertia * w));
            let u = Control::Quadrotor { torque, thrust }.to_vec();
            Control::from_slice(model.system, &model.bounds().project(&u))
        }
    }
}

/// `sum_j <dh_i/dx_j, f(x_j, u_j)> + alpha(h_i)` for every ego; static nodes do not move.
pub fn cbf_constraint_value(
    grads: &[EgoGradient],
    graph: &GraphSnapshot,
    controls: &[Control<f64>],
    model: &ModelParams<f64>,
    alpha: ClassK,
) -> Result<Vec<f64>, SafeCtrlError> {
    grads
        .iter()
        .map(|eg| {
            let mut hdot = 0.0;
            for (id, g) in &eg.grads {
                if *id >= graph.num_agents {
                    continue;
                }
                let u = controls.get(*id).ok_or(SafeCtrlError::MissingControl(*id))?;
                let f = model.derivative(&graph.nodes[*id].state, u).to_array();
                hdot += g.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok(hdot + alpha.apply(eg.h))
        })
        .collect()
}

/// `min sum_i |u_i - u_nom,i|^2` subject to `A u >= b` and `u_i` in its set.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub u_nom: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// One set per block of `block` consecutive variables.
    pub sets: Vec<ControlBounds<f64>>,
    pub block: usize,
}

impl QpProblem {
    pub fn new(u_nom: Vec<f64>, rows: Vec<(Vec<f64>, f64)>, sets: Vec<ControlBounds<f64>>, block: usize) -> Self {
        let n = u_nom.len();
        assert_eq!(n, sets.len() * block, "one set per block");
        let m = rows.len();
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        for (i, (row, bi)) in rows.into_iter().enumerate() {
            assert_eq!(row.len(), n, "row length");
            a.row_mut(i).copy_from_slice(&row);
            b[i] = bi;
        }
        Self { u_nom: DVector::from_vec(u_nom), a, b, sets, block }
    }

    pub fn num_vars(&self) -> usize {
        self.u_nom.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn project_to_sets(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = u.clone();
        for (k, s) in self.sets.iter().enumerate() {
            let r = k * self.block..(k + 1) * self.block;
            let p = s.project(&u.as_slice()[r.clone()]);
            out.as_mut_slice()[r].copy_from_slice(&p);
        }
        out
    }

    pub fn in_sets(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.sets.iter().enumerate().all(|(k, s)| s.contains(&u.as_slice()[k * self.block..(k + 1) * self.block], tol))
    }

    /// Largest row violation `max(b - A u, 0)`.
    pub fn row_violation(&self, u: &DVector<f64>) -> f64 {
        (&self.b - &self.a * u).iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        (u - &self.u_nom).norm_squared()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Solved,
    Infeasible,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
    /// Row multipliers, `>= 0`.
    pub lambda: DVector<f64>,
    /// Normal-cone multiplier of the control sets.
    pub y_set: DVector<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub relaxation: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { rho: 1.0, sigma: 1e-6, relaxation: 1.6, eps: 1e-10, max_iter: 10_000, polish: true }
    }
}

/// Operator splitting on `z = [A u; u]` constrained to `[b, inf) x U`.
pub fn solve_qp(p: &QpProblem, s: &QpSettings) -> QpSolution {
    let (n, m) = (p.num_vars(), p.num_rows());
    let feasible_nominal = p.in_sets(&p.u_nom, 0.0) && p.row_violation(&p.u_nom) <= 0.0;
    if m == 0 || feasible_nominal {
        let u = if feasible_nominal { p.u_nom.clone() } else { p.project_to_sets(&p.u_nom) };
        let y_set = &p.u_nom - &u;
        return QpSolution {
            u,
            status: QpStatus::Solved,
            iterations: 0,
            polished: false,
            lambda: DVector::zeros(m),
            y_set,
            primal_residual: 0.0,
            dual_residual: 0.0,
        };
    }

    let rho = s.rho;
    let mut kkt = p.a.transpose() * &p.a * rho;
    for i in 0..n {
        kkt[(i, i)] += 1.0 + s.sigma + rho;
    }
    let chol = kkt.cholesky().expect("positive definite by construction");
    let mul_m = |u: &DVector<f64>| -> (DVector<f64>, DVector<f64>) { (&p.a * u, u.clone()) };
    let project = |zr: &DVector<f64>, zu: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        (zr.zip_map(&p.b, |z, b| z.max(b)), p.project_to_sets(zu))
    };

    let mut x = p.project_to_sets(&p.u_nom);
    let (mut zr, mut zu) = project(&(&p.a * &x), &x);
    let mut yr = DVector::<f64>::zeros(m);
    let mut yu = DVector::<f64>::zeros(n);
    let mut best = (f64::INFINITY, x.clone());
    let mut status = QpStatus::MaxIterations;
    let mut iterations = s.max_iter;
    let (mut r_prim, mut r_dual) = (f64::INFINITY, f64::INFINITY);

    for it in 1..=s.max_iter {
        let rhs = &x * s.sigma + &p.u_nom + p.a.transpose() * (&zr * rho - &yr) + (&zu * rho - &yu);
        let xt = chol.solve(&rhs);
        let (ztr, ztu) = mul_m(&xt);
        let a = s.relaxation;
        x = &xt * a + &x * (1.0 - a);
        let zr_hat = &ztr * a + &zr * (1.0 - a);
        let zu_hat = &ztu * a + &zu * (1.0 - a);
        let (zr_new, zu_new) = project(&(&zr_hat + &yr / rho), &(&zu_hat + &yu / rho));
        let dyr = (&zr_hat - &zr_new) * rho;
        let dyu = (&zu_hat - &zu_new) * rho;
        yr += &dyr;
        yu += &dyu;
        zr = zr_new;
        zu = zu_new;

        let xp = p.project_to_sets(&x);
        let viol = p.row_violation(&xp);
        if viol < best.0 {
            best = (viol, xp);
        }

        let (mr, mu) = mul_m(&x);
        r_prim = (&mr - &zr).amax().max((&mu - &zu).amax());
        r_dual = (&x - &p.u_nom + p.a.transpose() * &yr + &yu).amax();
        let scale_p = 1.0 + mr.amax().max(zr.amax()).max(x.amax());
        let scale_d = 1.0 + p.u_nom.amax().max(yr.amax()).max(yu.amax());
        if r_prim <= s.eps * scale_p && r_dual <= s.eps * scale_d {
            status = QpStatus::Solved;
            iterations = it;
            break;
        }
        if it % 10 == 0 && infeasibility_certificate(p, &dyr, &dyu) {
            status = QpStatus::Infeasible;
            iterations = it;
            break;
        }
    }

    if status == QpStatus::Infeasible {
        log::debug!("safety QP infeasible; returning least-violating control (violation {:.3e})", best.0);
        return QpSolution {
            u: best.1,
            status,
            iterations,
            polished: false,
            lambda: DVector::zeros(m),
            y_set: DVector::zeros(n),
            primal_residual: r_prim,
            dual_residual: r_dual,
        };
    }

    let mut sol = QpSolution {
        u: p.project_to_sets(&x),
        status,
        iterations,
        polished: false,
        lambda: -yr.map(|v| v.min(0.0)),
        y_set: yu,
        primal_residual: r_prim,
        dual_residual: r_dual,
    };
    if s.polish {
        if let Some(polished) = polish(p, &sol) {
            sol = polished;
        }
    }
    if sol.status == QpStatus::MaxIterations && p.row_violation(&sol.u) > 1e-6 {
        log::debug!("safety QP hit the iteration cap with violation {:.3e}", p.row_violation(&sol.u));
    }
    sol
}

/// `dy` certifies primal infeasibility when `M^T dy ~ 0` and the support of
/// the constraint set in direction `dy` is negative.
fn infeasibility_certificate(p: &QpProblem, dyr: &DVector<f64>, dyu: &DVector<f64>) -> bool {
    let norm = dyr.amax().max(dyu.amax());
    if norm < 1e-12 {
        return false;
    }
    let tol = 1e-9 * norm;
    if dyr.iter().any(|&v| v > tol) {
        return false;
    }
    if (p.a.transpose() * dyr + dyu).amax() > tol {
        return false;
    }
    let mut support: f64 = dyr.iter().zip(p.b.iter()).map(|(y, b)| y * b).sum();
    for (k, set) in p.sets.iter().enumerate() {
        support += set.support(&dyu.as_slice()[k * p.block..(k + 1) * p.block]);
    }
    support < -tol
}

/// Exact equality-constrained re-solve on the active set guessed by ADMM.
/// Only box sets are handled; curved sets keep the ADMM iterate.
fn polish(p: &QpProblem, sol: &QpSolution) -> Option<QpSolution> {
    let n = p.num_vars();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut kinds: Vec<Option<usize>> = Vec::new();
    let tol = 1e-7;
    let slack = &p.a * &sol.u - &p.b;
    for i in 0..p.num_rows() {
        if sol.lambda[i] > tol || slack[i].abs() < tol {
            rows.push((p.a.row(i).transpose(), p.b[i]));
            kinds.push(Some(i));
        }
    }
    let mut fixed = Vec::new();
    for (k, set) in p.sets.iter().enumerate() {
        let ControlBounds::Box { lo, hi } = set else { return None };
        for c in 0..p.block {
            let idx = k * p.block + c;
            let bound = if (sol.u[idx] - lo[c]).abs() < tol {
                lo[c]
            } else if (sol.u[idx] - hi[c]).abs() < tol {
                hi[c]
            } else {
                continue;
            };
            let mut e = DVector::zeros(n);
            e[idx] = 1.0;
            rows.push((e, bound));
            kinds.push(None);
            fixed.push(idx);
        }
    }
    let k = rows.len();
    let u = if k == 0 {
        p.u_nom.clone()
    } else {
        let mut e = DMatrix::zeros(k, n);
        let mut rhs = DVector::zeros(k);
        for (r, (row, v)) in rows.iter().enumerate() {
            e.row_mut(r).copy_from(&row.transpose());
            rhs[r] = v - row.dot(&p.u_nom);
        }
        let mut gram = &e * e.transpose();
        for i in 0..k {
            gram[(i, i)] += 1e-12;
        }
        let nu = gram.lu().solve(&rhs)?;
        let u = &p.u_nom + e.transpose() * &nu;
        let mut lambda = DVector::zeros(p.num_rows());
        let mut y_set = DVector::zeros(n);
        let mut fi = 0;
        for (r, kind) in kinds.iter().enumerate() {
            match kind {
                Some(i) => lambda[*i] = nu[r],
                None => {
                    y_set[fixed[fi]] = -nu[r];
                    fi += 1;
                }
            }
        }
        let ok_dual = lambda.iter().all(|&l| l >= -1e-9)
            && fixed.iter().all(|&idx| {
                let (lo, hi) = set_bounds(p, idx);
                let y = y_set[idx];
                ((u[idx] - lo).abs() < 1e-9 && y <= 1e-9) || ((u[idx] - hi).abs() < 1e-9 && y >= -1e-9)
            });
        if !ok_dual || p.row_violation(&u) > 1e-9 || !p.in_sets(&u, 1e-9) {
            return None;
        }
        let u = p.project_to_sets(&u);
        return Some(QpSolution { u, lambda, y_set, polished: true, status: QpStatus::Solved, ..sol.clone() });
    };
    if p.row_violation(&u) > 1e-9 || !p.in_sets(&u, 1e-9) {
        return None;
    }
    Some(QpSolution {
        u,
        lambda: DVector::zeros(p.num_rows()),
        y_set: DVector::zeros(n),
        polished: true,
        status: QpStatus::Solved,
        ..sol.clone()
    })
}

fn set_bounds(p: &QpProblem, idx: usize) -> (f64, f64) {
    match &p.sets[idx / p.block] {
        ControlBounds::Box { lo, hi } => (lo[idx % p.block], hi[idx % p.block]),
        ControlBounds::Cylinder { .. } => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

/// Residuals of the optimality conditions
/// `u - u_nom - A^T lambda + y_set = 0`, `lambda >= 0`, `A u >= b`,
/// `lambda_i (A u - b)_i = 0`, `u in U`, `y_set in N_U(u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> KktReport {
    let u = &sol.u;
    let stationarity = (u - &p.u_nom - p.a.transpose() * &sol.lambda + &sol.y_set).amax();
    let slack = &p.a * u - &p.b;
    let mut primal = slack.iter().fold(0.0f64, |m, &v| m.max(-v));
    let proj = p.project_to_sets(u);
    primal = primal.max((u - proj).amax());
    let dual = sol.lambda.iter().fold(0.0f64, |m, &l| m.max(-l));
    let mut complementarity = sol.lambda.iter().zip(slack.iter()).fold(0.0f64, |m, (l, s)| m.max((l * s).abs()));
    for (k, set) in p.sets.iter().enumerate() {
        let r = k * p.block..(k + 1) * p.block;
        let y = &sol.y_set.as_slice()[r.clone()];
        let yu: f64 = y.iter().zip(&u.as_slice()[r]).map(|(a, b)| a * b).sum();
        complementarity = complementarity.max((set.support(y) - yu).abs());
    }
    KktReport { stationarity, primal, dual, complementarity }
}

/// Control-affine constraint rows `a_i . u >= b_i` of every ego's barrier.
pub fn learned_constraint_rows(
    grads: &[EgoGradient],
    graph: &GraphSnapshot,
    model: &ModelParams<f64>,
    alpha: ClassK,
    margin: f64,
) -> Vec<(Vec<f64>, f64)> {
    let m = model.control_dim();
    let n = graph.num_agents;
    grads
        .iter()
        .map(|eg| {
            let mut row = vec![0.0; n * m];
            let mut b = -alpha.apply(eg.h) + margin;
            for (id, g) in &eg.grads {
                if *id >= n {
                    continue;
                }
                let x = &graph.nodes[*id].state;
                b -= dot18(g, &model.drift(x).to_array());
                for (k, col) in model.actuation(x).iter().enumerate() {
                    row[id * m + k] += dot18(g, &col.to_array());
                }
            }
            (row, b)
        })
        .collect()
}

fn dot18(a: &[f64; STATE_DIM], b: &[f64; STATE_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Centralized min-norm filter of the nominal controls through the learned barrier.
pub fn learned_qp(
    params: &NetParams,
    graph: &GraphSnapshot,
    model: &ModelParams<f64>,
    u_nom: &[Control<f64>],
    alpha: ClassK,
    margin: f64,
) -> QpProblem {
    let grads = crate::egformer::cbf_input_gradients(params, graph);
    let rows = learned_constraint_rows(&grads, graph, model, alpha, margin);
    let flat = u_nom.iter().flat_map(|u| u.to_vec()).collect();
    QpProblem::new(flat, rows, vec![model.bounds(); graph.num_agents], model.control_dim())
}

pub fn split_controls(system: System, u: &DVector<f64>) -> Vec<Control<f64>> {
    u.as_slice().chunks(system.control_dim()).map(|c| Control::from_slice(system, c)).collect()
}

/// Velocity-augmented distance barrier for double integrators:
/// `h = |dp|^2 - r^2 + c (dp . dv) / |dp|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandcraftedCbf {
    pub c: f64,
    /// Added to the safety radius and to obstacle radii.
    pub margin: f64,
    pub alpha: ClassK,
}

impl Default for HandcraftedCbf {
    fn default() -> Self {
        Self { c: 0.2, margin: 0.02, alpha: ClassK::Linear(2.0) }
    }
}

/// Distances below this are clamped in denominators.
pub const MIN_SEPARATION: f64 = 1e-9;

impl HandcraftedCbf {
    pub fn value(&self, dp: &Vector3<f64>, dv: &Vector3<f64>, r: f64) -> f64 {
        let d = dp.norm().max(MIN_SEPARATION);
        dp.norm_squared() - r * r + self.c * dp.dot(dv) / d
    }

    /// `(dh/d dp, dh/d dv)`.
    pub fn gradient(&self, dp: &Vector3<f64>, dv: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let d = dp.norm().max(MIN_SEPARATION);
        let s = dp.dot(dv);
        (dp * 2.0 + (dv / d - dp * (s / d.powi(3))) * self.c, dp * (self.c / d))
    }

    /// Time derivative along relative acceleration `da`.
    pub fn derivative(&self, dp: &Vector3<f64>, dv: &Vector3<f64>, da: &Vector3<f64>) -> f64 {
        let (gp, gv) = self.gradient(dp, dv);
        gp.dot(dv) + gv.dot(da)
    }

    /// Row of `hdot + alpha h >= 0` in the relative acceleration: `(coef, rhs)`
    /// with `coef . da >= rhs`.
    fn pair_row(&self, dp: &Vector3<f64>, dv: &Vector3<f64>, r: f64) -> (Vector3<f64>, f64) {
        let (gp, gv) = self.gradient(dp, dv);
        (gv, -self.alpha.apply(self.value(dp, dv, r)) - gp.dot(dv))
    }

    fn obstacles_near<'a>(x: &'a AgentState<f64>, obstacles: &'a [Obstacle], cfg: &'a WorldConfig) -> impl Iterator<Item = &'a Obstacle> {
        obstacles.iter().filter(move |o| o.surface_distance(&x.position) <= cfg.sensing_range)
    }

    /// One joint QP over every agent's acceleration (cCBF).
    pub fn centralized_qp(
        &self,
        model: &ModelParams<f64>,
        states: &[AgentState<f64>],
        obstacles: &[Obstacle],
        u_nom: &[Control<f64>],
        cfg: &WorldConfig,
    ) -> QpProblem {
        let n = states.len();
        let r = cfg.safety_radius + self.margin;
        let mut rows = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let dp = states[i].position - states[j].position;
                if dp.norm() > cfg.comm_range {
                    continue;
                }
                let (coef, rhs) = self.pair_row(&dp, &(states[i].velocity - states[j].velocity), r);
                let mut row = vec![0.0; 3 * n];
                row[3 * i..3 * i + 3].copy_from_slice(coef.as_slice());
                row[3 * j..3 * j + 3].copy_from_slice((-coef).as_slice());
                rows.push((row, rhs));
            }
            for o in Self::obstacles_near(&states[i], obstacles, cfg) {
                let (coef, rhs) = self.pair_row(&(states[i].position - o.center), &states[i].velocity, o.radius + self.margin);
                let mut row = vec![0.0; 3 * n];
                row[3 * i..3 * i + 3].copy_from_slice(coef.as_slice());
                rows.push((row, rhs));
            }
        }
        let flat = u_nom.iter().flat_map(|u| u.to_vec()).collect();
        QpProblem::new(flat, rows, vec![model.bounds(); n], 3)
    }

    /// Agent `i`'s own QP with neighbours' previous controls held fixed (dCBF).
    pub fn decentralized_qp(
        &self,
        model: &ModelParams<f64>,
        states: &[AgentState<f64>],
        obstacles: &[Obstacle],
        i: usize,
        u_nom: &Control<f64>,
        u_prev: &[Control<f64>],
        cfg: &WorldConfig,
    ) -> QpProblem {
        let r = cfg.safety_radius + self.margin;
        let accel = |u: &Control<f64>| Vector3::from_row_slice(&u.to_vec());
        let mut rows = Vec::new();
        for j in 0..states.len() {
            let dp = states[i].position - states[j].position;
            if j == i || dp.norm() > cfg.comm_range {
                continue;
            }
            let (coef, rhs) = self.pair_row(&dp, &(states[i].velocity - states[j].velocity), r);
            rows.push((coef.as_slice().to_vec(), rhs + coef.dot(&accel(&u_prev[j]))));
        }
        for o in Self::obstacles_near(&states[i], obstacles, cfg) {
            let (coef, rhs) = self.pair_row(&(states[i].position - o.center), &states[i].velocity, o.radius + self.margin);
            rows.push((coef.as_slice().to_vec(), rhs));
        }
        QpProblem::new(u_nom.to_vec(), rows, vec![model.bounds()], 3)
    }
}

/// Attitude whose z-axis is along `force` and whose heading is `yaw`.
pub fn desired_attitude(force: &Vector3<f64>, yaw: f64) -> Matrix3<f64> {
    let b3 = force.normalize();
    let b1c = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let b2 = b3.cross(&b1c).normalize();
    Matrix3::from_columns(&[b2.cross(&b3), b2, b3])
}
