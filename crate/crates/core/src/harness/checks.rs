//! Property suites that can be run from the command line on any build.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, Control, ControlBounds, ModelParams, System, STATE_DIM};
use crate::egformer::{cbf_input_gradients, cbf_with_gradients, forward_cbf, forward_policy, haar_average, NetConfig, NetParams};
use crate::graph::{build_graph, GraphSnapshot, NodeKind, Subgraph};
use crate::learn::{loss_and_grad, loss_value, Label, LabeledSample, LearnContext, TrainConfig};
use crate::liegroup::GroupElement;
use crate::safectrl::{
    cbf_constraint_value, kkt_residuals, nominal_control, solve_qp, ClassK, NominalGains, QpProblem, QpSettings, QpStatus,
};
use crate::world::{random_scene, scan_all, Episode, WorldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Group,
    Dynamics,
    Equivariance,
    Gradients,
    Qp,
    Lemma2,
    Haar,
    Invariance,
}

impl CheckKind {
    pub const ALL: [CheckKind; 8] = [
        CheckKind::Group,
        CheckKind::Dynamics,
        CheckKind::Equivariance,
        CheckKind::Gradients,
        CheckKind::Qp,
        CheckKind::Lemma2,
        CheckKind::Haar,
        CheckKind::Invariance,
    ];
}

impl std::str::FromStr for CheckKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown check `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        Self { name: name.into(), cases, max_error, tolerance, passed: max_error.is_finite() && max_error < tolerance }
    }
}

fn model_of(system: System) -> ModelParams<f64> {
    match system {
        System::DoubleIntegrator => ModelParams::double_integrator(),
        System::Quadrotor => ModelParams::quadrotor(),
    }
}

fn random_g(rng: &mut impl Rng) -> GroupElement<f64> {
    let t = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
    GroupElement::new(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI), t)
}

fn small_world() -> WorldConfig {
    WorldConfig { num_agents: 5, num_obstacles: 3, side_length: 1.2, ..WorldConfig::default() }
}

fn graph_of(ep: &Episode, cfg: &WorldConfig) -> GraphSnapshot {
    build_graph(ep, &scan_all(ep, cfg), cfg).expect("one scan per agent")
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_state(rng: &mut impl Rng) -> AgentState<f64> {
    let mut v = || Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let (p, axis, vel, w) = (v(), v(), v(), v());
    AgentState { position: p, rotation: crate::liegroup::exp_so3(&(axis * 0.5)), velocity: vel, angular_velocity: w }
}

/// Composition, inverse and action laws on random elements and states.
pub fn group_check(cases: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut assoc, mut inv, mut act) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (a, b, c) = (random_g(&mut rng), random_g(&mut rng), random_g(&mut rng));
        let l = a.compose(&b).compose(&c).matrix();
        let r = a.compose(&b.compose(&c)).matrix();
        assoc = assoc.max((l - r).amax());
        inv = inv.max((a.compose(&a.inverse()).matrix() - GroupElement::identity().matrix()).amax());
        let x = random_state(&mut rng);
        let lhs = a.compose(&b).act_state(&x).to_array();
        let rhs = a.act_state(&b.act_state(&x)).to_array();
        act = act.max(max_abs(&lhs, &rhs));
    }
    vec![
        CheckReport::new("group.associativity", cases, assoc, 1e-10),
        CheckReport::new("group.inverse", cases, inv, 1e-10),
        CheckReport::new("group.action_composition", cases, act, 1e-10),
    ]
}

/// Two-path rollouts: transform then integrate against integrate then transform.
pub fn dynamics_check(cases: usize, steps: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for system in [System::DoubleIntegrator, System::Quadrotor] {
        let model = model_of(system);
        let mut err = 0.0f64;
        for _ in 0..cases {
            let g = random_g(&mut rng);
            let mut x = random_state(&mut rng);
            if system == System::DoubleIntegrator {
                x.angular_velocity = Vector3::zeros();
            }
            let mut y = g.act_state(&x);
            for _ in 0..steps {
                let raw: Vec<f64> = (0..model.control_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let u = model.squash(&raw);
                x = model.step(&x, &u).expect("bounded rollout");
                y = model.step(&y, &g.act_control(&u)).expect("bounded rollout");
            }
            err = err.max((g.act_state(&x).position - y.position).amax());
        }
        out.push(CheckReport::new(&format!("dynamics.{system:?}").to_lowercase(), cases, err, 1e-7));
    }
    out
}

/// Policy equivariance and barrier invariance over random scenes, elements and weights.
/// With `corrupt_wq` the first query projection is overwritten with large
/// random values; equivariance must survive since it does not depend on weights.
pub fn equivariance_check(net: &NetConfig, cases: usize, seed: u64, corrupt_wq: bool) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_world();
    let (mut pol, mut cbf) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let system = if case % 2 == 0 { System::DoubleIntegrator } else { System::Quadrotor };
        let model = model_of(system);
        let mut params = NetParams::new(NetConfig { seed: seed.wrapping_add(case as u64), ..net.clone() }, system);
        if corrupt_wq {
            for net in [&mut params.policy, &mut params.cbf] {
                let k = net.names.iter().position(|n| n.ends_with("layer0.wq")).expect("at least one layer");
                for x in net.tensors[k].data_mut() {
                    *x = rng.gen_range(-50.0..50.0);
                }
            }
        }
        let ep = random_scene(&cfg, system, 0.5, &mut rng).expect("feasible scene");
        let g = random_g(&mut rng);
        let (a, b) = (graph_of(&ep, &cfg), graph_of(&ep.transformed(&g), &cfg));
        for i in 0..cfg.num_agents {
            let (sa, sb) = (a.ego_subgraph(i).expect("agent"), b.ego_subgraph(i).expect("agent"));
            let ua = g.act_control(&forward_policy(&params, &model, &NominalGains::default(), &sa));
            let ub = forward_policy(&params, &model, &NominalGains::default(), &sb);
            pol = pol.max(max_abs(&ua.to_vec(), &ub.to_vec()));
            cbf = cbf.max((forward_cbf(&params, &sa) - forward_cbf(&params, &sb)).abs());
        }
    }
    vec![
        CheckReport::new("equivariance.policy", cases, pol, 1e-8),
        CheckReport::new("equivariance.cbf", cases, cbf, 1e-8),
    ]
}

fn perturbed(sub: &Subgraph, node: usize, k: usize, h: f64) -> Subgraph {
    let mut s = sub.clone();
    let mut a = s.nodes[node].state.to_array();
    a[k] += h;
    s.nodes[node].state = AgentState::from_array(&a);
    s
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    num / den.max(1e-8)
}

/// Barrier input gradients and the training-loss parameter gradient against central differences.
pub fn gradient_check(probes: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_world();
    let net = NetConfig { d_model: 16, d_ff: 24, head_hidden: 16, ..NetConfig::default() };
    let mut input_err = 0.0f64;
    for probe in 0..probes {
        let system = if probe % 2 == 0 { System::DoubleIntegrator } else { System::Quadrotor };
        let params = NetParams::new(NetConfig { seed: probe as u64, ..net.clone() }, system);
        let ep = random_scene(&cfg, system, 0.5, &mut rng).expect("feasible scene");
        let sub = graph_of(&ep, &cfg).ego_subgraph(0).expect("agent");
        let (_, grads) = cbf_with_gradients(&params, &sub);
        let h = 1e-6;
        let mut ad = Vec::new();
        let mut fd = Vec::new();
        for (j, node) in sub.nodes.iter().enumerate() {
            if node.kind != NodeKind::Agent {
                continue;
            }
            for k in 0..STATE_DIM {
                ad.push(grads[j][k]);
                fd.push((forward_cbf(&params, &perturbed(&sub, j, k, h)) - forward_cbf(&params, &perturbed(&sub, j, k, -h))) / (2.0 * h));
            }
        }
        input_err = input_err.max(relative(&ad, &fd));
    }
    let loss_err = loss_gradient_error(probes, seed);
    vec![
        CheckReport::new("gradients.cbf_inputs", probes, input_err, 1e-4),
        CheckReport::new("gradients.loss", probes, loss_err, 1e-3),
    ]
}

/// A small labeled batch with every label class present.
pub fn synthetic_batch(system: System, snapshots: usize, rng: &mut impl Rng) -> Vec<LabeledSample> {
    let cfg = small_world();
    let model = model_of(system);
    (0..snapshots)
        .map(|_| {
            let ep = random_scene(&cfg, system, 0.5, rng).expect("feasible scene");
            let graph = graph_of(&ep, &cfg);
            let controls = (0..cfg.num_agents)
                .map(|_| {
                    let raw: Vec<f64> = (0..model.control_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    model.squash(&raw)
                })
                .collect();
            let labels = (0..cfg.num_agents).map(|i| [Label::Safe, Label::Unsafe, Label::Unlabeled][i % 3]).collect();
            LabeledSample { graph, controls, labels }
        })
        .collect()
}

/// Worst relative error between the analytic loss gradient and central
/// differences along random parameter directions.
pub fn loss_gradient_error(probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let mut worst = 0.0f64;
    for probe in 0..probes {
        let system = if probe % 2 == 0 { System::DoubleIntegrator } else { System::Quadrotor };
        let model = model_of(system);
        let net = NetConfig { d_model: 8, d_ff: 12, head_hidden: 8, seed: probe as u64, ..NetConfig::default() };
        let params = NetParams::new(net, system);
        let ctx = LearnContext {
            model: model.clone(),
            world: small_world(),
            gains: NominalGains::default(),
            qp: QpSettings::default(),
            train: TrainConfig { substitute_all: probe % 4 == 1, ..TrainConfig::default() },
        };
        let batch = synthetic_batch(system, 2, &mut rng);
        let refs: Vec<Vec<Control<f64>>> = batch
            .iter()
            .map(|s| {
                (0..s.graph.num_agents)
                    .map(|i| nominal_control(&model, &ctx.gains, &s.graph.nodes[i].state, &s.graph.nodes[s.graph.target_nodes[i]].state.position))
                    .collect()
            })
            .collect();
        let (_, grads) = loss_and_grad(&params, &batch, &refs, &ctx);
        // directional derivative along a random unit direction over all parameters
        let mut dir = params.clone();
        for t in dir.policy.tensors.iter_mut().chain(dir.cbf.tensors.iter_mut()) {
            for x in t.data_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        let norm: f64 = dir.arrays().map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let ad: f64 = grads
            .policy
            .iter()
            .chain(&grads.cbf)
            .zip(dir.policy.tensors.iter().chain(&dir.cbf.tensors))
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / norm;
        let h = 1e-6;
        let shifted = |s: f64| {
            let mut p = params.clone();
            for (t, d) in p.policy.tensors.iter_mut().chain(p.cbf.tensors.iter_mut()).zip(dir.policy.tensors.iter().chain(&dir.cbf.tensors)) {
                for (x, y) in t.data_mut().iter_mut().zip(d.data()) {
                    *x += s * y / norm;
                }
            }
            loss_value(&p, &batch, &refs, &ctx)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        worst = worst.max((ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8));
    }
    worst
}

/// Random strictly convex problems over box and cylinder sets.
pub fn random_qp(rng: &mut impl Rng, agents: usize, rows: usize) -> QpProblem {
    let block = 3;
    let n = agents * block;
    let u_nom: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let rows: Vec<(Vec<f64>, f64)> = (0..rows)
        .map(|_| ((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(-1.0..0.5)))
        .collect();
    let sets = (0..agents)
        .map(|k| {
            if k % 2 == 0 {
                ControlBounds::Cylinder { radius: 2.0, z_lo: -2.0, z_hi: 2.0 }
            } else {
                ControlBounds::Box { lo: vec![-1.5; 3], hi: vec![1.5; 3] }
            }
        })
        .collect();
    QpProblem::new(u_nom, rows, sets, block)
}

/// KKT residuals of solved random problems and the single-row analytic projection.
pub fn qp_check(cases: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = QpSettings::default();
    let (mut kkt, mut solved) = (0.0f64, 0usize);
    for _ in 0..cases {
        let (agents, rows) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let p = random_qp(&mut rng, agents, rows);
        let sol = solve_qp(&p, &s);
        if sol.status == QpStatus::Solved {
            solved += 1;
            kkt = kkt.max(kkt_residuals(&p, &sol).max());
        }
    }
    let mut proj = 0.0f64;
    for _ in 0..cases {
        let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u0: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b = rng.gen_range(-0.5..0.5);
        let p = QpProblem::new(u0.clone(), vec![(a.clone(), b)], vec![ControlBounds::Box { lo: vec![-1e3; 3], hi: vec![1e3; 3] }], 3);
        let (av, uv) = (DVector::from_vec(a), DVector::from_vec(u0));
        let expected = &uv + &av * ((b - av.dot(&uv)).max(0.0) / av.norm_squared());
        proj = proj.max((solve_qp(&p, &s).u - expected).amax());
    }
    vec![
        CheckReport::new("qp.kkt", solved, if solved * 2 >= cases { kkt } else { f64::INFINITY }, 1e-6),
        CheckReport::new("qp.projection", cases, proj, 1e-8),
    ]
}

/// Two agents with planar controls in `[-1, 1]^2` coupled by two random rows,
/// solved both by the QP and by exhaustive search over a `steps`-per-axis
/// grid. The error is the distance between the two minimizers in units of the
/// grid cell diagonal; a QP objective above the best feasible grid point is
/// reported as infinite.
pub fn qp_grid_check(cases: usize, steps: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 2.0 / steps as f64;
    let mut worst = 0.0f64;
    let mut compared = 0;
    while compared < cases {
        let u_nom: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<(Vec<f64>, f64)> = (0..2)
            .map(|_| ((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(-0.2..0.4)))
            .collect();
        let sets = vec![ControlBounds::Box { lo: vec![-1.0; 2], hi: vec![1.0; 2] }; 2];
        let p = QpProblem::new(u_nom.clone(), rows.clone(), sets, 2);
        let sol = solve_qp(&p, &QpSettings::default());
        if sol.status != QpStatus::Solved {
            continue;
        }
        let feasible = |u: &[f64; 4]| rows.iter().all(|(a, b)| a.iter().zip(u).map(|(x, y)| x * y).sum::<f64>() >= *b);
        let mut best = (f64::INFINITY, [0.0; 4]);
        let axis = |k: usize| -1.0 + h * k as f64;
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps {
                    for l in 0..=steps {
                        let u = [axis(i), axis(j), axis(k), axis(l)];
                        if feasible(&u) {
                            let o = p.objective(&DVector::from_row_slice(&u));
                            if o < best.0 {
                                best = (o, u);
                            }
                        }
                    }
                }
            }
        }
        if !best.0.is_finite() {
            continue;
        }
        compared += 1;
        let dist = (&sol.u - DVector::from_row_slice(&best.1)).norm();
        let err = if p.objective(&sol.u) > best.0 + 1e-9 { f64::INFINITY } else { dist / (2.0 * h) };
        worst = worst.max(err);
    }
    CheckReport::new("qp.grid_search", cases, worst, 1.0)
}

/// Runs the double integrator under the centralized hand-crafted barrier QP
/// from random safe starts and counts agents that ever violate safety.
pub fn invariance_check(episodes: usize, steps: usize, world: &WorldConfig, seed: u64) -> CheckReport {
    let ctx = crate::harness::EvalContext {
        model: ModelParams::double_integrator(),
        world: WorldConfig { episode_len: steps, ..world.clone() },
        gains: NominalGains::default(),
        qp: QpSettings::default(),
        barrier: crate::safectrl::HandcraftedCbf::default(),
    };
    let violations: usize = crate::harness::parallel_map(episodes, 0, |k| {
        let seed = seed.wrapping_add(k as u64);
        let out = crate::harness::run_episode(&crate::harness::Policy::Centralized, &ctx, seed, false).expect("sampled episode");
        out.metrics.safe.iter().filter(|s| !**s).count()
    })
    .into_iter()
    .sum();
    // any violation fails; the error is the violation count
    CheckReport::new("invariance.ccbf_violations", episodes, violations as f64, 0.5)
}

/// Haar averaging of barrier networks over rotations about z.
///
/// For a rotation-sensitive barrier (the translation-only ablation) the mean
/// invariance error `|h_K(g.s) - h_K(s)|` must shrink with every step up in
/// `ks`; the reported error is the largest ratio of a later mean to the one
/// before it (pass below 1). For an invariant barrier the average must equal
/// the barrier itself.
pub fn haar_check(scenes: usize, ks: &[usize], seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_world();
    let net = NetConfig { d_model: 16, d_ff: 24, head_hidden: 16, ..NetConfig::default() };
    let mut spread = vec![0.0f64; ks.len()];
    let mut exact = 0.0f64;
    for scene in 0..scenes {
        let cfg_seed = seed.wrapping_add(scene as u64);
        let ablation = NetParams::new(NetConfig { equivariant: false, seed: cfg_seed, ..net.clone() }, System::DoubleIntegrator);
        let invariant = NetParams::new(NetConfig { seed: cfg_seed, ..net.clone() }, System::DoubleIntegrator);
        let ep = random_scene(&cfg, System::DoubleIntegrator, 0.5, &mut rng).expect("feasible scene");
        let g = random_g(&mut rng);
        let (a, b) = (graph_of(&ep, &cfg), graph_of(&ep.transformed(&g), &cfg));
        let (sa, sb) = (a.ego_subgraph(0).expect("agent"), b.ego_subgraph(0).expect("agent"));
        let h = forward_cbf(&invariant, &sa);
        for (slot, &k) in spread.iter_mut().zip(ks) {
            let ha = haar_average(|s| forward_cbf(&ablation, s), &sa, k, true, &mut rng);
            let hb = haar_average(|s| forward_cbf(&ablation, s), &sb, k, true, &mut rng);
            *slot += (ha - hb).abs() / scenes as f64;
            exact = exact.max((haar_average(|s| forward_cbf(&invariant, s), &sa, k, true, &mut rng) - h).abs());
        }
    }
    let ratio = spread.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    let ratio = if spread.iter().all(|x| x.is_finite() && *x > 0.0) { ratio } else { f64::INFINITY };
    log::debug!("haar invariance error by K: {spread:?}");
    vec![
        CheckReport::new("haar.monotone_decrease", scenes, ratio, 1.0),
        CheckReport::new("haar.invariant_exact", scenes, exact, 1e-12),
    ]
}

/// The learned-barrier constraint value is unchanged when scene and controls are transformed.
pub fn lemma2_check(cases: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_world();
    let mut err = 0.0f64;
    for case in 0..cases {
        let system = if case % 2 == 0 { System::DoubleIntegrator } else { System::Quadrotor };
        let model = model_of(system);
        let net = NetConfig { d_model: 16, d_ff: 24, head_hidden: 16, seed: case as u64, ..NetConfig::default() };
        let params = NetParams::new(net, system);
        let ep = random_scene(&cfg, system, 0.5, &mut rng).expect("feasible scene");
        let g = random_g(&mut rng);
        let controls: Vec<Control<f64>> = (0..cfg.num_agents)
            .map(|_| model.squash(&(0..model.control_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>()))
            .collect();
        let moved: Vec<Control<f64>> = controls.iter().map(|u| g.act_control(u)).collect();
        let (a, b) = (graph_of(&ep, &cfg), graph_of(&ep.transformed(&g), &cfg));
        let va = cbf_constraint_value(&cbf_input_gradients(&params, &a), &a, &controls, &model, ClassK::Linear(1.0));
        let vb = cbf_constraint_value(&cbf_input_gradients(&params, &b), &b, &moved, &model, ClassK::Linear(1.0));
        let (va, vb) = (va.expect("controls for every agent"), vb.expect("controls for every agent"));
        err = err.max(max_abs(&va, &vb));
    }
    vec![CheckReport::new("lemma2.constraint_value", cases, err, 1e-6)]
}

pub fn run_check(kind: CheckKind, seed: u64) -> Vec<CheckReport> {
    match kind {
        CheckKind::Group => group_check(200, seed),
        CheckKind::Dynamics => dynamics_check(50, 50, seed),
        CheckKind::Equivariance => {
            let net = NetConfig { d_model: 16, d_ff: 24, head_hidden: 16, ..NetConfig::default() };
            let mut r = equivariance_check(&net, 20, seed, false);
            let mut corrupt = equivariance_check(&net, 4, seed + 1, true);
            for c in &mut corrupt {
                c.name.push_str("_corrupted_wq");
            }
            r.extend(corrupt);
            r
        }
        CheckKind::Gradients => gradient_check(20, seed),
        CheckKind::Qp => {
            let mut r = qp_check(100, seed);
            r.push(qp_grid_check(3, 30, seed));
            r
        }
        CheckKind::Lemma2 => lemma2_check(20, seed),
        CheckKind::Haar => haar_check(20, &[4, 16, 64, 256], seed),
        CheckKind::Invariance => vec![invariance_check(10, 1000, &WorldConfig::default(), seed)],
    }
}

/// Graph of one sampled episode with its topology audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub graph: GraphSnapshot,
    pub lidar_edges_to_owner: bool,
    pub targets_to_owner: bool,
    pub agent_edges_symmetric: bool,
}

pub fn graph_dump(ep: &Episode, cfg: &WorldConfig) -> GraphDump {
    let graph = graph_of(ep, cfg);
    let lidar_edges_to_owner = graph.edges.iter().all(|&(r, s)| graph.nodes[s].kind != NodeKind::Lidar || graph.nodes[s].owner == r);
    let targets_to_owner = graph.edges.iter().all(|&(r, s)| graph.nodes[s].kind != NodeKind::Target || graph.nodes[s].owner == r);
    let agent_edges_symmetric = graph
        .edges
        .iter()
        .filter(|&&(_, s)| graph.nodes[s].kind == NodeKind::Agent)
        .all(|&(r, s)| graph.edges.contains(&(s, r)));
    GraphDump { graph, lidar_edges_to_owner, targets_to_owner, agent_edges_symmetric }
}
