//! On-policy data collection with look-ahead safety labels, the joint
//! policy/barrier loss and the Adam training loop.
//!
//! The derivative hinge needs `d/dt h` along the closed loop, whose parameter
//! gradient would be a second derivative of the network. Instead the time
//! derivative is a forward difference over a short Euler step,
//! `(h(x + delta f(x, u)) - h(x)) / delta`, which keeps every gradient first order
//! and lets the ego's policy output enter the barrier through the perturbed
//! velocities and body rates.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use egcbf_autodiff::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, Control, ModelParams};
use crate::egformer::{
    canonical_row, canonicalize, forward_policy, policy_on_tape, CheckpointError, EgoFrame, NetParams,
};
use crate::graph::{build_graph, GraphSnapshot, NodeKind, FEATURE_DIM};
use crate::harness::{run_episode, EvalContext, HarnessError, Policy};
use crate::safectrl::{learned_qp, nominal_control, solve_qp, split_controls, ClassK, NominalGains, QpSettings};
use crate::world::{is_safe, sample_episode, scan_all, Episode, SafetyReport, WorldConfig, WorldError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Safe,
    Unsafe,
    Unlabeled,
}

/// Labels from the safety reports of the current step followed by up to `T`
/// future steps: unsafe now, safe throughout, or neither.
pub fn label_agents(window: &[SafetyReport], horizon: usize) -> Vec<Label> {
    let now = &window[0];
    (0..now.per_agent.len())
        .map(|i| {
            if !now.per_agent[i] {
                Label::Unsafe
            } else if window.len() > horizon && window[..=horizon].iter().all(|r| r.per_agent[i]) {
                Label::Safe
            } else {
                Label::Unlabeled
            }
        })
        .collect()
}

/// One recorded time step with a label per ego.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub graph: GraphSnapshot,
    /// Controls executed at this step.
    pub controls: Vec<Control<f64>>,
    pub labels: Vec<Label>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Imitate the barrier-filtered nominal control.
    Qp,
    /// Imitate the nominal control.
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub eta_c: f64,
    pub eta_d: f64,
    pub gamma: f64,
    pub alpha: ClassK,
    /// Squared control error instead of the plain norm. The norm's gradient has
    /// unit size at every sample, so the many near-nominal egos drown the rare
    /// large corrections; squaring weights them by the error.
    pub squared_control: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { eta_c: 1.0, eta_d: 0.2, gamma: 0.02, alpha: ClassK::Linear(1.0), squared_control: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Each term averaged over its own class.
    ClassMean,
    /// Plain sums over samples.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Persistent episodes advanced in lock-step.
    pub episodes: usize,
    /// Steps each episode advances per iteration.
    pub rollout_steps: usize,
    /// Look-ahead horizon of the safety labels.
    pub horizon: usize,
    pub batch_snapshots: usize,
    pub updates_per_iter: usize,
    /// Fill up to half of every batch with snapshots that contain an unsafe ego.
    pub balance: bool,
    /// Probability that an episode segment runs the nominal controller.
    pub explore_prob: f64,
    /// Standard deviation of Gaussian noise on executed controls, relative to the set half-range.
    pub action_noise: f64,
    pub lr_cbf: f64,
    pub lr_policy: f64,
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub reference: Reference,
    /// Iterations that imitate the nominal control before switching to `reference`,
    /// so the filter is not built on an untrained barrier.
    pub reference_warmup: usize,
    /// Replace every neighbour's recorded control by its policy output in the derivative term.
    pub substitute_all: bool,
    /// Let unlabeled samples join the derivative term.
    pub include_unlabeled: bool,
    /// Past snapshots kept for batching alongside fresh ones; 0 trains on fresh data only.
    pub replay_capacity: usize,
    /// Separate store for critical snapshots (a collision within the look-ahead
    /// window, or a filter intervention), which are rare and kept longer.
    pub critical_replay_capacity: usize,
    /// Solve the filter at collection time and treat steps where it changes a
    /// nominal control as critical. Imitating the filter only works once
    /// those steps make up a fair share of each batch.
    pub intervention_replay: bool,
    /// Step of the forward difference that stands in for `d/dt h`.
    pub hdot_step: f64,
    /// Extra right-hand side added to the filter's barrier rows.
    pub qp_margin: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            episodes: 4,
            rollout_steps: 32,
            horizon: 32,
            batch_snapshots: 32,
            updates_per_iter: 1,
            balance: true,
            explore_prob: 0.3,
            action_noise: 0.0,
            lr_cbf: 1e-4,
            lr_policy: 1e-5,
            grad_clip: None,
            weights: LossWeights::default(),
            reduction: Reduction::ClassMean,
            reference: Reference::Qp,
            reference_warmup: 0,
            substitute_all: true,
            include_unlabeled: false,
            replay_capacity: 4096,
            critical_replay_capacity: 2048,
            intervention_replay: false,
            hdot_step: 1e-3,
            qp_margin: 0.0,
            eval_every: 10,
            eval_episodes: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, last_good: Box<NetParams> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything the loss and the collector need besides the parameters.
#[derive(Clone, Debug)]
pub struct LearnContext {
    pub model: ModelParams<f64>,
    pub world: WorldConfig,
    pub gains: NominalGains,
    pub qp: QpSettings,
    pub train: TrainConfig,
}

/// Per-agent reference controls for one snapshot.
pub fn reference_controls(params: &NetParams, sample: &LabeledSample, ctx: &LearnContext) -> Vec<Control<f64>> {
    reference_controls_with(ctx.train.reference, params, sample, ctx)
}

pub fn reference_controls_with(
    reference: Reference,
    params: &NetParams,
    sample: &LabeledSample,
    ctx: &LearnContext,
) -> Vec<Control<f64>> {
    let u_nom = graph_nominal(&sample.graph, ctx);
    match reference {
        Reference::Nominal => u_nom,
        Reference::Qp => qp_reference(params, &sample.graph, &u_nom, ctx),
    }
}

fn graph_nominal(g: &GraphSnapshot, ctx: &LearnContext) -> Vec<Control<f64>> {
    (0..g.num_agents)
        .map(|i| nominal_control(&ctx.model, &ctx.gains, &g.nodes[i].state, &g.nodes[g.target_nodes[i]].state.position))
        .collect()
}

fn qp_reference(params: &NetParams, g: &GraphSnapshot, u_nom: &[Control<f64>], ctx: &LearnContext) -> Vec<Control<f64>> {
    let p = learned_qp(params, g, &ctx.model, u_nom, ctx.train.weights.alpha, ctx.train.qp_margin);
    split_controls(ctx.model.system, &solve_qp(&p, &ctx.qp).u)
}

/// Corrections smaller than this fraction of the control half-range do not
/// count as an intervention.
const INTERVENTION_TOL: f64 = 1e-2;

/// Whether the barrier filter changes any agent's nominal control.
fn intervenes(params: &NetParams, g: &GraphSnapshot, ctx: &LearnContext) -> bool {
    let u_nom = graph_nominal(g, ctx);
    let half = ctx.model.bounds().half_range();
    qp_reference(params, g, &u_nom, ctx).iter().zip(&u_nom).any(|(a, b)| {
        a.to_vec().iter().zip(b.to_vec()).zip(&half).any(|((x, y), h)| (x - y).abs() > INTERVENTION_TOL * h)
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub control: f64,
    pub derivative: f64,
    pub safe: f64,
    pub unsafe_: f64,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub n_unlabeled: usize,
    pub grad_norm_policy: f64,
    pub grad_norm_cbf: f64,
}

/// Parameter gradients in the order of `NetParams::{policy, cbf}.tensors`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub policy: Vec<Tensor<f64>>,
    pub cbf: Vec<Tensor<f64>>,
}

impl Gradients {
    fn zeros_like(p: &NetParams) -> Self {
        let z = |ts: &[Tensor<f64>]| ts.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { policy: z(&p.policy.tensors), cbf: z(&p.cbf.tensors) }
    }

    fn norm(ts: &[Tensor<f64>]) -> f64 {
        ts.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }
}

struct Scales {
    control: f64,
    derivative: f64,
    safe: f64,
    unsafe_: f64,
}

fn state_plus(model: &ModelParams<f64>, x: &AgentState<f64>, u: Option<&Control<f64>>, delta: f64) -> AgentState<f64> {
    let d = match u {
        Some(u) => model.derivative(x, u),
        None => model.drift(x),
    };
    AgentState {
        position: x.position + d.dp * delta,
        rotation: x.rotation + d.dr * delta,
        velocity: x.velocity + d.dv * delta,
        angular_velocity: x.angular_velocity + d.domega * delta,
    }
}

/// Joint loss over a batch with fixed reference controls, and its gradient.
pub fn loss_and_grad(
    params: &NetParams,
    batch: &[LabeledSample],
    refs: &[Vec<Control<f64>>],
    ctx: &LearnContext,
) -> (LossReport, Gradients) {
    assert!(!batch.is_empty(), "empty batch");
    let tc = &ctx.train;
    let w = &tc.weights;
    let mut report = LossReport::default();
    let mut n_all = 0usize;
    for s in batch {
        n_all += s.labels.len();
        for l in &s.labels {
            match l {
                Label::Safe => report.n_safe += 1,
                Label::Unsafe => report.n_unsafe += 1,
                Label::Unlabeled => report.n_unlabeled += 1,
            }
        }
    }
    let n_deriv = report.n_safe + report.n_unsafe + if tc.include_unlabeled { report.n_unlabeled } else { 0 };
    let per = |n: usize| match tc.reduction {
        Reduction::ClassMean => 1.0 / n.max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let scales = Scales {
        control: w.eta_c * per(n_all),
        derivative: w.eta_d * per(n_deriv),
        safe: per(report.n_safe),
        unsafe_: per(report.n_unsafe),
    };
    let mut grads = Gradients::zeros_like(params);
    for (sample, r) in batch.iter().zip(refs) {
        sample_terms(params, sample, r, ctx, &scales, &mut report, &mut grads);
    }
    report.total = report.control + report.derivative + report.safe + report.unsafe_;
    report.grad_norm_policy = Gradients::norm(&grads.policy);
    report.grad_norm_cbf = Gradients::norm(&grads.cbf);
    (report, grads)
}

fn sample_terms(
    params: &NetParams,
    sample: &LabeledSample,
    refs: &[Control<f64>],
    ctx: &LearnContext,
    scales: &Scales,
    report: &mut LossReport,
    grads: &mut Gradients,
) {
    const SHAPES: &str = "loss shapes";
    let tc = &ctx.train;
    let (w, model, cfg) = (&tc.weights, &ctx.model, &params.config);
    let m = model.control_dim();
    let alpha = match w.alpha {
        ClassK::Linear(k) => k,
    };
    let inv_half: Vec<f64> = model.bounds().half_range().iter().map(|h| 1.0 / h).collect();
    let graph = &sample.graph;
    let n_agents = graph.num_agents;

    let mut tape = Tape::new();
    let pv = params.policy.load(&mut tape);
    let cv = params.cbf.load(&mut tape);
    let inv_half = tape.leaf(Tensor::row(inv_half));

    let subs = graph.subgraphs();
    let mut u_vars = Vec::with_capacity(n_agents);
    let mut inputs = Vec::with_capacity(n_agents);
    for sub in &subs {
        let (x, frame) = canonicalize(sub, cfg);
        let xv = tape.leaf(x);
        let mask = sub.attention_mask();
        u_vars.push(policy_on_tape(&mut tape, params, &pv, xv, &frame, sub, model, &ctx.gains));
        inputs.push((xv, mask));
    }

    let mut terms: Vec<Var> = Vec::new();
    let mut add_term = |tape: &mut Tape<f64>, v: Var, scale: f64, slot: &mut f64| {
        let s = tape.scale(v, scale);
        *slot += tape.value(s).item();
        terms.push(s);
    };

    for (i, sub) in subs.iter().enumerate() {
        let label = sample.labels[i];
        let (xv, mask) = (inputs[i].0, &inputs[i].1);

        let target = tape.leaf(Tensor::row(refs[i].to_vec()));
        let diff = tape.sub(u_vars[i], target).expect(SHAPES);
        let diff = tape.mul(diff, inv_half).expect(SHAPES);
        let c = if w.squared_control {
            let sq = tape.mul(diff, diff).expect(SHAPES);
            tape.sum(sq)
        } else {
            tape.l2_norm(diff)
        };
        add_term(&mut tape, c, scales.control, &mut report.control);

        let h = params.cbf.forward(&mut tape, &cv, xv, mask);
        match label {
            Label::Safe => {
                let z = tape.scale(h, -1.0);
                let z = tape.offset(z, w.gamma);
                let z = tape.relu(z);
                add_term(&mut tape, z, scales.safe, &mut report.safe);
            }
            Label::Unsafe => {
                let z = tape.offset(h, w.gamma);
                let z = tape.relu(z);
                add_term(&mut tape, z, scales.unsafe_, &mut report.unsafe_);
            }
            Label::Unlabeled => {}
        }
        if label == Label::Unlabeled && !tc.include_unlabeled {
            continue;
        }

        // perturbed neighbourhood: policy outputs enter linearly through v and omega
        let delta = tc.hdot_step;
        let substituted = |j: usize| j == 0 || (tc.substitute_all && sub.nodes[j].kind == NodeKind::Agent);
        let plus: Vec<AgentState<f64>> = sub
            .nodes
            .iter()
            .enumerate()
            .map(|(j, node)| match node.kind {
                NodeKind::Agent if substituted(j) => state_plus(model, &node.state, None, delta),
                NodeKind::Agent => state_plus(model, &node.state, Some(&sample.controls[node.owner]), delta),
                _ => node.state,
            })
            .collect();
        let frame = EgoFrame::of(&plus[0], cfg.equivariant);
        let base: Vec<f64> =
            sub.nodes.iter().zip(&plus).flat_map(|(n, s)| canonical_row(n.kind, s, &frame, cfg)).collect();
        let mut x_plus = tape.leaf(Tensor::new(sub.len(), FEATURE_DIM, base));
        for (j, node) in sub.nodes.iter().enumerate() {
            if node.kind != NodeKind::Agent || !substituted(j) {
                continue;
            }
            // K^T (m x 6): column k holds delta * (to_local B_v e_k, B_omega e_k)
            let cols = model.actuation(&node.state);
            let mut kt = Vec::with_capacity(m * 6);
            for col in &cols {
                let dv = frame.to_local * col.dv * delta;
                kt.extend_from_slice(dv.as_slice());
                kt.extend_from_slice((col.domega * delta).as_slice());
            }
            let kt = tape.leaf(Tensor::new(m, 6, kt));
            let moved = tape.matmul(u_vars[node.owner], kt).expect(SHAPES);
            let pad = tape.leaf(Tensor::zeros(1, FEATURE_DIM - 6));
            let row = tape.concat_cols(&[pad, moved]).expect(SHAPES);
            let full = tape.scatter_rows(row, &[j], sub.len()).expect(SHAPES);
            x_plus = tape.add(x_plus, full).expect(SHAPES);
        }
        let h_plus = params.cbf.forward(&mut tape, &cv, x_plus, mask);
        let hdot = tape.sub(h_plus, h).expect(SHAPES);
        let hdot = tape.scale(hdot, 1.0 / delta);
        let ah = tape.scale(h, alpha);
        let cond = tape.add(hdot, ah).expect(SHAPES);
        let z = tape.scale(cond, -1.0);
        let z = tape.offset(z, w.gamma);
        let z = tape.relu(z);
        add_term(&mut tape, z, scales.derivative, &mut report.derivative);
    }

    if terms.is_empty() {
        return;
    }
    let all = tape.concat_cols(&terms).expect(SHAPES);
    let total = tape.sum(all);
    let wrt: Vec<Var> = pv.iter().chain(&cv).copied().collect();
    let g = tape.grad(total, &wrt).expect("scalar loss over leaves");
    let (gp, gc) = g.split_at(pv.len());
    for (acc, x) in grads.policy.iter_mut().zip(gp) {
        acc.add_assign(x);
    }
    for (acc, x) in grads.cbf.iter_mut().zip(gc) {
        acc.add_assign(x);
    }
}

/// Loss value only; used by finite-difference checks.
pub fn loss_value(params: &NetParams, batch: &[LabeledSample], refs: &[Vec<Control<f64>>], ctx: &LearnContext) -> f64 {
    loss_and_grad(params, batch, refs, ctx).0.total
}

/// Adam with separate step sizes for the policy and the barrier.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl Adam {
    pub fn new(params: &NetParams) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Gradients::zeros_like(params), v: Gradients::zeros_like(params) }
    }

    pub fn update(&mut self, params: &mut NetParams, g: &Gradients, lr_policy: f64, lr_cbf: f64, clip: Option<f64>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let apply = |ps: &mut [Tensor<f64>], gs: &[Tensor<f64>], ms: &mut [Tensor<f64>], vs: &mut [Tensor<f64>], lr: f64| {
            let k = match clip {
                Some(c) => {
                    let n = Gradients::norm(gs);
                    if n > c {
                        c / n
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            for (((p, g), m), v) in ps.iter_mut().zip(gs).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
                for idx in 0..pd.len() {
                    let gi = gd[idx] * k;
                    md[idx] = b1 * md[idx] + (1.0 - b1) * gi;
                    vd[idx] = b2 * vd[idx] + (1.0 - b2) * gi * gi;
                    pd[idx] -= lr * (md[idx] / c1) / ((vd[idx] / c2).sqrt() + eps);
                }
            }
        };
        apply(&mut params.policy.tensors, &g.policy, &mut self.m.policy, &mut self.v.policy, lr_policy);
        apply(&mut params.cbf.tensors, &g.cbf, &mut self.m.cbf, &mut self.v.cbf, lr_cbf);
    }
}

/// Parameters, optimizer moments and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetParams,
    pub adam: Adam,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: NetParams) -> Self {
        Self { adam: Adam::new(&params), params, iteration: 0 }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut extra: Vec<(String, &Tensor<f64>)> = Vec::new();
        for (ms, vs, net) in [
            (&self.adam.m.policy, &self.adam.v.policy, &self.params.policy),
            (&self.adam.m.cbf, &self.adam.v.cbf, &self.params.cbf),
        ] {
            for ((name, m), v) in net.names.iter().zip(ms).zip(vs) {
                extra.push((format!("adam.m.{name}"), m));
                extra.push((format!("adam.v.{name}"), v));
            }
        }
        let counters = Tensor::row(vec![self.adam.step as f64, self.iteration as f64]);
        extra.push(("train.counters".to_string(), &counters));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.params.write_to(&mut f, &extra)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (params, rest) = NetParams::read_from(&mut f)?;
        let mut state = TrainState::new(params);
        for (name, t) in rest {
            if name == "train.counters" && t.len() == 2 {
                state.adam.step = t.data()[0] as u64;
                state.iteration = t.data()[1] as usize;
                continue;
            }
            let (moments, key) = if let Some(k) = name.strip_prefix("adam.m.") {
                (&mut state.adam.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                (&mut state.adam.v, k)
            } else {
                return Err(CheckpointError::Corrupt(format!("unknown array {name}")));
            };
            let slot = if let Some(k) = state.params.policy.names.iter().position(|n| n == key) {
                &mut moments.policy[k]
            } else if let Some(k) = state.params.cbf.names.iter().position(|n| n == key) {
                &mut moments.cbf[k]
            } else {
                return Err(CheckpointError::Corrupt(format!("unknown array {name}")));
            };
            if slot.shape() != t.shape() {
                return Err(CheckpointError::Corrupt(format!("optimizer array {name} has the wrong shape")));
            }
            *slot = t;
        }
        Ok(state)
    }
}

/// A persistent training episode plus the steps still waiting for look-ahead.
struct Runner {
    episode: Episode,
    world: WorldConfig,
    /// Snapshot, executed controls, and whether the filter intervened.
    pending: VecDeque<(GraphSnapshot, Vec<Control<f64>>, bool)>,
    reports: VecDeque<SafetyReport>,
    resets: u64,
    base_seed: u64,
}

impl Runner {
    fn new(world: &WorldConfig, base_seed: u64) -> Result<Self, WorldError> {
        let world = WorldConfig { seed: base_seed, ..world.clone() };
        Ok(Self { episode: sample_episode(&world)?, world, pending: VecDeque::new(), reports: VecDeque::new(), resets: 0, base_seed })
    }

    fn reset(&mut self, system: crate::dynamics::System) -> Result<(), WorldError> {
        self.resets += 1;
        self.world.seed = self.base_seed.wrapping_add(self.resets.wrapping_mul(0x9E37_79B9));
        self.episode = sample_episode(&self.world)?.for_system(system);
        self.pending.clear();
        self.reports.clear();
        Ok(())
    }
}

/// Advances every runner `rollout_steps` steps and returns the snapshots whose
/// look-ahead window is now complete, each flagged critical when some agent
/// collides within that window or the barrier filter changed a nominal
/// control at that step.
fn collect(
    params: &NetParams,
    runners: &mut [Runner],
    ctx: &LearnContext,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(LabeledSample, bool)>, TrainError> {
    let tc = &ctx.train;
    let model = &ctx.model;
    let half = model.bounds().half_range();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for runner in runners.iter_mut() {
        let nominal = rng.gen::<f64>() < tc.explore_prob;
        for _ in 0..tc.rollout_steps {
            if runner.episode.step >= runner.world.episode_len {
                // the look-ahead window is cut short: only the unsafe label is certain
                while let (Some((graph, controls, intervened)), Some(report)) = (runner.pending.pop_front(), runner.reports.pop_front()) {
                    let labels = report.per_agent.iter().map(|ok| if *ok { Label::Unlabeled } else { Label::Unsafe }).collect();
                    let critical = intervened || !report.all || runner.reports.iter().any(|r| !r.all);
                    out.push((LabeledSample { graph, controls, labels }, critical));
                }
                runner.reset(model.system)?;
            }
            let ep = &runner.episode;
            let graph = build_graph(ep, &scan_all(ep, &runner.world), &runner.world).expect("one scan per agent");
            let controls: Vec<Control<f64>> = (0..ep.num_agents())
                .map(|i| {
                    let u = if nominal {
                        nominal_control(model, &ctx.gains, &ep.states[i], &ep.targets[i])
                    } else {
                        forward_policy(params, model, &ctx.gains, &graph.ego_subgraph(i).expect("agent id"))
                    };
                    if tc.action_noise > 0.0 {
                        let noisy: Vec<f64> = u
                            .to_vec()
                            .iter()
                            .zip(&half)
                            .map(|(x, h)| x + tc.action_noise * h * noise.sample(rng))
                            .collect();
                        Control::from_slice(model.system, &model.bounds().project(&noisy))
                    } else {
                        u
                    }
                })
                .collect();
            let intervened = tc.intervention_replay && tc.reference == Reference::Qp && intervenes(params, &graph, ctx);
            runner.reports.push_back(is_safe(&ep.states, &ep.obstacles, runner.world.safety_radius));
            runner.pending.push_back((graph, controls.clone(), intervened));
            runner.episode.advance(model, &controls)?;
            while runner.reports.len() > tc.horizon {
                let window: Vec<SafetyReport> = runner.reports.iter().take(tc.horizon + 1).cloned().collect();
                let labels = label_agents(&window, tc.horizon);
                let (graph, controls, intervened) = runner.pending.pop_front().expect("one pending entry per report");
                let critical = intervened || window.iter().any(|r| !r.all);
                runner.reports.pop_front();
                out.push((LabeledSample { graph, controls, labels }, critical));
            }
        }
    }
    Ok(out)
}

/// One row of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub loss: f64,
    pub loss_control: f64,
    pub loss_derivative: f64,
    pub loss_safe: f64,
    pub loss_unsafe: f64,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub n_unlabeled: usize,
    pub eval_safe: Option<f64>,
    pub eval_reach: Option<f64>,
    pub eval_succ: Option<f64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub curve: Vec<CurveRow>,
}

impl TrainOutcome {
    /// First evaluated iteration whose reach rate is at least `threshold`.
    pub fn first_reach(&self, threshold: f64) -> Option<usize> {
        self.curve.iter().find(|r| r.eval_reach.is_some_and(|x| x >= threshold)).map(|r| r.iteration)
    }
}

pub fn write_curve_csv(rows: &[CurveRow], w: impl Write) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Index batches for one round over `total` snapshots, the first `routine` of
/// them routine and the rest critical. Without balancing, disjoint
/// slices of a shuffle; with it, half of each batch is drawn (with
/// replacement) from the critical snapshots.
fn make_batches(routine: usize, total: usize, tc: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let size = tc.batch_snapshots.max(1);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    if !tc.balance || routine == total || routine == 0 {
        return order.chunks(size).take(tc.updates_per_iter).map(|c| c.to_vec()).collect();
    }
    let rest: Vec<usize> = order.into_iter().filter(|&k| k < routine).collect();
    let mut cursor = 0;
    (0..tc.updates_per_iter)
        .map(|_| {
            let mut b: Vec<usize> = (0..size / 2).map(|_| rng.gen_range(routine..total)).collect();
            while b.len() < size {
                b.push(rest[cursor % rest.len()]);
                cursor += 1;
            }
            b
        })
        .collect()
}

/// Fixed evaluation episodes used for learning curves.
pub const EVAL_SEED_BASE: u64 = 7_000_000;

/// Alternates collection and updates from a given starting state.
pub fn train_from(mut state: TrainState, ctx: &LearnContext, mut on_row: impl FnMut(&CurveRow, &TrainState)) -> Result<TrainOutcome, TrainError> {
    let tc = &ctx.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5EED);
    let mut runners = (0..tc.episodes)
        .map(|k| Runner::new(&ctx.world, tc.seed.wrapping_mul(1000).wrapping_add(k as u64)).map_err(TrainError::from))
        .collect::<Result<Vec<_>, _>>()?;
    for (k, r) in runners.iter_mut().enumerate() {
        r.episode = r.episode.clone().for_system(ctx.model.system);
        // staggered clocks so that resets, and the label gaps after them, do not line up
        r.episode.step = k * ctx.world.episode_len / tc.episodes.max(1);
    }
    let eval_ctx = EvalContext {
        model: ctx.model.clone(),
        world: ctx.world.clone(),
        gains: ctx.gains.clone(),
        qp: ctx.qp.clone(),
        barrier: Default::default(),
    };
    let evaluate = |params: &NetParams| -> Result<(f64, f64, f64), HarnessError> {
        let (mut s, mut r, mut c) = (0.0, 0.0, 0.0);
        for k in 0..tc.eval_episodes {
            let out = run_episode(&Policy::Learned(params), &eval_ctx, EVAL_SEED_BASE + k as u64, false)?;
            s += out.metrics.safety_rate;
            r += out.metrics.reach_rate;
            c += out.metrics.success_rate;
        }
        let n = tc.eval_episodes.max(1) as f64;
        Ok((s / n, r / n, c / n))
    };

    let mut curve = Vec::new();
    let mut last_good = state.params.clone();
    if tc.eval_every > 0 && tc.iterations > 0 {
        let (s, r, c) = evaluate(&state.params)?;
        let row = CurveRow {
            iteration: state.iteration,
            loss: f64::NAN,
            loss_control: f64::NAN,
            loss_derivative: f64::NAN,
            loss_safe: f64::NAN,
            loss_unsafe: f64::NAN,
            n_safe: 0,
            n_unsafe: 0,
            n_unlabeled: 0,
            eval_safe: Some(s),
            eval_reach: Some(r),
            eval_succ: Some(c),
        };
        on_row(&row, &state);
        curve.push(row);
    }
    let mut routine: VecDeque<LabeledSample> = VecDeque::new();
    let mut critical: VecDeque<LabeledSample> = VecDeque::new();
    for _ in 0..tc.iterations {
        let fresh = collect(&state.params, &mut runners, ctx, &mut rng)?;
        if tc.replay_capacity == 0 {
            routine.clear();
        }
        if tc.critical_replay_capacity == 0 {
            critical.clear();
        }
        for (s, is_critical) in fresh {
            let (store, cap) = if is_critical {
                (&mut critical, tc.critical_replay_capacity)
            } else {
                (&mut routine, tc.replay_capacity)
            };
            store.push_back(s);
            while cap > 0 && store.len() > cap {
                store.pop_front();
            }
        }
        let mut agg = LossReport::default();
        let mut updates = 0;
        let r = routine.len();
        for batch in make_batches(r, r + critical.len(), tc, &mut rng) {
            let chunk: Vec<LabeledSample> =
                batch.into_iter().map(|k| if k < r { routine[k].clone() } else { critical[k - r].clone() }).collect();
            let chunk = &chunk[..];
            let reference = if state.iteration < tc.reference_warmup { Reference::Nominal } else { tc.reference };
            let refs: Vec<Vec<Control<f64>>> =
                chunk.iter().map(|s| reference_controls_with(reference, &state.params, s, ctx)).collect();
            let (report, grads) = loss_and_grad(&state.params, chunk, &refs, ctx);
            if !report.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { iteration: state.iteration, last_good: Box::new(last_good) });
            }
            state.adam.update(&mut state.params, &grads, tc.lr_policy, tc.lr_cbf, tc.grad_clip);
            updates += 1;
            agg.total += report.total;
            agg.control += report.control;
            agg.derivative += report.derivative;
            agg.safe += report.safe;
            agg.unsafe_ += report.unsafe_;
            agg.n_safe += report.n_safe;
            agg.n_unsafe += report.n_unsafe;
            agg.n_unlabeled += report.n_unlabeled;
        }
        last_good = state.params.clone();
        state.iteration += 1;
        let k = updates.max(1) as f64;
        let mut row = CurveRow {
            iteration: state.iteration,
            loss: agg.total / k,
            loss_control: agg.control / k,
            loss_derivative: agg.derivative / k,
            loss_safe: agg.safe / k,
            loss_unsafe: agg.unsafe_ / k,
            n_safe: agg.n_safe,
            n_unsafe: agg.n_unsafe,
            n_unlabeled: agg.n_unlabeled,
            eval_safe: None,
            eval_reach: None,
            eval_succ: None,
        };
        if tc.eval_every > 0 && state.iteration % tc.eval_every == 0 {
            let (s, r, c) = evaluate(&state.params)?;
            row.eval_safe = Some(s);
            row.eval_reach = Some(r);
            row.eval_succ = Some(c);
        }
        log::info!(
            "iter {} loss {:.4} (ctrl {:.4} deriv {:.4} safe {:.4} unsafe {:.4}) labels {}/{}/{}{}",
            row.iteration,
            row.loss,
            row.loss_control,
            row.loss_derivative,
            row.loss_safe,
            row.loss_unsafe,
            row.n_safe,
            row.n_unsafe,
            row.n_unlabeled,
            row.eval_reach.map(|r| format!(" eval safe {:.3} reach {r:.3}", row.eval_safe.unwrap_or(0.0))).unwrap_or_default()
        );
        on_row(&row, &state);
        curve.push(row);
    }
    Ok(TrainOutcome { state, curve })
}

pub fn train(net: crate::egformer::NetConfig, ctx: &LearnContext) -> Result<TrainOutcome, TrainError> {
    train_from(TrainState::new(NetParams::new(net, ctx.model.system)), ctx, |_, _| {})
}

/// Mean `|d h / d position|` of the barrier over non-ego nodes in the outer
/// ring `(0.9 comm_range, comm_range]` and within half the sensing range,
/// summed over `graphs`. A barrier that only depends on nearby nodes keeps the
/// first number small. `None` when a ring holds no nodes.
pub fn gradient_decay(params: &NetParams, graphs: &[GraphSnapshot], world: &WorldConfig) -> (Option<f64>, Option<f64>) {
    let (mut outer, mut inner) = ((0.0, 0usize), (0.0, 0usize));
    for graph in graphs {
        for eg in crate::egformer::cbf_input_gradients(params, graph) {
            let ego = graph.nodes[eg.ego].state.position;
            for (id, g) in &eg.grads {
                if *id == eg.ego {
                    continue;
                }
                let d = (graph.nodes[*id].state.position - ego).norm();
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if d > 0.9 * world.comm_range && d <= world.comm_range {
                    outer = (outer.0 + norm, outer.1 + 1);
                } else if d <= 0.5 * world.sensing_range {
                    inner = (inner.0 + norm, inner.1 + 1);
                }
            }
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (mean(outer), mean(inner))
}
