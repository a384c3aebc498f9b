use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dynamics::{Control, ModelParams, System};
use crate::egformer::{forward_policy, NetParams};
use crate::graph::build_graph;
use crate::safectrl::{nominal_control, solve_qp, split_controls, HandcraftedCbf, NominalGains, QpSettings};
use crate::world::{is_safe, sample_episode, scan_all, Episode, WorldConfig};

/// Controller under evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Learned(&'a NetParams),
    /// Joint hand-crafted barrier QP over all agents.
    Centralized,
    /// Per-agent hand-crafted barrier QP with neighbours' last controls held.
    Decentralized,
    Nominal,
}

#[derive(Clone, Debug)]
pub struct EvalContext {
    pub model: ModelParams<f64>,
    pub world: WorldConfig,
    pub gains: NominalGains,
    pub qp: QpSettings,
    pub barrier: HandcraftedCbf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub safety_rate: f64,
    pub reach_rate: f64,
    pub success_rate: f64,
    /// Collision events per agent.
    pub cost: f64,
    /// Negative accumulated distance to the nominal control.
    pub reward: f64,
    pub safe: Vec<bool>,
    pub reached: Vec<bool>,
    pub success: Vec<bool>,
}

/// One line of a trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub controls: Vec<Vec<f64>>,
    pub safe: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub seed: u64,
    pub targets: Vec<[f64; 3]>,
    pub obstacles: Vec<([f64; 3], f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub metrics: EpisodeMetrics,
    pub header: EpisodeHeader,
    /// Empty unless logging was requested.
    pub trajectory: Vec<StepRecord>,
}

impl EpisodeOutcome {
    /// Header line followed by one JSON object per step.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", serde_json::to_string(&self.header)?)?;
        for r in &self.trajectory {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Controls of every agent for the current step.
pub fn policy_controls(
    policy: &Policy,
    ctx: &EvalContext,
    ep: &Episode,
    u_nom: &[Control<f64>],
    u_prev: &[Control<f64>],
) -> Result<Vec<Control<f64>>, HarnessError> {
    let model = &ctx.model;
    let handcrafted_only = |name: &str| {
        if model.system != System::DoubleIntegrator {
            return Err(HarnessError::Unsupported(format!("{name} baseline needs the double integrator")));
        }
        Ok(())
    };
    Ok(match policy {
        Policy::Nominal => u_nom.to_vec(),
        Policy::Learned(params) => {
            if params.system != model.system {
                return Err(HarnessError::Unsupported("checkpoint was trained for another system".into()));
            }
            let graph = build_graph(ep, &scan_all(ep, &ctx.world), &ctx.world).expect("one scan per agent");
            (0..ep.num_agents()).map(|i| forward_policy(params, model, &ctx.gains, &graph.ego_subgraph(i).expect("agent id"))).collect()
        }
        Policy::Centralized => {
            handcrafted_only("cCBF")?;
            let p = ctx.barrier.centralized_qp(model, &ep.states, &ep.obstacles, u_nom, &ctx.world);
            split_controls(model.system, &solve_qp(&p, &ctx.qp).u)
        }
        Policy::Decentralized => {
            handcrafted_only("dCBF")?;
            (0..ep.num_agents())
                .map(|i| {
                    let p = ctx.barrier.decentralized_qp(model, &ep.states, &ep.obstacles, i, &u_nom[i], u_prev, &ctx.world);
                    Control::from_slice(model.system, solve_qp(&p, &ctx.qp).u.as_slice())
                })
                .collect()
        }
    })
}

/// Samples the episode for `seed` and rolls it out.
pub fn run_episode(policy: &Policy, ctx: &EvalContext, seed: u64, log: bool) -> Result<EpisodeOutcome, HarnessError> {
    let world = WorldConfig { seed, ..ctx.world.clone() };
    let ep = sample_episode(&world).map_err(|source| HarnessError::Episode { seed, source })?.for_system(ctx.model.system);
    run_from(policy, ctx, ep, seed, log)
}

/// Rolls out `episode_len` steps from a given episode.
pub fn run_from(policy: &Policy, ctx: &EvalContext, mut ep: Episode, seed: u64, log: bool) -> Result<EpisodeOutcome, HarnessError> {
    let model = &ctx.model;
    let n = ep.num_agents();
    let r = ctx.world.safety_radius;
    let header = EpisodeHeader {
        seed,
        targets: ep.targets.iter().map(arr).collect(),
        obstacles: ep.obstacles.iter().map(|o| (arr(&o.center), o.radius)).collect(),
    };
    let mut safe = vec![true; n];
    let mut violating = vec![false; n];
    let mut events = 0usize;
    let mut reward = 0.0;
    let mut trajectory = Vec::new();
    let mut u_prev = vec![Control::zero(model.system); n];
    for step in 0..=ctx.world.episode_len {
        let report = is_safe(&ep.states, &ep.obstacles, r);
        for i in 0..n {
            let bad = !report.per_agent[i];
            if bad && !violating[i] {
                events += 1;
            }
            violating[i] = bad;
            safe[i] &= !bad;
        }
        if step == ctx.world.episode_len {
            break;
        }
        let u_nom: Vec<Control<f64>> =
            ep.states.iter().zip(&ep.targets).map(|(x, t)| nominal_control(model, &ctx.gains, x, t)).collect();
        let controls = policy_controls(policy, ctx, &ep, &u_nom, &u_prev)?;
        for (u, un) in controls.iter().zip(&u_nom) {
            reward -= u.to_vec().iter().zip(un.to_vec()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
        if log {
            trajectory.push(StepRecord {
                step,
                positions: ep.states.iter().map(|x| arr(&x.position)).collect(),
                velocities: ep.states.iter().map(|x| arr(&x.velocity)).collect(),
                controls: controls.iter().map(|u| u.to_vec()).collect(),
                safe: report.per_agent.clone(),
            });
        }
        ep.advance(model, &controls).map_err(|source| HarnessError::Episode { seed, source })?;
        u_prev = controls;
    }
    let reached = ep.reached(&ctx.world);
    let success: Vec<bool> = safe.iter().zip(&reached).map(|(a, b)| *a && *b).collect();
    let frac = |v: &[bool]| v.iter().filter(|x| **x).count() as f64 / n.max(1) as f64;
    Ok(EpisodeOutcome {
        metrics: EpisodeMetrics {
            safety_rate: frac(&safe),
            reach_rate: frac(&reached),
            success_rate: frac(&success),
            cost: events as f64 / n.max(1) as f64,
            reward,
            safe,
            reached,
            success,
        },
        header,
        trajectory,
    })
}
