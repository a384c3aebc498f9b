use egcbf::dynamics::{AgentState, System};
use egcbf::egformer::{NetConfig, NetParams};
use egcbf::harness::{run_episode, run_from, run_sweep, EvalContext, ExperimentConfig, Method, Policy, SweepSpec};
use egcbf::liegroup::GroupElement;
use egcbf::world::{sample_episode, WorldConfig};
use nalgebra::Vector3;

fn ctx(world: WorldConfig) -> EvalContext {
    let mut cfg = ExperimentConfig::default();
    cfg.world = world;
    cfg.eval_context()
}

fn small_world() -> WorldConfig {
    WorldConfig { num_agents: 5, num_obstacles: 2, side_length: 1.2, episode_len: 80, ..WorldConfig::default() }
}

#[test]
fn lone_agent_under_nominal_control_is_safe_and_arrives() {
    let c = ctx(WorldConfig { num_agents: 1, num_obstacles: 0, ..WorldConfig::default() });
    for seed in 0..5 {
        let m = run_episode(&Policy::Nominal, &c, seed, false).unwrap().metrics;
        assert_eq!((m.safety_rate, m.reach_rate, m.cost), (1.0, 1.0, 0.0));
    }
}

#[test]
fn head_on_swap_without_a_filter_collides() {
    let c = ctx(WorldConfig { num_agents: 2, num_obstacles: 0, ..WorldConfig::default() });
    let mut ep = sample_episode(&WorldConfig { num_agents: 2, num_obstacles: 0, ..WorldConfig::default() }).unwrap();
    let (a, b) = (Vector3::new(0.5, 1.0, 1.0), Vector3::new(1.5, 1.0, 1.0));
    ep.states = vec![AgentState::at_rest(a, 0.0), AgentState::at_rest(b, 0.0)];
    ep.targets = vec![b, a];
    let nominal = run_from(&Policy::Nominal, &c, ep.clone(), 0, false).unwrap().metrics;
    assert!(nominal.cost > 0.0);
    let filtered = run_from(&Policy::Centralized, &c, ep, 0, false).unwrap().metrics;
    assert_eq!(filtered.cost, 0.0);
}

#[test]
fn success_is_safe_and_reached() {
    let c = ctx(small_world());
    for (seed, policy) in (0..6).zip([Policy::Nominal, Policy::Centralized, Policy::Decentralized].into_iter().cycle()) {
        let m = run_episode(&policy, &c, seed, false).unwrap().metrics;
        for i in 0..m.safe.len() {
            assert_eq!(m.success[i], m.safe[i] && m.reached[i]);
        }
        assert!(m.success_rate <= m.safety_rate.min(m.reach_rate));
        assert!(m.cost >= 0.0);
    }
}

#[test]
fn metrics_do_not_depend_on_where_the_scene_sits() {
    let c = ctx(small_world());
    let params = NetParams::new(NetConfig { d_model: 8, d_ff: 12, head_hidden: 8, ..NetConfig::default() }, System::DoubleIntegrator);
    let g = GroupElement::new(1.1, Vector3::new(3.0, -2.0, 0.7));
    for seed in 0..3 {
        let ep = sample_episode(&WorldConfig { seed, ..small_world() }).unwrap();
        for policy in [Policy::Nominal, Policy::Learned(&params)] {
            let a = run_from(&policy, &c, ep.clone(), seed, false).unwrap().metrics;
            let b = run_from(&policy, &c, ep.transformed(&g), seed, false).unwrap().metrics;
            assert_eq!((&a.safe, &a.reached), (&b.safe, &b.reached));
            assert!((a.reward - b.reward).abs() < 1e-6 * a.reward.abs().max(1.0));
        }
    }
}

#[test]
fn density_column_is_agents_per_volume() {
    let c = ctx(WorldConfig { episode_len: 2, ..WorldConfig::default() });
    let spec = SweepSpec {
        sizes: vec![8, 32, 128],
        side_length: 4.0,
        obstacles: 0,
        episodes: 1,
        seed_base: 0,
        methods: vec![Method::Nominal],
        label: String::new(),
        workers: 1,
    };
    let rows = run_sweep(&spec, &c, None).unwrap();
    let densities: Vec<f64> = rows.iter().map(|r| r.density).collect();
    assert_eq!(densities, vec![0.125, 0.5, 2.0]);
}

#[test]
fn episode_seeds_are_reproducible() {
    let c = ctx(small_world());
    let a = run_episode(&Policy::Decentralized, &c, 42, true).unwrap();
    let b = run_episode(&Policy::Decentralized, &c, 42, true).unwrap();
    assert_eq!(a, b);
}
