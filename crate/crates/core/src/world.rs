//! Episode environments: a cubic arena with spherical obstacles, one target per
//! agent, yaw-anchored LiDAR and the ground-truth collision specification.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, Control, DynamicsError, ModelParams, System};
use crate::liegroup::{rot_z, yaw_of, GroupElement};

/// Rejection-sampling budget for one episode.
pub const MAX_SAMPLING_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("could not place all entities after {attempts} attempts; arena too dense")]
    Infeasible { attempts: usize },
    #[error("integration failed for agent {agent}: {source}")]
    Integration { agent: usize, source: DynamicsError },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub side_length: f64,
    pub num_agents: usize,
    pub num_obstacles: usize,
    pub obstacle_radius: [f64; 2],
    pub safety_radius: f64,
    pub sensing_range: f64,
    pub comm_range: f64,
    pub lidar_rays: usize,
    pub episode_len: usize,
    pub reach_radius: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            side_length: 2.0,
            num_agents: 8,
            num_obstacles: 5,
            obstacle_radius: [0.05, 0.15],
            safety_radius: 0.1,
            sensing_range: 0.5,
            comm_range: 1.0,
            lidar_rays: 32,
            episode_len: 256,
            reach_radius: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if !(self.safety_radius > 0.0 && self.sensing_range > self.safety_radius && self.comm_range > self.sensing_range) {
            return bad("ranges must satisfy comm_range > sensing_range > safety_radius > 0");
        }
        if self.num_agents == 0 {
            return bad("num_agents must be at least 1");
        }
        if !(self.side_length > 0.0) {
            return bad("side_length must be positive");
        }
        let [lo, hi] = self.obstacle_radius;
        if !(lo > 0.0 && hi >= lo) {
            return bad("obstacle_radius must be a positive range [lo, hi]");
        }
        Ok(())
    }

    /// Agents per unit volume.
    pub fn density(&self) -> f64 {
        self.num_agents as f64 / self.side_length.powi(3)
    }

    /// Fraction of the arena volume claimed by safety balls and obstacles.
    pub fn occupancy(&self) -> f64 {
        let ball = |r: f64| 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        let agents = 2.0 * self.num_agents as f64 * ball(self.safety_radius / 2.0);
        let obstacles = self.num_obstacles as f64 * ball(self.obstacle_radius[1] + self.safety_radius);
        (agents + obstacles) / self.side_length.powi(3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl Obstacle {
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).norm() - self.radius
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<AgentState<f64>>,
    pub targets: Vec<Vector3<f64>>,
    pub obstacles: Vec<Obstacle>,
    pub step: usize,
    #[serde(skip, default = "default_rng")]
    pub rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl PartialEq for Episode {
    fn eq(&self, other: &Self) -> bool {
        self.states == other.states
            && self.targets == other.targets
            && self.obstacles == other.obstacles
            && self.step == other.step
    }
}

fn uniform_point(rng: &mut ChaCha8Rng, l: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(0.0..l), rng.gen_range(0.0..l), rng.gen_range(0.0..l))
}

/// Draws obstacles, then agents, then targets uniformly over the arena,
/// rejecting any draw closer than the safety radius to what is already placed.
pub fn sample_episode(cfg: &WorldConfig) -> Result<Episode, WorldError> {
    cfg.validate()?;
    if cfg.occupancy() > 0.3 {
        log::warn!("arena occupancy {:.2}: sampling may fail and the task may be infeasible", cfg.occupancy());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (l, r) = (cfg.side_length, cfg.safety_radius);
    let mut attempts = 0usize;
    let mut draw = |rng: &mut ChaCha8Rng, ok: &dyn Fn(&Vector3<f64>) -> bool| -> Result<Vector3<f64>, WorldError> {
        loop {
            if attempts >= MAX_SAMPLING_ATTEMPTS {
                return Err(WorldError::Infeasible { attempts });
            }
            attempts += 1;
            let p = uniform_point(rng, l);
            if ok(&p) {
                return Ok(p);
            }
        }
    };

    let mut obstacles = Vec::with_capacity(cfg.num_obstacles);
    for _ in 0..cfg.num_obstacles {
        let radius = rng.gen_range(cfg.obstacle_radius[0]..=cfg.obstacle_radius[1]);
        let center = draw(&mut rng, &|_| true)?;
        obstacles.push(Obstacle { center, radius });
    }
    let clear = |p: &Vector3<f64>, pts: &[Vector3<f64>]| {
        pts.iter().all(|q| (p - q).norm() > r) && obstacles.iter().all(|o| o.surface_distance(p) > r)
    };

    let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(cfg.num_agents);
    for _ in 0..cfg.num_agents {
        let p = draw(&mut rng, &|p| clear(p, &positions))?;
        positions.push(p);
    }
    let mut targets: Vec<Vector3<f64>> = Vec::with_capacity(cfg.num_agents);
    for _ in 0..cfg.num_agents {
        let p = draw(&mut rng, &|p| clear(p, &targets))?;
        targets.push(p);
    }
    let states = positions
        .into_iter()
        .map(|p| AgentState::at_rest(p, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)))
        .collect();
    Ok(Episode { states, targets, obstacles, step: 0, rng })
}

impl Episode {
    pub fn num_agents(&self) -> usize {
        self.states.len()
    }

    /// Advances every agent one step under its control.
    pub fn advance(&mut self, params: &ModelParams<f64>, controls: &[Control<f64>]) -> Result<(), WorldError> {
        assert_eq!(controls.len(), self.states.len(), "one control per agent");
        let next: Result<Vec<_>, _> = self
            .states
            .iter()
            .zip(controls)
            .enumerate()
            .map(|(agent, (x, u))| params.step(x, u).map_err(|source| WorldError::Integration { agent, source }))
            .collect();
        self.states = next?;
        self.step += 1;
        Ok(())
    }

    pub fn reached(&self, cfg: &WorldConfig) -> Vec<bool> {
        self.states.iter().zip(&self.targets).map(|(x, t)| (x.position - t).norm() < cfg.reach_radius).collect()
    }

    /// The whole scene moved by `g`; the random stream is carried over.
    pub fn transformed(&self, g: &GroupElement<f64>) -> Self {
        Self {
            states: self.states.iter().map(|x| g.act_state(x)).collect(),
            targets: self.targets.iter().map(|t| g.act_point(t)).collect(),
            obstacles: self.obstacles.iter().map(|o| Obstacle { center: g.act_point(&o.center), radius: o.radius }).collect(),
            step: self.step,
            rng: self.rng.clone(),
        }
    }

    /// Episode for a given system: the quadrotor starts level, the double
    /// integrator keeps its sampled heading as a passive frame.
    pub fn for_system(mut self, system: System) -> Self {
        if system == System::Quadrotor {
            for x in &mut self.states {
                x.rotation = rot_z(yaw_of(&x.rotation));
            }
        }
        self
    }
}

/// A sampled episode with random motion layered on top: velocities inside a
/// ball of radius `speed`, and for the quadrotor tilts up to 0.3 rad and body
/// rates up to 1 rad/s.
pub fn random_scene(cfg: &WorldConfig, system: System, speed: f64, rng: &mut impl Rng) -> Result<Episode, WorldError> {
    let cfg = WorldConfig { seed: rng.gen(), ..cfg.clone() };
    let mut ep = sample_episode(&cfg)?.for_system(system);
    let mut ball = |r: f64| loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() <= 1.0 {
            return v * r;
        }
    };
    for x in &mut ep.states {
        x.velocity = ball(speed);
        if system == System::Quadrotor {
            x.rotation *= crate::liegroup::exp_so3(&Vector3::new(ball(0.3).x, ball(0.3).y, 0.0));
            x.angular_velocity = ball(1.0);
        }
    }
    Ok(ep)
}

/// Unit ray directions of the body-fixed lattice before rotating by yaw.
pub fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    /// One entry per ray; `None` is a miss.
    pub hits: Vec<Option<Vector3<f64>>>,
}

impl LidarScan {
    pub fn hit_points(&self) -> impl Iterator<Item = (usize, &Vector3<f64>)> {
        self.hits.iter().enumerate().filter_map(|(k, h)| h.as_ref().map(|p| (k, p)))
    }

    pub fn num_hits(&self) -> usize {
        self.hits.iter().filter(|h| h.is_some()).count()
    }

    /// Hit `k` as a node state: the point plus identity attitude and zero twist.
    pub fn padded(&self, k: usize) -> Option<AgentState<f64>> {
        self.hits[k].map(AgentState::point)
    }
}

/// Smallest non-negative distance along the unit ray `d` from `o` to the sphere.
pub fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, s: &Obstacle) -> Option<f64> {
    let oc = o - s.center;
    let b = d.dot(&oc);
    let c = oc.norm_squared() - s.radius * s.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = (-b - sq, -b + sq);
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        // origin inside the sphere
        Some(0.0)
    } else {
        None
    }
}

pub fn lidar(x: &AgentState<f64>, obstacles: &[Obstacle], cfg: &WorldConfig) -> LidarScan {
    let rz = rot_z(yaw_of(&x.rotation));
    let hits = fibonacci_directions(cfg.lidar_rays)
        .into_iter()
        .map(|d| {
            let d = rz * d;
            obstacles
                .iter()
                .filter_map(|s| ray_sphere(&x.position, &d, s))
                .filter(|&t| t <= cfg.sensing_range)
                .min_by(f64::total_cmp)
                .map(|t| x.position + d * t)
        })
        .collect();
    LidarScan { hits }
}

pub fn scan_all(ep: &Episode, cfg: &WorldConfig) -> Vec<LidarScan> {
    ep.states.iter().map(|x| lidar(x, &ep.obstacles, cfg)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub per_agent: Vec<bool>,
    pub all: bool,
}

/// Agent `i` is safe iff every other agent is strictly farther than `r` and it
/// is strictly outside every obstacle.
pub fn is_safe(states: &[AgentState<f64>], obstacles: &[Obstacle], r: f64) -> SafetyReport {
    let n = states.len();
    let mut per_agent = vec![true; n];
    for i in 0..n {
        let p = &states[i].position;
        if obstacles.iter().any(|o| o.surface_distance(p) <= 0.0) {
            per_agent[i] = false;
        }
        for j in (i + 1)..n {
            if (p - states[j].position).norm() <= r {
                per_agent[i] = false;
                per_agent[j] = false;
            }
        }
    }
    let all = per_agent.iter().all(|&s| s);
    SafetyReport { per_agent, all }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn single_agent_episode() {
        let c = WorldConfig { num_agents: 1, num_obstacles: 0, ..cfg() };
        let ep = sample_episode(&c).unwrap();
        assert_eq!(ep.states.len(), 1);
        assert_eq!(ep.targets.len(), 1);
        let inside = |p: &Vector3<f64>| p.iter().all(|&x| (0.0..=c.side_length).contains(&x));
        assert!(inside(&ep.states[0].position) && inside(&ep.targets[0]));
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = WorldConfig { seed: 17, ..cfg() };
        assert_eq!(sample_episode(&c).unwrap(), sample_episode(&c).unwrap());
    }

    #[test]
    fn training_config_respects_clearances() {
        for seed in 0..20 {
            let c = WorldConfig { seed, ..cfg() };
            let ep = sample_episode(&c).unwrap();
            assert_eq!(ep.obstacles.len(), 5);
            for i in 0..8 {
                for o in &ep.obstacles {
                    assert!(o.surface_distance(&ep.states[i].position) > c.safety_radius);
                }
                for j in (i + 1)..8 {
                    assert!((ep.states[i].position - ep.states[j].position).norm() > c.safety_radius);
                    assert!((ep.targets[i] - ep.targets[j]).norm() > c.safety_radius);
                }
            }
        }
    }

    #[test]
    fn overcrowded_arena_is_infeasible() {
        let c = WorldConfig { side_length: 0.1, num_agents: 50, num_obstacles: 0, ..cfg() };
        assert!(matches!(sample_episode(&c), Err(WorldError::Infeasible { .. })));
    }

    #[test]
    fn ranges_must_nest() {
        let c = WorldConfig { comm_range: 0.4, ..cfg() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn lidar_without_obstacles_misses() {
        let x = AgentState::at_rest(Vector3::new(1.0, 1.0, 1.0), 0.3);
        assert_eq!(lidar(&x, &[], &cfg()).num_hits(), 0);
    }

    #[test]
    fn lidar_hits_sphere_dead_ahead() {
        let c = cfg();
        let yaw = 0.8;
        let x = AgentState::at_rest(Vector3::new(0.2, -0.1, 0.5), yaw);
        let k = 5;
        let dir = rot_z(yaw) * fibonacci_directions(c.lidar_rays)[k];
        let (d, rad) = (0.4, 0.1);
        let s = Obstacle { center: x.position + dir * d, radius: rad };
        let scan = lidar(&x, &[s], &c);
        let hit = scan.hits[k].expect("ray k must hit");
        assert!(((hit - x.position).norm() - (d - rad)).abs() < 1e-9);
        let far = Obstacle { center: x.position + dir * 2.0, radius: rad };
        assert_eq!(lidar(&x, &[far], &c).num_hits(), 0);
    }

    #[test]
    fn safety_flags() {
        let r = 0.1;
        let at = |x: f64| AgentState::at_rest(Vector3::new(x, 0.0, 0.0), 0.0);
        assert!(is_safe(&[at(0.0), at(2.0 * r)], &[], r).all);
        let rep = is_safe(&[at(0.0), at(r / 2.0), at(1.0)], &[], r);
        assert_eq!(rep.per_agent, vec![false, false, true]);
        assert!(!is_safe(&[at(0.0), at(r)], &[], r).all);
        let o = Obstacle { center: Vector3::new(1.0, 0.0, 0.0), radius: 0.2 };
        assert_eq!(is_safe(&[at(0.0), at(0.85)], &[o], r).per_agent, vec![true, false]);
    }

    #[test]
    fn integration_error_names_agent() {
        let mut ep = sample_episode(&WorldConfig { num_agents: 3, num_obstacles: 0, ..cfg() }).unwrap();
        ep.states[2].velocity.x = f64::NAN;
        let m = ModelParams::double_integrator();
        let u = vec![Control::Accel(Vector3::zeros()); 3];
        assert!(matches!(ep.advance(&m, &u), Err(WorldError::Integration { agent: 2, .. })));
    }
}
