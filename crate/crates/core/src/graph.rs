//! The augmented swarm graph: agent, LiDAR-hit and target nodes with local
//! frames, radius edges between agents, and per-agent neighbourhood slices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::AgentState;
use crate::liegroup::{frame_of, GroupElement};
use crate::world::{Episode, LidarScan, WorldConfig};

/// One-hot kind (3) followed by the flattened state block (18).
pub const FEATURE_DIM: usize = 21;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown agent id {0}")]
    UnknownAgent(usize),
    #[error("expected one lidar scan per agent: {scans} scans for {agents} agents")]
    ScanCount { scans: usize, agents: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Agent,
    Lidar,
    Target,
}

impl NodeKind {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            NodeKind::Agent => [1.0, 0.0, 0.0],
            NodeKind::Lidar => [0.0, 1.0, 0.0],
            NodeKind::Target => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    /// Agent that owns the node; an agent node owns itself.
    pub owner: usize,
    /// Raw state; static nodes carry identity attitude and zero twist.
    pub state: AgentState<f64>,
    pub frame: GroupElement<f64>,
}

impl Node {
    pub fn agent(id: usize, state: AgentState<f64>) -> Self {
        Self { kind: NodeKind::Agent, owner: id, frame: frame_of(&state), state }
    }

    pub fn static_point(kind: NodeKind, owner: usize, state: AgentState<f64>) -> Self {
        Self { kind, owner, frame: GroupElement::translation(state.position), state }
    }

    pub fn feature(&self) -> [f64; FEATURE_DIM] {
        let mut f = [0.0; FEATURE_DIM];
        f[..3].copy_from_slice(&self.kind.one_hot());
        f[3..].copy_from_slice(&self.state.to_array());
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub nodes: Vec<Node>,
    /// Directed `(receiver, sender)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub num_agents: usize,
    /// Node ids of each agent's LiDAR hits.
    pub lidar_nodes: Vec<Vec<usize>>,
    /// Node id of each agent's target.
    pub target_nodes: Vec<usize>,
}

/// Nodes are ordered agents, then LiDAR hits by `(agent, ray)`, then targets.
pub fn build_graph(ep: &Episode, scans: &[LidarScan], cfg: &WorldConfig) -> Result<GraphSnapshot, GraphError> {
    build_graph_from(&ep.states, &ep.targets, scans, cfg.comm_range)
}

pub fn build_graph_from(
    states: &[AgentState<f64>],
    targets: &[nalgebra::Vector3<f64>],
    scans: &[LidarScan],
    comm_range: f64,
) -> Result<GraphSnapshot, GraphError> {
    let n = states.len();
    if scans.len() != n {
        return Err(GraphError::ScanCount { scans: scans.len(), agents: n });
    }
    let mut nodes: Vec<Node> = states.iter().enumerate().map(|(i, x)| Node::agent(i, *x)).collect();
    let mut lidar_nodes = vec![Vec::new(); n];
    for (i, scan) in scans.iter().enumerate() {
        for (_, y) in scan.hit_points() {
            lidar_nodes[i].push(nodes.len());
            nodes.push(Node::static_point(NodeKind::Lidar, i, AgentState::point(*y)));
        }
    }
    let mut target_nodes = Vec::with_capacity(n);
    for (i, t) in targets.iter().enumerate() {
        target_nodes.push(nodes.len());
        nodes.push(Node::static_point(NodeKind::Target, i, AgentState::point(*t)));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && (states[i].position - states[j].position).norm() <= comm_range {
                edges.push((i, j));
            }
        }
        edges.extend(lidar_nodes[i].iter().map(|&k| (i, k)));
        edges.push((i, target_nodes[i]));
    }
    Ok(GraphSnapshot { nodes, edges, num_agents: n, lidar_nodes, target_nodes })
}

impl GraphSnapshot {
    /// Agents sending to `i`, in ascending order.
    pub fn agent_neighbors(&self, i: usize) -> Vec<usize> {
        self.edges.iter().filter(|&&(r, s)| r == i && s < self.num_agents).map(|&(_, s)| s).collect()
    }

    /// Ego first, then neighbouring agents ascending, then the ego's LiDAR
    /// hits and its target; edges are those of the parent among these nodes.
    pub fn ego_subgraph(&self, agent: usize) -> Result<Subgraph, GraphError> {
        if agent >= self.num_agents {
            return Err(GraphError::UnknownAgent(agent));
        }
        let mut ids = vec![agent];
        ids.extend(self.agent_neighbors(agent));
        ids.extend(&self.lidar_nodes[agent]);
        ids.push(self.target_nodes[agent]);
        let mut local = std::collections::HashMap::with_capacity(ids.len());
        for (k, &id) in ids.iter().enumerate() {
            local.insert(id, k);
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|(r, s)| Some((*local.get(r)?, *local.get(s)?)))
            .collect();
        Ok(Subgraph {
            ego: agent,
            nodes: ids.iter().map(|&id| self.nodes[id].clone()).collect(),
            parent_ids: ids,
            edges,
        })
    }

    pub fn subgraphs(&self) -> Vec<Subgraph> {
        (0..self.num_agents).map(|i| self.ego_subgraph(i).expect("agent id in range")).collect()
    }
}

/// One agent's neighbourhood with local node indices; the ego is node 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub ego: usize,
    pub nodes: Vec<Node>,
    /// Node ids in the parent graph.
    pub parent_ids: Vec<usize>,
    /// Directed `(receiver, sender)` pairs in local indices.
    pub edges: Vec<(usize, usize)>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Agent ids present, ego first.
    pub fn agent_ids(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Agent).map(|n| n.owner).collect()
    }

    pub fn num_agent_nodes(&self) -> usize {
        self.nodes.iter().take_while(|n| n.kind == NodeKind::Agent).count()
    }

    /// Row-major attention mask: `mask[r * n + s]` is true iff `s` sends to `r`
    /// or `s == r`.
    pub fn attention_mask(&self) -> Vec<bool> {
        let n = self.nodes.len();
        let mut m = vec![false; n * n];
        for k in 0..n {
            m[k * n + k] = true;
        }
        for &(r, s) in &self.edges {
            m[r * n + s] = true;
        }
        m
    }

    /// The subgraph with every node moved by `g`.
    pub fn transformed(&self, g: &GroupElement<f64>) -> Self {
        let mut out = self.clone();
        for node in &mut out.nodes {
            node.state = g.act_state(&node.state);
            node.frame = match node.kind {
                NodeKind::Agent => frame_of(&node.state),
                _ => GroupElement::translation(node.state.position),
            };
            if node.kind != NodeKind::Agent {
                // static nodes keep the identity attitude
                node.state.rotation = nalgebra::Matrix3::identity();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn scene(positions: &[[f64; 3]]) -> (Vec<AgentState<f64>>, Vec<Vector3<f64>>, Vec<LidarScan>) {
        let states = positions.iter().map(|p| AgentState::at_rest(Vector3::from(*p), 0.0)).collect::<Vec<_>>();
        let targets = positions.iter().map(|p| Vector3::from(*p) + Vector3::new(0.0, 0.0, 0.5)).collect();
        let scans = positions.iter().map(|_| LidarScan { hits: vec![None; 4] }).collect();
        (states, targets, scans)
    }

    #[test]
    fn lone_agent_has_one_edge() {
        let (s, t, l) = scene(&[[0.0, 0.0, 0.0]]);
        let g = build_graph_from(&s, &t, &l, 1.0).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges, vec![(0, 1)]);
        let sub = g.ego_subgraph(0).unwrap();
        assert_eq!(sub.nodes.len(), 2);
        assert_eq!(sub.nodes[1].kind, NodeKind::Target);
    }

    #[test]
    fn radius_edges() {
        let (s, t, l) = scene(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        let g = build_graph_from(&s, &t, &l, 1.0).unwrap();
        assert!(g.edges.contains(&(0, 1)) && g.edges.contains(&(1, 0)));
        let (s, t, l) = scene(&[[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]]);
        let g = build_graph_from(&s, &t, &l, 1.0).unwrap();
        assert!(!g.edges.iter().any(|&(r, s)| r < 2 && s < 2));
    }

    #[test]
    fn lidar_nodes_follow_agents() {
        let (s, t, mut l) = scene(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        l[1].hits[2] = Some(Vector3::new(3.2, 0.0, 0.0));
        l[0].hits[0] = Some(Vector3::new(0.1, 0.0, 0.0));
        let g = build_graph_from(&s, &t, &l, 1.0).unwrap();
        let kinds: Vec<_> = g.nodes.iter().map(|n| (n.kind, n.owner)).collect();
        assert_eq!(
            kinds,
            vec![
                (NodeKind::Agent, 0),
                (NodeKind::Agent, 1),
                (NodeKind::Lidar, 0),
                (NodeKind::Lidar, 1),
                (NodeKind::Target, 0),
                (NodeKind::Target, 1)
            ]
        );
        let sub = g.ego_subgraph(1).unwrap();
        assert_eq!(sub.parent_ids, vec![1, 3, 5]);
        assert_eq!(sub.edges, vec![(0, 1), (0, 2)]);
        assert!(matches!(g.ego_subgraph(2), Err(GraphError::UnknownAgent(2))));
    }

    #[test]
    fn clique_subgraph_holds_every_agent() {
        let pts: Vec<[f64; 3]> = (0..8).map(|k| [0.05 * k as f64, 0.0, 0.0]).collect();
        let (s, t, l) = scene(&pts);
        let g = build_graph_from(&s, &t, &l, 1.0).unwrap();
        let sub = g.ego_subgraph(3).unwrap();
        assert_eq!(sub.agent_ids(), vec![3, 0, 1, 2, 4, 5, 6, 7]);
        assert_eq!(sub.num_agent_nodes(), 8);
    }

    #[test]
    fn static_features_are_padded() {
        let (s, t, l) = scene(&[[0.3, 0.0, 0.0]]);
        let g = build_graph_from(&s, &t, &l, 1.0).unwrap();
        let f = g.nodes[1].feature();
        assert_eq!(&f[..3], &[0.0, 0.0, 1.0]);
        assert_eq!(&f[6..15], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(f[15..].iter().all(|&x| x == 0.0));
    }
}
