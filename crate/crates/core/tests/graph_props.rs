use egcbf::dynamics::System;
use egcbf::graph::{build_graph, build_graph_from, GraphSnapshot, NodeKind};
use egcbf::liegroup::{yaw_of, GroupElement};
use egcbf::world::{random_scene, scan_all, Episode, WorldConfig};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> WorldConfig {
    WorldConfig { num_agents: 6, num_obstacles: 3, side_length: 1.5, ..WorldConfig::default() }
}

fn scene(seed: u64) -> Episode {
    random_scene(&world(), System::Quadrotor, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn graph(ep: &Episode) -> GraphSnapshot {
    build_graph(ep, &scan_all(ep, &world()), &world()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn topology_is_invariant(seed in any::<u64>(), theta in -3.2..3.2f64, x in -4.0..4.0f64, z in -4.0..4.0f64) {
        let ep = scene(seed);
        let g = GroupElement::new(theta, Vector3::new(x, -x, z));
        let (a, b) = (graph(&ep), graph(&ep.transformed(&g)));
        prop_assert_eq!(a.edges, b.edges);
        prop_assert_eq!(a.lidar_nodes, b.lidar_nodes);
    }

    #[test]
    fn every_node_is_at_the_origin_of_its_own_frame(seed in any::<u64>()) {
        for node in graph(&scene(seed)).nodes {
            let local = node.frame.inverse().act_state(&node.state);
            prop_assert!(local.position.norm() < 1e-12);
            prop_assert!(yaw_of(&local.rotation).abs() < 1e-12);
        }
    }

    #[test]
    fn relabeling_agents_permutes_the_graph(seed in any::<u64>(), shift in 1usize..6) {
        let ep = scene(seed);
        let n = ep.states.len();
        let scans = scan_all(&ep, &world());
        let perm: Vec<usize> = (0..n).map(|k| (k + shift) % n).collect();
        let a = build_graph_from(&ep.states, &ep.targets, &scans, world().comm_range).unwrap();
        let b = build_graph_from(
            &perm.iter().map(|&k| ep.states[k]).collect::<Vec<_>>(),
            &perm.iter().map(|&k| ep.targets[k]).collect::<Vec<_>>(),
            &perm.iter().map(|&k| scans[k].clone()).collect::<Vec<_>>(),
            world().comm_range,
        )
        .unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let (sa, sb) = (a.ego_subgraph(old).unwrap(), b.ego_subgraph(new).unwrap());
            prop_assert_eq!(sa.len(), sb.len());
            // same node states in the same roles; neighbour order may differ
            let key = |s: &egcbf::graph::Subgraph| {
                let mut v: Vec<_> = s.nodes.iter().map(|n| (n.kind, n.state.position.iter().map(|c| c.to_bits()).collect::<Vec<_>>())).collect();
                v.sort_by(|x, y| x.1.cmp(&y.1));
                v
            };
            prop_assert_eq!(key(&sa), key(&sb));
            prop_assert_eq!(sa.edges.len(), sb.edges.len());
        }
    }
}

#[test]
fn far_away_agent_does_not_touch_a_subgraph() {
    let ep = scene(3);
    let cfg = world();
    let mut bigger = ep.clone();
    let mut far = ep.states[0];
    far.position += Vector3::new(50.0, 0.0, 0.0);
    bigger.states.push(far);
    bigger.targets.push(far.position);
    let (a, b) = (graph(&ep), build_graph(&bigger, &scan_all(&bigger, &cfg), &cfg).unwrap());
    for i in 0..ep.states.len() {
        let (sa, sb) = (a.ego_subgraph(i).unwrap(), b.ego_subgraph(i).unwrap());
        assert_eq!(sa.nodes, sb.nodes);
        assert_eq!(sa.edges, sb.edges);
    }
}

#[test]
fn subgraph_edges_stay_inside_the_neighbourhood() {
    let g = graph(&scene(9));
    for sub in g.subgraphs() {
        assert_eq!(sub.nodes[0].owner, sub.ego);
        assert_eq!(sub.nodes.iter().filter(|n| n.kind == NodeKind::Target).count(), 1);
        for &(r, s) in &sub.edges {
            assert!(r < sub.len() && s < sub.len());
        }
    }
}
