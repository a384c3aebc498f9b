use egcbf::dynamics::AgentState;
use egcbf::liegroup::{exp_so3, frame_of, is_rotation, yaw_of, GroupElement};
use nalgebra::{Matrix4, Vector3};
use proptest::prelude::*;

type G = GroupElement<f64>;

fn element() -> impl Strategy<Value = G> {
    (-10.0..10.0f64, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64)
        .prop_map(|(t, x, y, z)| G::new(t, Vector3::new(x, y, z)))
}

fn state() -> impl Strategy<Value = AgentState<f64>> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-1.5..1.5f64), prop::array::uniform3(-2.0..2.0f64), prop::array::uniform3(-2.0..2.0f64))
        .prop_map(|(p, w, v, om)| AgentState {
            position: Vector3::from(p),
            rotation: exp_so3(&Vector3::from(w)),
            velocity: Vector3::from(v),
            angular_velocity: Vector3::from(om),
        })
}

fn max_abs_diff(a: &AgentState<f64>, b: &AgentState<f64>) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn identity_and_inverse(g in element()) {
        let e = G::identity();
        prop_assert!(e.compose(&g).distance(&g) <= 1e-12);
        prop_assert!(g.compose(&e).distance(&g) <= 1e-12);
        prop_assert!(g.compose(&g.inverse()).distance(&e) <= 1e-12);
        prop_assert!(g.inverse().compose(&g).distance(&e) <= 1e-12);
    }

    #[test]
    fn associativity(a in element(), b in element(), c in element()) {
        let l = a.compose(&b).compose(&c);
        let r = a.compose(&b.compose(&c));
        prop_assert!(l.distance(&r) <= 1e-12);
    }

    #[test]
    fn theta_is_wrapped(a in element(), b in element()) {
        let t = a.compose(&b).theta();
        prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&t));
    }

    #[test]
    fn compose_matches_homogeneous_product(a in element(), b in element()) {
        let m: Matrix4<f64> = a.matrix() * b.matrix();
        prop_assert!((a.compose(&b).matrix() - m).abs().max() <= 1e-12);
    }

    #[test]
    fn state_action_is_a_group_action(g in element(), h in element(), x in state()) {
        let lhs = g.compose(&h).act_state(&x);
        let rhs = g.act_state(&h.act_state(&x));
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-11);
        prop_assert!(max_abs_diff(&g.inverse().act_state(&g.act_state(&x)), &x) <= 1e-12);
        prop_assert!(max_abs_diff(&G::identity().act_state(&x), &x) == 0.0);
    }

    #[test]
    fn frame_of_is_equivariant(g in element(), x in state()) {
        let lhs = frame_of(&g.act_state(&x));
        let rhs = g.compose(&frame_of(&x));
        prop_assert!(lhs.distance(&rhs) <= 1e-10);
    }

    #[test]
    fn frame_of_canonicalizes(x in state()) {
        let c = frame_of(&x).inverse().act_state(&x);
        prop_assert!(c.position.norm() <= 1e-12);
        prop_assert!(yaw_of(&c.rotation).abs() <= 1e-10);
        prop_assert!(is_rotation(&c.rotation, 1e-10));
    }
}
