use egcbf::dynamics::{AgentState, Control, ControlBounds, ModelParams, System};
use egcbf::egformer::{cbf_input_gradients, EgoGradient, NetConfig, NetParams};
use egcbf::graph::build_graph;
use egcbf::liegroup::{exp_so3, GroupElement};
use egcbf::safectrl::{
    cbf_constraint_value, kkt_residuals, learned_qp, nominal_control, solve_qp, split_controls, ClassK, HandcraftedCbf,
    NominalGains, QpProblem, QpSettings, QpStatus,
};
use egcbf::world::{random_scene, scan_all, WorldConfig};
use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v3(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
}

fn model(system: System) -> ModelParams<f64> {
    match system {
        System::Quadrotor => ModelParams::quadrotor(),
        System::DoubleIntegrator => ModelParams::double_integrator(),
    }
}

#[test]
fn nominal_at_target_is_quiet() {
    let g = NominalGains::default();
    let t = Vector3::new(1.0, 2.0, 0.5);
    let di = model(System::DoubleIntegrator);
    assert_eq!(nominal_control(&di, &g, &AgentState::at_rest(t, 0.4), &t), Control::Accel(Vector3::zeros()));
    let q = model(System::Quadrotor);
    match nominal_control(&q, &g, &AgentState::at_rest(t, 0.4), &t) {
        Control::Quadrotor { torque, thrust } => {
            assert!(torque.norm() < 1e-15);
            assert!((thrust - 0.981).abs() < 1e-12);
        }
        _ => unreachable!(),
    }
}

#[test]
fn double_integrator_heads_for_target() {
    let g = NominalGains::default();
    let di = model(System::DoubleIntegrator);
    let x = AgentState::at_rest(Vector3::new(0.0, 0.0, 0.0), 1.0);
    let t = Vector3::new(0.3, -0.2, 0.1);
    let a = Vector3::from_row_slice(&nominal_control(&di, &g, &x, &t).to_vec());
    assert!(a.normalize().dot(&t.normalize()) > 1.0 - 1e-12);
}

#[test]
fn nominal_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gains = NominalGains::default();
    for system in [System::DoubleIntegrator, System::Quadrotor] {
        let m = model(system);
        for _ in 0..200 {
            let x = AgentState {
                position: v3(&mut rng, 2.0),
                rotation: exp_so3(&v3(&mut rng, 0.5)),
                velocity: v3(&mut rng, 1.0),
                angular_velocity: v3(&mut rng, 1.0),
            };
            let t = v3(&mut rng, 2.0);
            let g = GroupElement::new(rng.gen_range(-3.2..3.2), v3(&mut rng, 3.0));
            let lhs = nominal_control(&m, &gains, &g.act_state(&x), &g.act_point(&t)).to_vec();
            let rhs = g.act_control(&nominal_control(&m, &gains, &x, &t)).to_vec();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-9, "{system:?}: {lhs:?} vs {rhs:?}");
            }
        }
    }
}

#[test]
fn quadrotor_nominal_flies_to_target() {
    let m = model(System::Quadrotor);
    let gains = NominalGains::default();
    let t = Vector3::new(0.5, -0.3, 0.4);
    let mut x = AgentState::at_rest(Vector3::zeros(), 0.7);
    for _ in 0..400 {
        x = m.step(&x, &nominal_control(&m, &gains, &x, &t)).unwrap();
    }
    assert!((x.position - t).norm() < 0.02, "{:?}", x.position);
}

#[test]
fn zero_gradients_leave_alpha_of_h() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = WorldConfig { num_agents: 3, num_obstacles: 0, ..WorldConfig::default() };
    let ep = random_scene(&cfg, System::DoubleIntegrator, 0.5, &mut rng).unwrap();
    let graph = build_graph(&ep, &scan_all(&ep, &cfg), &cfg).unwrap();
    let grads: Vec<EgoGradient> = (0..3)
        .map(|i| EgoGradient { ego: i, h: 0.3 * i as f64, grads: vec![(i, [0.0; 18])] })
        .collect();
    let u = vec![Control::Accel(Vector3::new(1.0, 1.0, 1.0)); 3];
    let m = model(System::DoubleIntegrator);
    let vals = cbf_constraint_value(&grads, &graph, &u, &m, ClassK::Linear(2.0)).unwrap();
    assert_eq!(vals, vec![0.0, 0.6, 1.2]);
    assert!(cbf_constraint_value(&grads, &graph, &u[..1], &m, ClassK::Linear(2.0)).is_err());
}

#[test]
fn constraint_value_is_preserved_by_the_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = WorldConfig { num_agents: 5, num_obstacles: 3, side_length: 1.2, ..WorldConfig::default() };
    for case in 0..20 {
        let system = if case % 2 == 0 { System::DoubleIntegrator } else { System::Quadrotor };
        let m = model(system);
        let params = NetParams::new(NetConfig { d_model: 16, d_ff: 16, head_hidden: 16, seed: case, ..Default::default() }, system);
        let ep = random_scene(&cfg, system, 0.5, &mut rng).unwrap();
        let g = GroupElement::new(rng.gen_range(-3.2..3.2), v3(&mut rng, 3.0));
        let u: Vec<Control<f64>> = (0..5)
            .map(|_| {
                let raw: Vec<f64> = (0..system.control_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                m.squash(&raw)
            })
            .collect();
        let gu: Vec<Control<f64>> = u.iter().map(|c| g.act_control(c)).collect();
        let moved = ep.transformed(&g);
        let ga = build_graph(&ep, &scan_all(&ep, &cfg), &cfg).unwrap();
        let gb = build_graph(&moved, &scan_all(&moved, &cfg), &cfg).unwrap();
        let va = cbf_constraint_value(&cbf_input_gradients(&params, &ga), &ga, &u, &m, ClassK::Linear(1.0)).unwrap();
        let vb = cbf_constraint_value(&cbf_input_gradients(&params, &gb), &gb, &gu, &m, ClassK::Linear(1.0)).unwrap();
        for (a, b) in va.iter().zip(&vb) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn handcrafted_barrier_values() {
    let h = HandcraftedCbf::default();
    let r = 0.1;
    assert!(h.value(&Vector3::new(2.0 * r, 0.0, 0.0), &Vector3::zeros(), r) > 0.0);
    assert!(h.value(&Vector3::new(0.0, r, 0.0), &Vector3::zeros(), r).abs() < 1e-15);
    assert!(h.value(&Vector3::zeros(), &Vector3::new(1.0, 0.0, 0.0), r).is_finite());
}

#[test]
fn handcrafted_derivative_matches_the_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cbf = HandcraftedCbf::default();
    for _ in 0..100 {
        let (dp, dv, da) = (v3(&mut rng, 1.0), v3(&mut rng, 1.0), v3(&mut rng, 2.0));
        let along = |t: f64| cbf.value(&(dp + dv * t + da * (0.5 * t * t)), &(dv + da * t), 0.1);
        let eps = 1e-5;
        let fd = (along(eps) - along(-eps)) / (2.0 * eps);
        assert!((fd - cbf.derivative(&dp, &dv, &da)).abs() < 1e-8);
    }
    // head-on approach lowers h
    let (dp, dv) = (Vector3::new(0.5, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0));
    assert!(cbf.derivative(&dp, &dv, &Vector3::zeros()) < 0.0);
}

fn boxes(n: usize, d: usize, lo: f64, hi: f64) -> Vec<ControlBounds<f64>> {
    vec![ControlBounds::Box { lo: vec![lo; d], hi: vec![hi; d] }; n]
}

#[test]
fn unconstrained_problem_returns_nominal() {
    let p = QpProblem::new(vec![0.3, -0.2, 0.1], vec![], boxes(1, 3, -1.0, 1.0), 3);
    let s = solve_qp(&p, &QpSettings::default());
    assert_eq!(s.u, p.u_nom);
    assert_eq!(s.status, QpStatus::Solved);
}

#[test]
fn single_halfspace_is_a_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let u0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let au: f64 = a.iter().zip(&u0).map(|(x, y)| x * y).sum();
        let b = au + rng.gen_range(0.1..1.0);
        let wide = boxes(1, 4, -1e6, 1e6);
        let p = QpProblem::new(u0.clone(), vec![(a.clone(), b)], wide, 4);
        let s = solve_qp(&p, &QpSettings::default());
        let an: f64 = a.iter().map(|x| x * x).sum();
        for k in 0..4 {
            let expected = u0[k] + (b - au) / an * a[k];
            assert!((s.u[k] - expected).abs() < 1e-9);
        }
    }
}

fn random_problem(rng: &mut impl Rng, cylinder: bool) -> QpProblem {
    let agents = rng.gen_range(1..4);
    let d = 3;
    let n = agents * d;
    let sets: Vec<ControlBounds<f64>> = (0..agents)
        .map(|_| {
            if cylinder {
                ControlBounds::Cylinder { radius: rng.gen_range(0.5..2.0), z_lo: -rng.gen_range(0.5..2.0), z_hi: rng.gen_range(0.5..2.0) }
            } else {
                let lo: Vec<f64> = (0..d).map(|_| -rng.gen_range(0.2..2.0)).collect();
                let hi: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..2.0)).collect();
                ControlBounds::Box { lo, hi }
            }
        })
        .collect();
    // a strictly interior point keeps the problem feasible
    let inner: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.15..0.15)).collect();
    let rows = (0..rng.gen_range(1..6))
        .map(|_| {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ai: f64 = a.iter().zip(&inner).map(|(x, y)| x * y).sum();
            (a, ai - rng.gen_range(0.0..0.3))
        })
        .collect();
    let u_nom = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    QpProblem::new(u_nom, rows, sets, d)
}

#[test]
fn kkt_residuals_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..200 {
        let p = random_problem(&mut rng, case % 2 == 1);
        let s = solve_qp(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Solved, "case {case}");
        let k = kkt_residuals(&p, &s);
        assert!(k.max() < 1e-6, "case {case}: {k:?}");
    }
}

#[test]
fn coupled_pair_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let u_nom: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<(Vec<f64>, f64)> = (0..2)
            .map(|_| ((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(-0.2..0.4)))
            .collect();
        let p = QpProblem::new(u_nom.clone(), rows.clone(), boxes(2, 2, -1.0, 1.0), 2);
        let s = solve_qp(&p, &QpSettings::default());
        if s.status != QpStatus::Solved {
            continue;
        }
        let feasible = |u: &[f64]| rows.iter().all(|(a, b)| a.iter().zip(u).map(|(x, y)| x * y).sum::<f64>() >= *b);
        let obj = |u: &[f64]| u.iter().zip(&u_nom).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let steps = 40;
        let h = 2.0 / steps as f64;
        let mut best = (f64::INFINITY, [0.0; 4]);
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps {
                    for l in 0..=steps {
                        let u = [-1.0 + h * i as f64, -1.0 + h * j as f64, -1.0 + h * k as f64, -1.0 + h * l as f64];
                        if feasible(&u) {
                            let o = obj(&u);
                            if o < best.0 {
                                best = (o, u);
                            }
                        }
                    }
                }
            }
        }
        assert!(best.0.is_finite());
        let qp_obj = p.objective(&s.u);
        assert!(qp_obj <= best.0 + 1e-9);
        let dist = s.u.iter().zip(&best.1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= 4.0 * h, "grid argmin {:?} vs {:?}", best.1, s.u);
    }
}

#[test]
fn infeasible_problem_is_flagged() {
    let p = QpProblem::new(vec![0.0, 0.0], vec![(vec![1.0, 0.0], 2.0)], boxes(1, 2, -1.0, 1.0), 2);
    let s = solve_qp(&p, &QpSettings::default());
    assert_eq!(s.status, QpStatus::Infeasible);
    assert!(p.in_sets(&s.u, 1e-12));
    assert!((s.u[0] - 1.0).abs() < 1e-3);
}

#[test]
fn learned_qp_commutes_with_the_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = WorldConfig { num_agents: 4, num_obstacles: 2, side_length: 1.0, ..WorldConfig::default() };
    let gains = NominalGains::default();
    let mut active = 0;
    for case in 0..20 {
        let system = if case % 2 == 0 { System::DoubleIntegrator } else { System::Quadrotor };
        let m = model(system);
        let params = NetParams::new(NetConfig { d_model: 16, d_ff: 16, head_hidden: 16, seed: case, ..Default::default() }, system);
        let ep = random_scene(&cfg, system, 0.5, &mut rng).unwrap();
        let g = GroupElement::new(rng.gen_range(-3.2..3.2), v3(&mut rng, 3.0));
        let moved = ep.transformed(&g);
        let solve = |e: &egcbf::world::Episode| {
            let graph = build_graph(e, &scan_all(e, &cfg), &cfg).unwrap();
            let u_nom: Vec<Control<f64>> = e.states.iter().zip(&e.targets).map(|(x, t)| nominal_control(&m, &gains, x, t)).collect();
            // a positive margin forces some rows active
            let p = learned_qp(&params, &graph, &m, &u_nom, ClassK::Linear(1.0), 0.5);
            let s = solve_qp(&p, &QpSettings::default());
            (split_controls(system, &s.u), s.iterations)
        };
        let (ua, it) = solve(&ep);
        let (ub, _) = solve(&moved);
        active += usize::from(it > 0);
        for (a, b) in ua.iter().zip(&ub) {
            let (a, b) = (g.act_control(a).to_vec(), b.to_vec());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-8, "case {case}: {a:?} vs {b:?}");
            }
        }
    }
    assert!(active > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn larger_box_never_costs_more(seed in 0u64..10_000, grow in 1.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, false);
        let mut q = p.clone();
        for s in &mut q.sets {
            if let ControlBounds::Box { lo, hi } = s {
                lo.iter_mut().for_each(|x| *x *= grow);
                hi.iter_mut().for_each(|x| *x *= grow);
            }
        }
        let (a, b) = (solve_qp(&p, &QpSettings::default()), solve_qp(&q, &QpSettings::default()));
        prop_assert!(q.objective(&b.u) <= p.objective(&a.u) + 1e-8);
    }

    #[test]
    fn feasible_nominal_is_returned_verbatim(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_problem(&mut rng, seed % 2 == 0);
        p.u_nom = DVector::zeros(p.num_vars());
        p.b = p.b.map(|b| b.min(-0.01));
        let s = solve_qp(&p, &QpSettings::default());
        prop_assert_eq!(s.u, p.u_nom.clone());
    }
}
