use egcbf_autodiff::gradcheck::{op_cases, worst_error, OpCase};
use egcbf_autodiff::{Tape, TapeError, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn check(name: &'static str, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static, shapes: &[(usize, usize)], probes: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let case = OpCase { name, shapes: shapes.to_vec(), build: Box::new(f) };
    let err = worst_error(&case, probes, &mut |r, c| random(&mut rng, r, c));
    assert!(err < 1e-4, "{name}: relative gradient error {err:e}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in op_cases() {
        let err = worst_error(&case, 20, &mut |r, c| random(&mut rng, r, c));
        assert!(err < 1e-4, "{}: relative gradient error {err:e}", case.name);
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    // A miniature attention block followed by a tanh MLP.
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let q = t.matmul(v[0], v[1]).unwrap();
        let kt = t.transpose(v[0]);
        let scores = t.matmul(q, kt).unwrap();
        let mask = [true, true, false, true, true, true, false, true, true];
        let att = t.softmax_rows(scores, Some(&mask)).unwrap();
        let mixed = t.matmul(att, v[0]).unwrap();
        let h = t.add(mixed, v[0]).unwrap();
        let h = t.matmul(h, v[2]).unwrap();
        let h = t.add_row(h, v[3]).unwrap();
        let h = t.tanh(h);
        let r = t.slice_rows(h, 0, 1).unwrap();
        let n = t.l2_norm(r);
        let s = t.sum(h);
        t.add(n, s).unwrap()
    };
    check("composite", f, &[(3, 4), (4, 4), (4, 5), (1, 5)], 20);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::row(vec![0.0, 0.0, 0.0]));
    let y = tape.softmax_rows(x, None).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn fully_masked_row_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.softmax_rows(x, Some(&[false, false, true, false])).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
    let xx = tape.mul(x, x).unwrap();
    let y = tape.sum(xx);
    assert_eq!(tape.grad(y, &[x]).unwrap()[0].data(), &[2.0, 4.0]);
}

#[test]
fn gradient_of_constant_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::row(vec![1.0, -3.0, 2.0]));
    let c = tape.scalar(4.0);
    let g = tape.grad(c, &[x]).unwrap();
    assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn linear_map_gradient_is_exact() {
    let w = vec![0.3, -1.7, 2.25, 0.125];
    let mut tape = Tape::<f64>::new();
    let wv = tape.leaf(Tensor::row(w.clone()));
    let x = tape.leaf(Tensor::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(wv, x).unwrap();
    let g = tape.grad(y, &[x]).unwrap();
    assert_eq!(g[0].data(), w.as_slice());
}

#[test]
fn softmax_sum_composition_matches_analytic_jacobian() {
    // d/dx_j sum_i c_i softmax(x)_i = p_j (c_j - sum_i c_i p_i)
    let x = [0.2, -0.4, 1.1, 0.0, 0.5, -2.0, 0.3, 0.3, 0.9];
    let c = [1.0, 2.0, -1.0, 0.5, 0.25, 3.0, -2.0, 1.0, 0.0];
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(Tensor::new(3, 3, x.to_vec()));
    let cv = tape.leaf(Tensor::new(3, 3, c.to_vec()));
    let p = tape.softmax_rows(xv, None).unwrap();
    let pc = tape.mul(p, cv).unwrap();
    let s = tape.sum(pc);
    let g = tape.grad(s, &[xv]).unwrap();
    for r in 0..3 {
        let row = &x[r * 3..r * 3 + 3];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let pr: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mean: f64 = (0..3).map(|k| c[r * 3 + k] * pr[k]).sum();
        for j in 0..3 {
            let expected = pr[j] * (c[r * 3 + j] - mean);
            assert!((g[0].get(r, j) - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, 5, 6);
    let b = random(&mut rng, 6, 3);
    let mut tape = Tape::new();
    let av = tape.leaf(a);
    let bv = tape.leaf(b);
    let m = tape.matmul(av, bv).unwrap();
    let m = tape.tanh(m);
    let s = tape.l2_norm(m);
    let g1 = tape.grad(s, &[av, bv]).unwrap();
    let g2 = tape.grad(s, &[av, bv]).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let b = tape.leaf(Tensor::zeros(2, 3));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(err, TapeError::Shape { op: "matmul", lhs: (2, 3), rhs: (2, 3) });
    assert!(err.to_string().contains("matmul"));
    let c = tape.leaf(Tensor::zeros(3, 2));
    assert!(matches!(tape.add(a, c), Err(TapeError::Shape { op: "add", .. })));
}

#[test]
fn grad_rejects_bad_requests() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(2, 2));
    let t = tape.tanh(a);
    let s = tape.sum(t);
    assert!(matches!(tape.grad(t, &[a]), Err(TapeError::NotScalar((2, 2)))));
    assert!(matches!(tape.grad(s, &[t]), Err(TapeError::NotLeaf(_))));
    let mut other = Tape::<f64>::new();
    let foreign = {
        for _ in 0..10 {
            other.leaf(Tensor::zeros(1, 1));
        }
        other.leaf(Tensor::zeros(1, 1))
    };
    assert!(matches!(tape.grad(s, &[foreign]), Err(TapeError::NotOnTape(10))));
}

#[test]
fn generic_over_f32() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::row(vec![1.0f32, -2.0]));
    let y = tape.l2_norm(x);
    let g = tape.grad(y, &[x]).unwrap();
    assert!((g[0].data()[0] - 1.0 / 5f32.sqrt()).abs() < 1e-6);
}
