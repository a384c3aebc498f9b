//! Central-difference checks of reverse-mode gradients, per op and for
//! arbitrary scalar-valued graphs.

use crate::{Tape, Tensor, Unary, Var};

/// Builds a scalar from leaves already placed on the tape.
pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// One op wrapped into a scalar, with the input shapes it expects.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<(usize, usize)>,
    pub build: Box<Build>,
}

/// Central differences of `f` around `inputs`, one entry at a time.
pub fn finite_difference(f: &Build, inputs: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>> {
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut g = Tensor::zeros(t.rows(), t.cols());
            for e in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= h;
                g.data_mut()[e] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            g
        })
        .collect()
}

pub fn reverse_mode(f: &Build, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.grad(out, &vars).expect("scalar output over leaves")
}

/// `|a - b| / max(|a|, |b|)` over all entries, with a floor on the denominator.
pub fn rel_error(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            num += (p - q).powi(2);
            den += p.powi(2).max(q.powi(2));
        }
    }
    num.sqrt() / den.sqrt().max(1e-8)
}

// Each op is wrapped into a scalar by a fixed projection so that every output
// entry carries a distinct weight.
fn project(tape: &mut Tape<f64>, v: Var) -> Var {
    let (r, c) = tape.value(v).shape();
    let w = Tensor::from_fn(r, c, |i, j| ((i * 31 + j * 17) % 11) as f64 / 7.0 - 0.6);
    let w = tape.leaf(w);
    let prod = tape.mul(v, w).expect("same shape");
    tape.sum(prod)
}

fn case(name: &'static str, shapes: &[(usize, usize)], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static) -> OpCase {
    OpCase { name, shapes: shapes.to_vec(), build: Box::new(build) }
}

/// Every differentiable op on the tape.
pub fn op_cases() -> Vec<OpCase> {
    const MASK: [bool; 12] = [true, false, true, true, false, false, false, false, true, true, true, false];
    vec![
        case("matmul", &[(3, 4), (4, 2)], |t, v| { let y = t.matmul(v[0], v[1]).unwrap(); project(t, y) }),
        case("add", &[(2, 3), (2, 3)], |t, v| { let y = t.add(v[0], v[1]).unwrap(); project(t, y) }),
        case("sub", &[(2, 3), (2, 3)], |t, v| { let y = t.sub(v[0], v[1]).unwrap(); project(t, y) }),
        case("mul", &[(2, 3), (2, 3)], |t, v| { let y = t.mul(v[0], v[1]).unwrap(); project(t, y) }),
        case("div", &[(2, 3), (2, 3)], |t, v| {
            let d = t.square(v[1]);
            let d = t.offset(d, 0.5);
            let y = t.div(v[0], d).unwrap();
            project(t, y)
        }),
        case("add_row", &[(3, 4), (1, 4)], |t, v| { let y = t.add_row(v[0], v[1]).unwrap(); project(t, y) }),
        case("scale_by", &[(1, 1), (3, 2)], |t, v| { let y = t.scale_by(v[0], v[1]).unwrap(); project(t, y) }),
        case("scale", &[(2, 2)], |t, v| { let y = t.scale(v[0], -1.7); project(t, y) }),
        case("relu", &[(4, 5)], |t, v| { let y = t.relu(v[0]); project(t, y) }),
        case("tanh", &[(4, 5)], |t, v| { let y = t.tanh(v[0]); project(t, y) }),
        case("square", &[(3, 3)], |t, v| { let y = t.square(v[0]); project(t, y) }),
        case("sqrt", &[(3, 3)], |t, v| {
            let s = t.square(v[0]);
            let s = t.offset(s, 0.1);
            let y = t.sqrt(s);
            project(t, y)
        }),
        case("exp", &[(3, 3)], |t, v| { let y = t.unary(v[0], Unary::Exp); project(t, y) }),
        case("softmax", &[(3, 4)], |t, v| { let y = t.softmax_rows(v[0], None).unwrap(); project(t, y) }),
        case("masked_softmax", &[(3, 4)], |t, v| { let y = t.softmax_rows(v[0], Some(&MASK)).unwrap(); project(t, y) }),
        case("sum", &[(3, 3)], |t, v| { let s = t.square(v[0]); t.sum(s) }),
        case("mean", &[(3, 3)], |t, v| { let s = t.square(v[0]); t.mean(s) }),
        case("sum_rows", &[(4, 3)], |t, v| { let y = t.sum_rows(v[0]); project(t, y) }),
        case("concat_rows", &[(2, 3), (1, 3)], |t, v| { let y = t.concat_rows(&[v[0], v[1]]).unwrap(); project(t, y) }),
        case("concat_cols", &[(2, 3), (2, 1)], |t, v| { let y = t.concat_cols(&[v[0], v[1]]).unwrap(); project(t, y) }),
        case("slice_rows", &[(4, 3)], |t, v| { let y = t.slice_rows(v[0], 1, 2).unwrap(); project(t, y) }),
        case("slice_cols", &[(3, 4)], |t, v| { let y = t.slice_cols(v[0], 1, 2).unwrap(); project(t, y) }),
        case("transpose", &[(2, 5)], |t, v| { let y = t.transpose(v[0]); project(t, y) }),
        case("l2_norm", &[(3, 2)], |t, v| t.l2_norm(v[0])),
        case("scatter_rows", &[(3, 2)], |t, v| { let y = t.scatter_rows(v[0], &[3, 0, 3], 5).unwrap(); project(t, y) }),
    ]
}

/// Worst relative error of `case` over `probes` input draws.
pub fn worst_error(case: &OpCase, probes: usize, sample: &mut impl FnMut(usize, usize) -> Tensor<f64>) -> f64 {
    (0..probes)
        .map(|_| {
            let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|&(r, c)| sample(r, c)).collect();
            rel_error(&reverse_mode(&case.build, &inputs), &finite_difference(&case.build, &inputs, 1e-5))
        })
        .fold(0.0, f64::max)
}
