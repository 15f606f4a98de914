//! Every op's backward rule checked against central finite differences in f64.

use cmdlab_autograd::{Graph, Var};
use ndarray::{ArrayD, IxDyn};

fn filled(shape: &[usize], seed: u64) -> ArrayD<f64> {
    // small deterministic LCG; values in (-1, 1)
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Reduces `y` to a scalar with fixed random weights so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Var {
    let w = g.constant(filled(g.shape(y), 99));
    let p = g.mul(y, w);
    g.sum_all(p)
}

fn check(inputs: &[ArrayD<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |vals: &[ArrayD<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.leaf(v.clone())).collect();
        let y = f(&mut g, &vars);
        let out = weighted_sum(&mut g, y);
        (g, vars, out)
    };
    let (g, vars, out) = eval(inputs);
    let grads = g.backward(out);
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += h;
            minus[i].as_slice_mut().unwrap()[j] -= h;
            let (gp, _, op) = eval(&plus);
            let (gm, _, om) = eval(&minus);
            let numeric = (gp.value(op).sum() - gm.value(om).sum()) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-6, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn broadcasting_arithmetic() {
    check(&[filled(&[2, 3, 4], 1), filled(&[3, 1], 2)], |g, v| g.add(v[0], v[1]));
    check(&[filled(&[2, 3, 4], 1), filled(&[4], 2)], |g, v| g.sub(v[0], v[1]));
    check(&[filled(&[2, 3, 4], 1), filled(&[2, 1, 4], 2)], |g, v| g.mul(v[0], v[1]));
    check(&[filled(&[3, 2], 4)], |g, v| {
        let s = g.scale(v[0], -2.5);
        g.add_scalar(s, 0.3)
    });
}

#[test]
fn matrix_products() {
    check(&[filled(&[2, 3, 4], 1), filled(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1]));
    check(&[filled(&[2, 2, 3, 4], 1), filled(&[2, 2, 4, 5], 2)], |g, v| g.batch_matmul(v[0], v[1], false));
    check(&[filled(&[2, 3, 4], 1), filled(&[2, 5, 4], 2)], |g, v| g.batch_matmul(v[0], v[1], true));
    // the same operand on both sides, as in self-attention scores
    check(&[filled(&[2, 3, 4], 5)], |g, v| g.batch_matmul(v[0], v[0], true));
}

#[test]
fn pointwise_nonlinearities() {
    let x = filled(&[3, 5], 7).mapv(|v| v * 3.0);
    check(std::slice::from_ref(&x), |g, v| g.gelu(v[0]));
    check(std::slice::from_ref(&x), |g, v| g.tanh(v[0]));
    check(std::slice::from_ref(&x), |g, v| g.silu(v[0]));
    check(&[x], |g, v| g.exp(v[0]));
}

#[test]
fn normalizations() {
    check(&[filled(&[2, 3, 6], 3).mapv(|v| v * 4.0)], |g, v| g.softmax(v[0]));
    check(&[filled(&[4, 6], 8)], |g, v| g.layer_norm(v[0], 1e-5));
}

#[test]
fn reductions() {
    check(&[filled(&[2, 3, 4], 1)], |g, v| g.sum_axis(v[0], 1));
    check(&[filled(&[2, 3, 4], 1)], |g, v| g.mean_axis(v[0], 2, false));
    check(&[filled(&[2, 3, 4], 1)], |g, v| g.mean_axis(v[0], 0, true));
    check(&[filled(&[2, 3, 4], 1)], |g, v| g.mean_all(v[0]));
}

#[test]
fn layout_ops() {
    check(&[filled(&[2, 3, 4], 1)], |g, v| g.reshape(v[0], &[6, 4]));
    check(&[filled(&[2, 3, 4], 1)], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(&[filled(&[2, 3], 1), filled(&[2, 2], 2)], |g, v| g.concat(&[v[0], v[1]], 1));
    check(&[filled(&[5, 3], 1)], |g, v| g.slice(v[0], 0, 1, 4));
}

#[test]
fn shared_subexpressions_accumulate() {
    check(&[filled(&[3, 3], 11)], |g, v| {
        let a = g.mul(v[0], v[0]);
        let b = g.tanh(v[0]);
        let c = g.add(a, b);
        g.matmul(c, v[0])
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(filled(&[2, 2], 1));
    let x = g.leaf(filled(&[2, 2], 2));
    let y = g.mul(c, x);
    let cc = g.exp(c);
    assert!(!g.is_tracked(cc));
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), g.value(c));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(filled(&[4, 7], 3).mapv(|v| (v * 30.0) as f32));
    let y = g.softmax(x);
    for row in g.value(y).as_slice().unwrap().chunks(7) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn permute_then_inverse_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(filled(&[a, b, c], seed));
            let p = g.permute(x, &[1, 2, 0]);
            let q = g.permute(p, &[2, 0, 1]);
            prop_assert_eq!(g.value(q), g.value(x));
        }

        #[test]
        fn layer_norm_rows_are_standardized(rows in 1usize..5, d in 2usize..9, seed in 0u64..1000) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(filled(&[rows, d], seed).mapv(|v| 5.0 * v + 2.0));
            let y = g.layer_norm(x, 1e-12);
            for row in g.value(y).as_slice().unwrap().chunks(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }
}
