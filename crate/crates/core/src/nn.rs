//! Transformer building blocks shared by the autoencoder and the denoisers.

use ndarray::{Array1, Array2, ArrayD};

use cmdlab_autograd::{Graph, Real, Var};

use crate::params::{Bound, Initializer};

pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;

pub fn linear<F: Real>(g: &mut Graph<F>, p: &Bound, prefix: &str, x: Var) -> Var {
    let y = g.matmul(x, p.get(&format!("{prefix}.w")));
    g.add(y, p.get(&format!("{prefix}.b")))
}

pub fn layer_norm<F: Real>(g: &mut Graph<F>, p: &Bound, prefix: &str, x: Var) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    let y = g.mul(n, p.get(&format!("{prefix}.g")));
    g.add(y, p.get(&format!("{prefix}.b")))
}

pub fn init_attention<F: Real>(init: &mut Initializer<'_, F>, prefix: &str, dim: usize, heads: usize, head_dim: usize) {
    init.linear(&format!("{prefix}.qkv"), dim, 3 * heads * head_dim);
    init.linear(&format!("{prefix}.proj"), heads * head_dim, dim);
}

/// Multi-head self-attention within each group: `x[G, n, d] -> [G, n, d]`.
pub fn attention<F: Real>(
    g: &mut Graph<F>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    head_dim: usize,
) -> Var {
    let (groups, n) = (g.shape(x)[0], g.shape(x)[1]);
    let inner = heads * head_dim;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x);
    let qkv = g.reshape(qkv, &[groups, n, 3, heads, head_dim]);
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
    let mut split = [qkv; 3];
    for (i, part) in split.iter_mut().enumerate() {
        let s = g.slice(qkv, 0, i, i + 1);
        *part = g.reshape(s, &[groups, heads, n, head_dim]);
    }
    let [q, k, v] = split;
    let scores = g.batch_matmul(q, k, true);
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let attn = g.softmax(scores);
    let out = g.batch_matmul(attn, v, false);
    let out = g.permute(out, &[0, 2, 1, 3]);
    let out = g.reshape(out, &[groups, n, inner]);
    linear(g, p, &format!("{prefix}.proj"), out)
}

pub fn init_mlp<F: Real>(init: &mut Initializer<'_, F>, prefix: &str, dim: usize) {
    init.linear(&format!("{prefix}.fc1"), dim, MLP_RATIO * dim);
    init.linear(&format!("{prefix}.fc2"), MLP_RATIO * dim, dim);
}

pub fn mlp<F: Real>(g: &mut Graph<F>, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(g, p, &format!("{prefix}.fc1"), x);
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// `x * (1 + scale) + shift`, broadcasting the modulation over tokens.
pub fn modulate<F: Real>(g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Var {
    let s = g.add_scalar(scale, 1.0);
    let y = g.mul(x, s);
    g.add(y, shift)
}

/// Mean squared error between two same-shape nodes, as a 0-d node.
pub fn mse<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Fixed 2-d sine/cosine position table, `[gh * gw, dim]`, row-major over the grid.
/// The first half of the channels encodes the row, the second half the column.
pub fn sincos_2d(gh: usize, gw: usize, dim: usize) -> Array2<f64> {
    assert!(dim.is_multiple_of(4), "sincos_2d: dim {dim} must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10_000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Array2::zeros((gh * gw, dim));
    for r in 0..gh {
        for c in 0..gw {
            let row = r * gw + c;
            for (i, &w) in omega.iter().enumerate() {
                table[[row, i]] = (r as f64 * w).sin();
                table[[row, quarter + i]] = (r as f64 * w).cos();
                table[[row, 2 * quarter + i]] = (c as f64 * w).sin();
                table[[row, 3 * quarter + i]] = (c as f64 * w).cos();
            }
        }
    }
    table
}

/// Sinusoidal timestep features `[cos(t f_i), sin(t f_i)]`, `f_i = 10000^(-i/half)`.
pub fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).cos();
        out[half + i] = (t as f64 * f).sin();
    }
    out
}

pub fn to_real<F: Real, D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> ArrayD<F> {
    a.mapv(F::of).into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos_rows_are_distinct() {
        let t = sincos_2d(3, 4, 8);
        for i in 0..12 {
            for j in (i + 1)..12 {
                let d: f64 = (&t.row(i) - &t.row(j)).mapv(|x| x * x).sum();
                assert!(d > 1e-6, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn timestep_features_at_zero() {
        let f = timestep_features(0, 6);
        assert_eq!(f.to_vec(), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
