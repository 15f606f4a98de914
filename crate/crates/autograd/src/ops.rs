use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn, Slice, Zip};

use crate::{Gradients, Graph, Op, Real, Var};

const GELU_COEF: f64 = 0.044_715;

fn standard<F: Real>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("{op}: shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

fn zip_broadcast<F: Real>(
    op: &str,
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    f: impl Fn(F, F) -> F,
) -> ArrayD<F> {
    if a.shape() == b.shape() {
        if let (Some(xs), Some(ys)) = (a.as_slice(), b.as_slice()) {
            let data = xs.iter().zip(ys).map(|(&x, &y)| f(x, y)).collect();
            return ArrayD::from_shape_vec(a.raw_dim(), data).expect("same shape");
        }
    }
    let shape = broadcast_shape(op, a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("checked broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("checked broadcast");
    standard(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y)))
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to<F: Real>(mut g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    standard(g)
}

fn map_values<F: Real>(a: &ArrayD<F>, f: impl Fn(F) -> F) -> ArrayD<F> {
    let data = a.as_slice().expect("standard layout").iter().map(|&x| f(x)).collect();
    ArrayD::from_shape_vec(a.raw_dim(), data).expect("same shape")
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(GELU_COEF);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    // tanh through one exp; libm tanh dominates the profile otherwise
    let two = F::of(2.0);
    let th = F::one() - two / (F::one() + (two * u).exp());
    let y = half * x * (F::one() + th);
    let dy = half * (F::one() + th)
        + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn last_dim<F: Real>(a: &ArrayD<F>, op: &str) -> usize {
    *a.shape()
        .last()
        .unwrap_or_else(|| panic!("{op}: needs at least one axis"))
}

fn as_batches<'a, F: Real>(a: &'a ArrayD<F>) -> (usize, ndarray::ArrayView3<'a, F>) {
    let nd = a.ndim();
    let (r, c) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let b = a.len() / (r * c).max(1);
    let v = a
        .view()
        .into_shape_with_order((b, r, c))
        .expect("standard layout");
    (b, v)
}

fn bmm_into<F: Real>(
    out: &mut ndarray::ArrayViewMut3<F>,
    a: &ndarray::ArrayView3<F>,
    b: &ndarray::ArrayView3<F>,
    ta: bool,
    tb: bool,
) {
    for i in 0..out.shape()[0] {
        let ai: ArrayView2<F> = if ta { a.index_axis(Axis(0), i).reversed_axes() } else { a.index_axis(Axis(0), i) };
        let bi: ArrayView2<F> = if tb { b.index_axis(Axis(0), i).reversed_axes() } else { b.index_axis(Axis(0), i) };
        let mut oi: ArrayViewMut2<F> = out.index_axis_mut(Axis(0), i);
        general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut oi);
    }
}

impl<F: Real> Graph<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = F::of(c);
        let v = map_values(self.value(a), |x| x * k);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = F::of(c);
        let v = map_values(self.value(a), |x| x + k);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// `a[..., k] @ w[k, m] -> [..., m]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        assert_eq!(wv.ndim(), 2, "matmul: weight must be 2-d, got {:?}", wv.shape());
        let k = last_dim(av, "matmul");
        assert_eq!(k, wv.shape()[0], "matmul: {:?} x {:?}", av.shape(), wv.shape());
        let m = wv.shape()[1];
        let n = av.len() / k.max(1);
        let a2 = av.view().into_shape_with_order((n, k)).expect("standard layout");
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("2-d");
        let out = a2.dot(&w2);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("nonempty") = m;
        let v = out.into_shape_with_order(IxDyn(&shape)).expect("size preserved");
        self.push(v, Op::MatMul(a, w), &[a, w])
    }

    /// Batched product over identical leading axes:
    /// `a[..., n, k] @ b[..., k, m]`, or `a @ b^T` with `b[..., m, k]` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let nd = av.ndim();
        assert!(nd >= 2 && bv.ndim() == nd, "batch_matmul: {:?} x {:?}", av.shape(), bv.shape());
        assert_eq!(av.shape()[..nd - 2], bv.shape()[..nd - 2], "batch_matmul: batch axes differ");
        let (n, k) = (av.shape()[nd - 2], av.shape()[nd - 1]);
        let (bk, m) = if transpose_b {
            (bv.shape()[nd - 1], bv.shape()[nd - 2])
        } else {
            (bv.shape()[nd - 2], bv.shape()[nd - 1])
        };
        assert_eq!(k, bk, "batch_matmul: inner dims {:?} x {:?}", av.shape(), bv.shape());
        let (batches, a3) = as_batches(av);
        let (_, b3) = as_batches(bv);
        let mut out = ndarray::Array3::<F>::zeros((batches, n, m));
        bmm_into(&mut out.view_mut(), &a3, &b3, false, transpose_b);
        let mut shape = av.shape()[..nd - 2].to_vec();
        shape.extend([n, m]);
        let v = out.into_shape_with_order(IxDyn(&shape)).expect("size preserved");
        self.push(v, Op::BatchMatMul { a, b, transpose_b }, &[a, b])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = map_values(self.value(a), |x| gelu_parts(x).0);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map_values(self.value(a), |x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = map_values(self.value(a), |x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map_values(self.value(a), |x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = last_dim(av, "softmax");
        let mut data = av.as_slice().expect("standard layout").to_vec();
        for row in data.chunks_exact_mut(d) {
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut total = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let v = ArrayD::from_shape_vec(av.raw_dim(), data).expect("same shape");
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let d = last_dim(av, "layer_norm");
        let inv_d = F::of(1.0 / d as f64);
        let eps = F::of(eps);
        let mut data = av.as_slice().expect("standard layout").to_vec();
        let mut rstd = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let v = ArrayD::from_shape_vec(av.raw_dim(), data).expect("same shape");
        self.push(v, Op::LayerNorm { x: a, rstd }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = standard(self.value(a).sum_axis(Axis(axis)));
        self.push(v, Op::SumAxis { x: a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keep: bool) -> Var {
        let av = self.value(a);
        let n = F::of(av.shape()[axis] as f64);
        let mut v = av.sum_axis(Axis(axis)).mapv(|x| x / n);
        if keep {
            v = v.insert_axis(Axis(axis));
        }
        let v = standard(v);
        self.push(v, Op::MeanAxis { x: a, axis, keep }, &[a])
    }

    /// Mean over every element, as a 0-d tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = F::of(av.len() as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), av.iter().copied().sum::<F>() / n);
        self.push(v, Op::MeanAll(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).iter().copied().sum::<F>());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(
            av.len(),
            shape.iter().product::<usize>(),
            "reshape: {:?} -> {shape:?}",
            av.shape()
        );
        let v = av.clone().into_shape_with_order(IxDyn(shape)).expect("standard layout");
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::Permute { x: a, axes: axes.to_vec() }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = standard(concatenate(Axis(axis), &views).expect("concat: incompatible shapes"));
        self.push(v, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start < end && end <= av.shape()[axis], "slice: {start}..{end} of {:?}", av.shape());
        let v = standard(av.slice_axis(Axis(axis), Slice::from(start..end)).to_owned());
        self.push(v, Op::Slice { x: a, axis, start }, &[a])
    }

    /// Reverse pass from a single-element `output`.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        let out = &self.nodes[output.0];
        assert_eq!(out.value.len(), 1, "backward: output must hold one element");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(ArrayD::from_elem(out.value.raw_dim(), F::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[idx];
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, reduce_to(g.clone(), &shape_of(*b)));
                }
                self.accumulate(grads, *a, reduce_to(g, &shape_of(*a)));
            }
            Op::Sub(a, b) => {
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, reduce_to(g.mapv(|x| -x), &shape_of(*b)));
                }
                self.accumulate(grads, *a, reduce_to(g, &shape_of(*a)));
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    let ga = zip_broadcast("mul", &g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(ga, &shape_of(*a)));
                }
                if self.is_tracked(*b) {
                    let gb = zip_broadcast("mul", &g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(gb, &shape_of(*b)));
                }
            }
            Op::Scale(a, c) => {
                let k = F::of(*c);
                self.accumulate(grads, *a, map_values(&g, |x| x * k));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::MatMul(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (k, m) = (wv.shape()[0], wv.shape()[1]);
                let n = av.len() / k.max(1);
                let g2 = g.view().into_shape_with_order((n, m)).expect("standard layout");
                let w2 = wv.view().into_dimensionality::<Ix2>().expect("2-d");
                if self.is_tracked(*a) {
                    let ga = g2.dot(&w2.t());
                    let ga = ga.into_shape_with_order(av.raw_dim()).expect("size preserved");
                    self.accumulate(grads, *a, ga);
                }
                if self.is_tracked(*w) {
                    let a2 = av.view().into_shape_with_order((n, k)).expect("standard layout");
                    let gw = a2.t().dot(&g2).into_dyn();
                    self.accumulate(grads, *w, standard(gw));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batches, a3) = as_batches(av);
                let (_, b3) = as_batches(bv);
                let (_, g3) = as_batches(&g);
                if self.is_tracked(*a) {
                    let mut ga = ndarray::Array3::<F>::zeros(a3.raw_dim());
                    // C = A B  => dA = dC B^T ;  C = A B^T => dA = dC B
                    bmm_into(&mut ga.view_mut(), &g3, &b3, false, !transpose_b);
                    let ga = ga.into_shape_with_order(av.raw_dim()).expect("size preserved");
                    self.accumulate(grads, *a, ga);
                }
                if self.is_tracked(*b) {
                    let mut gb = ndarray::Array3::<F>::zeros(b3.raw_dim());
                    if *transpose_b {
                        // dB = dC^T A
                        bmm_into(&mut gb.view_mut(), &g3, &a3, true, false);
                    } else {
                        // dB = A^T dC
                        bmm_into(&mut gb.view_mut(), &a3, &g3, true, false);
                    }
                    debug_assert_eq!(gb.shape()[0], batches);
                    let gb = gb.into_shape_with_order(bv.raw_dim()).expect("size preserved");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Gelu(a) => {
                let ga = zip_broadcast("gelu", &g, self.value(*a), |gi, x| gi * gelu_parts(x).1);
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_broadcast("tanh", &g, &node.value, |gi, y| gi * (F::one() - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = zip_broadcast("silu", &g, self.value(*a), |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (F::one() + x * (F::one() - s))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_broadcast("exp", &g, &node.value, |gi, y| gi * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let d = last_dim(&node.value, "softmax");
                let ys = node.value.as_slice().expect("standard layout");
                let mut gs = g.as_slice().expect("standard layout").to_vec();
                for (grow, yrow) in gs.chunks_exact_mut(d).zip(ys.chunks_exact(d)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                let ga = ArrayD::from_shape_vec(node.value.raw_dim(), gs).expect("same shape");
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, rstd } => {
                let d = last_dim(&node.value, "layer_norm");
                let inv_d = F::of(1.0 / d as f64);
                let xhat = node.value.as_slice().expect("standard layout");
                let mut gs = g.as_slice().expect("standard layout").to_vec();
                for ((grow, xrow), &r) in gs.chunks_exact_mut(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                    let mean_g = grow.iter().copied().sum::<F>() * inv_d;
                    let mean_gx = grow.iter().zip(xrow).map(|(&gi, &xi)| gi * xi).sum::<F>() * inv_d;
                    for (gi, &xi) in grow.iter_mut().zip(xrow) {
                        *gi = r * (*gi - mean_g - xi * mean_gx);
                    }
                }
                let ga = ArrayD::from_shape_vec(node.value.raw_dim(), gs).expect("same shape");
                self.accumulate(grads, *x, ga);
            }
            Op::SumAxis { x, axis } => {
                let shape = shape_of(*x);
                let ga = g.insert_axis(Axis(*axis));
                let ga = standard(ga.broadcast(IxDyn(&shape)).expect("broadcast back").to_owned());
                self.accumulate(grads, *x, ga);
            }
            Op::MeanAxis { x, axis, keep } => {
                let shape = shape_of(*x);
                let n = F::of(shape[*axis] as f64);
                let ga = if *keep { g } else { g.insert_axis(Axis(*axis)) };
                let ga = standard(ga.broadcast(IxDyn(&shape)).expect("broadcast back").mapv(|v| v / n));
                self.accumulate(grads, *x, ga);
            }
            Op::MeanAll(a) => {
                let shape = shape_of(*a);
                let n = shape.iter().product::<usize>();
                let gv = *g.iter().next().expect("scalar") / F::of(n as f64);
                self.accumulate(grads, *a, ArrayD::from_elem(IxDyn(&shape), gv));
            }
            Op::SumAll(a) => {
                let shape = shape_of(*a);
                let gv = *g.iter().next().expect("scalar");
                self.accumulate(grads, *a, ArrayD::from_elem(IxDyn(&shape), gv));
            }
            Op::Reshape(a) => {
                let shape = shape_of(*a);
                let ga = g.into_shape_with_order(IxDyn(&shape)).expect("size preserved");
                self.accumulate(grads, *a, ga);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let ga = g.permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
                self.accumulate(grads, *x, ga);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if self.is_tracked(p) {
                        let gp = g.slice_axis(Axis(*axis), Slice::from(offset..offset + len)).to_owned();
                        self.accumulate(grads, p, standard(gp));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = shape_of(*x);
                let mut ga = ArrayD::<F>::zeros(IxDyn(&shape));
                let end = start + g.shape()[*axis];
                ga.slice_axis_mut(Axis(*axis), Slice::from(*start..end)).assign(&g);
                self.accumulate(grads, *x, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_follows_numpy_rules() {
        assert_eq!(broadcast_shape("t", &[4, 1, 3], &[5, 3]), vec![4, 5, 3]);
        assert_eq!(broadcast_shape("t", &[3], &[2, 3]), vec![2, 3]);
    }

    #[test]
    #[should_panic(expected = "do not broadcast")]
    fn incompatible_shapes_panic() {
        broadcast_shape("add", &[2, 3], &[4]);
    }

    #[test]
    fn reduce_to_sums_broadcast_axes() {
        let g = ArrayD::from_elem(IxDyn(&[2, 3, 4]), 1.0f64);
        let r = reduce_to(g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.iter().all(|&v| v == 8.0));
    }
}
