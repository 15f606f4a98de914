//! Named parameter storage and graph binding.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use cmdlab_autograd::{Gradients, Graph, Real, Var};

use crate::error::{Error, Result};
use crate::rng::{trunc_normal, SeededRng};

/// Ordered map from parameter name to tensor. Insertion order is the
/// canonical order used for checkpoints and gradient accumulation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F: Real> {
    entries: IndexMap<String, ArrayD<F>>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        let name = name.into();
        let previous = self.entries.insert(name.clone(), value);
        assert!(previous.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<F>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::of(x.to_f64_lossy()))))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Tracked leaves for every parameter.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        self.bind_with(g, true)
    }

    /// Untracked constants for every parameter (inference).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<F>, tracked: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if tracked { g.leaf(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Collects the gradient of every bound parameter, zeros where none flowed.
    pub fn gradients(&self, bound: &Bound, grads: &mut Gradients<F>) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), grads.take_or_zeros(bound.get(k), v.shape())))
                .collect(),
        }
    }

    /// `self += scale * other`, in canonical order.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.zip_mut_with(b, |x, &y| *x += scale * y);
        }
    }

    /// Copies every entry under `prefix` into a new set with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Self) {
        for (k, v) in other.entries {
            self.insert(k, v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Graph handles for a bound [`ParamSet`].
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

/// How freshly built networks fill their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal (std 0.02) weights, zero biases, zero output projection.
    Default,
    /// Every tensor, biases and output projections included, drawn from a
    /// truncated normal with the given std. Used for sensitivity probes and
    /// gradient checks, where zero blocks would hide the signal.
    Random(f64),
}

/// Helper that fills a [`ParamSet`] according to an [`Init`] policy.
pub struct Initializer<'a, F: Real> {
    pub params: ParamSet<F>,
    pub rng: &'a mut SeededRng,
    pub init: Init,
}

const WEIGHT_STD: f64 = 0.02;

impl<'a, F: Real> Initializer<'a, F> {
    pub fn new(rng: &'a mut SeededRng, init: Init) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
            init,
        }
    }

    pub fn weight(&mut self, name: String, shape: &[usize]) {
        let std = match self.init {
            Init::Default => WEIGHT_STD,
            Init::Random(s) => s,
        };
        let v = trunc_normal(self.rng, shape, std);
        self.params.insert(name, v);
    }

    pub fn bias(&mut self, name: String, shape: &[usize]) {
        let v = match self.init {
            Init::Default => ArrayD::zeros(IxDyn(shape)),
            Init::Random(s) => trunc_normal(self.rng, shape, s),
        };
        self.params.insert(name, v);
    }

    /// Zero under the default policy (output projections, gates).
    pub fn zero_init(&mut self, name: String, shape: &[usize]) {
        self.bias(name, shape);
    }

    /// LayerNorm gain: ones by default, jittered around one for random init.
    pub fn gain(&mut self, name: String, shape: &[usize]) {
        let v = match self.init {
            Init::Default => ArrayD::ones(IxDyn(shape)),
            Init::Random(s) => trunc_normal::<F>(self.rng, shape, s).mapv(|x| x + F::one()),
        };
        self.params.insert(name, v);
    }

    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.weight(format!("{prefix}.w"), &[din, dout]);
        self.bias(format!("{prefix}.b"), &[dout]);
    }

    pub fn zero_linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.zero_init(format!("{prefix}.w"), &[din, dout]);
        self.zero_init(format!("{prefix}.b"), &[dout]);
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.gain(format!("{prefix}.g"), &[dim]);
        self.bias(format!("{prefix}.b"), &[dim]);
    }

    pub fn finish(self) -> ParamSet<F> {
        self.params
    }
}
