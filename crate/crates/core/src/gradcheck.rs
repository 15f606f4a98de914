//! Central finite-difference verification of analytic gradients.

use ndarray::{Array2, ArrayD, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AEConfig, Autoencoder, ImportanceMode};
use crate::denoisers::{Denoiser, DenoiserConfig, DenoiserKind, LatentGeometry};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSet};
use crate::rng::{gaussian, seeded};
use crate::video::VideoTensor;

pub const FD_STEP: f64 = 1e-5;
/// Entries probed per parameter tensor.
pub const PROBES_PER_TENSOR: usize = 6;
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Autoencoder,
    Content,
    Motion,
    /// A single affine layer under a squared loss.
    Linear,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [ModuleKind::Autoencoder, ModuleKind::Content, ModuleKind::Motion, ModuleKind::Linear];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Autoencoder => "autoencoder",
            ModuleKind::Content => "content",
            ModuleKind::Motion => "motion",
            ModuleKind::Linear => "linear",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Parameter holding the largest error.
    pub worst: String,
    /// Largest error per parameter tensor, in parameter order.
    pub per_param: Vec<(String, f64)>,
    pub probes: usize,
    pub pass: bool,
    /// Set when a gradient or loss was not finite.
    pub failure: Option<String>,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares `grads` against central differences of `loss` at `params`.
///
/// Up to [`PROBES_PER_TENSOR`] entries of every tensor are probed, chosen by
/// `seed`; tensors that small are probed exhaustively.
pub fn check_gradients(
    params: &mut ParamSet<f64>,
    grads: &ParamSet<f64>,
    loss: impl Fn(&ParamSet<f64>) -> f64,
    step: f64,
    tol: f64,
    seed: u64,
) -> GradReport {
    let mut rng = seeded(seed);
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        per_param: Vec::new(),
        probes: 0,
        pass: false,
        failure: None,
    };
    for (name, g) in grads.iter() {
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            report.failure = Some(format!("non-finite gradient in {name} at flat index {bad}"));
            return report;
        }
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).expect("listed").len();
        let picks: Vec<usize> = if len <= PROBES_PER_TENSOR {
            (0..len).collect()
        } else {
            (0..PROBES_PER_TENSOR).map(|_| rng.random_range(0..len)).collect()
        };
        let analytic = grads.get(&name).expect("same layout");
        let mut worst = 0.0f64;
        for idx in picks {
            let orig = flat(params, &name, idx);
            set_flat(params, &name, idx, orig + step);
            let up = loss(params);
            set_flat(params, &name, idx, orig - step);
            let down = loss(params);
            set_flat(params, &name, idx, orig);
            if !up.is_finite() || !down.is_finite() {
                report.failure = Some(format!("non-finite loss probing {name}"));
                return report;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_slice_memory_order().expect("contiguous")[idx];
            worst = worst.max(relative_error(a, numeric));
            report.probes += 1;
        }
        if report.worst.is_empty() || worst > report.max_rel_err {
            report.max_rel_err = worst;
            report.worst = name.clone();
        }
        report.per_param.push((name, worst));
    }
    report.pass = report.max_rel_err < tol;
    report
}

fn flat(params: &ParamSet<f64>, name: &str, idx: usize) -> f64 {
    params.get(name).expect("listed").as_slice_memory_order().expect("contiguous")[idx]
}

fn set_flat(params: &mut ParamSet<f64>, name: &str, idx: usize, v: f64) {
    params.get_mut(name).expect("listed").as_slice_memory_order_mut().expect("contiguous")[idx] = v;
}

/// The `[3, 4, 8, 8]` autoencoder used for gradient checks.
pub fn tiny_ae_config() -> AEConfig {
    AEConfig {
        channels: 3,
        frames: 4,
        height: 8,
        width: 8,
        input_patch: (2, 2),
        hidden_dim: 8,
        depth: 2,
        heads: 2,
        head_dim: 4,
        motion_channels: 4,
        importance: ImportanceMode::PerChannel,
    }
}

pub fn tiny_denoiser_config(kind: DenoiserKind) -> DenoiserConfig {
    DenoiserConfig {
        hidden_dim: 16,
        depth: 2,
        heads: 2,
        z_patch: 2,
        content_patch: match kind {
            DenoiserKind::Content => 1,
            DenoiserKind::Motion => 2,
        },
        num_classes: 3,
    }
}

fn bounded(shape: &[usize], seed: u64) -> ArrayD<f64> {
    gaussian::<f64>(&mut seeded(seed), shape).mapv(|x| x.tanh() * 0.9)
}

/// Builds the tiny network of `kind` in 64-bit with random weights and checks
/// every parameter tensor.
pub fn grad_check(kind: ModuleKind, tol: f64) -> Result<GradReport> {
    const SEED: u64 = 0x6772_6164;
    match kind {
        ModuleKind::Autoencoder => {
            let cfg = tiny_ae_config();
            let mut ae = Autoencoder::<f64>::new(cfg.clone(), SEED, Init::Random(0.3))?;
            let video = VideoTensor::new(bounded(&cfg.video_shape(), SEED + 1).into_dimensionality().expect("4-d"))?;
            let (_, grads) = ae.loss_and_grad(&video)?;
            let report = check_gradients(
                &mut ae.params,
                &grads,
                |p| {
                    let m = Autoencoder { config: cfg.clone(), params: p.clone() };
                    m.loss(&video).unwrap_or(f64::NAN)
                },
                FD_STEP,
                tol,
                SEED,
            );
            Ok(report)
        }
        ModuleKind::Content | ModuleKind::Motion => {
            let dk = if kind == ModuleKind::Content { DenoiserKind::Content } else { DenoiserKind::Motion };
            let geo = LatentGeometry::from(&tiny_ae_config());
            let mut d = Denoiser::<f64>::new(dk, tiny_denoiser_config(dk), geo.clone(), SEED, Init::Random(0.3))?;
            let shape = d.input_shape();
            let x_t = gaussian::<f64>(&mut seeded(SEED + 2), &shape);
            let eps = gaussian::<f64>(&mut seeded(SEED + 3), &shape);
            let content = bounded(&geo.content_shape(), SEED + 4).into_dimensionality().expect("3-d");
            let cond = (dk == DenoiserKind::Motion).then_some(&content);
            let (class, t) = (1, 37);
            let (_, grads) = d.loss_and_grad(&x_t, &eps, class, t, cond)?;
            let template = d.clone();
            let report = check_gradients(
                &mut d.params,
                &grads,
                |p| {
                    let m = Denoiser { params: p.clone(), ..template.clone() };
                    m.predict(&x_t, class, t, cond)
                        .map(|pred| (&pred - &eps).mapv(|v| v * v).mean().expect("nonempty"))
                        .unwrap_or(f64::NAN)
                },
                FD_STEP,
                tol,
                SEED,
            );
            Ok(report)
        }
        ModuleKind::Linear => {
            let mut rng = seeded(SEED);
            let x: Array2<f64> = gaussian::<f64>(&mut rng, &[5, 4]).into_dimensionality().expect("2-d");
            let y: Array2<f64> = gaussian::<f64>(&mut rng, &[5, 3]).into_dimensionality().expect("2-d");
            let mut params = ParamSet::new();
            params.insert("w", gaussian::<f64>(&mut rng, &[4, 3]));
            params.insert("b", gaussian::<f64>(&mut rng, &[3]));
            let loss = |p: &ParamSet<f64>| {
                let w: ArrayView2<f64> = p.get("w").expect("w").view().into_dimensionality().expect("2-d");
                let b: ArrayView1<f64> = p.get("b").expect("b").view().into_dimensionality().expect("1-d");
                let r = x.dot(&w) + b - &y;
                r.mapv(|v| v * v).mean().expect("nonempty")
            };
            // closed form: dL/dW = 2/N x^T r, dL/db = 2/N sum_rows r
            let w: ArrayView2<f64> = params.get("w").expect("w").view().into_dimensionality().expect("2-d");
            let b: ArrayView1<f64> = params.get("b").expect("b").view().into_dimensionality().expect("1-d");
            let r = x.dot(&w) + b - &y;
            let n = r.len() as f64;
            let mut grads = ParamSet::new();
            grads.insert("w", (x.t().dot(&r) * (2.0 / n)).into_dyn());
            grads.insert("b", (r.sum_axis(Axis(0)) * (2.0 / n)).into_dyn());
            Ok(check_gradients(&mut params, &grads, loss, FD_STEP, tol, SEED))
        }
    }
}

/// Flattened check across every module kind, for reports.
pub fn grad_check_all(tol: f64) -> Result<Vec<(ModuleKind, GradReport)>> {
    ModuleKind::ALL
        .iter()
        .map(|&k| grad_check(k, tol).map(|r| (k, r)))
        .collect()
}

impl GradReport {
    pub fn into_result(self, kind: ModuleKind) -> Result<Self> {
        if let Some(f) = &self.failure {
            return Err(Error::Numerical(format!("{}: {f}", kind.name())));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn linear_model_is_exact() {
        let r = grad_check(ModuleKind::Linear, 1e-8).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.probes, PROBES_PER_TENSOR + 3);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = seeded(1);
        let mut params = ParamSet::new();
        params.insert("a", gaussian::<f64>(&mut rng, &[3]));
        let loss = |p: &ParamSet<f64>| p.get("a").unwrap().mapv(|v| v * v).sum();
        let mut grads = ParamSet::new();
        grads.insert("a", params.get("a").unwrap().mapv(|v| 2.0 * v));
        assert!(check_gradients(&mut params.clone(), &grads, loss, FD_STEP, 1e-6, 0).pass);
        grads.get_mut("a").unwrap()[[1]] += 0.5;
        let r = check_gradients(&mut params, &grads, loss, FD_STEP, 1e-6, 0);
        assert!(!r.pass);
        assert_eq!(r.worst, "a");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = ParamSet::new();
        params.insert("ok", ArrayD::zeros(IxDyn(&[2])));
        params.insert("bad", ArrayD::zeros(IxDyn(&[2])));
        let mut grads = params.clone();
        grads.get_mut("bad").unwrap()[[0]] = f64::NAN;
        let r = check_gradients(&mut params, &grads, |_| 0.0, FD_STEP, 1e-4, 0);
        assert!(!r.pass);
        assert!(r.failure.unwrap().contains("bad"));
    }
}
