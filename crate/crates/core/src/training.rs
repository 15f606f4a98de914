//! Optimization loops for the autoencoder and both denoisers.
//!
//! Every step draws its batch indices, timesteps, noise and condition drops
//! from one seeded stream on the calling thread, then evaluates per-sample
//! gradients in parallel and sums them in sample order. Results are
//! therefore identical for any thread count.

use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cmdlab_autograd::Real;

use crate::autoencoder::Autoencoder;
use crate::denoisers::{Denoiser, DenoiserKind, LatentGeometry};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{gaussian, seeded, SeededRng};
use crate::video::VideoTensor;

/// Smoothing factor of the `ema_loss` column.
pub const LOSS_SMOOTHING: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub max_steps: usize,
    pub ema_decay: f64,
    pub cond_dropout_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            batch_size: 8,
            max_steps: 1000,
            ema_decay: 0.999,
            cond_dropout_prob: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Autoencoder defaults: betas (0.5, 0.9) and a learning rate sized for toy data.
    pub fn autoencoder_default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_betas: (0.5, 0.9),
            cond_dropout_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let err = |field: &str, why: &str| Err(Error::Config(format!("{section}.{field} {why}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", "must be finite and nonnegative");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return err("adam_betas", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return err("ema_decay", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return err("cond_dropout_prob", "must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    m: ParamSet<F>,
    v: ParamSet<F>,
    steps: i32,
    lr: f64,
    betas: (f64, f64),
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamSet<F>, lr: f64, betas: (f64, f64)) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
            lr,
            betas,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>) {
        self.steps += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let (fb1, fb2) = (F::of(b1), F::of(b2));
        let (gb1, gb2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let step = F::of(self.lr / c1);
        let c2 = F::of(c2);
        let eps = F::of(ADAM_EPS);
        let iter = params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in iter {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = fb1 * *m + gb1 * g;
                *v = fb2 * *v + gb2 * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// `ema = decay * ema + (1 - decay) * params`.
pub fn ema_update<F: Real>(ema: &mut ParamSet<F>, params: &ParamSet<F>, decay: f64) {
    let (d, k) = (F::of(decay), F::of(1.0 - decay));
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        e.zip_mut_with(p, |e, &p| *e = d * *e + k * p);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
}

pub fn write_loss_tsv(curve: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step\tloss\tema_loss\n");
    for r in curve {
        out.push_str(&format!("{}\t{:.9e}\t{:.9e}\n", r.step, r.loss, r.ema_loss));
    }
    crate::data::write_atomic(path, out.as_bytes())
}

/// What the monitor sees after every step.
pub struct Progress<'a, F: Real> {
    pub step: usize,
    pub loss: f64,
    pub params: &'a ParamSet<F>,
}

/// Return `true` to stop early.
pub type Monitor<'m, F> = &'m mut dyn FnMut(&Progress<'_, F>) -> bool;

pub fn no_monitor<F: Real>(_: &Progress<'_, F>) -> bool {
    false
}

pub struct Trained<F: Real> {
    pub params: ParamSet<F>,
    pub ema: ParamSet<F>,
    pub curve: Vec<LossRecord>,
    pub steps: usize,
}

/// Seeded epoch-shuffled index stream.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut SeededRng, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Generic loop: `draw` prepares one sample's inputs on the calling thread,
/// `grad` evaluates it (possibly in parallel).
fn run_loop<F: Real, S: Send + Sync>(
    mut params: ParamSet<F>,
    n: usize,
    cfg: &TrainConfig,
    mut draw: impl FnMut(usize, &mut SeededRng) -> S,
    grad: impl Fn(&ParamSet<F>, &S) -> Result<(f64, ParamSet<F>)> + Sync,
    monitor: Monitor<'_, F>,
) -> Result<Trained<F>> {
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut batcher = Batcher::new(n);
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.adam_betas);
    let mut ema = params.clone();
    let mut curve = Vec::with_capacity(cfg.max_steps);
    let mut smoothed = None;
    let mut steps = 0;
    for step in 1..=cfg.max_steps {
        let idx = batcher.next(&mut rng, cfg.batch_size);
        let samples: Vec<S> = idx.iter().map(|&i| draw(i, &mut rng)).collect();
        let results: Vec<Result<(f64, ParamSet<F>)>> = samples.par_iter().map(|s| grad(&params, s)).collect();
        let mut total = params.zeros_like();
        let mut loss = 0.0f64;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_scaled(&g, F::one());
        }
        let scale = 1.0 / cfg.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() || !total.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut mean = total.zeros_like();
        mean.add_scaled(&total, F::of(scale));
        adam.update(&mut params, &mean);
        ema_update(&mut ema, &params, cfg.ema_decay);
        let s = match smoothed {
            None => loss,
            Some(prev) => LOSS_SMOOTHING * prev + (1.0 - LOSS_SMOOTHING) * loss,
        };
        smoothed = Some(s);
        curve.push(LossRecord { step, loss, ema_loss: s });
        steps = step;
        if monitor(&Progress { step, loss, params: &params }) {
            break;
        }
    }
    Ok(Trained { params, ema, curve, steps })
}

pub fn train_autoencoder<F: Real>(
    videos: &[VideoTensor<F>],
    ae: &Autoencoder<F>,
    cfg: &TrainConfig,
    monitor: Monitor<'_, F>,
) -> Result<Trained<F>> {
    cfg.validate("train_ae")?;
    let shape = ae.config.video_shape();
    if let Some(v) = videos.iter().find(|v| v.data().shape() != shape) {
        return Err(Error::Config(format!(
            "dataset clip shape {:?} does not match autoencoder {:?}",
            v.data().shape(),
            shape
        )));
    }
    let config = ae.config.clone();
    run_loop(
        ae.params.clone(),
        videos.len(),
        cfg,
        |i, _| i,
        |p, &i| {
            let model = Autoencoder { config: config.clone(), params: p.clone() };
            model.loss_and_grad(&videos[i])
        },
        monitor,
    )
}

/// One clip in latent form: content frame, packed motion latent, class.
#[derive(Clone, Debug)]
pub struct LatentSample<F: Real> {
    pub content: Array3<F>,
    pub motion: ArrayD<F>,
    pub class: usize,
}

/// Encodes every clip once with the frozen autoencoder.
pub fn prepare_latents<F: Real>(ae: &Autoencoder<F>, videos: &[VideoTensor<F>], classes: &[usize]) -> Result<Vec<LatentSample<F>>> {
    if videos.len() != classes.len() {
        return Err(Error::dim("prepare_latents", &[videos.len()], &[classes.len()]));
    }
    videos
        .par_iter()
        .zip(classes.par_iter())
        .map(|(v, &class)| {
            let (content, z) = ae.encode(v)?;
            Ok(LatentSample {
                content: content.data,
                motion: z.pack(),
                class,
            })
        })
        .collect()
}

/// Uniform timestep in `[1, T]`.
pub fn sample_timestep(rng: &mut SeededRng, steps: usize) -> usize {
    rng.random_range(1..=steps)
}

struct NoisySample<F: Real> {
    index: usize,
    x_t: ArrayD<F>,
    eps: ArrayD<F>,
    class: usize,
    t: usize,
}

pub fn check_geometry<F: Real>(ae: &Autoencoder<F>, denoiser: &Denoiser<F>) -> Result<()> {
    let geo = LatentGeometry::from(&ae.config);
    if geo != denoiser.geometry {
        return Err(Error::Config(format!(
            "{} denoiser geometry {:?} does not match autoencoder {:?}",
            denoiser.kind.name(),
            denoiser.geometry,
            geo
        )));
    }
    Ok(())
}

pub fn train_denoiser<F: Real>(
    videos: &[VideoTensor<F>],
    classes: &[usize],
    ae: &Autoencoder<F>,
    denoiser: &Denoiser<F>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    monitor: Monitor<'_, F>,
) -> Result<Trained<F>> {
    check_geometry(ae, denoiser)?;
    let latents = prepare_latents(ae, videos, classes)?;
    train_denoiser_on_latents(&latents, denoiser, sched, cfg, monitor)
}

pub fn train_denoiser_on_latents<F: Real>(
    latents: &[LatentSample<F>],
    denoiser: &Denoiser<F>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    monitor: Monitor<'_, F>,
) -> Result<Trained<F>> {
    cfg.validate(&format!("train_{}", denoiser.kind.name()))?;
    let null = denoiser.config.null_class_id();
    if let Some(s) = latents.iter().find(|s| s.class >= null) {
        return Err(Error::Condition { id: s.class, null_id: null });
    }
    let kind = denoiser.kind;
    let shape = denoiser.input_shape();
    let template = Denoiser { params: ParamSet::new(), ..denoiser.clone() };
    run_loop(
        denoiser.params.clone(),
        latents.len(),
        cfg,
        |i, rng| {
            let s = &latents[i];
            let t = sample_timestep(rng, sched.steps());
            let eps = gaussian::<F>(rng, &shape);
            let drop = cfg.cond_dropout_prob > 0.0 && rng.random::<f64>() < cfg.cond_dropout_prob;
            let class = if drop { null } else { s.class };
            let x0 = match kind {
                DenoiserKind::Content => s.content.clone().into_dyn(),
                DenoiserKind::Motion => s.motion.clone(),
            };
            let x_t = forward_diffuse(&x0, t, &eps, sched).expect("t drawn in range");
            NoisySample { index: i, x_t, eps, class, t }
        },
        |p, s| {
            let model = Denoiser { params: p.clone(), ..template.clone() };
            let cond = (kind == DenoiserKind::Motion).then(|| &latents[s.index].content);
            model.loss_and_grad(&s.x_t, &s.eps, s.class, s.t, cond)
        },
        monitor,
    )
}

/// Mean ε-objective over `latents` at fixed seeded `(t, ε)` draws, without dropout.
pub fn eval_denoiser<F: Real>(latents: &[LatentSample<F>], denoiser: &Denoiser<F>, sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let shape = denoiser.input_shape();
    let draws: Vec<(usize, ArrayD<F>)> = latents
        .iter()
        .map(|_| (sample_timestep(&mut rng, sched.steps()), gaussian::<F>(&mut rng, &shape)))
        .collect();
    let losses: Vec<Result<f64>> = latents
        .par_iter()
        .zip(draws.par_iter())
        .map(|(s, (t, eps))| {
            let x0 = match denoiser.kind {
                DenoiserKind::Content => s.content.clone().into_dyn(),
                DenoiserKind::Motion => s.motion.clone(),
            };
            let x_t = forward_diffuse(&x0, *t, eps, sched)?;
            let cond = (denoiser.kind == DenoiserKind::Motion).then_some(&s.content);
            let pred = denoiser.predict(&x_t, s.class, *t, cond)?;
            crate::diffusion::eps_objective(&pred, eps)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / latents.len().max(1) as f64)
}

/// Mean reconstruction error over `videos`.
pub fn eval_autoencoder<F: Real>(videos: &[VideoTensor<F>], ae: &Autoencoder<F>) -> Result<f64> {
    let losses: Vec<Result<f64>> = videos.par_iter().map(|v| ae.loss(v)).collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / videos.len().max(1) as f64)
}
