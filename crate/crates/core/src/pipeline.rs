//! Two-stage sampling: a content frame first, then motion latents
//! conditioned on it, then decoding to a video.

use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

use cmdlab_autograd::Real;

use crate::autoencoder::Autoencoder;
use crate::denoisers::{Denoiser, DenoiserKind, LatentGeometry};
use crate::diffusion::{cfg_combine, ddim_step_eta, ddpm_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{gaussian, seeded, split_seed};
use crate::video::{ConditionId, ContentFrame, MotionLatent, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    pub steps: usize,
    pub kind: SamplerKind,
    pub eta: f64,
    pub guidance: f64,
}

pub const DEFAULT_CONTENT_STEPS: usize = 50;
pub const DEFAULT_MOTION_STEPS: usize = 100;
pub const DEFAULT_GUIDANCE: f64 = 4.0;

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            steps: DEFAULT_CONTENT_STEPS,
            kind: SamplerKind::Ddim,
            eta: 0.0,
            guidance: DEFAULT_GUIDANCE,
        }
    }
}

impl SampleSpec {
    pub fn content_default() -> Self {
        Self::default()
    }

    pub fn motion_default() -> Self {
        Self {
            steps: DEFAULT_MOTION_STEPS,
            ..Self::default()
        }
    }

    pub fn validate(&self, section: &str, sched: &NoiseSchedule) -> Result<()> {
        let t = sched.steps();
        if self.steps == 0 || self.steps > t {
            return Err(Error::Config(format!("{section}.steps {} must lie in 1..={t}", self.steps)));
        }
        if self.kind == SamplerKind::Ddpm && self.steps != t {
            return Err(Error::Config(format!(
                "{section}.steps {} must equal T = {t} for the ddpm sampler",
                self.steps
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("{section}.eta {} must be finite and nonnegative", self.eta)));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config(format!(
                "{section}.guidance {} must be finite and nonnegative",
                self.guidance
            )));
        }
        Ok(())
    }
}

/// Evenly spaced timesteps `k T / S` for `k = S, ..., 1`; always starts at `T`.
pub fn timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|k| k * total / steps).collect()
}

/// A noise predictor with conditional and unconditional branches.
pub trait EpsModel<F: Real> {
    fn predict(&self, x_t: &ArrayD<F>, t: usize, conditional: bool) -> Result<ArrayD<F>>;
}

/// A denoiser bound to a class and, for motion, a fixed content frame.
pub struct Conditioned<'a, F: Real> {
    pub denoiser: &'a Denoiser<F>,
    pub class: ConditionId,
    pub content: Option<&'a Array3<F>>,
}

impl<F: Real> EpsModel<F> for Conditioned<'_, F> {
    fn predict(&self, x_t: &ArrayD<F>, t: usize, conditional: bool) -> Result<ArrayD<F>> {
        // the content frame is kept in the unconditional pass; only the class drops
        let class = if conditional {
            self.class.value()
        } else {
            self.denoiser.config.null_class_id()
        };
        self.denoiser.predict(x_t, class, t, self.content)
    }
}

/// Runs one reverse chain from seeded Gaussian noise of `shape`.
pub fn sample_stage<F: Real>(
    model: &dyn EpsModel<F>,
    spec: &SampleSpec,
    sched: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<ArrayD<F>> {
    spec.validate("sample", sched)?;
    let mut rng = seeded(seed);
    let mut x = gaussian::<F>(&mut rng, shape);
    let ts = timesteps(sched.steps(), spec.steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let cond = model.predict(&x, t, true)?;
        let eps = if spec.guidance > 0.0 {
            let uncond = model.predict(&x, t, false)?;
            cfg_combine(&cond, &uncond, spec.guidance)?
        } else {
            cond
        };
        x = match spec.kind {
            SamplerKind::Ddpm => {
                let noise = if t > 1 {
                    gaussian::<F>(&mut rng, shape)
                } else {
                    ArrayD::zeros(x.raw_dim())
                };
                ddpm_step(&x, &eps, t, sched, &noise)?
            }
            SamplerKind::Ddim => {
                let noise = if spec.eta > 0.0 {
                    gaussian::<F>(&mut rng, shape)
                } else {
                    ArrayD::zeros(x.raw_dim())
                };
                ddim_step_eta(&x, &eps, t, t_prev, sched, spec.eta, &noise)?
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at t = {t}")));
        }
    }
    Ok(x)
}

/// Everything needed to generate a clip.
pub struct Models<'a, F: Real> {
    pub autoencoder: &'a Autoencoder<F>,
    pub content: &'a Denoiser<F>,
    pub content_schedule: &'a NoiseSchedule,
    pub motion: &'a Denoiser<F>,
    pub motion_schedule: &'a NoiseSchedule,
}

impl<F: Real> Models<'_, F> {
    pub fn check_compatible(&self) -> Result<()> {
        let geo = LatentGeometry::from(&self.autoencoder.config);
        let mut problems = Vec::new();
        for (d, want) in [(self.content, DenoiserKind::Content), (self.motion, DenoiserKind::Motion)] {
            if d.kind != want {
                problems.push(format!("{} slot holds a {} denoiser", want.name(), d.kind.name()));
            }
            if d.geometry != geo {
                problems.push(format!(
                    "{}: content {:?} motion {:?} vs autoencoder content {:?} motion {:?}",
                    want.name(),
                    d.geometry.content_shape(),
                    d.geometry.motion_shape(),
                    geo.content_shape(),
                    geo.motion_shape()
                ));
            }
        }
        if self.content.config.num_classes != self.motion.config.num_classes {
            problems.push(format!(
                "class count: content {} vs motion {}",
                self.content.config.num_classes, self.motion.config.num_classes
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("incompatible checkpoints: {}", problems.join("; "))))
        }
    }
}

/// Content stage output, handed to the motion stage by value.
pub fn sample_content<F: Real>(models: &Models<'_, F>, class: ConditionId, spec: &SampleSpec, seed: u64) -> Result<ContentFrame<F>> {
    let model = Conditioned {
        denoiser: models.content,
        class,
        content: None,
    };
    let shape = models.content.input_shape();
    ContentFrame::from_dyn(sample_stage(&model, spec, models.content_schedule, &shape, seed)?)
}

pub fn sample_motion<F: Real>(
    models: &Models<'_, F>,
    class: ConditionId,
    content: ContentFrame<F>,
    spec: &SampleSpec,
    seed: u64,
) -> Result<MotionLatent<F>> {
    let model = Conditioned {
        denoiser: models.motion,
        class,
        content: Some(&content.data),
    };
    let shape = models.motion.input_shape();
    let z = sample_stage(&model, spec, models.motion_schedule, &shape, seed)?;
    MotionLatent::unpack(&z, models.motion.geometry.latent_h())
}

/// Content stage, then motion stage on the final content frame, then decode.
/// `seed` is split into independent stage seeds.
pub fn sample_video<F: Real>(
    models: &Models<'_, F>,
    class: ConditionId,
    spec_content: &SampleSpec,
    spec_motion: &SampleSpec,
    seed: u64,
) -> Result<VideoTensor<F>> {
    models.check_compatible()?;
    spec_content.validate("content", models.content_schedule)?;
    spec_motion.validate("motion", models.motion_schedule)?;
    ConditionId::new(class.value(), models.content.config.num_classes)?;
    let (content_seed, motion_seed) = split_seed(seed);
    let content = sample_content(models, class, spec_content, content_seed)?;
    let z = sample_motion(models, class, content.clone(), spec_motion, motion_seed)?;
    models.autoencoder.decode(&content, &z)
}
