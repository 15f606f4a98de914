//! The invariant suite behind `cmdlab verify` and the acceptance target.
//!
//! Each check returns a [`CheckResult`]; a check that errors is reported as a
//! failure with the error text, never skipped.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, ArrayD, Axis, Zip};

use crate::autoencoder::{AEConfig, Autoencoder};
use crate::checkpoint::{autoencoder_checkpoint, denoiser_checkpoint, encode_checkpoint};
use crate::config::RunConfig;
use crate::costmodel::{compare_report, flops_network, CmdConfigs, Network, SamplingSteps};
use crate::data::gen_moving_shapes;
use crate::denoisers::{Denoiser, DenoiserConfig, DenoiserKind, LatentGeometry};
use crate::diffusion::{forward_diffuse, NoiseSchedule, ScheduleConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_all, tiny_ae_config, tiny_denoiser_config};
use crate::params::Init;
use crate::pipeline::{sample_stage, sample_video, EpsModel, Models, SampleSpec, SamplerKind};
use crate::rng::{gaussian, seeded};
use crate::training::{
    eval_autoencoder, eval_denoiser, no_monitor, prepare_latents, train_autoencoder, train_denoiser_on_latents, Progress,
    TrainConfig,
};
use crate::video::{ConditionId, VideoTensor};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub id: &'static str,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

pub struct Check {
    pub id: &'static str,
    pub name: &'static str,
    /// Minutes of CPU time on one core; only the overfit run is long.
    pub long: bool,
    run: fn() -> Result<(bool, String)>,
}

impl Check {
    pub fn run(&self) -> CheckResult {
        let start = Instant::now();
        let (pass, detail) = match (self.run)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        CheckResult {
            id: self.id,
            name: self.name,
            pass,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

pub fn checks() -> Vec<Check> {
    let c = |id, name, long, run| Check { id, name, long, run };
    vec![
        c("A1", "convex-combination bound", false, convex_bound as fn() -> _),
        c("A2", "static-video fixed point", false, static_fixed_point),
        c("A3", "gradient oracle", false, gradient_oracle),
        c("A4", "forward-marginal statistics", false, forward_marginals),
        c("A5", "oracle inversion", false, oracle_inversion),
        c("A6", "determinism", false, determinism),
        c("A7", "overfit smoke test", true, overfit_smoke),
        c("A8", "compression ratio", false, compression),
        c("A9", "FLOP counter exactness", false, flop_exactness),
        c("A10", "schedule invariants", false, schedule_invariants),
        c("A11", "sampler defaults", false, sampler_defaults),
    ]
}

pub fn format_row(r: &CheckResult) -> String {
    format!(
        "{:<4} {:<4} {:<28} {:>8.1}s  {}",
        r.id,
        if r.pass { "PASS" } else { "FAIL" },
        r.name,
        r.seconds,
        r.detail
    )
}

fn bounded_video(shape: (usize, usize, usize, usize), seed: u64) -> Result<VideoTensor<f32>> {
    let g = gaussian::<f32>(&mut seeded(seed), &[shape.0, shape.1, shape.2, shape.3]).mapv(|x| x.tanh());
    VideoTensor::new(g.into_dimensionality().expect("rank 4"))
}

fn convex_bound() -> Result<(bool, String)> {
    let cfg = AEConfig::default();
    let shape = (cfg.channels, cfg.frames, cfg.height, cfg.width);
    let mut worst = 0.0f32;
    for k in 0..100u64 {
        let ae = Autoencoder::<f32>::new(cfg.clone(), 1000 + k, Init::Random(0.5))?;
        let video = bounded_video(shape, k)?;
        let (content, _) = ae.encode(&video)?;
        let lo = video.data().map_axis(Axis(1), |v| v.iter().copied().fold(f32::INFINITY, f32::min));
        let hi = video.data().map_axis(Axis(1), |v| v.iter().copied().fold(f32::NEG_INFINITY, f32::max));
        Zip::from(&content.data).and(&lo).and(&hi).for_each(|&x, &a, &b| {
            worst = worst.max(a - x).max(x - b);
        });
    }
    Ok((worst <= 1e-6, format!("100 videos, worst excursion {worst:.2e}")))
}

fn static_fixed_point() -> Result<(bool, String)> {
    let cfg = AEConfig::default();
    let mut worst = 0.0f32;
    let mut cases = 0;
    for k in 0..20u64 {
        let frame = gaussian::<f32>(&mut seeded(k), &[cfg.channels, cfg.height, cfg.width])
            .mapv(|x| x.tanh())
            .into_dimensionality::<ndarray::Ix3>()
            .expect("rank 3");
        let video = Array4::from_shape_fn((cfg.channels, cfg.frames, cfg.height, cfg.width), |(c, _, h, w)| {
            frame[[c, h, w]]
        });
        let ae = Autoencoder::<f32>::new(cfg.clone(), 500 + k, Init::Random(1.0))?;
        let (content, _) = ae.encode(&VideoTensor::new(video)?)?;
        Zip::from(&content.data).and(&frame).for_each(|&a, &b| worst = worst.max((a - b).abs()));
        cases += 1;
    }
    let clips = gen_moving_shapes(3, 10, cfg.frames, cfg.height, cfg.width, 5)?;
    for (k, clip) in clips.iter().filter(|c| c.class == 0).enumerate() {
        let ae = Autoencoder::<f32>::new(cfg.clone(), 900 + k as u64, Init::Random(1.0))?;
        let (content, _) = ae.encode(&clip.video)?;
        let first = clip.video.frame(0);
        Zip::from(&content.data).and(&first).for_each(|&a, &b| worst = worst.max((a - b).abs()));
        cases += 1;
    }
    Ok((worst <= 1e-6, format!("{cases} static clips, max |x̄ - frame| = {worst:.2e}")))
}

fn gradient_oracle() -> Result<(bool, String)> {
    let reports = grad_check_all(1e-4)?;
    let pass = reports.iter().all(|(_, r)| r.pass);
    let parts: Vec<String> = reports
        .iter()
        .map(|(k, r)| format!("{} {:.1e}", k.name(), r.max_rel_err))
        .collect();
    Ok((pass, format!("max rel err: {}", parts.join(", "))))
}

fn forward_marginals() -> Result<(bool, String)> {
    let sched = ScheduleConfig::default().build()?;
    let x0 = ArrayD::from_shape_vec(vec![3], vec![0.8f64, -0.3, 0.0]).expect("3 values");
    let n = 10_000;
    let mut rng = seeded(17);
    let mut worst = 0.0f64;
    for &t in &[10usize, 250, 1000] {
        let ab = sched.alpha_bar(t);
        let draws: Vec<ArrayD<f64>> = (0..n)
            .map(|_| forward_diffuse(&x0, t, &gaussian::<f64>(&mut rng, &[3]), &sched))
            .collect::<Result<_>>()?;
        for i in 0..3 {
            let xs: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let want_var = 1.0 - ab;
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
            worst = worst
                .max((mean - ab.sqrt() * x0[i]).abs() / se_mean)
                .max((var - want_var).abs() / se_var);
        }
    }
    Ok((worst < 4.0, format!("t in {{10, 250, 1000}}, worst deviation {worst:.2} standard errors")))
}

struct RecordedEps<'a> {
    x0: &'a ArrayD<f64>,
    sched: &'a NoiseSchedule,
}

impl EpsModel<f64> for RecordedEps<'_> {
    fn predict(&self, x_t: &ArrayD<f64>, t: usize, _conditional: bool) -> Result<ArrayD<f64>> {
        let ab = self.sched.alpha_bar(t);
        Ok(Zip::from(x_t)
            .and(self.x0)
            .map_collect(|&x, &x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()))
    }
}

fn max_abs(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_inversion() -> Result<(bool, String)> {
    let sched = ScheduleConfig::default().build()?;
    let shape = [3, 8, 8];
    let x0 = gaussian::<f64>(&mut seeded(2), &shape).mapv(f64::tanh);
    let oracle = RecordedEps { x0: &x0, sched: &sched };
    let ddpm = SampleSpec {
        steps: sched.steps(),
        kind: SamplerKind::Ddpm,
        eta: 0.0,
        guidance: 0.0,
    };
    let chain = max_abs(&sample_stage(&oracle, &ddpm, &sched, &shape, 3)?, &x0);
    let jump = SampleSpec {
        steps: 1,
        guidance: 0.0,
        ..SampleSpec::default()
    };
    let single = max_abs(&sample_stage(&oracle, &jump, &sched, &shape, 4)?, &x0);
    Ok((
        chain < 1e-4 && single < 1e-10,
        format!("DDPM chain {chain:.1e}, single DDIM jump {single:.1e}"),
    ))
}

fn determinism() -> Result<(bool, String)> {
    let ae_cfg = tiny_ae_config();
    let geo = LatentGeometry::from(&ae_cfg);
    let clips = gen_moving_shapes(5, 8, ae_cfg.frames, ae_cfg.height, ae_cfg.width, 3)?;
    let videos: Vec<VideoTensor<f32>> = clips.iter().map(|c| c.video.clone()).collect();
    let classes: Vec<usize> = clips.iter().map(|c| c.class).collect();
    let sched = ScheduleConfig {
        steps: 100,
        ..ScheduleConfig::default()
    };
    let schedule = sched.build()?;
    let tc = TrainConfig {
        max_steps: 200,
        batch_size: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let run = || -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        let ae = Autoencoder::<f32>::new(ae_cfg.clone(), 1, Init::Default)?;
        let t = train_autoencoder(&videos, &ae, &tc, &mut no_monitor)?;
        let ae = Autoencoder::from_params(ae_cfg.clone(), t.params)?;
        let ae_bytes = encode_checkpoint(&autoencoder_checkpoint(&ae, Some(&t.ema))?)?;
        let latents = prepare_latents(&ae, &videos, &classes)?;
        let mut trained = Vec::new();
        for kind in [DenoiserKind::Content, DenoiserKind::Motion] {
            let d = Denoiser::<f32>::new(kind, tiny_denoiser_config(kind), geo.clone(), 2, Init::Default)?;
            let t = train_denoiser_on_latents(&latents, &d, &schedule, &tc, &mut no_monitor)?;
            trained.push(Denoiser { params: t.params, ..d });
        }
        let d_bytes = encode_checkpoint(&denoiser_checkpoint(&trained[1], None, &sched)?)?;
        let models = Models {
            autoencoder: &ae,
            content: &trained[0],
            content_schedule: &schedule,
            motion: &trained[1],
            motion_schedule: &schedule,
        };
        let spec = SampleSpec {
            steps: 20,
            ..SampleSpec::default()
        };
        let video = sample_video(&models, ConditionId::new(1, 3)?, &spec, &spec, 99)?;
        let v_bytes = crate::data::encode_vtrf(video.data())?;
        Ok((ae_bytes, d_bytes, v_bytes))
    };
    let a = single.install(run)?;
    let b = single.install(run)?;
    let c = run()?;
    let same = a == b && a == c;
    Ok((
        same,
        format!(
            "200-step AE + motion checkpoints and a DDIM video: repeat {}, default thread pool {}",
            if a == b { "identical" } else { "DIFFERENT" },
            if a == c { "identical" } else { "DIFFERENT" }
        ),
    ))
}

/// Step budget and stopping rule of the overfit run.
pub const OVERFIT_CLIPS: usize = 64;
pub const OVERFIT_AE_STEPS: usize = 5_000;
pub const OVERFIT_AE_TARGET: f64 = 1e-3;
pub const OVERFIT_MOTION_STEPS: usize = 10_000;
pub const OVERFIT_EVAL_EVERY: usize = 250;
/// The motion run stops early once the held-in loss is this far under the
/// zero predictor's 1.0.
pub const OVERFIT_MOTION_STOP: f64 = 0.5;

pub fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.count = OVERFIT_CLIPS;
    cfg.train.autoencoder.batch_size = 4;
    cfg.train.autoencoder.max_steps = OVERFIT_AE_STEPS;
    cfg.train.motion.max_steps = OVERFIT_MOTION_STEPS;
    cfg.train.motion.learning_rate = 1e-3;
    cfg.train.content.max_steps = 500;
    cfg.train.content.learning_rate = 1e-3;
    cfg
}

fn overfit_smoke() -> Result<(bool, String)> {
    let cfg = overfit_config();
    let d = &cfg.data;
    let clips = gen_moving_shapes(d.seed, d.count, d.frames, d.height, d.width, d.num_classes)?;
    let videos: Vec<VideoTensor<f32>> = clips.iter().map(|c| c.video.clone()).collect();
    let classes: Vec<usize> = clips.iter().map(|c| c.class).collect();

    let ae = Autoencoder::<f32>::new(cfg.autoencoder.clone(), cfg.train.autoencoder.seed, Init::Default)?;
    let mut mse = f64::INFINITY;
    let mut monitor = |p: &Progress<'_, f32>| {
        if !p.step.is_multiple_of(OVERFIT_EVAL_EVERY) {
            return false;
        }
        let m = Autoencoder {
            config: cfg.autoencoder.clone(),
            params: p.params.clone(),
        };
        mse = eval_autoencoder(&videos, &m).unwrap_or(f64::INFINITY);
        mse < OVERFIT_AE_TARGET
    };
    let t = train_autoencoder(&videos, &ae, &cfg.train.autoencoder, &mut monitor)?;
    let ae_steps = t.steps;
    let ae = Autoencoder::from_params(cfg.autoencoder.clone(), t.params)?;
    let mse = if ae_steps % OVERFIT_EVAL_EVERY == 0 { mse } else { eval_autoencoder(&videos, &ae)? };
    let ae_ok = mse < OVERFIT_AE_TARGET;

    let geo = cfg.geometry();
    let schedule = cfg.schedule.build()?;
    let latents = prepare_latents(&ae, &videos, &classes)?;
    let motion = Denoiser::<f32>::new(DenoiserKind::Motion, cfg.motion.clone(), geo.clone(), 1, Init::Default)?;
    let untrained = eval_denoiser(&latents, &motion, &schedule, 7)?;
    let (n, sq) = latents.iter().flat_map(|l| l.motion.iter()).fold((0usize, 0.0f64), |(n, s), &v| (n + 1, s + (v as f64).powi(2)));
    let motion_rms = (sq / n.max(1) as f64).sqrt();
    let mut eps_loss = f64::INFINITY;
    let template = motion.clone();
    let mut monitor = |p: &Progress<'_, f32>| {
        if !p.step.is_multiple_of(OVERFIT_EVAL_EVERY) {
            return false;
        }
        let m = Denoiser {
            params: p.params.clone(),
            ..template.clone()
        };
        eps_loss = eval_denoiser(&latents, &m, &schedule, 7).unwrap_or(f64::INFINITY);
        eps_loss < OVERFIT_MOTION_STOP
    };
    let t = train_denoiser_on_latents(&latents, &motion, &schedule, &cfg.train.motion, &mut monitor)?;
    let motion_steps = t.steps;
    let motion = Denoiser { params: t.params, ..motion };
    let eps_loss = eval_denoiser(&latents, &motion, &schedule, 7)?;
    let motion_ok = eps_loss < 1.0;

    let content = Denoiser::<f32>::new(DenoiserKind::Content, cfg.content.clone(), geo, 2, Init::Default)?;
    let t = train_denoiser_on_latents(&latents, &content, &schedule, &cfg.train.content, &mut no_monitor)?;
    let content = Denoiser { params: t.params, ..content };
    let models = Models {
        autoencoder: &ae,
        content: &content,
        content_schedule: &schedule,
        motion: &motion,
        motion_schedule: &schedule,
    };
    let video = sample_video(
        &models,
        ConditionId::new(1, cfg.data.num_classes)?,
        &cfg.sample.content,
        &cfg.sample.motion,
        42,
    )?;
    let in_range = video.data().shape() == cfg.autoencoder.video_shape()
        && video.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0);

    Ok((
        ae_ok && motion_ok && in_range,
        format!(
            "AE mse {mse:.2e} after {ae_steps} steps; motion eps-loss {untrained:.3} -> {eps_loss:.3} after {motion_steps} steps (latent rms {motion_rms:.3}); sample {}",
            if in_range { "in range" } else { "INVALID" }
        ),
    ))
}

fn cmd_configs(frames: usize) -> CmdConfigs {
    CmdConfigs {
        autoencoder: AEConfig {
            frames,
            height: 32,
            width: 32,
            ..AEConfig::default()
        },
        content: DenoiserConfig::content_default(),
        motion: DenoiserConfig::default(),
    }
}

fn compression() -> Result<(bool, String)> {
    let steps = SamplingSteps {
        content: 50,
        motion: 100,
        baseline: 100,
        passes: 2,
    };
    let toy = compare_report(&cmd_configs(16), &DenoiserConfig::default(), &steps)?;
    let c = toy.ratio("compression").ok_or_else(|| Error::Invariant("no compression row".into()))?;
    let exact = c.numerator == 3 * 16 * 32 * 32 && c.denominator == 3 * 32 * 32 + 8 * 16 * (16 + 16);
    let mut ratios = Vec::new();
    for l in [4, 8, 16, 32] {
        let r = compare_report(&cmd_configs(l), &DenoiserConfig::default(), &steps)?;
        let get = |n: &str| r.ratio(n).map(|x| x.value()).unwrap_or(f64::NAN);
        ratios.push((l, get("compression"), get("sampling_flops")));
    }
    let monotone = ratios.windows(2).all(|w| w[1].1 > w[0].1 && w[1].2 >= w[0].2);
    let sweep: Vec<String> = ratios.iter().map(|(l, c, f)| format!("L={l}: {c:.3}x/{f:.2}x")).collect();
    Ok((
        exact && monotone,
        format!(
            "toy {}/{} = {:.3}x; compression/FLOP ratios {}",
            c.numerator,
            c.denominator,
            c.value(),
            sweep.join(", ")
        ),
    ))
}

fn flop_exactness() -> Result<(bool, String)> {
    let one = flops_network(&Network::Linear { tokens: 10, din: 4, dout: 8 })?.totals().flops;
    let ae_geo = AEConfig::default();
    let geo = LatentGeometry::from(&ae_geo);
    let mut linear = true;
    for k in 1..=4 {
        let nets = [
            Network::Autoencoder(AEConfig { depth: 2 * k, ..ae_geo.clone() }),
            Network::Content(DenoiserConfig { depth: k, ..DenoiserConfig::content_default() }, geo.clone()),
            Network::Motion(DenoiserConfig { depth: k, ..DenoiserConfig::default() }, geo.clone()),
            Network::MonolithicBaseline(DenoiserConfig { depth: k, ..DenoiserConfig::default() }, geo.clone()),
        ];
        let base = [
            Network::Autoencoder(AEConfig { depth: 2, ..ae_geo.clone() }),
            Network::Content(DenoiserConfig { depth: 1, ..DenoiserConfig::content_default() }, geo.clone()),
            Network::Motion(DenoiserConfig { depth: 1, ..DenoiserConfig::default() }, geo.clone()),
            Network::MonolithicBaseline(DenoiserConfig { depth: 1, ..DenoiserConfig::default() }, geo.clone()),
        ];
        for (n, b) in nets.iter().zip(&base) {
            let (rn, rb) = (flops_network(n)?, flops_network(b)?);
            for prefix in ["blocks.", "enc.blocks.", "dec.blocks."] {
                linear &= rn.flops_with_prefix(prefix) == k as u64 * rb.flops_with_prefix(prefix);
            }
            linear &= rn.totals().flops == rn.rows.iter().map(|r| r.flops).sum::<u64>();
        }
    }
    Ok((
        one == 640 && linear,
        format!("one linear layer {one} FLOPs; block FLOPs linear in depth: {linear}"),
    ))
}

fn schedule_invariants() -> Result<(bool, String)> {
    let lin = ScheduleConfig::default().build()?;
    let one = ScheduleConfig {
        kind: ScheduleKind::TerminalOne,
        ..ScheduleConfig::default()
    }
    .build()?;
    let shape_ok = |s: &NoiseSchedule| {
        s.alpha_bars().windows(2).all(|w| w[1] < w[0]) && s.sigmas().windows(2).all(|w| w[1] >= w[0])
    };
    let t = lin.steps();
    let (ab_lin, ab_one) = (lin.alpha_bar(t), one.alpha_bar(t));
    Ok((
        shape_ok(&lin) && shape_ok(&one) && ab_lin < 1e-4 && ab_one == 0.0,
        format!("linear alpha_bar_T = {ab_lin:.2e}, terminal_one alpha_bar_T = {ab_one}"),
    ))
}

/// Echoes the default configuration the way every subcommand does, reads the
/// echo back and checks the sampler defaults in it.
fn sampler_defaults() -> Result<(bool, String)> {
    let dir = std::env::temp_dir().join(format!("cmdlab-echo-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    crate::cli::echo_config(&RunConfig::default(), &dir)?;
    let echoed = read_echo(&dir.join(crate::cli::CONFIG_ECHO));
    std::fs::remove_dir_all(&dir)?;
    let s = echoed?.sample;
    let ok = s.content.steps == 50
        && s.motion.steps == 100
        && s.content.eta == 0.0
        && s.motion.eta == 0.0
        && s.content.guidance == 4.0
        && s.motion.guidance == 4.0
        && s.content.kind == SamplerKind::Ddim
        && s.motion.kind == SamplerKind::Ddim;
    Ok((
        ok,
        format!(
            "echoed content {} steps / motion {} steps / eta {} / w {}",
            s.content.steps, s.motion.steps, s.content.eta, s.content.guidance
        ),
    ))
}

fn read_echo(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| Error::Config(e.to_string()))
}
