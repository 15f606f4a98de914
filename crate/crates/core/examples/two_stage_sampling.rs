//! Trains tiny versions of all three networks and samples a clip: a content
//! frame first, then motion latents given that frame, then one decode.

use cmdlab::autoencoder::Autoencoder;
use cmdlab::data::gen_moving_shapes;
use cmdlab::denoisers::{Denoiser, DenoiserKind, LatentGeometry};
use cmdlab::diffusion::ScheduleConfig;
use cmdlab::gradcheck::{tiny_ae_config, tiny_denoiser_config};
use cmdlab::params::Init;
use cmdlab::pipeline::{sample_content, sample_motion, Models, SampleSpec};
use cmdlab::training::{no_monitor, prepare_latents, train_autoencoder, train_denoiser_on_latents, TrainConfig};
use cmdlab::video::ConditionId;

fn main() -> cmdlab::Result<()> {
    let cfg = tiny_ae_config();
    let clips = gen_moving_shapes(2, 12, cfg.frames, cfg.height, cfg.width, 3)?;
    let videos: Vec<_> = clips.iter().map(|c| c.video.clone()).collect();
    let classes: Vec<_> = clips.iter().map(|c| c.class).collect();
    let tc = TrainConfig { max_steps: 150, batch_size: 4, learning_rate: 2e-3, ..TrainConfig::default() };

    let ae = Autoencoder::<f32>::new(cfg.clone(), 0, Init::Default)?;
    let ae = Autoencoder::from_params(cfg.clone(), train_autoencoder(&videos, &ae, &tc, &mut no_monitor)?.params)?;
    let latents = prepare_latents(&ae, &videos, &classes)?;
    let sched_cfg = ScheduleConfig { steps: 200, ..ScheduleConfig::default() };
    let sched = sched_cfg.build()?;
    let mut nets = Vec::new();
    for kind in [DenoiserKind::Content, DenoiserKind::Motion] {
        let d = Denoiser::<f32>::new(kind, tiny_denoiser_config(kind), LatentGeometry::from(&cfg), 1, Init::Default)?;
        let t = train_denoiser_on_latents(&latents, &d, &sched, &tc, &mut no_monitor)?;
        println!("{} denoiser: final smoothed loss {:.3}", kind.name(), t.curve.last().map_or(f64::NAN, |r| r.ema_loss));
        nets.push(Denoiser { params: t.params, ..d });
    }
    let models = Models {
        autoencoder: &ae,
        content: &nets[0],
        content_schedule: &sched,
        motion: &nets[1],
        motion_schedule: &sched,
    };
    let spec = SampleSpec { steps: 20, ..SampleSpec::default() };
    for class in 0..3 {
        let c = ConditionId::new(class, 3)?;
        let content = sample_content(&models, c, &spec, 10 + class as u64)?;
        let z = sample_motion(&models, c, content.clone(), &spec, 20 + class as u64)?;
        let video = ae.decode(&content, &z)?;
        let (lo, hi) = video.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!("class {class}: video {:?} in [{lo:.3}, {hi:.3}]", video.data().shape());
    }
    Ok(())
}
