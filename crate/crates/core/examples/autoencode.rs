//! Trains a small autoencoder for a few hundred steps and reports the
//! reconstruction error and the size of the latent.

use cmdlab::autoencoder::{AEConfig, Autoencoder};
use cmdlab::costmodel::compression_ratio;
use cmdlab::data::gen_moving_shapes;
use cmdlab::params::Init;
use cmdlab::training::{eval_autoencoder, no_monitor, train_autoencoder, TrainConfig};
use cmdlab::video::VideoTensor;

fn main() -> cmdlab::Result<()> {
    let cfg = AEConfig { depth: 2, ..AEConfig::default() };
    let clips = gen_moving_shapes(0, 16, cfg.frames, cfg.height, cfg.width, 5)?;
    let videos: Vec<VideoTensor<f32>> = clips.into_iter().map(|c| c.video).collect();

    let ae = Autoencoder::<f32>::new(cfg.clone(), 0, Init::Default)?;
    println!("untrained mse {:.4}", eval_autoencoder(&videos, &ae)?);
    let tc = TrainConfig { max_steps: 300, batch_size: 4, ..TrainConfig::autoencoder_default() };
    let out = train_autoencoder(&videos, &ae, &tc, &mut no_monitor)?;
    let ae = Autoencoder::from_params(cfg.clone(), out.params)?;
    println!("after {} steps mse {:.4}", out.steps, eval_autoencoder(&videos, &ae)?);

    let (content, motion) = ae.encode(&videos[1])?;
    let r = compression_ratio(&cfg);
    println!(
        "content frame {:?}, motion latents {:?}; {} values -> {} ({:.3}x)",
        content.shape(),
        motion.dims(),
        r.numerator,
        r.denominator,
        r.value()
    );
    Ok(())
}
