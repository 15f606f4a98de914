//! Analytic sampling cost of the two-stage model against a monolithic
//! denoiser over every latent patch of the clip.

use cmdlab::config::RunConfig;

fn main() -> cmdlab::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.autoencoder.height = 32;
    cfg.autoencoder.width = 32;
    cfg.autoencoder.frames = 16;
    let (_, text) = cmdlab::cli::cost_report_text(&cfg)?;
    print!("{text}");
    Ok(())
}
