//! Prints both noise schedules and inverts the forward process with an
//! oracle noise predictor.

use cmdlab::diffusion::{forward_diffuse, predict_x0, ScheduleConfig, ScheduleKind};
use cmdlab::rng::{gaussian, seeded};

fn main() -> cmdlab::Result<()> {
    for kind in [ScheduleKind::Linear, ScheduleKind::TerminalOne] {
        let s = ScheduleConfig { kind, ..ScheduleConfig::default() }.build()?;
        print!("{kind:?}:");
        for t in [1, 250, 500, 750, 1000] {
            print!("  t={t} alpha_bar={:.3e} sigma={:.4}", s.alpha_bar(t), s.sigma(t));
        }
        println!();
    }

    let sched = ScheduleConfig::default().build()?;
    let mut rng = seeded(1);
    let x0 = gaussian::<f64>(&mut rng, &[4]).mapv(f64::tanh);
    let eps = gaussian::<f64>(&mut rng, &[4]);
    for t in [10, 500, 999] {
        let x_t = forward_diffuse(&x0, t, &eps, &sched)?;
        let back = predict_x0(&x_t, &eps, t, &sched)?;
        let err = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("t={t}: |x_t| = {:.3}, x0 recovered to {err:.1e}", x_t.mapv(|v| v * v).sum().sqrt());
    }
    Ok(())
}
