use cmdlab::autoencoder::Autoencoder;
use cmdlab::data::gen_moving_shapes;
use cmdlab::denoisers::{Denoiser, DenoiserKind, LatentGeometry};
use cmdlab::diffusion::ScheduleConfig;
use cmdlab::gradcheck::{tiny_ae_config, tiny_denoiser_config};
use cmdlab::params::{Init, ParamSet};
use cmdlab::rng::seeded;
use cmdlab::training::*;
use cmdlab::video::VideoTensor;
use cmdlab::Error;
use ndarray::Array3;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn clips(n: usize) -> (Vec<VideoTensor<f32>>, Vec<usize>) {
    let c = tiny_ae_config();
    let clips = gen_moving_shapes(3, n, c.frames, c.height, c.width, 3).unwrap();
    (clips.iter().map(|c| c.video.clone()).collect(), clips.iter().map(|c| c.class).collect())
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        batch_size: 3,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

fn bits(p: &ParamSet<f32>) -> Vec<u32> {
    p.iter().flat_map(|(_, t)| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

fn ae() -> Autoencoder<f32> {
    Autoencoder::new(tiny_ae_config(), 9, Init::Random(0.05)).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_exact() {
    let (videos, _) = clips(4);
    let model = ae();
    let c = TrainConfig {
        learning_rate: 0.0,
        ..cfg(3)
    };
    let out = train_autoencoder(&videos, &model, &c, &mut no_monitor).unwrap();
    assert_eq!(bits(&out.params), bits(&model.params));
    assert_eq!(out.curve.len(), 3);
}

#[test]
fn ema_with_zero_decay_tracks_parameters() {
    let (videos, _) = clips(4);
    let c = TrainConfig { ema_decay: 0.0, ..cfg(3) };
    let out = train_autoencoder(&videos, &ae(), &c, &mut no_monitor).unwrap();
    assert_eq!(bits(&out.ema), bits(&out.params));
}

#[test]
fn ema_update_rule() {
    let mut a = ParamSet::new();
    a.insert("w", ndarray::arr1(&[1.0f64, 2.0]).into_dyn());
    let mut b = ParamSet::new();
    b.insert("w", ndarray::arr1(&[3.0f64, -2.0]).into_dyn());
    ema_update(&mut a, &b, 0.75);
    assert_eq!(a.get("w").unwrap().as_slice().unwrap(), &[1.5, 1.0]);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (videos, _) = clips(6);
    let model = ae();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_autoencoder(&videos, &model, &cfg(4), &mut no_monitor).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(a.curve, b.curve);
}

#[test]
fn loss_curve_smoothing() {
    let (videos, _) = clips(4);
    let out = train_autoencoder(&videos, &ae(), &cfg(5), &mut no_monitor).unwrap();
    let c = &out.curve;
    assert_eq!(c[0].ema_loss, c[0].loss);
    for k in 1..c.len() {
        let want = LOSS_SMOOTHING * c[k - 1].ema_loss + (1.0 - LOSS_SMOOTHING) * c[k].loss;
        assert_eq!(c[k].ema_loss, want);
        assert_eq!(c[k].step, k + 1);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.tsv");
    write_loss_tsv(c, &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step\tloss\tema_loss"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn monitor_can_stop_early() {
    let (videos, _) = clips(4);
    let mut stop = |p: &Progress<'_, f32>| p.step == 2;
    let out = train_autoencoder(&videos, &ae(), &cfg(10), &mut stop).unwrap();
    assert_eq!(out.steps, 2);
}

#[test]
fn timesteps_are_uniform() {
    let t = 10;
    let n = 100_000;
    let mut rng = seeded(1);
    let mut counts = vec![0usize; t];
    for _ in 0..n {
        let s = sample_timestep(&mut rng, t);
        assert!((1..=t).contains(&s));
        counts[s - 1] += 1;
    }
    let expected = n as f64 / t as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((t - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

fn content_setup() -> (Vec<LatentSample<f32>>, Denoiser<f32>) {
    let (videos, classes) = clips(6);
    let latents = prepare_latents(&ae(), &videos, &classes).unwrap();
    let kind = DenoiserKind::Content;
    let d = Denoiser::new(kind, tiny_denoiser_config(kind), LatentGeometry::from(&tiny_ae_config()), 2, Init::Random(0.05)).unwrap();
    (latents, d)
}

fn null_row(p: &ParamSet<f32>, null: usize) -> Vec<u32> {
    p.get("class_embed").unwrap().outer_iter().nth(null).unwrap().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn null_class_row_only_trains_under_dropout() {
    let (latents, d) = content_setup();
    let sched = ScheduleConfig {
        steps: 50,
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap();
    let null = d.config.null_class_id();
    let run = |p| {
        let c = TrainConfig {
            cond_dropout_prob: p,
            ..cfg(4)
        };
        train_denoiser_on_latents(&latents, &d, &sched, &c, &mut no_monitor).unwrap()
    };
    assert_eq!(null_row(&run(0.0).params, null), null_row(&d.params, null));
    assert_ne!(null_row(&run(0.9).params, null), null_row(&d.params, null));
}

#[test]
fn non_finite_loss_reports_divergence() {
    let (mut latents, d) = content_setup();
    for s in &mut latents {
        s.content = Array3::from_elem(s.content.raw_dim(), f32::NAN);
    }
    let sched = ScheduleConfig::default().build().unwrap();
    match train_denoiser_on_latents(&latents, &d, &sched, &cfg(3), &mut no_monitor) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {:?}", other.map(|t| t.steps)),
    }
}

#[test]
fn denoiser_geometry_must_match_the_autoencoder() {
    let (videos, classes) = clips(2);
    let mut other = tiny_ae_config();
    other.width = 16;
    let kind = DenoiserKind::Motion;
    let d = Denoiser::<f32>::new(kind, tiny_denoiser_config(kind), LatentGeometry::from(&other), 0, Init::Default).unwrap();
    let sched = ScheduleConfig::default().build().unwrap();
    let r = train_denoiser(&videos, &classes, &ae(), &d, &sched, &cfg(1), &mut no_monitor);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate("t").is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { ema_decay: 1.5, ..TrainConfig::default() },
        TrainConfig { cond_dropout_prob: 2.0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate("train").is_err(), "{bad:?}");
    }
}

#[test]
fn denoiser_training_reduces_loss() {
    let (latents, d) = content_setup();
    let sched = ScheduleConfig {
        steps: 50,
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap();
    let before = eval_denoiser(&latents, &d, &sched, 5).unwrap();
    let c = TrainConfig {
        learning_rate: 3e-3,
        cond_dropout_prob: 0.0,
        ..cfg(60)
    };
    let out = train_denoiser_on_latents(&latents, &d, &sched, &c, &mut no_monitor).unwrap();
    let trained = Denoiser { params: out.params, ..d };
    let after = eval_denoiser(&latents, &trained, &sched, 5).unwrap();
    assert!(after < before, "{after} >= {before}");
}
