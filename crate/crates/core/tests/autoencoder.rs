use cmdlab::autoencoder::{broadcast_sum, content_frame, recon_loss, AEConfig, Autoencoder, ImportanceMode};
use cmdlab::params::Init;
use cmdlab::video::{ContentFrame, MotionLatent, VideoTensor};
use cmdlab::Error;
use ndarray::{s, Array3, Array4, ArrayD, Axis, IxDyn};
use proptest::prelude::*;

fn tiny() -> AEConfig {
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

fn wave_video(cfg: &AEConfig, phase: f64) -> VideoTensor<f64> {
    let shape = (cfg.channels, cfg.frames, cfg.height, cfg.width);
    VideoTensor::new(Array4::from_shape_fn(shape, |(c, l, h, w)| {
        (0.3 * c as f64 + 0.7 * l as f64 + 0.45 * h as f64 - 0.2 * w as f64 + phase).sin() * 0.9
    }))
    .unwrap()
}

fn set(ae: &mut Autoencoder<f64>, name: &str, f: impl Fn(&mut ArrayD<f64>)) {
    f(ae.params.get_mut(name).unwrap());
}

#[test]
fn zero_network_yields_bias_only_features() {
    let cfg = tiny();
    let mut ae = Autoencoder::<f64>::new(cfg.clone(), 1, Init::Default).unwrap();
    for (_, v) in ae.params.iter_mut() {
        v.fill(0.0);
    }
    let bias: Vec<f64> = (0..cfg.hidden_dim).map(|i| i as f64 * 0.5 - 1.0).collect();
    set(&mut ae, "enc.norm.b", |b| b.assign(&ArrayD::from_shape_vec(IxDyn(&[bias.len()]), bias.clone()).unwrap()));
    let u = ae.encode_base(&wave_video(&cfg, 0.0)).unwrap();
    for ((c, _, _, _), v) in u.indexed_iter() {
        assert_eq!(*v, bias[c]);
    }
}

#[test]
fn toy_feature_shape() {
    let cfg = AEConfig::default();
    let ae = Autoencoder::<f32>::new(cfg.clone(), 0, Init::Default).unwrap();
    let video = VideoTensor::new(Array4::<f32>::zeros((3, 8, 16, 16))).unwrap();
    assert_eq!(ae.encode_base(&video).unwrap().shape(), &[32, 8, 8, 8]);
    let (content, z) = ae.encode(&video).unwrap();
    assert_eq!(content.shape(), &[3, 16, 16]);
    assert_eq!(z.zx.shape(), &[8, 8, 8]);
    assert_eq!(z.zy.shape(), &[8, 8, 8]);
}

#[test]
fn indivisible_patch_is_rejected() {
    let cfg = AEConfig { height: 9, ..tiny() };
    assert!(matches!(Autoencoder::<f64>::new(cfg, 0, Init::Default), Err(Error::Config(_))));
}

#[test]
fn features_respond_to_a_single_frame() {
    let cfg = tiny();
    let ae = Autoencoder::<f64>::new(cfg.clone(), 3, Init::Random(0.3)).unwrap();
    let a = wave_video(&cfg, 0.0);
    let mut b = a.data().clone();
    b.slice_mut(s![.., 2, .., ..]).mapv_inplace(|x| x * 0.5);
    let b = VideoTensor::new(b).unwrap();
    let ua = ae.encode_base(&a).unwrap();
    let ub = ae.encode_base(&b).unwrap();
    let diff: f64 = (&ua - &ub).mapv(f64::abs).sum();
    assert!(diff > 1e-6, "diff {diff}");
}

#[test]
fn equal_logits_give_uniform_weights() {
    let cfg = tiny();
    let mut ae = Autoencoder::<f64>::new(cfg.clone(), 0, Init::Random(0.3)).unwrap();
    set(&mut ae, "importance.w", |w| w.fill(0.0));
    let u = ae.encode_base(&wave_video(&cfg, 0.0)).unwrap();
    let w = ae.importance_weights(&u).unwrap();
    assert_eq!(w.shape(), &[3, 4, 8, 8]);
    for v in w.iter() {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn weights_are_positive_and_normalized() {
    for mode in [ImportanceMode::PerChannel, ImportanceMode::ChannelShared, ImportanceMode::Uniform] {
        let cfg = AEConfig { importance: mode, ..tiny() };
        let ae = Autoencoder::<f64>::new(cfg.clone(), 5, Init::Random(0.5)).unwrap();
        let u = ae.encode_base(&wave_video(&cfg, 1.0)).unwrap();
        let w = ae.importance_weights(&u).unwrap();
        assert!(w.iter().all(|&v| v > 0.0));
        for s in w.sum_axis(Axis(1)).iter() {
            assert!((s - 1.0).abs() < 1e-6, "{mode:?} sum {s}");
        }
    }
}

#[test]
fn softmax_of_zero_and_ln3() {
    let cfg = AEConfig {
        channels: 1,
        frames: 2,
        height: 2,
        width: 2,
        input_patch: (1, 1),
        hidden_dim: 1,
        depth: 0,
        heads: 1,
        head_dim: 1,
        motion_channels: 1,
        importance: ImportanceMode::PerChannel,
    };
    let mut ae = Autoencoder::<f64>::new(cfg, 0, Init::Default).unwrap();
    set(&mut ae, "importance.w", |w| w.fill(1.0));
    let mut u = Array4::zeros((1, 2, 2, 2));
    u.slice_mut(s![.., 1, .., ..]).fill(3f64.ln());
    let w = ae.importance_weights(&u).unwrap();
    assert!((w[[0, 0, 1, 1]] - 0.25).abs() < 1e-12);
    assert!((w[[0, 1, 1, 1]] - 0.75).abs() < 1e-12);
}

#[test]
fn content_frame_examples() {
    let frame = Array3::from_shape_fn((1, 2, 2), |(_, h, w)| 0.1 * (h * 2 + w) as f64 - 0.2);
    let stat = Array4::from_shape_fn((1, 3, 2, 2), |(c, _, h, w)| frame[[c, h, w]]);
    let weights = Array4::from_shape_fn((1, 3, 2, 2), |(_, l, h, w)| [0.2, 0.5, 0.3][(l + h + w) % 3]);
    let x = content_frame(&VideoTensor::new(stat).unwrap(), &weights).unwrap();
    for (a, b) in x.data.iter().zip(frame.iter()) {
        assert!((a - b).abs() < 1e-15);
    }

    let video = VideoTensor::new(Array4::from_shape_vec((1, 2, 1, 1), vec![0.0, 1.0]).unwrap()).unwrap();
    let w = Array4::from_shape_vec((1, 2, 1, 1), vec![0.25, 0.75]).unwrap();
    assert_eq!(content_frame(&video, &w).unwrap().data[[0, 0, 0]], 0.75);

    let v = wave_video(&tiny(), 0.4);
    let uniform = Array4::from_elem((3, 4, 8, 8), 0.25);
    let mean = v.data().mean_axis(Axis(1)).unwrap();
    let x = content_frame(&v, &uniform).unwrap();
    for (a, b) in x.data.iter().zip(mean.iter()) {
        assert!((a - b).abs() < 1e-12);
    }

    let bad = Array4::from_elem((3, 4, 8, 8), 0.3);
    assert!(matches!(content_frame(&v, &bad), Err(Error::Invariant(_))));
}

#[test]
fn motion_head_averages_then_projects() {
    let cfg = AEConfig { motion_channels: 8, ..tiny() };
    let mut ae = Autoencoder::<f64>::new(cfg.clone(), 2, Init::Random(0.3)).unwrap();
    let u = Array4::from_shape_fn((8, 4, 4, 4), |(c, l, _, _)| (c as f64 - l as f64) * 0.1);
    let z = ae.motion_latents(&u).unwrap();
    for d in 0..8 {
        for l in 0..4 {
            for h in 1..4 {
                assert_eq!(z.zx[[d, l, h]], z.zx[[d, l, 0]]);
                assert_eq!(z.zy[[d, l, h]], z.zy[[d, l, 0]]);
            }
        }
    }

    set(&mut ae, "motion.w", |w| {
        w.fill(0.0);
        for i in 0..8 {
            w[[i, i]] = 1.0;
        }
    });
    set(&mut ae, "motion.b", |b| b.fill(0.0));
    let u = Array4::from_shape_fn((8, 4, 4, 4), |(c, l, h, w)| ((c * 7 + l * 5 + h * 3 + w) % 11) as f64);
    let z = ae.motion_latents(&u).unwrap();
    let mean_w = u.mean_axis(Axis(3)).unwrap();
    let mean_h = u.mean_axis(Axis(2)).unwrap();
    for (a, b) in z.zx.iter().zip(mean_w.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in z.zy.iter().zip(mean_h.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn toy_motion_shapes() {
    let ae = Autoencoder::<f32>::new(AEConfig::default(), 0, Init::Default).unwrap();
    let u = Array4::zeros((32, 8, 8, 8));
    let z = ae.motion_latents(&u).unwrap();
    assert_eq!(z.zx.shape(), &[8, 8, 8]);
    assert_eq!(z.zy.shape(), &[8, 8, 8]);
}

#[test]
fn constant_streams_sum() {
    let vt = Array3::from_elem((4, 3, 5), 1.0);
    let vx = Array3::from_elem((4, 6, 3), 2.0);
    let vy = Array3::from_elem((4, 6, 5), 3.0);
    let v = broadcast_sum(&vt, &vx, &vy).unwrap();
    assert_eq!(v.shape(), &[4, 6, 3, 5]);
    assert!(v.iter().all(|&x| x == 6.0));
}

fn random_latents(cfg: &AEConfig, k: f64) -> (ContentFrame<f64>, MotionLatent<f64>) {
    let (hh, ww) = (cfg.latent_h(), cfg.latent_w());
    let x = Array3::from_shape_fn((cfg.channels, cfg.height, cfg.width), |(c, h, w)| {
        (k + c as f64 + 0.3 * h as f64 * w as f64).cos() * 0.5
    });
    let zx = Array3::from_shape_fn((cfg.motion_channels, cfg.frames, hh), |(d, l, h)| (k * 2.0 + d as f64 - l as f64 * h as f64).sin());
    let zy = Array3::from_shape_fn((cfg.motion_channels, cfg.frames, ww), |(d, l, w)| (k * 3.0 + d as f64 * l as f64 + w as f64).cos());
    (ContentFrame::new(x), MotionLatent::new(zx, zy).unwrap())
}

#[test]
fn decoder_input_is_additive_in_content_and_motion() {
    let cfg = tiny();
    let ae = Autoencoder::<f64>::new(cfg.clone(), 7, Init::Random(0.3)).unwrap();
    let (x1, z1) = random_latents(&cfg, 0.0);
    let (x2, z2) = random_latents(&cfg, 1.7);
    let v11 = ae.decoder_input(&x1, &z1).unwrap();
    let v12 = ae.decoder_input(&x1, &z2).unwrap();
    let v21 = ae.decoder_input(&x2, &z1).unwrap();
    let v22 = ae.decoder_input(&x2, &z2).unwrap();
    let gap = (&(&v11 - &v12) - &(&v21 - &v22)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(gap < 1e-12);
    assert_eq!(v11.shape(), &[8, 4, 4, 4]);
}

#[test]
fn zeroed_motion_stream_gives_identical_frames() {
    let cfg = tiny();
    let mut ae = Autoencoder::<f64>::new(cfg.clone(), 9, Init::Random(0.3)).unwrap();
    set(&mut ae, "dec.motion_embed.w", |w| w.fill(0.0));
    set(&mut ae, "dec.motion_embed.b", |b| b.fill(0.0));
    set(&mut ae, "dec.pos_t", |p| p.fill(0.0));
    let (x, z) = random_latents(&cfg, 0.5);
    let v = ae.decoder_input(&x, &z).unwrap();
    for l in 1..cfg.frames {
        assert_eq!(v.index_axis(Axis(1), l), v.index_axis(Axis(1), 0));
    }
    let out = ae.decode(&x, &z).unwrap();
    for l in 1..cfg.frames {
        let d = (&out.frame(l) - &out.frame(0)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(d < 1e-12);
    }
}

#[test]
fn decode_rejects_mismatched_latents() {
    let cfg = tiny();
    let ae = Autoencoder::<f64>::new(cfg.clone(), 0, Init::Default).unwrap();
    let (x, _) = random_latents(&cfg, 0.0);
    let (_, z) = random_latents(&AEConfig { motion_channels: 5, ..cfg }, 0.0);
    assert!(matches!(ae.decode(&x, &z), Err(Error::Config(_))));
}

#[test]
fn fresh_decoder_outputs_zero_video() {
    let cfg = tiny();
    let ae = Autoencoder::<f64>::new(cfg.clone(), 0, Init::Default).unwrap();
    let v = wave_video(&cfg, 0.0);
    let r = ae.reconstruct(&v).unwrap();
    assert!(r.data().iter().all(|&x| x == 0.0));
    let expected = v.data().mapv(|x| x * x).mean().unwrap();
    assert!((ae.loss(&v).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn recon_loss_examples() {
    let v = wave_video(&tiny(), 0.0);
    assert_eq!(recon_loss(&v, &v).unwrap(), 0.0);
    let shifted = VideoTensor::new(v.data().mapv(|x| x * 0.5 + 0.1)).unwrap();
    let half = VideoTensor::new(v.data().mapv(|x| x * 0.5)).unwrap();
    assert!((recon_loss(&half, &shifted).unwrap() - 0.01).abs() < 1e-12);
    let a = VideoTensor::new(Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, -1.0]).unwrap()).unwrap();
    let b = VideoTensor::new(Array4::zeros((1, 2, 1, 1))).unwrap();
    assert_eq!(recon_loss(&a, &b).unwrap(), 1.0);
    let c = VideoTensor::new(Array4::zeros((1, 3, 1, 1))).unwrap();
    assert!(matches!(recon_loss(&a, &c), Err(Error::Dimension { .. })));
}

#[test]
fn loss_gradient_covers_every_parameter() {
    let cfg = tiny();
    let ae = Autoencoder::<f64>::new(cfg.clone(), 4, Init::Random(0.2)).unwrap();
    let (loss, grads) = ae.loss_and_grad(&wave_video(&cfg, 0.2)).unwrap();
    assert!((loss - ae.loss(&wave_video(&cfg, 0.2)).unwrap()).abs() < 1e-12);
    assert!(grads.same_layout(&ae.params));
    for (name, g) in grads.iter() {
        assert!(g.iter().any(|&x| x != 0.0), "no gradient reached {name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn content_frame_is_a_convex_blend(seed in 0u64..1000, phase in -3.0f64..3.0, shared in any::<bool>(), uniform in any::<bool>()) {
        let importance = match (shared, uniform) {
            (_, true) => ImportanceMode::Uniform,
            (true, false) => ImportanceMode::ChannelShared,
            (false, false) => ImportanceMode::PerChannel,
        };
        let cfg = AEConfig { importance, ..tiny() };
        let ae = Autoencoder::<f64>::new(cfg.clone(), seed, Init::Random(0.5)).unwrap();
        let v = wave_video(&cfg, phase);
        let (x, z) = ae.encode(&v).unwrap();
        prop_assert!(z.all_finite());
        let lo = v.data().fold_axis(Axis(1), f64::INFINITY, |a, &b| a.min(b));
        let hi = v.data().fold_axis(Axis(1), f64::NEG_INFINITY, |a, &b| a.max(b));
        for ((xv, l), h) in x.data.iter().zip(lo.iter()).zip(hi.iter()) {
            prop_assert!(*xv >= l - 1e-6 && *xv <= h + 1e-6);
        }
    }

    #[test]
    fn static_video_is_a_fixed_point(seed in 0u64..1000, phase in -3.0f64..3.0) {
        let cfg = tiny();
        let ae = Autoencoder::<f64>::new(cfg.clone(), seed, Init::Random(0.5)).unwrap();
        let frame = wave_video(&cfg, phase).frame(0);
        let data = Array4::from_shape_fn((3, 4, 8, 8), |(c, _, h, w)| frame[[c, h, w]]);
        let (x, _) = ae.encode(&VideoTensor::new(data).unwrap()).unwrap();
        for (a, b) in x.data.iter().zip(frame.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_is_smaller_than_video(c in 1usize..5, l in 2usize..17, gh in 1usize..9, gw in 1usize..9, ph in 1usize..4, pw in 1usize..4, d in 1usize..9) {
        let cfg = AEConfig { channels: c, frames: l, height: gh * ph, width: gw * pw, input_patch: (ph, pw), motion_channels: d, ..tiny() };
        prop_assume!(2 * d * (gh + gw) < c * gh * ph * gw * pw);
        prop_assert!(cfg.latent_size() < cfg.video_size());
    }
}
