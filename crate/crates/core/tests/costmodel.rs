use cmdlab::autoencoder::{AEConfig, Autoencoder, ImportanceMode};
use cmdlab::costmodel::*;
use cmdlab::denoisers::{Denoiser, DenoiserConfig, DenoiserKind, LatentGeometry};
use cmdlab::params::{Init, ParamSet};
use proptest::prelude::*;

fn toy_ae(frames: usize) -> AEConfig {
    AEConfig {
        frames,
        height: 32,
        width: 32,
        ..AEConfig::default()
    }
}

/// Parameters owned by `row` in a constructed set: exact name or `row.*`.
fn owned(params: &ParamSet<f32>, row: &str) -> u64 {
    params
        .iter()
        .filter(|(n, _)| *n == row || n.starts_with(&format!("{row}.")))
        .map(|(_, t)| t.len() as u64)
        .sum()
}

fn assert_rows_match(report: &CostReport, params: &ParamSet<f32>) {
    for r in &report.rows {
        assert_eq!(r.params, owned(params, &r.name), "row {}", r.name);
    }
    assert_eq!(report.totals().params, params.num_elements() as u64);
}

#[test]
fn one_linear_layer_hand_count() {
    let r = flops_network(&Network::Linear { tokens: 10, din: 4, dout: 8 }).unwrap();
    assert_eq!(r.totals().flops, 640);
    assert_eq!(r.totals().params, 4 * 8 + 8);
    assert_eq!(r.totals().activation_elems, 80);
}

#[test]
fn autoencoder_param_counts_match_construction() {
    for importance in [ImportanceMode::PerChannel, ImportanceMode::ChannelShared, ImportanceMode::Uniform] {
        let cfg = AEConfig {
            importance,
            depth: 3,
            ..AEConfig::default()
        };
        let ae = Autoencoder::<f32>::new(cfg.clone(), 0, Init::Default).unwrap();
        assert_rows_match(&flops_network(&Network::Autoencoder(cfg)).unwrap(), &ae.params);
    }
}

#[test]
fn denoiser_param_counts_match_construction() {
    let geo = LatentGeometry::from(&AEConfig::default());
    for kind in [DenoiserKind::Content, DenoiserKind::Motion] {
        let cfg = DenoiserConfig::default();
        let d = Denoiser::<f32>::new(kind, cfg.clone(), geo.clone(), 0, Init::Default).unwrap();
        let net = match kind {
            DenoiserKind::Content => Network::Content(cfg, geo.clone()),
            DenoiserKind::Motion => Network::Motion(cfg, geo.clone()),
        };
        assert_rows_match(&flops_network(&net).unwrap(), &d.params);
    }
}

#[test]
fn attention_core_counts_spatial_and_temporal_groups() {
    let cfg = AEConfig::default();
    let r = flops_network(&Network::Autoencoder(cfg.clone())).unwrap();
    let (l, s, inner) = (8u64, 64u64, 32u64);
    assert_eq!(r.row("enc.blocks.0.attn.core").unwrap().flops, l * 4 * s * s * inner);
    assert_eq!(r.row("enc.blocks.1.attn.core").unwrap().flops, s * 4 * l * l * inner);
    assert_eq!(r.row("enc.blocks.0.attn.qkv").unwrap().flops, 2 * l * s * 32 * 96);
}

#[test]
fn zero_depth_keeps_only_embedding_rows() {
    let geo = LatentGeometry::from(&AEConfig::default());
    let cfg = DenoiserConfig {
        depth: 0,
        ..DenoiserConfig::default()
    };
    let r = flops_network(&Network::Content(cfg, geo)).unwrap();
    assert!(r.rows.iter().all(|row| !row.name.starts_with("blocks.")));
    let names: Vec<_> = r.rows.iter().filter(|x| x.flops > 0).map(|x| x.name.as_str()).collect();
    assert_eq!(names, ["t_mlp.0", "t_mlp.2", "x_embed", "final.ada", "final.out"]);
}

#[test]
fn matched_width_token_arithmetic() {
    let ae = toy_ae(16);
    let geo = LatentGeometry::from(&ae);
    let motion = DenoiserConfig {
        content_patch: 1,
        ..DenoiserConfig::default()
    };
    let m = flops_network(&Network::Motion(motion.clone(), geo.clone())).unwrap();
    let b = flops_network(&Network::MonolithicBaseline(motion, geo)).unwrap();
    let (nm, nb) = (384u64, 4096u64);
    let inner = 64u64;
    assert_eq!(m.row("blocks.0.attn.core").unwrap().flops, 4 * nm * nm * inner);
    assert_eq!(b.row("blocks.0.attn.core").unwrap().flops, 4 * nb * nb * inner);
    let ratio = b.flops_with_prefix("blocks.0.attn.core") as f64 / m.flops_with_prefix("blocks.0.attn.core") as f64;
    assert!(ratio >= (4096.0f64 / 384.0).powi(2) * (1.0 - 1e-12));
}

#[test]
fn identical_sides_give_unit_ratio() {
    let geo = LatentGeometry::from(&AEConfig::default());
    let side = [Stage::new("m", Network::Motion(DenoiserConfig::default(), geo), 10)];
    let r = compare_stages(&side, &side).unwrap();
    assert_eq!(r.ratio("sampling_flops").unwrap().value(), 1.0);
    assert_eq!(r.ratio("params").unwrap().value(), 1.0);
}

#[test]
fn toy_compression_row() {
    let ae = toy_ae(16);
    let steps = SamplingSteps {
        content: 50,
        motion: 100,
        baseline: 100,
        passes: 2,
    };
    let cmd = CmdConfigs {
        autoencoder: ae.clone(),
        content: DenoiserConfig::content_default(),
        motion: DenoiserConfig::default(),
    };
    let r = compare_report(&cmd, &DenoiserConfig::default(), &steps).unwrap();
    let c = r.ratio("compression").unwrap();
    assert_eq!((c.numerator, c.denominator), (49152, 7168));
    assert!((c.value() - 6.857).abs() < 5e-4);
    let content = r.row("cmd.content").unwrap();
    let single = flops_network(&Network::Content(cmd.content.clone(), LatentGeometry::from(&ae))).unwrap();
    assert_eq!(content.flops, single.totals().flops * 100);
    assert!(r.to_tsv().contains("compression\t49152\t7168\t6.857143"));
    assert!(r.to_text().contains("multiply-add = 2"));
}

#[test]
fn ratios_grow_with_clip_length() {
    let mut last = (0.0, 0.0);
    for frames in [4, 8, 16, 32] {
        let ae = toy_ae(frames);
        let cmd = CmdConfigs {
            autoencoder: ae,
            content: DenoiserConfig::content_default(),
            motion: DenoiserConfig::default(),
        };
        let steps = SamplingSteps {
            content: 50,
            motion: 100,
            baseline: 100,
            passes: 1,
        };
        let r = compare_report(&cmd, &DenoiserConfig::default(), &steps).unwrap();
        let now = (r.ratio("compression").unwrap().value(), r.ratio("sampling_flops").unwrap().value());
        assert!(now.0 > last.0 && now.1 >= last.1, "L = {frames}: {now:?} after {last:?}");
        last = now;
    }
}

#[test]
fn invalid_config_is_rejected() {
    let bad = AEConfig {
        input_patch: (3, 3),
        ..AEConfig::default()
    };
    assert!(flops_network(&Network::Autoencoder(bad)).is_err());
}

proptest! {
    #[test]
    fn totals_are_row_sums_and_depth_scales_blocks(depth in 1usize..6, k in 1usize..4, hidden in 1usize..5) {
        let geo = LatentGeometry::from(&AEConfig::default());
        let cfg = DenoiserConfig { depth, hidden_dim: 16 * hidden, ..DenoiserConfig::default() };
        let deep = DenoiserConfig { depth: depth * k, ..cfg.clone() };
        let a = flops_network(&Network::Motion(cfg, geo.clone())).unwrap();
        let b = flops_network(&Network::Motion(deep, geo)).unwrap();
        prop_assert_eq!(a.totals().flops, a.rows.iter().map(|r| r.flops).sum::<u64>());
        prop_assert_eq!(b.flops_with_prefix("blocks."), k as u64 * a.flops_with_prefix("blocks."));
    }

    #[test]
    fn latent_smaller_than_video(c in 1usize..5, l in 2usize..12, hp in 1usize..6, wp in 1usize..6, p in 1usize..4, d in 1usize..12) {
        let cfg = AEConfig {
            channels: c, frames: l, height: hp * p, width: wp * p, input_patch: (p, p),
            motion_channels: d, ..AEConfig::default()
        };
        // D (H' + W') < C H W alone is not enough at L = 2; twice it is for every L >= 2
        prop_assume!(2 * d * (hp + wp) < c * hp * p * wp * p);
        let r = compression_ratio(&cfg);
        prop_assert!(r.denominator < r.numerator);
    }
}
