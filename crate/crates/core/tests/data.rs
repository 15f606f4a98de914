use cmdlab::autoencoder::{content_frame, AEConfig, Autoencoder};
use cmdlab::data::*;
use cmdlab::params::Init;
use cmdlab::video::VideoTensor;
use cmdlab::Error;
use ndarray::{Array4, Axis};
use proptest::prelude::*;

fn bits(v: &VideoTensor<f32>) -> Vec<u32> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn generation_is_deterministic() {
    let a = gen_moving_shapes(7, 2, 8, 16, 16, 4).unwrap();
    let b = gen_moving_shapes(7, 2, 8, 16, 16, 4).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(bits(&x.video), bits(&y.video));
        assert_eq!(x.class, y.class);
    }
    let c = gen_moving_shapes(8, 2, 8, 16, 16, 4).unwrap();
    assert_ne!(bits(&a[0].video), bits(&c[0].video));
}

#[test]
fn values_are_hundredths_in_range() {
    for clip in gen_moving_shapes(1, 10, 8, 16, 16, 10).unwrap() {
        for &v in clip.video.data() {
            assert!((-1.0..=1.0).contains(&v));
            assert_eq!(((v * 100.0).round() / 100.0).to_bits(), v.to_bits());
        }
    }
}

#[test]
fn static_class_has_identical_frames() {
    let clips = gen_moving_shapes(3, 5, 8, 16, 16, 5).unwrap();
    let clip = clips.iter().find(|c| MotionKind::of_class(c.class) == MotionKind::Static).unwrap();
    let first = clip.video.frame(0);
    for l in 1..8 {
        assert_eq!(clip.video.frame(l), first);
    }
    let ae = Autoencoder::<f32>::new(AEConfig::default(), 4, Init::Random(0.5)).unwrap();
    let (content, _) = ae.encode(&clip.video).unwrap();
    let err = content.data.iter().zip(&first).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn moving_classes_actually_move() {
    for clip in gen_moving_shapes(5, 10, 8, 16, 16, 10).unwrap() {
        let moves = clip.positions.windows(2).any(|p| p[0] != p[1]);
        assert_eq!(moves, MotionKind::of_class(clip.class) != MotionKind::Static, "class {}", clip.class);
    }
}

#[test]
fn background_is_static_exhaustively() {
    for clip in gen_moving_shapes(11, 20, 8, 12, 16, 10).unwrap() {
        let (c, l, h, w) = clip.video.dims();
        let data = clip.video.data();
        for y in 0..h {
            for x in 0..w {
                if (0..l).any(|f| clip.covers(f, y, x)) {
                    continue;
                }
                for ch in 0..c {
                    let v0 = data[[ch, 0, y, x]];
                    assert!((1..l).all(|f| data[[ch, f, y, x]] == v0), "pixel ({y}, {x})");
                }
            }
        }
        // the square itself is a single colour wherever it sits
        for f in 0..l {
            let mut colours = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if clip.covers(f, y, x) {
                        colours.push([data[[0, f, y, x]], data[[1, f, y, x]], data[[2, f, y, x]]]);
                    }
                }
            }
            assert_eq!(colours.len(), clip.side * clip.side);
            assert!(colours.iter().all(|c| *c == colours[0]));
        }
    }
}

#[test]
fn vtrf_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.vtrf");
    let clip = &gen_moving_shapes(2, 1, 4, 8, 8, 1).unwrap()[0];
    save_video(&clip.video, &path).unwrap();
    assert_eq!(bits(&load_video(&path).unwrap()), bits(&clip.video));

    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"VTRF");
    assert_eq!(bytes.len(), 24 + 4 * 3 * 4 * 8 * 8 + 4);
    bytes[100] ^= 1;
    assert!(matches!(decode_vtrf(&bytes, "v"), Err(Error::Integrity { .. })));
    bytes[100] ^= 1;
    bytes[0] = b'X';
    assert!(matches!(decode_vtrf(&bytes, "v"), Err(Error::Integrity { .. })));
    assert!(encode_vtrf(&Array4::zeros((3, 4, 0, 8))).is_err());
}

#[test]
fn ppm_export() {
    let dir = tempfile::tempdir().unwrap();
    let ones = VideoTensor::new(Array4::from_elem((3, 2, 2, 3), 1.0f32)).unwrap();
    let paths = export_ppm_frames(&ones, dir.path()).unwrap();
    assert_eq!(paths.len(), 2);
    assert!(paths[1].ends_with("frame_0001.ppm"));
    let bytes = std::fs::read(&paths[0]).unwrap();
    let header = b"P6\n3 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&b| b == 255));
    assert_eq!(bytes.len(), header.len() + 2 * 3 * 3);

    let neg = VideoTensor::new(Array4::from_elem((3, 2, 2, 2), -1.0f32)).unwrap();
    let p = export_ppm_frames(&neg, &dir.path().join("neg")).unwrap();
    let bytes = std::fs::read(&p[0]).unwrap();
    assert!(bytes[b"P6\n2 2\n255\n".len()..].iter().all(|&b| b == 0));

    let gray = VideoTensor::new(Array4::zeros((1, 2, 2, 2))).unwrap();
    assert!(matches!(export_ppm_frames(&gray, dir.path()), Err(Error::UnsupportedChannels(1))));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clips = gen_moving_shapes(4, 6, 4, 8, 8, 3).unwrap();
    save_dataset(&clips, dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert!(manifest.starts_with("path\tclass_id\nclip_00000.vtrf\t0\n"));
    let (videos, classes) = load_dataset(dir.path()).unwrap();
    assert_eq!(classes, vec![0, 1, 2, 0, 1, 2]);
    for (v, c) in videos.iter().zip(&clips) {
        assert_eq!(bits(v), bits(&c.video));
    }
    // no temp files left behind
    assert!(std::fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

proptest! {
    #[test]
    fn any_tensor_round_trips(c in 1usize..4, l in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u32>()) {
        let data = Array4::from_shape_fn((c, l, h, w), |(a, b, x, y)| {
            f32::from_bits(seed.wrapping_add(((a * 1000 + b * 100 + x * 10 + y) as u32).wrapping_mul(2654435761)) & 0x7f7f_ffff)
        });
        let back = decode_vtrf(&encode_vtrf(&data).unwrap(), "p").unwrap();
        prop_assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn content_frame_is_a_convex_combination(seed in 0u64..50) {
        let clip = &gen_moving_shapes(seed, 1, 4, 8, 8, 5).unwrap()[0];
        let cfg = AEConfig { frames: 4, height: 8, width: 8, ..AEConfig::default() };
        let ae = Autoencoder::<f32>::new(cfg, seed, Init::Random(1.0)).unwrap();
        let w = ae.importance_weights(&ae.encode_base(&clip.video).unwrap()).unwrap();
        let x = content_frame(&clip.video, &w).unwrap();
        let lo = clip.video.data().map_axis(Axis(1), |v| v.iter().cloned().fold(f32::INFINITY, f32::min));
        let hi = clip.video.data().map_axis(Axis(1), |v| v.iter().cloned().fold(f32::NEG_INFINITY, f32::max));
        for ((v, a), b) in x.data.iter().zip(&lo).zip(&hi) {
            prop_assert!(*v >= a - 1e-6 && *v <= b + 1e-6);
        }
    }
}
