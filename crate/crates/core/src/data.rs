//! Synthetic moving-square clips, the VTRF video file format, PPM frame
//! export and the on-disk dataset layout.
//!
//! Generation uses integer hashing only; every pixel value is an integer
//! divided by 100, so datasets are bit-identical on every platform.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::video::VideoTensor;

pub const VTRF_MAGIC: &[u8; 4] = b"VTRF";
pub const VTRF_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u16 = 0;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 * 4;

/// Motion families, selected by `class % 5`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    Static,
    Horizontal,
    Vertical,
    Diagonal,
    Circular,
}

impl MotionKind {
    pub fn of_class(class: usize) -> Self {
        match class % 5 {
            0 => MotionKind::Static,
            1 => MotionKind::Horizontal,
            2 => MotionKind::Vertical,
            3 => MotionKind::Diagonal,
            _ => MotionKind::Circular,
        }
    }
}

/// Offsets of the circular path, one per frame, scaled by speed.
const CIRCLE: [(i64, i64); 8] = [(-2, 0), (-1, 1), (0, 2), (1, 1), (2, 0), (1, -1), (0, -2), (-1, -1)];

#[derive(Clone, Debug)]
pub struct Clip {
    pub video: VideoTensor<f32>,
    pub class: usize,
    /// Top-left corner `(row, col)` of the square in every frame, already wrapped.
    pub positions: Vec<(usize, usize)>,
    pub side: usize,
}

impl Clip {
    /// Whether the square covers pixel `(h, w)` in frame `l` (with wrap-around).
    pub fn covers(&self, l: usize, h: usize, w: usize) -> bool {
        let (_, _, hh, ww) = self.video.dims();
        covers(self.positions[l], self.side, (h, w), (hh, ww))
    }
}

fn covers((r, c): (usize, usize), side: usize, (h, w): (usize, usize), (hh, ww): (usize, usize)) -> bool {
    (h + hh - r) % hh < side && (w + ww - c) % ww < side
}

fn hash(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| mix64(acc ^ p))
}

/// `hash % span` mapped to the integer range `[lo, lo + span)`.
fn pick(h: u64, lo: i64, span: u64) -> i64 {
    lo + (h % span) as i64
}

fn hundredths(n: i64) -> f32 {
    n as f32 / 100.0
}

pub fn square_side(height: usize, width: usize) -> usize {
    (height.min(width) / 4).max(2)
}

/// Clip `index` is of class `index % num_classes`; the class fixes the motion
/// family (`class % 5`) and the speed (`1 + class / 5` pixels per frame).
pub fn gen_moving_shapes(seed: u64, count: usize, frames: usize, height: usize, width: usize, num_classes: usize) -> Result<Vec<Clip>> {
    if frames < 2 || height == 0 || width == 0 || num_classes == 0 {
        return Err(Error::Config(format!(
            "data shape L={frames} H={height} W={width} classes={num_classes} is invalid"
        )));
    }
    (0..count)
        .into_par_iter()
        .map(|i| gen_clip(seed, i, frames, height, width, num_classes))
        .collect()
}

fn gen_clip(seed: u64, index: usize, frames: usize, height: usize, width: usize, num_classes: usize) -> Result<Clip> {
    let class = index % num_classes;
    let kind = MotionKind::of_class(class);
    let speed = 1 + (class / 5) as i64;
    let side = square_side(height, width);
    let h = |tag: u64, a: u64| hash(&[seed, index as u64, tag, a]);

    let r0 = (h(1, 0) % height as u64) as i64;
    let c0 = (h(2, 0) % width as u64) as i64;
    let positions: Vec<(usize, usize)> = (0..frames as i64)
        .map(|l| {
            let (dr, dc) = match kind {
                MotionKind::Static => (0, 0),
                MotionKind::Horizontal => (0, speed * l),
                MotionKind::Vertical => (speed * l, 0),
                MotionKind::Diagonal => (speed * l, speed * l),
                MotionKind::Circular => {
                    let (a, b) = CIRCLE[(l % 8) as usize];
                    (speed * a, speed * b)
                }
            };
            (
                (r0 + dr).rem_euclid(height as i64) as usize,
                (c0 + dc).rem_euclid(width as i64) as usize,
            )
        })
        .collect();

    let base: Vec<i64> = (0..3).map(|c| pick(h(3, c), -60, 61)).collect();
    let fg: Vec<f32> = (0..3).map(|c| hundredths(pick(h(4, c), 50, 41))).collect();
    let mut data = Array4::<f32>::zeros((3, frames, height, width));
    for hh in 0..height {
        for ww in 0..width {
            for c in 0..3 {
                let texture = pick(h(5, ((hh * width + ww) * 3 + c) as u64), -15, 31);
                let bg = hundredths(base[c] + texture);
                for l in 0..frames {
                    let on = covers(positions[l], side, (hh, ww), (height, width));
                    data[[c, l, hh, ww]] = if on { fg[c] } else { bg };
                }
            }
        }
    }
    Ok(Clip {
        video: VideoTensor::new(data)?,
        class,
        positions,
        side,
    })
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("no file name in {}", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_vtrf(data: &Array4<f32>) -> Result<Vec<u8>> {
    if data.shape().contains(&0) {
        return Err(Error::Invariant(format!("VTRF dims must be positive, got {:?}", data.shape())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len() + 4);
    out.extend_from_slice(VTRF_MAGIC);
    out.extend_from_slice(&VTRF_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    for &d in data.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Invariant(format!("VTRF dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let start = out.len();
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_vtrf(bytes: &[u8], entry: &str) -> Result<Array4<f32>> {
    let bad = |why: String| Error::integrity(entry, why);
    if bytes.len() < HEADER_LEN + 4 {
        return Err(bad(format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != VTRF_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != VTRF_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = u16_at(6);
    if dtype != DTYPE_F32_LE {
        return Err(bad(format!("unsupported dtype {dtype}")));
    }
    let dims: Vec<usize> = (0..4).map(|k| u32_at(8 + 4 * k) as usize).collect();
    if dims.contains(&0) {
        return Err(bad(format!("zero dimension in {dims:?}")));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("dimension overflow".into()))?;
    let payload_end = HEADER_LEN + 4 * n;
    if bytes.len() != payload_end + 4 {
        return Err(bad(format!("expected {} bytes, found {}", payload_end + 4, bytes.len())));
    }
    let payload = &bytes[HEADER_LEN..payload_end];
    if crc32fast::hash(payload) != u32_at(payload_end) {
        return Err(bad("payload checksum mismatch".into()));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values).expect("length checked"))
}

pub fn save_video(video: &VideoTensor<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_vtrf(video.data())?)
}

pub fn load_video(path: &Path) -> Result<VideoTensor<f32>> {
    let bytes = fs::read(path)?;
    VideoTensor::new(decode_vtrf(&bytes, &path.display().to_string())?)
}

/// `round((v + 1) / 2 * 255)` with halves rounded up, clamped to `[0, 255]`.
pub fn quantize(v: f32) -> u8 {
    let x = (f64::from(v) + 1.0) / 2.0 * 255.0;
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes `frame_0000.ppm`, `frame_0001.ppm`, ... into `dir`.
pub fn export_ppm_frames(video: &VideoTensor<f32>, dir: &Path) -> Result<Vec<PathBuf>> {
    let (c, frames, h, w) = video.dims();
    if c != 3 {
        return Err(Error::UnsupportedChannels(c));
    }
    fs::create_dir_all(dir)?;
    let data = video.data();
    (0..frames)
        .map(|l| {
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        bytes.push(quantize(data[[ch, l, y, x]]));
                    }
                }
            }
            let path = dir.join(format!("frame_{l:04}.ppm"));
            write_atomic(&path, &bytes)?;
            Ok(path)
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.tsv";

/// Writes `clip_00000.vtrf`, ... and `manifest.tsv` (`path`, `class_id`).
pub fn save_dataset(clips: &[Clip], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("path\tclass_id\n");
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.vtrf");
        save_video(&clip.video, &dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\n", clip.class));
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Loads every clip listed in `dir/manifest.tsv`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(Vec<VideoTensor<f32>>, Vec<usize>)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut videos = Vec::new();
    let mut classes = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (path, class) = line
            .split_once('\t')
            .ok_or_else(|| Error::integrity(MANIFEST, format!("line {} lacks a tab", n + 1)))?;
        let class = class
            .trim()
            .parse()
            .map_err(|_| Error::integrity(MANIFEST, format!("line {}: bad class id `{class}`", n + 1)))?;
        videos.push(load_video(&dir.join(path))?);
        classes.push(class);
    }
    if videos.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", dir.display())));
    }
    Ok((videos, classes))
}
