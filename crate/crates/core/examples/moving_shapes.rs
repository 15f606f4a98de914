//! Generates a few synthetic clips and writes their frames as PPM images.
//!
//! cargo run --example moving_shapes -- /tmp/shapes

use cmdlab::data::{export_ppm_frames, gen_moving_shapes, MotionKind};

fn main() -> cmdlab::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "shapes".into());
    let clips = gen_moving_shapes(7, 5, 8, 16, 16, 5)?;
    for (i, clip) in clips.iter().enumerate() {
        let dir = std::path::Path::new(&out).join(format!("clip_{i}"));
        let frames = export_ppm_frames(&clip.video, &dir)?;
        println!(
            "clip {i}: class {} ({:?}), square side {}, path {:?}, {} frames in {}",
            clip.class,
            MotionKind::of_class(clip.class),
            clip.side,
            clip.positions,
            frames.len(),
            dir.display()
        );
    }
    Ok(())
}
