//! Writes a checkpoint, reads it back, then shows what a corrupted byte does.

use cmdlab::autoencoder::Autoencoder;
use cmdlab::checkpoint::{autoencoder_checkpoint, decode_checkpoint, encode_checkpoint, load_autoencoder};
use cmdlab::gradcheck::tiny_ae_config;
use cmdlab::params::Init;

fn main() -> cmdlab::Result<()> {
    let ae = Autoencoder::<f32>::new(tiny_ae_config(), 3, Init::Default)?;
    let bytes = encode_checkpoint(&autoencoder_checkpoint(&ae, Some(&ae.params))?)?;
    println!("{} tensors, {} bytes", 2 * ae.params.len(), bytes.len());

    let back = load_autoencoder(&decode_checkpoint(&bytes)?, true)?;
    println!("round trip equal: {}", back.params == ae.params);

    let mut bad = bytes.clone();
    let mid = bad.len() * 3 / 4;
    bad[mid] ^= 1;
    match decode_checkpoint(&bad) {
        Err(e) => println!("flipped byte {mid}: {e}"),
        Ok(_) => println!("flipped byte {mid} went unnoticed"),
    }
    Ok(())
}
