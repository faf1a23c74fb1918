//! Run-directory files: text, PPM images, world manifests and hashes.

use std::fs;
use std::path::Path;

use mindalign_core::world::{generate_world, WorldConfig, WorldSpec};
use mindalign_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Binary PPM (P6) for 3-channel images, PGM (P5) of the first channel
/// otherwise; values in `[0, 1]` are scaled to 8 bits.
pub fn ppm_bytes(img: &[f64], height: usize, width: usize, channels: usize) -> Vec<u8> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (magic, keep) = if channels == 3 { ("P6", 3) } else { ("P5", 1) };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    for px in img.chunks_exact(channels) {
        out.extend(px[..keep].iter().map(|&v| q(v)));
    }
    out
}

pub fn write_ppm(path: &Path, img: &[f64], height: usize, width: usize, channels: usize) -> Result<(), CliError> {
    fs::write(path, ppm_bytes(img, height, width, channels)).map_err(|e| CliError::io(path, e))
}

/// Raw little-endian `f32` rows, the lossless companion of the PPM files.
pub fn write_f32(path: &Path, t: &Tensor) -> Result<(), CliError> {
    mindalign_core::dataset::write_f32(path, t.data()).map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub seed: u64,
    pub config: WorldConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of every frozen matrix of the world.
pub fn world_hash(world: &WorldSpec) -> String {
    let mut h = Sha256::new();
    let mut feed = |t: &Tensor| t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
    for t in [
        &world.encoder,
        &world.decoder,
        &world.teacher,
        &world.vae,
        &world.vae_inverse,
        &world.token_mix,
        &world.channel_mix,
    ] {
        feed(t);
    }
    for s in &world.subjects {
        feed(&s.response);
    }
    hex::encode(h.finalize())
}

pub fn save_world(dir: &Path, world: &WorldSpec) -> Result<(), CliError> {
    let file = WorldFile {
        seed: world.seed,
        config: world.config.clone(),
    };
    let text = toml::to_string(&file).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&dir.join("world.toml"), &text)?;
    write_text(&dir.join("world.sha256"), &format!("{}\n", world_hash(world)))
}

pub fn load_world(dir: &Path) -> Result<WorldSpec, CliError> {
    let path = dir.join("world.toml");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let file: WorldFile = toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(generate_world(&file.config, file.seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_quantization() {
        let img = [0.0, 0.5, 1.0, 1.2, -0.1, 0.25];
        let b = ppm_bytes(&img, 1, 2, 3);
        assert_eq!(&b[..11], b"P6\n2 1\n255\n");
        assert_eq!(&b[11..], &[0, 128, 255, 255, 0, 64]);
        let g = ppm_bytes(&[0.0, 1.0, 1.0, 0.0], 1, 2, 2);
        assert_eq!(&g[..11], b"P5\n2 1\n255\n");
        assert_eq!(&g[11..], &[0, 255]);
    }
}
