//! The synthetic ground truth: smooth random images, per-subject linear brain
//! forward models, and the frozen linear encoders that stand in for the image
//! token space, the low-level latent space and the teacher feature space.
//!
//! Everything is a pure function of `(WorldConfig, seed)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("token space ({tokens} dims) cannot hold an injective image encoder ({pixels} pixel dims)")]
    ImpossibleRank { tokens: usize, pixels: usize },
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("image id {0} outside the world image pool")]
    ImageOutOfPool(u32),
}

pub type SubjectId = String;

/// Region names in partition order.
pub const REGIONS: [&str; 5] = ["V1", "V2", "V3", "V4", "higher"];
const REGION_FRACTIONS: [f64; 5] = [0.2, 0.2, 0.15, 0.15, 0.3];
/// Receptive-field radius (pixels) per region; later areas pool more widely.
const REGION_RF_SIGMA: [f64; 5] = [0.8, 1.2, 1.6, 2.2, 3.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_tokens: usize,
    pub d_token: usize,
    pub vae_height: usize,
    pub vae_width: usize,
    pub vae_channels: usize,
    pub d_teacher: usize,
    pub n_subjects: usize,
    pub voxels_min: usize,
    pub voxels_max: usize,
    pub n_sessions: usize,
    pub trials_per_session: usize,
    pub n_shared_test: usize,
    pub image_pool: usize,
    pub noise_sigma: f64,
    /// Gaussian blur radius (pixels) of the random image fields.
    pub image_smoothness: f64,
    /// Pixel standard deviation around mid-grey before clipping.
    pub image_contrast: f64,
    /// Token grid of the second frozen encoder used by the converter.
    pub m_tokens: usize,
    pub d_token_b: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 16,
            width: 16,
            channels: 3,
            n_tokens: 16,
            d_token: 64,
            vae_height: 8,
            vae_width: 8,
            vae_channels: 4,
            d_teacher: 32,
            n_subjects: 8,
            voxels_min: 120,
            voxels_max: 200,
            n_sessions: 8,
            trials_per_session: 40,
            n_shared_test: 50,
            image_pool: 2700,
            noise_sigma: 0.25,
            image_smoothness: 1.5,
            image_contrast: 0.2,
            m_tokens: 8,
            d_token_b: 32,
        }
    }
}

impl WorldConfig {
    pub fn pixel_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn token_dim(&self) -> usize {
        self.n_tokens * self.d_token
    }

    pub fn vae_dim(&self) -> usize {
        self.vae_height * self.vae_width * self.vae_channels
    }

    pub fn token_b_dim(&self) -> usize {
        self.m_tokens * self.d_token_b
    }

    /// Unique training images available to each subject.
    pub fn images_per_subject(&self) -> usize {
        self.image_pool.saturating_sub(2 * self.n_shared_test) / self.n_subjects.max(1)
    }

    /// Image ids reserved for random-image baselines (never shown to any subject).
    pub fn baseline_image_ids(&self) -> std::ops::Range<u32> {
        (self.image_pool - self.n_shared_test) as u32..self.image_pool as u32
    }

    pub fn subject_ids(&self) -> Vec<SubjectId> {
        (0..self.n_subjects).map(|i| format!("s{i}")).collect()
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        let dims = [
            self.height,
            self.width,
            self.channels,
            self.n_tokens,
            self.d_token,
            self.vae_height,
            self.vae_width,
            self.vae_channels,
            self.d_teacher,
            self.n_subjects,
            self.n_sessions,
            self.trials_per_session,
            self.m_tokens,
            self.d_token_b,
        ];
        if dims.contains(&0) {
            return bad("all dimensions must be positive");
        }
        if self.token_dim() < self.pixel_dim() {
            return Err(WorldError::ImpossibleRank {
                tokens: self.token_dim(),
                pixels: self.pixel_dim(),
            });
        }
        if !self.height.is_multiple_of(self.vae_height) || !self.width.is_multiple_of(self.vae_width) {
            return bad("vae grid must evenly divide the image grid");
        }
        if self.voxels_min == 0 || self.voxels_min > self.voxels_max {
            return bad("voxel range must satisfy 0 < voxels_min <= voxels_max");
        }
        if self.voxels_max - self.voxels_min + 1 < self.n_subjects {
            return bad("voxel range too narrow for distinct per-subject counts");
        }
        if self.n_shared_test < 2 {
            return bad("need at least two shared test images");
        }
        if self.images_per_subject() < self.n_sessions * self.trials_per_session {
            return bad("image_pool too small for the configured sessions");
        }
        if !(self.noise_sigma >= 0.0) || !(self.image_smoothness > 0.0) || !(self.image_contrast > 0.0)
        {
            return bad("noise_sigma >= 0, image_smoothness > 0 and image_contrast > 0 required");
        }
        Ok(())
    }
}

/// A subject's simulated cortex: a linear map from pixels to voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectForwardModel {
    pub subject_id: SubjectId,
    pub n_voxels: usize,
    /// `[n_voxels, pixel_dim]`, unit-norm rows.
    pub response: Tensor,
    pub noise_sigma: f64,
    /// Region name to voxel indices; a disjoint cover of `0..n_voxels`.
    pub regions: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub seed: u64,
    /// `[token_dim, pixel_dim]`, full column rank.
    pub encoder: Tensor,
    /// `[pixel_dim, token_dim]`, left inverse of `encoder`.
    pub decoder: Tensor,
    /// `[d_teacher, pixel_dim]`.
    pub teacher: Tensor,
    /// `[vae_dim, pixel_dim]`.
    pub vae: Tensor,
    /// `[pixel_dim, vae_dim]`, pseudo-inverse of `vae`.
    pub vae_inverse: Tensor,
    /// Second frozen encoder: `tokens_b = token_mix * tokens * channel_mix`.
    pub token_mix: Tensor,
    pub channel_mix: Tensor,
    pub subjects: Vec<SubjectForwardModel>,
}

fn gaussian_matrix(r: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng::gaussian(r) * scale).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Average over `fy x fx` pixel blocks, per channel: pixels -> `[gh, gw, c]`.
fn block_average(cfg: &WorldConfig, gh: usize, gw: usize) -> Tensor {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let (fy, fx) = (h / gh, w / gw);
    let mut m = Tensor::zeros([gh * gw * c, h * w * c]);
    let norm = 1.0 / (fy * fx) as f64;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let row = ((y / fy) * gw + x / fx) * c + ch;
                let col = (y * w + x) * c + ch;
                m.data_mut()[row * h * w * c + col] = norm;
            }
        }
    }
    m
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<WorldSpec, WorldError> {
    config.validate()?;
    let cfg = config;
    let (p, td) = (cfg.pixel_dim(), cfg.token_dim());

    // Token encoder; a Gaussian draw is full rank with probability one, but
    // check and redraw anyway.
    let mut attempt = 0u64;
    let (encoder, decoder) = loop {
        let mut r = rng::stream_indexed(seed, "world/encoder", attempt);
        let e = gaussian_matrix(&mut r, td, p, 1.0 / (p as f64).sqrt());
        if linalg::rank(&e) == p {
            if let Some(d) = linalg::left_pinv(&e) {
                break (e, d);
            }
        }
        attempt += 1;
        if attempt > 8 {
            return Err(WorldError::ImpossibleRank { tokens: td, pixels: p });
        }
    };

    let c = cfg.channels;
    let low = block_average(cfg, cfg.vae_height, cfg.vae_width);
    let low_dim = cfg.vae_height * cfg.vae_width * c;

    let mut r = rng::stream(seed, "world/teacher");
    let teacher_mix = gaussian_matrix(&mut r, cfg.d_teacher, low_dim, 1.0 / (low_dim as f64).sqrt());
    let teacher = linalg::matmul(&teacher_mix, &low);

    // Low-level latent: per-block colour averages mixed into vae channels.
    let mut r = rng::stream(seed, "world/vae");
    let colour = gaussian_matrix(&mut r, cfg.vae_channels, c, 1.0);
    let cells = cfg.vae_height * cfg.vae_width;
    let mut mix = Tensor::zeros([cfg.vae_dim(), low_dim]);
    for cell in 0..cells {
        for k in 0..cfg.vae_channels {
            for ch in 0..c {
                let (row, col) = (cell * cfg.vae_channels + k, cell * c + ch);
                mix.data_mut()[row * low_dim + col] = colour.data()[k * c + ch];
            }
        }
    }
    let vae = linalg::matmul(&mix, &low);
    let vae_inverse = linalg::pinv(&vae);

    let mut r = rng::stream(seed, "world/encoder_b");
    let token_mix = gaussian_matrix(&mut r, cfg.m_tokens, cfg.n_tokens, 1.0 / (cfg.n_tokens as f64).sqrt());
    let channel_mix = gaussian_matrix(&mut r, cfg.d_token, cfg.d_token_b, 1.0 / (cfg.d_token as f64).sqrt());

    // Distinct voxel counts per subject.
    let mut r = rng::stream(seed, "world/voxel_counts");
    let mut counts: Vec<usize> = (cfg.voxels_min..=cfg.voxels_max).collect();
    counts.shuffle(&mut r);
    let subjects = cfg
        .subject_ids()
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (id, n))| subject_model(cfg, seed, i as u64, id, n))
        .collect();

    Ok(WorldSpec {
        config: cfg.clone(),
        seed,
        encoder,
        decoder,
        teacher,
        vae,
        vae_inverse,
        token_mix,
        channel_mix,
        subjects,
    })
}

fn region_partition(n_voxels: usize) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    let mut start = 0;
    for (k, (name, frac)) in REGIONS.iter().zip(REGION_FRACTIONS).enumerate() {
        let end = if k + 1 == REGIONS.len() {
            n_voxels
        } else {
            start + ((n_voxels as f64) * frac).round() as usize
        };
        out.insert(name.to_string(), (start..end).collect());
        start = end;
    }
    out
}

fn subject_model(cfg: &WorldConfig, seed: u64, index: u64, id: SubjectId, n: usize) -> SubjectForwardModel {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let p = cfg.pixel_dim();
    let regions = region_partition(n);
    let mut r = rng::stream_indexed(seed, "world/subject", index);
    let mut response = Tensor::zeros([n, p]);
    for (k, name) in REGIONS.iter().enumerate() {
        let sigma = REGION_RF_SIGMA[k];
        for &v in &regions[*name] {
            let cy = r.gen::<f64>() * h as f64;
            let cx = r.gen::<f64>() * w as f64;
            let tint: Vec<f64> = (0..c).map(|_| 1.0 + 0.5 * rng::gaussian(&mut r)).collect();
            let row = response.row_mut(v);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let g = (-d2 / (2.0 * sigma * sigma)).exp();
                    for ch in 0..c {
                        row[(y * w + x) * c + ch] = g * tint[ch];
                    }
                }
            }
            for val in row.iter_mut() {
                *val += 0.02 * rng::gaussian(&mut r);
            }
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            row.iter_mut().for_each(|a| *a /= norm);
        }
    }
    SubjectForwardModel {
        subject_id: id,
        n_voxels: n,
        response,
        noise_sigma: cfg.noise_sigma,
        regions,
    }
}

/// Separable Gaussian blur with clamped borders.
fn blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let o = i as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += kv * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / ksum;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter_mut().for_each(|a| *a = (*a - mu) / sd);
}

impl WorldSpec {
    pub fn subject(&self, id: &str) -> Result<&SubjectForwardModel, WorldError> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or_else(|| WorldError::UnknownSubject(id.to_string()))
    }

    pub fn subject_index(&self, id: &str) -> Result<usize, WorldError> {
        self.subjects
            .iter()
            .position(|s| s.subject_id == id)
            .ok_or_else(|| WorldError::UnknownSubject(id.to_string()))
    }

    /// Pixels of pool image `id` in `(row, col, channel)` order, values in
    /// `[0, 1]` and exactly representable as `f32`.
    pub fn image(&self, id: u32) -> Result<Vec<f64>, WorldError> {
        let cfg = &self.config;
        if id as usize >= cfg.image_pool {
            return Err(WorldError::ImageOutOfPool(id));
        }
        let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
        let mut r = rng::stream_indexed(self.seed, "world/image", id as u64);
        let field = |r: &mut rng::Rng| {
            let mut f = blur(&rng::gaussian_vec(r, h * w), h, w, cfg.image_smoothness);
            standardize(&mut f);
            f
        };
        let lum = field(&mut r);
        let chroma: Vec<Vec<f64>> = (0..c).map(|_| field(&mut r)).collect();
        let mut img = vec![0.0; h * w * c];
        for i in 0..h * w {
            for ch in 0..c {
                let v = 0.5 + cfg.image_contrast * (0.8 * lum[i] + 0.6 * chroma[ch][i]);
                img[i * c + ch] = v.clamp(0.0, 1.0) as f32 as f64;
            }
        }
        Ok(img)
    }

    fn check_pixels(&self, image: &[f64]) -> Result<(), WorldError> {
        let p = self.config.pixel_dim();
        if image.len() != p {
            return Err(WorldError::DimMismatch {
                expected: p,
                got: image.len(),
            });
        }
        Ok(())
    }

    /// Noisy single-trial response: `A_s x + sigma * noise(seed)`.
    pub fn simulate_response(&self, subject_id: &str, image: &[f64], seed: u64) -> Result<Vec<f64>, WorldError> {
        let s = self.subject(subject_id)?;
        self.check_pixels(image)?;
        let mut v = linalg::matvec(&s.response, image);
        if s.noise_sigma > 0.0 {
            let mut r = rng::stream(seed, "response_noise");
            for x in &mut v {
                *x += s.noise_sigma * rng::gaussian(&mut r);
            }
        }
        Ok(v)
    }

    /// Frozen token embedding, flattened `[n_tokens * d_token]`.
    pub fn encode_image(&self, image: &[f64]) -> Result<Vec<f64>, WorldError> {
        self.check_pixels(image)?;
        Ok(linalg::matvec(&self.encoder, image))
    }

    /// Least-squares pre-image of a token embedding.
    pub fn decode_tokens(&self, tokens: &[f64]) -> Result<Vec<f64>, WorldError> {
        let td = self.config.token_dim();
        if tokens.len() != td {
            return Err(WorldError::DimMismatch {
                expected: td,
                got: tokens.len(),
            });
        }
        Ok(linalg::matvec(&self.decoder, tokens))
    }

    pub fn encode_teacher(&self, image: &[f64]) -> Result<Vec<f64>, WorldError> {
        self.check_pixels(image)?;
        Ok(linalg::matvec(&self.teacher, image))
    }

    pub fn encode_vae(&self, image: &[f64]) -> Result<Vec<f64>, WorldError> {
        self.check_pixels(image)?;
        Ok(linalg::matvec(&self.vae, image))
    }

    /// Minimum-norm pixel image for a low-level latent (a blurry reconstruction).
    pub fn decode_vae(&self, latent: &[f64]) -> Result<Vec<f64>, WorldError> {
        let d = self.config.vae_dim();
        if latent.len() != d {
            return Err(WorldError::DimMismatch {
                expected: d,
                got: latent.len(),
            });
        }
        Ok(linalg::matvec(&self.vae_inverse, latent))
    }

    /// Second frozen encoder, flattened `[m_tokens * d_token_b]`.
    pub fn encode_image_b(&self, image: &[f64]) -> Result<Vec<f64>, WorldError> {
        let cfg = &self.config;
        let tokens = Tensor::from_parts(vec![cfg.n_tokens, cfg.d_token], self.encode_image(image)?);
        let mixed = linalg::matmul(&linalg::matmul(&self.token_mix, &tokens), &self.channel_mix);
        Ok(mixed.into_data())
    }

    /// Pooled, unit-norm retrieval target: the mean token of the frozen
    /// embedding of the image's deviation from mid-grey, normalized.
    pub fn retrieval_target(&self, image: &[f64]) -> Result<Vec<f64>, WorldError> {
        let tokens = self.encode_image(image)?;
        self.retrieval_from_tokens(&tokens)
    }

    /// Retrieval embedding of an arbitrary token grid, on the same footing
    /// as [`WorldSpec::retrieval_target`].
    pub fn retrieval_from_tokens(&self, tokens: &[f64]) -> Result<Vec<f64>, WorldError> {
        let cfg = &self.config;
        if tokens.len() != cfg.token_dim() {
            return Err(WorldError::DimMismatch {
                expected: cfg.token_dim(),
                got: tokens.len(),
            });
        }
        let grey = linalg::matvec(&self.encoder, &vec![0.5; cfg.pixel_dim()]);
        let centered: Vec<f64> = tokens.iter().zip(&grey).map(|(t, g)| t - g).collect();
        Ok(pool_tokens(&centered, cfg.n_tokens, cfg.d_token))
    }
}

/// Mean over the token axis of a flattened `[n_tokens, d_token]` grid, then
/// L2-normalized.
pub fn pool_tokens(tokens: &[f64], n_tokens: usize, d_token: usize) -> Vec<f64> {
    let mut pooled = vec![0.0; d_token];
    for t in tokens.chunks_exact(d_token).take(n_tokens) {
        pooled.iter_mut().zip(t).for_each(|(a, b)| *a += b / n_tokens as f64);
    }
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    pooled.iter_mut().for_each(|v| *v /= norm);
    pooled
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            height: 4,
            width: 4,
            channels: 2,
            n_tokens: 4,
            d_token: 10,
            vae_height: 2,
            vae_width: 2,
            vae_channels: 3,
            d_teacher: 5,
            n_subjects: 3,
            voxels_min: 10,
            voxels_max: 20,
            n_sessions: 2,
            trials_per_session: 3,
            n_shared_test: 4,
            image_pool: 40,
            m_tokens: 2,
            d_token_b: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_world(&small(), 3).unwrap();
        let b = generate_world(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&small(), 4).unwrap();
        assert_ne!(a.encoder, c.encoder);
        assert_eq!(a.image(5).unwrap(), b.image(5).unwrap());
    }

    #[test]
    fn rejects_rank_deficient_config() {
        let cfg = WorldConfig {
            n_tokens: 2,
            ..small()
        };
        assert!(matches!(generate_world(&cfg, 0), Err(WorldError::ImpossibleRank { .. })));
    }

    #[test]
    fn regions_cover_voxels_disjointly() {
        let w = generate_world(&small(), 1).unwrap();
        for s in &w.subjects {
            let mut all: Vec<usize> = s.regions.values().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..s.n_voxels).collect::<Vec<_>>());
            assert_eq!(s.regions.len(), 5);
        }
    }

    #[test]
    fn noiseless_response_is_linear_map() {
        let mut cfg = small();
        cfg.noise_sigma = 0.0;
        let w = generate_world(&cfg, 2).unwrap();
        let img = w.image(0).unwrap();
        let v = w.simulate_response("s1", &img, 9).unwrap();
        assert_eq!(v, linalg::matvec(&w.subjects[1].response, &img));
        let zero = vec![0.0; cfg.pixel_dim()];
        assert!(w.simulate_response("s1", &zero, 9).unwrap().iter().all(|&x| x == 0.0));
        assert!(matches!(
            w.simulate_response("nobody", &zero, 0),
            Err(WorldError::UnknownSubject(_))
        ));
    }

    #[test]
    fn noise_realization_repeats_with_seed() {
        let w = generate_world(&small(), 2).unwrap();
        let img = w.image(1).unwrap();
        assert_eq!(
            w.simulate_response("s0", &img, 11).unwrap(),
            w.simulate_response("s0", &img, 11).unwrap()
        );
        assert_ne!(
            w.simulate_response("s0", &img, 11).unwrap(),
            w.simulate_response("s0", &img, 12).unwrap()
        );
    }

    #[test]
    fn images_in_unit_range() {
        let w = generate_world(&small(), 2).unwrap();
        for id in 0..10 {
            let img = w.image(id).unwrap();
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(img.iter().all(|&v| v == v as f32 as f64));
        }
        assert!(w.image(40).is_err());
    }

    #[test]
    fn encoders_are_linear_and_dimensioned() {
        let w = generate_world(&small(), 5).unwrap();
        let a = w.image(2).unwrap();
        let b = w.image(3).unwrap();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        for enc in [WorldSpec::encode_teacher, WorldSpec::encode_vae, WorldSpec::encode_image] {
            let (ea, eb, eab) = (enc(&w, &a).unwrap(), enc(&w, &b).unwrap(), enc(&w, &ab).unwrap());
            for i in 0..ea.len() {
                assert!((ea[i] + eb[i] - eab[i]).abs() < 1e-9);
            }
            assert!(enc(&w, &[0.0; 32]).unwrap().iter().all(|&v| v == 0.0));
        }
        assert_eq!(w.encode_teacher(&a).unwrap().len(), 5);
        assert!(matches!(w.encode_vae(&[0.0; 3]), Err(WorldError::DimMismatch { .. })));
    }
}
