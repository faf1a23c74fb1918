//! Image similarity, identification and retrieval metrics.

use rand::seq::index;

use super::{EvalError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Pixelwise correlation over flattened images. A constant image yields
/// `(0.0, true)`.
pub fn pixcorr(recon: &[f64], truth: &[f64]) -> Result<(f64, bool)> {
    if recon.len() != truth.len() {
        return Err(EvalError::Shape(format!("pixcorr: {} vs {}", recon.len(), truth.len())));
    }
    Ok(match pearson(recon, truth) {
        Some(r) => (r, false),
        None => (0.0, true),
    })
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-mode separable filter of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over all valid Gaussian windows and channels, for images in
/// `(row, col, channel)` layout with values in `[0, 1]`.
pub fn ssim(recon: &[f64], truth: &[f64], height: usize, width: usize, channels: usize) -> Result<f64> {
    let n = height * width * channels;
    if recon.len() != n || truth.len() != n {
        return Err(EvalError::Shape(format!("ssim: expected {n} values")));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(EvalError::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let taps = ssim_taps();
    let plane = |img: &[f64], c: usize| -> Vec<f64> { (0..height * width).map(|i| img[i * channels + c]).collect() };
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let x = plane(recon, c);
        let y = plane(truth, c);
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
        let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
        let (mx, oh, ow) = filter(&x, height, width, &taps);
        let my = filter(&y, height, width, &taps).0;
        let exx = filter(&xx, height, width, &taps).0;
        let eyy = filter(&yy, height, width, &taps).0;
        let exy = filter(&xy, height, width, &taps).0;
        for i in 0..oh * ow {
            let (vx, vy) = (exx[i] - mx[i] * mx[i], eyy[i] - my[i] * my[i]);
            let cxy = exy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Average over non-overlapping `block x block` cells per channel.
pub fn box_features(img: &[f64], height: usize, width: usize, channels: usize, block: usize) -> Vec<f64> {
    let (gh, gw) = (height / block, width / block);
    let mut out = vec![0.0; gh * gw * channels];
    let norm = 1.0 / (block * block) as f64;
    for y in 0..gh * block {
        for x in 0..gw * block {
            for c in 0..channels {
                out[((y / block) * gw + x / block) * channels + c] += img[(y * width + x) * channels + c] * norm;
            }
        }
    }
    out
}

/// For each item, the fraction of other items whose reconstruction
/// correlates less with this item's truth than its own reconstruction does,
/// averaged over items. Rows are feature vectors.
pub fn two_way_identification(recons: &Tensor, truths: &Tensor) -> Result<f64> {
    let n = recons.rows();
    if n < 2 {
        return Err(EvalError::TooFewItems(n));
    }
    if recons.shape() != truths.shape() {
        return Err(EvalError::Shape("two-way: recon and truth features differ in shape".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let truth = truths.row(i);
        let corr = |j: usize| pearson(truth, recons.row(j)).ok_or(EvalError::DegenerateFeatures);
        let own = corr(i)?;
        let mut wins = 0usize;
        for j in (0..n).filter(|&j| j != i) {
            if own > corr(j)? {
                wins += 1;
            }
        }
        total += wins as f64 / (n - 1) as f64;
    }
    Ok(total / n as f64)
}

/// Null standard deviation of two-way identification over `n` items: each
/// item's score is the rank of its own correlation, uniform on `[0, 1]`.
pub fn two_way_chance_sigma(n: usize) -> f64 {
    (1.0 / (12.0 * n as f64)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalScores {
    /// Brain embedding picks its image among the pool.
    pub image: f64,
    /// Image picks its brain embedding among the pool.
    pub brain: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb).max(1e-300)
}

/// Top-1 retrieval in both directions over random pools of `pool_size`
/// items, averaged over repetitions. A query counts as correct only when its
/// partner is strictly the most similar.
pub fn retrieval_eval(
    emb: &Tensor,
    targets: &Tensor,
    pool_size: usize,
    repetitions: usize,
    seed: u64,
) -> Result<RetrievalScores> {
    let n = emb.rows();
    if targets.rows() != n || emb.cols() != targets.cols() {
        return Err(EvalError::Shape("retrieval: embeddings and targets differ in shape".into()));
    }
    if pool_size > n {
        return Err(EvalError::PoolTooLarge { pool: pool_size, n });
    }
    if pool_size < 2 || repetitions == 0 {
        return Err(EvalError::TooFewItems(pool_size));
    }
    let (mut img, mut brain) = (0.0, 0.0);
    for rep in 0..repetitions {
        let mut r = rng::stream_indexed(seed, "retrieval/pool", rep as u64);
        let pool = if pool_size == n {
            (0..n).collect()
        } else {
            index::sample(&mut r, n, pool_size).into_vec()
        };
        let p = pool.len();
        let mut sim = vec![0.0; p * p];
        for (a, &i) in pool.iter().enumerate() {
            for (b, &j) in pool.iter().enumerate() {
                sim[a * p + b] = cosine(emb.row(i), targets.row(j));
            }
        }
        let (mut hi, mut hb) = (0usize, 0usize);
        for a in 0..p {
            let own = sim[a * p + a];
            if (0..p).all(|b| b == a || sim[a * p + b] < own) {
                hi += 1;
            }
            if (0..p).all(|b| b == a || sim[b * p + a] < own) {
                hb += 1;
            }
        }
        img += hi as f64 / p as f64;
        brain += hb as f64 / p as f64;
    }
    Ok(RetrievalScores {
        image: img / repetitions as f64,
        brain: brain / repetitions as f64,
    })
}

/// Binomial standard deviation of top-1 accuracy at chance for one pool.
pub fn retrieval_chance_sigma(pool_size: usize) -> f64 {
    let p = 1.0 / pool_size as f64;
    (p * (1.0 - p) / pool_size as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_edges() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
        let (r, flag) = pixcorr(&[0.5; 4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!((r, flag), (0.0, true));
        let t = [0.1, 0.9, 0.3, 0.4];
        let inv: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        assert!((pixcorr(&inv, &t).unwrap().0 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_is_one() {
        let img: Vec<f64> = (0..10 * 9 * 2).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let s = ssim(&img, &img, 10, 9, 2).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(ssim(&img, &img, 4, 45, 1).is_err());
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = ssim_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[7]);
        assert_eq!(t[3], t[4]);
    }

    #[test]
    fn two_way_two_items() {
        let truths = Tensor::new([2, 3], vec![1.0, 2.0, 4.0, 3.0, 1.0, 0.0]).unwrap();
        assert_eq!(two_way_identification(&truths, &truths).unwrap(), 1.0);
        let swapped = truths.gather_rows(&[1, 0]);
        assert_eq!(two_way_identification(&swapped, &truths).unwrap(), 0.0);
        let constant = Tensor::full([2, 3], 1.0);
        assert!(matches!(two_way_identification(&constant, &truths), Err(EvalError::DegenerateFeatures)));
    }

    #[test]
    fn retrieval_perfect_and_errors() {
        let e = Tensor::eye(6);
        let s = retrieval_eval(&e, &e, 4, 3, 1).unwrap();
        assert_eq!((s.image, s.brain), (1.0, 1.0));
        assert!(matches!(retrieval_eval(&e, &e, 7, 1, 1), Err(EvalError::PoolTooLarge { pool: 7, n: 6 })));
    }

    #[test]
    fn box_features_average_blocks() {
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(box_features(&img, 4, 4, 1, 2), vec![2.5, 4.5, 10.5, 12.5]);
    }
}
