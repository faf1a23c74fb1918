//! Metric references and calibration of the evaluation protocol.

use std::collections::BTreeMap;

use mindalign_core::dataset::{generate_dataset, normalize};
use mindalign_core::eval::encoding::voxel_correlations;
use mindalign_core::eval::metrics::{
    box_features, retrieval_chance_sigma, two_way_chance_sigma, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
use mindalign_core::eval::*;
use mindalign_core::rng;
use mindalign_core::world::{generate_world, WorldConfig};
use mindalign_core::Tensor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn naive_pixcorr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..a.len() {
        sa += a[i];
        sb += b[i];
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    num / (da * db).sqrt()
}

/// Direct 2-D windowed SSIM with an explicitly built Gaussian window.
fn naive_ssim(x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> f64 {
    let k = SSIM_WINDOW;
    let mut win = vec![vec![0.0; k]; k];
    let mut z = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 3.5, j as f64 - 3.5);
            *v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            z += *v;
        }
    }
    let px = |img: &[f64], r: usize, col: usize, ch: usize| img[(r * w + col) * c + ch];
    let (mut total, mut count) = (0.0, 0.0);
    for ch in 0..c {
        for r0 in 0..=h - k {
            for c0 in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i][j] / z;
                        let (a, b) = (px(x, r0 + i, c0 + j, ch), px(y, r0 + i, c0 + j, ch));
                        mx += g * a;
                        my += g * b;
                        sxx += g * a * a;
                        syy += g * b * b;
                        sxy += g * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1.0;
            }
        }
    }
    total / count
}

fn uniform_image(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| r.gen::<f64>()).collect()
}

#[test]
fn pixcorr_and_ssim_match_references() {
    for seed in 0..20 {
        let mut r = rng::stream_indexed(21, "images", seed);
        let (h, w, c) = (16, 16, 3);
        let a = uniform_image(&mut r, h * w * c);
        let mut b = uniform_image(&mut r, h * w * c);
        // Correlate half the pairs so both metrics are far from zero.
        if seed % 2 == 0 {
            b.iter_mut().zip(&a).for_each(|(y, x)| *y = 0.7 * x + 0.3 * *y);
        }
        let (pc, flag) = pixcorr(&a, &b).unwrap();
        assert!(!flag);
        assert!((pc - naive_pixcorr(&a, &b)).abs() < 1e-10);
        let s = ssim(&a, &b, h, w, c).unwrap();
        assert!((s - naive_ssim(&a, &b, h, w, c)).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn identity_and_inversion() {
    let mut r = rng::stream(22, "id");
    let a = uniform_image(&mut r, 768);
    assert!((pixcorr(&a, &a).unwrap().0 - 1.0).abs() < 1e-12);
    assert!((ssim(&a, &a, 16, 16, 3).unwrap() - 1.0).abs() < 1e-12);
    let inv: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
    assert!((pixcorr(&inv, &a).unwrap().0 + 1.0).abs() < 1e-12);
}

#[test]
fn two_way_with_pairs_is_quantized() {
    let mut r = rng::stream(23, "pairs");
    for _ in 0..20 {
        let t = Tensor::new([2, 4], rng::gaussian_vec(&mut r, 8)).unwrap();
        let p = Tensor::new([2, 4], rng::gaussian_vec(&mut r, 8)).unwrap();
        let v = two_way_identification(&p, &t).unwrap();
        assert!([0.0, 0.5, 1.0].contains(&v));
    }
    let t = Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(matches!(two_way_identification(&t, &t), Err(EvalError::TooFewItems(1))));
}

#[test]
fn chance_levels_are_calibrated() {
    let (n, d, pool) = (50, 16, 50);
    let mut retrieval_inside = 0;
    let mut twoway_inside = 0;
    for seed in 0..100 {
        let mut r = rng::stream_indexed(24, "chance", seed);
        let emb = Tensor::new([n, d], rng::gaussian_vec(&mut r, n * d)).unwrap();
        let tgt = Tensor::new([n, d], rng::gaussian_vec(&mut r, n * d)).unwrap();
        let s = retrieval_eval(&emb, &tgt, pool, 1, seed).unwrap();
        let bound = 3.0 * retrieval_chance_sigma(pool);
        if (s.image - 1.0 / pool as f64).abs() <= bound && (s.brain - 1.0 / pool as f64).abs() <= bound {
            retrieval_inside += 1;
        }
        let tw = two_way_identification(&emb, &tgt).unwrap();
        if (tw - 0.5).abs() <= 3.0 * two_way_chance_sigma(n) {
            twoway_inside += 1;
        }
    }
    assert!(retrieval_inside >= 95, "{retrieval_inside}");
    assert!(twoway_inside >= 95, "{twoway_inside}");
}

#[test]
fn retrieval_with_subpools() {
    let e = Tensor::eye(40);
    let s = retrieval_eval(&e, &e, 10, 30, 0).unwrap();
    assert_eq!((s.image, s.brain), (1.0, 1.0));
    // A swapped pair can only be wrong when both land in the pool.
    let swapped = e.gather_rows(&(0..40).map(|i| if i < 2 { 1 - i } else { i }).collect::<Vec<_>>());
    let s = retrieval_eval(&swapped, &e, 10, 30, 0).unwrap();
    assert!(s.image < 1.0 && s.image > 0.9);
}

fn region_map(v: usize) -> BTreeMap<String, Vec<usize>> {
    BTreeMap::from([("a".to_string(), (0..v / 3).collect()), ("b".to_string(), (v / 3..v).collect())])
}

/// Solves the ridge normal equations directly for one lambda.
fn direct_ridge(x: &DMatrix<f64>, y: &DVector<f64>, lam: f64) -> DVector<f64> {
    let p = x.ncols();
    let a = x.transpose() * x + DMatrix::identity(p, p) * lam;
    a.lu().solve(&(x.transpose() * y)).unwrap()
}

fn gcv(x: &DMatrix<f64>, ys: &[DVector<f64>], lam: f64) -> f64 {
    let (n, p) = (x.nrows(), x.ncols());
    let hat = x * (x.transpose() * x + DMatrix::identity(p, p) * lam).try_inverse().unwrap() * x.transpose();
    let tr = hat.trace();
    let rss: f64 = ys.iter().map(|y| (y - &hat * y).norm_squared()).sum();
    n as f64 * rss / ((n as f64 - tr) * (n as f64 - tr))
}

#[test]
fn encoding_fit_matches_normal_equations() {
    let (n, p, v) = (40, 6, 9);
    let mut r = rng::stream(25, "enc");
    let x = Tensor::new([n, p], rng::gaussian_vec(&mut r, n * p)).unwrap();
    let true_w = Tensor::new([p, v], rng::gaussian_vec(&mut r, p * v)).unwrap();
    let mut y = mindalign_core::linalg::matmul(&x, &true_w);
    y.data_mut().iter_mut().for_each(|t| *t += 0.8 * rng::gaussian(&mut r) + 0.3);
    let regions = region_map(v);
    let enc = EncodingModel::fit(&x, &y, &regions).unwrap();

    let mut xc = DMatrix::from_row_slice(n, p, x.data());
    for j in 0..p {
        let m = xc.column(j).mean();
        xc.column_mut(j).add_scalar_mut(-m);
    }
    let yc = |j: usize| {
        let col = DVector::from_iterator(n, (0..n).map(|i| y.row(i)[j]));
        let m = col.mean();
        col.add_scalar(-m)
    };
    let smax2 = xc.singular_values().max().powi(2);
    for (name, idx) in &regions {
        let lam = enc.lambdas[name];
        let ys: Vec<DVector<f64>> = idx.iter().map(|&j| yc(j)).collect();
        let best = (-8..=4)
            .map(|e| smax2 * 10f64.powi(e))
            .min_by(|a, b| gcv(&xc, &ys, *a).total_cmp(&gcv(&xc, &ys, *b)))
            .unwrap();
        assert!((lam / best - 1.0).abs() < 1e-12, "{name}: {lam} vs {best}");
        for (&j, yj) in idx.iter().zip(&ys) {
            let wj = direct_ridge(&xc, yj, lam);
            for k in 0..p {
                assert!((enc.weights.row(k)[j] - wj[k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn oracle_encoding_on_noiseless_world() {
    let wc = WorldConfig {
        noise_sigma: 0.0,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc, 3).unwrap();
    let mut ds = generate_dataset(&world, "s1", 2, 40, 5).unwrap();
    normalize(&mut ds).unwrap();
    let subject = world.subject("s1").unwrap();
    let enc = EncodingModel::oracle(subject, ds.norm_stats.as_ref().unwrap());
    let test = ds.test_indices();
    let (imgs, vox) = (ds.images.gather_rows(&test), ds.voxels.gather_rows(&test));
    let scores = brain_correlation(&imgs, &vox, &enc).unwrap();
    for (region, r) in &scores {
        assert!(*r > 0.999, "{region}: {r}");
    }
    // Region scores are voxel-count weighted parts of the whole.
    let total: f64 = enc.regions.iter().map(|(k, idx)| scores[k] * idx.len() as f64).sum();
    assert!((total / enc.n_voxels() as f64 - scores["all"]).abs() < 1e-10);
    // Null spread of the scores under random pairings.
    let m = test.len();
    let nulls: Vec<BTreeMap<String, f64>> = (0..200)
        .map(|i| {
            let mut r = rng::stream_indexed(26, "null", i);
            let perm = rand::seq::index::sample(&mut r, m, m).into_vec();
            brain_correlation(&imgs.gather_rows(&perm), &vox, &enc).unwrap()
        })
        .collect();
    let shuffled = imgs.gather_rows(&(0..m).map(|i| (i + 17) % m).collect::<Vec<_>>());
    let s = brain_correlation(&shuffled, &vox, &enc).unwrap();
    for (region, r) in &s {
        let vals: Vec<f64> = nulls.iter().map(|n| n[region]).collect();
        let sd = (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(r.abs() < 3.0 * sd, "{region}: {r} vs sd {sd}");
    }
}

#[test]
fn empty_region_is_rejected() {
    let x = Tensor::eye(4);
    let regions = BTreeMap::from([("a".to_string(), vec![0, 1, 2, 3]), ("b".to_string(), vec![])]);
    assert!(matches!(EncodingModel::fit(&x, &x, &regions), Err(EvalError::EmptyRegion(r)) if r == "b"));
}

#[test]
fn constant_voxels_score_zero() {
    let p = Tensor::new([3, 2], vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
    let m = Tensor::new([3, 2], vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
    let r = voxel_correlations(&p, &m).unwrap();
    assert_eq!(r[0], 0.0);
    assert!((r[1] - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_stay_in_range(seed in 0u64..10_000) {
        let mut r = rng::stream(seed, "range");
        let a = uniform_image(&mut r, 8 * 8 * 3);
        let b = uniform_image(&mut r, 8 * 8 * 3);
        let pc = pixcorr(&a, &b).unwrap().0;
        prop_assert!((-1.0..=1.0).contains(&pc));
        let s = ssim(&a, &b, 8, 8, 3).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let t = Tensor::new([5, 12], rng::gaussian_vec(&mut r, 60)).unwrap();
        let q = Tensor::new([5, 12], rng::gaussian_vec(&mut r, 60)).unwrap();
        let tw = two_way_identification(&q, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&tw));
    }

    #[test]
    fn blend_is_convex_before_clipping(a in prop::collection::vec(0.0f64..1.0, 12), b in prop::collection::vec(0.0f64..1.0, 12)) {
        let out = blend(&a, &b);
        for i in 0..12 {
            prop_assert!((out[i] - (0.8 * a[i] + 0.2 * b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn box_features_preserve_mean(seed in 0u64..10_000) {
        let mut r = rng::stream(seed, "box");
        let img = uniform_image(&mut r, 16 * 16 * 3);
        let f = box_features(&img, 16, 16, 3, 4);
        let m1 = img.iter().sum::<f64>() / img.len() as f64;
        let m2 = f.iter().sum::<f64>() / f.len() as f64;
        prop_assert!((m1 - m2).abs() < 1e-12);
    }
}
