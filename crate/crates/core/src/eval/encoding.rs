//! Ridge encoding model (pixels to voxels) and brain correlation scoring.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::metrics::pearson;
use super::{EvalError, Result};
use crate::dataset::NormStats;
use crate::linalg;
use crate::tensor::Tensor;
use crate::world::SubjectForwardModel;

/// Log-spaced ridge strengths tried by GCV, relative to the largest squared
/// singular value of the design.
const LAMBDA_GRID: std::ops::RangeInclusive<i32> = -8..=4;

/// `voxels ~ (pixels - pixel_mean) W + voxel_mean`, with one ridge strength
/// per region.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingModel {
    pub pixel_mean: Vec<f64>,
    pub voxel_mean: Vec<f64>,
    /// `[pixel_dim, n_voxels]`.
    pub weights: Tensor,
    pub lambdas: BTreeMap<String, f64>,
    pub regions: BTreeMap<String, Vec<usize>>,
}

fn column_means(t: &DMatrix<f64>) -> Vec<f64> {
    (0..t.ncols()).map(|j| t.column(j).mean()).collect()
}

impl EncodingModel {
    /// Fits on training images and voxels, choosing each region's ridge
    /// strength by generalized cross-validation.
    pub fn fit(images: &Tensor, voxels: &Tensor, regions: &BTreeMap<String, Vec<usize>>) -> Result<Self> {
        let n = images.rows();
        if voxels.rows() != n || n < 2 {
            return Err(EvalError::Shape("encoding fit: images and voxels must share >= 2 rows".into()));
        }
        for (name, idx) in regions {
            if idx.is_empty() {
                return Err(EvalError::EmptyRegion(name.clone()));
            }
        }
        let mut x = linalg::to_na(images);
        let mut y = linalg::to_na(voxels);
        let (xm, ym) = (column_means(&x), column_means(&y));
        for (j, m) in xm.iter().enumerate() {
            x.column_mut(j).add_scalar_mut(-m);
        }
        for (j, m) in ym.iter().enumerate() {
            y.column_mut(j).add_scalar_mut(-m);
        }
        let p = x.ncols();
        let svd = x.svd(true, true);
        let u = svd.u.expect("requested");
        let vt = svd.v_t.expect("requested");
        let s = &svd.singular_values;
        let smax = s.iter().cloned().fold(0.0, f64::max);
        let a = u.transpose() * &y; // [r, V]
        let col_sq: Vec<f64> = (0..y.ncols()).map(|j| y.column(j).norm_squared()).collect();
        let a_sq: Vec<Vec<f64>> = (0..a.nrows())
            .map(|k| (0..a.ncols()).map(|j| a[(k, j)] * a[(k, j)]).collect())
            .collect();

        let mut lambdas = BTreeMap::new();
        let mut w = DMatrix::zeros(p, y.ncols());
        for (name, idx) in regions {
            let mut best = (f64::INFINITY, 0.0);
            for e in LAMBDA_GRID {
                let lam = smax * smax * 10f64.powi(e);
                let d: Vec<f64> = s.iter().map(|&sv| sv * sv / (sv * sv + lam)).collect();
                let tr: f64 = d.iter().sum();
                let mut rss = 0.0;
                for &j in idx {
                    rss += col_sq[j];
                    for (k, dk) in d.iter().enumerate() {
                        rss -= (2.0 * dk - dk * dk) * a_sq[k][j];
                    }
                }
                let gcv = n as f64 * rss / ((n as f64 - tr) * (n as f64 - tr));
                if gcv < best.0 {
                    best = (gcv, lam);
                }
            }
            let lam = best.1;
            lambdas.insert(name.clone(), lam);
            for &j in idx {
                for (k, &sv) in s.iter().enumerate() {
                    let coef = sv / (sv * sv + lam) * a[(k, j)];
                    for q in 0..p {
                        w[(q, j)] += vt[(k, q)] * coef;
                    }
                }
            }
        }
        Ok(EncodingModel {
            pixel_mean: xm,
            voxel_mean: ym,
            weights: linalg::from_na(&w),
            lambdas,
            regions: regions.clone(),
        })
    }

    /// The world's noiseless forward model, mapped into z-scored voxel space.
    pub fn oracle(subject: &SubjectForwardModel, stats: &NormStats) -> Self {
        let (v, p) = (subject.n_voxels, subject.response.cols());
        let mut w = Tensor::zeros([p, v]);
        for j in 0..v {
            for k in 0..p {
                w.data_mut()[k * v + j] = subject.response.row(j)[k] / stats.std[j];
            }
        }
        EncodingModel {
            pixel_mean: vec![0.0; p],
            voxel_mean: stats.mean.iter().zip(&stats.std).map(|(m, s)| -m / s).collect(),
            weights: w,
            lambdas: subject.regions.keys().map(|k| (k.clone(), 0.0)).collect(),
            regions: subject.regions.clone(),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.weights.cols()
    }

    /// Predicted voxels for image rows.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        if images.cols() != self.pixel_mean.len() {
            return Err(EvalError::Shape("encoding predict: pixel dimension".into()));
        }
        let mut centered = images.clone();
        for i in 0..centered.rows() {
            centered.row_mut(i).iter_mut().zip(&self.pixel_mean).for_each(|(x, m)| *x -= m);
        }
        let mut out = linalg::matmul(&centered, &self.weights);
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(&self.voxel_mean).for_each(|(y, m)| *y += m);
        }
        Ok(out)
    }
}

/// Per-voxel correlation across items between predicted and measured
/// activity. Voxels with constant predictions score 0.
pub fn voxel_correlations(predicted: &Tensor, measured: &Tensor) -> Result<Vec<f64>> {
    if predicted.shape() != measured.shape() || predicted.rows() < 2 {
        return Err(EvalError::Shape("voxel correlations need matching [n >= 2, V] inputs".into()));
    }
    let (n, v) = (predicted.rows(), predicted.cols());
    let col = |t: &Tensor, j: usize| -> Vec<f64> { (0..n).map(|i| t.data()[i * v + j]).collect() };
    Ok((0..v)
        .map(|j| pearson(&col(predicted, j), &col(measured, j)).unwrap_or(0.0))
        .collect())
}

/// Mean voxel correlation within each region, plus `all` over every voxel.
pub fn brain_correlation(recons: &Tensor, measured: &Tensor, enc: &EncodingModel) -> Result<BTreeMap<String, f64>> {
    let r = voxel_correlations(&enc.predict(recons)?, measured)?;
    let mut out = BTreeMap::new();
    for (name, idx) in &enc.regions {
        if idx.is_empty() {
            return Err(EvalError::EmptyRegion(name.clone()));
        }
        out.insert(name.clone(), idx.iter().map(|&j| r[j]).sum::<f64>() / idx.len() as f64);
    }
    out.insert("all".into(), r.iter().sum::<f64>() / r.len() as f64);
    Ok(out)
}
