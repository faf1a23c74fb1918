//! Training objectives: the diffusion-prior MSE lives with the model; this
//! module holds the contrastive losses (MixCo with hard labels, SoftCLIP with
//! soft labels), the low-level loss and their weighted sum.

use std::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Bindings, Graph, NodeId};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("contrastive losses need at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotNormalized { row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("invalid beta parameters ({0}, {1})")]
    BadBeta(f64, f64),
    #[error("iteration {iteration} outside [0, {total})")]
    OutOfRange { iteration: usize, total: usize },
    #[error("non-finite loss component")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.033,
            alpha2: 0.016,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    BiMixCo,
    SoftClip,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::BiMixCo => "bimixco",
            Phase::SoftClip => "softclip",
        })
    }
}

/// Hard-label mixing for the first third of training, soft labels after.
pub fn loss_phase(iteration: usize, total: usize) -> Result<Phase> {
    if iteration >= total {
        return Err(LossError::OutOfRange { iteration, total });
    }
    Ok(if iteration < total / 3 {
        Phase::BiMixCo
    } else {
        Phase::SoftClip
    })
}

pub fn total_loss(prior_l: f64, contrastive_l: f64, lowlevel_l: f64, w: LossWeights) -> Result<f64> {
    if ![prior_l, contrastive_l, lowlevel_l].iter().all(|v| v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    Ok(prior_l + w.alpha1 * contrastive_l + w.alpha2 * lowlevel_l)
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NotNormalized { row: i, norm });
        }
    }
    Ok(())
}

fn check_pair(pred: &Tensor, target: &Tensor, tau: f64) -> Result<()> {
    if pred.shape() != target.shape() || pred.ndim() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    if pred.rows() < 2 {
        return Err(LossError::BatchTooSmall(pred.rows()));
    }
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    check_unit_rows(pred)?;
    check_unit_rows(target)
}

/// Row-softmax of `target · targetᵀ / tau`.
pub fn soft_targets(target: &Tensor, tau: f64) -> Tensor {
    let n = target.rows();
    let mut q = Tensor::zeros([n, n]);
    for i in 0..n {
        let row = q.row_mut(i);
        for j in 0..n {
            row[j] = target.row(i).iter().zip(target.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    q
}

/// Symmetric contrastive loss on cosine logits: cross-entropy of the rows
/// against `q_rows`, and of the columns against `q_cols`, averaged.
pub fn contrastive_node(g: &mut Graph, pred: NodeId, target: NodeId, q_rows: NodeId, q_cols: NodeId, tau: f64) -> NodeId {
    let sim = g.cosine_similarity(pred, target);
    let logits = g.scale(sim, 1.0 / tau);
    let fwd = g.soft_cross_entropy(logits, q_rows);
    let lt = g.transpose(logits);
    let bwd = g.soft_cross_entropy(lt, q_cols);
    let s = g.add(fwd, bwd);
    g.scale(s, 0.5)
}

fn eval_contrastive(pred: &Tensor, target: &Tensor, q_rows: &Tensor, q_cols: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (p, t, qr, qc) = (g.input("pred"), g.input("target"), g.input("q_rows"), g.input("q_cols"));
    let out = contrastive_node(&mut g, p, t, qr, qc, tau);
    g.set_output(out);
    let mut b = Bindings::new();
    b.bind(p, pred).bind(t, target).bind(qr, q_rows).bind(qc, q_cols);
    Ok(g.forward(&b)?.item())
}

/// SoftCLIP: both directions use the target-target soft labels.
pub fn soft_clip_loss(pred: &Tensor, target: &Tensor, tau: f64) -> Result<f64> {
    check_pair(pred, target, tau)?;
    let q = soft_targets(target, tau);
    eval_contrastive(pred, target, &q, &q, tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixCoBatch {
    pub mixed_voxels: Tensor,
    pub lambda: Vec<f64>,
    pub perm: Vec<usize>,
    pub beta_params: (f64, f64),
}

impl MixCoBatch {
    /// Hard-label mixture targets: `lambda_i` at `i`, the rest at `perm(i)`.
    pub fn targets(&self) -> Tensor {
        mixco_targets(&self.lambda, &self.perm)
    }
}

pub fn mixco_targets(lambda: &[f64], perm: &[usize]) -> Tensor {
    let n = lambda.len();
    let mut q = Tensor::zeros([n, n]);
    for i in 0..n {
        q.data_mut()[i * n + i] += lambda[i];
        q.data_mut()[i * n + perm[i]] += 1.0 - lambda[i];
    }
    q
}

/// Mixes each row with a randomly permuted partner at `lambda ~ Beta(a, b)`.
pub fn mixco_augment(voxels: &Tensor, beta_params: (f64, f64), seed: u64) -> Result<MixCoBatch> {
    let n = voxels.rows();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    let (a, b) = beta_params;
    let dist = Beta::new(a, b).map_err(|_| LossError::BadBeta(a, b))?;
    let mut r = rng::stream(seed, "mixco");
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let lambda: Vec<f64> = (0..n).map(|_| dist.sample(&mut r)).collect();
    Ok(MixCoBatch {
        mixed_voxels: mix_rows(voxels, &lambda, &perm),
        lambda,
        perm,
        beta_params,
    })
}

pub fn mix_rows(x: &Tensor, lambda: &[f64], perm: &[usize]) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let (l, partner) = (lambda[i], x.row(perm[i]));
        for (o, p) in out.row_mut(i).iter_mut().zip(partner) {
            *o = l * *o + (1.0 - l) * p;
        }
    }
    out
}

/// Bidirectional InfoNCE against the mixture targets; columns use the
/// transposed targets.
pub fn bimixco_loss(pred: &Tensor, target: &Tensor, mix: &MixCoBatch, tau: f64) -> Result<f64> {
    check_pair(pred, target, tau)?;
    let q = mix.targets();
    let qt = q.transpose()?;
    eval_contrastive(pred, target, &q, &qt, tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowLevelTargets {
    pub vae_true: Tensor,
    pub vae_pred: Tensor,
    pub teacher_true: Tensor,
    pub teacher_pred: Tensor,
}

/// Mean absolute latent error plus SoftCLIP on the teacher embeddings, with
/// soft labels from the (unit-normalized) true teacher rows.
pub fn lowlevel_node(g: &mut Graph, vae_pred: NodeId, vae_true: NodeId, teacher_pred: NodeId, teacher_unit: NodeId, q: NodeId, tau: f64) -> NodeId {
    let l1 = g.l1(vae_pred, vae_true);
    let clip = contrastive_node(g, teacher_pred, teacher_unit, q, q, tau);
    g.add(l1, clip)
}

pub fn lowlevel_loss(t: &LowLevelTargets, tau: f64) -> Result<f64> {
    if t.vae_true.shape() != t.vae_pred.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "lowlevel_loss",
            lhs: t.vae_true.shape().to_vec(),
            rhs: t.vae_pred.shape().to_vec(),
        }
        .into());
    }
    check_pair(&t.teacher_pred, &t.teacher_true, tau)?;
    let q = soft_targets(&t.teacher_true, tau);
    let mut g = Graph::new();
    let ids: Vec<NodeId> = ["vp", "vt", "tp", "tt", "q"].iter().map(|n| g.input(n)).collect();
    let out = lowlevel_node(&mut g, ids[0], ids[1], ids[2], ids[3], ids[4], tau);
    g.set_output(out);
    let mut b = Bindings::new();
    b.bind(ids[0], &t.vae_pred)
        .bind(ids[1], &t.vae_true)
        .bind(ids[2], &t.teacher_pred)
        .bind(ids[3], &t.teacher_true)
        .bind(ids[4], &q);
    Ok(g.forward(&b)?.item())
}

/// Unit-normalizes every row; zero rows are left as zeros.
pub fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_boundaries() {
        assert_eq!(loss_phase(0, 300).unwrap(), Phase::BiMixCo);
        assert_eq!(loss_phase(99, 300).unwrap(), Phase::BiMixCo);
        assert_eq!(loss_phase(100, 300).unwrap(), Phase::SoftClip);
        assert_eq!(loss_phase(299, 300).unwrap(), Phase::SoftClip);
        assert!(loss_phase(300, 300).is_err());
        // Fewer than three iterations: no hard-label phase at all.
        assert_eq!(loss_phase(0, 2).unwrap(), Phase::SoftClip);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, w).unwrap() - 1.049).abs() < 1e-12);
        assert_eq!(total_loss(2.5, 0.0, 0.0, w).unwrap(), 2.5);
        assert!((total_loss(0.0, 2.0, 0.0, w).unwrap() - 0.066).abs() < 1e-12);
        assert_eq!(total_loss(f64::NAN, 0.0, 0.0, w), Err(LossError::NonFinite));
    }

    #[test]
    fn input_validation() {
        let one = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(soft_clip_loss(&one, &one, 1.0), Err(LossError::BatchTooSmall(1)));
        let two = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(matches!(soft_clip_loss(&two, &two, 1.0), Err(LossError::NotNormalized { row: 1, .. })));
        let ok = Tensor::eye(2);
        assert_eq!(soft_clip_loss(&ok, &ok, 0.0), Err(LossError::BadTemperature(0.0)));
        assert!(mixco_augment(&one, (0.15, 0.15), 0).is_err());
        assert!(mixco_augment(&ok, (0.0, 0.15), 0).is_err());
    }

    #[test]
    fn mixco_degenerate_lambdas() {
        let x = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let perm = vec![2, 0, 1];
        assert_eq!(mix_rows(&x, &[1.0; 3], &perm), x);
        let swapped = mix_rows(&x, &[0.0; 3], &perm);
        for i in 0..3 {
            assert_eq!(swapped.row(i), x.row(perm[i]));
        }
    }
}
