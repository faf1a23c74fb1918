//! Contrastive and low-level losses against plain-loop references.

use mindalign_core::graph::{gradcheck, Bindings, Graph};
use mindalign_core::losses::{
    bimixco_loss, contrastive_node, lowlevel_loss, mixco_augment, mixco_targets, soft_clip_loss, soft_targets,
    total_loss, unit_rows, LossError, LossWeights, LowLevelTargets, MixCoBatch,
};
use mindalign_core::rng;
use mindalign_core::Tensor;
use proptest::prelude::*;

fn unit(r: &mut rng::Rng, n: usize, d: usize) -> Tensor {
    unit_rows(&Tensor::new([n, d], rng::gaussian_vec(r, n * d)).unwrap())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy of a target distribution against the softmax of `logits`.
fn naive_ce(logits: &[f64], q: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    -logits.iter().zip(q).map(|(l, p)| p * (l - lse)).sum::<f64>()
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Averages row-wise and column-wise cross-entropy with the given label rows.
fn naive_contrastive(p: &Tensor, t: &Tensor, q_rows: &[Vec<f64>], q_cols: &[Vec<f64>], tau: f64) -> f64 {
    let n = p.rows();
    let (mut fwd, mut bwd) = (0.0, 0.0);
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| cos(p.row(i), t.row(j)) / tau).collect();
        fwd += naive_ce(&row, &q_rows[i]);
        let col: Vec<f64> = (0..n).map(|j| cos(p.row(j), t.row(i)) / tau).collect();
        bwd += naive_ce(&col, &q_cols[i]);
    }
    (fwd + bwd) / (2.0 * n as f64)
}

fn naive_soft_clip(p: &Tensor, t: &Tensor, tau: f64) -> f64 {
    let n = p.rows();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| naive_softmax(&(0..n).map(|j| dot(t.row(i), t.row(j)) / tau).collect::<Vec<_>>()))
        .collect();
    naive_contrastive(p, t, &q, &q, tau)
}

fn naive_lowlevel(t: &LowLevelTargets, tau: f64) -> f64 {
    let a = t.vae_pred.data();
    let b = t.vae_true.data();
    let l1 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    l1 + naive_soft_clip(&t.teacher_pred, &t.teacher_true, tau)
}

#[test]
fn soft_clip_matches_reference() {
    for seed in 0..20 {
        let mut r = rng::stream_indexed(11, "softclip", seed);
        let n = 2 + seed as usize % 7;
        let (p, t) = (unit(&mut r, n, 9), unit(&mut r, n, 9));
        let got = soft_clip_loss(&p, &t, 0.25).unwrap();
        let want = naive_soft_clip(&p, &t, 0.25);
        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn lowlevel_matches_reference() {
    for seed in 0..20 {
        let mut r = rng::stream_indexed(12, "lowlevel", seed);
        let n = 2 + seed as usize % 5;
        let mut g = |d: usize| Tensor::new([n, d], rng::gaussian_vec(&mut r, n * d)).unwrap();
        let (vp, vt) = (g(12), g(12));
        let mut r2 = rng::stream_indexed(13, "lowlevel", seed);
        let t = LowLevelTargets {
            vae_pred: vp,
            vae_true: vt,
            teacher_pred: unit(&mut r2, n, 6),
            teacher_true: unit(&mut r2, n, 6),
        };
        let got = lowlevel_loss(&t, 0.25).unwrap();
        let want = naive_lowlevel(&t, 0.25);
        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn bimixco_matches_reference() {
    for seed in 0..20 {
        let mut r = rng::stream_indexed(14, "bimixco", seed);
        let n = 2 + seed as usize % 6;
        let (p, t) = (unit(&mut r, n, 5), unit(&mut r, n, 5));
        let vox = Tensor::new([n, 3], rng::gaussian_vec(&mut r, n * 3)).unwrap();
        let mix = mixco_augment(&vox, (0.15, 0.15), seed).unwrap();
        let q = mix.targets();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| q.row(i).to_vec()).collect();
        let cols: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| q.row(j)[i]).collect()).collect();
        let got = bimixco_loss(&p, &t, &mix, 0.125).unwrap();
        let want = naive_contrastive(&p, &t, &rows, &cols, 0.125);
        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn two_item_closed_form() {
    let e = Tensor::eye(2);
    for tau in [0.125, 0.25, 1.0] {
        let s = 1.0 / (1.0 + (-1.0 / tau as f64).exp());
        let entropy = -(s * s.ln() + (1.0 - s) * (1.0 - s).ln());
        assert!((soft_clip_loss(&e, &e, tau).unwrap() - entropy).abs() < 1e-12);
    }
}

#[test]
fn mixco_targets_rows_sum_to_one() {
    let q = mixco_targets(&[0.3, 1.0, 0.6], &[1, 1, 0]);
    assert_eq!(q.row(0), &[0.3, 0.7, 0.0]);
    assert_eq!(q.row(1), &[0.0, 1.0, 0.0]);
    assert_eq!(q.row(2), &[0.4, 0.0, 0.6]);
}

#[test]
fn precondition_errors() {
    let e = Tensor::eye(3);
    assert_eq!(soft_clip_loss(&e.gather_rows(&[0]), &e.gather_rows(&[0]), 0.1), Err(LossError::BatchTooSmall(1)));
    assert_eq!(soft_clip_loss(&e, &e, 0.0), Err(LossError::BadTemperature(0.0)));
    let mut big = e.clone();
    big.data_mut()[0] = 2.0;
    assert!(matches!(soft_clip_loss(&big, &e, 0.1), Err(LossError::NotNormalized { row: 0, .. })));
    assert_eq!(mixco_augment(&e, (0.0, 1.0), 0).unwrap_err(), LossError::BadBeta(0.0, 1.0));
}

#[test]
fn weighted_sum() {
    assert_eq!(total_loss(1.0, 1.0, 1.0, LossWeights::default()).unwrap(), 1.049);
    assert_eq!(total_loss(f64::NAN, 0.0, 0.0, LossWeights::default()), Err(LossError::NonFinite));
}

#[test]
fn bimixco_graph_gradients() {
    for point in 0..5 {
        let mut r = rng::stream_indexed(15, "bimixco/grad", point);
        let n = 4;
        let p = Tensor::new([n, 5], rng::gaussian_vec(&mut r, n * 5)).unwrap();
        let t = unit(&mut r, n, 5);
        let vox = Tensor::new([n, 2], rng::gaussian_vec(&mut r, n * 2)).unwrap();
        let mix: MixCoBatch = mixco_augment(&vox, (0.15, 0.15), point).unwrap();
        let q = mix.targets();
        let qt = q.transpose().unwrap();
        let mut g = Graph::new();
        let (pn, tn, qr, qc) = (g.param("p"), g.param("t"), g.input("qr"), g.input("qc"));
        let out = contrastive_node(&mut g, pn, tn, qr, qc, 0.125);
        g.set_output(out);
        let mut b = Bindings::new();
        b.bind(pn, &p).bind(tn, &t).bind(qr, &q).bind(qc, &qt);
        let err = gradcheck(&mut g, &b, 1e-5).unwrap();
        assert!(err < 1e-5, "point {point}: {err}");
    }
}

fn row_entropy(q: &Tensor) -> f64 {
    let n = q.rows();
    (0..n)
        .map(|i| -q.row(i).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_clip_is_permutation_invariant(seed in 0u64..10_000, n in 2usize..8, shift in 1usize..7) {
        let mut r = rng::stream(seed, "perm");
        let (p, t) = (unit(&mut r, n, 4), unit(&mut r, n, 4));
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let a = soft_clip_loss(&p, &t, 0.25).unwrap();
        let b = soft_clip_loss(&p.gather_rows(&perm), &t.gather_rows(&perm), 0.25).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn losses_bounded_below_by_label_entropy(seed in 0u64..10_000, n in 2usize..8) {
        let mut r = rng::stream(seed, "floor");
        let (p, t) = (unit(&mut r, n, 4), unit(&mut r, n, 4));
        let q = soft_targets(&t, 0.25);
        prop_assert!(soft_clip_loss(&p, &t, 0.25).unwrap() >= row_entropy(&q) - 1e-12);
        let vox = Tensor::new([n, 2], rng::gaussian_vec(&mut r, n * 2)).unwrap();
        let mix = mixco_augment(&vox, (0.15, 0.15), seed).unwrap();
        let m = mix.targets();
        let floor = (row_entropy(&m) + row_entropy(&m.transpose().unwrap())) / 2.0;
        prop_assert!(bimixco_loss(&p, &t, &mix, 0.125).unwrap() >= floor - 1e-12);
    }

    #[test]
    fn mixco_is_convex(seed in 0u64..10_000, n in 2usize..10) {
        let mut r = rng::stream(seed, "convex");
        let vox = Tensor::new([n, 3], rng::gaussian_vec(&mut r, n * 3)).unwrap();
        let mix = mixco_augment(&vox, (0.15, 0.15), seed).unwrap();
        let mut sorted = mix.perm.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        for i in 0..n {
            let l = mix.lambda[i];
            prop_assert!((0.0..=1.0).contains(&l));
            for c in 0..3 {
                let want = l * vox.row(i)[c] + (1.0 - l) * vox.row(mix.perm[i])[c];
                prop_assert!((mix.mixed_voxels.row(i)[c] - want).abs() < 1e-12);
            }
            prop_assert!((mix.targets().row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
