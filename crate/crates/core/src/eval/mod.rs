//! Evaluation: the inference pipeline, metric reports, the random-image
//! baseline and the data-scaling experiment.

pub mod ablation;
pub mod encoding;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, SubjectDataset};
use crate::model::{self, Builder, ModelError, ModelParams, Trainable};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{self, Prepared, TrainConfig, TrainError};
use crate::world::{WorldError, WorldSpec, REGIONS};

pub use ablation::{ablation_run, Variant};
pub use encoding::{brain_correlation, EncodingModel};
pub use metrics::{pixcorr, retrieval_eval, ssim, two_way_identification, RetrievalScores};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model has no trained diffusion prior; reconstructions are unavailable")]
    NoPrior,
    #[error("pool of {pool} exceeds the {n} available test items")]
    PoolTooLarge { pool: usize, n: usize },
    #[error("need at least 2 items, got {0}")]
    TooFewItems(usize),
    #[error("constant feature vector; correlation undefined")]
    DegenerateFeatures,
    #[error("region `{0}` has no voxels")]
    EmptyRegion(String),
    #[error("session grid is empty")]
    EmptyGrid,
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Block size of the low-level two-way features.
    pub lowlevel_block: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool_size: 50,
            repetitions: 30,
            seed: 0,
            lowlevel_block: 4,
        }
    }
}

/// Metrics that enter the normalized scaling curve.
pub const SCALING_METRICS: [&str; 6] = [
    "image_retrieval",
    "brain_retrieval",
    "pixcorr",
    "ssim",
    "twoway_low",
    "twoway_high",
];

/// Every key an [`EvalReport`] carries, in output order.
pub fn metric_keys() -> Vec<String> {
    let mut keys: Vec<String> = SCALING_METRICS.iter().map(|s| s.to_string()).collect();
    keys.extend(REGIONS.iter().map(|r| format!("brain_corr.{r}")));
    keys.push("brain_corr.all".into());
    keys
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` marks a metric the model cannot produce.
    pub metrics: BTreeMap<String, Option<f64>>,
    pub pool_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub n_items: usize,
}

/// `%.6g`-style formatting.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor() as i32;
    if (-4..6).contains(&e) {
        let s = format!("{:.*}", (5 - e).max(0) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

impl EvalReport {
    fn empty(cfg: &EvalConfig, n_items: usize) -> Self {
        EvalReport {
            metrics: metric_keys().into_iter().map(|k| (k, None)).collect(),
            pool_size: cfg.pool_size,
            repetitions: cfg.repetitions,
            seed: cfg.seed,
            n_items,
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied().flatten()
    }

    fn set(&mut self, key: &str, v: f64) {
        self.metrics.insert(key.to_string(), Some(v));
    }

    pub fn chance_retrieval(&self) -> f64 {
        1.0 / self.pool_size as f64
    }

    /// `key=value` lines; absent metrics print as `NA`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "pool_size={}", self.pool_size).unwrap();
        writeln!(s, "repetitions={}", self.repetitions).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "n_items={}", self.n_items).unwrap();
        writeln!(s, "chance.retrieval={}", sig6(self.chance_retrieval())).unwrap();
        writeln!(s, "chance.twoway=0.5").unwrap();
        for k in metric_keys() {
            match self.get(&k) {
                Some(v) => writeln!(s, "{k}={}", sig6(v)).unwrap(),
                None => writeln!(s, "{k}=NA").unwrap(),
            }
        }
        s
    }
}

/// Convex 4:1 blend of the semantic and low-level images, clipped to `[0, 1]`.
pub fn blend(unrefined: &[f64], lowlevel: &[f64]) -> Vec<f64> {
    unrefined
        .iter()
        .zip(lowlevel)
        .map(|(a, b)| ((4.0 * a + b) / 5.0).clamp(0.0, 1.0))
        .collect()
}

fn clip_row(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

fn stack(rows: Vec<Vec<f64>>) -> Tensor {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    Tensor::new([n, c], rows.concat()).expect("uniform rows")
}

/// Backbone tokens `[n, token_dim]` for voxel rows of one subject.
pub fn backbone_tokens(params: &ModelParams, subject: &str, voxels: &Tensor) -> Result<Tensor> {
    let nv = params.n_voxels(subject)?;
    if voxels.cols() != nv {
        return Err(ModelError::VoxelMismatch {
            subject: subject.to_string(),
            expected: nv,
            got: voxels.cols(),
        }
        .into());
    }
    let mut b = Builder::new(params, Trainable::Nothing);
    let x = b.input("voxels", voxels);
    let latent = b.ridge(subject, x, None)?;
    let tokens = b.backbone(latent);
    b.graph.set_output(tokens);
    Ok(b.graph.forward(&b.bindings).map_err(ModelError::from)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructions {
    pub sampled_tokens: Tensor,
    pub unrefined: Tensor,
    pub lowlevel: Option<Tensor>,
    pub blended: Tensor,
}

/// Prior sample, token decoding and, when the low-level head is trained,
/// the 4:1 blend with the decoded low-level latent.
pub fn reconstruct_from_tokens(
    params: &ModelParams,
    world: &WorldSpec,
    tokens: &Tensor,
    seed: u64,
) -> Result<Reconstructions> {
    if !params.heads.prior {
        return Err(EvalError::NoPrior);
    }
    let sampled = model::prior_sample(params, tokens, seed)?;
    let unrefined = (0..sampled.rows())
        .map(|i| world.decode_tokens(sampled.row(i)).map(clip_row))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let unrefined = stack(unrefined);
    let (lowlevel, blended) = if params.heads.lowlevel {
        let (vae, _) = model::lowlevel_forward(params, tokens)?;
        let low = (0..vae.rows())
            .map(|i| world.decode_vae(vae.row(i)).map(clip_row))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let low = stack(low);
        let mixed = (0..unrefined.rows()).map(|i| blend(unrefined.row(i), low.row(i))).collect();
        (Some(low), stack(mixed))
    } else {
        (None, unrefined.clone())
    };
    Ok(Reconstructions {
        sampled_tokens: sampled,
        unrefined,
        lowlevel,
        blended,
    })
}

pub fn reconstruct(
    params: &ModelParams,
    world: &WorldSpec,
    voxels: &Tensor,
    subject: &str,
    seed: u64,
) -> Result<Reconstructions> {
    let tokens = backbone_tokens(params, subject, voxels)?;
    reconstruct_from_tokens(params, world, &tokens, seed)
}

fn image_metrics(
    report: &mut EvalReport,
    world: &WorldSpec,
    recons: &Tensor,
    truths: &Tensor,
    voxels: &Tensor,
    enc: &EncodingModel,
    cfg: &EvalConfig,
) -> Result<()> {
    let wc = &world.config;
    let n = truths.rows();
    let (mut pc, mut ss) = (0.0, 0.0);
    for i in 0..n {
        pc += pixcorr(recons.row(i), truths.row(i))?.0;
        ss += ssim(recons.row(i), truths.row(i), wc.height, wc.width, wc.channels)?;
    }
    report.set("pixcorr", pc / n as f64);
    report.set("ssim", ss / n as f64);
    let low = |t: &Tensor| {
        stack(
            (0..t.rows())
                .map(|i| metrics::box_features(t.row(i), wc.height, wc.width, wc.channels, cfg.lowlevel_block))
                .collect(),
        )
    };
    report.set("twoway_low", two_way_identification(&low(recons), &low(truths))?);
    let high = |t: &Tensor| -> Result<Tensor> {
        Ok(stack(
            (0..t.rows())
                .map(|i| world.encode_image(t.row(i)))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        ))
    };
    report.set("twoway_high", two_way_identification(&high(recons)?, &high(truths)?)?);
    for (region, r) in brain_correlation(recons, voxels, enc)? {
        report.set(&format!("brain_corr.{region}"), r);
    }
    Ok(())
}

fn retrieval_targets(world: &WorldSpec, images: &Tensor) -> Result<Tensor> {
    Ok(stack(
        (0..images.rows())
            .map(|i| world.retrieval_target(images.row(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?,
    ))
}

struct TestSplit {
    voxels: Tensor,
    images: Tensor,
}

fn test_split(ds: &SubjectDataset) -> TestSplit {
    let idx = ds.test_indices();
    TestSplit {
        voxels: ds.voxels.gather_rows(&idx),
        images: ds.images.gather_rows(&idx),
    }
}

/// Full report for a model on a subject's shared-test split. Metrics a
/// model cannot produce (no prior: no reconstructions) are left absent.
pub fn evaluate(
    params: &ModelParams,
    world: &WorldSpec,
    ds: &SubjectDataset,
    enc: &EncodingModel,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let test = test_split(ds);
    let n = test.images.rows();
    let mut report = EvalReport::empty(cfg, n);
    let tokens = backbone_tokens(params, &ds.subject_id, &test.voxels)?;
    let recon = if params.heads.prior {
        Some(reconstruct_from_tokens(params, world, &tokens, rng::derive(cfg.seed, "eval/prior"))?)
    } else {
        None
    };
    let emb = if params.heads.retrieval {
        Some(model::retrieval_project(params, &tokens)?.0)
    } else if let Some(r) = &recon {
        let rows = (0..n)
            .map(|i| world.retrieval_from_tokens(r.sampled_tokens.row(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Some(stack(rows))
    } else {
        None
    };
    if let Some(emb) = emb {
        let targets = retrieval_targets(world, &test.images)?;
        let s = retrieval_eval(&emb, &targets, cfg.pool_size, cfg.repetitions, cfg.seed)?;
        report.set("image_retrieval", s.image);
        report.set("brain_retrieval", s.brain);
    }
    if let Some(r) = &recon {
        image_metrics(&mut report, world, &r.blended, &test.images, &test.voxels, enc, cfg)?;
    }
    Ok(report)
}

/// Scores randomly drawn images (from the pool reserved for this purpose)
/// as if they were reconstructions: the zero point of normalized metrics.
pub fn baseline_report(
    world: &WorldSpec,
    ds: &SubjectDataset,
    enc: &EncodingModel,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let test = test_split(ds);
    let n = test.images.rows();
    let ids: Vec<u32> = world.config.baseline_image_ids().collect();
    if ids.len() < n {
        return Err(EvalError::TooFewItems(ids.len()));
    }
    let mut r = rng::stream(cfg.seed, "eval/baseline");
    let picks = index::sample(&mut r, ids.len(), n).into_vec();
    let random = stack(
        picks
            .iter()
            .map(|&i| world.image(ids[i]))
            .collect::<std::result::Result<Vec<_>, _>>()?,
    );
    let mut report = EvalReport::empty(cfg, n);
    let emb = retrieval_targets(world, &random)?;
    let targets = retrieval_targets(world, &test.images)?;
    let s = retrieval_eval(&emb, &targets, cfg.pool_size, cfg.repetitions, cfg.seed)?;
    report.set("image_retrieval", s.image);
    report.set("brain_retrieval", s.brain);
    image_metrics(&mut report, world, &random, &test.images, &test.voxels, enc, cfg)?;
    Ok(report)
}

/// Encoding model fit on the subject's training split only.
pub fn fit_encoding_model(world: &WorldSpec, ds: &SubjectDataset) -> Result<EncodingModel> {
    let idx = ds.train_indices(ds.n_sessions)?;
    let subject = world.subject(&ds.subject_id)?;
    EncodingModel::fit(&ds.images.gather_rows(&idx), &ds.voxels.gather_rows(&idx), &subject.regions)
}

/// One fine-tuning (with a pretrained model) or from-scratch run plus
/// evaluation per session budget.
pub fn scaling_experiment(
    world: &WorldSpec,
    held_out: &Prepared,
    pretrained: Option<&ModelParams>,
    grid: &[usize],
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    enc: &EncodingModel,
) -> Result<BTreeMap<usize, EvalReport>> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    for &k in grid {
        held_out.dataset.train_indices(k)?;
    }
    let runs: Vec<(usize, EvalReport)> = grid
        .par_iter()
        .map(|&k| {
            let (params, _) = match pretrained {
                Some(p) => train::finetune(p.clone(), held_out, k, train_cfg)?,
                None => train::train_from_scratch(&world.config, held_out, k, train_cfg)?,
            };
            Ok((k, evaluate(&params, world, &held_out.dataset, enc, eval_cfg)?))
        })
        .collect::<Result<_>>()?;
    Ok(runs.into_iter().collect())
}

/// `(x - baseline) / (full - baseline)`; `None` when undefined.
pub fn normalize_metric(x: f64, baseline: f64, full: f64) -> Option<f64> {
    let span = full - baseline;
    (span != 0.0 && span.is_finite()).then(|| (x - baseline) / span)
}

/// Normalized value of every scaling metric present in all three reports.
pub fn normalized_metrics(report: &EvalReport, baseline: &EvalReport, full: &EvalReport) -> BTreeMap<String, f64> {
    SCALING_METRICS
        .iter()
        .filter_map(|&k| {
            let v = normalize_metric(report.get(k)?, baseline.get(k)?, full.get(k)?)?;
            Some((k.to_string(), v))
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Median over metrics of the normalized scores.
pub fn normalized_median(report: &EvalReport, baseline: &EvalReport, full: &EvalReport) -> Option<f64> {
    let vals: Vec<f64> = normalized_metrics(report, baseline, full).into_values().collect();
    median(&vals)
}

pub const SCALING_CSV_HEADER: &str = "arm,k_sessions,metric_name,value,seed";

/// Raw and normalized rows for one arm's curve.
pub fn scaling_csv_rows(
    arm: &str,
    seed: u64,
    curve: &BTreeMap<usize, EvalReport>,
    baseline: &EvalReport,
    full: &EvalReport,
) -> Vec<String> {
    let mut rows = Vec::new();
    for (k, report) in curve {
        for key in metric_keys() {
            if let Some(v) = report.get(&key) {
                rows.push(format!("{arm},{k},{key},{},{seed}", sig6(v)));
            }
        }
        for (key, v) in normalized_metrics(report, baseline, full) {
            rows.push(format!("{arm},{k},norm.{key},{},{seed}", sig6(v)));
        }
        if let Some(m) = normalized_median(report, baseline, full) {
            rows.push(format!("{arm},{k},norm.median,{},{seed}", sig6(m)));
        }
    }
    rows
}
