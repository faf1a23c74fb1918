//! Multi-subject pretraining, held-out fine-tuning and single-subject
//! training, all through one optimization loop.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, SubjectDataset};
use crate::graph::NodeId;
use crate::losses::{self, LossError, LossWeights, Phase};
use crate::model::{
    noise_tokens, timestep_onehot, ArchConfig, Builder, Heads, ModelConfig, ModelError, ModelParams,
    RidgeVariant, Trainable,
};
use crate::optim::{AdamWHyper, AdamWState};
use crate::rng;
use crate::tensor::{Tensor, TensorError};
use crate::world::{WorldConfig, WorldError, WorldSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("subject leak: `{0}` was seen during pretraining")]
    SubjectLeak(String),
    #[error("no pretraining subjects")]
    NoSubjects,
    #[error("dataset for `{0}` is not normalized")]
    Unnormalized(String),
    #[error("batch of {0} rows is too small for the contrastive loss")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batch size for single-subject training and fine-tuning.
    pub batch_size: usize,
    /// Per-subject share of each pretraining batch.
    pub samples_per_subject: usize,
    /// How many subjects (other than the held-out one) to pretrain on; 0 for all.
    pub n_pretrain_subjects: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub tau_hard: f64,
    pub tau_soft: f64,
    pub mixco_beta: (f64, f64),
    pub seed: u64,
    pub held_out_subject: String,
    pub n_finetune_sessions: usize,
    pub use_prior: bool,
    pub use_retrieval: bool,
    pub use_lowlevel: bool,
    /// Fine-tune only the new subject's ridge layer.
    pub ridge_only: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 12,
            samples_per_subject: 4,
            n_pretrain_subjects: 3,
            lr: 3e-4,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            tau_hard: 0.125,
            tau_soft: 0.25,
            mixco_beta: (0.15, 0.15),
            seed: 0,
            held_out_subject: "s0".into(),
            n_finetune_sessions: 1,
            use_prior: true,
            use_retrieval: true,
            use_lowlevel: true,
            ridge_only: false,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.use_prior || self.use_retrieval || self.use_lowlevel) {
            return bad("at least one of use_prior, use_retrieval, use_lowlevel must be set");
        }
        if self.batch_size < 2 || self.samples_per_subject == 0 {
            return bad("batch_size must be >= 2 and samples_per_subject >= 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) || self.weight_decay < 0.0 {
            return bad("lr must be positive, warmup_frac in [0, 1), weight_decay >= 0");
        }
        if !(self.tau_hard > 0.0 && self.tau_soft > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.weights.alpha1 >= 0.0 && self.weights.alpha2 >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.mixco_beta.0 > 0.0 && self.mixco_beta.1 > 0.0) {
            return bad("mixco_beta parameters must be positive");
        }
        if self.n_finetune_sessions == 0 {
            return bad("n_finetune_sessions must be >= 1");
        }
        Ok(())
    }

    /// Subjects used for pretraining: every world subject except the
    /// held-out one, truncated to `n_pretrain_subjects`.
    pub fn pretrain_subjects(&self, world: &WorldConfig) -> Vec<String> {
        let mut ids: Vec<String> = world
            .subject_ids()
            .into_iter()
            .filter(|s| *s != self.held_out_subject)
            .collect();
        if self.n_pretrain_subjects > 0 {
            ids.truncate(self.n_pretrain_subjects);
        }
        ids
    }

    /// Learning rate at `it`: linear warmup, then cosine decay.
    pub fn heads(&self) -> Heads {
        Heads {
            prior: self.use_prior,
            retrieval: self.use_retrieval,
            lowlevel: self.use_lowlevel,
        }
    }

    pub fn lr_at(&self, it: usize, total: usize) -> f64 {
        let warm = ((self.warmup_frac * total as f64).round() as usize).max(1);
        if it < warm {
            self.lr * (it + 1) as f64 / warm as f64
        } else {
            let p = (it - warm) as f64 / (total - warm) as f64;
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

/// Frozen-space targets for every trial of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTargets {
    pub tokens: Tensor,
    /// Unit-norm pooled tokens.
    pub retrieval: Tensor,
    pub vae: Tensor,
    pub teacher: Tensor,
}

impl SubjectTargets {
    pub fn compute(world: &WorldSpec, ds: &SubjectDataset) -> Result<Self> {
        let n = ds.n_trials();
        let mut rows: [Vec<f64>; 4] = Default::default();
        for i in 0..n {
            let img = ds.image(i);
            rows[0].extend(world.encode_image(img)?);
            rows[1].extend(world.retrieval_target(img)?);
            rows[2].extend(world.encode_vae(img)?);
            rows[3].extend(world.encode_teacher(img)?);
        }
        let [t, r, v, te] = rows;
        let mk = |d: Vec<f64>| {
            let c = d.len() / n.max(1);
            Tensor::new([n, c], d)
        };
        Ok(SubjectTargets {
            tokens: mk(t)?,
            retrieval: mk(r)?,
            vae: mk(v)?,
            teacher: mk(te)?,
        })
    }
}

/// A normalized dataset with its targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: SubjectDataset,
    pub targets: SubjectTargets,
}

impl Prepared {
    pub fn new(world: &WorldSpec, dataset: SubjectDataset) -> Result<Self> {
        if !dataset.is_normalized() {
            return Err(TrainError::Unnormalized(dataset.subject_id.clone()));
        }
        let targets = SubjectTargets::compute(world, &dataset)?;
        Ok(Prepared { dataset, targets })
    }

    pub fn subject(&self) -> &str {
        &self.dataset.subject_id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub phase: Phase,
    pub prior_l: f64,
    pub contrastive_l: f64,
    pub lowlevel_l: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub iterations_per_epoch: usize,
    pub wall_clock_secs: f64,
    /// Trial indices that entered a gradient step, per subject.
    pub trials_used: BTreeMap<String, BTreeSet<usize>>,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,phase,prior_l,contrastive_l,lowlevel_l,total\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.iteration, e.phase, e.prior_l, e.contrastive_l, e.lowlevel_l, e.total
            ));
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.total)
    }
}

/// One batch: `(dataset index, trial index)` pairs, grouped by subject.
type Batch = Vec<(usize, usize)>;

enum Plan {
    /// Equal per-subject shares in every batch.
    PerSubject { per_subject: usize },
    /// Near-equal chunks of one subject's first `k` sessions.
    Single { batch_size: usize, sessions: usize },
}

fn epoch_batches(data: &[&Prepared], plan: &Plan, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    match *plan {
        Plan::PerSubject { per_subject } => {
            let mut lists = Vec::with_capacity(data.len());
            for (s, p) in data.iter().enumerate() {
                let mut idx = p.dataset.train_indices(p.dataset.n_sessions)?;
                let mut r = rng::stream_indexed(seed, &format!("shuffle/{}", p.subject()), epoch as u64);
                idx.shuffle(&mut r);
                lists.push((s, idx));
            }
            let n_iter = lists.iter().map(|(_, l)| l.len()).min().unwrap_or(0) / per_subject;
            Ok((0..n_iter)
                .map(|j| {
                    lists
                        .iter()
                        .flat_map(|(s, l)| l[j * per_subject..(j + 1) * per_subject].iter().map(|&i| (*s, i)))
                        .collect()
                })
                .collect())
        }
        Plan::Single { batch_size, sessions } => {
            let mut idx = data[0].dataset.train_indices(sessions)?;
            let mut r = rng::stream_indexed(seed, &format!("shuffle/{}", data[0].subject()), epoch as u64);
            idx.shuffle(&mut r);
            let n = idx.len();
            let nb = n.div_ceil(batch_size);
            Ok((0..nb)
                .map(|j| idx[j * n / nb..(j + 1) * n / nb].iter().map(|&i| (0, i)).collect())
                .collect())
        }
    }
}

/// Every constant tensor one training step needs.
pub struct StepInputs {
    pub phase: Phase,
    pub subjects: Vec<String>,
    pub voxels: Vec<Tensor>,
    pub dropout: Vec<Tensor>,
    pub x_t: Tensor,
    pub onehot: Tensor,
    pub tokens: Tensor,
    pub retrieval: Tensor,
    pub q_rows: Tensor,
    pub q_cols: Tensor,
    pub vae: Tensor,
    pub teacher: Tensor,
    pub q_teacher: Tensor,
}

impl StepInputs {
    /// Draws the stochastic parts (mixing, timesteps, noise, dropout) from
    /// `seed`.
    pub fn prepare(
        params: &ModelParams,
        data: &[&Prepared],
        batch: &[(usize, usize)],
        phase: Phase,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let bsz = batch.len();
        if bsz < 2 {
            return Err(TrainError::BatchTooSmall(bsz));
        }
        let mut r = rng::stream(seed, "step");
        let mut subjects = Vec::new();
        let mut voxels = Vec::new();
        let mut dropout = Vec::new();
        let mut lambda = Vec::with_capacity(bsz);
        let mut perm = Vec::with_capacity(bsz);
        let arch = &params.config.arch;
        let mut start = 0;
        while start < bsz {
            let s = batch[start].0;
            let end = start + batch[start..].iter().take_while(|b| b.0 == s).count();
            let rows: Vec<usize> = batch[start..end].iter().map(|b| b.1).collect();
            let x = data[s].dataset.voxels.gather_rows(&rows);
            let n = rows.len();
            if phase == Phase::BiMixCo && n >= 2 {
                let mix = losses::mixco_augment(&x, cfg.mixco_beta, r.gen())?;
                voxels.push(mix.mixed_voxels);
                lambda.extend(mix.lambda);
                perm.extend(mix.perm.iter().map(|p| p + start));
            } else {
                voxels.push(x);
                lambda.extend(std::iter::repeat_n(1.0, n));
                perm.extend(start..end);
            }
            if arch.ridge_variant == RidgeVariant::Mlp {
                let keep = 1.0 - arch.mlp_dropout;
                let mask = (0..n * arch.hidden)
                    .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                dropout.push(Tensor::new([n, arch.hidden], mask)?);
            }
            subjects.push(data[s].subject().to_string());
            start = end;
        }

        let gather = |f: fn(&SubjectTargets) -> &Tensor| -> Tensor {
            let cols = f(&data[batch[0].0].targets).cols();
            let mut d = Vec::with_capacity(bsz * cols);
            for &(s, i) in batch {
                d.extend_from_slice(f(&data[s].targets).row(i));
            }
            Tensor::from_parts(vec![bsz, cols], d)
        };
        let tokens = gather(|t| &t.tokens);
        let retrieval = gather(|t| &t.retrieval);
        let vae = gather(|t| &t.vae);
        let teacher = losses::unit_rows(&gather(|t| &t.teacher));

        let schedule = params.config.schedule();
        let steps = schedule.steps();
        let ts: Vec<usize> = (0..bsz).map(|_| r.gen_range(0..steps)).collect();
        let noise = Tensor::from_parts(tokens.shape().to_vec(), rng::gaussian_vec(&mut r, tokens.len()));
        let x_t = noise_tokens(&schedule, &tokens, &noise, &ts);
        let onehot = timestep_onehot(&ts, steps);

        let (q_rows, q_cols) = match phase {
            Phase::BiMixCo => {
                let q = losses::mixco_targets(&lambda, &perm);
                let qt = q.transpose()?;
                (q, qt)
            }
            Phase::SoftClip => {
                let q = losses::soft_targets(&retrieval, cfg.tau_soft);
                (q.clone(), q)
            }
        };
        let q_teacher = losses::soft_targets(&teacher, cfg.tau_soft);
        Ok(StepInputs {
            phase,
            subjects,
            voxels,
            dropout,
            x_t,
            onehot,
            tokens,
            retrieval,
            q_rows,
            q_cols,
            vae,
            teacher,
            q_teacher,
        })
    }
}

/// The full training graph for one step.
pub struct StepGraph<'a> {
    pub builder: Builder<'a>,
    pub prior: Option<NodeId>,
    pub contrastive: Option<NodeId>,
    pub lowlevel: Option<NodeId>,
    pub total: NodeId,
}

pub fn build_step<'a>(
    params: &'a ModelParams,
    inp: &'a StepInputs,
    cfg: &TrainConfig,
    trainable: Trainable,
) -> Result<StepGraph<'a>> {
    let mut b = Builder::new(params, trainable);
    let mut latents = Vec::with_capacity(inp.subjects.len());
    for (k, s) in inp.subjects.iter().enumerate() {
        let x = b.input(&format!("voxels.{k}"), &inp.voxels[k]);
        let mask = inp.dropout.get(k).map(|m| b.input(&format!("dropout.{k}"), m));
        latents.push(b.ridge(s, x, mask)?);
    }
    let latent = if latents.len() == 1 {
        latents[0]
    } else {
        b.graph.concat(&latents, 0)
    };
    let tokens = b.backbone(latent);
    let bsz = inp.tokens.rows();

    let prior = if cfg.use_prior {
        let x_t = b.input("x_t", &inp.x_t);
        let t = b.input("t", &inp.onehot);
        let target = b.input("target.tokens", &inp.tokens);
        let pred = b.denoiser(x_t, t, tokens);
        Some(b.graph.mse(pred, target))
    } else {
        None
    };
    let contrastive = if cfg.use_retrieval {
        let target = b.input("target.retrieval", &inp.retrieval);
        let qr = b.input("q_rows", &inp.q_rows);
        let qc = b.input("q_cols", &inp.q_cols);
        let emb = b.retrieval(tokens);
        let tau = match inp.phase {
            Phase::BiMixCo => cfg.tau_hard,
            Phase::SoftClip => cfg.tau_soft,
        };
        Some(losses::contrastive_node(&mut b.graph, emb, target, qr, qc, tau))
    } else {
        None
    };
    let lowlevel = if cfg.use_lowlevel {
        let vt = b.input("target.vae", &inp.vae);
        let tt = b.input("target.teacher", &inp.teacher);
        let q = b.input("q_teacher", &inp.q_teacher);
        let (vp, tp) = b.lowlevel(tokens, bsz);
        Some(losses::lowlevel_node(&mut b.graph, vp, vt, tp, tt, q, cfg.tau_soft))
    } else {
        None
    };

    let mut terms = Vec::new();
    terms.extend(prior);
    if let Some(c) = contrastive {
        terms.push(b.graph.scale(c, cfg.weights.alpha1));
    }
    if let Some(l) = lowlevel {
        terms.push(b.graph.scale(l, cfg.weights.alpha2));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = b.graph.add(total, t);
    }
    b.graph.set_output(total);
    Ok(StepGraph {
        builder: b,
        prior,
        contrastive,
        lowlevel,
        total,
    })
}

fn decay_for(name: &str, wd: f64) -> f64 {
    if name.ends_with(".w") {
        wd
    } else {
        0.0
    }
}

fn run_loop(
    params: &mut ModelParams,
    data: &[&Prepared],
    plan: Plan,
    cfg: &TrainConfig,
    trainable: Trainable,
) -> Result<TrainLog> {
    let started = Instant::now();
    let mut opt = AdamWState::new(AdamWHyper {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    })?;
    let per_epoch = epoch_batches(data, &plan, cfg.seed, 0)?.len();
    let total = per_epoch * cfg.epochs;
    let mut log = TrainLog {
        iterations_per_epoch: per_epoch,
        ..Default::default()
    };
    let mut it = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data, &plan, cfg.seed, epoch)? {
            let phase = losses::loss_phase(it, total)?;
            let step_seed = rng::derive_indexed(cfg.seed, "train/step", it as u64);
            let inputs = StepInputs::prepare(params, data, &batch, phase, cfg, step_seed)?;
            let grads = {
                let mut sg = build_step(params, &inputs, cfg, trainable)?;
                let b = &mut sg.builder;
                b.graph.forward(&b.bindings)?;
                let val = |id: Option<NodeId>| id.map_or(0.0, |id| b.graph.value(id, &b.bindings).unwrap().item());
                let (p, c, l) = (val(sg.prior), val(sg.contrastive), val(sg.lowlevel));
                let total_l = losses::total_loss(p, c, l, cfg.weights)?;
                debug_assert_eq!(total_l, val(Some(sg.total)));
                log.entries.push(LogEntry {
                    iteration: it,
                    phase,
                    prior_l: p,
                    contrastive_l: c,
                    lowlevel_l: l,
                    total: total_l,
                });
                let mut g = b.graph.backward(&b.bindings, &Tensor::scalar(1.0))?;
                b.graph
                    .leaves()
                    .into_iter()
                    .filter(|l| l.2)
                    .map(|(name, id, _)| (name.to_string(), g.remove(&id).expect("leaf gradient")))
                    .collect::<BTreeMap<_, _>>()
            };
            for &(s, i) in &batch {
                log.trials_used.entry(data[s].subject().to_string()).or_default().insert(i);
            }
            let lr = cfg.lr_at(it, total);
            opt.step_with(&mut params.tensors, &grads, lr, |n| decay_for(n, cfg.weight_decay))?;
            it += 1;
        }
        if let Some(e) = log.entries.last() {
            log::debug!("epoch {epoch}: total {:.5}", e.total);
        }
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

fn init_seed(cfg: &TrainConfig) -> u64 {
    rng::derive(cfg.seed, "init")
}

/// Trains one shared model on equal shares of every given subject.
pub fn pretrain(world: &WorldConfig, data: &[&Prepared], cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::NoSubjects);
    }
    if let Some(p) = data.iter().find(|p| p.subject() == cfg.held_out_subject) {
        return Err(TrainError::SubjectLeak(p.subject().to_string()));
    }
    let subjects: Vec<(String, usize)> = data
        .iter()
        .map(|p| (p.subject().to_string(), p.dataset.n_voxels))
        .collect();
    let config = ModelConfig::new(world, cfg.arch.clone())?;
    let mut params = ModelParams::init(config, &subjects, init_seed(cfg))?;
    params.heads = cfg.heads();
    let plan = Plan::PerSubject {
        per_subject: cfg.samples_per_subject,
    };
    let log = run_loop(&mut params, data, plan, cfg, Trainable::All)?;
    Ok((params, log))
}

/// Adds a fresh ridge layer for the held-out subject and continues training
/// on its first `k` sessions. Optimizer state starts fresh.
pub fn finetune(
    mut params: ModelParams,
    data: &Prepared,
    k_sessions: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let id = data.subject();
    if params.subjects.contains_key(id) {
        return Err(TrainError::SubjectLeak(id.to_string()));
    }
    data.dataset.train_indices(k_sessions)?;
    params.add_subject(id, data.dataset.n_voxels, init_seed(cfg))?;
    let h = cfg.heads();
    params.heads = Heads {
        prior: params.heads.prior || h.prior,
        retrieval: params.heads.retrieval || h.retrieval,
        lowlevel: params.heads.lowlevel || h.lowlevel,
    };
    let trainable = if cfg.ridge_only {
        Trainable::RidgeOnly
    } else {
        Trainable::All
    };
    let plan = Plan::Single {
        batch_size: cfg.batch_size,
        sessions: k_sessions,
    };
    let log = run_loop(&mut params, &[data], plan, cfg, trainable)?;
    Ok((params, log))
}

/// Single-subject model from random initialization.
pub fn train_from_scratch(
    world: &WorldConfig,
    data: &Prepared,
    k_sessions: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    data.dataset.train_indices(k_sessions)?;
    let config = ModelConfig::new(world, cfg.arch.clone())?;
    let subjects = [(data.subject().to_string(), data.dataset.n_voxels)];
    let mut params = ModelParams::init(config, &subjects, init_seed(cfg))?;
    params.heads = cfg.heads();
    let plan = Plan::Single {
        batch_size: cfg.batch_size,
        sessions: k_sessions,
    };
    let log = run_loop(&mut params, &[data], plan, cfg, Trainable::All)?;
    Ok((params, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverterConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        ConverterConfig {
            steps: 400,
            batch_size: 16,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Fits the token-space converter by MSE from the world's primary token
/// grids to its second encoder's grids on the given images. Returns the
/// per-step loss.
pub fn train_converter(
    params: &mut ModelParams,
    world: &WorldSpec,
    images: &Tensor,
    cfg: &ConverterConfig,
) -> Result<Vec<f64>> {
    let n = images.rows();
    if n < 2 || cfg.batch_size < 1 || !(cfg.lr > 0.0) {
        return Err(TrainError::Config("converter needs >= 2 images, batch_size >= 1 and lr > 0".into()));
    }
    let mut src = Vec::with_capacity(n * world.config.token_dim());
    let mut dst = Vec::with_capacity(n * world.config.token_b_dim());
    for i in 0..n {
        src.extend(world.encode_image(images.row(i))?);
        dst.extend(world.encode_image_b(images.row(i))?);
    }
    let src = Tensor::new([n, world.config.token_dim()], src)?;
    let dst = Tensor::new([n, world.config.token_b_dim()], dst)?;
    let mut opt = AdamWState::new(AdamWHyper {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    })?;
    let mut r = rng::stream(cfg.seed, "converter");
    let bs = cfg.batch_size.min(n);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = rand::seq::index::sample(&mut r, n, bs).into_vec();
        let (x, y) = (src.gather_rows(&idx), dst.gather_rows(&idx));
        let grads = {
            let mut b = Builder::new(params, Trainable::All);
            let (xi, yi) = (b.input("src", &x), b.input("dst", &y));
            let out = b.converter(xi, bs);
            let loss = b.graph.mse(out, yi);
            b.graph.set_output(loss);
            trace.push(b.graph.forward(&b.bindings)?.item());
            let mut g = b.graph.backward(&b.bindings, &Tensor::scalar(1.0))?;
            b.graph
                .leaves()
                .into_iter()
                .filter(|l| l.2)
                .map(|(name, id, _)| (name.to_string(), g.remove(&id).expect("leaf gradient")))
                .collect::<BTreeMap<_, _>>()
        };
        opt.step_with(&mut params.tensors, &grads, cfg.lr, |_| 0.0)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig::default();
        let total = 200;
        let lrs: Vec<f64> = (0..total).map(|i| cfg.lr_at(i, total)).collect();
        assert!((lrs[9] - cfg.lr).abs() < 1e-15);
        assert!(lrs[..10].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| l > 0.0 && l <= cfg.lr));
        assert_eq!(cfg.lr_at(0, 1), cfg.lr);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.use_prior = false;
        cfg.use_retrieval = false;
        cfg.use_lowlevel = false;
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let cfg = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pretrain_subjects_exclude_held_out() {
        let world = WorldConfig::default();
        let cfg = TrainConfig {
            held_out_subject: "s1".into(),
            ..Default::default()
        };
        assert_eq!(cfg.pretrain_subjects(&world), vec!["s0", "s2", "s3"]);
        let all = TrainConfig {
            n_pretrain_subjects: 0,
            ..cfg
        };
        assert_eq!(all.pretrain_subjects(&world).len(), 7);
    }

    #[test]
    fn batches_have_uniform_subject_histograms() {
        let wc = WorldConfig {
            n_subjects: 3,
            n_sessions: 2,
            trials_per_session: 9,
            n_shared_test: 4,
            image_pool: 80,
            ..Default::default()
        };
        let world = crate::world::generate_world(&wc, 1).unwrap();
        let data: Vec<Prepared> = ["s0", "s1", "s2"]
            .iter()
            .map(|s| {
                let mut ds = crate::dataset::generate_dataset(&world, s, 2, 9, 4).unwrap();
                crate::dataset::normalize(&mut ds).unwrap();
                Prepared::new(&world, ds).unwrap()
            })
            .collect();
        let refs: Vec<&Prepared> = data.iter().collect();
        for epoch in 0..3 {
            let batches = epoch_batches(&refs, &Plan::PerSubject { per_subject: 4 }, 7, epoch).unwrap();
            assert_eq!(batches.len(), 4);
            for b in &batches {
                let mut hist = [0; 3];
                b.iter().for_each(|&(s, _)| hist[s] += 1);
                assert_eq!(hist, [4, 4, 4]);
            }
        }
        let single = epoch_batches(&refs[..1], &Plan::Single { batch_size: 4, sessions: 2 }, 7, 0).unwrap();
        let sizes: Vec<usize> = single.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 4, 3, 4, 4]);
    }
}
