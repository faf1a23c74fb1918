//! The trainable decoding model: per-subject ridge layers into a shared
//! latent, a residual MLP backbone mapping to the token grid, a diffusion
//! prior, the retrieval and low-level heads, and the token-space converter.
//!
//! Parameters live in a name-keyed store so that graphs, the optimizer and
//! checkpoints all share one naming scheme. [`Builder`] assembles graph
//! fragments for each submodule on top of that store.

pub mod checkpoint;
pub mod schedule;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Bindings, Graph, NodeId};
use crate::rng;
use crate::tensor::{Tensor, TensorError};
use crate::world::WorldConfig;

pub use schedule::{DiffusionSchedule, ScheduleKind};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("subject `{subject}` expects {expected} voxels, got {got}")]
    VoxelMismatch {
        subject: String,
        expected: usize,
        got: usize,
    },
    #[error("timestep {t} outside [0, {steps})")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RidgeVariant {
    /// One linear layer per subject.
    Linear,
    /// Linear, GELU, dropout, linear per subject.
    Mlp,
}

/// Architecture hyperparameters. None of these widths are fixed by the
/// method itself; they are desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Shared-latent width.
    pub hidden: usize,
    pub n_blocks: usize,
    pub retrieval_hidden: usize,
    pub lowlevel_hidden: usize,
    /// Channels of the upsampler input grid and of each intermediate stage.
    /// The final stage emits the low-level latent channels; each stage
    /// doubles the spatial extent.
    pub upsample_channels: Vec<usize>,
    pub teacher_hidden: usize,
    pub prior_hidden: usize,
    pub prior_blocks: usize,
    pub time_dim: usize,
    pub prior_steps: usize,
    pub schedule: ScheduleKind,
    pub ridge_variant: RidgeVariant,
    pub mlp_dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: 256,
            n_blocks: 4,
            retrieval_hidden: 256,
            lowlevel_hidden: 128,
            upsample_channels: vec![32, 16],
            teacher_hidden: 128,
            prior_hidden: 256,
            prior_blocks: 2,
            time_dim: 32,
            prior_steps: 64,
            schedule: ScheduleKind::Cosine,
            ridge_variant: RidgeVariant::Linear,
            mlp_dropout: 0.5,
        }
    }
}

/// Architecture plus the frozen-space dimensions it must match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub n_tokens: usize,
    pub d_token: usize,
    pub vae_height: usize,
    pub vae_width: usize,
    pub vae_channels: usize,
    pub d_teacher: usize,
    pub m_tokens: usize,
    pub d_token_b: usize,
}

impl ModelConfig {
    pub fn new(world: &WorldConfig, arch: ArchConfig) -> Result<Self> {
        let cfg = ModelConfig {
            arch,
            n_tokens: world.n_tokens,
            d_token: world.d_token,
            vae_height: world.vae_height,
            vae_width: world.vae_width,
            vae_channels: world.vae_channels,
            d_teacher: world.d_teacher,
            m_tokens: world.m_tokens,
            d_token_b: world.d_token_b,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let widths = [
            a.hidden,
            a.retrieval_hidden,
            a.lowlevel_hidden,
            a.teacher_hidden,
            a.prior_hidden,
            a.time_dim,
            a.prior_steps,
        ];
        if widths.contains(&0) {
            return bad("all widths and prior_steps must be positive");
        }
        if a.upsample_channels.is_empty() || a.upsample_channels.contains(&0) {
            return bad("upsample_channels must be non-empty and positive");
        }
        let f = 1usize << a.upsample_channels.len();
        if !self.vae_height.is_multiple_of(f) || !self.vae_width.is_multiple_of(f) {
            return bad("low-level grid not divisible by the upsampler factor");
        }
        if !(0.0..1.0).contains(&a.mlp_dropout) {
            return bad("mlp_dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.n_tokens * self.d_token
    }

    /// Retrieval embedding width; matches the pooled token target.
    pub fn d_retr(&self) -> usize {
        self.d_token
    }

    pub fn vae_dim(&self) -> usize {
        self.vae_height * self.vae_width * self.vae_channels
    }

    /// Spatial extent `(h, w)` of upsampler stage `k` input, `k = 0` is the
    /// projector output grid.
    pub fn grid(&self, k: usize) -> (usize, usize) {
        let n = self.arch.upsample_channels.len();
        (self.vae_height >> (n - k), self.vae_width >> (n - k))
    }

    /// Channels flowing into and out of each upsampler stage.
    pub fn stage_channels(&self) -> Vec<(usize, usize)> {
        let ch = &self.arch.upsample_channels;
        (0..ch.len())
            .map(|k| (ch[k], ch.get(k + 1).copied().unwrap_or(self.vae_channels)))
            .collect()
    }

    pub fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule::new(self.arch.schedule, self.arch.prior_steps)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
    Zeros,
    Ones,
}

/// `(name, shape, init)` for every parameter of a model.
fn param_specs(cfg: &ModelConfig, subjects: &BTreeMap<String, usize>) -> Vec<(String, Vec<usize>, Init)> {
    let a = &cfg.arch;
    let mut out = Vec::new();
    let mut linear = |prefix: &str, o: usize, i: usize| {
        out.push((format!("{prefix}.w"), vec![o, i], Init::FanIn(i)));
        out.push((format!("{prefix}.b"), vec![o], Init::Zeros));
    };
    let (h, td) = (a.hidden, cfg.token_dim());
    for (s, &nv) in subjects {
        linear(&format!("ridge.{s}"), h, nv);
        if a.ridge_variant == RidgeVariant::Mlp {
            linear(&format!("ridge.{s}.out"), h, h);
        }
    }
    for i in 0..a.n_blocks {
        linear(&format!("backbone.{i}.fc1"), h, h);
        linear(&format!("backbone.{i}.fc2"), h, h);
    }
    linear("to_tokens", td, h);
    linear("retr.fc1", a.retrieval_hidden, td);
    linear("retr.fc2", cfg.d_retr(), a.retrieval_hidden);
    let (g0h, g0w) = cfg.grid(0);
    linear("low.proj1", a.lowlevel_hidden, td);
    linear("low.proj2", g0h * g0w * a.upsample_channels[0], a.lowlevel_hidden);
    for (k, (ci, co)) in cfg.stage_channels().into_iter().enumerate() {
        linear(&format!("low.up{k}"), co, ci);
    }
    linear("low.teacher1", a.teacher_hidden, td);
    linear("low.teacher2", cfg.d_teacher, a.teacher_hidden);
    let ph = a.prior_hidden;
    linear("prior.in_x", ph, td);
    linear("prior.cond1", ph, td);
    linear("prior.cond2", ph, ph);
    linear("prior.in_t", ph, a.time_dim);
    for i in 0..a.prior_blocks {
        linear(&format!("prior.{i}.fc1"), ph, ph);
        linear(&format!("prior.{i}.fc2"), ph, ph);
    }
    linear("prior.out", td, ph);
    linear("conv.l1", cfg.m_tokens, cfg.n_tokens);
    linear("conv.l2", cfg.d_token_b, cfg.d_token);

    for i in 0..a.n_blocks {
        out.push((format!("backbone.{i}.ln.g"), vec![h], Init::Ones));
        out.push((format!("backbone.{i}.ln.b"), vec![h], Init::Zeros));
    }
    for i in 0..a.prior_blocks {
        out.push((format!("prior.{i}.ln.g"), vec![ph], Init::Ones));
        out.push((format!("prior.{i}.ln.b"), vec![ph], Init::Zeros));
    }
    out.push(("prior.out_ln.g".into(), vec![ph], Init::Ones));
    out.push(("prior.out_ln.b".into(), vec![ph], Init::Zeros));
    out.push(("prior.time".into(), vec![a.prior_steps, a.time_dim], Init::FanIn(1)));
    out
}

fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::full(shape.to_vec(), 1.0),
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut r = rng::stream(seed, &format!("init/{name}"));
            let n = shape.iter().product();
            let data = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
    }
}

/// Fixed nearest-neighbour doubling maps, one per upsampler stage.
fn upsample_matrices(cfg: &ModelConfig) -> Vec<Tensor> {
    cfg.stage_channels()
        .iter()
        .enumerate()
        .map(|(k, &(c, _))| {
            let (h, w) = cfg.grid(k);
            let (h2, w2) = (2 * h, 2 * w);
            let mut u = Tensor::zeros([h * w * c, h2 * w2 * c]);
            let cols = h2 * w2 * c;
            for y in 0..h2 {
                for x in 0..w2 {
                    for ch in 0..c {
                        let src = ((y / 2) * w + x / 2) * c + ch;
                        let dst = (y * w2 + x) * c + ch;
                        u.data_mut()[src * cols + dst] = 1.0;
                    }
                }
            }
            u
        })
        .collect()
}

/// Which output heads received a training signal. Untrained heads hold
/// their random initialization and are not used at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heads {
    pub prior: bool,
    pub retrieval: bool,
    pub lowlevel: bool,
}

impl Default for Heads {
    fn default() -> Self {
        Heads {
            prior: true,
            retrieval: true,
            lowlevel: true,
        }
    }
}

/// All trainable weights, keyed by name.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Subject id to voxel count; one ridge entry each.
    pub subjects: BTreeMap<String, usize>,
    pub tensors: BTreeMap<String, Tensor>,
    pub heads: Heads,
    upsample: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.subjects == other.subjects
            && self.tensors == other.tensors
            && self.heads == other.heads
    }
}

impl ModelParams {
    pub fn init(config: ModelConfig, subjects: &[(String, usize)], seed: u64) -> Result<Self> {
        config.validate()?;
        let subjects: BTreeMap<String, usize> = subjects.iter().cloned().collect();
        let tensors = param_specs(&config, &subjects)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = init_tensor(seed, &name, &shape, init);
                (name, t)
            })
            .collect();
        let upsample = upsample_matrices(&config);
        Ok(ModelParams {
            config,
            subjects,
            tensors,
            heads: Heads::default(),
            upsample,
        })
    }

    /// Rebuilds a store from loaded tensors, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        subjects: BTreeMap<String, usize>,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config, &subjects);
        if specs.len() != tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &specs {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Checkpoint(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        let upsample = upsample_matrices(&config);
        Ok(ModelParams {
            config,
            subjects,
            tensors,
            heads: Heads::default(),
            upsample,
        })
    }

    /// Adds a freshly initialized ridge layer for a new subject.
    pub fn add_subject(&mut self, id: &str, n_voxels: usize, seed: u64) -> Result<()> {
        if self.subjects.contains_key(id) {
            return Err(ModelError::Config(format!("subject `{id}` already has a ridge layer")));
        }
        let one = BTreeMap::from([(id.to_string(), n_voxels)]);
        for (name, shape, init) in param_specs(&self.config, &one) {
            if name.starts_with("ridge.") {
                let t = init_tensor(seed, &name, &shape, init);
                self.tensors.insert(name, t);
            }
        }
        self.subjects.insert(id.to_string(), n_voxels);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn n_voxels(&self, subject: &str) -> Result<usize> {
        self.subjects
            .get(subject)
            .copied()
            .ok_or_else(|| ModelError::UnknownSubject(subject.to_string()))
    }
}

/// Which parameters receive gradients in a built graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    RidgeOnly,
    Nothing,
}

/// Assembles model fragments into one graph, binding parameters as it goes.
pub struct Builder<'a> {
    pub graph: Graph,
    pub bindings: Bindings<'a>,
    params: &'a ModelParams,
    trainable: Trainable,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a ModelParams, trainable: Trainable) -> Self {
        Builder {
            graph: Graph::new(),
            bindings: Bindings::new(),
            params,
            trainable,
        }
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(id) = self.graph.leaf_id(name) {
            return id;
        }
        let grad = match self.trainable {
            Trainable::All => true,
            Trainable::RidgeOnly => name.starts_with("ridge."),
            Trainable::Nothing => false,
        };
        let id = self.graph.leaf(name, grad);
        self.bindings.bind(id, self.params.get(name));
        id
    }

    /// Binds a data tensor under a fresh leaf.
    pub fn input(&mut self, name: &str, value: &'a Tensor) -> NodeId {
        debug_assert!(self.graph.leaf_id(name).is_none(), "duplicate input {name}");
        let id = self.graph.input(name);
        self.bindings.bind(id, value);
        id
    }

    fn linear(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.graph.linear(x, w, b)
    }

    fn mlp2(&mut self, first: &str, second: &str, x: NodeId) -> NodeId {
        let h = self.linear(first, x);
        let h = self.graph.gelu(h);
        self.linear(second, h)
    }

    /// Subject-specific map from voxels `[B, n_voxels]` to the shared latent
    /// `[B, hidden]`. `dropout` is a pre-scaled keep mask for the MLP variant.
    pub fn ridge(&mut self, subject: &str, voxels: NodeId, dropout: Option<NodeId>) -> Result<NodeId> {
        self.params.n_voxels(subject)?;
        let prefix = format!("ridge.{subject}");
        let h = self.linear(&prefix, voxels);
        Ok(match self.params.config.arch.ridge_variant {
            RidgeVariant::Linear => h,
            RidgeVariant::Mlp => {
                let mut h = self.graph.gelu(h);
                if let Some(mask) = dropout {
                    h = self.graph.mul(h, mask);
                }
                self.linear(&format!("{prefix}.out"), h)
            }
        })
    }

    /// Residual MLP blocks, then the linear map to flattened tokens `[B, token_dim]`.
    pub fn backbone(&mut self, latent: NodeId) -> NodeId {
        let mut x = latent;
        for i in 0..self.params.config.arch.n_blocks {
            let g = self.param(&format!("backbone.{i}.ln.g"));
            let b = self.param(&format!("backbone.{i}.ln.b"));
            let h = self.graph.layernorm(x, g, b);
            let h = self.mlp2(&format!("backbone.{i}.fc1"), &format!("backbone.{i}.fc2"), h);
            x = self.graph.add(x, h);
        }
        self.linear("to_tokens", x)
    }

    /// Retrieval embedding before normalization `[B, d_retr]`.
    pub fn retrieval(&mut self, tokens: NodeId) -> NodeId {
        self.mlp2("retr.fc1", "retr.fc2", tokens)
    }

    /// Low-level latent `[B, vae_dim]` and teacher embedding `[B, d_teacher]`.
    pub fn lowlevel(&mut self, tokens: NodeId, batch: usize) -> (NodeId, NodeId) {
        let cfg = &self.params.config;
        let mut x = self.mlp2("low.proj1", "low.proj2", tokens);
        let stages = cfg.stage_channels();
        let n = stages.len();
        for (k, (ci, co)) in stages.into_iter().enumerate() {
            let (h, w) = cfg.grid(k);
            let up_id = self.graph.input(&format!("low.upsample{k}"));
            self.bindings.bind(up_id, &self.params.upsample[k]);
            x = self.graph.matmul(x, up_id);
            // Per-position linear over channels.
            let cells = 4 * h * w;
            x = self.graph.reshape(x, [batch * cells, ci]);
            x = self.linear(&format!("low.up{k}"), x);
            if k + 1 < n {
                x = self.graph.gelu(x);
            }
            x = self.graph.reshape(x, [batch, cells * co]);
        }
        let teacher = self.mlp2("low.teacher1", "low.teacher2", tokens);
        (x, teacher)
    }

    /// Clean-token prediction from noisy tokens `x_t`, one-hot timesteps
    /// `[B, steps]` and conditioning tokens.
    pub fn denoiser(&mut self, x_t: NodeId, t_onehot: NodeId, cond: NodeId) -> NodeId {
        let table = self.param("prior.time");
        let temb = self.graph.matmul(t_onehot, table);
        let hx = self.linear("prior.in_x", x_t);
        let hc = self.mlp2("prior.cond1", "prior.cond2", cond);
        let ht = self.linear("prior.in_t", temb);
        let h = self.graph.add(hx, hc);
        let mut h = self.graph.add(h, ht);
        for i in 0..self.params.config.arch.prior_blocks {
            let g = self.param(&format!("prior.{i}.ln.g"));
            let b = self.param(&format!("prior.{i}.ln.b"));
            let r = self.graph.layernorm(h, g, b);
            let r = self.mlp2(&format!("prior.{i}.fc1"), &format!("prior.{i}.fc2"), r);
            h = self.graph.add(h, r);
        }
        let g = self.param("prior.out_ln.g");
        let b = self.param("prior.out_ln.b");
        let h = self.graph.layernorm(h, g, b);
        self.linear("prior.out", h)
    }

    /// Factorized token-space converter on flattened `[B, n_tokens*d_token]`:
    /// a linear map over the token axis, then one over the embedding axis.
    pub fn converter(&mut self, tokens: NodeId, batch: usize) -> NodeId {
        let cfg = &self.params.config;
        let (n, d) = (cfg.n_tokens, cfg.d_token);
        let mut outs = Vec::with_capacity(batch);
        for i in 0..batch {
            let row = self.graph.slice(tokens, 0, i, 1);
            let grid = self.graph.reshape(row, [n, d]);
            let by_token = self.graph.transpose(grid);
            let mixed = self.linear("conv.l1", by_token); // [d, m]
            let mixed = self.graph.transpose(mixed); // [m, d]
            let out = self.linear("conv.l2", mixed); // [m, d_b]
            outs.push(self.graph.reshape(out, [1, cfg.m_tokens * cfg.d_token_b]));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            self.graph.concat(&outs, 0)
        }
    }
}

fn row_tensor(x: &[f64]) -> Tensor {
    Tensor::from_parts(vec![1, x.len()], x.to_vec())
}

/// Shared latent for one voxel vector.
pub fn ridge_forward(params: &ModelParams, subject: &str, voxels: &[f64]) -> Result<Vec<f64>> {
    let nv = params.n_voxels(subject)?;
    if voxels.len() != nv {
        return Err(ModelError::VoxelMismatch {
            subject: subject.to_string(),
            expected: nv,
            got: voxels.len(),
        });
    }
    let x = row_tensor(voxels);
    let mut b = Builder::new(params, Trainable::Nothing);
    let xi = b.input("voxels", &x);
    let out = b.ridge(subject, xi, None)?;
    b.graph.set_output(out);
    Ok(b.graph.forward(&b.bindings)?.into_data())
}

/// Backbone tokens `[n_tokens, d_token]` for one shared latent.
pub fn backbone_forward(params: &ModelParams, latent: &[f64]) -> Result<Tensor> {
    let cfg = &params.config;
    if latent.len() != cfg.arch.hidden {
        return Err(TensorError::ShapeMismatch {
            op: "backbone_forward",
            lhs: vec![cfg.arch.hidden],
            rhs: vec![latent.len()],
        }
        .into());
    }
    let x = row_tensor(latent);
    let mut b = Builder::new(params, Trainable::Nothing);
    let xi = b.input("latent", &x);
    let out = b.backbone(xi);
    b.graph.set_output(out);
    Ok(b.graph.forward(&b.bindings)?.reshaped([cfg.n_tokens, cfg.d_token])?)
}

fn check_tokens(params: &ModelParams, t: &Tensor) -> Result<()> {
    let td = params.config.token_dim();
    if t.cols() != td {
        return Err(TensorError::ShapeMismatch {
            op: "tokens",
            lhs: vec![td],
            rhs: t.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// One-hot rows for the given timesteps.
pub fn timestep_onehot(ts: &[usize], steps: usize) -> Tensor {
    let mut t = Tensor::zeros([ts.len(), steps]);
    for (i, &s) in ts.iter().enumerate() {
        t.data_mut()[i * steps + s] = 1.0;
    }
    t
}

/// `sqrt(ab) x0 + sqrt(1 - ab) eps`, row-wise with per-row timesteps.
pub fn noise_tokens(schedule: &DiffusionSchedule, x0: &Tensor, noise: &Tensor, ts: &[usize]) -> Tensor {
    let c = x0.cols();
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (o, e) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&noise.data()[i * c..(i + 1) * c]) {
            *o = s * *o + n * e;
        }
    }
    out
}

/// Prior loss at a fixed timestep: noise the target, predict it back, MSE.
/// Tokens are flattened rows `[B, token_dim]`.
pub fn prior_train_step(
    params: &ModelParams,
    backbone_tokens: &Tensor,
    target_tokens: &Tensor,
    t: usize,
    noise_seed: u64,
) -> Result<f64> {
    let schedule = params.config.schedule();
    if t >= schedule.steps() {
        return Err(ModelError::TimestepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    check_tokens(params, backbone_tokens)?;
    check_tokens(params, target_tokens)?;
    let bsz = target_tokens.rows();
    let mut r = rng::stream(noise_seed, "prior/noise");
    let noise = Tensor::from_parts(target_tokens.shape().to_vec(), rng::gaussian_vec(&mut r, target_tokens.len()));
    let ts = vec![t; bsz];
    let x_t = noise_tokens(&schedule, target_tokens, &noise, &ts);
    let onehot = timestep_onehot(&ts, schedule.steps());
    let mut b = Builder::new(params, Trainable::Nothing);
    let xi = b.input("x_t", &x_t);
    let ti = b.input("t", &onehot);
    let ci = b.input("cond", backbone_tokens);
    let target = b.input("target", target_tokens);
    let pred = b.denoiser(xi, ti, ci);
    let loss = b.graph.mse(pred, target);
    b.graph.set_output(loss);
    Ok(b.graph.forward(&b.bindings)?.item())
}

/// Ancestral sampling with clean-token prediction, from pure noise through
/// every timestep. Rows of `cond` are independent samples.
pub fn prior_sample(params: &ModelParams, cond: &Tensor, seed: u64) -> Result<Tensor> {
    check_tokens(params, cond)?;
    let schedule = params.config.schedule();
    let steps = schedule.steps();
    let bsz = cond.rows();
    let mut r = rng::stream(seed, "prior/sample");
    let mut x = Tensor::from_parts(cond.shape().to_vec(), rng::gaussian_vec(&mut r, cond.len()));
    for t in (0..steps).rev() {
        let onehot = timestep_onehot(&vec![t; bsz], steps);
        let x0 = {
            let mut b = Builder::new(params, Trainable::Nothing);
            let xi = b.input("x_t", &x);
            let ti = b.input("t", &onehot);
            let ci = b.input("cond", cond);
            let pred = b.denoiser(xi, ti, ci);
            b.graph.set_output(pred);
            b.graph.forward(&b.bindings)?
        };
        if t == 0 {
            return Ok(x0);
        }
        let (c0, ct, var) = schedule.posterior(t);
        let sd = var.sqrt();
        for (xv, x0v) in x.data_mut().iter_mut().zip(x0.data()) {
            *xv = c0 * x0v + ct * *xv + sd * rng::gaussian(&mut r);
        }
    }
    unreachable!("schedule has at least one step")
}

pub const NORM_GUARD: f64 = 1e-12;

/// L2-normalizes in place; zero vectors become the first basis vector.
/// Returns `true` when the guard fired.
pub fn normalize_guarded(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_GUARD {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
        true
    } else {
        v.iter_mut().for_each(|x| *x /= n);
        false
    }
}

/// Unit-norm retrieval embeddings for token rows, plus a per-row flag for
/// degenerate (zero) projections.
pub fn retrieval_project(params: &ModelParams, tokens: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    check_tokens(params, tokens)?;
    let mut b = Builder::new(params, Trainable::Nothing);
    let ti = b.input("tokens", tokens);
    let out = b.retrieval(ti);
    b.graph.set_output(out);
    let mut emb = b.graph.forward(&b.bindings)?;
    let flags = (0..emb.rows()).map(|i| normalize_guarded(emb.row_mut(i))).collect();
    Ok((emb, flags))
}

/// Low-level latent and teacher predictions for token rows.
pub fn lowlevel_forward(params: &ModelParams, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
    check_tokens(params, tokens)?;
    let mut b = Builder::new(params, Trainable::Nothing);
    let ti = b.input("tokens", tokens);
    let (vae, teacher) = b.lowlevel(ti, tokens.rows());
    b.graph.set_output(teacher);
    b.graph.forward(&b.bindings)?;
    let v = b.graph.value(vae, &b.bindings).expect("evaluated").clone();
    let t = b.graph.value(teacher, &b.bindings).expect("evaluated").clone();
    Ok((v, t))
}

/// Converts one `[n_tokens, d_token]` grid to `[m_tokens, d_token_b]`.
pub fn converter_forward(params: &ModelParams, tokens: &Tensor) -> Result<Tensor> {
    let cfg = &params.config;
    if tokens.shape() != [cfg.n_tokens, cfg.d_token] {
        return Err(TensorError::ShapeMismatch {
            op: "converter_forward",
            lhs: vec![cfg.n_tokens, cfg.d_token],
            rhs: tokens.shape().to_vec(),
        }
        .into());
    }
    let flat = tokens.clone().reshaped([1, cfg.token_dim()])?;
    let mut b = Builder::new(params, Trainable::Nothing);
    let ti = b.input("tokens", &flat);
    let out = b.converter(ti, 1);
    b.graph.set_output(out);
    Ok(b.graph.forward(&b.bindings)?.reshaped([cfg.m_tokens, cfg.d_token_b])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        let world = WorldConfig {
            height: 4,
            width: 4,
            channels: 2,
            n_tokens: 4,
            d_token: 8,
            vae_height: 4,
            vae_width: 4,
            vae_channels: 2,
            d_teacher: 5,
            m_tokens: 2,
            d_token_b: 3,
            ..Default::default()
        };
        let arch = ArchConfig {
            hidden: 6,
            n_blocks: 2,
            retrieval_hidden: 5,
            lowlevel_hidden: 4,
            upsample_channels: vec![3, 2],
            teacher_hidden: 4,
            prior_hidden: 6,
            prior_blocks: 1,
            time_dim: 3,
            prior_steps: 4,
            ..Default::default()
        };
        ModelConfig::new(&world, arch).unwrap()
    }

    fn tiny() -> ModelParams {
        ModelParams::init(tiny_config(), &[("a".into(), 7), ("b".into(), 9)], 3).unwrap()
    }

    fn zero_all(p: &mut ModelParams) {
        for t in p.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn ridge_zero_and_subject_specific() {
        let mut p = tiny();
        let v: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
        let la = ridge_forward(&p, "a", &v).unwrap();
        assert_eq!(la.len(), 6);
        // Same voxel content through a different subject's weights.
        p.add_subject("c", 7, 99).unwrap();
        assert_ne!(la, ridge_forward(&p, "c", &v).unwrap());
        assert!(matches!(ridge_forward(&p, "zz", &v), Err(ModelError::UnknownSubject(_))));
        assert!(matches!(ridge_forward(&p, "b", &v), Err(ModelError::VoxelMismatch { .. })));
        zero_all(&mut p);
        assert!(ridge_forward(&p, "a", &v).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backbone_zero_and_residual_identity() {
        let mut p = tiny();
        let latent = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25];
        let out = backbone_forward(&p, &latent).unwrap();
        assert_eq!(out.shape(), &[4, 8]);

        // With inner layers zeroed each block is the identity, so the output
        // is just the token map applied to the latent.
        for (name, t) in p.tensors.iter_mut() {
            if name.starts_with("backbone.") && name.contains(".fc") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let out = backbone_forward(&p, &latent).unwrap();
        let w = p.get("to_tokens.w");
        let b = p.get("to_tokens.b");
        for i in 0..32 {
            let expect: f64 = w.row(i).iter().zip(&latent).map(|(a, x)| a * x).sum::<f64>() + b.data()[i];
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
        zero_all(&mut p);
        assert!(backbone_forward(&p, &latent).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn retrieval_is_unit_norm_with_guard() {
        let mut p = tiny();
        let tokens = Tensor::new([2, 32], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (emb, flags) = retrieval_project(&p, &tokens).unwrap();
        assert_eq!(emb.shape(), &[2, 8]);
        for i in 0..2 {
            let n: f64 = emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(flags, vec![false, false]);
        zero_all(&mut p);
        let (emb, flags) = retrieval_project(&p, &Tensor::zeros([1, 32])).unwrap();
        assert_eq!(flags, vec![true]);
        assert_eq!(emb.row(0)[0], 1.0);
    }

    #[test]
    fn lowlevel_shapes_and_zero() {
        let mut p = tiny();
        let tokens = Tensor::full([3, 32], 0.3);
        let (vae, teacher) = lowlevel_forward(&p, &tokens).unwrap();
        assert_eq!(vae.shape(), &[3, 4 * 4 * 2]);
        assert_eq!(teacher.shape(), &[3, 5]);
        assert_eq!(p.config.grid(0), (1, 1));
        assert_eq!(p.config.grid(1), (2, 2));
        zero_all(&mut p);
        let (vae, teacher) = lowlevel_forward(&p, &tokens).unwrap();
        assert!(vae.data().iter().chain(teacher.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn upsampler_doubles_by_nearest_neighbour() {
        let p = tiny();
        // Stage 0 maps a 1x1x3 grid to 2x2x3: every cell copies the source.
        let u = &p.upsample[0];
        assert_eq!(u.shape(), &[3, 12]);
        for cell in 0..4 {
            for ch in 0..3 {
                assert_eq!(u.data()[ch * 12 + cell * 3 + ch], 1.0);
            }
        }
    }

    #[test]
    fn converter_identity_and_zero() {
        let cfg = tiny_config();
        let mut square = cfg.clone();
        square.m_tokens = square.n_tokens;
        square.d_token_b = square.d_token;
        let mut p = ModelParams::init(square, &[], 1).unwrap();
        *p.get_mut("conv.l1.w") = Tensor::eye(4);
        *p.get_mut("conv.l2.w") = Tensor::eye(8);
        p.get_mut("conv.l1.b").data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.get_mut("conv.l2.b").data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::new([4, 8], (0..32).map(|i| i as f64 - 3.0).collect()).unwrap();
        assert_eq!(converter_forward(&p, &x).unwrap(), x);
        assert!(converter_forward(&p, &Tensor::zeros([4, 8])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(converter_forward(&p, &Tensor::zeros([8, 4])).is_err());
    }

    #[test]
    fn prior_step_validates_timestep_and_sampling_is_seeded() {
        let p = tiny();
        let cond = Tensor::full([2, 32], 0.1);
        assert!(matches!(
            prior_train_step(&p, &cond, &cond, 4, 0),
            Err(ModelError::TimestepOutOfRange { t: 4, steps: 4 })
        ));
        assert!(prior_train_step(&p, &cond, &cond, 3, 0).unwrap() > 0.0);
        let a = prior_sample(&p, &cond, 5).unwrap();
        assert_eq!(a, prior_sample(&p, &cond, 5).unwrap());
        assert_ne!(a, prior_sample(&p, &cond, 6).unwrap());
        assert_eq!(a.shape(), &[2, 32]);
    }

    #[test]
    fn single_step_prior_is_one_denoiser_call() {
        let mut cfg = tiny_config();
        cfg.arch.prior_steps = 1;
        let p = ModelParams::init(cfg, &[], 2).unwrap();
        let cond = Tensor::full([1, 32], -0.2);
        let sample = prior_sample(&p, &cond, 8).unwrap();
        // Reproduce: draw the same starting noise and run the denoiser once.
        let mut r = rng::stream(8, "prior/sample");
        let x = Tensor::new([1, 32], rng::gaussian_vec(&mut r, 32)).unwrap();
        let onehot = timestep_onehot(&[0], 1);
        let mut b = Builder::new(&p, Trainable::Nothing);
        let (xi, ti, ci) = (b.input("x", &x), b.input("t", &onehot), b.input("c", &cond));
        let out = b.denoiser(xi, ti, ci);
        b.graph.set_output(out);
        assert_eq!(b.graph.forward(&b.bindings).unwrap(), sample);
    }
}
