//! Component ablations: train and evaluate with submodules switched off,
//! or with the MLP voxel mapping in place of the linear one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::{evaluate, EncodingModel, EvalConfig, EvalError, EvalReport, Result};
use crate::model::RidgeVariant;
use crate::train::{self, Prepared, TrainConfig, TrainError};
use crate::world::WorldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Prior,
    PriorLow,
    PriorRet,
    Ret,
    RetLow,
    All,
    /// All components, MLP-with-dropout voxel mapping.
    MlpRidge,
}

impl Variant {
    /// The six component combinations.
    pub const COMPONENTS: [Variant; 6] = [
        Variant::Prior,
        Variant::PriorLow,
        Variant::PriorRet,
        Variant::Ret,
        Variant::RetLow,
        Variant::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Prior => "prior",
            Variant::PriorLow => "prior+low",
            Variant::PriorRet => "prior+ret",
            Variant::Ret => "ret",
            Variant::RetLow => "ret+low",
            Variant::All => "all",
            Variant::MlpRidge => "mlp",
        }
    }

    /// `(prior, retrieval, lowlevel)`.
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            Variant::Prior => (true, false, false),
            Variant::PriorLow => (true, false, true),
            Variant::PriorRet => (true, true, false),
            Variant::Ret => (false, true, false),
            Variant::RetLow => (false, true, true),
            Variant::All | Variant::MlpRidge => (true, true, true),
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        (cfg.use_prior, cfg.use_retrieval, cfg.use_lowlevel) = self.components();
        cfg.arch.ridge_variant = match self {
            Variant::MlpRidge => RidgeVariant::Mlp,
            _ => RidgeVariant::Linear,
        };
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::COMPONENTS
            .into_iter()
            .chain([Variant::MlpRidge])
            .find(|v| v.name() == s)
            .ok_or_else(|| EvalError::Train(TrainError::Config(format!("unknown ablation variant `{s}`"))))
    }
}

/// One from-scratch run on the first `k` sessions plus evaluation per
/// variant, all sharing `cfg.seed`.
pub fn ablation_run(
    world: &WorldSpec,
    data: &Prepared,
    k: usize,
    variants: &[Variant],
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    enc: &EncodingModel,
) -> Result<BTreeMap<Variant, EvalReport>> {
    variants
        .par_iter()
        .map(|&v| {
            let (params, _) = train::train_from_scratch(&world.config, data, k, &v.apply(cfg))?;
            Ok((v, evaluate(&params, world, &data.dataset, enc, eval_cfg)?))
        })
        .collect()
}
