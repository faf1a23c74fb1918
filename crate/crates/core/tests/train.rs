//! Training loop contracts on a small world.

use std::sync::OnceLock;

use mindalign_core::dataset::{generate_dataset, normalize};
use mindalign_core::losses::{total_loss, Phase};
use mindalign_core::model::{ArchConfig, ModelParams};
use mindalign_core::train::{finetune, pretrain, train_from_scratch, Prepared, TrainConfig, TrainError};
use mindalign_core::world::{generate_world, WorldConfig, WorldSpec};

fn world() -> &'static WorldSpec {
    static W: OnceLock<WorldSpec> = OnceLock::new();
    W.get_or_init(|| {
        let wc = WorldConfig {
            height: 8,
            width: 8,
            channels: 2,
            n_tokens: 4,
            d_token: 40,
            vae_height: 4,
            vae_width: 4,
            vae_channels: 2,
            d_teacher: 8,
            n_subjects: 4,
            voxels_min: 30,
            voxels_max: 40,
            n_sessions: 4,
            trials_per_session: 10,
            n_shared_test: 8,
            image_pool: 216,
            m_tokens: 2,
            d_token_b: 8,
            ..Default::default()
        };
        generate_world(&wc, 5).unwrap()
    })
}

fn prepared(subject: &str) -> Prepared {
    let w = world();
    let mut ds = generate_dataset(w, subject, 4, 10, 9).unwrap();
    normalize(&mut ds).unwrap();
    Prepared::new(w, ds).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 6,
        samples_per_subject: 2,
        arch: ArchConfig {
            hidden: 16,
            n_blocks: 1,
            retrieval_hidden: 12,
            lowlevel_hidden: 8,
            upsample_channels: vec![4, 3],
            teacher_hidden: 8,
            prior_hidden: 16,
            prior_blocks: 1,
            time_dim: 4,
            prior_steps: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn scratch_log_shape_and_recomposition() {
    let data = prepared("s0");
    let c = cfg();
    let (_, log) = train_from_scratch(&world().config, &data, 2, &c).unwrap();
    // 20 trials in chunks of at most 6.
    assert_eq!(log.iterations_per_epoch, 4);
    assert_eq!(log.entries.len(), c.epochs * log.iterations_per_epoch);
    let n_mix = log.entries.iter().filter(|e| e.phase == Phase::BiMixCo).count();
    assert_eq!(n_mix, log.entries.len() / 3);
    for e in &log.entries {
        assert_eq!(e.total, total_loss(e.prior_l, e.contrastive_l, e.lowlevel_l, c.weights).unwrap());
        assert!(e.total.is_finite());
    }
    let csv = log.to_csv();
    assert!(csv.starts_with("iteration,phase,prior_l,contrastive_l,lowlevel_l,total\n"));
    assert_eq!(csv.lines().count(), 1 + log.entries.len());
}

#[test]
fn session_budget_and_held_out_hygiene() {
    let data = prepared("s0");
    let c = TrainConfig { epochs: 1, ..cfg() };
    let (_, log) = train_from_scratch(&world().config, &data, 1, &c).unwrap();
    let used = &log.trials_used["s0"];
    assert_eq!(used.len(), 10);
    let allowed = data.dataset.train_indices(1).unwrap();
    assert!(used.iter().all(|i| allowed.contains(i)));
    let test = data.dataset.test_indices();
    assert!(test.iter().all(|i| !used.contains(i)));
    assert!(matches!(
        train_from_scratch(&world().config, &data, 5, &c),
        Err(TrainError::Dataset(_))
    ));
}

#[test]
fn default_world_single_session_has_forty_trials() {
    let wc = WorldConfig::default();
    let w = generate_world(&wc, 2).unwrap();
    let ds = generate_dataset(&w, "s3", 8, 40, 1).unwrap();
    assert_eq!(ds.train_indices(1).unwrap().len(), 40);
    assert_eq!(ds.train_indices(8).unwrap().len(), 320);
}

#[test]
fn pretraining_uses_equal_shares_and_rejects_leaks() {
    let c = TrainConfig { epochs: 1, ..cfg() };
    let subs: Vec<Prepared> = c.pretrain_subjects(&world().config).iter().map(|s| prepared(s)).collect();
    let refs: Vec<&Prepared> = subs.iter().collect();
    let (params, log) = pretrain(&world().config, &refs, &c).unwrap();
    assert_eq!(params.subjects.len(), 3);
    // 40 trials per subject at 2 per batch.
    assert_eq!(log.iterations_per_epoch, 20);
    for s in &subs {
        assert_eq!(log.trials_used[s.subject()].len(), 40);
    }
    let held = prepared("s0");
    let leaked = [&held, &subs[0]];
    assert!(matches!(pretrain(&world().config, &leaked, &c), Err(TrainError::SubjectLeak(s)) if s == "s0"));
    assert!(matches!(finetune(params, &subs[1], 1, &c), Err(TrainError::SubjectLeak(_))));
    assert!(matches!(pretrain(&world().config, &[], &c), Err(TrainError::NoSubjects)));
}

#[test]
fn runs_are_deterministic() {
    let data = prepared("s0");
    let c = cfg();
    let (a, la) = train_from_scratch(&world().config, &data, 1, &c).unwrap();
    let (b, lb) = train_from_scratch(&world().config, &data, 1, &c).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.entries, lb.entries);
    let (d, _) = train_from_scratch(&world().config, &data, 1, &TrainConfig { seed: 1, ..c }).unwrap();
    assert_ne!(a, d);
}

#[test]
fn finetune_after_empty_pretraining_matches_scratch() {
    let c = cfg();
    let others: Vec<Prepared> = ["s1", "s2"].iter().map(|s| prepared(s)).collect();
    let refs: Vec<&Prepared> = others.iter().collect();
    let (base, log) = pretrain(&world().config, &refs, &TrainConfig { epochs: 0, ..c.clone() }).unwrap();
    assert!(log.entries.is_empty());
    let held = prepared("s0");
    let (tuned, lt) = finetune(base, &held, 2, &c).unwrap();
    let (scratch, ls) = train_from_scratch(&world().config, &held, 2, &c).unwrap();
    assert_eq!(lt.entries, ls.entries);
    for (name, t) in &scratch.tensors {
        assert_eq!(&tuned.tensors[name], t, "{name}");
    }
}

#[test]
fn ridge_only_finetuning_freezes_shared_weights() {
    let c = TrainConfig { epochs: 1, ..cfg() };
    let others = [prepared("s1")];
    let refs: Vec<&Prepared> = others.iter().collect();
    let (base, _) = pretrain(&world().config, &refs, &c).unwrap();
    let held = prepared("s0");
    let (tuned, _) = finetune(base.clone(), &held, 1, &TrainConfig { ridge_only: true, ..c }).unwrap();
    let changed: Vec<&String> = tuned
        .tensors
        .iter()
        .filter(|(n, t)| base.tensors.get(*n) != Some(*t))
        .map(|(n, _)| n)
        .collect();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| n.starts_with("ridge.s0.")), "{changed:?}");
}

#[test]
fn disabled_heads_stay_untrained() {
    let data = prepared("s0");
    let c = TrainConfig {
        use_retrieval: false,
        use_lowlevel: false,
        epochs: 1,
        ..cfg()
    };
    let init = {
        let (p, _) = train_from_scratch(&world().config, &data, 1, &TrainConfig { epochs: 0, ..c.clone() }).unwrap();
        p
    };
    let (p, log): (ModelParams, _) = train_from_scratch(&world().config, &data, 1, &c).unwrap();
    assert!(p.heads.prior && !p.heads.retrieval && !p.heads.lowlevel);
    assert!(log.entries.iter().all(|e| e.contrastive_l == 0.0 && e.lowlevel_l == 0.0));
    for (name, t) in &p.tensors {
        if name.starts_with("retr.") || name.starts_with("low.") {
            assert_eq!(&init.tensors[name], t, "{name}");
        }
    }
}

#[test]
fn converter_learns_second_encoder() {
    use mindalign_core::model::{converter_forward, ModelConfig};
    use mindalign_core::train::{train_converter, ConverterConfig};
    use mindalign_core::Tensor;
    let wc = WorldConfig::default();
    let w = generate_world(&wc, 4).unwrap();
    let config = ModelConfig::new(&wc, ArchConfig::default()).unwrap();
    let mut params = ModelParams::init(config, &[], 1).unwrap();
    let imgs: Vec<Vec<f64>> = (0..240).map(|i| w.image(i).unwrap()).collect();
    let train = Tensor::new([200, wc.pixel_dim()], imgs[..200].concat()).unwrap();
    let trace = train_converter(&mut params, &w, &train, &ConverterConfig::default()).unwrap();
    assert!(trace.last().unwrap() < &trace[0]);
    let (mut se, mut count) = (0.0, 0.0);
    let mut held = Vec::new();
    for img in &imgs[200..] {
        let src = Tensor::new([wc.n_tokens, wc.d_token], w.encode_image(img).unwrap()).unwrap();
        let got = converter_forward(&params, &src).unwrap();
        let want = w.encode_image_b(img).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            se += (a - b) * (a - b);
            count += 1.0;
        }
        held.extend(want);
    }
    let mean = held.iter().sum::<f64>() / held.len() as f64;
    let var = held.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / held.len() as f64;
    let mse = se / count;
    assert!(mse < 0.05 * var, "mse {mse} vs var {var}");
}
