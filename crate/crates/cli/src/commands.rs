use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use mindalign_core::dataset::{self, SubjectDataset};
use mindalign_core::eval::{self, EvalReport, Variant};
use mindalign_core::model::checkpoint;
use mindalign_core::model::ModelParams;
use mindalign_core::rng;
use mindalign_core::train::{self, Prepared, TrainConfig, TrainLog};
use mindalign_core::world::{generate_world, WorldSpec};
use mindalign_core::Tensor;

use crate::config::RunConfig;
use crate::output::{self, ensure_dir, write_text};
use crate::{CliError, Command};

pub fn execute(cmd: &Command, cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    match cmd {
        Command::GenWorld { .. } => gen_world(cfg, out),
        Command::GenData { .. } => gen_data(cfg, out),
        Command::Pretrain { .. } => pretrain(cfg, out),
        Command::Finetune { .. } => finetune(cfg, out),
        Command::Scratch { .. } => scratch(cfg, out),
        Command::Eval { .. } => evaluate(cfg, out),
        Command::Scaling { .. } => scaling(cfg, out),
        Command::Ablate { .. } => ablate(cfg, out),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("`{key}` is required for this command")))
}

fn echo(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    ensure_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.echo())
}

/// World and normalized datasets from a `gen-data` directory. The config's
/// world block is replaced by the one recorded with the data.
fn load_data(cfg: &mut RunConfig) -> Result<(WorldSpec, BTreeMap<String, SubjectDataset>), CliError> {
    let dir = required(&cfg.paths.data, "paths.data")?.to_path_buf();
    let (manifest, sets) = dataset::load_datasets(&dir)?;
    cfg.world = manifest.world.clone();
    cfg.validate()?;
    let world = generate_world(&manifest.world, manifest.world_seed)?;
    let mut out = BTreeMap::new();
    for mut d in sets {
        dataset::normalize(&mut d)?;
        out.insert(d.subject_id.clone(), d);
    }
    Ok((world, out))
}

fn subject(world: &WorldSpec, data: &BTreeMap<String, SubjectDataset>, id: &str) -> Result<Prepared, CliError> {
    let d = data
        .get(id)
        .ok_or_else(|| CliError::Data(format!("subject `{id}` is not in the dataset directory")))?;
    Ok(Prepared::new(world, d.clone())?)
}

fn subjects(world: &WorldSpec, data: &BTreeMap<String, SubjectDataset>, ids: &[String]) -> Result<Vec<Prepared>, CliError> {
    ids.iter().map(|s| subject(world, data, s)).collect()
}

fn load_checkpoint(cfg: &mut RunConfig) -> Result<ModelParams, CliError> {
    let path = required(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let (params, _) = checkpoint::load(path)?;
    cfg.train.arch = params.config.arch.clone();
    Ok(params)
}

fn meta(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::from([
        ("command".to_string(), cfg.command.clone().unwrap_or_default()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]);
    if let Some(d) = &cfg.paths.data {
        m.insert("data".into(), d.display().to_string());
    }
    m
}

fn save_run(out: &Path, cfg: &RunConfig, params: &ModelParams, log: &TrainLog) -> Result<(), CliError> {
    checkpoint::save(&out.join("model.ckpt"), params, &meta(cfg))?;
    write_text(&out.join("log.csv"), &log.to_csv())?;
    info!(
        "{} iterations in {:.1}s, final loss {:?}",
        log.entries.len(),
        log.wall_clock_secs,
        log.final_loss()
    );
    Ok(())
}

fn maybe_train_converter(
    cfg: &RunConfig,
    out: &Path,
    params: &mut ModelParams,
    world: &WorldSpec,
    sets: &[&Prepared],
) -> Result<(), CliError> {
    if !cfg.run.train_converter {
        return Ok(());
    }
    let mut rows = Vec::new();
    for p in sets {
        let idx = p.dataset.train_indices(p.dataset.n_sessions)?;
        rows.push(p.dataset.images.gather_rows(&idx));
    }
    let width = world.config.pixel_dim();
    let n: usize = rows.iter().map(Tensor::rows).sum();
    let images = Tensor::new([n, width], rows.iter().flat_map(|t| t.data().to_vec()).collect())
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let trace = train::train_converter(params, world, &images, &cfg.converter)?;
    let mut csv = String::from("step,mse\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(csv, "{i},{l}").unwrap();
    }
    write_text(&out.join("converter_log.csv"), &csv)
}

fn gen_world(cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let world = generate_world(&cfg.world, cfg.world_seed())?;
    echo(out, &cfg)?;
    output::save_world(out, &world)
}

fn gen_data(cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let mut cfg = cfg;
    let world = match &cfg.paths.world {
        Some(dir) => output::load_world(dir)?,
        None => generate_world(&cfg.world, cfg.world_seed())?,
    };
    cfg.world = world.config.clone();
    cfg.validate()?;
    let ids = if cfg.run.subjects.is_empty() {
        world.config.subject_ids()
    } else {
        cfg.run.subjects.clone()
    };
    let wc = &world.config;
    let sets = ids
        .iter()
        .map(|s| dataset::generate_dataset(&world, s, wc.n_sessions, wc.trials_per_session, cfg.data_seed()))
        .collect::<Result<Vec<SubjectDataset>, _>>()?;
    echo(out, &cfg)?;
    dataset::save_datasets(out, &world, cfg.data_seed(), &sets)?;
    Ok(())
}

fn pretrain(mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let (world, data) = load_data(&mut cfg)?;
    let ids = cfg.train.pretrain_subjects(&world.config);
    let owned = subjects(&world, &data, &ids)?;
    let sets: Vec<&Prepared> = owned.iter().collect();
    echo(out, &cfg)?;
    let (mut params, log) = train::pretrain(&world.config, &sets, &cfg.train)?;
    maybe_train_converter(&cfg, out, &mut params, &world, &sets)?;
    save_run(out, &cfg, &params, &log)
}

fn finetune(mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let (world, data) = load_data(&mut cfg)?;
    let params = load_checkpoint(&mut cfg)?;
    let held = subject(&world, &data, &cfg.run.subject)?;
    echo(out, &cfg)?;
    let (params, log) = train::finetune(params, &held, cfg.run.sessions, &cfg.train)?;
    save_run(out, &cfg, &params, &log)
}

fn scratch(mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let (world, data) = load_data(&mut cfg)?;
    let d = subject(&world, &data, &cfg.run.subject)?;
    echo(out, &cfg)?;
    let (mut params, log) = train::train_from_scratch(&world.config, &d, cfg.run.sessions, &cfg.train)?;
    maybe_train_converter(&cfg, out, &mut params, &world, &[&d])?;
    save_run(out, &cfg, &params, &log)
}

fn write_images(dir: &Path, world: &WorldSpec, name: &str, images: &Tensor) -> Result<(), CliError> {
    let wc = &world.config;
    ensure_dir(dir)?;
    for i in 0..images.rows() {
        output::write_ppm(
            &dir.join(format!("{name}_{i:03}.ppm")),
            images.row(i),
            wc.height,
            wc.width,
            wc.channels,
        )?;
    }
    output::write_f32(&dir.join(format!("{name}.f32")), images)
}

fn evaluate(mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let (world, data) = load_data(&mut cfg)?;
    let params = load_checkpoint(&mut cfg)?;
    let d = data
        .get(&cfg.run.subject)
        .ok_or_else(|| CliError::Data(format!("subject `{}` is not in the dataset directory", cfg.run.subject)))?;
    echo(out, &cfg)?;
    let enc = eval::fit_encoding_model(&world, d)?;
    let report = eval::evaluate(&params, &world, d, &enc, &cfg.eval)?;
    write_text(&out.join("report.txt"), &report.to_text())?;
    if params.heads.prior {
        let test = d.test_indices();
        let voxels = d.voxels.gather_rows(&test);
        let seed = rng::derive(cfg.eval.seed, "eval/prior");
        let r = eval::reconstruct(&params, &world, &voxels, &cfg.run.subject, seed)?;
        let dir = out.join("images");
        write_images(&dir, &world, "final", &r.blended)?;
        write_images(&dir, &world, "unrefined", &r.unrefined)?;
        write_images(&dir, &world, "truth", &d.images.gather_rows(&test))?;
    }
    Ok(())
}

fn scaling(mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let (world, data) = load_data(&mut cfg)?;
    let given = match cfg.paths.checkpoint {
        Some(_) => Some(load_checkpoint(&mut cfg)?),
        None => None,
    };
    let held = &subject(&world, &data, &cfg.train.held_out_subject)?;
    let grid = cfg.run.session_grid.clone();
    if grid.is_empty() {
        return Err(eval::EvalError::EmptyGrid.into());
    }
    for &k in &grid {
        held.dataset.train_indices(k)?;
    }
    echo(out, &cfg)?;
    let enc = eval::fit_encoding_model(&world, &held.dataset)?;
    let baseline = eval::baseline_report(&world, &held.dataset, &enc, &cfg.eval)?;
    write_text(&out.join("baseline_report.txt"), &baseline.to_text())?;
    let full_k = held.dataset.n_sessions;
    let mut csv = format!("{}\n", eval::SCALING_CSV_HEADER);
    for s in 0..cfg.run.n_seeds {
        let seed = rng::derive_indexed(cfg.train.seed, "scaling/seed", s as u64) >> 1;
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let pretrained = match &given {
            Some(p) => p.clone(),
            None => {
                let ids = tc.pretrain_subjects(&world.config);
                let owned = subjects(&world, &data, &ids)?;
                let sets: Vec<&Prepared> = owned.iter().collect();
                let (p, log) = train::pretrain(&world.config, &sets, &tc)?;
                checkpoint::save(&out.join(format!("pretrained_seed{s}.ckpt")), &p, &meta(&cfg))?;
                write_text(&out.join(format!("pretrain_log_seed{s}.csv")), &log.to_csv())?;
                p
            }
        };
        let mut curves: BTreeMap<&str, BTreeMap<usize, EvalReport>> = BTreeMap::new();
        for arm in &cfg.run.arms {
            let p = (arm == "pretrained").then_some(&pretrained);
            let curve = eval::scaling_experiment(&world, held, p, &grid, &tc, &cfg.eval, &enc)?;
            for (k, r) in &curve {
                write_text(&out.join(format!("report_{arm}_k{k}_seed{s}.txt")), &r.to_text())?;
            }
            curves.insert(arm.as_str(), curve);
        }
        let full = match curves.get("pretrained").and_then(|c| c.get(&full_k)) {
            Some(r) => r.clone(),
            None => {
                let (p, _) = train::finetune(pretrained.clone(), held, full_k, &tc)?;
                eval::evaluate(&p, &world, &held.dataset, &enc, &cfg.eval)?
            }
        };
        for (arm, curve) in &curves {
            for row in eval::scaling_csv_rows(arm, s as u64, curve, &baseline, &full) {
                writeln!(csv, "{row}").unwrap();
            }
        }
    }
    write_text(&out.join("curve.csv"), &csv)
}

fn ablate(mut cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let (world, data) = load_data(&mut cfg)?;
    let d = &subject(&world, &data, &cfg.run.subject)?;
    let variants = cfg
        .run
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    d.dataset.train_indices(cfg.run.sessions)?;
    echo(out, &cfg)?;
    let enc = eval::fit_encoding_model(&world, &d.dataset)?;
    let reports = eval::ablation_run(&world, d, cfg.run.sessions, &variants, &cfg.train, &cfg.eval, &enc)?;
    let mut csv = String::from("variant,metric_name,value\n");
    for (v, r) in &reports {
        write_text(&out.join(format!("report_{v}.txt")), &r.to_text())?;
        for key in eval::metric_keys() {
            let value = r.get(&key).map_or("NA".to_string(), eval::sig6);
            writeln!(csv, "{v},{key},{value}").unwrap();
        }
    }
    write_text(&out.join("ablation.csv"), &csv)
}
