//! Per-subject trial datasets, voxel-wise z-scoring and the on-disk format.
//!
//! On disk a dataset directory holds `manifest.toml` plus one raw
//! little-endian `f32` array per field, named `<subject>_<field>.f32`.
//! Every stored value is generated at `f32` precision, so reloading is
//! bit-exact.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;
use crate::world::{WorldConfig, WorldError, WorldSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("need at least one session")]
    NoSessions,
    #[error("subject `{subject}` needs {requested} unique images but only {available} are reserved per subject")]
    PoolExhausted {
        subject: String,
        requested: usize,
        available: usize,
    },
    #[error("training split is empty")]
    EmptyTrain,
    #[error("dataset is already normalized; the file format stores raw responses")]
    AlreadyNormalized,
    #[error("requested {requested} sessions but only {available} exist")]
    TooManySessions { requested: usize, available: usize },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    SharedTest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub image_id: u32,
    pub session: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Voxels whose training std fell below the floor.
    pub floored: Vec<usize>,
}

pub const STD_FLOOR: f64 = 1e-6;

/// Trials for one subject. Training trials come first, ordered by session
/// then trial index; shared-test trials follow in image-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: String,
    pub n_voxels: usize,
    pub n_sessions: usize,
    pub trials_per_session: usize,
    pub trials: Vec<Trial>,
    /// `[n_trials, n_voxels]`.
    pub voxels: Tensor,
    /// `[n_trials, pixel_dim]`, the image shown on each trial.
    pub images: Tensor,
    pub norm_stats: Option<NormStats>,
}

impl SubjectDataset {
    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.norm_stats.is_some()
    }

    /// Training trial indices of the first `k` sessions; a prefix of the
    /// chronological training sequence.
    pub fn train_indices(&self, k: usize) -> Result<Vec<usize>, DatasetError> {
        if k == 0 {
            return Err(DatasetError::NoSessions);
        }
        if k > self.n_sessions {
            return Err(DatasetError::TooManySessions {
                requested: k,
                available: self.n_sessions,
            });
        }
        Ok(self
            .trials
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == Split::Train && (t.session as usize) < k)
            .map(|(i, _)| i)
            .collect())
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.trials
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == Split::SharedTest)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn test_image_ids(&self) -> Vec<u32> {
        self.test_indices().iter().map(|&i| self.trials[i].image_id).collect()
    }

    pub fn image(&self, trial: usize) -> &[f64] {
        self.images.row(trial)
    }

    pub fn voxel_row(&self, trial: usize) -> &[f64] {
        self.voxels.row(trial)
    }

    /// Copy restricted to the first `k` sessions of training data plus the
    /// full shared-test split.
    pub fn restrict_sessions(&self, k: usize) -> Result<SubjectDataset, DatasetError> {
        let mut keep = self.train_indices(k)?;
        keep.extend(self.test_indices());
        let gather = |t: &Tensor| {
            let mut data = Vec::with_capacity(keep.len() * t.cols());
            for &i in &keep {
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts(vec![keep.len(), t.cols()], data)
        };
        Ok(SubjectDataset {
            subject_id: self.subject_id.clone(),
            n_voxels: self.n_voxels,
            n_sessions: k,
            trials_per_session: self.trials_per_session,
            trials: keep.iter().map(|&i| self.trials[i].clone()).collect(),
            voxels: gather(&self.voxels),
            images: gather(&self.images),
            norm_stats: self.norm_stats.clone(),
        })
    }
}

/// Simulates one subject's experiment. Shared-test images are image ids
/// `0..n_shared_test` for every subject; training images come from a block
/// of the pool reserved for this subject.
pub fn generate_dataset(
    world: &WorldSpec,
    subject_id: &str,
    n_sessions: usize,
    trials_per_session: usize,
    seed: u64,
) -> Result<SubjectDataset, DatasetError> {
    if n_sessions == 0 {
        return Err(DatasetError::NoSessions);
    }
    let cfg = &world.config;
    let index = world.subject_index(subject_id)?;
    let n_voxels = world.subjects[index].n_voxels;
    let n_train = n_sessions * trials_per_session;
    let block = cfg.images_per_subject();
    if n_train > block {
        return Err(DatasetError::PoolExhausted {
            subject: subject_id.to_string(),
            requested: n_train,
            available: block,
        });
    }
    let first = cfg.n_shared_test + index * block;

    let mut trials = Vec::with_capacity(n_train + cfg.n_shared_test);
    for s in 0..n_sessions {
        for t in 0..trials_per_session {
            trials.push(Trial {
                image_id: (first + s * trials_per_session + t) as u32,
                session: s as u32,
                split: Split::Train,
            });
        }
    }
    for i in 0..cfg.n_shared_test {
        trials.push(Trial {
            image_id: i as u32,
            session: (i % n_sessions) as u32,
            split: Split::SharedTest,
        });
    }

    let p = cfg.pixel_dim();
    let mut images = Vec::with_capacity(trials.len() * p);
    let mut voxels = Vec::with_capacity(trials.len() * n_voxels);
    let label = format!("dataset/{subject_id}/noise");
    for (k, trial) in trials.iter().enumerate() {
        let img = world.image(trial.image_id)?;
        let v = world.simulate_response(subject_id, &img, rng::derive_indexed(seed, &label, k as u64))?;
        voxels.extend(v.into_iter().map(|x| x as f32 as f64));
        images.extend(img);
    }
    let n = trials.len();
    Ok(SubjectDataset {
        subject_id: subject_id.to_string(),
        n_voxels,
        n_sessions,
        trials_per_session,
        trials,
        voxels: Tensor::from_parts(vec![n, n_voxels], voxels),
        images: Tensor::from_parts(vec![n, p], images),
        norm_stats: None,
    })
}

/// Voxel-wise z-scoring with statistics from the full training split,
/// applied to both splits. Run before any session subsetting.
pub fn normalize(dataset: &mut SubjectDataset) -> Result<(), DatasetError> {
    let train: Vec<usize> = (0..dataset.n_trials())
        .filter(|&i| dataset.trials[i].split == Split::Train)
        .collect();
    if train.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    let nv = dataset.n_voxels;
    let n = train.len() as f64;
    let mut mean = vec![0.0; nv];
    for &i in &train {
        mean.iter_mut().zip(dataset.voxels.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; nv];
    for &i in &train {
        for (j, v) in dataset.voxels.row(i).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    let mut floored = Vec::new();
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (v / n).sqrt();
            if s < STD_FLOOR {
                floored.push(j);
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    if !floored.is_empty() {
        log::warn!(
            "{}: {} constant voxel(s) z-scored with std floor {STD_FLOOR}",
            dataset.subject_id,
            floored.len()
        );
    }
    for i in 0..dataset.n_trials() {
        for (j, v) in dataset.voxels.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[j]) / std[j];
        }
    }
    dataset.norm_stats = Some(NormStats { mean, std, floored });
    Ok(())
}

/// `manifest.toml` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub world_seed: u64,
    pub data_seed: u64,
    pub world: WorldConfig,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: String,
    pub n_voxels: usize,
    pub n_sessions: usize,
    pub trials_per_session: usize,
    pub n_trials: usize,
}

const FIELDS: [&str; 5] = ["voxels", "images", "image_ids", "sessions", "split"];

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_f32(path: &Path, values: &[f64]) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_f32(path: &Path) -> Result<Vec<f64>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(DatasetError::Malformed(format!("{} is not a whole number of f32s", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes raw (un-normalized) datasets and their manifest into `dir`.
pub fn save_datasets(
    dir: &Path,
    world: &WorldSpec,
    data_seed: u64,
    datasets: &[SubjectDataset],
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut subjects = Vec::new();
    for d in datasets {
        if d.is_normalized() {
            return Err(DatasetError::AlreadyNormalized);
        }
        let ids: Vec<f64> = d.trials.iter().map(|t| t.image_id as f64).collect();
        let sessions: Vec<f64> = d.trials.iter().map(|t| t.session as f64).collect();
        let split: Vec<f64> = d
            .trials
            .iter()
            .map(|t| if t.split == Split::Train { 0.0 } else { 1.0 })
            .collect();
        let fields: [&[f64]; 5] = [d.voxels.data(), d.images.data(), &ids, &sessions, &split];
        for (name, values) in FIELDS.iter().zip(fields) {
            write_f32(&dir.join(format!("{}_{name}.f32", d.subject_id)), values)?;
        }
        subjects.push(ManifestSubject {
            id: d.subject_id.clone(),
            n_voxels: d.n_voxels,
            n_sessions: d.n_sessions,
            trials_per_session: d.trials_per_session,
            n_trials: d.n_trials(),
        });
    }
    let manifest = Manifest {
        world_seed: world.seed,
        data_seed,
        world: world.config.clone(),
        subjects,
    };
    let text = toml::to_string(&manifest).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    toml::from_str(&text).map_err(|e| DatasetError::Malformed(format!("{}: {e}", path.display())))
}

pub fn load_datasets(dir: &Path) -> Result<(Manifest, Vec<SubjectDataset>), DatasetError> {
    let manifest = load_manifest(dir)?;
    let p = manifest.world.pixel_dim();
    let mut out = Vec::new();
    for s in &manifest.subjects {
        let read = |field: &str, width: usize| -> Result<Vec<f64>, DatasetError> {
            let v = read_f32(&dir.join(format!("{}_{field}.f32", s.id)))?;
            if v.len() != s.n_trials * width {
                return Err(DatasetError::Malformed(format!(
                    "{}_{field}.f32 has {} values, expected {}",
                    s.id,
                    v.len(),
                    s.n_trials * width
                )));
            }
            Ok(v)
        };
        let voxels = read("voxels", s.n_voxels)?;
        let images = read("images", p)?;
        let ids = read("image_ids", 1)?;
        let sessions = read("sessions", 1)?;
        let split = read("split", 1)?;
        let trials = (0..s.n_trials)
            .map(|i| Trial {
                image_id: ids[i] as u32,
                session: sessions[i] as u32,
                split: if split[i] == 0.0 { Split::Train } else { Split::SharedTest },
            })
            .collect();
        out.push(SubjectDataset {
            subject_id: s.id.clone(),
            n_voxels: s.n_voxels,
            n_sessions: s.n_sessions,
            trials_per_session: s.trials_per_session,
            trials,
            voxels: Tensor::from_parts(vec![s.n_trials, s.n_voxels], voxels),
            images: Tensor::from_parts(vec![s.n_trials, p], images),
            norm_stats: None,
        });
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_world;

    fn tiny_world() -> WorldSpec {
        let cfg = WorldConfig {
            height: 4,
            width: 4,
            channels: 2,
            n_tokens: 4,
            d_token: 10,
            vae_height: 2,
            vae_width: 2,
            vae_channels: 3,
            d_teacher: 5,
            n_subjects: 3,
            voxels_min: 10,
            voxels_max: 20,
            n_sessions: 3,
            trials_per_session: 4,
            n_shared_test: 5,
            image_pool: 60,
            m_tokens: 2,
            d_token_b: 3,
            ..Default::default()
        };
        generate_world(&cfg, 1).unwrap()
    }

    #[test]
    fn single_session_dataset() {
        let w = tiny_world();
        let d = generate_dataset(&w, "s0", 1, 4, 3).unwrap();
        assert!(d
            .trials
            .iter()
            .filter(|t| t.split == Split::Train)
            .all(|t| t.session == 0));
        assert_eq!(d.test_indices().len(), 5);
    }

    #[test]
    fn pool_exhaustion_is_reported() {
        let w = tiny_world();
        assert!(matches!(
            generate_dataset(&w, "s0", 3, 100, 0),
            Err(DatasetError::PoolExhausted { .. })
        ));
        assert!(matches!(generate_dataset(&w, "s0", 0, 4, 0), Err(DatasetError::NoSessions)));
    }

    #[test]
    fn constant_voxel_is_floored() {
        let w = tiny_world();
        let mut d = generate_dataset(&w, "s1", 2, 4, 3).unwrap();
        for i in 0..d.n_trials() {
            d.voxels.row_mut(i)[0] = 2.5;
        }
        normalize(&mut d).unwrap();
        let st = d.norm_stats.as_ref().unwrap();
        assert_eq!(st.floored, vec![0]);
        assert!(d.voxels.all_finite());
        assert!(d.voxels.row(0)[0].abs() < 1e-12);
    }

    #[test]
    fn session_prefix_and_errors() {
        let w = tiny_world();
        let d = generate_dataset(&w, "s2", 3, 4, 3).unwrap();
        assert_eq!(d.train_indices(2).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(matches!(d.train_indices(4), Err(DatasetError::TooManySessions { .. })));
    }
}
