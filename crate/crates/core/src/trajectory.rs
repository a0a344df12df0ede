//! Teacher training and trajectory persistence.
//!
//! A trajectory is the ordered sequence of parameter snapshots taken at
//! epoch boundaries while a teacher trains on the full dataset, together
//! with enough metadata to verify compatibility at distillation time. Files
//! use the shared binary envelope with content kind `DFTJ`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationSpec};
use crate::data::{LabeledDataset, NormStats};
use crate::elem::Elem;
use crate::envelope;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{self, ModelConfig};
use crate::params::ParamVector;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerDescriptor {
    pub kind: String,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl OptimizerDescriptor {
    pub fn sgd(learning_rate: f64, momentum: f64, batch_size: usize) -> Self {
        OptimizerDescriptor {
            kind: "sgd".into(),
            learning_rate,
            momentum,
            batch_size,
        }
    }
}

/// Ordered teacher parameter snapshots; `snapshots[0]` is the
/// initialization at step 0 and steps strictly increase.
#[derive(Clone, Debug)]
pub struct Trajectory<F: Elem> {
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub dataset_digest: String,
    pub seed: u64,
    pub snapshots: Vec<ParamVector<F>>,
    pub snapshot_steps: Vec<usize>,
    pub optimizer: OptimizerDescriptor,
    pub augmentation: Option<AugmentationSpec>,
    pub norm_stats: Option<NormStats>,
}

impl<F: Elem> Trajectory<F> {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.snapshots.is_empty() || self.snapshot_steps.len() != self.snapshots.len() {
            return Err(Error::config("trajectory must hold aligned snapshots and steps"));
        }
        if self.snapshot_steps[0] != 0 {
            return Err(Error::config("first snapshot must be the step-0 initialization"));
        }
        if !self.snapshot_steps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("snapshot steps must strictly increase"));
        }
        let layout = self.snapshots[0].layout();
        if !self
            .snapshots
            .iter()
            .all(|s| Arc::ptr_eq(s.layout(), layout) || s.layout() == layout)
        {
            return Err(Error::config("snapshots must share one layout"));
        }
        Ok(())
    }
}

/// Serializable metadata document embedded in trajectory files.
#[derive(Serialize, Deserialize)]
struct TrajectoryMeta {
    config_hash: String,
    model_config: ModelConfig,
    dataset_digest: String,
    seed: u64,
    snapshot_steps: Vec<usize>,
    optimizer: OptimizerDescriptor,
    augmentation: Option<AugmentationSpec>,
    norm_stats: Option<NormStats>,
    param_len: usize,
}

/// Gathers image rows into a `[B,C,H,W]` batch tensor.
fn gather_batch<F: Elem>(ds: &LabeledDataset<F>, indices: &[usize]) -> Result<(Tensor<F>, Vec<usize>)> {
    let images = crate::kernels::index_select0(&ds.images, indices)?;
    let labels = indices.iter().map(|&i| ds.labels[i]).collect();
    Ok((images, labels))
}

/// Per-class balanced batch schedule for one epoch: every step draws an
/// equal share per class from shuffled per-class pools that reshuffle on
/// exhaustion, so smaller classes are oversampled uniformly.
fn epoch_batches(
    ds_labels_by_class: &[Vec<usize>],
    batch_size: usize,
    total: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let classes = ds_labels_by_class.len();
    let per_class = (batch_size / classes).max(1);
    let steps = total.div_ceil(per_class * classes);
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(classes);
    let mut cursors = vec![0usize; classes];
    for idx in ds_labels_by_class {
        let mut pool = idx.clone();
        pool.shuffle(rng);
        pools.push(pool);
    }
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(per_class * classes);
        for class in 0..classes {
            for _ in 0..per_class {
                if cursors[class] >= pools[class].len() {
                    pools[class].shuffle(rng);
                    cursors[class] = 0;
                }
                batch.push(pools[class][cursors[class]]);
                cursors[class] += 1;
            }
        }
        batches.push(batch);
    }
    batches
}

/// Trains one teacher with plain SGD + momentum on per-class balanced
/// minibatches, snapshotting at every epoch boundary (including step 0).
/// Deterministic for fixed (seed, config, data).
pub fn train_teacher<F: Elem>(
    ds: &LabeledDataset<F>,
    config: &ModelConfig,
    epochs: usize,
    hyper: &OptimizerDescriptor,
    seed: u64,
    augmentation: Option<&AugmentationSpec>,
) -> Result<Trajectory<F>> {
    if epochs == 0 {
        return Err(Error::config("teacher training needs at least one epoch"));
    }
    if ds.is_empty() {
        return Err(Error::config("teacher training needs a non-empty dataset"));
    }
    ds.validate()?;
    let model = model::build::<F>(config, seed)?;
    let mut params = model.params;
    let mut velocity = Tensor::zeros(vec![params.len()]);
    let mut batch_rng = rng::stream(seed, "teacher-batches");
    let mut aug_rng = rng::stream(seed, "teacher-aug");
    let by_class: Vec<Vec<usize>> = (0..ds.class_count())
        .map(|c| ds.indices_of_class(c))
        .collect();
    if by_class.iter().any(|v| v.is_empty()) {
        return Err(Error::config("every class needs at least one example"));
    }

    let mut snapshots = vec![params.clone()];
    let mut snapshot_steps = vec![0usize];
    let lr = F::from_f64(hyper.learning_rate);
    let mu = F::from_f64(hyper.momentum);

    for epoch in 0..epochs {
        let batches = epoch_batches(&by_class, hyper.batch_size, ds.len(), &mut batch_rng);
        for indices in batches {
            let (mut images, labels) = gather_batch(ds, &indices)?;
            if let Some(spec) = augmentation {
                let draw = augment::sample(spec, indices.len(), &mut aug_rng)?;
                images = augment::apply_value(&images, &draw)?;
            }
            let onehot = crate::data::one_hot::<F>(&labels, ds.class_count());

            let mut g = Graph::new();
            let p = g.param(params.data().clone());
            let x = g.constant(images);
            let y = g.constant(onehot);
            let step = (|| -> Result<Tensor<F>> {
                let logits = model::forward_graph(&mut g, config, p, x)?;
                let loss = g.softmax_cross_entropy_mean(logits, y)?;
                let grads = g.grad(loss, &[p], false)?;
                Ok(g.value(grads[0]).clone())
            })();
            let grad = step.map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch },
                other => other,
            })?;

            velocity = velocity.zip_map(&grad, |v, gr| mu * v + gr)?;
            let updated = params.data().zip_map(&velocity, |p0, v| p0 - lr * v)?;
            if !updated.all_finite() {
                return Err(Error::Diverged { epoch });
            }
            params = params.with_data(updated)?;
        }
        snapshots.push(params.clone());
        snapshot_steps.push(epoch + 1);
    }

    let traj = Trajectory {
        model_config: config.clone(),
        config_hash: config.config_hash(),
        dataset_digest: ds.source_id.clone(),
        seed,
        snapshots,
        snapshot_steps,
        optimizer: hyper.clone(),
        augmentation: augmentation.cloned(),
        norm_stats: None,
    };
    traj.validate()?;
    Ok(traj)
}

/// Writes one trajectory file (content kind `DFTJ`).
pub fn save_trajectory<F: Elem>(path: &Path, traj: &Trajectory<F>) -> Result<()> {
    traj.validate()?;
    let meta = TrajectoryMeta {
        config_hash: traj.config_hash.clone(),
        model_config: traj.model_config.clone(),
        dataset_digest: traj.dataset_digest.clone(),
        seed: traj.seed,
        snapshot_steps: traj.snapshot_steps.clone(),
        optimizer: traj.optimizer.clone(),
        augmentation: traj.augmentation.clone(),
        norm_stats: traj.norm_stats.clone(),
        param_len: traj.snapshots[0].len(),
    };
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| Error::config(format!("metadata serialization failed: {e}")))?;
    let mut payload = Vec::with_capacity(traj.snapshots.len() * traj.snapshots[0].len());
    for snap in &traj.snapshots {
        payload.extend(snap.data().data().iter().map(|&v| v.to_f32()));
    }
    envelope::write_file(path, envelope::KIND_TRAJECTORY, &meta_json, &payload)
}

/// Reads and validates one trajectory file.
pub fn load_trajectory<F: Elem>(path: &Path) -> Result<Trajectory<F>> {
    let env = envelope::read_file(path, Some(envelope::KIND_TRAJECTORY))?;
    let label = path.display().to_string();
    let meta: TrajectoryMeta = serde_json::from_str(&env.metadata)
        .map_err(|e| Error::format(&label, format!("bad metadata: {e}")))?;
    let layout = Arc::new(meta.model_config.layout());
    if layout.total_len() != meta.param_len {
        return Err(Error::format(&label, "layout does not match recorded length"));
    }
    let count = meta.snapshot_steps.len();
    if env.payload.len() != count * meta.param_len {
        return Err(Error::format(
            &label,
            format!(
                "payload holds {} values, expected {}",
                env.payload.len(),
                count * meta.param_len
            ),
        ));
    }
    let mut snapshots = Vec::with_capacity(count);
    for chunk in env.payload.chunks_exact(meta.param_len) {
        let data: Vec<F> = chunk.iter().map(|&v| F::from_f32(v)).collect();
        snapshots.push(ParamVector::new(Tensor::from_vec(data), Arc::clone(&layout))?);
    }
    let traj = Trajectory {
        config_hash: meta.config_hash,
        model_config: meta.model_config,
        dataset_digest: meta.dataset_digest,
        seed: meta.seed,
        snapshots,
        snapshot_steps: meta.snapshot_steps,
        optimizer: meta.optimizer,
        augmentation: meta.augmentation,
        norm_stats: meta.norm_stats,
    };
    traj.validate()?;
    Ok(traj)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreManifest {
    pub count: usize,
    pub config_hash: String,
    pub dataset_digest: String,
    pub model_config: ModelConfig,
    pub teacher_epochs: usize,
    pub norm_stats: Option<NormStats>,
    pub files: Vec<String>,
}

/// Directory of trajectory files sharing one config hash and data digest.
#[derive(Debug)]
pub struct TrajectoryStore {
    pub dir: PathBuf,
    pub manifest: StoreManifest,
}

impl TrajectoryStore {
    pub fn count(&self) -> usize {
        self.manifest.count
    }

    /// Writes every trajectory and an atomically-replaced manifest.
    pub fn record<F: Elem>(
        dir: &Path,
        trajectories: &[Trajectory<F>],
        norm_stats: Option<NormStats>,
    ) -> Result<TrajectoryStore> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::config("a store needs at least one trajectory"))?;
        if !trajectories
            .iter()
            .all(|t| t.config_hash == first.config_hash && t.dataset_digest == first.dataset_digest)
        {
            return Err(Error::config(
                "trajectories disagree on config hash or dataset digest",
            ));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {dir:?}"), e))?;
        let mut files = Vec::with_capacity(trajectories.len());
        for (i, traj) in trajectories.iter().enumerate() {
            let name = trajectory_file_name(i);
            save_trajectory(&dir.join(&name), traj)?;
            files.push(name);
        }
        let manifest = StoreManifest {
            count: trajectories.len(),
            config_hash: first.config_hash.clone(),
            dataset_digest: first.dataset_digest.clone(),
            model_config: first.model_config.clone(),
            teacher_epochs: first.snapshot_steps.last().copied().unwrap_or(0),
            norm_stats,
            files,
        };
        write_manifest(dir, &manifest)?;
        Ok(TrajectoryStore {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn open(dir: &Path) -> Result<TrajectoryStore> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {path:?}"), e))?;
        let manifest: StoreManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&path.display().to_string(), format!("bad manifest: {e}")))?;
        Ok(TrajectoryStore {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn load<F: Elem>(&self, index: usize) -> Result<Trajectory<F>> {
        let name = self
            .manifest
            .files
            .get(index)
            .ok_or_else(|| Error::config(format!("trajectory index {index} out of range")))?;
        let traj = load_trajectory(&self.dir.join(name))?;
        if traj.config_hash != self.manifest.config_hash {
            return Err(Error::format(
                name,
                "trajectory config hash disagrees with the store manifest",
            ));
        }
        Ok(traj)
    }
}

pub fn trajectory_file_name(index: usize) -> String {
    format!("teacher_{index:04}.dftj")
}

/// Atomically rewrites the store manifest.
pub fn write_manifest(dir: &Path, manifest: &StoreManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::config(format!("manifest serialization failed: {e}")))?;
    let path = dir.join("manifest.json");
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(format!("writing {tmp:?}"), e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(format!("renaming into {path:?}"), e))
}
