//! Student evaluation, the random-real baseline, and the anonymization
//! audit over distilled datasets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationSpec};
use crate::data::{denormalize_images, LabeledDataset};
use crate::distill::{DistilledDataset, InitMode, Provenance};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{self, ModelConfig};
use crate::params::ParamVector;
use crate::rng;
use crate::tensor::Tensor;

const TEST_FORWARD_CHUNK: usize = 256;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Top-1 test accuracy; absent when this seed diverged.
    pub accuracy: Option<f64>,
    pub failed: bool,
}

/// Accuracy statistics over independently seeded student trainings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_kind: String,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    pub epochs: usize,
    pub config_hash: String,
    pub failed_seeds: usize,
}

impl EvalReport {
    fn aggregate(
        dataset_kind: &str,
        per_seed: Vec<SeedResult>,
        epochs: usize,
        config_hash: String,
    ) -> Self {
        let accs: Vec<f64> = per_seed.iter().filter_map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        EvalReport {
            dataset_kind: dataset_kind.to_string(),
            failed_seeds: per_seed.iter().filter(|r| r.failed).count(),
            per_seed,
            mean,
            std,
            epochs,
            config_hash,
        }
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Top-1 accuracy of a parameter vector on a labeled set, batched forward.
pub fn accuracy<F: Elem>(
    config: &ModelConfig,
    params: &ParamVector<F>,
    ds: &LabeledDataset<F>,
) -> Result<f64> {
    let mut correct = 0usize;
    let n = ds.len();
    let mut start = 0usize;
    while start < n {
        let len = TEST_FORWARD_CHUNK.min(n - start);
        let indices: Vec<usize> = (start..start + len).collect();
        let batch = crate::kernels::index_select0(&ds.images, &indices)?;
        let mut g = Graph::new();
        let p = g.constant(params.data().clone());
        let x = g.constant(batch);
        let logits = model::forward_graph(&mut g, config, p, x)?;
        let out = g.value(logits);
        let classes = ds.class_count();
        for (row, &idx) in indices.iter().enumerate() {
            let scores = &out.data()[row * classes..(row + 1) * classes];
            let mut best = 0usize;
            for c in 1..classes {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            if best == ds.labels[idx] {
                correct += 1;
            }
        }
        start += len;
    }
    Ok(correct as f64 / n as f64)
}

/// Trains one fresh student on the distilled set and returns test accuracy,
/// or `None` when training diverges.
fn train_and_test_one<F: Elem>(
    dc: &DistilledDataset<F>,
    test: &LabeledDataset<F>,
    config: &ModelConfig,
    seed: u64,
    epochs: usize,
    augmentation: Option<&AugmentationSpec>,
) -> Result<Option<f64>> {
    let model = model::build::<F>(config, seed)?;
    let mut params = model.params;
    let lr = F::from_f64(dc.alpha());
    let onehot = dc.one_hot();
    let mut aug_rng = rng::indexed_stream(seed, "eval-aug", 0);

    for _epoch in 0..epochs {
        let images = match augmentation {
            Some(spec) => {
                let draw = augment::sample(spec, dc.len(), &mut aug_rng)?;
                augment::apply_value(&dc.images, &draw)?
            }
            None => dc.images.clone(),
        };
        let mut g = Graph::new();
        let p = g.param(params.data().clone());
        let x = g.constant(images);
        let y = g.constant(onehot.clone());
        let step = (|| -> Result<Tensor<F>> {
            let logits = model::forward_graph(&mut g, config, p, x)?;
            let loss = g.softmax_cross_entropy_mean(logits, y)?;
            let grads = g.grad(loss, &[p], false)?;
            Ok(g.value(grads[0]).clone())
        })();
        let grad = match step {
            Ok(grad) => grad,
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let updated = params.data().zip_map(&grad, |p0, gr| p0 - lr * gr)?;
        if !updated.all_finite() {
            return Ok(None);
        }
        params = params.with_data(updated)?;
    }
    Ok(Some(accuracy(config, &params, test)?))
}

/// Runs seeds on `threads` workers and merges results in seed order.
fn run_seeds<F, Job>(seeds: &[u64], threads: usize, job: Job) -> Result<Vec<SeedResult>>
where
    F: Elem,
    Job: Fn(u64) -> Result<Option<f64>> + Sync,
{
    let threads = threads.max(1).min(seeds.len().max(1));
    let mut results: Vec<Option<Result<Option<f64>>>> = Vec::new();
    results.resize_with(seeds.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let outcome = job(seeds[i]);
                let mut guard = slots.lock().expect("result mutex");
                guard[i] = Some(outcome);
            });
        }
    });

    let mut out = Vec::with_capacity(seeds.len());
    for (i, slot) in results.into_iter().enumerate() {
        let outcome = slot.expect("every seed ran")?;
        out.push(SeedResult {
            seed: seeds[i],
            accuracy: outcome,
            failed: outcome.is_none(),
        });
    }
    Ok(out)
}

/// Trains fresh students on the distilled data (one per seed, learning rate
/// `exp(log_alpha)`) and reports top-1 test accuracy. Failed seeds are
/// retained in the report and excluded from the mean.
pub fn eval_student<F: Elem>(
    dc: &DistilledDataset<F>,
    test: &LabeledDataset<F>,
    config: &ModelConfig,
    seeds: &[u64],
    epochs: usize,
    augmentation: Option<&AugmentationSpec>,
    threads: usize,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::config("evaluation needs at least one seed"));
    }
    if test.source_id == dc.provenance.dataset_digest {
        return Err(Error::config(
            "test split digest equals the distillation training digest; splits must be disjoint",
        ));
    }
    let per_seed = run_seeds::<F, _>(seeds, threads, |seed| {
        train_and_test_one(dc, test, config, seed, epochs, augmentation)
    })?;
    Ok(EvalReport::aggregate(
        "distilled",
        per_seed,
        epochs,
        config.config_hash(),
    ))
}

/// Control condition: per seed, a class-balanced random real subset of the
/// training split evaluated under the identical protocol with the default
/// initial learning rate.
pub fn baseline_random_real<F: Elem>(
    train: &LabeledDataset<F>,
    test: &LabeledDataset<F>,
    config: &ModelConfig,
    ipc: usize,
    seeds: &[u64],
    epochs: usize,
    augmentation: Option<&AugmentationSpec>,
    threads: usize,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::config("evaluation needs at least one seed"));
    }
    for class in 0..train.class_count() {
        let have = train.indices_of_class(class).len();
        if have < ipc {
            return Err(Error::config(format!(
                "class {class} has {have} examples, fewer than ipc {ipc}"
            )));
        }
    }
    let per_seed = run_seeds::<F, _>(seeds, threads, |seed| {
        let mut pick_rng = rng::indexed_stream(seed, "baseline-subset", 0);
        let mut picked = Vec::with_capacity(train.class_count() * ipc);
        let mut labels = Vec::with_capacity(train.class_count() * ipc);
        for class in 0..train.class_count() {
            let mut idx = train.indices_of_class(class);
            idx.shuffle(&mut pick_rng);
            picked.extend_from_slice(&idx[..ipc]);
            labels.extend(std::iter::repeat(class).take(ipc));
        }
        let images = crate::kernels::index_select0(&train.images, &picked)?;
        let subset = DistilledDataset {
            images,
            labels,
            class_names: train.class_names.clone(),
            log_alpha: 0.01f64.ln(),
            ipc,
            provenance: Provenance {
                init_mode: InitMode::RealSample,
                seed,
                model_config_hash: config.config_hash(),
                dataset_digest: train.source_id.clone(),
                norm_stats: None,
            },
        };
        train_and_test_one(&subset, test, config, seed, epochs, augmentation)
    })?;
    Ok(EvalReport::aggregate(
        "random_real",
        per_seed,
        epochs,
        config.config_hash(),
    ))
}

pub const AUDIT_HISTOGRAM_BINS: usize = 32;

/// Per-distilled-image nearest-neighbor distances to the training set, in
/// de-normalized `[0,1]` pixel space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    /// Normalized per-pixel RMS distance to the nearest training image.
    pub nn_distance: Vec<f64>,
    pub nearest_index: Vec<usize>,
    pub min_distance: f64,
    /// Histogram of `nn_distance` over `[0, 1]` in equal bins.
    pub histogram: Vec<usize>,
}

/// Root-mean-square pixel distance between two flat image slices.
fn rms_distance<F: Elem>(a: &[F], b: &[F]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    (acc / a.len() as f64).sqrt()
}

/// Clamps every element into `[0,1]`, the export range for image pixels.
fn clamp_unit<F: Elem>(t: &Tensor<F>) -> Tensor<F> {
    t.map(|v| {
        let x = v.to_f64().clamp(0.0, 1.0);
        F::from_f64(x)
    })
}

/// De-normalizes distilled pixels back to `[0,1]` using the provenance
/// statistics (identity when the provenance carries none).
pub fn export_images<F: Elem>(dc: &DistilledDataset<F>) -> Result<Tensor<F>> {
    let images = match &dc.provenance.norm_stats {
        Some(stats) => denormalize_images(&dc.images, stats)?,
        None => dc.images.clone(),
    };
    Ok(clamp_unit(&images))
}

/// Exact brute-force nearest-neighbor audit of distilled images against the
/// raw `[0,1]` training images.
pub fn audit<F: Elem>(dc: &DistilledDataset<F>, train: &LabeledDataset<F>) -> Result<AuditReport> {
    let images = export_images(dc)?;
    let ds = images.shape();
    let ts = train.images.shape();
    if ds[1..] != ts[1..] {
        return Err(Error::ShapeMismatch {
            op: "audit",
            detail: format!("distilled {:?} vs train {:?}", ds, ts),
        });
    }
    let px: usize = ds[1..].iter().product();
    let d = images.data();
    let t = train.images.data();
    let mut nn_distance = Vec::with_capacity(ds[0]);
    let mut nearest_index = Vec::with_capacity(ds[0]);
    for i in 0..ds[0] {
        let a = &d[i * px..(i + 1) * px];
        let mut best = f64::INFINITY;
        let mut best_j = 0usize;
        for j in 0..ts[0] {
            let dist = rms_distance(a, &t[j * px..(j + 1) * px]);
            if dist < best {
                best = dist;
                best_j = j;
            }
        }
        nn_distance.push(best);
        nearest_index.push(best_j);
    }
    let min_distance = nn_distance.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut histogram = vec![0usize; AUDIT_HISTOGRAM_BINS];
    for &dist in &nn_distance {
        let bin = ((dist * AUDIT_HISTOGRAM_BINS as f64) as usize).min(AUDIT_HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    Ok(AuditReport {
        nn_distance,
        nearest_index,
        min_distance,
        histogram,
    })
}

/// Percentile (by `fraction` in `[0,1]`) of all pairwise distances between
/// distinct training images; the audit's reference scale.
pub fn pairwise_percentile<F: Elem>(train: &LabeledDataset<F>, fraction: f64) -> Result<f64> {
    let ts = train.images.shape();
    let n = ts[0];
    if n < 2 {
        return Err(Error::config("need at least two images for pairwise distances"));
    }
    let px: usize = ts[1..].iter().product();
    let t = train.images.data();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let a = &t[i * px..(i + 1) * px];
        for j in (i + 1)..n {
            dists.push(rms_distance(a, &t[j * px..(j + 1) * px]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = ((dists.len() as f64 - 1.0) * fraction.clamp(0.0, 1.0)).round() as usize;
    Ok(dists[rank])
}
