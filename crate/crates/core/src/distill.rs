//! Trajectory-matching distillation loop.
//!
//! Each outer step samples a teacher segment `(start, start + window)`,
//! initializes the student at the teacher's start parameters, unrolls a
//! fixed number of SGD updates on the augmented distilled images with a
//! trainable learning rate, and measures the normalized squared distance
//! between where the student landed and where the teacher went:
//!
//! ```text
//! loss = |student_end - teacher_target|^2 / |teacher_start - teacher_target|^2
//! ```
//!
//! The meta-gradient of that loss flows back through every unrolled update
//! into the distilled pixels and the log of the learning rate.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugDraw, AugmentationSpec};
use crate::data::{one_hot, LabeledDataset, NormStats};
use crate::elem::Elem;
use crate::envelope;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeRef};
use crate::model::{self, ModelConfig};
use crate::params::ParamVector;
use crate::rng;
use crate::tensor::Tensor;
use crate::trajectory::{Trajectory, TrajectoryStore};

/// Segments whose teacher movement falls below this squared norm are
/// rejected and resampled; the matching loss is undefined on them.
pub const DEGENERATE_SEGMENT_THRESHOLD: f64 = 1e-12;

const INITIAL_ALPHA: f64 = 0.01;

/// Inner objective the student minimizes during the unroll. The ConvNet
/// implements it; tests substitute tiny closed-form models.
pub trait StudentModel<F: Elem> {
    fn layout(&self) -> Arc<crate::params::Layout>;
    /// Mean classification loss of `params` on `(images, onehot)`.
    fn loss(
        &self,
        g: &mut Graph<F>,
        params: NodeRef,
        images: NodeRef,
        onehot: NodeRef,
    ) -> Result<NodeRef>;
}

/// ConvNet student: forward pass plus mean softmax cross-entropy.
pub struct ConvNetStudent {
    pub config: ModelConfig,
}

impl<F: Elem> StudentModel<F> for ConvNetStudent {
    fn layout(&self) -> Arc<crate::params::Layout> {
        Arc::new(self.config.layout())
    }

    fn loss(
        &self,
        g: &mut Graph<F>,
        params: NodeRef,
        images: NodeRef,
        onehot: NodeRef,
    ) -> Result<NodeRef> {
        let logits = model::forward_graph(g, &self.config, params, images)?;
        g.softmax_cross_entropy_mean(logits, onehot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Noise,
    RealSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub init_mode: InitMode,
    pub seed: u64,
    pub model_config_hash: String,
    pub dataset_digest: String,
    pub norm_stats: Option<NormStats>,
}

/// Learnable distilled set: images in normalized space, fixed class-major
/// labels, and the inner learning rate carried in log space so it stays
/// positive under any optimization history.
#[derive(Clone, Debug)]
pub struct DistilledDataset<F: Elem> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub log_alpha: f64,
    pub ipc: usize,
    pub provenance: Provenance,
}

impl<F: Elem> DistilledDataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn one_hot(&self) -> Tensor<F> {
        one_hot(&self.labels, self.class_count())
    }

    pub fn cast<G: Elem>(&self) -> DistilledDataset<G> {
        DistilledDataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            log_alpha: self.log_alpha,
            ipc: self.ipc,
            provenance: self.provenance.clone(),
        }
    }
}

/// Initializes a distilled dataset with `ipc` images per class.
///
/// Noise mode draws standard-normal pixels in normalized space; real-sample
/// mode copies per-class random training images. The learning rate starts
/// at `ln(0.01)` in log space.
pub fn init_distilled<F: Elem>(
    ds: &LabeledDataset<F>,
    ipc: usize,
    mode: InitMode,
    seed: u64,
    model_config_hash: &str,
    norm_stats: Option<NormStats>,
) -> Result<DistilledDataset<F>> {
    if ipc == 0 {
        return Err(Error::config("ipc must be at least 1"));
    }
    let classes = ds.class_count();
    let (c, h, w) = ds.image_dims();
    let px = c * h * w;
    let mut labels = Vec::with_capacity(classes * ipc);
    for class in 0..classes {
        labels.extend(std::iter::repeat(class).take(ipc));
    }
    let images = match mode {
        InitMode::Noise => {
            let mut rng = rng::stream(seed, "distill-init-noise");
            let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
            let data: Vec<F> = (0..classes * ipc * px)
                .map(|_| F::from_f64(rand_distr::Distribution::sample(&normal, &mut rng)))
                .collect();
            Tensor::new(vec![classes * ipc, c, h, w], data)?
        }
        InitMode::RealSample => {
            let mut rng = rng::stream(seed, "distill-init-real");
            let mut picked = Vec::with_capacity(classes * ipc);
            for class in 0..classes {
                let mut idx = ds.indices_of_class(class);
                if idx.len() < ipc {
                    return Err(Error::config(format!(
                        "class {class} has {} examples, fewer than ipc {ipc}",
                        idx.len()
                    )));
                }
                idx.shuffle(&mut rng);
                picked.extend_from_slice(&idx[..ipc]);
            }
            crate::kernels::index_select0(&ds.images, &picked)?
        }
    };
    Ok(DistilledDataset {
        images,
        labels,
        class_names: ds.class_names.clone(),
        log_alpha: INITIAL_ALPHA.ln(),
        ipc,
        provenance: Provenance {
            init_mode: mode,
            seed,
            model_config_hash: model_config_hash.to_string(),
            dataset_digest: ds.source_id.clone(),
            norm_stats,
        },
    })
}

/// One student update: `theta - alpha * d loss(augment(images)) / d theta`,
/// emitted with `create_graph` so the result stays differentiable with
/// respect to `theta`, the images, and `alpha`.
pub fn inner_step<F: Elem, M: StudentModel<F>>(
    g: &mut Graph<F>,
    student: &M,
    theta: NodeRef,
    images: NodeRef,
    onehot: NodeRef,
    alpha: NodeRef,
    draw: &AugDraw,
) -> Result<NodeRef> {
    let augmented = augment::apply(g, images, draw)?;
    let loss = student.loss(g, theta, augmented, onehot)?;
    let grad_theta = g.grad(loss, &[theta], true)?[0];
    let plen = g.value(theta).numel();
    let alpha_b = g.broadcast_to(alpha, &[plen])?;
    let step = g.mul(alpha_b, grad_theta)?;
    g.sub(theta, step)
}

/// Squared distance between two flat vectors, accumulated in the same
/// sequential order the graph reduction uses.
fn norm_sq_value<F: Elem>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    let mut acc = F::ZERO;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "norm_sq_value",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc)
}

/// Normalized squared matching loss as a graph node, differentiable with
/// respect to the student endpoint. Fails with [`Error::DegenerateSegment`]
/// when the teacher barely moved, so callers resample instead of dividing
/// by a vanishing norm.
pub fn match_loss_graph<F: Elem>(
    g: &mut Graph<F>,
    student_final: NodeRef,
    teacher_start: &ParamVector<F>,
    teacher_target: &ParamVector<F>,
) -> Result<NodeRef> {
    let denom = norm_sq_value(teacher_start.data(), teacher_target.data())?;
    if denom.to_f64() < DEGENERATE_SEGMENT_THRESHOLD {
        return Err(Error::DegenerateSegment);
    }
    let target = g.constant(teacher_target.data().clone());
    let diff = g.sub(student_final, target)?;
    let num = g.norm_sq(diff)?;
    let denom_node = g.scalar(denom);
    g.div(num, denom_node)
}

/// Value-level matching loss over three parameter vectors.
pub fn match_loss<F: Elem>(
    student_final: &ParamVector<F>,
    teacher_start: &ParamVector<F>,
    teacher_target: &ParamVector<F>,
) -> Result<F> {
    let mut g = Graph::new();
    let s = g.constant(student_final.data().clone());
    let loss = match_loss_graph(&mut g, s, teacher_start, teacher_target)?;
    g.value(loss).item()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "size")]
pub enum InnerBatchPolicy {
    /// Every distilled image participates in every inner step.
    Full,
    /// A uniform random subset per inner step.
    Minibatch(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Student updates per outer step (J).
    pub inner_steps: usize,
    /// Teacher steps ahead of the shared start (K).
    pub teacher_window: usize,
    /// Cap on the sampled start step.
    pub max_start_step: usize,
    pub outer_steps: usize,
    pub ipc: usize,
    pub init_mode: InitMode,
    pub image_lr: f64,
    pub alpha_lr: f64,
    pub momentum: f64,
    pub inner_batch: InnerBatchPolicy,
    /// Evaluate every this many outer steps; 0 disables periodic eval.
    pub eval_every: usize,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
}

impl DistillConfig {
    pub fn defaults(ipc: usize, teacher_epochs: usize, seed: u64) -> Self {
        DistillConfig {
            inner_steps: 20,
            teacher_window: 2,
            max_start_step: teacher_epochs / 2,
            outer_steps: 500,
            ipc,
            init_mode: InitMode::Noise,
            image_lr: 100.0,
            alpha_lr: 1e-5,
            momentum: 0.5,
            inner_batch: InnerBatchPolicy::Full,
            eval_every: 0,
            seed,
            augmentation: AugmentationSpec::default_distill(),
        }
    }

    pub fn validate(&self, trajectory_len: usize) -> Result<()> {
        if self.inner_steps == 0 || self.teacher_window == 0 {
            return Err(Error::config("inner steps and teacher window must be at least 1"));
        }
        if trajectory_len == 0 {
            return Err(Error::config("trajectories are empty"));
        }
        if self.max_start_step + self.teacher_window > trajectory_len - 1 {
            return Err(Error::config(format!(
                "max start {} + window {} exceeds trajectory length {} - 1",
                self.max_start_step,
                self.teacher_window,
                trajectory_len
            )));
        }
        self.augmentation.validate()
    }
}

/// In-memory fleet of teacher trajectories sharing one config and digest.
pub struct TeacherBank<F: Elem> {
    pub trajectories: Vec<Trajectory<F>>,
}

impl<F: Elem> TeacherBank<F> {
    pub fn new(trajectories: Vec<Trajectory<F>>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::config("teacher bank needs at least one trajectory"))?;
        let len = first.len();
        if !trajectories
            .iter()
            .all(|t| t.config_hash == first.config_hash && t.len() == len)
        {
            return Err(Error::config(
                "teacher trajectories disagree on config or length",
            ));
        }
        Ok(TeacherBank { trajectories })
    }

    pub fn load(store: &TrajectoryStore) -> Result<Self> {
        let trajectories = (0..store.count())
            .map(|i| store.load(i))
            .collect::<Result<Vec<_>>>()?;
        TeacherBank::new(trajectories)
    }

    pub fn trajectory_len(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.trajectories[0].model_config
    }
}

/// Mutable distillation state threaded through outer steps.
pub struct MatchState<F: Elem> {
    pub outer_step: usize,
    pub losses: Vec<f64>,
    pub segment_rng: ChaCha8Rng,
    pub aug_rng: ChaCha8Rng,
    pub batch_rng: ChaCha8Rng,
    pub best: Option<BestSnapshot<F>>,
    velocity_images: Tensor<F>,
    velocity_alpha: f64,
}

#[derive(Clone, Debug)]
pub struct BestSnapshot<F: Elem> {
    pub dataset: DistilledDataset<F>,
    pub accuracy: f64,
    pub step: usize,
}

impl<F: Elem> MatchState<F> {
    pub fn new(dc: &DistilledDataset<F>, seed: u64) -> Self {
        MatchState {
            outer_step: 0,
            losses: Vec::new(),
            segment_rng: rng::stream(seed, "distill-segments"),
            aug_rng: rng::stream(seed, "distill-aug"),
            batch_rng: rng::stream(seed, "distill-batches"),
            best: None,
            velocity_images: Tensor::zeros(dc.images.shape().to_vec()),
            velocity_alpha: 0.0,
        }
    }
}

/// Per-inner-step plan: the augmentation draw plus an optional row subset.
struct StepPlan {
    draw: AugDraw,
    subset: Option<Arc<Vec<usize>>>,
}

fn plan_steps<F: Elem>(
    dc: &DistilledDataset<F>,
    cfg: &DistillConfig,
    state: &mut MatchState<F>,
) -> Result<Vec<StepPlan>> {
    let total = dc.len();
    let mut plans = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        let subset = match cfg.inner_batch {
            InnerBatchPolicy::Full => None,
            InnerBatchPolicy::Minibatch(size) => {
                let size = size.min(total).max(1);
                let mut idx: Vec<usize> = (0..total).collect();
                idx.shuffle(&mut state.batch_rng);
                idx.truncate(size);
                idx.sort_unstable();
                Some(Arc::new(idx))
            }
        };
        let batch = subset.as_ref().map(|s| s.len()).unwrap_or(total);
        let draw = augment::sample(&cfg.augmentation, batch, &mut state.aug_rng)?;
        plans.push(StepPlan { draw, subset });
    }
    Ok(plans)
}

/// Emits the whole outer objective into `g`: unrolls the planned inner
/// steps from the teacher start and returns the matching-loss node.
#[allow(clippy::too_many_arguments)]
fn outer_objective<F: Elem, M: StudentModel<F>>(
    g: &mut Graph<F>,
    student: &M,
    theta_start: &ParamVector<F>,
    theta_target: &ParamVector<F>,
    images: NodeRef,
    onehot_full: &Tensor<F>,
    labels: &[usize],
    classes: usize,
    log_alpha: NodeRef,
    plans: &[StepPlan],
) -> Result<NodeRef> {
    let alpha = g.exp(log_alpha)?;
    let mut theta = g.constant(theta_start.data().clone());
    for plan in plans {
        let (step_images, step_onehot) = match &plan.subset {
            None => (images, g.constant(onehot_full.clone())),
            Some(idx) => {
                let imgs = g.index_select0(images, Arc::clone(idx))?;
                let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                (imgs, g.constant(one_hot::<F>(&sub_labels, classes)))
            }
        };
        theta = inner_step(g, student, theta, step_images, step_onehot, alpha, &plan.draw)?;
    }
    match_loss_graph(g, theta, theta_start, theta_target)
}

/// Output of one outer step.
pub struct OuterStepReport {
    pub loss: f64,
    pub trajectory_index: usize,
    pub start_step: usize,
}

/// Runs one outer step: samples a non-degenerate teacher segment, unrolls
/// the student, and applies the meta-gradient to the distilled images and
/// log-alpha with momentum SGD.
pub fn outer_step<F: Elem, M: StudentModel<F>>(
    state: &mut MatchState<F>,
    bank: &TeacherBank<F>,
    dc: &mut DistilledDataset<F>,
    cfg: &DistillConfig,
    student: &M,
) -> Result<OuterStepReport> {
    cfg.validate(bank.trajectory_len())?;

    // Sample a segment, rejecting degenerate ones a bounded number of times.
    let mut chosen = None;
    for _attempt in 0..10 {
        let t = state.segment_rng.gen_range(0..bank.trajectories.len());
        let i = state.segment_rng.gen_range(0..=cfg.max_start_step);
        let traj = &bank.trajectories[t];
        let start = &traj.snapshots[i];
        let target = &traj.snapshots[i + cfg.teacher_window];
        let denom = norm_sq_value(start.data(), target.data())?.to_f64();
        if denom >= DEGENERATE_SEGMENT_THRESHOLD {
            chosen = Some((t, i));
            break;
        }
    }
    let (t, i) = chosen.ok_or(Error::DegenerateSegment)?;
    let traj = &bank.trajectories[t];
    let theta_start = traj.snapshots[i].clone();
    let theta_target = traj.snapshots[i + cfg.teacher_window].clone();

    let plans = plan_steps(dc, cfg, state)?;
    let onehot = dc.one_hot();

    let mut g = Graph::new();
    let images = g.param(dc.images.clone());
    let log_alpha = g.param(Tensor::scalar(F::from_f64(dc.log_alpha)));
    let loss_node = outer_objective(
        &mut g,
        student,
        &theta_start,
        &theta_target,
        images,
        &onehot,
        &dc.labels,
        dc.class_count(),
        log_alpha,
        &plans,
    )?;
    let loss = g.value(loss_node).item()?.to_f64();
    let grads = g
        .grad(loss_node, &[images, log_alpha], false)
        .map_err(|e| match e {
            Error::NonFinite { op } => {
                eprintln!(
                    "meta-gradient diverged at outer step {} (op {op}, trajectory {t}, start {i}, loss {loss})",
                    state.outer_step
                );
                Error::NonFinite { op }
            }
            other => other,
        })?;
    let g_images = g.value(grads[0]).clone();
    let g_alpha = g.value(grads[1]).item()?.to_f64();

    let mu = F::from_f64(cfg.momentum);
    state.velocity_images = state
        .velocity_images
        .zip_map(&g_images, |v, gr| mu * v + gr)?;
    let lr_img = F::from_f64(cfg.image_lr);
    dc.images = dc
        .images
        .zip_map(&state.velocity_images, |p, v| p - lr_img * v)?;
    if !dc.images.all_finite() {
        return Err(Error::NonFinite { op: "outer_update" });
    }
    state.velocity_alpha = cfg.momentum * state.velocity_alpha + g_alpha;
    dc.log_alpha -= cfg.alpha_lr * state.velocity_alpha;

    state.outer_step += 1;
    state.losses.push(loss);
    Ok(OuterStepReport {
        loss,
        trajectory_index: t,
        start_step: i,
    })
}

/// One row of the per-step loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
    pub eval_acc: Option<f64>,
}

/// Renders the loss log as CSV with a fixed schema.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,alpha,eval_acc\n");
    for r in rows {
        let acc = r.eval_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.alpha, acc));
    }
    out
}

/// Periodic evaluation callback: maps a snapshot to a mean accuracy.
pub type Evaluator<'a, F> = dyn Fn(&DistilledDataset<F>) -> Result<f64> + 'a;

pub struct RunOutput<F: Elem> {
    /// Best-evaluated snapshot when periodic eval ran, else the final state.
    pub distilled: DistilledDataset<F>,
    pub final_state: DistilledDataset<F>,
    pub log: Vec<LogRow>,
    pub best: Option<(usize, f64)>,
}

/// Full distillation run: initializes the distilled set, iterates outer
/// steps, optionally evaluates snapshots, and returns the best snapshot
/// plus the per-step loss log.
pub fn run<F: Elem, M: StudentModel<F>>(
    bank: &TeacherBank<F>,
    train: &LabeledDataset<F>,
    cfg: &DistillConfig,
    student: &M,
    evaluator: Option<&Evaluator<'_, F>>,
) -> Result<RunOutput<F>> {
    cfg.validate(bank.trajectory_len())?;
    let norm_stats = bank.trajectories[0].norm_stats.clone();
    let mut dc = init_distilled(
        train,
        cfg.ipc,
        cfg.init_mode,
        cfg.seed,
        &bank.trajectories[0].config_hash,
        norm_stats,
    )?;
    let mut state = MatchState::new(&dc, cfg.seed);
    let mut log = Vec::with_capacity(cfg.outer_steps);

    for step in 0..cfg.outer_steps {
        let report = outer_step(&mut state, bank, &mut dc, cfg, student)?;
        let mut eval_acc = None;
        let is_last = step + 1 == cfg.outer_steps;
        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || is_last) {
            if let Some(eval) = evaluator {
                let acc = eval(&dc)?;
                eval_acc = Some(acc);
                let better = state
                    .best
                    .as_ref()
                    .map(|b| acc > b.accuracy)
                    .unwrap_or(true);
                if better {
                    state.best = Some(BestSnapshot {
                        dataset: dc.clone(),
                        accuracy: acc,
                        step,
                    });
                }
            }
        }
        log.push(LogRow {
            step,
            loss: report.loss,
            alpha: dc.alpha(),
            eval_acc,
        });
    }

    let best = state.best.as_ref().map(|b| (b.step, b.accuracy));
    let distilled = state
        .best
        .map(|b| b.dataset)
        .unwrap_or_else(|| dc.clone());
    Ok(RunOutput {
        distilled,
        final_state: dc,
        log,
        best,
    })
}

// ── persistence (content kind DFDC) ─────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DistilledMeta {
    labels: Vec<usize>,
    class_names: Vec<String>,
    log_alpha: f64,
    ipc: usize,
    image_shape: Vec<usize>,
    provenance: Provenance,
}

/// Writes a distilled dataset in the shared envelope, kind `DFDC`.
pub fn save_distilled<F: Elem>(path: &Path, dc: &DistilledDataset<F>) -> Result<()> {
    let meta = DistilledMeta {
        labels: dc.labels.clone(),
        class_names: dc.class_names.clone(),
        log_alpha: dc.log_alpha,
        ipc: dc.ipc,
        image_shape: dc.images.shape().to_vec(),
        provenance: dc.provenance.clone(),
    };
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| Error::config(format!("metadata serialization failed: {e}")))?;
    let payload: Vec<f32> = dc.images.data().iter().map(|&v| v.to_f32()).collect();
    envelope::write_file(path, envelope::KIND_DISTILLED, &meta_json, &payload)
}

pub fn load_distilled<F: Elem>(path: &Path) -> Result<DistilledDataset<F>> {
    let env = envelope::read_file(path, Some(envelope::KIND_DISTILLED))?;
    let label = path.display().to_string();
    let meta: DistilledMeta = serde_json::from_str(&env.metadata)
        .map_err(|e| Error::format(&label, format!("bad metadata: {e}")))?;
    let numel: usize = meta.image_shape.iter().product();
    if env.payload.len() != numel {
        return Err(Error::format(
            &label,
            format!("payload holds {} values, expected {numel}", env.payload.len()),
        ));
    }
    let data: Vec<F> = env.payload.iter().map(|&v| F::from_f32(v)).collect();
    Ok(DistilledDataset {
        images: Tensor::new(meta.image_shape, data)?,
        labels: meta.labels,
        class_names: meta.class_names,
        log_alpha: meta.log_alpha,
        ipc: meta.ipc,
        provenance: meta.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussians;
    use crate::trajectory::OptimizerDescriptor;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            depth: 1,
            width: 2,
            in_channels: 1,
            height: 4,
            width_px: 4,
            class_count: 2,
        }
    }

    fn toy_train() -> LabeledDataset<f64> {
        let ds = synth_gaussians::<f64>(2, 40, (1, 4, 4), 0.5, 21).unwrap();
        let stats = crate::data::compute_stats(&ds).unwrap();
        crate::data::normalize(&ds, &stats).unwrap()
    }

    fn toy_bank() -> TeacherBank<f64> {
        let ds = toy_train();
        let hyper = OptimizerDescriptor::sgd(0.05, 0.9, 16);
        let trajs: Vec<_> = (0..2)
            .map(|s| {
                crate::trajectory::train_teacher(&ds, &toy_config(), 4, &hyper, s, None).unwrap()
            })
            .collect();
        TeacherBank::new(trajs).unwrap()
    }

    fn toy_distill_cfg() -> DistillConfig {
        DistillConfig {
            inner_steps: 2,
            teacher_window: 1,
            max_start_step: 2,
            outer_steps: 3,
            ipc: 1,
            init_mode: InitMode::Noise,
            image_lr: 10.0,
            alpha_lr: 1e-4,
            momentum: 0.5,
            inner_batch: InnerBatchPolicy::Full,
            eval_every: 0,
            seed: 5,
            augmentation: AugmentationSpec::identity(),
        }
    }

    #[test]
    fn init_noise_is_seeded_and_balanced() {
        let ds = toy_train();
        let a = init_distilled(&ds, 1, InitMode::Noise, 3, "h", None).unwrap();
        let b = init_distilled(&ds, 1, InitMode::Noise, 3, "h", None).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, vec![0, 1]);
        assert_eq!(a.len(), 2);
        assert!((a.alpha() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn init_real_copies_training_rows() {
        let ds = toy_train();
        let dc = init_distilled(&ds, 2, InitMode::RealSample, 9, "h", None).unwrap();
        assert_eq!(dc.len(), 4);
        let px = 16;
        for (row, &label) in dc.labels.iter().enumerate() {
            let img = &dc.images.data()[row * px..(row + 1) * px];
            let found = (0..ds.len()).any(|i| {
                ds.labels[i] == label && &ds.images.data()[i * px..(i + 1) * px] == img
            });
            assert!(found, "distilled row {row} is not a training image");
        }
    }

    #[test]
    fn init_real_requires_enough_examples() {
        let ds = toy_train();
        assert!(init_distilled(&ds, 41, InitMode::RealSample, 0, "h", None).is_err());
    }

    #[test]
    fn match_loss_anchors() {
        let layout = Arc::new(crate::params::Layout::new(vec![(
            "w".into(),
            vec![3],
        )]));
        let mk = |v: Vec<f64>| {
            ParamVector::new(Tensor::from_vec(v), Arc::clone(&layout)).unwrap()
        };
        let start = mk(vec![0.0, 0.0, 1.0]);
        let target = mk(vec![1.0, 1.0, 1.0]);
        assert_eq!(match_loss(&target, &start, &target).unwrap(), 0.0);
        assert_eq!(match_loss(&start, &start, &target).unwrap(), 1.0);
        // direct evaluation: |(1,0,1)-(1,1,1)|^2 / |(0,0,1)-(1,1,1)|^2 = 1/2
        let mid = mk(vec![1.0, 0.0, 1.0]);
        assert!((match_loss(&mid, &start, &target).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn match_loss_rejects_degenerate_segment() {
        let layout = Arc::new(crate::params::Layout::new(vec![("w".into(), vec![2])]));
        let p = ParamVector::new(Tensor::from_vec(vec![0.5f64, -0.5]), layout).unwrap();
        assert!(matches!(
            match_loss(&p, &p, &p),
            Err(Error::DegenerateSegment)
        ));
    }

    #[test]
    fn inner_step_with_zero_alpha_is_identity() {
        let student = ConvNetStudent { config: toy_config() };
        let model = model::build::<f64>(&toy_config(), 1).unwrap();
        let ds = toy_train();
        let dc = init_distilled(&ds, 1, InitMode::Noise, 2, "h", None).unwrap();
        let mut g = Graph::new();
        let theta = g.constant(model.params.data().clone());
        let images = g.constant(dc.images.clone());
        let onehot = g.constant(dc.one_hot());
        let alpha = g.scalar(0.0);
        let out = inner_step(
            &mut g,
            &student,
            theta,
            images,
            onehot,
            alpha,
            &AugDraw::identity(2),
        )
        .unwrap();
        assert_eq!(g.value(out).data(), model.params.data().data());
    }

    #[test]
    fn inner_step_matches_logistic_hand_gradient() {
        // One trainable logit against a frozen zero logit, single example,
        // alpha 0.1: gradient is sigma(0) - 1 = -0.5, so w' = 0.05.
        struct Logistic;
        impl StudentModel<f64> for Logistic {
            fn layout(&self) -> Arc<crate::params::Layout> {
                Arc::new(crate::params::Layout::new(vec![("w".into(), vec![1])]))
            }
            fn loss(
                &self,
                g: &mut Graph<f64>,
                params: NodeRef,
                images: NodeRef,
                onehot: NodeRef,
            ) -> Result<NodeRef> {
                // logits = [w * mean(images), 0]; the image mean is 1 here
                let m = g.mean_all(images)?;
                let m1 = g.reshape(m, &[1])?;
                let w = g.mul(params, m1)?;
                let zero = g.constant(Tensor::from_vec(vec![0.0]));
                let row = g.concat0(&[w, zero])?;
                let logits = g.reshape(row, &[1, 2])?;
                g.softmax_cross_entropy_mean(logits, onehot)
            }
        }
        let mut g = Graph::new();
        let theta = g.constant(Tensor::from_vec(vec![0.0f64]));
        let images = g.constant(Tensor::filled(vec![1, 1, 1, 1], 1.0));
        let onehot = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let alpha = g.scalar(0.1);
        let out = inner_step(
            &mut g,
            &Logistic,
            theta,
            images,
            onehot,
            alpha,
            &AugDraw::identity(1),
        )
        .unwrap();
        let w1 = g.value(out).data()[0];
        assert!((w1 - 0.05).abs() < 1e-12, "w'={w1}");
    }

    #[test]
    fn zero_outer_learning_rates_leave_dataset_unchanged() {
        let bank = toy_bank();
        let ds = toy_train();
        let mut cfg = toy_distill_cfg();
        cfg.image_lr = 0.0;
        cfg.alpha_lr = 0.0;
        let student = ConvNetStudent { config: toy_config() };
        let mut dc = init_distilled(&ds, 1, InitMode::Noise, 4, "h", None).unwrap();
        let before = dc.clone();
        let mut state = MatchState::new(&dc, cfg.seed);
        let report = outer_step(&mut state, &bank, &mut dc, &cfg, &student).unwrap();
        assert!(report.loss.is_finite());
        assert_eq!(dc.images.data(), before.images.data());
        assert_eq!(dc.log_alpha, before.log_alpha);
    }

    #[test]
    fn run_with_zero_steps_returns_initialization() {
        let bank = toy_bank();
        let ds = toy_train();
        let mut cfg = toy_distill_cfg();
        cfg.outer_steps = 0;
        let student = ConvNetStudent { config: toy_config() };
        let out = run(&bank, &ds, &cfg, &student, None).unwrap();
        let expect = init_distilled(
            &ds,
            cfg.ipc,
            cfg.init_mode,
            cfg.seed,
            &bank.trajectories[0].config_hash,
            None,
        )
        .unwrap();
        assert_eq!(out.distilled.images.data(), expect.images.data());
        assert!(out.log.is_empty());
    }

    #[test]
    fn run_is_deterministic() {
        let bank = toy_bank();
        let ds = toy_train();
        let cfg = toy_distill_cfg();
        let student = ConvNetStudent { config: toy_config() };
        let a = run(&bank, &ds, &cfg, &student, None).unwrap();
        let b = run(&bank, &ds, &cfg, &student, None).unwrap();
        assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
        assert_eq!(a.distilled.images.data(), b.distilled.images.data());
    }

    #[test]
    fn labels_stay_immutable_through_a_run() {
        let bank = toy_bank();
        let ds = toy_train();
        let cfg = toy_distill_cfg();
        let student = ConvNetStudent { config: toy_config() };
        let out = run(&bank, &ds, &cfg, &student, None).unwrap();
        assert_eq!(out.distilled.labels, vec![0, 1]);
        assert_eq!(out.final_state.labels, vec![0, 1]);
        assert!(out.distilled.alpha() > 0.0);
    }

    #[test]
    fn unroll_equals_manual_inner_steps_bit_exactly() {
        let bank = toy_bank();
        let ds = toy_train();
        let cfg = toy_distill_cfg();
        let student = ConvNetStudent { config: toy_config() };
        let dc = init_distilled(&ds, 1, InitMode::Noise, 4, "h", None).unwrap();

        // Plan the same draws the outer objective would use.
        let mut state = MatchState::new(&dc, cfg.seed);
        let plans = plan_steps(&dc, &cfg, &mut state).unwrap();
        let theta_start = bank.trajectories[0].snapshots[0].clone();
        let theta_target = bank.trajectories[0].snapshots[1].clone();

        let mut g1 = Graph::new();
        let images1 = g1.param(dc.images.clone());
        let la1 = g1.param(Tensor::scalar(dc.log_alpha));
        let loss1 = outer_objective(
            &mut g1,
            &student,
            &theta_start,
            &theta_target,
            images1,
            &dc.one_hot(),
            &dc.labels,
            dc.class_count(),
            la1,
            &plans,
        )
        .unwrap();

        // Manual loop over inner_step with the identical draws.
        let mut g2 = Graph::new();
        let images2 = g2.param(dc.images.clone());
        let la2 = g2.param(Tensor::scalar(dc.log_alpha));
        let alpha2 = g2.exp(la2).unwrap();
        let onehot2 = g2.constant(dc.one_hot());
        let mut theta = g2.constant(theta_start.data().clone());
        for plan in &plans {
            assert!(plan.subset.is_none());
            theta = inner_step(
                &mut g2,
                &student,
                theta,
                images2,
                onehot2,
                alpha2,
                &plan.draw,
            )
            .unwrap();
        }
        let loss2 = match_loss_graph(&mut g2, theta, &theta_start, &theta_target).unwrap();

        assert_eq!(g1.value(loss1).data(), g2.value(loss2).data());
    }

    #[test]
    fn distilled_file_roundtrip() {
        let ds = toy_train();
        let dc = init_distilled(&ds, 2, InitMode::Noise, 8, "confighash", None).unwrap();
        let dc32 = dc.cast::<f32>();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dfdc");
        save_distilled(&path, &dc32).unwrap();
        let back: DistilledDataset<f32> = load_distilled(&path).unwrap();
        assert_eq!(back.images.data(), dc32.images.data());
        assert_eq!(back.labels, dc32.labels);
        assert_eq!(back.log_alpha, dc32.log_alpha);
        assert_eq!(back.provenance, dc32.provenance);
    }
}
