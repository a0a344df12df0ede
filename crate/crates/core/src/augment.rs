//! Seeded differentiable image augmentation.
//!
//! A spec describes an ordered stochastic pipeline; sampling it for a batch
//! produces an [`AugDraw`] that pins every transform parameter, and applying
//! a draw is a pure differentiable function of the pixels. Geometric ops go
//! through bilinear grid sampling on a reflect-padded canvas; sampled
//! parameters enter the graph as constants, so gradients flow to the pixels
//! and not to the draw.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeRef};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugOpKind {
    HorizontalFlip,
    /// Shift by up to `max_fraction` of the image extent, per axis.
    Translate { max_fraction: f64 },
    Rotate { max_degrees: f64 },
    Scale { lo: f64, hi: f64 },
    /// Square hole covering `hole_fraction` of each spatial extent, filled
    /// with the per-image mean so statistics outside the hole are untouched.
    Cutout { hole_fraction: f64 },
    Brightness { max_delta: f64 },
    Contrast { lo: f64, hi: f64 },
}

impl AugOpKind {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            AugOpKind::HorizontalFlip => true,
            // Bounds keep every sampled grid within one reflection period
            // of the padded canvas.
            AugOpKind::Translate { max_fraction } => (0.0..=0.25).contains(max_fraction),
            AugOpKind::Rotate { max_degrees } => (0.0..=30.0).contains(max_degrees),
            AugOpKind::Scale { lo, hi } => 0.5 <= *lo && lo <= hi && *hi <= 1.5,
            AugOpKind::Cutout { hole_fraction } => (0.0..=0.5).contains(hole_fraction),
            AugOpKind::Brightness { max_delta } => (0.0..=1.0).contains(max_delta),
            AugOpKind::Contrast { lo, hi } => 0.0 < *lo && lo <= hi && *hi <= 2.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("augmentation parameters out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugOp {
    #[serde(flatten)]
    pub kind: AugOpKind,
    pub probability: f64,
}

/// Ordered, seeded augmentation pipeline description. An empty op list is
/// the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentationSpec {
    pub ops: Vec<AugOp>,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec { ops: Vec::new() }
    }

    /// Default distillation pipeline; recorded in run manifests.
    pub fn default_distill() -> Self {
        let ops = vec![
            (AugOpKind::HorizontalFlip, 0.5),
            (AugOpKind::Translate { max_fraction: 0.125 }, 0.5),
            (AugOpKind::Rotate { max_degrees: 15.0 }, 0.5),
            (AugOpKind::Scale { lo: 0.85, hi: 1.15 }, 0.5),
            (AugOpKind::Cutout { hole_fraction: 0.25 }, 0.5),
            (AugOpKind::Brightness { max_delta: 0.2 }, 0.5),
            (AugOpKind::Contrast { lo: 0.8, hi: 1.2 }, 0.5),
        ];
        AugmentationSpec {
            ops: ops
                .into_iter()
                .map(|(kind, probability)| AugOp { kind, probability })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            if !(0.0..=1.0).contains(&op.probability) {
                return Err(Error::config("op probability must be in [0, 1]"));
            }
            op.kind.validate()?;
        }
        Ok(())
    }
}

/// Concrete sampled parameters for one op over one batch. Gated-off images
/// carry the identity value for their parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum OpDraw {
    Flip { apply: Vec<bool> },
    Translate { dx: Vec<f64>, dy: Vec<f64> },
    Rotate { radians: Vec<f64> },
    Scale { factor: Vec<f64> },
    Cutout { apply: Vec<bool>, cx: Vec<f64>, cy: Vec<f64>, hole_fraction: f64 },
    Brightness { delta: Vec<f64> },
    Contrast { factor: Vec<f64> },
}

/// Fully determined transform for one batch application.
#[derive(Clone, Debug, PartialEq)]
pub struct AugDraw {
    pub batch: usize,
    pub ops: Vec<OpDraw>,
}

impl AugDraw {
    pub fn identity(batch: usize) -> Self {
        AugDraw { batch, ops: Vec::new() }
    }
}

/// Samples concrete parameters for a batch, advancing the RNG. Parameters
/// are drawn for every image regardless of its gate, so the stream position
/// depends only on (spec, batch size).
pub fn sample(spec: &AugmentationSpec, batch: usize, rng: &mut ChaCha8Rng) -> Result<AugDraw> {
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    spec.validate()?;
    let mut ops = Vec::with_capacity(spec.ops.len());
    for op in &spec.ops {
        let mut gates = Vec::with_capacity(batch);
        for _ in 0..batch {
            gates.push(rng.gen::<f64>() < op.probability);
        }
        let draw = match op.kind {
            AugOpKind::HorizontalFlip => OpDraw::Flip { apply: gates },
            AugOpKind::Translate { max_fraction } => {
                let mut dx = Vec::with_capacity(batch);
                let mut dy = Vec::with_capacity(batch);
                for &gate in &gates {
                    let x = rng.gen_range(-max_fraction..=max_fraction);
                    let y = rng.gen_range(-max_fraction..=max_fraction);
                    dx.push(if gate { x } else { 0.0 });
                    dy.push(if gate { y } else { 0.0 });
                }
                OpDraw::Translate { dx, dy }
            }
            AugOpKind::Rotate { max_degrees } => {
                let mut radians = Vec::with_capacity(batch);
                for &gate in &gates {
                    let deg = rng.gen_range(-max_degrees..=max_degrees);
                    radians.push(if gate { deg.to_radians() } else { 0.0 });
                }
                OpDraw::Rotate { radians }
            }
            AugOpKind::Scale { lo, hi } => {
                let mut factor = Vec::with_capacity(batch);
                for &gate in &gates {
                    let s = rng.gen_range(lo..=hi);
                    factor.push(if gate { s } else { 1.0 });
                }
                OpDraw::Scale { factor }
            }
            AugOpKind::Cutout { hole_fraction } => {
                let mut cx = Vec::with_capacity(batch);
                let mut cy = Vec::with_capacity(batch);
                for _ in 0..batch {
                    cx.push(rng.gen::<f64>());
                    cy.push(rng.gen::<f64>());
                }
                OpDraw::Cutout { apply: gates, cx, cy, hole_fraction }
            }
            AugOpKind::Brightness { max_delta } => {
                let mut delta = Vec::with_capacity(batch);
                for &gate in &gates {
                    let d = rng.gen_range(-max_delta..=max_delta);
                    delta.push(if gate { d } else { 0.0 });
                }
                OpDraw::Brightness { delta }
            }
            AugOpKind::Contrast { lo, hi } => {
                let mut factor = Vec::with_capacity(batch);
                for &gate in &gates {
                    let f = rng.gen_range(lo..=hi);
                    factor.push(if gate { f } else { 1.0 });
                }
                OpDraw::Contrast { factor }
            }
        };
        ops.push(draw);
    }
    Ok(AugDraw { batch, ops })
}

fn is_identity(op: &OpDraw) -> bool {
    match op {
        OpDraw::Flip { apply } => apply.iter().all(|&a| !a),
        OpDraw::Translate { dx, dy } => {
            dx.iter().all(|&v| v == 0.0) && dy.iter().all(|&v| v == 0.0)
        }
        OpDraw::Rotate { radians } => radians.iter().all(|&v| v == 0.0),
        OpDraw::Scale { factor } => factor.iter().all(|&v| v == 1.0),
        OpDraw::Cutout { apply, .. } => apply.iter().all(|&a| !a),
        OpDraw::Brightness { delta } => delta.iter().all(|&v| v == 0.0),
        OpDraw::Contrast { factor } => factor.iter().all(|&v| v == 1.0),
    }
}

/// Builds one pixel-coordinate sampling grid per image.
fn build_grid<F: Elem>(
    batch: usize,
    h: usize,
    w: usize,
    coord: impl Fn(usize, f64, f64) -> (f64, f64),
) -> Tensor<F> {
    let mut data = Vec::with_capacity(batch * h * w * 2);
    for img in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let (gx, gy) = coord(img, x as f64, y as f64);
                data.push(F::from_f64(gx));
                data.push(F::from_f64(gy));
            }
        }
    }
    Tensor::new(vec![batch, h, w, 2], data).expect("grid shape")
}

/// Broadcastable per-image scalar plane `[N,1,1,1]`.
fn per_image_scalars<F: Elem>(values: &[f64]) -> Tensor<F> {
    Tensor::new(
        vec![values.len(), 1, 1, 1],
        values.iter().map(|&v| F::from_f64(v)).collect(),
    )
    .expect("scalar plane")
}

/// Per-(image, channel) spatial mean, broadcast back to the batch shape.
fn spatial_mean_broadcast<F: Elem>(
    g: &mut Graph<F>,
    batch: NodeRef,
    shape: &[usize],
) -> Result<NodeRef> {
    let stat = [shape[0], shape[1], 1, 1];
    let s = g.sum_to(batch, &stat)?;
    let m = g.scale(s, F::from_f64(1.0 / (shape[2] * shape[3]) as f64))?;
    g.broadcast_to(m, shape)
}

/// Applies a sampled draw to a batch inside a graph. The identity draw
/// reproduces the input bit-exactly; gradients flow to the pixels.
pub fn apply<F: Elem>(g: &mut Graph<F>, batch: NodeRef, draw: &AugDraw) -> Result<NodeRef> {
    let shape = g.value(batch).shape().to_vec();
    if shape.len() != 4 || shape[0] != draw.batch {
        return Err(Error::ShapeMismatch {
            op: "augment_apply",
            detail: format!("batch {:?} vs draw for {} images", shape, draw.batch),
        });
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let (cxm, cym) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut x = batch;
    for op in &draw.ops {
        if is_identity(op) {
            continue;
        }
        x = match op {
            OpDraw::Flip { apply } => {
                let grid = build_grid::<F>(n, h, w, |img, gx, gy| {
                    if apply[img] {
                        (w as f64 - 1.0 - gx, gy)
                    } else {
                        (gx, gy)
                    }
                });
                let grid = g.constant(grid);
                g.grid_sample(x, grid)?
            }
            OpDraw::Translate { dx, dy } => {
                let grid = build_grid::<F>(n, h, w, |img, gx, gy| {
                    (gx - dx[img] * w as f64, gy - dy[img] * h as f64)
                });
                let grid = g.constant(grid);
                g.grid_sample(x, grid)?
            }
            OpDraw::Rotate { radians } => {
                let grid = build_grid::<F>(n, h, w, |img, gx, gy| {
                    let (sin, cos) = (-radians[img]).sin_cos();
                    let (rx, ry) = (gx - cxm, gy - cym);
                    (cxm + rx * cos - ry * sin, cym + rx * sin + ry * cos)
                });
                let grid = g.constant(grid);
                g.grid_sample(x, grid)?
            }
            OpDraw::Scale { factor } => {
                let grid = build_grid::<F>(n, h, w, |img, gx, gy| {
                    let inv = 1.0 / factor[img];
                    (cxm + (gx - cxm) * inv, cym + (gy - cym) * inv)
                });
                let grid = g.constant(grid);
                g.grid_sample(x, grid)?
            }
            OpDraw::Cutout { apply, cx, cy, hole_fraction } => {
                let (hh, hw) = (hole_fraction * h as f64, hole_fraction * w as f64);
                let mut mask = vec![F::ZERO; n * h * w];
                for img in 0..n {
                    if !apply[img] {
                        continue;
                    }
                    let (mx, my) = (cx[img] * (w as f64 - 1.0), cy[img] * (h as f64 - 1.0));
                    for y in 0..h {
                        for xx in 0..w {
                            if (xx as f64 - mx).abs() <= hw / 2.0
                                && (y as f64 - my).abs() <= hh / 2.0
                            {
                                mask[(img * h + y) * w + xx] = F::ONE;
                            }
                        }
                    }
                }
                let mask = Tensor::new(vec![n, 1, h, w], mask)?;
                let mask = g.constant(mask);
                let mask = g.broadcast_to(mask, &shape)?;
                let mean = spatial_mean_broadcast(g, x, &shape)?;
                // x + mask * (mean - x): untouched pixels pass through exactly
                let fill = g.sub(mean, x)?;
                let patch = g.mul(mask, fill)?;
                g.add(x, patch)?
            }
            OpDraw::Brightness { delta } => {
                let d = g.constant(per_image_scalars::<F>(delta));
                let d = g.broadcast_to(d, &shape)?;
                g.add(x, d)?
            }
            OpDraw::Contrast { factor } => {
                let fm1: Vec<f64> = factor.iter().map(|f| f - 1.0).collect();
                let k = g.constant(per_image_scalars::<F>(&fm1));
                let k = g.broadcast_to(k, &shape)?;
                let mean = spatial_mean_broadcast(g, x, &shape)?;
                let centered = g.sub(x, mean)?;
                let adj = g.mul(k, centered)?;
                g.add(x, adj)?
            }
        };
    }
    Ok(x)
}

/// Applies a draw outside any caller-visible graph, for non-differentiable
/// consumers such as teacher-time augmentation and student evaluation.
pub fn apply_value<F: Elem>(batch: &Tensor<F>, draw: &AugDraw) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let y = apply(&mut g, x, draw)?;
    Ok(g.value(y).clone())
}
