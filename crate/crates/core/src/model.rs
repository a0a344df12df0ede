//! ConvNet family shared by teachers and students.
//!
//! A block is 3x3 conv (stride 1, pad 1) -> instance norm without learnable
//! affine -> per-channel bias -> ReLU -> 2x2 average pool; the classifier is
//! one linear layer on the flattened features. Normalizing per instance
//! keeps single-example and batched forwards identical and keeps unrolled
//! differentiation free of cross-batch statistics. The bias lands after the
//! norm because the norm would cancel it exactly, leaving dead parameters.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeRef};
use crate::params::{Layout, ParamVector};
use crate::rng;
use crate::tensor::Tensor;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of conv blocks; each halves the spatial extent.
    pub depth: usize,
    /// Channels per block.
    pub width: usize,
    /// Input channels.
    pub in_channels: usize,
    /// Input spatial extent.
    pub height: usize,
    pub width_px: usize,
    pub class_count: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.in_channels == 0 || self.class_count == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        let min = 1usize << self.depth;
        if self.height < min || self.width_px < min {
            return Err(Error::config(format!(
                "input {}x{} too small for depth {} (needs at least {}x{})",
                self.height, self.width_px, self.depth, min, min
            )));
        }
        Ok(())
    }

    /// Spatial extent after each pooling stage, ending with the feature map.
    fn spatial_after_blocks(&self) -> (usize, usize) {
        let mut h = self.height;
        let mut w = self.width_px;
        for _ in 0..self.depth {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Flattened feature length entering the classifier.
    pub fn feature_len(&self) -> usize {
        let (h, w) = self.spatial_after_blocks();
        self.width * h * w
    }

    /// Parameter layout derived deterministically from the config.
    pub fn layout(&self) -> Layout {
        let mut shapes = Vec::with_capacity(2 * self.depth + 2);
        let mut cin = self.in_channels;
        for i in 0..self.depth {
            shapes.push((format!("block{i}.conv.w"), vec![self.width, cin, 3, 3]));
            shapes.push((format!("block{i}.conv.b"), vec![self.width]));
            cin = self.width;
        }
        shapes.push((
            "head.w".to_string(),
            vec![self.class_count, self.feature_len()],
        ));
        shapes.push(("head.b".to_string(), vec![self.class_count]));
        Layout::new(shapes)
    }

    /// Closed-form parameter count:
    /// sum over blocks of `(cin*width*9 + width)` plus the linear head
    /// `(classes*features + classes)`; instance norm carries no parameters.
    pub fn param_count(&self) -> usize {
        let mut count = 0usize;
        let mut cin = self.in_channels;
        for _ in 0..self.depth {
            count += cin * self.width * 9 + self.width;
            cin = self.width;
        }
        count + self.class_count * self.feature_len() + self.class_count
    }

    /// Stable hex digest of the architecture, stamped into trajectory files.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical json");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// A config plus one concrete flat parameter vector.
#[derive(Clone, Debug)]
pub struct Model<F: Elem> {
    pub config: ModelConfig,
    pub params: ParamVector<F>,
}

/// Builds a model with fan-in-scaled uniform initialization; identical
/// (seed, config) pairs give bit-identical parameters.
pub fn build<F: Elem>(config: &ModelConfig, seed: u64) -> Result<Model<F>> {
    config.validate()?;
    let layout = Arc::new(config.layout());
    let mut rng = rng::stream(seed, "model-init");
    let mut data = Vec::with_capacity(layout.total_len());
    let mut cin = config.in_channels;
    for _ in 0..config.depth {
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        let n = config.width * cin * 9 + config.width;
        for _ in 0..n {
            data.push(F::from_f64(rng.gen_range(-bound..bound)));
        }
        cin = config.width;
    }
    let bound = 1.0 / (config.feature_len() as f64).sqrt();
    let n = config.class_count * config.feature_len() + config.class_count;
    for _ in 0..n {
        data.push(F::from_f64(rng.gen_range(-bound..bound)));
    }
    let params = ParamVector::new(Tensor::from_vec(data), layout)?;
    Ok(Model {
        config: config.clone(),
        params,
    })
}

/// Forward pass expressed in the graph: differentiable with respect to both
/// the flat parameter node and the input batch.
pub fn forward_graph<F: Elem>(
    g: &mut Graph<F>,
    config: &ModelConfig,
    params: NodeRef,
    batch: NodeRef,
) -> Result<NodeRef> {
    let bs = g.value(batch).shape().to_vec();
    if bs.len() != 4 || bs[1] != config.in_channels || bs[2] != config.height || bs[3] != config.width_px
    {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            detail: format!(
                "batch {:?} vs config {}x{}x{}",
                bs, config.in_channels, config.height, config.width_px
            ),
        });
    }
    if g.value(params).shape() != [config.layout().total_len()] {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            detail: format!(
                "params {:?} vs layout length {}",
                g.value(params).shape(),
                config.layout().total_len()
            ),
        });
    }
    let layout = config.layout();
    let piece = |g: &mut Graph<F>, name: &str| -> Result<NodeRef> {
        let e = layout.entry(name).expect("layout entry exists");
        let flat = g.slice0(params, e.offset, e.len())?;
        g.reshape(flat, &e.shape)
    };

    let mut x = batch;
    for i in 0..config.depth {
        let w = piece(g, &format!("block{i}.conv.w"))?;
        let b = piece(g, &format!("block{i}.conv.b"))?;
        x = g.conv2d(x, w, None, 1, 1)?;
        x = g.instance_norm(x, INSTANCE_NORM_EPS)?;
        let sh = g.value(x).shape().to_vec();
        let b4 = g.reshape(b, &[1, config.width, 1, 1])?;
        let bb = g.broadcast_to(b4, &sh)?;
        x = g.add(x, bb)?;
        x = g.relu(x)?;
        x = g.avg_pool(x, 2)?;
    }
    let x = g.reshape(x, &[bs[0], config.feature_len()])?;
    let w = piece(g, "head.w")?;
    let b = piece(g, "head.b")?;
    g.linear(x, w, b)
}

impl<F: Elem> Model<F> {
    /// Plain-value forward: builds a throwaway graph over constants.
    pub fn forward(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let params = g.constant(self.params.data().clone());
        let x = g.constant(batch.clone());
        let logits = forward_graph(&mut g, &self.config, params, x)?;
        Ok(g.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            depth: 1,
            width: 2,
            in_channels: 1,
            height: 4,
            width_px: 4,
            class_count: 2,
        }
    }

    #[test]
    fn param_count_closed_form_tiny() {
        // (1*2*9 + 2) + (2*(2*2*2) + 2) = 38
        let cfg = tiny_config();
        assert_eq!(cfg.param_count(), 38);
        assert_eq!(cfg.layout().total_len(), 38);
    }

    #[test]
    fn paper_scale_layout_shape() {
        let cfg = ModelConfig {
            depth: 5,
            width: 128,
            in_channels: 1,
            height: 112,
            width_px: 112,
            class_count: 4,
        };
        cfg.validate().unwrap();
        let layout = cfg.layout();
        // 5 conv blocks (weight + bias each) plus the linear head
        assert_eq!(layout.entries().len(), 12);
        // 112 -> 56 -> 28 -> 14 -> 7 -> 3
        assert_eq!(cfg.feature_len(), 128 * 3 * 3);
        assert_eq!(layout.total_len(), cfg.param_count());
    }

    #[test]
    fn too_small_input_rejected() {
        let mut cfg = tiny_config();
        cfg.depth = 3;
        assert!(cfg.validate().is_err());
        assert!(build::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = tiny_config();
        let a = build::<f32>(&cfg, 7).unwrap();
        let b = build::<f32>(&cfg, 7).unwrap();
        assert_eq!(a.params.data().data(), b.params.data().data());
        let c = build::<f32>(&cfg, 8).unwrap();
        assert_ne!(a.params.data().data(), c.params.data().data());
    }

    #[test]
    fn config_hash_stable_and_field_sensitive() {
        let cfg = tiny_config();
        assert_eq!(cfg.config_hash(), cfg.config_hash());
        let mut other = tiny_config();
        other.width = 3;
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn zero_weight_model_gives_zero_logits() {
        let cfg = tiny_config();
        let layout = Arc::new(cfg.layout());
        let model = Model {
            config: cfg,
            params: ParamVector::<f64>::zeros(layout),
        };
        let batch = Tensor::filled(vec![3, 1, 4, 4], 0.37);
        let logits = model.forward(&batch).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_makes_rows_batch_independent() {
        let cfg = ModelConfig {
            depth: 2,
            width: 3,
            in_channels: 1,
            height: 8,
            width_px: 8,
            class_count: 2,
        };
        let model = build::<f64>(&cfg, 11).unwrap();
        let mut rng = crate::rng::stream(5, "batch");
        let data: Vec<f64> = (0..8 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let batch = Tensor::new(vec![8, 1, 8, 8], data).unwrap();
        let full = model.forward(&batch).unwrap();
        let one = Tensor::new(vec![1, 1, 8, 8], batch.data()[..64].to_vec()).unwrap();
        let single = model.forward(&one).unwrap();
        for c in 0..2 {
            let a = full.data()[c];
            let b = single.data()[c];
            assert!(
                crate::gradcheck::relative_error(a, b) < 1e-9,
                "row mismatch: {a} vs {b}"
            );
        }
    }

    #[test]
    fn input_gradient_passes_finite_differences() {
        let cfg = tiny_config();
        let model = build::<f64>(&cfg, 3).unwrap();
        let mut rng = crate::rng::stream(9, "fd-input");
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![1, 1, 4, 4], data).unwrap();
        let params = model.params.data().clone();
        let err = crate::gradcheck::finite_diff_check(
            move |g, leaf| {
                let p = g.constant(params.clone());
                let logits = forward_graph(g, &model.config, p, leaf)?;
                let sq = g.mul(logits, logits)?;
                g.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err={err}");
    }
}
