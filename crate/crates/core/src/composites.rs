//! Network-level building blocks composed from graph primitives.
//!
//! Everything here is a composition, so arbitrary-order differentiation
//! comes from the primitive adjoints for free.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeRef};
use crate::kernels::ConvGeom;

impl<F: Elem> Graph<F> {
    /// 2-D convolution of `x[N,Ci,H,W]` with kernel `w[Co,Ci,kh,kw]` and
    /// optional per-channel bias, via im2col + matmul.
    pub fn conv2d(
        &mut self,
        x: NodeRef,
        w: NodeRef,
        bias: Option<NodeRef>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeRef> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, kernel {:?}", xs, ws),
            });
        }
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        let (co, k) = (ws[0], ws[1] * ws[2] * ws[3]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let cols = self.im2col(x, geom)?;
        let wmat = self.reshape(w, &[co, k])?;
        let y = self.matmul(wmat, cols)?;
        let y = self.reshape(y, &[co, xs[0], ho, wo])?;
        let mut y = self.permute(y, &[1, 0, 2, 3])?;
        if let Some(b) = bias {
            let b4 = self.reshape(b, &[1, co, 1, 1])?;
            let bb = self.broadcast_to(b4, &[xs[0], co, ho, wo])?;
            y = self.add(y, bb)?;
        }
        Ok(y)
    }

    /// Affine layer `x[N,Fin] * w[Fout,Fin]^T + b[Fout]`.
    pub fn linear(&mut self, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let n = self.value(x).shape()[0];
        let fout = self.value(w).shape()[0];
        let wt = self.permute(w, &[1, 0])?;
        let y = self.matmul(x, wt)?;
        let b2 = self.reshape(b, &[1, fout])?;
        let bb = self.broadcast_to(b2, &[n, fout])?;
        self.add(y, bb)
    }

    /// Per-(sample, channel) normalization over spatial extent, no affine.
    pub fn instance_norm(&mut self, x: NodeRef, eps: f64) -> Result<NodeRef> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "instance_norm",
                detail: format!("expected 4-d input, got {:?}", sh),
            });
        }
        let stat_shape = [sh[0], sh[1], 1, 1];
        let inv_hw = F::from_f64(1.0 / (sh[2] * sh[3]) as f64);
        let s = self.sum_to(x, &stat_shape)?;
        let mean = self.scale(s, inv_hw)?;
        let mean_b = self.broadcast_to(mean, &sh)?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.mul(centered, centered)?;
        let vs = self.sum_to(sq, &stat_shape)?;
        let var = self.scale(vs, inv_hw)?;
        let var_eps = self.add_const(var, F::from_f64(eps))?;
        let std = self.sqrt(var_eps)?;
        let std_b = self.broadcast_to(std, &sh)?;
        self.div(centered, std_b)
    }

    /// Per-example cross-entropy `[N,1]` between logits and fixed one-hot
    /// targets, stabilized by a detached row max.
    pub fn softmax_cross_entropy(&mut self, logits: NodeRef, onehot: NodeRef) -> Result<NodeRef> {
        let sh = self.value(logits).shape().to_vec();
        if sh.len() != 2 || self.value(onehot).shape() != &sh[..] {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!(
                    "logits {:?}, targets {:?}",
                    sh,
                    self.value(onehot).shape()
                ),
            });
        }
        let rows = [sh[0], 1];
        let m = self.max_to_detached(logits, &rows)?;
        let mb = self.broadcast_to(m, &sh)?;
        let z = self.sub(logits, mb)?;
        let ez = self.exp(z)?;
        let se = self.sum_to(ez, &rows)?;
        let lse = self.ln(se)?;
        let lse = self.add(lse, m)?;
        let picked_terms = self.mul(logits, onehot)?;
        let picked = self.sum_to(picked_terms, &rows)?;
        self.sub(lse, picked)
    }

    /// Mean cross-entropy over the batch as a scalar.
    pub fn softmax_cross_entropy_mean(
        &mut self,
        logits: NodeRef,
        onehot: NodeRef,
    ) -> Result<NodeRef> {
        let n = self.value(logits).shape()[0];
        let per = self.softmax_cross_entropy(logits, onehot)?;
        let total = self.sum_to(per, &[])?;
        self.scale(total, F::from_f64(1.0 / n as f64))
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(&mut self, x: NodeRef) -> Result<NodeRef> {
        let n = self.value(x).numel();
        let s = self.sum_to(x, &[])?;
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.sum_to(x, &[])
    }

    /// Squared Euclidean norm of all elements as a scalar.
    pub fn norm_sq(&mut self, x: NodeRef) -> Result<NodeRef> {
        let sq = self.mul(x, x)?;
        self.sum_to(sq, &[])
    }
}
