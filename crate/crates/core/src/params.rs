//! Flattened model parameters with a named layout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named sub-tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of sub-tensor slots covering a flat vector exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    pub fn new(shapes: Vec<(String, Vec<usize>)>) -> Self {
        let mut entries = Vec::with_capacity(shapes.len());
        let mut offset = 0usize;
        for (name, shape) in shapes {
            let len: usize = shape.iter().product();
            entries.push(LayoutEntry {
                name,
                shape,
                offset,
            });
            offset += len;
        }
        Layout {
            entries,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Flat parameter vector plus the layout describing its sub-tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<F: Elem> {
    data: Tensor<F>,
    layout: Arc<Layout>,
}

impl<F: Elem> ParamVector<F> {
    pub fn new(data: Tensor<F>, layout: Arc<Layout>) -> Result<Self> {
        if data.shape().len() != 1 || data.numel() != layout.total_len() {
            return Err(Error::ShapeMismatch {
                op: "param_vector",
                detail: format!(
                    "data shape {:?} vs layout length {}",
                    data.shape(),
                    layout.total_len()
                ),
            });
        }
        Ok(ParamVector { data, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            data: Tensor::zeros(vec![layout.total_len()]),
            layout,
        }
    }

    pub fn data(&self) -> &Tensor<F> {
        &self.data
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits the flat vector into its named sub-tensors.
    pub fn unflatten(&self) -> Vec<(String, Tensor<F>)> {
        let slice = self.data.data();
        self.layout
            .entries()
            .iter()
            .map(|e| {
                let data = slice[e.offset..e.offset + e.len()].to_vec();
                (
                    e.name.clone(),
                    Tensor::new(e.shape.clone(), data).expect("layout entry is consistent"),
                )
            })
            .collect()
    }

    /// Reassembles sub-tensors produced by [`ParamVector::unflatten`].
    pub fn flatten(parts: &[(String, Tensor<F>)], layout: Arc<Layout>) -> Result<Self> {
        if parts.len() != layout.entries().len() {
            return Err(Error::ShapeMismatch {
                op: "flatten",
                detail: format!(
                    "{} parts vs {} layout entries",
                    parts.len(),
                    layout.entries().len()
                ),
            });
        }
        let mut data = Vec::with_capacity(layout.total_len());
        for ((name, t), e) in parts.iter().zip(layout.entries()) {
            if name != &e.name || t.shape() != &e.shape[..] {
                return Err(Error::ShapeMismatch {
                    op: "flatten",
                    detail: format!("part {name} {:?} vs entry {} {:?}", t.shape(), e.name, e.shape),
                });
            }
            data.extend_from_slice(t.data());
        }
        ParamVector::new(Tensor::from_vec(data), layout)
    }

    pub fn with_data(&self, data: Tensor<F>) -> Result<Self> {
        ParamVector::new(data, Arc::clone(&self.layout))
    }

    /// Elementwise `self + scale * other`, used by plain optimizer math.
    pub fn axpy(&self, scale: F, other: &Self) -> Result<Self> {
        let data = self.data.zip_map(&other.data, |a, b| a + scale * b)?;
        self.with_data(data)
    }

    pub fn cast<G: Elem>(&self) -> ParamVector<G> {
        ParamVector {
            data: self.data.cast(),
            layout: Arc::clone(&self.layout),
        }
    }
}
