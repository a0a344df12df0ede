//! Reverse-mode automatic differentiation over an explicit per-objective graph.
//!
//! A [`Graph`] is an append-only list of operation records executed eagerly.
//! Differentiation emits the adjoint computation as ordinary primitive ops
//! into the same graph, so gradients returned with `create_graph` are
//! themselves differentiable — second and higher derivatives come from the
//! same machinery rather than hand-derived double-backward rules.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeRef {
    graph: u64,
    index: usize,
}

/// Primitive operation record. Inputs are node indices into the owning graph.
#[derive(Clone, Debug)]
enum Op<F: Elem> {
    /// Leaf holding a constant or a differentiable parameter.
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Relu(usize),
    /// 1 where the input is positive, else 0. Piecewise constant: no adjoint.
    StepMask(usize),
    Scale(usize, F),
    AddConst(usize, F),
    /// Max-reduction treated as a constant of the graph (no adjoint); used to
    /// stabilize log-sum-exp without perturbing its derivatives.
    MaxTo(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    BroadcastTo(usize),
    SumTo(usize),
    Concat0(Vec<usize>),
    Slice0(usize, usize),
    IndexSelect0(usize, Arc<Vec<usize>>),
    IndexScatterAdd0(usize, Arc<Vec<usize>>, usize),
    Im2Col(usize, ConvGeom),
    Col2Im(usize, ConvGeom),
    AvgPool(usize, usize),
    AvgPoolBack(usize, usize, usize, usize),
    GridSample(usize, usize),
    GridSampleBack(usize, usize, usize, usize),
}

impl<F: Elem> Op<F> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | GridSample(a, b) => {
                vec![*a, *b]
            }
            GridSampleBack(a, b, _, _) => vec![*a, *b],
            Neg(a) | Exp(a) | Ln(a) | Sqrt(a) | Relu(a) | StepMask(a) | Scale(a, _)
            | AddConst(a, _) | MaxTo(a) | Permute(a, _) | Reshape(a) | BroadcastTo(a)
            | SumTo(a) | Slice0(a, _) | IndexSelect0(a, _) | IndexScatterAdd0(a, _, _)
            | Im2Col(a, _) | Col2Im(a, _) | AvgPool(a, _) | AvgPoolBack(a, _, _, _) => vec![*a],
            Concat0(parts) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Neg(..) => "neg",
            Exp(..) => "exp",
            Ln(..) => "ln",
            Sqrt(..) => "sqrt",
            Relu(..) => "relu",
            StepMask(..) => "step_mask",
            Scale(..) => "scale",
            AddConst(..) => "add_const",
            MaxTo(..) => "max_to",
            MatMul(..) => "matmul",
            Permute(..) => "permute",
            Reshape(..) => "reshape",
            BroadcastTo(..) => "broadcast_to",
            SumTo(..) => "sum_to",
            Concat0(..) => "concat0",
            Slice0(..) => "slice0",
            IndexSelect0(..) => "index_select0",
            IndexScatterAdd0(..) => "index_scatter_add0",
            Im2Col(..) => "im2col",
            Col2Im(..) => "col2im",
            AvgPool(..) => "avg_pool",
            AvgPoolBack(..) => "avg_pool_back",
            GridSample(..) => "grid_sample",
            GridSampleBack(..) => "grid_sample_back",
        }
    }
}

struct Node<F: Elem> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Explicit computation graph: build, differentiate, drop.
pub struct Graph<F: Elem> {
    id: u64,
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Elem> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> Graph<F> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn make_ref(&self, index: usize) -> NodeRef {
        NodeRef {
            graph: self.id,
            index,
        }
    }

    fn chk(&self, n: NodeRef) -> Result<usize> {
        if n.graph != self.id || n.index >= self.nodes.len() {
            return Err(Error::GraphMismatch);
        }
        Ok(n.index)
    }

    /// Registers a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeRef {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: F) -> NodeRef {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> NodeRef {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, n: NodeRef) -> &Tensor<F> {
        assert_eq!(n.graph, self.id, "node belongs to a different graph");
        &self.nodes[n.index].value
    }

    pub fn requires_grad(&self, n: NodeRef) -> bool {
        assert_eq!(n.graph, self.id, "node belongs to a different graph");
        self.nodes[n.index].requires_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> NodeRef {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.make_ref(self.nodes.len() - 1)
    }

    /// Executes an op against current node values without recording it.
    fn exec(&self, op: &Op<F>) -> Result<Tensor<F>> {
        use Op::*;
        let v = |i: usize| &self.nodes[i].value;
        match op {
            Leaf => unreachable!("leaves are not executed"),
            Add(a, b) => v(*a).zip_map(v(*b), |x, y| x + y),
            Sub(a, b) => v(*a).zip_map(v(*b), |x, y| x - y),
            Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
            Div(a, b) => v(*a).zip_map(v(*b), |x, y| x / y),
            Neg(a) => Ok(v(*a).map(|x| -x)),
            Exp(a) => Ok(v(*a).map(|x| x.exp())),
            Ln(a) => Ok(v(*a).map(|x| x.ln())),
            Sqrt(a) => Ok(v(*a).map(|x| x.sqrt())),
            Relu(a) => Ok(v(*a).map(|x| x.maxv(F::ZERO))),
            StepMask(a) => Ok(v(*a).map(|x| if x > F::ZERO { F::ONE } else { F::ZERO })),
            Scale(a, c) => {
                let c = *c;
                Ok(v(*a).map(|x| x * c))
            }
            AddConst(a, c) => {
                let c = *c;
                Ok(v(*a).map(|x| x + c))
            }
            MaxTo(_) | SumTo(_) | BroadcastTo(_) | Reshape(_) => {
                unreachable!("shape-target ops are executed at record time")
            }
            MatMul(a, b) => kernels::matmul(v(*a), v(*b)),
            Permute(a, perm) => kernels::permute(v(*a), perm),
            Concat0(parts) => {
                let refs: Vec<&Tensor<F>> = parts.iter().map(|&i| v(i)).collect();
                kernels::concat0(&refs)
            }
            Slice0(a, start) => {
                unreachable!("slice0 executed at record time: {} {}", a, start)
            }
            IndexSelect0(a, idx) => kernels::index_select0(v(*a), idx),
            IndexScatterAdd0(a, idx, rows) => kernels::index_scatter_add0(v(*a), idx, *rows),
            Im2Col(a, geom) => kernels::im2col(v(*a), geom),
            Col2Im(a, geom) => kernels::col2im(v(*a), geom),
            AvgPool(a, k) => kernels::avg_pool(v(*a), *k),
            AvgPoolBack(a, k, h, w) => kernels::avg_pool_back(v(*a), *k, *h, *w),
            GridSample(a, grid) => kernels::grid_sample(v(*a), v(*grid)),
            GridSampleBack(a, grid, h, w) => kernels::grid_sample_back(v(*a), v(*grid), *h, *w),
        }
    }

    fn record(&mut self, op: Op<F>) -> Result<NodeRef> {
        let value = self.exec(&op)?;
        self.finish_record(op, value)
    }

    fn finish_record(&mut self, op: Op<F>, value: Tensor<F>) -> Result<NodeRef> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            // Piecewise-constant ops detach their output from the grad path.
            Op::StepMask(_) | Op::MaxTo(_) => false,
            _ => op
                .inputs()
                .iter()
                .any(|&i| self.nodes[i].requires_grad),
        };
        Ok(self.push(op, value, requires_grad))
    }

    // ── primitive ops ───────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.chk(a)?, self.chk(b)?);
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.chk(a)?, self.chk(b)?);
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.chk(a)?, self.chk(b)?);
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.chk(a)?, self.chk(b)?);
        self.record(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Relu(a))
    }

    pub fn step_mask(&mut self, a: NodeRef) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::StepMask(a))
    }

    pub fn scale(&mut self, a: NodeRef, c: F) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeRef, c: F) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::AddConst(a, c))
    }

    /// Detached max-reduction onto a broadcast-compatible shape.
    pub fn max_to_detached(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let a = self.chk(a)?;
        let value = kernels::max_to(&self.nodes[a].value, shape)?;
        self.finish_record(Op::MaxTo(a), value)
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (a, b) = (self.chk(a)?, self.chk(b)?);
        self.record(Op::MatMul(a, b))
    }

    pub fn permute(&mut self, a: NodeRef, perm: &[usize]) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Permute(a, perm.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let a = self.chk(a)?;
        let value = self.nodes[a].value.reshaped(shape.to_vec())?;
        self.finish_record(Op::Reshape(a), value)
    }

    pub fn broadcast_to(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let a = self.chk(a)?;
        let value = kernels::broadcast_to(&self.nodes[a].value, shape)?;
        self.finish_record(Op::BroadcastTo(a), value)
    }

    pub fn sum_to(&mut self, a: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let a = self.chk(a)?;
        let value = kernels::sum_to(&self.nodes[a].value, shape)?;
        self.finish_record(Op::SumTo(a), value)
    }

    pub fn concat0(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.chk(p))
            .collect::<Result<_>>()?;
        self.record(Op::Concat0(idx))
    }

    pub fn slice0(&mut self, a: NodeRef, start: usize, len: usize) -> Result<NodeRef> {
        let a = self.chk(a)?;
        let value = kernels::slice0(&self.nodes[a].value, start, len)?;
        self.finish_record(Op::Slice0(a, start), value)
    }

    pub fn index_select0(&mut self, a: NodeRef, indices: Arc<Vec<usize>>) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::IndexSelect0(a, indices))
    }

    pub fn index_scatter_add0(
        &mut self,
        a: NodeRef,
        indices: Arc<Vec<usize>>,
        rows: usize,
    ) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::IndexScatterAdd0(a, indices, rows))
    }

    pub fn im2col(&mut self, a: NodeRef, geom: ConvGeom) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Im2Col(a, geom))
    }

    pub fn col2im(&mut self, a: NodeRef, geom: ConvGeom) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::Col2Im(a, geom))
    }

    pub fn avg_pool(&mut self, a: NodeRef, k: usize) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::AvgPool(a, k))
    }

    pub fn avg_pool_back(&mut self, a: NodeRef, k: usize, h: usize, w: usize) -> Result<NodeRef> {
        let a = self.chk(a)?;
        self.record(Op::AvgPoolBack(a, k, h, w))
    }

    /// Bilinear sampling at constant grid positions. Gradients flow to the
    /// image only; a grid on the differentiable path is rejected.
    pub fn grid_sample(&mut self, x: NodeRef, grid: NodeRef) -> Result<NodeRef> {
        let (x, grid) = (self.chk(x)?, self.chk(grid)?);
        if self.nodes[grid].requires_grad {
            return Err(Error::ShapeMismatch {
                op: "grid_sample",
                detail: "sampling grid must be a constant of the graph".into(),
            });
        }
        self.record(Op::GridSample(x, grid))
    }

    pub fn grid_sample_back(
        &mut self,
        g: NodeRef,
        grid: NodeRef,
        h: usize,
        w: usize,
    ) -> Result<NodeRef> {
        let (g, grid) = (self.chk(g)?, self.chk(grid)?);
        self.record(Op::GridSampleBack(g, grid, h, w))
    }

    // ── differentiation ─────────────────────────────────────────────────

    /// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
    ///
    /// Adjoints are emitted as primitive ops into this graph. With
    /// `create_graph` the graph stays live and the returned gradients can be
    /// differentiated again; without it the graph is consumed and further
    /// `grad` calls fail.
    pub fn grad(
        &mut self,
        output: NodeRef,
        wrt: &[NodeRef],
        create_graph: bool,
    ) -> Result<Vec<NodeRef>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let out_idx = self.chk(output)?;
        if self.nodes[out_idx].value.numel() != 1 {
            return Err(Error::NonScalarOutput(
                self.nodes[out_idx].value.shape().to_vec(),
            ));
        }
        let n0 = self.nodes.len();

        // Ancestor closure of the output.
        let mut anc = vec![false; n0];
        let mut stack = vec![out_idx];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut anc[i], true) {
                continue;
            }
            stack.extend(self.nodes[i].op.inputs());
        }
        let mut wrt_idx = Vec::with_capacity(wrt.len());
        for w in wrt {
            let wi = self.chk(*w)?;
            if !anc[wi] {
                return Err(Error::Unreachable);
            }
            wrt_idx.push(wi);
        }

        // Nodes through which a wrt leaf can influence the output.
        let mut need = vec![false; n0];
        for &wi in &wrt_idx {
            need[wi] = true;
        }
        for i in 0..n0 {
            if !need[i] && self.nodes[i].op.inputs().iter().any(|&j| need[j]) {
                need[i] = true;
            }
        }

        let mut adj: Vec<Option<NodeRef>> = vec![None; n0];
        let seed_shape = self.nodes[out_idx].value.shape().to_vec();
        adj[out_idx] = Some(self.constant(Tensor::filled(seed_shape, F::ONE)));

        for i in (0..n0).rev() {
            if !(anc[i] && need[i]) {
                continue;
            }
            let upstream = match adj[i] {
                Some(u) => u,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let contribs = self.vjp(i, &op, upstream, &need)?;
            for (j, c) in contribs {
                adj[j] = Some(match adj[j] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        let mut grads = Vec::with_capacity(wrt_idx.len());
        for &wi in &wrt_idx {
            let r = match adj[wi] {
                Some(r) => r,
                None => {
                    let shape = self.nodes[wi].value.shape().to_vec();
                    self.constant(Tensor::zeros(shape))
                }
            };
            grads.push(r);
        }
        if !create_graph {
            self.consumed = true;
        }
        Ok(grads)
    }

    /// Emits the vector-Jacobian product of node `i` for inputs flagged in
    /// `need`, returning `(input_index, contribution)` pairs.
    fn vjp(
        &mut self,
        i: usize,
        op: &Op<F>,
        u: NodeRef,
        need: &[bool],
    ) -> Result<Vec<(usize, NodeRef)>> {
        use Op::*;
        let r = |g: &Self, idx: usize| g.make_ref(idx);
        let shape_of = |g: &Self, idx: usize| g.nodes[idx].value.shape().to_vec();
        let mut out = Vec::new();
        match op {
            Leaf | StepMask(_) | MaxTo(_) => {}
            Add(a, b) => {
                if need[*a] {
                    out.push((*a, u));
                }
                if need[*b] {
                    out.push((*b, u));
                }
            }
            Sub(a, b) => {
                if need[*a] {
                    out.push((*a, u));
                }
                if need[*b] {
                    let n = self.neg(u)?;
                    out.push((*b, n));
                }
            }
            Mul(a, b) => {
                if need[*a] {
                    let c = self.mul(u, r(self, *b))?;
                    out.push((*a, c));
                }
                if need[*b] {
                    let c = self.mul(u, r(self, *a))?;
                    out.push((*b, c));
                }
            }
            Div(a, b) => {
                if need[*a] {
                    let c = self.div(u, r(self, *b))?;
                    out.push((*a, c));
                }
                if need[*b] {
                    // d(a/b)/db = -(a/b)/b
                    let q = self.div(r(self, i), r(self, *b))?;
                    let m = self.mul(u, q)?;
                    let c = self.neg(m)?;
                    out.push((*b, c));
                }
            }
            Neg(a) => {
                if need[*a] {
                    let c = self.neg(u)?;
                    out.push((*a, c));
                }
            }
            Exp(a) => {
                if need[*a] {
                    let c = self.mul(u, r(self, i))?;
                    out.push((*a, c));
                }
            }
            Ln(a) => {
                if need[*a] {
                    let c = self.div(u, r(self, *a))?;
                    out.push((*a, c));
                }
            }
            Sqrt(a) => {
                if need[*a] {
                    let half = self.scale(u, F::from_f64(0.5))?;
                    let c = self.div(half, r(self, i))?;
                    out.push((*a, c));
                }
            }
            Relu(a) => {
                if need[*a] {
                    let mask = self.step_mask(r(self, *a))?;
                    let c = self.mul(u, mask)?;
                    out.push((*a, c));
                }
            }
            Scale(a, c0) => {
                if need[*a] {
                    let c = self.scale(u, *c0)?;
                    out.push((*a, c));
                }
            }
            AddConst(a, _) => {
                if need[*a] {
                    out.push((*a, u));
                }
            }
            MatMul(a, b) => {
                if need[*a] {
                    let bt = self.permute(r(self, *b), &[1, 0])?;
                    let c = self.matmul(u, bt)?;
                    out.push((*a, c));
                }
                if need[*b] {
                    let at = self.permute(r(self, *a), &[1, 0])?;
                    let c = self.matmul(at, u)?;
                    out.push((*b, c));
                }
            }
            Permute(a, perm) => {
                if need[*a] {
                    let inv = kernels::inverse_perm(perm);
                    let c = self.permute(u, &inv)?;
                    out.push((*a, c));
                }
            }
            Reshape(a) => {
                if need[*a] {
                    let shape = shape_of(self, *a);
                    let c = self.reshape(u, &shape)?;
                    out.push((*a, c));
                }
            }
            BroadcastTo(a) => {
                if need[*a] {
                    let shape = shape_of(self, *a);
                    let c = self.sum_to(u, &shape)?;
                    out.push((*a, c));
                }
            }
            SumTo(a) => {
                if need[*a] {
                    let shape = shape_of(self, *a);
                    let c = self.broadcast_to(u, &shape)?;
                    out.push((*a, c));
                }
            }
            Concat0(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let rows = self.nodes[p].value.shape()[0];
                    if need[p] {
                        let c = self.slice0(u, offset, rows)?;
                        out.push((p, c));
                    }
                    offset += rows;
                }
            }
            Slice0(a, start) => {
                if need[*a] {
                    // Embed the slice gradient into a zero tensor via concat.
                    let shape = shape_of(self, *a);
                    let rows = shape[0];
                    let len = self.nodes[i].value.shape()[0];
                    let mut parts = Vec::new();
                    if *start > 0 {
                        let mut s = shape.clone();
                        s[0] = *start;
                        parts.push(self.constant(Tensor::zeros(s)));
                    }
                    parts.push(u);
                    if start + len < rows {
                        let mut s = shape.clone();
                        s[0] = rows - start - len;
                        parts.push(self.constant(Tensor::zeros(s)));
                    }
                    let c = self.concat0(&parts)?;
                    out.push((*a, c));
                }
            }
            IndexSelect0(a, idx) => {
                if need[*a] {
                    let rows = shape_of(self, *a)[0];
                    let c = self.index_scatter_add0(u, Arc::clone(idx), rows)?;
                    out.push((*a, c));
                }
            }
            IndexScatterAdd0(a, idx, _) => {
                if need[*a] {
                    let c = self.index_select0(u, Arc::clone(idx))?;
                    out.push((*a, c));
                }
            }
            Im2Col(a, geom) => {
                if need[*a] {
                    let c = self.col2im(u, *geom)?;
                    out.push((*a, c));
                }
            }
            Col2Im(a, geom) => {
                if need[*a] {
                    let c = self.im2col(u, *geom)?;
                    out.push((*a, c));
                }
            }
            AvgPool(a, k) => {
                if need[*a] {
                    let shape = shape_of(self, *a);
                    let c = self.avg_pool_back(u, *k, shape[2], shape[3])?;
                    out.push((*a, c));
                }
            }
            AvgPoolBack(a, k, _, _) => {
                if need[*a] {
                    let c = self.avg_pool(u, *k)?;
                    out.push((*a, c));
                }
            }
            GridSample(a, grid) => {
                if need[*a] {
                    let shape = shape_of(self, *a);
                    let c = self.grid_sample_back(u, r(self, *grid), shape[2], shape[3])?;
                    out.push((*a, c));
                }
            }
            GridSampleBack(a, grid, _, _) => {
                if need[*a] {
                    let c = self.grid_sample(u, r(self, *grid))?;
                    out.push((*a, c));
                }
            }
        }
        Ok(out)
    }

    /// Re-executes every recorded op against stored inputs and checks that
    /// each reproduces its stored value bit-exactly.
    pub fn replay_check(&self) -> Result<bool> {
        for node in &self.nodes {
            match node.op {
                Op::Leaf | Op::Reshape(_) => continue,
                Op::MaxTo(a) => {
                    let v = kernels::max_to(&self.nodes[a].value, node.value.shape())?;
                    if v != node.value {
                        return Ok(false);
                    }
                }
                Op::BroadcastTo(a) => {
                    let v = kernels::broadcast_to(&self.nodes[a].value, node.value.shape())?;
                    if v != node.value {
                        return Ok(false);
                    }
                }
                Op::SumTo(a) => {
                    let v = kernels::sum_to(&self.nodes[a].value, node.value.shape())?;
                    if v != node.value {
                        return Ok(false);
                    }
                }
                Op::Slice0(a, start) => {
                    let v =
                        kernels::slice0(&self.nodes[a].value, start, node.value.shape()[0])?;
                    if v != node.value {
                        return Ok(false);
                    }
                }
                _ => {
                    if self.exec(&node.op)? != node.value {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }
}
