//! Reverse-mode differentiation tape.
//!
//! A [`DiffGraph`] owns every tensor produced while building a computation.
//! Ops executed through the graph append nodes in topological order; each
//! recorded node carries a closure that maps the node's output gradient to
//! gradient contributions for its parents. [`DiffGraph::backward`] walks the
//! tape once in reverse, accumulating contributions by summation in node
//! order, which makes gradients deterministic even when a tensor is used
//! more than once.
//!
//! Graphs built with [`DiffGraph::inference`] execute the same forward math
//! but record nothing; dropout additionally becomes the identity there.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::ops::{self, RoiRect};
use super::Tensor;
use crate::{Error, Result};

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor stored in a [`DiffGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

type BackFn = Box<dyn Fn(&DiffGraph, &Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    backward: Option<BackFn>,
}

/// Ordered record of the primitive operations applied in one computation.
pub struct DiffGraph {
    id: u64,
    training: bool,
    nodes: Vec<Node>,
}

/// Gradient map produced by one backward traversal.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.graph, self.graph, "gradient lookup from another graph");
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        assert_eq!(v.graph, self.graph, "gradient lookup from another graph");
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

impl DiffGraph {
    pub fn training() -> Self {
        DiffGraph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            training: true,
            nodes: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        DiffGraph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            training: false,
            nodes: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a copy of `t` as a leaf; it participates in backward if its
    /// `requires_grad` flag is set and this is a training graph.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = self.training && t.requires_grad();
        self.push(t.clone(), needs, None)
    }

    /// Insert a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "var from another graph");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            backward,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::InvalidArgument(
                "tensor does not belong to this graph".into(),
            ));
        }
        Ok(v.index)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn record(&self, parents: &[usize]) -> bool {
        self.training && parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    // -- elementwise / structural ------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.nodes[ai].value.shape(),
                self.nodes[bi].value.shape()
            )));
        }
        let mut out = self.nodes[ai].value.clone();
        out.add_assign(&self.nodes[bi].value);
        let rec = self.record(&[ai, bi]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let mut c = Vec::new();
                if g.needs(ai) {
                    c.push((ai, go.clone()));
                }
                if g.needs(bi) {
                    c.push((bi, go.clone()));
                }
                c
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    pub fn add_list(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::InvalidArgument("add_list of nothing".into()));
        }
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let mut out = self.nodes[ai].value.clone();
        for v in out.data_mut() {
            *v = mul * *v + add;
        }
        let rec = self.record(&[ai]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                let mut g = go.clone();
                for v in g.data_mut() {
                    *v *= mul;
                }
                vec![(ai, g)]
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    /// Weighted sum against a constant of the same shape, yielding a scalar.
    pub fn dot_const(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let ai = self.check(a)?;
        if self.nodes[ai].value.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "dot_const shape mismatch: {:?} vs {:?}",
                self.nodes[ai].value.shape(),
                weights.shape()
            )));
        }
        let total: f64 = self.nodes[ai]
            .value
            .iter()
            .zip(weights.iter())
            .map(|(x, w)| x * w)
            .sum();
        let rec = self.record(&[ai]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                let mut g = weights.clone();
                let s = go.item();
                for v in g.data_mut() {
                    *v *= s;
                }
                vec![(ai, g)]
            }) as BackFn
        });
        Ok(self.push(Tensor::scalar(total), rec, back))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let total: f64 = self.nodes[ai].value.iter().sum();
        let shape = self.nodes[ai].value.shape().to_vec();
        let rec = self.record(&[ai]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                vec![(ai, Tensor::full(&shape, go.item()))]
            }) as BackFn
        });
        Ok(self.push(Tensor::scalar(total), rec, back))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let out = self.nodes[ai].value.reshaped(shape)?;
        let old_shape = self.nodes[ai].value.shape().to_vec();
        let rec = self.record(&[ai]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                vec![(ai, go.reshaped(&old_shape).expect("same element count"))]
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    /// Flat-index gather; the backward pass scatter-adds.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let ai = self.check(a)?;
        let src = &self.nodes[ai].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data: Vec<f64> = indices.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::new(vec![indices.len()], data)?;
        let shape = src.shape().to_vec();
        let rec = self.record(&[ai]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                let mut gx = Tensor::zeros(&shape);
                for (slot, &i) in indices.iter().enumerate() {
                    gx.data_mut()[i] += go.data()[slot];
                }
                vec![(ai, gx)]
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    /// Stack same-shaped tensors as flattened rows of a `[B, N]` matrix.
    pub fn stack_rows(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::InvalidArgument("stack_rows of nothing".into()));
        }
        let idxs: Vec<usize> = vars
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_>>()?;
        let row_shape = self.nodes[idxs[0]].value.shape().to_vec();
        let n: usize = row_shape.iter().product();
        let mut data = Vec::with_capacity(idxs.len() * n);
        for &i in &idxs {
            if self.nodes[i].value.shape() != row_shape.as_slice() {
                return Err(Error::Shape(format!(
                    "stack_rows shape mismatch: {:?} vs {:?}",
                    self.nodes[i].value.shape(),
                    row_shape
                )));
            }
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let out = Tensor::new(vec![idxs.len(), n], data)?;
        let rec = self.record(&idxs);
        let back: Option<BackFn> = rec.then(|| {
            let idxs = idxs.clone();
            let row_shape = row_shape.clone();
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let mut c = Vec::new();
                for (row, &i) in idxs.iter().enumerate() {
                    if g.needs(i) {
                        let slice = go.data()[row * n..(row + 1) * n].to_vec();
                        c.push((i, Tensor::new(row_shape.clone(), slice).unwrap()));
                    }
                }
                c
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    // -- activations --------------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let out = ops::relu(&self.nodes[ai].value);
        let rec = self.record(&[ai]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let mut gx = go.clone();
                for (v, &x) in gx.data_mut().iter_mut().zip(g.nodes[ai].value.iter()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                vec![(ai, gx)]
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    /// Inverted dropout: zero each cell with probability `rate` and scale
    /// survivors by `1/(1-rate)`. Identity on inference graphs and at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let ai = self.check(a)?;
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mut mask = Tensor::zeros(self.nodes[ai].value.shape());
        for m in mask.data_mut() {
            if rng.gen::<f64>() >= rate {
                *m = inv;
            }
        }
        let mut out = self.nodes[ai].value.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        let rec = self.record(&[ai]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                let mut gx = go.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask.iter()) {
                    *v *= m;
                }
                vec![(ai, gx)]
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    // -- convolution family ---------------------------------------------------

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, ki) = (self.check(x)?, self.check(k)?);
        let out = ops::conv2d(&self.nodes[xi].value, &self.nodes[ki].value, stride, pad)?;
        let xshape = self.nodes[xi].value.shape().to_vec();
        let kshape = self.nodes[ki].value.shape().to_vec();
        let rec = self.record(&[xi, ki]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let mut c = Vec::new();
                if g.needs(xi) {
                    c.push((
                        xi,
                        ops::conv2d_grad_input(&g.nodes[ki].value, go, &xshape, stride, pad),
                    ));
                }
                if g.needs(ki) {
                    c.push((
                        ki,
                        ops::conv2d_grad_kernels(&g.nodes[xi].value, go, &kshape, stride, pad),
                    ));
                }
                c
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    pub fn transposed_conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, ki) = (self.check(x)?, self.check(k)?);
        let out = ops::transposed_conv2d(&self.nodes[xi].value, &self.nodes[ki].value, stride, pad)?;
        let kshape = self.nodes[ki].value.shape().to_vec();
        let rec = self.record(&[xi, ki]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let mut c = Vec::new();
                if g.needs(xi) {
                    c.push((
                        xi,
                        ops::transposed_conv2d_grad_input(&g.nodes[ki].value, go, stride, pad),
                    ));
                }
                if g.needs(ki) {
                    c.push((
                        ki,
                        ops::transposed_conv2d_grad_kernels(
                            &g.nodes[xi].value,
                            go,
                            &kshape,
                            stride,
                            pad,
                        ),
                    ));
                }
                c
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    pub fn conv3d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, ki) = (self.check(x)?, self.check(k)?);
        let out = ops::conv3d(&self.nodes[xi].value, &self.nodes[ki].value, stride, pad)?;
        let xshape = self.nodes[xi].value.shape().to_vec();
        let kshape = self.nodes[ki].value.shape().to_vec();
        let rec = self.record(&[xi, ki]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let mut c = Vec::new();
                if g.needs(xi) {
                    c.push((
                        xi,
                        ops::conv3d_grad_input(&g.nodes[ki].value, go, &xshape, stride, pad),
                    ));
                }
                if g.needs(ki) {
                    c.push((
                        ki,
                        ops::conv3d_grad_kernels(&g.nodes[xi].value, go, &kshape, stride, pad),
                    ));
                }
                c
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    /// Per-channel bias over `[C, spatial...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(b)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let channels = xs[0];
        if self.nodes[bi].value.shape() != [channels] {
            return Err(Error::Shape(format!(
                "bias_add bias must be [{channels}], got {:?}",
                self.nodes[bi].value.shape()
            )));
        }
        let plane: usize = xs[1..].iter().product();
        let mut out = self.nodes[xi].value.clone();
        for c in 0..channels {
            let bv = self.nodes[bi].value.data()[c];
            for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                *v += bv;
            }
        }
        let rec = self.record(&[xi, bi]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let mut c = Vec::new();
                if g.needs(xi) {
                    c.push((xi, go.clone()));
                }
                if g.needs(bi) {
                    let mut gb = Tensor::zeros(&[channels]);
                    for ch in 0..channels {
                        gb.data_mut()[ch] = go.data()[ch * plane..(ch + 1) * plane].iter().sum();
                    }
                    c.push((bi, gb));
                }
                c
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    // -- pooling ---------------------------------------------------------------

    pub fn max_pool(&mut self, x: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let (out, argmax) = ops::max_pool(&self.nodes[xi].value, window, stride)?;
        let xshape = self.nodes[xi].value.shape().to_vec();
        let rec = self.record(&[xi]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                vec![(xi, ops::pool_grad_from_argmax(&xshape, &argmax, go))]
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    pub fn roi_pool(&mut self, x: Var, roi: RoiRect, grid: (usize, usize)) -> Result<Var> {
        let xi = self.check(x)?;
        let (out, argmax) = ops::roi_pool(&self.nodes[xi].value, roi, grid)?;
        let xshape = self.nodes[xi].value.shape().to_vec();
        let rec = self.record(&[xi]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                vec![(xi, ops::pool_grad_from_argmax(&xshape, &argmax, go))]
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    // -- dense layers ------------------------------------------------------------

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let out = ops::dense(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        )?;
        let rec = self.record(&[xi, wi, bi]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let n = g.nodes[xi].value.len();
                let x2 = g.nodes[xi].value.reshaped(&[1, n]).unwrap();
                let g2 = go.reshaped(&[1, go.len()]).unwrap();
                let (gx, gw, gb) = ops::dense_batch_grads(&x2, &g.nodes[wi].value, &g2);
                let mut c = Vec::new();
                if g.needs(xi) {
                    c.push((xi, gx.reshaped(&[n]).unwrap()));
                }
                if g.needs(wi) {
                    c.push((wi, gw));
                }
                if g.needs(bi) {
                    c.push((bi, gb));
                }
                c
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    pub fn dense_batch(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let out = ops::dense_batch(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        )?;
        let rec = self.record(&[xi, wi, bi]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let (gx, gw, gb) =
                    ops::dense_batch_grads(&g.nodes[xi].value, &g.nodes[wi].value, go);
                let mut c = Vec::new();
                if g.needs(xi) {
                    c.push((xi, gx));
                }
                if g.needs(wi) {
                    c.push((wi, gw));
                }
                if g.needs(bi) {
                    c.push((bi, gb));
                }
                c
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    // -- losses -----------------------------------------------------------------

    /// Per-row softmax cross-entropy of `[B,K]` logits against labels.
    pub fn softmax_xent_rows(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let li = self.check(logits)?;
        let (losses, probs) = ops::softmax_xent_rows(&self.nodes[li].value, &labels)?;
        let k = self.nodes[li].value.shape()[1];
        let rec = self.record(&[li]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |_: &DiffGraph, go: &Tensor| {
                let mut gx = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    let scale = go.data()[row];
                    let slice = &mut gx.data_mut()[row * k..(row + 1) * k];
                    slice[label] -= 1.0;
                    for v in slice.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![(li, gx)]
            }) as BackFn
        });
        Ok(self.push(losses, rec, back))
    }

    /// Scalar softmax cross-entropy of `[K]` logits against one label.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var> {
        let li = self.check(logits)?;
        let k = self.nodes[li].value.len();
        let rows = self.reshape(logits, &[1, k])?;
        let losses = self.softmax_xent_rows(rows, vec![label])?;
        self.reshape(losses, &[1])
    }

    /// Per-row smooth-L1 against a constant target of the same shape.
    pub fn smooth_l1_rows(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let pi = self.check(pred)?;
        let out = ops::smooth_l1_rows(&self.nodes[pi].value, &target)?;
        let (b, d) = (target.shape()[0], target.shape()[1]);
        let rec = self.record(&[pi]);
        let back: Option<BackFn> = rec.then(|| {
            Box::new(move |g: &DiffGraph, go: &Tensor| {
                let mut gx = Tensor::zeros(&[b, d]);
                for row in 0..b {
                    let scale = go.data()[row];
                    for i in 0..d {
                        let x = g.nodes[pi].value.data()[row * d + i] - target.data()[row * d + i];
                        gx.data_mut()[row * d + i] = scale * ops::smooth_l1_deriv(x);
                    }
                }
                vec![(pi, gx)]
            }) as BackFn
        });
        Ok(self.push(out, rec, back))
    }

    /// Scalar smooth-L1 between rank-1 `pred` and a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pi = self.check(pred)?;
        let d = self.nodes[pi].value.len();
        if target.len() != d {
            return Err(Error::Shape(format!(
                "smooth_l1 extents differ: pred {d}, target {}",
                target.len()
            )));
        }
        let rows = self.reshape(pred, &[1, d])?;
        let t = target.reshaped(&[1, d])?;
        let losses = self.smooth_l1_rows(rows, t)?;
        self.reshape(losses, &[1])
    }

    // -- backward ------------------------------------------------------------------

    /// Reverse traversal from a scalar loss. Populates a gradient for every
    /// tensor reachable from the loss whose `requires_grad` was set,
    /// accumulating by summation when a tensor feeds several ops.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if !self.training {
            return Err(Error::InvalidArgument(
                "backward pass requires a training graph".into(),
            ));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[li] = Some(Tensor::scalar(1.0));
        for i in (0..=li).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(back) = self.nodes[i].backward.as_ref() else {
                continue;
            };
            let contributions = {
                let g = grads[i].as_ref().unwrap();
                back(self, g)
            };
            for (pid, gt) in contributions {
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&gt),
                    slot @ None => *slot = Some(gt),
                }
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut g = DiffGraph::training();
        let x = g.leaf(&Tensor::scalar(3.5).with_grad());
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn reuse_accumulates_gradient() {
        let mut g = DiffGraph::training();
        let x = g.leaf(&Tensor::scalar(2.0).with_grad());
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_foreign_loss() {
        let mut g1 = DiffGraph::training();
        let mut g2 = DiffGraph::training();
        let _ = g1.leaf(&Tensor::scalar(1.0));
        let x2 = g2.leaf(&Tensor::scalar(1.0).with_grad());
        assert!(g1.backward(x2).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = DiffGraph::training();
        let x = g.leaf(&Tensor::ones(&[3]).with_grad());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn dropout_is_identity_at_rate_zero_and_in_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::ones(&[100]);
        let mut g = DiffGraph::training();
        let x = g.leaf(&t);
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(g.value(y), &t);

        let mut gi = DiffGraph::inference();
        let x = gi.leaf(&t);
        let y = gi.dropout(x, 0.9, &mut rng).unwrap();
        assert_eq!(gi.value(y), &t);
    }

    #[test]
    fn dropout_survivor_fraction_is_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t = Tensor::ones(&[1_000_000]);
        let mut g = DiffGraph::training();
        let x = g.leaf(&t);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let survivors = g.value(y).iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 1e6;
        assert!((frac - 0.5).abs() < 0.002, "survivor fraction {frac}");
        // inverted scaling: survivors carry 1/(1-rate)
        let max = g.value(y).iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 2.0);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = DiffGraph::training();
        let x = g.leaf(&Tensor::ones(&[4]));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }
}
