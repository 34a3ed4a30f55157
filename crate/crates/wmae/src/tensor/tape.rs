//! Linear op tape for reverse-mode differentiation.
//!
//! Ops append nodes after their inputs, so the tape index order is a
//! topological order of the compute graph. `backward` walks the tape once
//! in reverse, accumulating (never overwriting) gradients, which handles
//! shared parameters for free.
//!
//! Elementwise binaries and matmul broadcast only over *leading* batch
//! dims: the smaller operand's shape must be a suffix of the larger's.
//! Anything else requires an explicit reshape.

use super::{strides, Scalar, Tensor};
use crate::error::{Result, WmaeError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    Gelu { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    SoftmaxLastDim { x: NodeId },
    Reshape { x: NodeId },
    Permute { x: NodeId, axes: Vec<usize> },
    GatherRows { x: NodeId, sets: Vec<Vec<usize>> },
    ScatterRows { visible: NodeId, token: NodeId, sets: Vec<Vec<usize>>, rows: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    value_elems: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), value_elems: 0 }
    }

    /// Leaf whose gradient will be computed (a parameter).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of a node, available after `backward`. `None` if no
    /// gradient flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total stored forward elements; doubles as a peak-memory estimate
    /// (gradients at most mirror the forward values).
    pub fn value_elems(&self) -> usize {
        self.value_elems
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.value_elems += value.numel();
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    /// Leading batch dims of one operand may be a suffix of the other's.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (asha, bsha) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asha.len() < 2 || bsha.len() < 2 {
            return Err(WmaeError::ShapeMismatch { op: "matmul", lhs: asha, rhs: bsha });
        }
        let (m, ka) = (asha[asha.len() - 2], asha[asha.len() - 1]);
        let (kb, n) = (bsha[bsha.len() - 2], bsha[bsha.len() - 1]);
        let batch_a = &asha[..asha.len() - 2];
        let batch_b = &bsha[..bsha.len() - 2];
        let batch = suffix_broadcast(batch_a, batch_b);
        if ka != kb || batch.is_none() {
            return Err(WmaeError::ShapeMismatch { op: "matmul", lhs: asha, rhs: bsha });
        }
        let batch = batch.unwrap();
        let nbatch: usize = batch.iter().product();
        let (na, nb): (usize, usize) = (batch_a.iter().product(), batch_b.iter().product());

        let mut out = vec![T::zero(); nbatch * m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..nbatch {
                let asl = &ad[(i % na) * m * ka..];
                let bsl = &bd[(i % nb) * ka * n..];
                let csl = &mut out[i * m * n..(i + 1) * m * n];
                T::gemm(m, ka, n, asl, ka as isize, 1, bsl, n as isize, 1, T::zero(), csl, n as isize, 1);
            }
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out), Op::Matmul { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let (asha, bsha) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = suffix_broadcast(&asha, &bsha).ok_or(WmaeError::ShapeMismatch {
            op: name,
            lhs: asha.clone(),
            rhs: bsha.clone(),
        })?;
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let (la, lb) = (ad.len(), bd.len());
        let n: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        if la == lb {
            for i in 0..n {
                out.push(f(ad[i], bd[i]));
            }
        } else {
            for i in 0..n {
                out.push(f(ad[i % la], bd[i % lb]));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, out), op, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let data = self.nodes[a.0].value.data().iter().map(|&v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Scale { a, c }, needs)
    }

    /// Exact-erf GELU, elementwise.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (x * inv_sqrt2).erf()))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Gelu { a }, needs)
    }

    /// Normalize the last dim to zero mean / unit variance, then apply the
    /// affine transform `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(WmaeError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(WmaeError::ShapeMismatch {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(WmaeError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let epst = T::from_f64(eps);
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); xd.len()];
        let dt = T::from_f64(d as f64);
        for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= dt;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var /= dt;
            let inv_std = (var + epst).sqrt().recip();
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::new(shape, out), Op::LayerNorm { x, gamma, beta, eps: epst }, needs))
    }

    /// Max-shifted softmax over the last dim.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().filter(|&&d| d >= 1).ok_or(WmaeError::ShapeMismatch {
            op: "softmax_lastdim",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); xd.len()];
        for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut max = row[0];
            for &v in &row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for j in 0..d {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            let inv = sum.recip();
            for v in orow.iter_mut() {
                *v *= inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out), Op::SoftmaxLastDim { x }, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(WmaeError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].value.data().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data), Op::Reshape { x }, needs))
    }

    /// Reorder axes; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(WmaeError::Usage(format!(
                "permute axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let (data, out_shape) = permute_data(self.nodes[x.0].value.data(), &shape, axes);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, data), Op::Permute { x, axes: axes.to_vec() }, needs))
    }

    /// Select rows along the second-to-last axis. `sets` holds one index
    /// list per leading-batch element; all lists must share one length.
    pub fn gather_rows(&mut self, x: NodeId, sets: Vec<Vec<usize>>) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(WmaeError::ShapeMismatch { op: "gather_rows", lhs: shape, rhs: vec![] });
        }
        let d = shape[shape.len() - 1];
        let rows = shape[shape.len() - 2];
        let nbatch: usize = shape[..shape.len() - 2].iter().product();
        if sets.len() != nbatch {
            return Err(WmaeError::Usage(format!(
                "gather_rows: {} index sets for {} batch elements",
                sets.len(),
                nbatch
            )));
        }
        let take = sets.first().map_or(0, |s| s.len());
        for set in &sets {
            if set.len() != take {
                return Err(WmaeError::Usage("gather_rows: ragged index sets".into()));
            }
            if let Some(&bad) = set.iter().find(|&&i| i >= rows) {
                return Err(WmaeError::Usage(format!(
                    "gather_rows: index {bad} out of range for {rows} rows"
                )));
            }
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(nbatch * take * d);
        for (bi, set) in sets.iter().enumerate() {
            let base = bi * rows * d;
            for &r in set {
                out.extend_from_slice(&xd[base + r * d..base + (r + 1) * d]);
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(take);
        out_shape.push(d);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out), Op::GatherRows { x, sets }, needs))
    }

    /// Inverse of `gather_rows`: place the rows of `visible` back at their
    /// original positions in a `rows`-long sequence and fill every other
    /// position with `token` (a `[D]` vector).
    pub fn scatter_rows(
        &mut self,
        visible: NodeId,
        token: NodeId,
        sets: Vec<Vec<usize>>,
        rows: usize,
    ) -> Result<NodeId> {
        let vsha = self.shape(visible).to_vec();
        if vsha.len() < 2 {
            return Err(WmaeError::ShapeMismatch { op: "scatter_rows", lhs: vsha, rhs: vec![] });
        }
        let d = vsha[vsha.len() - 1];
        let take = vsha[vsha.len() - 2];
        let nbatch: usize = vsha[..vsha.len() - 2].iter().product();
        if self.shape(token) != [d] {
            return Err(WmaeError::ShapeMismatch {
                op: "scatter_rows",
                lhs: vsha,
                rhs: self.shape(token).to_vec(),
            });
        }
        if sets.len() != nbatch || sets.iter().any(|s| s.len() != take) {
            return Err(WmaeError::Usage("scatter_rows: index sets do not match input".into()));
        }
        for set in &sets {
            if let Some(&bad) = set.iter().find(|&&i| i >= rows) {
                return Err(WmaeError::Usage(format!(
                    "scatter_rows: index {bad} out of range for {rows} rows"
                )));
            }
        }
        let vd = self.nodes[visible.0].value.data();
        let td = self.nodes[token.0].value.data();
        let mut out = Vec::with_capacity(nbatch * rows * d);
        for _ in 0..nbatch * rows {
            out.extend_from_slice(td);
        }
        for (bi, set) in sets.iter().enumerate() {
            for (si, &r) in set.iter().enumerate() {
                let src = (bi * take + si) * d;
                let dst = (bi * rows + r) * d;
                out[dst..dst + d].copy_from_slice(&vd[src..src + d]);
            }
        }
        let mut out_shape = vsha[..vsha.len() - 2].to_vec();
        out_shape.push(rows);
        out_shape.push(d);
        let needs = self.needs(visible) || self.needs(token);
        Ok(self.push(
            Tensor::new(out_shape, out),
            Op::ScatterRows { visible, token, sets, rows },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.nodes[x.0].value.data() {
            s += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.numel();
        let mut s = T::zero();
        for &v in self.nodes[x.0].value.data() {
            s += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(s / T::from_f64(n as f64)), Op::MeanAll { x }, needs)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every tracked node reachable from `loss`,
    /// which must be scalar. Gradients accumulate, so parameters shared
    /// across the graph receive the sum of their contributions.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(WmaeError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![T::zero(); n]);
        contrib(slot);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Op metadata is tiny next to the tensors; clone it out so the
        // borrow of `nodes[i]` does not outlive the arm bodies.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => self.backward_matmul(i, a, b, g),
            Op::Add { a, b } => {
                self.accumulate_broadcast(a, g, false);
                self.accumulate_broadcast(b, g, false);
            }
            Op::Sub { a, b } => {
                self.accumulate_broadcast(a, g, false);
                self.accumulate_broadcast(b, g, true);
            }
            Op::Mul { a, b } => {
                let (la, lb) = (self.nodes[a.0].value.numel(), self.nodes[b.0].value.numel());
                if self.needs(a) {
                    let bd = self.nodes[b.0].value.data();
                    let scaled: Vec<T> =
                        g.iter().enumerate().map(|(k, &gv)| gv * bd[k % lb]).collect();
                    self.accumulate_broadcast(a, &scaled, false);
                }
                if self.needs(b) {
                    let ad = self.nodes[a.0].value.data();
                    let scaled: Vec<T> =
                        g.iter().enumerate().map(|(k, &gv)| gv * ad[k % la]).collect();
                    self.accumulate_broadcast(b, &scaled, false);
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(a, |slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv * c;
                    }
                });
            }
            Op::Gelu { a } => {
                if !self.needs(a) {
                    return;
                }
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let xd = self.nodes[a.0].value.data();
                let dg: Vec<T> = xd
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                self.accumulate(a, |slot| {
                    for (s, d) in slot.iter_mut().zip(&dg) {
                        *s += *d;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backward_layer_norm(x, gamma, beta, eps, g);
            }
            Op::SoftmaxLastDim { x } => {
                if !self.needs(x) {
                    return;
                }
                let out = self.nodes[i].value.data();
                let d = *self.nodes[i].value.shape().last().unwrap();
                let mut dg = vec![T::zero(); out.len()];
                for ((srow, grow), drow) in out
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(dg.chunks_exact_mut(d))
                {
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += grow[j] * srow[j];
                    }
                    for j in 0..d {
                        drow[j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(x, |slot| {
                    for (s, d) in slot.iter_mut().zip(&dg) {
                        *s += *d;
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(x, |slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                });
            }
            Op::Permute { x, axes } => {
                if !self.needs(x) {
                    return;
                }
                let mut inverse = vec![0usize; axes.len()];
                for (o, &src) in axes.iter().enumerate() {
                    inverse[src] = o;
                }
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (dg, _) = permute_data(g, &out_shape, &inverse);
                self.accumulate(x, |slot| {
                    for (s, d) in slot.iter_mut().zip(&dg) {
                        *s += *d;
                    }
                });
            }
            Op::GatherRows { x, sets } => {
                if !self.needs(x) {
                    return;
                }
                let shape = self.nodes[x.0].value.shape().to_vec();
                let d = shape[shape.len() - 1];
                let rows = shape[shape.len() - 2];
                let take = sets.first().map_or(0, |s| s.len());
                self.accumulate(x, |slot| {
                    for (bi, set) in sets.iter().enumerate() {
                        for (si, &r) in set.iter().enumerate() {
                            let src = (bi * take + si) * d;
                            let dst = (bi * rows + r) * d;
                            for j in 0..d {
                                slot[dst + j] += g[src + j];
                            }
                        }
                    }
                });
            }
            Op::ScatterRows { visible, token, sets, rows } => {
                let d = *self.nodes[i].value.shape().last().unwrap();
                let take = sets.first().map_or(0, |s| s.len());
                if self.needs(visible) {
                    self.accumulate(visible, |slot| {
                        for (bi, set) in sets.iter().enumerate() {
                            for (si, &r) in set.iter().enumerate() {
                                let dst = (bi * take + si) * d;
                                let src = (bi * rows + r) * d;
                                for j in 0..d {
                                    slot[dst + j] += g[src + j];
                                }
                            }
                        }
                    });
                }
                if self.needs(token) {
                    self.accumulate(token, |slot| {
                        for (bi, set) in sets.iter().enumerate() {
                            let mut masked = vec![true; rows];
                            for &r in set {
                                masked[r] = false;
                            }
                            for (r, &is_masked) in masked.iter().enumerate() {
                                if is_masked {
                                    let src = (bi * rows + r) * d;
                                    for j in 0..d {
                                        slot[j] += g[src + j];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.accumulate(x, |slot| {
                    for s in slot.iter_mut() {
                        *s += gv;
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].value.numel();
                let gv = g[0] / T::from_f64(n as f64);
                self.accumulate(x, |slot| {
                    for s in slot.iter_mut() {
                        *s += gv;
                    }
                });
            }
        }
    }

    /// Add `g` (shaped like the op output) into `id`'s gradient, summing
    /// over leading broadcast dims when `id` is the smaller operand.
    fn accumulate_broadcast(&mut self, id: NodeId, g: &[T], negate: bool) {
        if !self.needs(id) {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        self.accumulate(id, |slot| {
            if negate {
                for (k, &gv) in g.iter().enumerate() {
                    slot[k % n] -= gv;
                }
            } else {
                for (k, &gv) in g.iter().enumerate() {
                    slot[k % n] += gv;
                }
            }
        });
    }

    fn backward_matmul(&mut self, i: usize, a: NodeId, b: NodeId, g: &[T]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        let rank = out_shape.len();
        let (m, n) = (out_shape[rank - 2], out_shape[rank - 1]);
        let k = *self.nodes[a.0].value.shape().last().unwrap();
        let nbatch: usize = out_shape[..rank - 2].iter().product();
        let na = self.nodes[a.0].value.numel() / (m * k);
        let nb = self.nodes[b.0].value.numel() / (k * n);

        if self.needs(a) {
            let mut da = vec![T::zero(); self.nodes[a.0].value.numel()];
            let bd = self.nodes[b.0].value.data();
            for i in 0..nbatch {
                let gsl = &g[i * m * n..];
                let bsl = &bd[(i % nb) * k * n..];
                let dst = &mut da[(i % na) * m * k..(i % na) * m * k + m * k];
                // dA += g (M x N) * B^T (N x K); B^T via swapped strides
                T::gemm(m, n, k, gsl, n as isize, 1, bsl, 1, n as isize, T::one(), dst, k as isize, 1);
            }
            self.accumulate(a, |slot| {
                for (s, d) in slot.iter_mut().zip(&da) {
                    *s += *d;
                }
            });
        }
        if self.needs(b) {
            let mut db = vec![T::zero(); self.nodes[b.0].value.numel()];
            let ad = self.nodes[a.0].value.data();
            for i in 0..nbatch {
                let gsl = &g[i * m * n..];
                let asl = &ad[(i % na) * m * k..];
                let dst = &mut db[(i % nb) * k * n..(i % nb) * k * n + k * n];
                // dB += A^T (K x M) * g (M x N)
                T::gemm(k, m, n, asl, 1, k as isize, gsl, n as isize, 1, T::one(), dst, n as isize, 1);
            }
            self.accumulate(b, |slot| {
                for (s, d) in slot.iter_mut().zip(&db) {
                    *s += *d;
                }
            });
        }
    }

    fn backward_layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T, g: &[T]) {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let d = *shape.last().unwrap();
        let dt = T::from_f64(d as f64);
        let xd = self.nodes[x.0].value.data().to_vec();
        let gd = self.nodes[gamma.0].value.data().to_vec();

        let mut dx = vec![T::zero(); xd.len()];
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        let mut dxh = vec![T::zero(); d];

        for (ri, row) in xd.chunks_exact(d).enumerate() {
            let grow = &g[ri * d..(ri + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= dt;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var /= dt;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..d {
                xhat[j] = (row[j] - mean) * inv_std;
            }
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xhat = T::zero();
            for j in 0..d {
                dgamma[j] += grow[j] * xhat[j];
                dbeta[j] += grow[j];
                dxh[j] = grow[j] * gd[j];
                sum_dxh += dxh[j];
                sum_dxh_xhat += dxh[j] * xhat[j];
            }
            let drow = &mut dx[ri * d..(ri + 1) * d];
            for j in 0..d {
                drow[j] = inv_std / dt * (dt * dxh[j] - sum_dxh - xhat[j] * sum_dxh_xhat);
            }
        }
        self.accumulate(x, |slot| {
            for (s, v) in slot.iter_mut().zip(&dx) {
                *s += *v;
            }
        });
        self.accumulate(gamma, |slot| {
            for (s, v) in slot.iter_mut().zip(&dgamma) {
                *s += *v;
            }
        });
        self.accumulate(beta, |slot| {
            for (s, v) in slot.iter_mut().zip(&dbeta) {
                *s += *v;
            }
        });
    }
}

/// Broadcast rule: equal shapes, or one shape is a suffix of the other
/// (extra leading dims are the batch). Returns the output shape.
fn suffix_broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Some(long.to_vec())
    } else {
        None
    }
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    // out stride for each INPUT axis: where does input axis land in output
    let mut scatter = vec![0usize; shape.len()];
    for (o, &src) in axes.iter().enumerate() {
        scatter[src] = out_strides[o];
    }
    let mut out = vec![data[0]; data.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut out_off = 0usize;
    for (lin, &v) in data.iter().enumerate() {
        out[out_off] = v;
        if lin + 1 == data.len() {
            break;
        }
        // increment multi-index, updating out_off incrementally
        let mut ax = rank - 1;
        loop {
            idx[ax] += 1;
            out_off += scatter[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            out_off -= scatter[ax] * shape[ax];
            idx[ax] = 0;
            if ax == 0 {
                break;
            }
            ax -= 1;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), vals.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t64(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[2, 2, 3], &(0..12).map(|i| i as f64).collect::<Vec<_>>()));
        let b = tape.constant(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2, 2]);
        // batch 1, row 1 of a = [9, 10, 11]
        let expect = 9.0 * 1.0 + 10.0 * 3.0 + 11.0 * 5.0;
        assert_eq!(tape.value(c).data()[6], expect);
    }

    #[test]
    fn softmax_symmetry_and_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax_lastdim(x).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = tape.constant(t64(&[2], &[1000.0, 0.0]));
        let s = tape.softmax_lastdim(x).unwrap();
        let out = tape.value(s).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] > 0.999999 && out[1] < 1e-6);

        let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.softmax_lastdim(x).unwrap();
        let out = tape.value(s).data();
        for (got, want) in out.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[3], &[5.0, 5.0, 5.0]));
        let gamma = tape.constant(t64(&[3], &[1.0, 1.0, 1.0]));
        let beta = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_slice() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2], &[1.0, 3.0]));
        let gamma = tape.constant(t64(&[2], &[1.0, 1.0]));
        let beta = tape.constant(t64(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5, "{out:?}");
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2]));
        let g = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(WmaeError::Config(_))));
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[4], &[0.0, 1.0, 8.0, -8.0]));
        let y = tape.gelu(x);
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.8413).abs() < 1e-3);
        assert!((out[2] - 8.0).abs() < 1e-6);
        assert!(out[3].abs() < 1e-6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(t64(&[3], &[2.0, -1.0, 0.5]));
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_mse_single_weight() {
        // mse(w, 0) with w = [2]: loss = mean(w^2) = 4, dloss/dw = 2w = 4
        let mut tape = Tape::new();
        let w = tape.param(t64(&[1], &[2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.mean_all(sq);
        assert_eq!(tape.value(loss).item(), 4.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(t64(&[2], &[1.0, 2.0]));
        let y = tape.scale(w, 2.0);
        assert!(matches!(tape.backward(y), Err(WmaeError::Usage(_))));
    }

    #[test]
    fn shared_parameter_grads_accumulate() {
        // loss = sum(w * a) + sum(w * b) => dw = a + b
        let mut tape = Tape::new();
        let w = tape.param(t64(&[2], &[1.0, 1.0]));
        let a = tape.constant(t64(&[2], &[2.0, 3.0]));
        let b = tape.constant(t64(&[2], &[10.0, 20.0]));
        let wa = tape.mul(w, a).unwrap();
        let wb = tape.mul(w, b).unwrap();
        let s1 = tape.sum_all(wa);
        let s2 = tape.sum_all(wb);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[12.0, 23.0]);
    }

    #[test]
    fn broadcast_add_bias_reduces_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 3], &[0.0; 6]));
        let bias = tape.param(t64(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.add(x, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(bias).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_rejects_non_suffix() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let y = tape.constant(Tensor::zeros(vec![2]));
        assert!(tape.add(x, y).is_err());
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let mut tape = Tape::new();
        let x = tape.param(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = tape.permute(y, &[1, 0]).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());

        // 3-D permute sanity: shape [2,3,4] -> axes (2,0,1) -> [4,2,3]
        let vals: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x3 = tape.constant(t64(&[2, 3, 4], &vals));
        let p = tape.permute(x3, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        // out[i,j,k] = in[j,k,i]
        assert_eq!(tape.value(p).data()[0], 0.0);
        let s = strides(&[2, 3, 4]);
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * s[0] + 2 * s[1] + 1 * s[2]) as f64);
    }

    #[test]
    fn gather_scatter_roundtrip_with_tags() {
        // tag each row with its index; scatter(gather(x)) must put every
        // visible row back and the token everywhere else
        let mut tape = Tape::new();
        let rows = 5;
        let d = 2;
        let vals: Vec<f64> = (0..rows * d).map(|i| (i / d) as f64).collect();
        let x = tape.param(t64(&[rows, d], &vals));
        let keep = vec![vec![0usize, 2, 4]];
        let g = tape.gather_rows(x, keep.clone()).unwrap();
        assert_eq!(tape.value(g).shape(), &[3, 2]);
        assert_eq!(tape.value(g).data(), &[0.0, 0.0, 2.0, 2.0, 4.0, 4.0]);

        let token = tape.param(t64(&[d], &[-1.0, -1.0]));
        let s = tape.scatter_rows(g, token, keep, rows).unwrap();
        let out = tape.value(s).data();
        assert_eq!(out, &[0.0, 0.0, -1.0, -1.0, 2.0, 2.0, -1.0, -1.0, 4.0, 4.0]);

        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        // every visible row of x gets grad 1, masked rows 0
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // token grad = number of masked rows per component
        assert_eq!(tape.grad(token).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.gather_rows(x, vec![vec![3]]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let vals: Vec<f64> = (0..24).map(|i| (i as f64) * 0.37 - 2.0).collect();
            let x = tape.param(t64(&[4, 6], &vals));
            let w = tape.param(t64(&[6, 3], &vals[..18]));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.gelu(h);
            let s = tape.softmax_lastdim(a).unwrap();
            let loss = tape.mean_all(s);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item().to_bits(),
                tape.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
