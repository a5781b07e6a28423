//! Reverse-mode differentiation over a per-pass tape.
//!
//! A [`Tape`] lives for exactly one forward pass. Ops are tape methods; each
//! records one entry holding the input node ids and whatever values its
//! backward rule needs (buffers are `Arc`-shared, so "saving" is free).
//! Entries are appended in execution order, which makes the list a
//! topological order by construction: an entry can only reference node ids
//! that already existed when it ran. [`Tape::backward`] walks the entries
//! exactly once, in reverse.
//!
//! Leaves (parameters, probed inputs) keep their node ids across passes, so
//! a fresh tape every step still yields gradients keyed by stable ids.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{fresh_node, Element, IndexTensor, Tensor};

/// Identity of a tensor on a tape. Allocated from a process-wide counter;
/// never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u64);

impl NodeId {
    pub fn raw(self) -> u64 {
        self.0
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Gradients keyed by leaf node id, as returned by [`Tape::backward`].
#[derive(Debug)]
pub struct GradientMap<T: Element> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Element> GradientMap<T> {
    /// Assembles a map directly; lets tests exercise consumers without a tape.
    #[cfg(test)]
    pub(crate) fn from_entries(entries: Vec<(NodeId, Tensor<T>)>) -> Self {
        Self {
            grads: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

enum Rule<T: Element> {
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Sub {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Relu {
        x: Tensor<T>,
    },
    AddBias {
        x: Option<NodeId>,
        v: Option<NodeId>,
        channels: usize,
    },
    ScaleChannels {
        x: Tensor<T>,
        v: Tensor<T>,
    },
    /// Per-channel affine with constant coefficients; only x is
    /// differentiable.
    ShiftScale {
        x: NodeId,
        scale: Arc<[T]>,
    },
    BatchNormTrain {
        x: Option<NodeId>,
        gamma: Tensor<T>,
        beta: Option<NodeId>,
        xhat: Arc<[T]>,
        inv_std: Arc<[T]>,
    },
    ReduceMax {
        x: Tensor<T>,
        axis: usize,
        arg: Arc<[usize]>,
    },
    Concat {
        parts: Vec<(Option<NodeId>, Vec<usize>)>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        in_shape: Vec<usize>,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: NodeId,
        in_shape: Vec<usize>,
    },
    BroadcastAxis {
        x: NodeId,
        in_shape: Vec<usize>,
        axis: usize,
    },
    GatherPoints {
        x: NodeId,
        in_shape: Vec<usize>,
        idx: Arc<[usize]>,
        idx_shape: Vec<usize>,
    },
    SumAll {
        x: NodeId,
        in_shape: Vec<usize>,
    },
    SoftmaxCe {
        logits: NodeId,
        probs: Arc<[T]>,
        labels: Arc<[usize]>,
    },
}

struct Entry<T: Element> {
    out: NodeId,
    out_shape: Vec<usize>,
    rule: Rule<T>,
}

/// One forward pass worth of recorded operations.
pub struct Tape<T: Element> {
    entries: Vec<Entry<T>>,
    /// Shapes of every node id seen as a leaf (watched, or consumed as an
    /// entry input without being produced here).
    leaf_shapes: HashMap<NodeId, Vec<usize>>,
    produced: HashMap<NodeId, ()>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A recording tape, for passes that will be differentiated.
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            leaf_shapes: HashMap::new(),
            produced: HashMap::new(),
            recording: true,
        }
    }

    /// A non-recording tape for inference paths. Forward results are
    /// identical; nothing is saved and `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    /// Registers a leaf so it can receive a zero gradient even if the
    /// forward pass never touches it.
    pub fn watch(&mut self, t: &Tensor<T>) -> Result<()> {
        let id = t
            .node()
            .ok_or_else(|| Error::Contract("watch() needs a tensor with a node id".into()))?;
        self.leaf_shapes.entry(id).or_insert_with(|| t.shape().to_vec());
        Ok(())
    }

    fn note_input(&mut self, t: &Tensor<T>) {
        if let Some(id) = t.node() {
            if !self.produced.contains_key(&id) {
                self.leaf_shapes
                    .entry(id)
                    .or_insert_with(|| t.shape().to_vec());
            }
        }
    }

    fn finish(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        rule: impl FnOnce() -> Rule<T>,
        op: &'static str,
    ) -> Tensor<T> {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{op}: non-finite value in output"
        );
        let _ = op;
        if self.recording && inputs.iter().any(|t| t.node().is_some()) {
            for t in inputs {
                self.note_input(t);
            }
            let out = fresh_node();
            self.produced.insert(out, ());
            let rule = rule();
            self.entries.push(Entry {
                out,
                out_shape: shape.clone(),
                rule,
            });
            Tensor::with_node(shape, data, Some(out))
        } else {
            Tensor::with_node(shape, data, None)
        }
    }

    fn same_shape(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn channel_vec(op: &'static str, x: &Tensor<T>, v: &Tensor<T>) -> Result<usize> {
        let c = x.channels();
        if v.rank() != 1 || v.len() != c {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        Ok(c)
    }

    /// Elementwise sum; shapes must match exactly. Residual additions go
    /// through here, so no implicit broadcasting.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Self::same_shape("add", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.finish(
            a.shape().to_vec(),
            data,
            &[a, b],
            || Rule::Add {
                a: a.node(),
                b: b.node(),
            },
            "add",
        ))
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Self::same_shape("sub", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.finish(
            a.shape().to_vec(),
            data,
            &[a, b],
            || Rule::Sub {
                a: a.node(),
                b: b.node(),
            },
            "sub",
        ))
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Self::same_shape("mul", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.finish(
            a.shape().to_vec(),
            data,
            &[a, b],
            || Rule::Mul {
                a: a.clone(),
                b: b.clone(),
            },
            "mul",
        ))
    }

    pub fn scale(&mut self, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        let data = x.data().iter().map(|&v| v * c).collect();
        let node = x.node();
        Ok(self.finish(
            x.shape().to_vec(),
            data,
            &[x],
            || Rule::Scale {
                x: node.expect("recorded only when input has a node"),
                c,
            },
            "scale",
        ))
    }

    /// Batched matrix product `[.., m, p] x [.., p, q] -> [.., m, q]`;
    /// leading dims broadcast.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, data) = ops::matmul_forward(a.data(), a.shape(), b.data(), b.shape())?;
        Ok(self.finish(
            shape,
            data,
            &[a, b],
            || Rule::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
            "matmul",
        ))
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Ok(self.finish(
            x.shape().to_vec(),
            data,
            &[x],
            || Rule::Relu { x: x.clone() },
            "relu",
        ))
    }

    /// y[.., c] = x[.., c] + v[c]
    pub fn add_bias(&mut self, x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let c = Self::channel_vec("add_bias", x, v)?;
        let vd = v.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv + vd[i % c])
            .collect();
        Ok(self.finish(
            x.shape().to_vec(),
            data,
            &[x, v],
            || Rule::AddBias {
                x: x.node(),
                v: v.node(),
                channels: c,
            },
            "add_bias",
        ))
    }

    /// y[.., c] = x[.., c] * v[c]
    pub fn scale_channels(&mut self, x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let c = Self::channel_vec("scale_channels", x, v)?;
        let vd = v.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv * vd[i % c])
            .collect();
        Ok(self.finish(
            x.shape().to_vec(),
            data,
            &[x, v],
            || Rule::ScaleChannels {
                x: x.clone(),
                v: v.clone(),
            },
            "scale_channels",
        ))
    }

    /// y[.., c] = (x[.., c] + shift[c]) * scale[c] with constant
    /// coefficients (used for normalization against running statistics).
    pub fn shift_scale(&mut self, x: &Tensor<T>, shift: &[T], scale: &[T]) -> Result<Tensor<T>> {
        let c = x.channels();
        if shift.len() != c || scale.len() != c {
            return Err(Error::BadShape {
                op: "shift_scale",
                msg: format!(
                    "coefficient lengths {}/{} do not match {c} channels",
                    shift.len(),
                    scale.len()
                ),
                shape: x.shape().to_vec(),
            });
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| (xv + shift[i % c]) * scale[i % c])
            .collect();
        let node = x.node();
        let scale_arc: Arc<[T]> = scale.to_vec().into();
        Ok(self.finish(
            x.shape().to_vec(),
            data,
            &[x],
            || Rule::ShiftScale {
                x: node.expect("recorded only when input has a node"),
                scale: scale_arc,
            },
            "shift_scale",
        ))
    }

    /// Batch normalization with batch statistics over all non-channel axes
    /// (channel = last axis, biased variance). Returns the output plus the
    /// per-channel batch mean and variance so the caller can maintain
    /// running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let c = Self::channel_vec("batch_norm", x, gamma)?;
        Self::channel_vec("batch_norm", x, beta)?;
        let rows = x.len() / c;
        if rows == 0 {
            return Err(Error::BadShape {
                op: "batch_norm",
                msg: "empty batch".into(),
                shape: x.shape().to_vec(),
            });
        }
        let xd = x.data();
        let m = T::from_f64(rows as f64);
        let mut mean = vec![T::zero(); c];
        for (i, &v) in xd.iter().enumerate() {
            mean[i % c] += v;
        }
        for v in &mut mean {
            *v = *v / m;
        }
        let mut var = vec![T::zero(); c];
        for (i, &v) in xd.iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        for v in &mut var {
            *v = *v / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let gd = gamma.data();
        let bd = beta.data();
        let data: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gd[i % c] * h + bd[i % c])
            .collect();
        let xhat_arc: Arc<[T]> = xhat.into();
        let istd_arc: Arc<[T]> = inv_std.into();
        let out = self.finish(
            x.shape().to_vec(),
            data,
            &[x, gamma, beta],
            || Rule::BatchNormTrain {
                x: x.node(),
                gamma: gamma.clone(),
                beta: beta.node(),
                xhat: xhat_arc,
                inv_std: istd_arc,
            },
            "batch_norm",
        );
        Ok((out, mean, var))
    }

    /// Max over one axis. Returns values and winning indices; ties keep the
    /// lowest index and the gradient routes to the winner only.
    pub fn reduce_max(&mut self, x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, IndexTensor)> {
        let (out_shape, vals, args) = ops::reduce_max_forward(x.data(), x.shape(), axis)?;
        let arg_t = IndexTensor::new(&out_shape, args)?;
        let arg_arc = arg_t.share();
        let out = self.finish(
            out_shape,
            vals,
            &[x],
            || Rule::ReduceMax {
                x: x.clone(),
                axis,
                arg: arg_arc,
            },
            "reduce_max",
        );
        Ok((out, arg_t))
    }

    pub fn concat(&mut self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let views: Vec<(&[T], &[usize])> =
            parts.iter().map(|t| (t.data(), t.shape())).collect();
        let (shape, data) = ops::concat_forward(&views, axis)?;
        Ok(self.finish(
            shape,
            data,
            parts,
            || Rule::Concat {
                parts: parts
                    .iter()
                    .map(|t| (t.node(), t.shape().to_vec()))
                    .collect(),
                axis,
            },
            "concat",
        ))
    }

    pub fn slice(
        &mut self,
        x: &Tensor<T>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor<T>> {
        let (shape, data) = ops::slice_forward(x.data(), x.shape(), axis, start, len)?;
        let node = x.node();
        let in_shape = x.shape().to_vec();
        Ok(self.finish(
            shape,
            data,
            &[x],
            || Rule::Slice {
                x: node.expect("recorded only when input has a node"),
                in_shape,
                axis,
                start,
            },
            "slice",
        ))
    }

    pub fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != x.len() {
            return Err(Error::BadShape {
                op: "reshape",
                msg: format!("cannot view {} elements as {shape:?}", x.len()),
                shape: x.shape().to_vec(),
            });
        }
        let node = x.node();
        let in_shape = x.shape().to_vec();
        Ok(self.finish(
            shape.to_vec(),
            x.to_vec(),
            &[x],
            || Rule::Reshape {
                x: node.expect("recorded only when input has a node"),
                in_shape,
            },
            "reshape",
        ))
    }

    /// Repeats a length-1 axis n times; the gradient sums back over it.
    pub fn broadcast_axis(&mut self, x: &Tensor<T>, axis: usize, n: usize) -> Result<Tensor<T>> {
        let (shape, data) = ops::broadcast_axis_forward(x.data(), x.shape(), axis, n)?;
        let node = x.node();
        let in_shape = x.shape().to_vec();
        Ok(self.finish(
            shape,
            data,
            &[x],
            || Rule::BroadcastAxis {
                x: node.expect("recorded only when input has a node"),
                in_shape,
                axis,
            },
            "broadcast_axis",
        ))
    }

    /// out[b, i, s, :] = x[b, idx[b, i, s], :]. The gradient scatter-adds
    /// back into x; indices themselves are not differentiable.
    pub fn gather_points(&mut self, x: &Tensor<T>, idx: &IndexTensor) -> Result<Tensor<T>> {
        let (shape, data) =
            ops::gather_points_forward(x.data(), x.shape(), idx.data(), idx.shape())?;
        let node = x.node();
        let in_shape = x.shape().to_vec();
        let idx_arc = idx.share();
        let idx_shape = idx.shape().to_vec();
        Ok(self.finish(
            shape,
            data,
            &[x],
            || Rule::GatherPoints {
                x: node.expect("recorded only when input has a node"),
                in_shape,
                idx: idx_arc,
                idx_shape,
            },
            "gather_points",
        ))
    }

    pub fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = T::zero();
        for &v in x.data() {
            s += v;
        }
        let node = x.node();
        let in_shape = x.shape().to_vec();
        Ok(self.finish(
            vec![],
            vec![s],
            &[x],
            || Rule::SumAll {
                x: node.expect("recorded only when input has a node"),
                in_shape,
            },
            "sum_all",
        ))
    }

    pub fn mean_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.sum_all(x)?;
        self.scale(&s, T::one() / T::from_f64(x.len() as f64))
    }

    /// Mean categorical cross-entropy from raw logits, stabilized by
    /// max-subtraction. Logits are `[.., classes]`; labels index rows in
    /// row-major order of the leading axes.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor<T>,
        labels: &[usize],
    ) -> Result<Tensor<T>> {
        if logits.rank() < 2 {
            return Err(Error::BadShape {
                op: "cross_entropy",
                msg: "logits must have at least 2 axes".into(),
                shape: logits.shape().to_vec(),
            });
        }
        let classes = logits.channels();
        let rows = logits.len() / classes;
        if labels.len() != rows {
            return Err(Error::Data(format!(
                "{rows} logit rows but {} labels",
                labels.len()
            )));
        }
        let xd = logits.data();
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for r in 0..rows {
            let label = labels[r];
            if label >= classes {
                return Err(Error::Data(format!(
                    "item {r}: label {label} outside 0..{classes}"
                )));
            }
            let row = &xd[r * classes..(r + 1) * classes];
            let mut mx = row[0];
            for &v in &row[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * classes + j] = e;
                denom += e;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p = *p / denom;
            }
            total += denom.ln() - (row[label] - mx);
        }
        let loss = total / T::from_f64(rows as f64);
        let node = logits.node();
        let probs_arc: Arc<[T]> = probs.into();
        let labels_arc: Arc<[usize]> = labels.to_vec().into();
        Ok(self.finish(
            vec![],
            vec![loss],
            &[logits],
            || Rule::SoftmaxCe {
                logits: node.expect("recorded only when input has a node"),
                probs: probs_arc,
                labels: labels_arc,
            },
            "cross_entropy",
        ))
    }

    /// Smallest distance from any recorded relu or max site to its decision
    /// boundary. Gradient checks use this to spot draws where a finite
    /// difference step could cross a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for e in &self.entries {
            match &e.rule {
                Rule::Relu { x } => {
                    for &v in x.data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Rule::ReduceMax { x, axis, arg } => {
                    let (outer, extent, inner) =
                        ops::axis_split(x.shape(), *axis).expect("validated at record time");
                    if extent < 2 {
                        continue;
                    }
                    let xd = x.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let win = arg[o * inner + i];
                            let best = xd[(o * extent + win) * inner + i].as_f64();
                            let mut second = f64::NEG_INFINITY;
                            for e2 in 0..extent {
                                if e2 == win {
                                    continue;
                                }
                                second = second.max(xd[(o * extent + e2) * inner + i].as_f64());
                            }
                            margin = margin.min(best - second);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar loss. Returns gradients for exactly the
    /// requested leaves; leaves that were watched but untouched get zeros,
    /// ids the tape has never seen are an error.
    pub fn backward(&self, loss: &Tensor<T>, leaves: &[NodeId]) -> Result<GradientMap<T>> {
        let loss_id = loss
            .node()
            .ok_or_else(|| Error::Contract("loss was not produced on this tape".into()))?;
        if !self.produced.contains_key(&loss_id) {
            return Err(Error::Contract(
                "loss was not produced on this tape".into(),
            ));
        }
        if loss.rank() != 0 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: HashMap<NodeId, Vec<T>> = HashMap::new();
        grads.insert(loss_id, vec![T::one()]);

        for e in self.entries.iter().rev() {
            let Some(g) = grads.remove(&e.out) else {
                continue;
            };
            self.apply_rule(e, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for &leaf in leaves {
            let shape = self
                .leaf_shapes
                .get(&leaf)
                .ok_or(Error::UnknownLeaf(leaf.0))?;
            let t = match grads.get(&leaf) {
                Some(g) => Tensor::new(shape, g.clone())?,
                None => Tensor::zeros(shape),
            };
            out.insert(leaf, t);
        }
        Ok(GradientMap { grads: out })
    }

    fn apply_rule(&self, e: &Entry<T>, g: &[T], grads: &mut HashMap<NodeId, Vec<T>>) {
        fn acc<T: Element>(
            grads: &mut HashMap<NodeId, Vec<T>>,
            id: NodeId,
            len: usize,
        ) -> &mut Vec<T> {
            grads.entry(id).or_insert_with(|| vec![T::zero(); len])
        }

        match &e.rule {
            Rule::Add { a, b } => {
                for id in [a, b].into_iter().flatten() {
                    let buf = acc(grads, *id, g.len());
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Rule::Sub { a, b } => {
                if let Some(id) = a {
                    let buf = acc(grads, *id, g.len());
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if let Some(id) = b {
                    let buf = acc(grads, *id, g.len());
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Rule::Mul { a, b } => {
                if let Some(id) = a.node() {
                    let buf = acc(grads, id, g.len());
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(b.data()) {
                        *o += gv * bv;
                    }
                }
                if let Some(id) = b.node() {
                    let buf = acc(grads, id, g.len());
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(a.data()) {
                        *o += gv * av;
                    }
                }
            }
            Rule::Scale { x, c } => {
                let buf = acc(grads, *x, g.len());
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv * *c;
                }
            }
            Rule::Matmul { a, b } => {
                let (da, db) = ops::matmul_backward(
                    g,
                    a.data(),
                    a.shape(),
                    b.data(),
                    b.shape(),
                    a.node().is_some(),
                    b.node().is_some(),
                )
                .expect("shapes were validated in the forward pass");
                if let (Some(id), Some(da)) = (a.node(), da) {
                    let buf = acc(grads, id, da.len());
                    for (o, v) in buf.iter_mut().zip(da) {
                        *o += v;
                    }
                }
                if let (Some(id), Some(db)) = (b.node(), db) {
                    let buf = acc(grads, id, db.len());
                    for (o, v) in buf.iter_mut().zip(db) {
                        *o += v;
                    }
                }
            }
            Rule::Relu { x } => {
                if let Some(id) = x.node() {
                    let buf = acc(grads, id, g.len());
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x.data()) {
                        if xv > T::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Rule::AddBias { x, v, channels } => {
                if let Some(id) = x {
                    let buf = acc(grads, *id, g.len());
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if let Some(id) = v {
                    let buf = acc(grads, *id, *channels);
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % channels] += gv;
                    }
                }
            }
            Rule::ScaleChannels { x, v } => {
                let c = v.len();
                if let Some(id) = x.node() {
                    let vd = v.data();
                    let buf = acc(grads, id, g.len());
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i] += gv * vd[i % c];
                    }
                }
                if let Some(id) = v.node() {
                    let xd = x.data();
                    let buf = acc(grads, id, c);
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % c] += gv * xd[i];
                    }
                }
            }
            Rule::ShiftScale { x, scale } => {
                let c = scale.len();
                let buf = acc(grads, *x, g.len());
                for (i, &gv) in g.iter().enumerate() {
                    buf[i] += gv * scale[i % c];
                }
            }
            Rule::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let m = T::from_f64(rows as f64);
                // Per-channel sums of g and g*xhat double as dbeta/dgamma.
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, &gv) in g.iter().enumerate() {
                    sum_g[i % c] += gv;
                    sum_gx[i % c] += gv * xhat[i];
                }
                if let Some(id) = beta {
                    let buf = acc(grads, *id, c);
                    for (o, &v) in buf.iter_mut().zip(&sum_g) {
                        *o += v;
                    }
                }
                if let Some(id) = gamma.node() {
                    let buf = acc(grads, id, c);
                    for (o, &v) in buf.iter_mut().zip(&sum_gx) {
                        *o += v;
                    }
                }
                if let Some(id) = x {
                    let gd = gamma.data();
                    let buf = acc(grads, *id, g.len());
                    for (i, &gv) in g.iter().enumerate() {
                        let ch = i % c;
                        let centered = gv - sum_g[ch] / m - xhat[i] * (sum_gx[ch] / m);
                        buf[i] += gd[ch] * inv_std[ch] * centered;
                    }
                }
            }
            Rule::ReduceMax { x, axis, arg } => {
                if let Some(id) = x.node() {
                    let (outer, extent, inner) =
                        ops::axis_split(x.shape(), *axis).expect("validated at record time");
                    let buf = acc(grads, id, x.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let win = arg[o * inner + i];
                            buf[(o * extent + win) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Rule::Concat { parts, axis } => {
                let mut offset = 0usize;
                for (node, shape) in parts {
                    let extent = shape[*axis];
                    if let Some(id) = node {
                        let (_, piece) =
                            ops::slice_forward(g, &e.out_shape, *axis, offset, extent)
                                .expect("validated at record time");
                        let buf = acc(grads, *id, piece.len());
                        for (o, v) in buf.iter_mut().zip(piece) {
                            *o += v;
                        }
                    }
                    offset += extent;
                }
            }
            Rule::Slice {
                x,
                in_shape,
                axis,
                start,
            } => {
                let (outer, extent, inner) =
                    ops::axis_split(in_shape, *axis).expect("validated at record time");
                let len = e.out_shape[*axis];
                let numel: usize = in_shape.iter().product();
                let buf = acc(grads, *x, numel);
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        buf[dst + i] += g[src + i];
                    }
                }
            }
            Rule::Reshape { x, in_shape } => {
                let numel: usize = in_shape.iter().product();
                let buf = acc(grads, *x, numel);
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                }
            }
            Rule::BroadcastAxis { x, in_shape, axis } => {
                let (outer, _, inner) =
                    ops::axis_split(in_shape, *axis).expect("validated at record time");
                let n = e.out_shape[*axis];
                let numel: usize = in_shape.iter().product();
                let buf = acc(grads, *x, numel);
                for o in 0..outer {
                    for rep in 0..n {
                        let src = (o * n + rep) * inner;
                        for i in 0..inner {
                            buf[o * inner + i] += g[src + i];
                        }
                    }
                }
            }
            Rule::GatherPoints {
                x,
                in_shape,
                idx,
                idx_shape,
            } => {
                let c = in_shape[2];
                let (b, i_n, s) = (idx_shape[0], idx_shape[1], idx_shape[2]);
                let numel: usize = in_shape.iter().product();
                let buf = acc(grads, *x, numel);
                for bi in 0..b {
                    for ii in 0..i_n {
                        for si in 0..s {
                            let j = idx[(bi * i_n + ii) * s + si];
                            let dst = (bi * in_shape[1] + j) * c;
                            let src = ((bi * i_n + ii) * s + si) * c;
                            for ch in 0..c {
                                buf[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
            }
            Rule::SumAll { x, in_shape } => {
                let numel: usize = in_shape.iter().product();
                let buf = acc(grads, *x, numel);
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }
            Rule::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let scale = g[0] / T::from_f64(rows as f64);
                let buf = acc(grads, *logits, probs.len());
                for r in 0..rows {
                    for j in 0..classes {
                        let mut v = probs[r * classes + j];
                        if j == labels[r] {
                            v = v - T::one();
                        }
                        buf[r * classes + j] += v * scale;
                    }
                }
            }
        }
    }
}
