//! Training loop pieces: Adam, the step-decay schedule, batching, metrics,
//! part-IoU scoring and on-disk checkpoints.
//!
//! Everything here is deterministic for a fixed seed. Parameter traversal
//! order (the model visitors) doubles as the layout of optimizer state and
//! checkpoint files, so two runs of the same config write identical bytes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::RunCtx;
use crate::data::{augment, AugmentParams, Dataset, PartRange, PointCloud};
use crate::error::{named_io, Error, Result};
use crate::rng::{rng_from, SALT_AUGMENT, SALT_DROPOUT, SALT_SHUFFLE};
use crate::sawnet::{Model, ModelSpec, Task};
use crate::tensor::{DType, Element, GradientMap, Tape, Tensor};

/// Optimizer hyperparameters plus the step-decay schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate is halved once per this many epochs; 0 disables decay.
    pub halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            halve_every: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive and finite, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.halve_every == 0 {
            return self.lr;
        }
        self.lr * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

/// Scheduled rate under the default settings: 1e-3 halved every 20 epochs.
pub fn lr_at(epoch: usize) -> f64 {
    OptimConfig::default().lr_at(epoch)
}

/// The update for one parameter. `m`, `v` and `theta` are mutated in place.
///
/// Every operation is sign-symmetric in the gradient, so flipping `g`
/// flips the applied update exactly (bit-for-bit).
fn adam_update<T: Element>(cfg: &OptimConfig, t: u64, lr: f64, m: &mut [T], v: &mut [T], theta: &mut [T], g: &[T]) {
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    // Bias corrections depend only on the step count; fold them into scalars.
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let eps = T::from_f64(cfg.eps);
    let rate = T::from_f64(lr);
    for j in 0..theta.len() {
        m[j] = b1 * m[j] + (one - b1) * g[j];
        v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
        let mhat = m[j] / c1;
        let vhat = v[j] / c2;
        theta[j] -= rate * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam with per-parameter first/second moment tensors.
///
/// State is laid out in model visitor order and the parameter names are
/// recorded at construction; a model whose traversal later disagrees with
/// that record is a contract violation, not a silent mismatch.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    cfg: OptimConfig,
    t: u64,
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(model: &mut Model<T>, cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        model.visit_params(&mut |name, t| {
            names.push(name.to_string());
            m.push(Tensor::zeros(t.shape()));
            v.push(Tensor::zeros(t.shape()));
            Ok(())
        })?;
        Ok(Self { cfg, t: 0, names, m, v })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Completed update steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with the given scheduled rate.
    pub fn step(&mut self, model: &mut Model<T>, grads: &GradientMap<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let cfg = self.cfg.clone();
        let names = &self.names;
        let ms = &mut self.m;
        let vs = &mut self.v;
        let mut slot = 0usize;
        model.visit_params(&mut |name, theta| {
            let i = slot;
            slot += 1;
            let expect = names.get(i).ok_or_else(|| {
                Error::Contract(format!(
                    "optimizer state holds {} parameters but the model visited more",
                    names.len()
                ))
            })?;
            if expect != name {
                return Err(Error::Contract(format!(
                    "parameter order changed: slot {i} visited {name:?} but optimizer state says {expect:?}"
                )));
            }
            let id = theta
                .node()
                .ok_or_else(|| Error::Contract(format!("parameter {name} carries no node id")))?;
            let g = grads
                .get(id)
                .ok_or_else(|| Error::Contract(format!("no gradient recorded for parameter {name}")))?;
            if g.shape() != theta.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter {name} with shape {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let mut m = ms[i].to_vec();
            let mut v = vs[i].to_vec();
            let mut th = theta.to_vec();
            adam_update(&cfg, t, lr, &mut m, &mut v, &mut th, g.data());
            ms[i] = ms[i].with_data(m)?;
            vs[i] = vs[i].with_data(v)?;
            *theta = theta.with_data(th)?;
            Ok(())
        })?;
        if slot != names.len() {
            return Err(Error::Contract(format!(
                "optimizer state holds {} parameters but the model visited {slot}",
                names.len()
            )));
        }
        Ok(())
    }
}

/// Stacks clouds into one `[B, N, C]` tensor; returns the class labels too.
/// All clouds in a batch must agree on point count and channel width.
pub fn batch_cloud_tensor<T: Element>(items: &[&PointCloud]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = items
        .first()
        .ok_or_else(|| Error::Config("cannot build a batch from zero clouds".into()))?;
    let n = first.n_points();
    let c = first.dims();
    let mut data = Vec::with_capacity(items.len() * n * c);
    let mut labels = Vec::with_capacity(items.len());
    for item in items {
        if item.n_points() != n || item.dims() != c {
            return Err(Error::Config(format!(
                "batch mixes cloud shapes: {}x{} vs {}x{}",
                n,
                c,
                item.n_points(),
                item.dims()
            )));
        }
        data.extend(item.points().iter().map(|&x| T::from_f64(x)));
        labels.push(item.label);
    }
    Ok((Tensor::new(&[items.len(), n, c], data)?, labels))
}

/// Part labels of a batch flattened to `B * N`, the layout the loss expects.
pub fn batch_part_labels(items: &[&PointCloud]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in items {
        let parts = item.part_labels.as_ref().ok_or_else(|| {
            Error::Data(format!("cloud {:?} has no part labels", item.source))
        })?;
        out.extend_from_slice(parts);
    }
    Ok(out)
}

/// Row-wise argmax over the last axis; ties resolve to the lowest index.
pub fn argmax_rows<T: Element>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let classes = *scores.shape().last().ok_or_else(|| Error::BadShape {
        op: "argmax_rows",
        msg: "scores must have at least one axis".into(),
        shape: scores.shape().to_vec(),
    })?;
    if classes == 0 {
        return Err(Error::BadShape {
            op: "argmax_rows",
            msg: "last axis is empty".into(),
            shape: scores.shape().to_vec(),
        });
    }
    let data = scores.data();
    let mut out = Vec::with_capacity(data.len() / classes);
    for row in data.chunks_exact(classes) {
        let mut best = 0usize;
        for (j, &x) in row.iter().enumerate().skip(1) {
            if x > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Classification quality summary. `confusion[t][p]` counts items of true
/// class `t` predicted as `p`, so row sums are per-class item counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub instance_accuracy: f64,
    pub class_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let mut total = 0u64;
        let mut correct = 0u64;
        let mut per_class = Vec::with_capacity(confusion.len());
        for (t, row) in confusion.iter().enumerate() {
            let row_total: u64 = row.iter().sum();
            total += row_total;
            correct += row[t];
            per_class.push(if row_total == 0 {
                None
            } else {
                Some(row[t] as f64 / row_total as f64)
            });
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Metrics {
            instance_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            class_accuracy: if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            },
            per_class_accuracy: per_class,
            confusion,
        }
    }
}

/// Runs the model over the dataset in eval mode (running batch-norm stats,
/// dropout off) and scores predictions against labels.
pub fn evaluate<T: Element>(model: &mut Model<T>, ds: &Dataset, batch_size: usize) -> Result<Metrics> {
    if ds.items.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if model.task() != Task::Classify {
        return Err(Error::Config(
            "evaluate() scores classification; use evaluate_segmentation() for part labels".into(),
        ));
    }
    let k = ds.num_classes();
    let mut confusion = vec![vec![0u64; k]; k];
    for chunk in ds.items.chunks(batch_size) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let (x, labels) = batch_cloud_tensor::<T>(&refs)?;
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let logits = model.forward(&mut ctx, &x)?;
        let width = *logits.shape().last().expect("logits have a class axis");
        if width != k {
            return Err(Error::Config(format!(
                "model scores {width} classes but the dataset defines {k}"
            )));
        }
        for (pred, label) in argmax_rows(&logits)?.into_iter().zip(labels) {
            confusion[label][pred] += 1;
        }
    }
    Ok(Metrics::from_confusion(confusion))
}

/// Part-IoU summary for a segmentation evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub point_accuracy: f64,
    pub overall_miou: f64,
    pub per_category_miou: Vec<Option<f64>>,
}

/// Mean IoU over shapes, with per-category breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// Average of the per-shape IoUs, every shape weighted equally.
    pub overall: f64,
    pub per_shape: Vec<f64>,
    /// Average of per-shape IoUs within each category; None when absent.
    pub per_category: Vec<Option<f64>>,
}

/// Shape IoU averages the per-part IoUs over that shape's category range;
/// a part absent from both prediction and truth scores 1 by convention.
pub fn miou(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    categories: &[usize],
    ranges: &[PartRange],
) -> Result<MiouReport> {
    if pred.len() != truth.len() || pred.len() != categories.len() {
        return Err(Error::Contract(format!(
            "miou got {} predictions, {} truths and {} categories",
            pred.len(),
            truth.len(),
            categories.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Config("miou needs at least one shape".into()));
    }
    let mut per_shape = Vec::with_capacity(pred.len());
    let mut cat_sum = vec![0.0f64; ranges.len()];
    let mut cat_count = vec![0u64; ranges.len()];
    for (s, ((p, t), &cat)) in pred.iter().zip(truth).zip(categories).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Contract(format!(
                "shape {s}: {} predicted points vs {} labeled points",
                p.len(),
                t.len()
            )));
        }
        let &(lo, hi) = ranges.get(cat).ok_or_else(|| {
            Error::Data(format!("shape {s}: category {cat} outside the {} known ranges", ranges.len()))
        })?;
        if hi <= lo {
            return Err(Error::Config(format!("category {cat} has empty part range {lo}..{hi}")));
        }
        for &part in p.iter().chain(t.iter()) {
            if part < lo || part >= hi {
                return Err(Error::Data(format!(
                    "shape {s}: part {part} outside its category range {lo}..{hi}"
                )));
            }
        }
        let mut iou_sum = 0.0f64;
        for part in lo..hi {
            let mut inter = 0u64;
            let mut union = 0u64;
            for (&pp, &tp) in p.iter().zip(t.iter()) {
                let in_p = pp == part;
                let in_t = tp == part;
                if in_p && in_t {
                    inter += 1;
                }
                if in_p || in_t {
                    union += 1;
                }
            }
            iou_sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        }
        let shape_iou = iou_sum / (hi - lo) as f64;
        per_shape.push(shape_iou);
        cat_sum[cat] += shape_iou;
        cat_count[cat] += 1;
    }
    let per_category = cat_sum
        .iter()
        .zip(&cat_count)
        .map(|(&s, &n)| if n == 0 { None } else { Some(s / n as f64) })
        .collect();
    Ok(MiouReport {
        overall: per_shape.iter().sum::<f64>() / per_shape.len() as f64,
        per_shape,
        per_category,
    })
}

/// Segmentation evaluation: per-point accuracy plus mean IoU. The argmax is
/// restricted to each shape's own category range, so a boat is never scored
/// against lamp parts.
pub fn evaluate_segmentation<T: Element>(
    model: &mut Model<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<SegMetrics> {
    if ds.items.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if model.task() != Task::Segment {
        return Err(Error::Config("model has no segmentation head".into()));
    }
    let ranges = ds
        .part_ranges
        .as_ref()
        .ok_or_else(|| Error::Config("dataset defines no part ranges".into()))?;
    let total_parts = ranges.iter().map(|r| r.1).max().unwrap_or(0);
    let mut preds: Vec<Vec<usize>> = Vec::with_capacity(ds.items.len());
    let mut truths: Vec<Vec<usize>> = Vec::with_capacity(ds.items.len());
    let mut cats: Vec<usize> = Vec::with_capacity(ds.items.len());
    let mut correct = 0u64;
    let mut total = 0u64;
    for chunk in ds.items.chunks(batch_size) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let (x, labels) = batch_cloud_tensor::<T>(&refs)?;
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let scores = model.forward(&mut ctx, &x)?;
        let width = *scores.shape().last().expect("scores have a part axis");
        if width != total_parts {
            return Err(Error::Config(format!(
                "model scores {width} parts but the dataset defines {total_parts}"
            )));
        }
        let n = chunk[0].n_points();
        let data = scores.data();
        for (b, item) in chunk.iter().enumerate() {
            let truth = item
                .part_labels
                .as_ref()
                .ok_or_else(|| Error::Data(format!("cloud {:?} has no part labels", item.source)))?;
            let (lo, hi) = ranges[labels[b]];
            let mut pred = Vec::with_capacity(n);
            for i in 0..n {
                let row = &data[(b * n + i) * width..(b * n + i + 1) * width];
                let mut best = lo;
                for j in lo + 1..hi {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                pred.push(best);
                if best == truth[i] {
                    correct += 1;
                }
                total += 1;
            }
            preds.push(pred);
            truths.push(truth.clone());
            cats.push(labels[b]);
        }
    }
    let report = miou(&preds, &truths, &cats, ranges)?;
    Ok(SegMetrics {
        point_accuracy: correct as f64 / total as f64,
        overall_miou: report.overall,
        per_category_miou: report.per_category,
    })
}

/// Knobs for one epoch of optimization.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// None trains on the clouds as stored.
    pub augment: Option<AugmentParams>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 8,
            augment: Some(AugmentParams::default()),
        }
    }
}

/// One pass over the dataset: shuffle, augment, forward, backprop, update.
/// Returns the mean per-item loss. Fully reproducible from `seed` and
/// `epoch`; the epoch index also drives the learning-rate schedule.
pub fn train_epoch<T: Element>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    ds: &Dataset,
    settings: &TrainSettings,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    if ds.items.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if let Some(a) = &settings.augment {
        a.validate()?;
    }
    let lr = adam.config().lr_at(epoch);
    let task = model.task();

    let mut order: Vec<usize> = (0..ds.items.len()).collect();
    order.shuffle(&mut rng_from(seed, &[SALT_SHUFFLE, epoch as u64]));

    let mut loss_sum = 0.0f64;
    for (batch_idx, chunk) in order.chunks(settings.batch_size).enumerate() {
        let clouds: Vec<PointCloud> = chunk
            .iter()
            .map(|&idx| match &settings.augment {
                Some(a) => augment(
                    &ds.items[idx],
                    a,
                    &mut rng_from(seed, &[SALT_AUGMENT, epoch as u64, idx as u64]),
                ),
                None => ds.items[idx].clone(),
            })
            .collect();
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let (x, labels) = batch_cloud_tensor::<T>(&refs)?;
        let targets = match task {
            Task::Classify => labels,
            Task::Segment => batch_part_labels(&refs)?,
        };

        let mut tape = Tape::new();
        model.visit_params(&mut |_, t| tape.watch(t))?;
        let mut dropout_rng = rng_from(seed, &[SALT_DROPOUT, epoch as u64, batch_idx as u64]);
        let mut ctx = RunCtx::train(&mut tape, &mut dropout_rng);
        let scores = model.forward(&mut ctx, &x)?;
        let loss = ctx.tape.softmax_cross_entropy(&scores, &targets)?;
        let loss_val = loss.item()?.as_f64();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss became {loss_val} in epoch {epoch}, batch {batch_idx}"
            )));
        }
        let leaves = model.param_nodes();
        let grads = ctx.tape.backward(&loss, &leaves)?;
        drop(ctx);
        adam.step(model, &grads, lr)?;
        loss_sum += loss_val * chunk.len() as f64;
    }
    Ok(loss_sum / ds.items.len() as f64)
}

const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "model.bin";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte position of this tensor's data in the weights file.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimState {
    cfg: OptimConfig,
    steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    epoch: usize,
    spec: ModelSpec,
    optim: Option<OptimState>,
    tensors: Vec<TensorEntry>,
}

/// A checkpoint restored from disk.
#[derive(Debug)]
pub struct Checkpoint<T: Element> {
    pub model: Model<T>,
    pub spec: ModelSpec,
    pub adam: Option<Adam<T>>,
    /// Number of epochs already completed; training resumes here.
    pub epoch: usize,
}

fn push_tensor<T: Element>(entries: &mut Vec<TensorEntry>, bytes: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    entries.push(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: T::DTYPE.name().to_string(),
        offset: bytes.len() as u64,
    });
    for &x in t.data() {
        x.write_le(bytes);
    }
}

/// Writes `model.json` (ordered tensor manifest plus config snapshot) and
/// `model.bin` (raw little-endian values) into `dir`. Layout is parameters,
/// then buffers, then optimizer moments, all in visitor order.
pub fn save_checkpoint<T: Element>(
    dir: &Path,
    model: &mut Model<T>,
    spec: &ModelSpec,
    adam: Option<&Adam<T>>,
    epoch: usize,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    model.visit_params(&mut |name, t| {
        push_tensor(&mut entries, &mut bytes, name, t);
        Ok(())
    })?;
    model.visit_buffers(&mut |name, t| {
        push_tensor(&mut entries, &mut bytes, name, t);
        Ok(())
    })?;
    if let Some(a) = adam {
        for (name, m) in a.names.iter().zip(&a.m) {
            push_tensor(&mut entries, &mut bytes, &format!("optim.m.{name}"), m);
        }
        for (name, v) in a.names.iter().zip(&a.v) {
            push_tensor(&mut entries, &mut bytes, &format!("optim.v.{name}"), v);
        }
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        epoch,
        spec: spec.clone(),
        optim: adam.map(|a| OptimState {
            cfg: a.cfg.clone(),
            steps: a.t,
        }),
        tensors: entries,
    };
    fs::create_dir_all(dir).map_err(|e| named_io(dir, e))?;
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, json).map_err(|e| named_io(&manifest, e))?;
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, bytes).map_err(|e| named_io(&weights, e))?;
    Ok(())
}

/// Sequential reader over the manifest + weights pair. Every tensor must be
/// consumed in manifest order at its recorded offset; anything else is a
/// corrupt or mismatched checkpoint.
struct BinReader<'a> {
    entries: &'a [TensorEntry],
    bytes: &'a [u8],
    next: usize,
    offset: usize,
}

impl BinReader<'_> {
    fn take<T: Element>(&mut self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let entry = self.entries.get(self.next).ok_or_else(|| {
            Error::Corruption(format!("manifest ended before tensor {name:?}"))
        })?;
        self.next += 1;
        if entry.name != name {
            return Err(Error::Corruption(format!(
                "manifest entry {} is {:?} but the model expects {name:?}",
                self.next - 1,
                entry.name
            )));
        }
        let dtype = DType::from_name(&entry.dtype)?;
        if dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "checkpoint stores {dtype} tensors but this run uses {}",
                T::DTYPE
            )));
        }
        if entry.shape != shape {
            return Err(Error::Corruption(format!(
                "tensor {name:?} has shape {:?} in the manifest but {shape:?} in the model",
                entry.shape
            )));
        }
        if entry.offset as usize != self.offset {
            return Err(Error::Corruption(format!(
                "tensor {name:?} claims offset {} but the stream is at {}",
                entry.offset, self.offset
            )));
        }
        let len: usize = shape.iter().product();
        let nbytes = len * dtype.size();
        let end = self.offset + nbytes;
        let slice = self.bytes.get(self.offset..end).ok_or_else(|| {
            Error::Corruption(format!(
                "weights file truncated: tensor {name:?} needs bytes {}..{end} but the file holds {}",
                self.offset,
                self.bytes.len()
            ))
        })?;
        self.offset = end;
        Ok(slice.chunks_exact(dtype.size()).map(T::read_le).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.next != self.entries.len() {
            return Err(Error::Corruption(format!(
                "manifest lists {} tensors but the model consumed {}",
                self.entries.len(),
                self.next
            )));
        }
        if self.offset != self.bytes.len() {
            return Err(Error::Corruption(format!(
                "weights file holds {} bytes but the manifest accounts for {}",
                self.bytes.len(),
                self.offset
            )));
        }
        Ok(())
    }
}

/// Rebuilds the model from the stored spec and overwrites every tensor with
/// the checkpointed values. Restored models produce bit-identical outputs.
pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = dir.join(MANIFEST_FILE);
    let meta: CheckpointMeta =
        serde_json::from_slice(&fs::read(&manifest).map_err(|e| named_io(&manifest, e))?)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights).map_err(|e| named_io(&weights, e))?;
    // The stored values replace the fresh initialization, so the build seed
    // is irrelevant.
    let (mut model, spec) = Model::<T>::from_spec(&meta.spec, 0)?;
    let mut reader = BinReader {
        entries: &meta.tensors,
        bytes: &bytes,
        next: 0,
        offset: 0,
    };
    model.visit_params(&mut |name, t| {
        let vals = reader.take::<T>(name, t.shape())?;
        *t = t.with_data(vals)?;
        Ok(())
    })?;
    model.visit_buffers(&mut |name, t| {
        let vals = reader.take::<T>(name, t.shape())?;
        *t = t.with_data(vals)?;
        Ok(())
    })?;
    let adam = match &meta.optim {
        Some(state) => {
            let mut adam = Adam::new(&mut model, state.cfg.clone())?;
            adam.t = state.steps;
            for i in 0..adam.names.len() {
                let name = format!("optim.m.{}", adam.names[i]);
                let vals = reader.take::<T>(&name, adam.m[i].shape())?;
                adam.m[i] = adam.m[i].with_data(vals)?;
            }
            for i in 0..adam.names.len() {
                let name = format!("optim.v.{}", adam.names[i]);
                let vals = reader.take::<T>(&name, adam.v[i].shape())?;
                adam.v[i] = adam.v[i].with_data(vals)?;
            }
            Some(adam)
        }
        None => None,
    };
    reader.finish()?;
    Ok(Checkpoint {
        model,
        spec,
        adam,
        epoch: meta.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthClass};
    use crate::sawnet::{ModelConfig, SawLayerConfig, TransformerConfig};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn schedule_halves_every_twenty_epochs() {
        assert_eq!(lr_at(0), 0.001);
        assert_eq!(lr_at(19), 0.001);
        assert_eq!(lr_at(20), 0.0005);
        assert_eq!(lr_at(39), 0.0005);
        assert_eq!(lr_at(45), 0.00025);
        let flat = OptimConfig {
            halve_every: 0,
            ..OptimConfig::default()
        };
        assert_eq!(flat.lr_at(500), 0.001);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = OptimConfig::default();
        let g = [0.5f64, -2.0, 3.0e-3, -7.0];
        let mut m = [0.0f64; 4];
        let mut v = [0.0f64; 4];
        let mut theta = [1.0f64, -1.0, 0.25, 4.0];
        let start = theta;
        adam_update(&cfg, 1, 0.001, &mut m, &mut v, &mut theta, &g);
        for j in 0..4 {
            let delta = theta[j] - start[j];
            close(delta, -0.001 * g[j].signum(), 1e-5);
        }
    }

    #[test]
    fn zero_gradient_from_rest_changes_nothing() {
        let cfg = OptimConfig::default();
        let g = [0.0f64; 3];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        let mut theta = [0.3f64, -1.5, 2.0];
        adam_update(&cfg, 1, 0.001, &mut m, &mut v, &mut theta, &g);
        assert_eq!(theta, [0.3, -1.5, 2.0]);
    }

    #[test]
    fn equal_gradients_produce_equal_updates() {
        let cfg = OptimConfig::default();
        let g = [0.7f64, 0.7];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let mut theta = [1.0f64, 1.0];
        for t in 1..=5 {
            adam_update(&cfg, t, 0.001, &mut m, &mut v, &mut theta, &g);
            assert_eq!(theta[0].to_bits(), theta[1].to_bits());
        }
    }

    #[test]
    fn sign_flipped_gradients_flip_updates_exactly() {
        let cfg = OptimConfig::default();
        let g: Vec<f64> = vec![0.9, -0.01, 5.0, -3.3e-4];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let (mut ma, mut va, mut a) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
        let (mut mb, mut vb, mut b) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
        for t in 1..=7 {
            adam_update(&cfg, t, 0.001, &mut ma, &mut va, &mut a, &g);
            adam_update(&cfg, t, 0.001, &mut mb, &mut vb, &mut b, &neg);
            for j in 0..4 {
                assert_eq!(a[j].to_bits(), (-b[j]).to_bits(), "t={t} j={j}");
            }
        }
    }

    fn tiny_cfg(task: Task) -> ModelConfig {
        ModelConfig {
            task,
            variant: crate::sawnet::Variant::Sawnet,
            input_dims: 3,
            trunk: vec![SawLayerConfig {
                branch_width: 4,
                k: 3,
                post_add_activation: true,
            }],
            aggregate_width: 8,
            head_widths: vec![6],
            dropout: 0.0,
            num_classes: None,
            parts: None,
            seg_head_widths: vec![6],
            transformer: Some(TransformerConfig {
                widths: vec![4],
                head: vec![6],
                k: 3,
            }),
            channel_split: None,
        }
    }

    fn tiny_classify(classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes: Some(classes),
            ..tiny_cfg(Task::Classify)
        }
    }

    fn tiny_segment(parts: usize) -> ModelConfig {
        ModelConfig {
            parts: Some(parts),
            transformer: None,
            ..tiny_cfg(Task::Segment)
        }
    }

    #[test]
    fn adam_rejects_mismatched_gradient_shape() {
        let mut model = Model::<f64>::build(&tiny_classify(3), 1).unwrap();
        let mut adam = Adam::new(&mut model, OptimConfig::default()).unwrap();
        let mut pairs = Vec::new();
        model
            .visit_params(&mut |_, t| {
                pairs.push((t.node().unwrap(), Tensor::<f64>::zeros(&[t.len() + 1])));
                Ok(())
            })
            .unwrap();
        let grads = GradientMap::from_entries(pairs);
        let err = adam.step(&mut model, &grads, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn batching_stacks_points_and_labels() {
        let a = PointCloud::new(vec![0.0; 6], 3, 1).unwrap();
        let b = PointCloud::new(vec![1.0; 6], 3, 0).unwrap();
        let (x, labels) = batch_cloud_tensor::<f32>(&[&a, &b]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 3]);
        assert_eq!(labels, vec![1, 0]);
        assert_eq!(&x.data()[..6], &[0.0f32; 6]);
        assert_eq!(&x.data()[6..], &[1.0f32; 6]);

        let ragged = PointCloud::new(vec![0.0; 9], 3, 0).unwrap();
        assert!(matches!(
            batch_cloud_tensor::<f32>(&[&a, &ragged]),
            Err(Error::Config(_))
        ));
        assert!(matches!(batch_cloud_tensor::<f32>(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn part_label_batching_flattens_in_order() {
        let a = PointCloud::new(vec![0.0; 6], 3, 0)
            .unwrap()
            .with_parts(vec![2, 3])
            .unwrap();
        let b = PointCloud::new(vec![0.0; 6], 3, 0)
            .unwrap()
            .with_parts(vec![1, 1])
            .unwrap();
        assert_eq!(batch_part_labels(&[&a, &b]).unwrap(), vec![2, 3, 1, 1]);
        let bare = PointCloud::new(vec![0.0; 6], 3, 0).unwrap();
        assert!(matches!(batch_part_labels(&[&a, &bare]), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_index() {
        let t = Tensor::<f32>::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.5, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![0, 1]);
    }

    #[test]
    fn metrics_match_the_skewed_two_class_example() {
        // Nine items of class 0, one of class 1, everything predicted 0.
        let m = Metrics::from_confusion(vec![vec![9, 0], vec![1, 0]]);
        assert_eq!(m.instance_accuracy, 0.9);
        assert_eq!(m.class_accuracy, 0.5);
        assert_eq!(m.per_class_accuracy, vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn metrics_skip_absent_classes_in_the_mean() {
        let m = Metrics::from_confusion(vec![vec![4, 0, 0], vec![0, 0, 0], vec![1, 0, 1]]);
        assert_eq!(m.per_class_accuracy[1], None);
        assert_eq!(m.class_accuracy, 0.75);
        let sums: Vec<u64> = m.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(sums, vec![4, 0, 2]);
    }

    #[test]
    fn evaluate_rejects_empty_and_mismatched_datasets() {
        let mut model = Model::<f32>::build(&tiny_classify(3), 1).unwrap();
        let empty = Dataset {
            items: vec![],
            split: crate::data::Split::Test,
            classes: vec!["a".into(), "b".into(), "c".into()],
            part_ranges: None,
        };
        assert!(matches!(evaluate(&mut model, &empty, 4), Err(Error::Config(_))));

        // Two-class data against a three-class head.
        let ds = synth_dataset(&[SynthClass::Sphere, SynthClass::Cube], 2, 16, 9).unwrap();
        let err = evaluate(&mut model, &ds, 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn evaluate_fills_a_consistent_confusion_matrix() {
        let ds = synth_dataset(&[SynthClass::Sphere, SynthClass::Cube, SynthClass::Cylinder], 3, 16, 5).unwrap();
        let mut model = Model::<f32>::build(&tiny_classify(3), 2).unwrap();
        let m = evaluate(&mut model, &ds, 4).unwrap();
        let sums: Vec<u64> = m.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(sums, vec![3, 3, 3]);
        assert!((0.0..=1.0).contains(&m.instance_accuracy));
        assert!((0.0..=1.0).contains(&m.class_accuracy));
    }

    #[test]
    fn miou_is_one_for_perfect_predictions() {
        let truth = vec![vec![0, 0, 1, 1], vec![2, 3, 3, 4]];
        let report = miou(&truth, &truth, &[0, 1], &[(0, 2), (2, 5)]).unwrap();
        assert_eq!(report.per_shape, vec![1.0, 1.0]);
        assert_eq!(report.overall, 1.0);
        assert_eq!(report.per_category, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn miou_half_flip_scores_one_third() {
        // Both parts have one point kept and one swapped: IoU 1/3 each.
        let truth = vec![vec![0, 0, 1, 1]];
        let pred = vec![vec![0, 1, 0, 1]];
        let report = miou(&pred, &truth, &[0], &[(0, 2)]).unwrap();
        assert_eq!(report.per_shape, vec![1.0 / 3.0]);
        assert_eq!(report.overall, 1.0 / 3.0);
    }

    #[test]
    fn miou_counts_absent_parts_as_perfect() {
        // Category range covers three parts but only two ever appear.
        let truth = vec![vec![0, 0, 1, 1]];
        let report = miou(&truth, &truth, &[0], &[(0, 3)]).unwrap();
        assert_eq!(report.per_shape, vec![1.0]);
    }

    #[test]
    fn miou_averages_over_shapes_not_categories() {
        let truth = vec![vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![2, 2, 3, 3]];
        let pred = vec![vec![0, 0, 1, 1], vec![0, 1, 0, 1], vec![2, 2, 3, 3]];
        let report = miou(&pred, &truth, &[0, 0, 1], &[(0, 2), (2, 4)]).unwrap();
        close(report.overall, (1.0 + 1.0 / 3.0 + 1.0) / 3.0, 1e-15);
        close(report.per_category[0].unwrap(), (1.0 + 1.0 / 3.0) / 2.0, 1e-15);
        assert_eq!(report.per_category[1], Some(1.0));
    }

    #[test]
    fn miou_rejects_parts_outside_the_category_range() {
        let truth = vec![vec![0, 0, 1, 1]];
        let pred = vec![vec![0, 0, 1, 2]];
        let err = miou(&pred, &truth, &[0], &[(0, 2)]).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        let err = miou(&truth, &truth, &[1], &[(0, 2)]).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn segmentation_evaluation_stays_in_category_ranges() {
        let ds = synth_dataset(&[SynthClass::Sphere, SynthClass::Cube], 3, 16, 11).unwrap();
        let parts = ds.part_ranges.as_ref().unwrap().last().unwrap().1;
        let mut model = Model::<f32>::build(&tiny_segment(parts), 3).unwrap();
        let m = evaluate_segmentation(&mut model, &ds, 4).unwrap();
        assert!((0.0..=1.0).contains(&m.point_accuracy));
        assert!((0.0..=1.0).contains(&m.overall_miou));
        assert_eq!(m.per_category_miou.len(), 2);
    }

    #[test]
    fn shifted_logits_leave_the_loss_unchanged() {
        let mut rng = rng_from(3, &[0x77]);
        use rand::Rng;
        let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|x| x + 3.7).collect();
        let labels = [2usize, 0, 3];
        let mut tape = Tape::inference();
        let a = tape
            .softmax_cross_entropy(&Tensor::new(&[3, 4], logits).unwrap(), &labels)
            .unwrap();
        let b = tape
            .softmax_cross_entropy(&Tensor::new(&[3, 4], shifted).unwrap(), &labels)
            .unwrap();
        close(a.item().unwrap(), b.item().unwrap(), 1e-6);
    }

    fn logits_on<T: Element>(model: &mut Model<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        model.forward(&mut ctx, x).unwrap()
    }

    #[test]
    fn one_epoch_is_bit_for_bit_reproducible() {
        let ds = synth_dataset(&[SynthClass::Sphere, SynthClass::Cube], 4, 16, 21).unwrap();
        let settings = TrainSettings {
            batch_size: 4,
            augment: Some(AugmentParams::default()),
        };
        let run = || -> Vec<f32> {
            let mut model = Model::<f32>::build(&tiny_classify(2), 7).unwrap();
            let mut adam = Adam::new(&mut model, OptimConfig::default()).unwrap();
            let loss = train_epoch(&mut model, &mut adam, &ds, &settings, 99, 0).unwrap();
            assert!(loss.is_finite());
            let mut flat = Vec::new();
            model
                .visit_params(&mut |_, t| {
                    flat.extend_from_slice(t.data());
                    Ok(())
                })
                .unwrap();
            flat
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn training_updates_every_parameter() {
        let ds = synth_dataset(&[SynthClass::Sphere, SynthClass::Cube], 4, 16, 23).unwrap();
        let mut model = Model::<f64>::build(&tiny_classify(2), 7).unwrap();
        let mut before = Vec::new();
        model
            .visit_params(&mut |name, t| {
                before.push((name.to_string(), t.to_vec()));
                Ok(())
            })
            .unwrap();
        let mut adam = Adam::new(&mut model, OptimConfig::default()).unwrap();
        let settings = TrainSettings {
            batch_size: 4,
            augment: None,
        };
        train_epoch(&mut model, &mut adam, &ds, &settings, 5, 0).unwrap();
        assert_eq!(adam.steps(), 2);
        let mut moved = 0usize;
        let mut i = 0usize;
        model
            .visit_params(&mut |name, t| {
                assert_eq!(before[i].0, name);
                if t.to_vec() != before[i].1 {
                    moved += 1;
                }
                i += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(moved, before.len(), "some parameters never received an update");
    }

    #[test]
    fn segmentation_epoch_runs_and_stays_finite() {
        let ds = synth_dataset(&[SynthClass::Sphere, SynthClass::Cylinder], 3, 16, 31).unwrap();
        let parts = ds.part_ranges.as_ref().unwrap().last().unwrap().1;
        let mut model = Model::<f32>::build(&tiny_segment(parts), 3).unwrap();
        let mut adam = Adam::new(&mut model, OptimConfig::default()).unwrap();
        let settings = TrainSettings {
            batch_size: 3,
            augment: Some(AugmentParams::default()),
        };
        let loss = train_epoch(&mut model, &mut adam, &ds, &settings, 13, 0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(&[SynthClass::Sphere, SynthClass::Cube], 4, 16, 41).unwrap();
        let spec = ModelSpec {
            config: tiny_classify(2),
            embedding: None,
        };
        let (mut model, spec) = Model::<f32>::from_spec(&spec, 11).unwrap();
        let mut adam = Adam::new(&mut model, OptimConfig::default()).unwrap();
        let settings = TrainSettings {
            batch_size: 4,
            augment: None,
        };
        for epoch in 0..2 {
            train_epoch(&mut model, &mut adam, &ds, &settings, 3, epoch).unwrap();
        }
        save_checkpoint(dir.path(), &mut model, &spec, Some(&adam), 2).unwrap();

        let mut restored = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(restored.epoch, 2);
        let radam = restored.adam.as_ref().unwrap();
        assert_eq!(radam.steps(), adam.steps());
        assert_eq!(radam.config(), adam.config());
        for (a, b) in adam.m.iter().zip(&radam.m) {
            assert!(a.bit_eq(b));
        }
        for (a, b) in adam.v.iter().zip(&radam.v) {
            assert!(a.bit_eq(b));
        }

        let refs: Vec<&PointCloud> = ds.items.iter().take(3).collect();
        let (x, _) = batch_cloud_tensor::<f32>(&refs).unwrap();
        let before = logits_on(&mut model, &x);
        let after = logits_on(&mut restored.model, &x);
        assert!(before.bit_eq(&after), "restored logits differ");
    }

    #[test]
    fn resuming_at_epoch_twenty_halves_the_rate() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec {
            config: tiny_classify(2),
            embedding: None,
        };
        let (mut model, spec) = Model::<f32>::from_spec(&spec, 1).unwrap();
        let adam = Adam::new(&mut model, OptimConfig::default()).unwrap();
        save_checkpoint(dir.path(), &mut model, &spec, Some(&adam), 20).unwrap();
        let restored = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(restored.epoch, 20);
        assert_eq!(restored.adam.unwrap().config().lr_at(restored.epoch), 0.0005);
    }

    #[test]
    fn truncated_weights_are_reported_as_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec {
            config: tiny_classify(2),
            embedding: None,
        };
        let (mut model, spec) = Model::<f32>::from_spec(&spec, 1).unwrap();
        save_checkpoint(dir.path(), &mut model, &spec, None, 0).unwrap();
        let bin = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)), "{err}");
    }

    #[test]
    fn unknown_dtype_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec {
            config: tiny_classify(2),
            embedding: None,
        };
        let (mut model, spec) = Model::<f32>::from_spec(&spec, 1).unwrap();
        save_checkpoint(dir.path(), &mut model, &spec, None, 0).unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);
        let json = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, json.replace("\"f32\"", "\"f16\"")).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Version(_)), "{err}");
    }

    #[test]
    fn wrong_element_type_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec {
            config: tiny_classify(2),
            embedding: None,
        };
        let (mut model, spec) = Model::<f32>::from_spec(&spec, 1).unwrap();
        save_checkpoint(dir.path(), &mut model, &spec, None, 0).unwrap();
        let err = load_checkpoint::<f64>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn tampered_manifest_names_are_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec {
            config: tiny_classify(2),
            embedding: None,
        };
        let (mut model, spec) = Model::<f32>::from_spec(&spec, 1).unwrap();
        save_checkpoint(dir.path(), &mut model, &spec, None, 0).unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);
        let json = fs::read_to_string(&manifest).unwrap();
        let first: String = json.replacen("\"name\": \"", "\"name\": \"zz.", 1);
        fs::write(&manifest, first).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)), "{err}");
    }
}
