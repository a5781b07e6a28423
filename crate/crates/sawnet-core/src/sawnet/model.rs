//! Whole-network assembly: the full model, the two ablation variants, and
//! the pointwise-embedding baselines used for the embedding study.
//!
//! A `ModelSpec` plus a seed fully determines a network; checkpoints store
//! the spec so loading never needs the original config file. Parameter
//! creation order is fixed by construction order, and the named visitors
//! walk it identically every run.

use serde::{Deserialize, Serialize};

use crate::context::RunCtx;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, DepthwiseMlp, Dropout, GroupedMlp, Linear, TensorVisitor};
use crate::rng::{rng_from, Prng, SALT_INIT};
use crate::sawnet::blocks::{EdgeConvBlock, SawLayer, SharedMlpBlock};
use crate::sawnet::config::{ModelConfig, Task, Variant};
use crate::sawnet::transformer::TransformerNet;
use crate::tensor::{Element, Tensor};

/// Which pointwise map the embedding-baseline stack uses past its first
/// layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Shared,
    Grouped,
    Depthwise,
    Residual,
}

impl EmbeddingKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Shared => "shared",
            EmbeddingKind::Grouped => "grouped",
            EmbeddingKind::Depthwise => "depthwise",
            EmbeddingKind::Residual => "residual",
        }
    }
}

/// Extra knobs the embedding baselines need beyond the shared config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    /// Group count for the grouped map.
    pub groups: usize,
    /// Point count the depthwise map is tied to.
    pub n_points: usize,
}

/// Everything needed to rebuild a network: the architecture config, plus
/// the embedding-baseline selector when the model is one of those.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingSpec>,
}

/// Dense stack for per-cloud prediction: each hidden layer is
/// linear/norm/relu with dropout after, then a plain final map.
#[derive(Debug, Clone)]
struct ClassifierHead<T: Element> {
    hidden: Vec<(Linear<T>, BatchNorm<T>)>,
    dropout: Dropout,
    final_map: Linear<T>,
}

impl<T: Element> ClassifierHead<T> {
    fn new(
        c_in: usize,
        widths: &[usize],
        classes: usize,
        dropout: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut w_in = c_in;
        for &w in widths {
            hidden.push((Linear::new(w_in, w, rng), BatchNorm::new(w)));
            w_in = w;
        }
        Ok(Self {
            hidden,
            dropout: Dropout::new(dropout)?,
            final_map: Linear::new(w_in, classes, rng),
        })
    }

    fn forward(&mut self, ctx: &mut RunCtx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (lin, bn) in &mut self.hidden {
            let z = lin.forward(ctx.tape, &h)?;
            let z = bn.forward(ctx, &z)?;
            let z = ctx.tape.relu(&z)?;
            h = self.dropout.forward(ctx, &z)?;
        }
        self.final_map.forward(ctx.tape, &h)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        for (i, (lin, bn)) in self.hidden.iter_mut().enumerate() {
            lin.visit_params(&format!("{prefix}.fc{i}"), f)?;
            bn.visit_params(&format!("{prefix}.fc{i}.bn"), f)?;
        }
        self.final_map.visit_params(&format!("{prefix}.out"), f)
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        for (i, (_, bn)) in self.hidden.iter_mut().enumerate() {
            bn.visit_buffers(&format!("{prefix}.fc{i}.bn"), f)?;
        }
        Ok(())
    }
}

/// Pointwise stack for per-point prediction; no dropout, final map plain.
#[derive(Debug, Clone)]
struct SegHead<T: Element> {
    hidden: Vec<(Linear<T>, BatchNorm<T>)>,
    final_map: Linear<T>,
}

impl<T: Element> SegHead<T> {
    fn new(c_in: usize, widths: &[usize], parts: usize, rng: &mut Prng) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut w_in = c_in;
        for &w in widths {
            hidden.push((Linear::new(w_in, w, rng), BatchNorm::new(w)));
            w_in = w;
        }
        Self {
            hidden,
            final_map: Linear::new(w_in, parts, rng),
        }
    }

    fn forward(&mut self, ctx: &mut RunCtx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (lin, bn) in &mut self.hidden {
            let z = lin.forward(ctx.tape, &h)?;
            let z = bn.forward(ctx, &z)?;
            h = ctx.tape.relu(&z)?;
        }
        self.final_map.forward(ctx.tape, &h)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        for (i, (lin, bn)) in self.hidden.iter_mut().enumerate() {
            lin.visit_params(&format!("{prefix}.fc{i}"), f)?;
            bn.visit_params(&format!("{prefix}.fc{i}.bn"), f)?;
        }
        self.final_map.visit_params(&format!("{prefix}.out"), f)
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        for (i, (_, bn)) in self.hidden.iter_mut().enumerate() {
            bn.visit_buffers(&format!("{prefix}.fc{i}.bn"), f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum TaskHead<T: Element> {
    Classify(ClassifierHead<T>),
    Segment(SegHead<T>),
}

fn check_cloud<T: Element>(cloud: &Tensor<T>, dims: usize) -> Result<()> {
    if cloud.rank() != 3 || cloud.shape()[2] != dims {
        return Err(Error::BadShape {
            op: "model",
            msg: format!("expected [batch, points, {dims}]"),
            shape: cloud.shape().to_vec(),
        });
    }
    Ok(())
}

/// Runs alignment when configured. With more than three input channels the
/// transform applies to the leading xyz block and the extra channels pass
/// through unchanged.
fn align_input<T: Element>(
    tnet: &mut Option<TransformerNet<T>>,
    ctx: &mut RunCtx<'_, T>,
    cloud: &Tensor<T>,
) -> Result<Tensor<T>> {
    let Some(tnet) = tnet else {
        return Ok(cloud.clone());
    };
    let c = cloud.shape()[2];
    if c == 3 {
        Ok(tnet.forward(ctx, cloud)?.0)
    } else {
        let xyz = ctx.tape.slice(cloud, 2, 0, 3)?;
        let (aligned, _) = tnet.forward(ctx, &xyz)?;
        let rest = ctx.tape.slice(cloud, 2, 3, c - 3)?;
        ctx.tape.concat(&[&aligned, &rest], 2)
    }
}

fn aggregate_and_pool<T: Element>(
    lin: &Linear<T>,
    bn: &mut BatchNorm<T>,
    ctx: &mut RunCtx<'_, T>,
    features: &Tensor<T>,
) -> Result<Tensor<T>> {
    let a = lin.forward(ctx.tape, features)?;
    let a = bn.forward(ctx, &a)?;
    let a = ctx.tape.relu(&a)?;
    Ok(ctx.tape.reduce_max(&a, 1)?.0)
}

/// The full architecture (and, with residuals off, the per-layer-combine
/// ablation): aligned input through a trunk of layers whose branch outputs
/// skip into the next layer, every layer's output concatenated, aggregated,
/// pooled, and read out per task.
#[derive(Debug, Clone)]
pub struct SawNetModel<T: Element> {
    transformer: Option<TransformerNet<T>>,
    trunk: Vec<SawLayer<T>>,
    agg_lin: Linear<T>,
    agg_bn: BatchNorm<T>,
    head: TaskHead<T>,
    input_dims: usize,
    use_residual: bool,
    split: Option<(usize, usize)>,
    features_width: usize,
}

impl<T: Element> SawNetModel<T> {
    fn new(cfg: &ModelConfig, use_residual: bool, rng: &mut Prng) -> Result<Self> {
        let transformer = match &cfg.transformer {
            Some(tc) => Some(TransformerNet::new(tc, rng)?),
            None => None,
        };
        let split = cfg.channel_split.map(|s| (s.shared_dims, s.edgeconv_dims));
        let mut trunk = Vec::with_capacity(cfg.trunk.len());
        let (mut shared_in, mut edge_in) = match split {
            Some((s, e)) => (s, e),
            None => (cfg.input_dims, cfg.input_dims),
        };
        let mut skip: Option<(usize, usize)> = Some((shared_in, edge_in));
        for layer in &cfg.trunk {
            let m = layer.branch_width;
            let (g_skip, l_skip) = match (use_residual, skip) {
                (true, Some((g, l))) => (Some(g), Some(l)),
                _ => (None, None),
            };
            trunk.push(SawLayer::new(
                shared_in,
                edge_in,
                m,
                layer.k,
                g_skip,
                l_skip,
                layer.post_add_activation,
                rng,
            ));
            shared_in = 2 * m;
            edge_in = 2 * m;
            skip = Some((m, m));
        }
        let features_width: usize = cfg.trunk.iter().map(|l| 2 * l.branch_width).sum();
        let agg_lin = Linear::new(features_width, cfg.aggregate_width, rng);
        let agg_bn = BatchNorm::new(cfg.aggregate_width);
        let head = match cfg.task {
            Task::Classify => TaskHead::Classify(ClassifierHead::new(
                cfg.aggregate_width,
                &cfg.head_widths,
                cfg.num_classes.expect("validated"),
                cfg.dropout,
                rng,
            )?),
            Task::Segment => TaskHead::Segment(SegHead::new(
                features_width + cfg.aggregate_width,
                &cfg.seg_head_widths,
                cfg.parts.expect("validated"),
                rng,
            )),
        };
        Ok(Self {
            transformer,
            trunk,
            agg_lin,
            agg_bn,
            head,
            input_dims: cfg.input_dims,
            use_residual,
            split,
            features_width,
        })
    }

    pub fn forward(&mut self, ctx: &mut RunCtx<'_, T>, cloud: &Tensor<T>) -> Result<Tensor<T>> {
        check_cloud(cloud, self.input_dims)?;
        let x = align_input(&mut self.transformer, ctx, cloud)?;
        let n = x.shape()[1];

        let mut outputs = Vec::with_capacity(self.trunk.len());
        let mut cur = x;
        let mut g_skip: Option<Tensor<T>> = None;
        let mut l_skip: Option<Tensor<T>> = None;
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            let (xs, xe) = match (i, self.split) {
                (0, Some((s, e))) => (
                    ctx.tape.slice(&cur, 2, 0, s)?,
                    ctx.tape.slice(&cur, 2, 0, e)?,
                ),
                _ => (cur.clone(), cur.clone()),
            };
            let (gs, ls) = if self.use_residual {
                if i == 0 {
                    (Some(xs.clone()), Some(xe.clone()))
                } else {
                    (g_skip.clone(), l_skip.clone())
                }
            } else {
                (None, None)
            };
            let out = layer.forward(ctx, &xs, &xe, gs.as_ref(), ls.as_ref())?;
            g_skip = Some(out.g);
            l_skip = Some(out.l);
            outputs.push(out.combined.clone());
            cur = out.combined;
        }
        let refs: Vec<&Tensor<T>> = outputs.iter().collect();
        let features = ctx.tape.concat(&refs, 2)?;
        let pooled = aggregate_and_pool(&self.agg_lin, &mut self.agg_bn, ctx, &features)?;
        match &mut self.head {
            TaskHead::Classify(h) => h.forward(ctx, &pooled),
            TaskHead::Segment(h) => {
                let b = pooled.shape()[0];
                let a = pooled.shape()[1];
                let tiled = ctx.tape.reshape(&pooled, &[b, 1, a])?;
                let tiled = ctx.tape.broadcast_axis(&tiled, 1, n)?;
                let per_point = ctx.tape.concat(&[&features, &tiled], 2)?;
                h.forward(ctx, &per_point)
            }
        }
    }

    /// Zeroes every trunk block's second stage; the degeneracy checks use
    /// this to force layers down to their skip paths.
    pub fn zero_trunk_second_stages(&mut self) {
        for layer in &mut self.trunk {
            layer.zero_second_stages();
        }
    }

    pub fn features_width(&self) -> usize {
        self.features_width
    }

    fn visit_params(&mut self, f: &mut TensorVisitor<T>) -> Result<()> {
        if let Some(tnet) = &mut self.transformer {
            tnet.visit_params("tnet", f)?;
        }
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            layer.visit_params(&format!("trunk{i}"), f)?;
        }
        self.agg_lin.visit_params("agg", f)?;
        self.agg_bn.visit_params("agg.bn", f)?;
        match &mut self.head {
            TaskHead::Classify(h) => h.visit_params("head", f),
            TaskHead::Segment(h) => h.visit_params("head", f),
        }
    }

    fn visit_buffers(&mut self, f: &mut TensorVisitor<T>) -> Result<()> {
        if let Some(tnet) = &mut self.transformer {
            tnet.visit_buffers("tnet", f)?;
        }
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            layer.visit_buffers(&format!("trunk{i}"), f)?;
        }
        self.agg_bn.visit_buffers("agg.bn", f)?;
        match &mut self.head {
            TaskHead::Classify(h) => h.visit_buffers("head", f),
            TaskHead::Segment(h) => h.visit_buffers("head", f),
        }
    }
}

/// Combine-at-end ablation: a global-only trunk and a local-only trunk run
/// side by side, each aggregated and pooled on its own, features meeting
/// only in the classifier.
#[derive(Debug, Clone)]
pub struct ParallelModel<T: Element> {
    transformer: Option<TransformerNet<T>>,
    global_trunk: Vec<SharedMlpBlock<T>>,
    local_trunk: Vec<EdgeConvBlock<T>>,
    g_agg_lin: Linear<T>,
    g_agg_bn: BatchNorm<T>,
    l_agg_lin: Linear<T>,
    l_agg_bn: BatchNorm<T>,
    head: ClassifierHead<T>,
    input_dims: usize,
}

impl<T: Element> ParallelModel<T> {
    fn new(cfg: &ModelConfig, rng: &mut Prng) -> Result<Self> {
        if cfg.task != Task::Classify {
            return Err(Error::Config(
                "combine_at_end is a classification-only variant".into(),
            ));
        }
        if cfg.channel_split.is_some() {
            return Err(Error::Config(
                "channel_split applies to per-layer combination, not combine_at_end".into(),
            ));
        }
        let transformer = match &cfg.transformer {
            Some(tc) => Some(TransformerNet::new(tc, rng)?),
            None => None,
        };
        let mut global_trunk = Vec::with_capacity(cfg.trunk.len());
        let mut local_trunk = Vec::with_capacity(cfg.trunk.len());
        let mut c_in = cfg.input_dims;
        for layer in &cfg.trunk {
            let m = layer.branch_width;
            global_trunk.push(SharedMlpBlock::new(
                c_in,
                m,
                Some(c_in),
                layer.post_add_activation,
                rng,
            ));
            c_in = m;
        }
        let mut c_in = cfg.input_dims;
        for layer in &cfg.trunk {
            let m = layer.branch_width;
            local_trunk.push(EdgeConvBlock::new(
                c_in,
                m,
                layer.k,
                Some(c_in),
                layer.post_add_activation,
                rng,
            ));
            c_in = m;
        }
        let per_trunk_width: usize = cfg.trunk.iter().map(|l| l.branch_width).sum();
        let g_agg_lin = Linear::new(per_trunk_width, cfg.aggregate_width, rng);
        let g_agg_bn = BatchNorm::new(cfg.aggregate_width);
        let l_agg_lin = Linear::new(per_trunk_width, cfg.aggregate_width, rng);
        let l_agg_bn = BatchNorm::new(cfg.aggregate_width);
        let head = ClassifierHead::new(
            2 * cfg.aggregate_width,
            &cfg.head_widths,
            cfg.num_classes.expect("validated"),
            cfg.dropout,
            rng,
        )?;
        Ok(Self {
            transformer,
            global_trunk,
            local_trunk,
            g_agg_lin,
            g_agg_bn,
            l_agg_lin,
            l_agg_bn,
            head,
            input_dims: cfg.input_dims,
        })
    }

    pub fn forward(&mut self, ctx: &mut RunCtx<'_, T>, cloud: &Tensor<T>) -> Result<Tensor<T>> {
        check_cloud(cloud, self.input_dims)?;
        let x = align_input(&mut self.transformer, ctx, cloud)?;

        let mut g = x.clone();
        let mut g_outs = Vec::with_capacity(self.global_trunk.len());
        for blk in &mut self.global_trunk {
            let skip = g.clone();
            g = blk.forward(ctx, &skip, Some(&skip))?;
            g_outs.push(g.clone());
        }
        let refs: Vec<&Tensor<T>> = g_outs.iter().collect();
        let g_features = ctx.tape.concat(&refs, 2)?;
        let g_pool = aggregate_and_pool(&self.g_agg_lin, &mut self.g_agg_bn, ctx, &g_features)?;

        let mut l = x;
        let mut l_outs = Vec::with_capacity(self.local_trunk.len());
        for blk in &mut self.local_trunk {
            let skip = l.clone();
            l = blk.forward(ctx, &skip, Some(&skip))?;
            l_outs.push(l.clone());
        }
        let refs: Vec<&Tensor<T>> = l_outs.iter().collect();
        let l_features = ctx.tape.concat(&refs, 2)?;
        let l_pool = aggregate_and_pool(&self.l_agg_lin, &mut self.l_agg_bn, ctx, &l_features)?;

        let pooled = ctx.tape.concat(&[&g_pool, &l_pool], 1)?;
        self.head.forward(ctx, &pooled)
    }

    fn visit_params(&mut self, f: &mut TensorVisitor<T>) -> Result<()> {
        if let Some(tnet) = &mut self.transformer {
            tnet.visit_params("tnet", f)?;
        }
        for (i, blk) in self.global_trunk.iter_mut().enumerate() {
            blk.visit_params(&format!("gtrunk{i}"), f)?;
        }
        for (i, blk) in self.local_trunk.iter_mut().enumerate() {
            blk.visit_params(&format!("ltrunk{i}"), f)?;
        }
        self.g_agg_lin.visit_params("gagg", f)?;
        self.g_agg_bn.visit_params("gagg.bn", f)?;
        self.l_agg_lin.visit_params("lagg", f)?;
        self.l_agg_bn.visit_params("lagg.bn", f)?;
        self.head.visit_params("head", f)
    }

    fn visit_buffers(&mut self, f: &mut TensorVisitor<T>) -> Result<()> {
        if let Some(tnet) = &mut self.transformer {
            tnet.visit_buffers("tnet", f)?;
        }
        for (i, blk) in self.global_trunk.iter_mut().enumerate() {
            blk.visit_buffers(&format!("gtrunk{i}"), f)?;
        }
        for (i, blk) in self.local_trunk.iter_mut().enumerate() {
            blk.visit_buffers(&format!("ltrunk{i}"), f)?;
        }
        self.g_agg_bn.visit_buffers("gagg.bn", f)?;
        self.l_agg_bn.visit_buffers("lagg.bn", f)?;
        self.head.visit_buffers("head", f)
    }
}

#[derive(Debug, Clone)]
enum EmbedStage<T: Element> {
    Shared(Linear<T>, BatchNorm<T>),
    Grouped(GroupedMlp<T>, BatchNorm<T>),
    Depthwise(DepthwiseMlp<T>, BatchNorm<T>),
    Residual(SharedMlpBlock<T>),
}

impl<T: Element> EmbedStage<T> {
    fn forward(&mut self, ctx: &mut RunCtx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            EmbedStage::Shared(lin, bn) => {
                let z = lin.forward(ctx.tape, x)?;
                let z = bn.forward(ctx, &z)?;
                ctx.tape.relu(&z)
            }
            EmbedStage::Grouped(g, bn) => {
                let z = g.forward(ctx.tape, x)?;
                let z = bn.forward(ctx, &z)?;
                ctx.tape.relu(&z)
            }
            EmbedStage::Depthwise(d, bn) => {
                let z = d.forward(ctx.tape, x)?;
                let z = bn.forward(ctx, &z)?;
                ctx.tape.relu(&z)
            }
            EmbedStage::Residual(blk) => blk.forward(ctx, x, Some(x)),
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        match self {
            EmbedStage::Shared(lin, bn) => {
                lin.visit_params(prefix, f)?;
                bn.visit_params(&format!("{prefix}.bn"), f)
            }
            EmbedStage::Grouped(g, bn) => {
                g.visit_params(prefix, f)?;
                bn.visit_params(&format!("{prefix}.bn"), f)
            }
            EmbedStage::Depthwise(d, bn) => {
                d.visit_params(prefix, f)?;
                bn.visit_params(&format!("{prefix}.bn"), f)
            }
            EmbedStage::Residual(blk) => blk.visit_params(prefix, f),
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        match self {
            EmbedStage::Shared(_, bn)
            | EmbedStage::Grouped(_, bn)
            | EmbedStage::Depthwise(_, bn) => bn.visit_buffers(&format!("{prefix}.bn"), f),
            EmbedStage::Residual(blk) => blk.visit_buffers(prefix, f),
        }
    }
}

/// Embedding-study baseline: a plain pointwise stack (no graph, no
/// alignment) whose layer type is swapped between shared, grouped,
/// depthwise, and residual maps. The first layer is always a shared map;
/// the raw 3-channel input has nothing to group or skip over.
#[derive(Debug, Clone)]
pub struct PointEmbeddingModel<T: Element> {
    stages: Vec<EmbedStage<T>>,
    agg_lin: Linear<T>,
    agg_bn: BatchNorm<T>,
    head: ClassifierHead<T>,
    input_dims: usize,
}

impl<T: Element> PointEmbeddingModel<T> {
    fn new(cfg: &ModelConfig, spec: &EmbeddingSpec, rng: &mut Prng) -> Result<Self> {
        if cfg.task != Task::Classify {
            return Err(Error::Config(
                "embedding baselines are classification-only".into(),
            ));
        }
        if spec.kind == EmbeddingKind::Grouped && spec.groups == 0 {
            return Err(Error::Config("grouped embedding needs groups >= 1".into()));
        }
        let mut stages = Vec::with_capacity(cfg.trunk.len());
        let mut c_in = cfg.input_dims;
        for (i, layer) in cfg.trunk.iter().enumerate() {
            let w = layer.branch_width;
            let stage = if i == 0 {
                EmbedStage::Shared(Linear::new(c_in, w, rng), BatchNorm::new(w))
            } else {
                match spec.kind {
                    EmbeddingKind::Shared => {
                        EmbedStage::Shared(Linear::new(c_in, w, rng), BatchNorm::new(w))
                    }
                    EmbeddingKind::Grouped => EmbedStage::Grouped(
                        GroupedMlp::new(c_in, w, spec.groups, rng)?,
                        BatchNorm::new(w),
                    ),
                    EmbeddingKind::Depthwise => EmbedStage::Depthwise(
                        DepthwiseMlp::new(spec.n_points, c_in, w, rng),
                        BatchNorm::new(w),
                    ),
                    EmbeddingKind::Residual => EmbedStage::Residual(SharedMlpBlock::new(
                        c_in,
                        w,
                        Some(c_in),
                        layer.post_add_activation,
                        rng,
                    )),
                }
            };
            stages.push(stage);
            c_in = w;
        }
        let agg_lin = Linear::new(c_in, cfg.aggregate_width, rng);
        let agg_bn = BatchNorm::new(cfg.aggregate_width);
        let head = ClassifierHead::new(
            cfg.aggregate_width,
            &cfg.head_widths,
            cfg.num_classes.expect("validated"),
            cfg.dropout,
            rng,
        )?;
        Ok(Self {
            stages,
            agg_lin,
            agg_bn,
            head,
            input_dims: cfg.input_dims,
        })
    }

    pub fn forward(&mut self, ctx: &mut RunCtx<'_, T>, cloud: &Tensor<T>) -> Result<Tensor<T>> {
        check_cloud(cloud, self.input_dims)?;
        let mut x = cloud.clone();
        for stage in &mut self.stages {
            x = stage.forward(ctx, &x)?;
        }
        let pooled = aggregate_and_pool(&self.agg_lin, &mut self.agg_bn, ctx, &x)?;
        self.head.forward(ctx, &pooled)
    }

    fn visit_params(&mut self, f: &mut TensorVisitor<T>) -> Result<()> {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_params(&format!("embed{i}"), f)?;
        }
        self.agg_lin.visit_params("agg", f)?;
        self.agg_bn.visit_params("agg.bn", f)?;
        self.head.visit_params("head", f)
    }

    fn visit_buffers(&mut self, f: &mut TensorVisitor<T>) -> Result<()> {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_buffers(&format!("embed{i}"), f)?;
        }
        self.agg_bn.visit_buffers("agg.bn", f)?;
        self.head.visit_buffers("head", f)
    }
}

/// Any runnable network, built from a `ModelSpec` and a seed.
#[derive(Debug, Clone)]
pub enum Model<T: Element> {
    Saw(SawNetModel<T>),
    Parallel(ParallelModel<T>),
    Embedding(PointEmbeddingModel<T>),
}

impl<T: Element> Model<T> {
    pub fn from_spec(spec: &ModelSpec, seed: u64) -> Result<(Self, ModelSpec)> {
        spec.config.validate()?;
        let mut rng = rng_from(seed, &[SALT_INIT]);
        let model = match &spec.embedding {
            Some(es) => Model::Embedding(PointEmbeddingModel::new(&spec.config, es, &mut rng)?),
            None => match spec.config.variant {
                Variant::Sawnet => Model::Saw(SawNetModel::new(&spec.config, true, &mut rng)?),
                Variant::CombineAtEnd => {
                    Model::Parallel(ParallelModel::new(&spec.config, &mut rng)?)
                }
                Variant::CombinePerLayerNoResidual => {
                    Model::Saw(SawNetModel::new(&spec.config, false, &mut rng)?)
                }
            },
        };
        Ok((model, spec.clone()))
    }

    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            config: cfg.clone(),
            embedding: None,
        };
        Ok(Self::from_spec(&spec, seed)?.0)
    }

    pub fn build_embedding(cfg: &ModelConfig, embedding: EmbeddingSpec, seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            config: cfg.clone(),
            embedding: Some(embedding),
        };
        Ok(Self::from_spec(&spec, seed)?.0)
    }

    pub fn forward(&mut self, ctx: &mut RunCtx<'_, T>, cloud: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Model::Saw(m) => m.forward(ctx, cloud),
            Model::Parallel(m) => m.forward(ctx, cloud),
            Model::Embedding(m) => m.forward(ctx, cloud),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Model::Saw(m) => match &m.head {
                TaskHead::Classify(_) => Task::Classify,
                TaskHead::Segment(_) => Task::Segment,
            },
            // Only the main variant supports segmentation heads.
            Model::Parallel(_) | Model::Embedding(_) => Task::Classify,
        }
    }

    pub fn visit_params(&mut self, f: &mut TensorVisitor<T>) -> Result<()> {
        match self {
            Model::Saw(m) => m.visit_params(f),
            Model::Parallel(m) => m.visit_params(f),
            Model::Embedding(m) => m.visit_params(f),
        }
    }

    pub fn visit_buffers(&mut self, f: &mut TensorVisitor<T>) -> Result<()> {
        match self {
            Model::Saw(m) => m.visit_buffers(f),
            Model::Parallel(m) => m.visit_buffers(f),
            Model::Embedding(m) => m.visit_buffers(f),
        }
    }

    pub fn num_params(&mut self) -> usize {
        let mut total = 0usize;
        self.visit_params(&mut |_, t| {
            total += t.len();
            Ok(())
        })
        .expect("counting never fails");
        total
    }

    /// Leaf node ids of every parameter, in visitor order; backward wants
    /// these.
    pub fn param_nodes(&mut self) -> Vec<crate::tensor::NodeId> {
        let mut nodes = Vec::new();
        self.visit_params(&mut |_, t| {
            nodes.push(t.node().expect("parameters always carry nodes"));
            Ok(())
        })
        .expect("collection never fails");
        nodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sawnet::config::{ChannelSplit, SawLayerConfig, TransformerConfig};
    use crate::tensor::Tape;

    fn tiny_cfg(task: Task) -> ModelConfig {
        ModelConfig {
            task,
            variant: Variant::Sawnet,
            input_dims: 3,
            trunk: vec![
                SawLayerConfig {
                    branch_width: 4,
                    k: 3,
                    post_add_activation: true,
                },
                SawLayerConfig {
                    branch_width: 6,
                    k: 3,
                    post_add_activation: true,
                },
            ],
            aggregate_width: 10,
            head_widths: vec![8],
            dropout: 0.0,
            num_classes: Some(5),
            parts: Some(4),
            seg_head_widths: vec![8],
            transformer: Some(TransformerConfig {
                widths: vec![4],
                head: vec![6],
                k: 3,
            }),
            channel_split: None,
        }
    }

    fn cloud(b: usize, n: usize, c: usize) -> Tensor<f32> {
        Tensor::from_fn(&[b, n, c], |i| ((i * 211 % 53) as f32 - 26.0) * 0.031).as_leaf()
    }

    #[test]
    fn classifier_shapes_and_finite_logits() {
        let mut model = Model::<f32>::build(&tiny_cfg(Task::Classify), 3).unwrap();
        let x = cloud(2, 9, 3);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let logits = model.forward(&mut ctx, &x).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert!(logits.all_finite());
    }

    #[test]
    fn segmentation_scores_per_point() {
        let mut cfg = tiny_cfg(Task::Segment);
        cfg.num_classes = None;
        let mut model = Model::<f32>::build(&cfg, 3).unwrap();
        let x = cloud(2, 9, 3);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let scores = model.forward(&mut ctx, &x).unwrap();
        assert_eq!(scores.shape(), &[2, 9, 4]);
        assert!(scores.all_finite());
    }

    #[test]
    fn all_variants_build_and_run() {
        for variant in [
            Variant::Sawnet,
            Variant::CombineAtEnd,
            Variant::CombinePerLayerNoResidual,
        ] {
            let mut cfg = tiny_cfg(Task::Classify);
            cfg.variant = variant;
            let mut model = Model::<f32>::build(&cfg, 9).unwrap();
            let x = cloud(2, 9, 3);
            let mut tape = Tape::inference();
            let mut ctx = RunCtx::eval(&mut tape);
            let logits = model.forward(&mut ctx, &x).unwrap();
            assert_eq!(logits.shape(), &[2, 5], "{}", variant.name());
        }
    }

    #[test]
    fn embedding_baselines_build_and_run() {
        for kind in [
            EmbeddingKind::Shared,
            EmbeddingKind::Grouped,
            EmbeddingKind::Depthwise,
            EmbeddingKind::Residual,
        ] {
            let mut cfg = tiny_cfg(Task::Classify);
            // grouped needs divisible widths: 4 -> 6 is not, use 4 -> 8
            cfg.trunk[1].branch_width = 8;
            let spec = EmbeddingSpec {
                kind,
                groups: 2,
                n_points: 9,
            };
            let mut model = Model::<f32>::build_embedding(&cfg, spec, 9).unwrap();
            let x = cloud(2, 9, 3);
            let mut tape = Tape::inference();
            let mut ctx = RunCtx::eval(&mut tape);
            let logits = model.forward(&mut ctx, &x).unwrap();
            assert_eq!(logits.shape(), &[2, 5], "{}", kind.name());
        }
    }

    #[test]
    fn channel_split_consumes_prefixes() {
        let mut cfg = tiny_cfg(Task::Classify);
        cfg.input_dims = 9;
        cfg.channel_split = Some(ChannelSplit {
            edgeconv_dims: 3,
            shared_dims: 9,
        });
        let mut model = Model::<f32>::build(&cfg, 3).unwrap();
        let x = cloud(2, 9, 9);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let logits = model.forward(&mut ctx, &x).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_cfg(Task::Classify);
        let mut a = Model::<f32>::build(&cfg, 17).unwrap();
        let mut b = Model::<f32>::build(&cfg, 17).unwrap();
        let mut aw = Vec::new();
        a.visit_params(&mut |name, t| {
            aw.push((name.to_string(), t.to_vec()));
            Ok(())
        })
        .unwrap();
        let mut i = 0;
        b.visit_params(&mut |name, t| {
            assert_eq!(aw[i].0, name);
            assert_eq!(aw[i].1, t.to_vec(), "{name}");
            i += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(i, aw.len());

        let mut c = Model::<f32>::build(&cfg, 18).unwrap();
        let mut any_diff = false;
        let mut j = 0;
        c.visit_params(&mut |_, t| {
            if aw[j].1 != t.to_vec() {
                any_diff = true;
            }
            j += 1;
            Ok(())
        })
        .unwrap();
        assert!(any_diff, "different seeds must give different weights");
    }

    #[test]
    fn visitor_names_unique_and_stable_across_calls() {
        let mut model = Model::<f32>::build(&tiny_cfg(Task::Classify), 3).unwrap();
        let mut names = Vec::new();
        model
            .visit_params(&mut |n, _| {
                names.push(n.to_string());
                Ok(())
            })
            .unwrap();
        model
            .visit_buffers(&mut |n, _| {
                names.push(n.to_string());
                Ok(())
            })
            .unwrap();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate visitor name");

        let mut again = Vec::new();
        model
            .visit_params(&mut |n, _| {
                again.push(n.to_string());
                Ok(())
            })
            .unwrap();
        assert_eq!(&names[..again.len()], &again[..]);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = ModelSpec {
            config: tiny_cfg(Task::Classify),
            embedding: Some(EmbeddingSpec {
                kind: EmbeddingKind::Depthwise,
                groups: 1,
                n_points: 64,
            }),
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
        assert!(text.contains("\"depthwise\""));
    }

    #[test]
    fn segment_requires_parts() {
        let mut cfg = tiny_cfg(Task::Segment);
        cfg.parts = None;
        assert!(Model::<f32>::build(&cfg, 1).is_err());
    }

    #[test]
    fn param_count_is_positive_and_seedless() {
        let mut m = Model::<f32>::build(&tiny_cfg(Task::Classify), 5).unwrap();
        let mut m2 = Model::<f32>::build(&tiny_cfg(Task::Classify), 6).unwrap();
        assert!(m.num_params() > 0);
        assert_eq!(m.num_params(), m2.num_params());
    }
}
