//! Self-contained invariant suite behind the `verify` command.
//!
//! Each check returns the worst error it observed next to the tolerance it
//! was held to, so the report shows margins, not just verdicts. The checks
//! take their workload as parameters: [`run_all`] uses quick settings, the
//! acceptance tests call the same functions at full scale. All checks are
//! deterministic in the seed.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::context::{GraphMode, Mode, RunCtx};
use crate::data::{synth_dataset, PointCloud, SynthClass};
use crate::error::{Error, Result};
use crate::graph::{edge_features, knn, knn_by_full_sort, neighbor_max};
use crate::layers::{DepthwiseMlp, Dropout, GroupedMlp, Linear, BN_EPS};
use crate::rng::{rng_from, Prng, SALT_DROPOUT};
use crate::sawnet::blocks::SkipPath;
use crate::sawnet::{
    Model, ModelConfig, ModelSpec, SawLayer, SawLayerConfig, Task, TransformerConfig,
    TransformerNet, Variant,
};
use crate::tensor::{GradCheck, GradientMap, Tape, Tensor};
use crate::train::{
    argmax_rows, batch_cloud_tensor, load_checkpoint, miou, save_checkpoint, train_epoch, Adam,
    OptimConfig, TrainSettings,
};

/// One invariant's result: the worst error it saw and the line it must stay
/// under. For the exact checks the tolerance is 0 and `passed` also demands
/// bit equality where it applies.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn judge(name: &'static str, max_error: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: max_error <= tolerance,
            max_error,
            tolerance,
            detail: detail.into(),
        }
    }

    /// Converts an `Err` from a check body into a failing outcome rather
    /// than aborting the whole suite.
    fn from_result(name: &'static str, tolerance: f64, r: Result<CheckOutcome>) -> Self {
        match r {
            Ok(o) => o,
            Err(e) => Self {
                name,
                passed: false,
                max_error: f64::INFINITY,
                tolerance,
                detail: format!("check errored: {e}"),
            },
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} (max err {:.3e} vs tol {:.1e}){}{}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_error,
            self.tolerance,
            if self.detail.is_empty() { "" } else { " - " },
            self.detail
        )
    }
}

/// True when every check passed.
pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// Runs the whole suite at quick settings. Order is stable so reports
/// diff cleanly.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_cross_entropy(),
        check_gradient_rules(seed),
        check_model_gradients(seed, 2),
        check_gradcheck_teeth(seed),
        check_knn_oracle(seed, 8, 8, 48),
        check_permutation_invariance(seed, 10),
        check_transformer_identity(seed),
        check_residual_degeneracy(seed),
        check_checkpoint_round_trip(seed),
        check_miou_oracle(seed, 100),
    ]
}

const VERIFY_SALT: u64 = 0x09;

/// Finite differences must not step across a relu or max boundary. Draws
/// are retried until the recorded forward keeps this much clearance; if
/// none does, the attempt with the largest margin is used (the fallback
/// step sizes absorb near misses).
const KINK_FLOOR: f64 = 1e-4;

fn clear_of_kinks<T>(mut draw: impl FnMut(u64) -> Result<(f64, T)>) -> Result<T> {
    let mut best: Option<(f64, T)> = None;
    for attempt in 0..8 {
        let (margin, plan) = draw(attempt)?;
        if margin >= KINK_FLOOR {
            return Ok(plan);
        }
        if best.as_ref().map_or(true, |(m, _)| margin > *m) {
            best = Some((margin, plan));
        }
    }
    Ok(best.expect("at least one attempt ran").1)
}

fn uniform_vec(rng: &mut Prng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn uniform_f32(rng: &mut Prng, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi) as f32).collect()
}

fn grad_of<'g>(grads: &'g GradientMap<f64>, t: &Tensor<f64>, what: &str) -> Result<&'g Tensor<f64>> {
    grads
        .get(t.node().ok_or_else(|| Error::Contract(format!("{what} has no node")))?)
        .ok_or_else(|| Error::Contract(format!("no gradient for {what}")))
}

pub fn check_cross_entropy() -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let mut tape = Tape::<f64>::inference();
        let mut worst = 0.0f64;

        // Uniform logits over 40 classes cost ln 40 per item.
        let uniform = Tensor::new(&[2, 40], vec![0.25; 80])?;
        let got = tape.softmax_cross_entropy(&uniform, &[7, 31])?.item()?;
        worst = worst.max((got - 40.0f64.ln()).abs());

        // Two logits one apart: -log sigmoid(1) = softplus(-1).
        let pair = Tensor::new(&[1, 2], vec![2.0, 1.0])?;
        let got = tape.softmax_cross_entropy(&pair, &[0])?.item()?;
        worst = worst.max((got - 0.3132616875182228).abs());

        // Shifting every logit by a constant changes nothing.
        let mut rng = rng_from(12, &[VERIFY_SALT, 0]);
        let logits: Vec<f64> = uniform_vec(&mut rng, 20, -5.0, 5.0);
        let shifted: Vec<f64> = logits.iter().map(|x| x + 11.25).collect();
        let labels = [3usize, 0, 4, 1];
        let a = tape
            .softmax_cross_entropy(&Tensor::new(&[4, 5], logits)?, &labels)?
            .item()?;
        let b = tape
            .softmax_cross_entropy(&Tensor::new(&[4, 5], shifted)?, &labels)?
            .item()?;
        worst = worst.max((a - b).abs());

        Ok(CheckOutcome::judge(
            "cross_entropy_hand_values",
            worst,
            1e-6,
            "ln 40, softplus(-1) and shift invariance",
        ))
    };
    CheckOutcome::from_result("cross_entropy_hand_values", 1e-6, body())
}

/// Central-difference checks for every layer type: dense maps (plain,
/// grouped, depthwise), activation, batch norm, dropout with a frozen mask,
/// neighborhood features over a frozen graph, both residual blocks, the
/// alignment net, and the fused loss.
pub fn check_gradient_rules(seed: u64) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let check = GradCheck::default();
        let mut worst = 0.0f64;
        let mut at = "";
        fn bump(label: &'static str, err: f64, worst: &mut f64, at: &mut &'static str) {
            if err > *worst {
                *worst = err;
                *at = label;
            }
        }

        // Dense layer with bias; quadratic loss keeps the problem smooth.
        {
            let mut rng = rng_from(seed, &[VERIFY_SALT, 1]);
            let lin = Linear::<f64>::new(4, 3, &mut rng);
            let x = Tensor::param(&[5, 4], uniform_vec(&mut rng, 20, -1.0, 1.0))?;
            let loss_of = |lin: &Linear<f64>, t: &Tensor<f64>, tape: &mut Tape<f64>| -> Result<Tensor<f64>> {
                let y = lin.forward(tape, t)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            };
            let mut tape = Tape::new();
            let loss = loss_of(&lin, &x, &mut tape)?;
            let b = lin.b.as_ref().expect("bias present");
            let leaves = [x.node().unwrap(), lin.w.node().unwrap(), b.node().unwrap()];
            let grads = tape.backward(&loss, &leaves)?;
            let f = |t: &Tensor<f64>| loss_of(&lin, t, &mut Tape::inference())?.item();
            bump("linear/x", check.measure(f, &x, grad_of(&grads, &x, "x")?)?, &mut worst, &mut at);
            let fw = |t: &Tensor<f64>| {
                let probed = Linear { w: t.clone(), b: lin.b.clone() };
                loss_of(&probed, &x, &mut Tape::inference())?.item()
            };
            bump("linear/w", check.measure(fw, &lin.w, grad_of(&grads, &lin.w, "w")?)?, &mut worst, &mut at);
            let fb = |t: &Tensor<f64>| {
                let probed = Linear { w: lin.w.clone(), b: Some(t.clone()) };
                loss_of(&probed, &x, &mut Tape::inference())?.item()
            };
            bump("linear/b", check.measure(fb, b, grad_of(&grads, b, "b")?)?, &mut worst, &mut at);
        }

        // Relu probed safely away from its kink.
        {
            let mut rng = rng_from(seed, &[VERIFY_SALT, 2]);
            let vals: Vec<f64> = (0..12)
                .map(|_| rng.gen_range(0.2..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let x = Tensor::param(&[12], vals)?;
            let f = |t: &Tensor<f64>| -> Result<f64> {
                let mut tape = Tape::inference();
                let r = tape.relu(t)?;
                let sq = tape.mul(&r, &r)?;
                tape.sum_all(&sq)?.item()
            };
            let mut tape = Tape::new();
            let r = tape.relu(&x)?;
            let sq = tape.mul(&r, &r)?;
            let loss = tape.sum_all(&sq)?;
            let grads = tape.backward(&loss, &[x.node().unwrap()])?;
            bump("relu/x", check.measure(f, &x, grad_of(&grads, &x, "x")?)?, &mut worst, &mut at);
        }

        // Batch norm in training mode; statistics recompute per probe.
        {
            let mut rng = rng_from(seed, &[VERIFY_SALT, 3]);
            let x = Tensor::param(&[6, 3], uniform_vec(&mut rng, 18, -2.0, 2.0))?;
            let gamma = Tensor::param(&[3], uniform_vec(&mut rng, 3, 0.5, 1.5))?;
            let beta = Tensor::param(&[3], uniform_vec(&mut rng, 3, -0.5, 0.5))?;
            let loss_of = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>, tape: &mut Tape<f64>| -> Result<Tensor<f64>> {
                let (y, _, _) = tape.batch_norm_train(x, g, b, BN_EPS)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            };
            let mut tape = Tape::new();
            let loss = loss_of(&x, &gamma, &beta, &mut tape)?;
            let leaves = [x.node().unwrap(), gamma.node().unwrap(), beta.node().unwrap()];
            let grads = tape.backward(&loss, &leaves)?;
            let fx = |t: &Tensor<f64>| loss_of(t, &gamma, &beta, &mut Tape::inference())?.item();
            bump("batch_norm/x", check.measure(fx, &x, grad_of(&grads, &x, "x")?)?, &mut worst, &mut at);
            let fg = |t: &Tensor<f64>| loss_of(&x, t, &beta, &mut Tape::inference())?.item();
            bump("batch_norm/gamma", check.measure(fg, &gamma, grad_of(&grads, &gamma, "gamma")?)?, &mut worst, &mut at);
            let fb = |t: &Tensor<f64>| loss_of(&x, &gamma, t, &mut Tape::inference())?.item();
            bump("batch_norm/beta", check.measure(fb, &beta, grad_of(&grads, &beta, "beta")?)?, &mut worst, &mut at);
        }

        // Dropout with the mask frozen by rng reconstruction.
        {
            let mut rng = rng_from(seed, &[VERIFY_SALT, 4]);
            let x = Tensor::param(&[4, 5], uniform_vec(&mut rng, 20, -1.0, 1.0))?;
            let drop = Dropout::new(0.5)?;
            let loss_of = |drop: &Dropout, t: &Tensor<f64>, tape: &mut Tape<f64>| -> Result<Tensor<f64>> {
                let mut mask_rng = rng_from(seed, &[VERIFY_SALT, 4, 1]);
                let mut ctx = RunCtx::train(tape, &mut mask_rng);
                let y = drop.forward(&mut ctx, t)?;
                let sq = ctx.tape.mul(&y, &y)?;
                ctx.tape.sum_all(&sq)
            };
            let mut tape = Tape::new();
            let loss = loss_of(&drop, &x, &mut tape)?;
            let grads = tape.backward(&loss, &[x.node().unwrap()])?;
            let f = |t: &Tensor<f64>| loss_of(&drop, t, &mut Tape::inference())?.item();
            bump("dropout/x", check.measure(f, &x, grad_of(&grads, &x, "x")?)?, &mut worst, &mut at);
        }

        // Grouped and depthwise embedding layers, probed at their inputs.
        {
            let mut rng = rng_from(seed, &[VERIFY_SALT, 5]);
            let grouped = GroupedMlp::<f64>::new(6, 4, 2, &mut rng)?;
            let x = Tensor::param(&[3, 6], uniform_vec(&mut rng, 18, -1.0, 1.0))?;
            let loss_of = |t: &Tensor<f64>, tape: &mut Tape<f64>| -> Result<Tensor<f64>> {
                let y = grouped.forward(tape, t)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            };
            let mut tape = Tape::new();
            let loss = loss_of(&x, &mut tape)?;
            let grads = tape.backward(&loss, &[x.node().unwrap()])?;
            let f = |t: &Tensor<f64>| loss_of(t, &mut Tape::inference())?.item();
            bump("grouped_mlp/x", check.measure(f, &x, grad_of(&grads, &x, "x")?)?, &mut worst, &mut at);

            let depth = DepthwiseMlp::<f64>::new(4, 3, 5, &mut rng);
            let xd = Tensor::param(&[2, 4, 3], uniform_vec(&mut rng, 24, -1.0, 1.0))?;
            let loss_of = |t: &Tensor<f64>, tape: &mut Tape<f64>| -> Result<Tensor<f64>> {
                let y = depth.forward(tape, t)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            };
            let mut tape = Tape::new();
            let loss = loss_of(&xd, &mut tape)?;
            let grads = tape.backward(&loss, &[xd.node().unwrap()])?;
            let f = |t: &Tensor<f64>| loss_of(t, &mut Tape::inference())?.item();
            bump("depthwise_mlp/x", check.measure(f, &xd, grad_of(&grads, &xd, "x")?)?, &mut worst, &mut at);
        }

        // Edge features and neighbor max over a frozen graph.
        {
            let (x, graph, analytic) = clear_of_kinks(|attempt| {
                let mut rng = rng_from(seed, &[VERIFY_SALT, 6, attempt]);
                let x = Tensor::param(&[1, 7, 3], uniform_vec(&mut rng, 21, -1.0, 1.0))?;
                let graph = knn(&x, 3)?;
                let mut tape = Tape::new();
                let ef = edge_features(&mut tape, &x, &graph)?;
                let pooled = neighbor_max(&mut tape, &ef)?;
                let sq = tape.mul(&pooled, &pooled)?;
                let loss = tape.sum_all(&sq)?;
                let grads = tape.backward(&loss, &[x.node().unwrap()])?;
                let analytic = grads.get(x.node().unwrap()).unwrap().clone();
                Ok((tape.kink_margin().min(graph.margin()), (x, graph, analytic)))
            })?;
            let f = |t: &Tensor<f64>| -> Result<f64> {
                let mut tape = Tape::inference();
                let ef = edge_features(&mut tape, t, &graph)?;
                let pooled = neighbor_max(&mut tape, &ef)?;
                let sq = tape.mul(&pooled, &pooled)?;
                tape.sum_all(&sq)?.item()
            };
            bump("edge_pool/x", check.measure(f, &x, &analytic)?, &mut worst, &mut at);
        }

        // Both residual blocks in training mode. Blocks are rebuilt from a
        // clone per probe so running-stat updates cannot leak.
        {
            let proto = crate::sawnet::SharedMlpBlock::<f64>::new(
                3,
                4,
                Some(3),
                true,
                &mut rng_from(seed, &[VERIFY_SALT, 7]),
            );
            let (x, analytic) = clear_of_kinks(|attempt| {
                let mut rng = rng_from(seed, &[VERIFY_SALT, 8, attempt]);
                let x = Tensor::param(&[5, 3], uniform_vec(&mut rng, 15, -1.0, 1.0))?;
                let mut block = proto.clone();
                let mut tape = Tape::new();
                let mut ctx = RunCtx::eval(&mut tape);
                ctx.mode = Mode::Train;
                let y = block.forward(&mut ctx, &x, Some(&x))?;
                let sq = ctx.tape.mul(&y, &y)?;
                let loss = ctx.tape.sum_all(&sq)?;
                let grads = tape.backward(&loss, &[x.node().unwrap()])?;
                let analytic = grads.get(x.node().unwrap()).unwrap().clone();
                Ok((tape.kink_margin(), (x, analytic)))
            })?;
            let f = {
                let proto = proto.clone();
                move |t: &Tensor<f64>| -> Result<f64> {
                    let mut block = proto.clone();
                    let mut tape = Tape::inference();
                    let mut ctx = RunCtx::eval(&mut tape);
                    ctx.mode = Mode::Train;
                    let y = block.forward(&mut ctx, t, Some(t))?;
                    let sq = ctx.tape.mul(&y, &y)?;
                    ctx.tape.sum_all(&sq)?.item()
                }
            };
            bump("shared_block/x", check.measure(f, &x, &analytic)?, &mut worst, &mut at);
        }
        {
            let proto = crate::sawnet::EdgeConvBlock::<f64>::new(
                3,
                4,
                3,
                Some(3),
                true,
                &mut rng_from(seed, &[VERIFY_SALT, 9]),
            );
            let (x, graphs, analytic) = clear_of_kinks(|attempt| {
                let mut rng = rng_from(seed, &[VERIFY_SALT, 10, attempt]);
                let x = Tensor::param(&[1, 8, 3], uniform_vec(&mut rng, 24, -1.0, 1.0))?;
                let mut graphs = Vec::new();
                let mut block = proto.clone();
                let mut tape = Tape::new();
                let margin;
                let loss = {
                    let mut ctx = RunCtx::eval(&mut tape);
                    ctx.mode = Mode::Train;
                    let mut ctx = ctx.with_graphs(GraphMode::Capture(&mut graphs));
                    let y = block.forward(&mut ctx, &x, Some(&x))?;
                    let sq = ctx.tape.mul(&y, &y)?;
                    ctx.tape.sum_all(&sq)?
                };
                margin = tape.kink_margin();
                let grads = tape.backward(&loss, &[x.node().unwrap()])?;
                let analytic = grads.get(x.node().unwrap()).unwrap().clone();
                let gmargin = graphs.iter().map(|g| g.margin()).fold(f64::INFINITY, f64::min);
                Ok((margin.min(gmargin), (x, graphs, analytic)))
            })?;
            let f = {
                let proto = proto.clone();
                let graphs = graphs.clone();
                move |t: &Tensor<f64>| -> Result<f64> {
                    let mut block = proto.clone();
                    let mut tape = Tape::inference();
                    let mut ctx = RunCtx::eval(&mut tape);
                    ctx.mode = Mode::Train;
                    let mut ctx = ctx.with_graphs(GraphMode::Replay(&graphs));
                    let y = block.forward(&mut ctx, t, Some(t))?;
                    let sq = ctx.tape.mul(&y, &y)?;
                    ctx.tape.sum_all(&sq)?.item()
                }
            };
            bump("edge_block/x", check.measure(f, &x, &analytic)?, &mut worst, &mut at);
        }

        // The alignment net end to end, graphs frozen.
        {
            let cfg = TransformerConfig {
                widths: vec![4],
                head: vec![6],
                k: 3,
            };
            let proto = TransformerNet::<f64>::new(&cfg, &mut rng_from(seed, &[VERIFY_SALT, 11]))?;
            let (x, graphs, analytic) = clear_of_kinks(|attempt| {
                let mut rng = rng_from(seed, &[VERIFY_SALT, 12, attempt]);
                let x = Tensor::param(&[2, 6, 3], uniform_vec(&mut rng, 36, -1.0, 1.0))?;
                let mut graphs = Vec::new();
                let mut tnet = proto.clone();
                let mut tape = Tape::new();
                let loss = {
                    let mut ctx = RunCtx::eval(&mut tape);
                    ctx.mode = Mode::Train;
                    let mut ctx = ctx.with_graphs(GraphMode::Capture(&mut graphs));
                    let (aligned, _) = tnet.forward(&mut ctx, &x)?;
                    let sq = ctx.tape.mul(&aligned, &aligned)?;
                    ctx.tape.sum_all(&sq)?
                };
                let margin = tape.kink_margin();
                let grads = tape.backward(&loss, &[x.node().unwrap()])?;
                let analytic = grads.get(x.node().unwrap()).unwrap().clone();
                let gmargin = graphs.iter().map(|g| g.margin()).fold(f64::INFINITY, f64::min);
                Ok((margin.min(gmargin), (x, graphs, analytic)))
            })?;
            let f = {
                let proto = proto.clone();
                let graphs = graphs.clone();
                move |t: &Tensor<f64>| -> Result<f64> {
                    let mut tnet = proto.clone();
                    let mut tape = Tape::inference();
                    let mut ctx = RunCtx::eval(&mut tape);
                    ctx.mode = Mode::Train;
                    let mut ctx = ctx.with_graphs(GraphMode::Replay(&graphs));
                    let (aligned, _) = tnet.forward(&mut ctx, t)?;
                    let sq = ctx.tape.mul(&aligned, &aligned)?;
                    ctx.tape.sum_all(&sq)?.item()
                }
            };
            bump("transformer/points", check.measure(f, &x, &analytic)?, &mut worst, &mut at);
        }

        // Fused softmax cross-entropy.
        {
            let mut rng = rng_from(seed, &[VERIFY_SALT, 13]);
            let x = Tensor::param(&[3, 5], uniform_vec(&mut rng, 15, -2.0, 2.0))?;
            let labels = [1usize, 4, 0];
            let f = |t: &Tensor<f64>| -> Result<f64> {
                let mut tape = Tape::inference();
                tape.softmax_cross_entropy(t, &labels)?.item()
            };
            let mut tape = Tape::new();
            let loss = tape.softmax_cross_entropy(&x, &labels)?;
            let grads = tape.backward(&loss, &[x.node().unwrap()])?;
            bump("softmax_ce/logits", check.measure(f, &x, grad_of(&grads, &x, "logits")?)?, &mut worst, &mut at);
        }

        let detail = if at.is_empty() {
            "every rule matched finite differences to rounding".to_string()
        } else {
            format!("worst rule: {at}")
        };
        Ok(CheckOutcome::judge("gradient_rules", worst, check.rel_tol, detail))
    };
    CheckOutcome::from_result("gradient_rules", 1e-4, body())
}

/// The pinned end-to-end gradient-check network: trunk widths 8/8 at k=4
/// with a small alignment net, meant for B=2 clouds of 16 points in f64.
pub fn gradcheck_model_spec() -> ModelSpec {
    ModelSpec {
        config: ModelConfig {
            task: Task::Classify,
            variant: Variant::Sawnet,
            input_dims: 3,
            trunk: vec![
                SawLayerConfig {
                    branch_width: 8,
                    k: 4,
                    post_add_activation: true,
                },
                SawLayerConfig {
                    branch_width: 8,
                    k: 4,
                    post_add_activation: true,
                },
            ],
            aggregate_width: 16,
            head_widths: vec![8],
            dropout: 0.5,
            num_classes: Some(3),
            parts: None,
            seg_head_widths: vec![8],
            transformer: Some(TransformerConfig {
                widths: vec![4, 4],
                head: vec![8],
                k: 4,
            }),
            channel_split: None,
        },
        embedding: None,
    }
}

/// Finite-differences the training loss through every parameter of a model
/// built from `spec`. One forward pass freezes the neighbor graphs and the
/// dropout rng is reconstructed per probe, so each probe sees the exact
/// same stochastic choices. Returns the worst relative error and the name
/// of the parameter that produced it.
pub fn model_gradcheck(spec: &ModelSpec, seed: u64, b: usize, n: usize) -> Result<(f64, String)> {
    let check = GradCheck::default();
    let (proto, _) = Model::<f64>::from_spec(spec, seed)?;
    let classes = match spec.config.task {
        Task::Classify => spec.config.num_classes.unwrap_or(2),
        Task::Segment => spec.config.parts.unwrap_or(2),
    };
    let mut label_rng = rng_from(seed, &[VERIFY_SALT, 20]);
    let labels: Vec<usize> = match spec.config.task {
        Task::Classify => (0..b).map(|_| label_rng.gen_range(0..classes)).collect(),
        Task::Segment => (0..b * n).map(|_| label_rng.gen_range(0..classes)).collect(),
    };

    // Draw an input whose forward pass stays clear of decision boundaries,
    // recording the analytic gradients and the graphs to replay. The
    // attempt index travels with the plan so every probe can rebuild the
    // exact dropout rng of the recorded pass.
    let (x, graphs, grads, attempt) = clear_of_kinks(|attempt| {
        let mut rng = rng_from(seed, &[VERIFY_SALT, 21, attempt]);
        let x = Tensor::<f64>::new(
            &[b, n, spec.config.input_dims],
            uniform_vec(&mut rng, b * n * spec.config.input_dims, -1.0, 1.0),
        )?;
        let mut graphs = Vec::new();
        let mut model = proto.clone();
        let mut tape = Tape::new();
        let loss = {
            let mut drng = rng_from(seed, &[SALT_DROPOUT, attempt]);
            let mut ctx = RunCtx::train(&mut tape, &mut drng).with_graphs(GraphMode::Capture(&mut graphs));
            let scores = model.forward(&mut ctx, &x)?;
            ctx.tape.softmax_cross_entropy(&scores, &labels)?
        };
        let margin = tape.kink_margin();
        let gmargin = graphs.iter().map(|g| g.margin()).fold(f64::INFINITY, f64::min);
        let grads = tape.backward(&loss, &proto.clone().param_nodes())?;
        Ok((margin.min(gmargin), (x, graphs, grads, attempt)))
    })?;

    // Enumerate parameters once; tensor clones share the live node ids.
    let mut params: Vec<(String, Tensor<f64>)> = Vec::new();
    proto.clone().visit_params(&mut |name, t| {
        params.push((name.to_string(), t.clone()));
        Ok(())
    })?;

    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for (i, (name, theta)) in params.iter().enumerate() {
        let analytic = grads
            .get(theta.node().expect("parameters carry nodes"))
            .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
        let f = |probe: &Tensor<f64>| -> Result<f64> {
            let mut model = proto.clone();
            let mut j = 0usize;
            model.visit_params(&mut |_, t| {
                if j == i {
                    *t = t.with_data(probe.to_vec())?;
                }
                j += 1;
                Ok(())
            })?;
            let mut tape = Tape::inference();
            let mut drng = rng_from(seed, &[SALT_DROPOUT, attempt]);
            let mut ctx = RunCtx::train(&mut tape, &mut drng).with_graphs(GraphMode::Replay(&graphs));
            let scores = model.forward(&mut ctx, &x)?;
            ctx.tape.softmax_cross_entropy(&scores, &labels)?.item()
        };
        let err = check.measure(f, theta, analytic)?;
        if err > worst {
            worst = err;
            worst_name = name.clone();
        }
    }
    Ok((worst, worst_name))
}

/// Runs [`model_gradcheck`] on the pinned tiny network for several seeds
/// (B=2 clouds of 16 points).
pub fn check_model_gradients(seed: u64, seeds: usize) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let spec = gradcheck_model_spec();
        let mut worst = 0.0f64;
        let mut detail = String::new();
        for s in 0..seeds as u64 {
            let (err, name) = model_gradcheck(&spec, seed ^ (s.wrapping_mul(0x9E37_79B9)), 2, 16)?;
            if err > worst {
                worst = err;
                detail = format!("worst parameter: {name} (seed index {s})");
            }
        }
        Ok(CheckOutcome::judge("model_gradients", worst, 1e-4, detail))
    };
    CheckOutcome::from_result("model_gradients", 1e-4, body())
}

/// The checker must reject a deliberately wrong gradient; this check
/// passes only when that planted fault is caught.
pub fn check_gradcheck_teeth(seed: u64) -> CheckOutcome {
    let fault = planted_fault_outcome(seed);
    CheckOutcome {
        name: "gradcheck_detects_planted_fault",
        passed: !fault.passed,
        max_error: fault.max_error,
        tolerance: fault.tolerance,
        detail: if fault.passed {
            "a 5% gradient error slipped past the checker".into()
        } else {
            "planted 5% fault rejected as it should be".into()
        },
    }
}

/// Red-path fixture: scores an intentionally corrupted gradient rule the
/// same way a real one would be scored. Always fails; tests assert that
/// the failure is present and named.
pub fn planted_fault_outcome(seed: u64) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let check = GradCheck::default();
        let mut rng = rng_from(seed, &[VERIFY_SALT, 30]);
        let x = Tensor::param(&[6], uniform_vec(&mut rng, 6, 0.5, 2.0))?;
        let f = |t: &Tensor<f64>| -> Result<f64> {
            let mut tape = Tape::inference();
            let sq = tape.mul(t, t)?;
            tape.sum_all(&sq)?.item()
        };
        let mut tape = Tape::new();
        let sq = tape.mul(&x, &x)?;
        let loss = tape.sum_all(&sq)?;
        let grads = tape.backward(&loss, &[x.node().unwrap()])?;
        // The corruption: report the true gradient scaled by 1.05.
        let right = grads.get(x.node().unwrap()).unwrap();
        let wrong = Tensor::new(right.shape(), right.data().iter().map(|&g| 1.05 * g).collect())?;
        let err = check.measure(f, &x, &wrong)?;
        Ok(CheckOutcome::judge(
            "planted_wrong_gradient",
            err,
            check.rel_tol,
            "gradient of sum(x^2) deliberately scaled by 1.05",
        ))
    };
    CheckOutcome::from_result("planted_wrong_gradient", 1e-4, body())
}

/// Every neighborhood must match the full-sort oracle as a set, for every
/// k below the cloud size.
pub fn check_knn_oracle(seed: u64, clouds: usize, n_lo: usize, n_hi: usize) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let mut rng = rng_from(seed, &[VERIFY_SALT, 40]);
        let mut rows = 0u64;
        let mut bad = 0u64;
        for _ in 0..clouds {
            let n = rng.gen_range(n_lo..=n_hi);
            let pts = Tensor::<f64>::new(&[1, n, 3], uniform_vec(&mut rng, n * 3, -1.0, 1.0))?;
            // One full ranking per cloud; its prefixes are the oracle
            // answers for every k.
            let ranking = knn_by_full_sort(&pts, n - 1)?;
            for k in 1..n {
                let got = knn(&pts, k)?;
                let gi = got.indices();
                for row in 0..n {
                    rows += 1;
                    let mut a: Vec<usize> = gi[row * k..(row + 1) * k].to_vec();
                    let mut b: Vec<usize> =
                        ranking[row * (n - 1)..row * (n - 1) + k].to_vec();
                    a.sort_unstable();
                    b.sort_unstable();
                    if a != b {
                        bad += 1;
                    }
                }
            }
        }
        Ok(CheckOutcome::judge(
            "knn_matches_sorting_oracle",
            bad as f64,
            0.0,
            format!("{bad} of {rows} neighborhoods disagree with the full sort"),
        ))
    };
    CheckOutcome::from_result("knn_matches_sorting_oracle", 0.0, body())
}

fn tiny_runtime_cfg(task: Task) -> ModelConfig {
    ModelConfig {
        task,
        variant: Variant::Sawnet,
        input_dims: 3,
        trunk: vec![SawLayerConfig {
            branch_width: 4,
            k: 4,
            post_add_activation: true,
        }],
        aggregate_width: 8,
        head_widths: vec![6],
        dropout: 0.0,
        num_classes: Some(3),
        parts: Some(4),
        seg_head_widths: vec![6],
        transformer: Some(TransformerConfig {
            widths: vec![4],
            head: vec![6],
            k: 4,
        }),
        channel_split: None,
    }
}

/// Classification logits must survive point reorderings (and the argmax
/// exactly); per-point segmentation scores must reorder with the points.
pub fn check_permutation_invariance(seed: u64, perms: usize) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let n = 16usize;
        let mut rng = rng_from(seed, &[VERIFY_SALT, 50]);
        let mut worst = 0.0f64;
        let mut argmax_stable = true;

        let run = |model: &mut Model<f32>, x: &Tensor<f32>| -> Result<Tensor<f32>> {
            let mut tape = Tape::inference();
            let mut ctx = RunCtx::eval(&mut tape);
            model.forward(&mut ctx, x)
        };

        // Classification: logits invariant, argmax exactly stable.
        let mut model = Model::<f32>::build(&tiny_runtime_cfg(Task::Classify), seed ^ 0xA5)?;
        let x = Tensor::<f32>::new(&[2, n, 3], uniform_f32(&mut rng, 2 * n * 3, -1.0, 1.0))?;
        let reference = run(&mut model, &x)?;
        let ref_argmax = argmax_rows(&reference)?;
        for _ in 0..perms {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut shuffled = vec![0.0f32; 2 * n * 3];
            for b in 0..2 {
                for (i, &p) in perm.iter().enumerate() {
                    for c in 0..3 {
                        shuffled[(b * n + i) * 3 + c] = x.data()[(b * n + p) * 3 + c];
                    }
                }
            }
            let permuted = run(&mut model, &Tensor::new(&[2, n, 3], shuffled)?)?;
            worst = worst.max(reference.max_abs_diff(&permuted));
            argmax_stable &= ref_argmax == argmax_rows(&permuted)?;
        }

        // Segmentation: scores equivariant under the same reorderings.
        let mut seg = Model::<f32>::build(&tiny_runtime_cfg(Task::Segment), seed ^ 0x5A)?;
        let xs = Tensor::<f32>::new(&[2, n, 3], uniform_f32(&mut rng, 2 * n * 3, -1.0, 1.0))?;
        let ref_scores = run(&mut seg, &xs)?;
        let parts = ref_scores.shape()[2];
        for _ in 0..perms {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut shuffled = vec![0.0f32; 2 * n * 3];
            for b in 0..2 {
                for (i, &p) in perm.iter().enumerate() {
                    for c in 0..3 {
                        shuffled[(b * n + i) * 3 + c] = xs.data()[(b * n + p) * 3 + c];
                    }
                }
            }
            let got = run(&mut seg, &Tensor::new(&[2, n, 3], shuffled)?)?;
            // got[b, i, :] must equal ref[b, perm[i], :].
            for b in 0..2 {
                for (i, &p) in perm.iter().enumerate() {
                    for c in 0..parts {
                        let a = got.data()[(b * n + i) * parts + c] as f64;
                        let r = ref_scores.data()[(b * n + p) * parts + c] as f64;
                        worst = worst.max((a - r).abs());
                    }
                }
            }
        }

        let mut out = CheckOutcome::judge(
            "permutation_invariance",
            worst,
            1e-5,
            format!("{perms} permutations, classification and segmentation"),
        );
        if !argmax_stable {
            out.passed = false;
            out.detail = "argmax changed under permutation".into();
        }
        Ok(out)
    };
    CheckOutcome::from_result("permutation_invariance", 1e-5, body())
}

/// A fresh alignment net must be the exact identity.
pub fn check_transformer_identity(seed: u64) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let cfg = TransformerConfig {
            widths: vec![4, 6],
            head: vec![8],
            k: 4,
        };
        let mut worst = 0.0f64;
        let mut exact = true;
        {
            let mut tnet = TransformerNet::<f32>::new(&cfg, &mut rng_from(seed, &[VERIFY_SALT, 60]))?;
            let mut rng = rng_from(seed, &[VERIFY_SALT, 61]);
            let pts = Tensor::<f32>::new(&[2, 12, 3], uniform_f32(&mut rng, 72, -1.0, 1.0))?;
            let mut tape = Tape::inference();
            let mut ctx = RunCtx::eval(&mut tape);
            let (aligned, _) = tnet.forward(&mut ctx, &pts)?;
            worst = worst.max(aligned.max_abs_diff(&pts));
            exact &= aligned.bit_eq(&pts);
        }
        {
            let mut tnet = TransformerNet::<f64>::new(&cfg, &mut rng_from(seed, &[VERIFY_SALT, 62]))?;
            let mut rng = rng_from(seed, &[VERIFY_SALT, 63]);
            let pts = Tensor::<f64>::new(&[1, 9, 3], uniform_vec(&mut rng, 27, -1.0, 1.0))?;
            let mut tape = Tape::inference();
            let mut ctx = RunCtx::eval(&mut tape);
            let (aligned, _) = tnet.forward(&mut ctx, &pts)?;
            worst = worst.max(aligned.max_abs_diff(&pts));
            exact &= aligned.bit_eq(&pts);
        }
        let mut out = CheckOutcome::judge(
            "transformer_identity_at_init",
            worst,
            0.0,
            "fresh alignment must be the exact identity, f32 and f64",
        );
        out.passed &= exact;
        Ok(out)
    };
    CheckOutcome::from_result("transformer_identity_at_init", 0.0, body())
}

/// With both second stages zeroed, a saw layer must emit exactly
/// [act(P(g_skip)) : act(P(l_skip))], recomposed here from the raw
/// projection weights.
pub fn check_residual_degeneracy(seed: u64) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let mut rng = rng_from(seed, &[VERIFY_SALT, 70]);
        let mut layer = SawLayer::<f64>::new(3, 3, 5, 3, Some(3), Some(3), true, &mut rng);
        layer.zero_second_stages();

        let x = Tensor::new(&[2, 8, 3], uniform_vec(&mut rng, 48, -1.0, 1.0))?;
        let mut tape = Tape::inference();
        let got = {
            let mut ctx = RunCtx::eval(&mut tape);
            layer.forward(&mut ctx, &x, &x, Some(&x), Some(&x))?
        };

        let wg = match &layer.global.skip {
            SkipPath::Projected(lin) => lin.w.clone(),
            _ => return Err(Error::Contract("expected a projected global skip".into())),
        };
        let wl = match &layer.local.skip {
            SkipPath::Projected(lin) => lin.w.clone(),
            _ => return Err(Error::Contract("expected a projected local skip".into())),
        };
        let pg = tape.matmul(&x, &wg)?;
        let g_want = tape.relu(&pg)?;
        let pl = tape.matmul(&x, &wl)?;
        let l_want = tape.relu(&pl)?;
        let want = tape.concat(&[&g_want, &l_want], 2)?;

        let worst = got.combined.max_abs_diff(&want);
        let mut out = CheckOutcome::judge(
            "residual_degeneracy",
            worst,
            0.0,
            "zeroed second stages reduce the layer to its projected skips",
        );
        out.passed &= got.combined.bit_eq(&want)
            && got.g.bit_eq(&g_want)
            && got.l.bit_eq(&l_want);
        Ok(out)
    };
    CheckOutcome::from_result("residual_degeneracy", 0.0, body())
}

/// Save, load, and compare logits bit for bit.
pub fn check_checkpoint_round_trip(seed: u64) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let ds = synth_dataset(&[SynthClass::Sphere, SynthClass::Cube], 4, 16, seed ^ 0x33)?;
        let spec = ModelSpec {
            config: ModelConfig {
                num_classes: Some(2),
                ..tiny_runtime_cfg(Task::Classify)
            },
            embedding: None,
        };
        let (mut model, spec) = Model::<f32>::from_spec(&spec, seed ^ 0x44)?;
        let mut adam = Adam::new(&mut model, OptimConfig::default())?;
        let settings = TrainSettings {
            batch_size: 4,
            augment: None,
        };
        train_epoch(&mut model, &mut adam, &ds, &settings, seed, 0)?;
        let dir = tempfile::tempdir()?;
        save_checkpoint(dir.path(), &mut model, &spec, Some(&adam), 1)?;
        let mut restored = load_checkpoint::<f32>(dir.path())?;

        let refs: Vec<&PointCloud> = ds.items.iter().take(4).collect();
        let (x, _) = batch_cloud_tensor::<f32>(&refs)?;
        let run = |model: &mut Model<f32>| -> Result<Tensor<f32>> {
            let mut tape = Tape::inference();
            let mut ctx = RunCtx::eval(&mut tape);
            model.forward(&mut ctx, &x)
        };
        let before = run(&mut model)?;
        let after = run(&mut restored.model)?;
        let mut out = CheckOutcome::judge(
            "checkpoint_round_trip",
            before.max_abs_diff(&after),
            0.0,
            "restored logits must match to the bit",
        );
        out.passed &= before.bit_eq(&after) && restored.epoch == 1;
        Ok(out)
    };
    CheckOutcome::from_result("checkpoint_round_trip", 0.0, body())
}

/// Independent scorer: builds explicit index sets per part and intersects
/// them, no counting shortcuts shared with the production path.
pub fn miou_by_sets(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    categories: &[usize],
    ranges: &[(usize, usize)],
) -> Vec<f64> {
    use std::collections::HashSet;
    let mut per_shape = Vec::with_capacity(pred.len());
    for ((p, t), &cat) in pred.iter().zip(truth).zip(categories) {
        let (lo, hi) = ranges[cat];
        let mut sum = 0.0f64;
        for part in lo..hi {
            let ps: HashSet<usize> = p
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == part)
                .map(|(i, _)| i)
                .collect();
            let ts: HashSet<usize> = t
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == part)
                .map(|(i, _)| i)
                .collect();
            let union = ps.union(&ts).count();
            sum += if union == 0 {
                1.0
            } else {
                ps.intersection(&ts).count() as f64 / union as f64
            };
        }
        per_shape.push(sum / (hi - lo) as f64);
    }
    per_shape
}

/// The production scorer against the set oracle on random configurations,
/// plus the symmetric half-flip hand case (exactly one third).
pub fn check_miou_oracle(seed: u64, configs: usize) -> CheckOutcome {
    let body = || -> Result<CheckOutcome> {
        let mut rng = rng_from(seed, &[VERIFY_SALT, 80]);
        let ranges = vec![(0usize, 2usize), (2, 5), (5, 6), (6, 9)];
        let mut worst = 0.0f64;
        for _ in 0..configs {
            let shapes = rng.gen_range(1..6);
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            let mut cats = Vec::new();
            for _ in 0..shapes {
                let cat = rng.gen_range(0..ranges.len());
                let (lo, hi) = ranges[cat];
                let n = rng.gen_range(1..40);
                pred.push((0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>());
                truth.push((0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>());
                cats.push(cat);
            }
            let report = miou(&pred, &truth, &cats, &ranges)?;
            let expect = miou_by_sets(&pred, &truth, &cats, &ranges);
            for (a, b) in report.per_shape.iter().zip(&expect) {
                worst = worst.max((a - b).abs());
            }
            let overall = expect.iter().sum::<f64>() / expect.len() as f64;
            worst = worst.max((report.overall - overall).abs());
        }

        let half_flip = miou(&[vec![0, 1, 0, 1]], &[vec![0, 0, 1, 1]], &[0], &[(0, 2)])?;
        worst = worst.max((half_flip.overall - 1.0 / 3.0).abs());

        Ok(CheckOutcome::judge(
            "miou_matches_set_oracle",
            worst,
            0.0,
            format!("counting scorer vs explicit sets over {configs} random configs"),
        ))
    };
    CheckOutcome::from_result("miou_matches_set_oracle", 0.0, body())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_check() {
        let outcomes = run_all(7);
        for o in &outcomes {
            assert!(o.passed, "{o}");
        }
        assert!(all_passed(&outcomes));
        assert_eq!(outcomes.len(), 10);
    }

    #[test]
    fn planted_fault_is_a_named_failure() {
        let fault = planted_fault_outcome(7);
        assert!(!fault.passed);
        assert_eq!(fault.name, "planted_wrong_gradient");
        assert!(fault.max_error > fault.tolerance);
    }

    #[test]
    fn outcome_lines_read_like_a_report() {
        let line = CheckOutcome::judge("sample", 1.5e-6, 1e-4, "ok").to_string();
        assert!(line.contains("sample: PASS"));
        assert!(line.contains("1.500e-6") || line.contains("1.500e-06"));
    }
}
