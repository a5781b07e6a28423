//! The two residual branches and their per-layer combination.
//!
//! A layer's global branch re-embeds each point independently; its local
//! branch pools edge features over the point's k nearest neighbors in the
//! current feature space. Both end with an identity-style addition of a
//! skip tensor (projected by a bias-free pointwise map when widths differ),
//! and the layer output is the channel concatenation [G : L].

use crate::context::RunCtx;
use crate::error::{Error, Result};
use crate::graph::{edge_features, knn, neighbor_max};
use crate::layers::{BatchNorm, Linear, TensorVisitor};
use crate::rng::Prng;
use crate::tensor::{Element, Tape, Tensor};

/// Skip handling shared by both branches: disabled, direct addition, or
/// addition through a width-matching projection.
#[derive(Debug, Clone)]
pub(crate) enum SkipPath<T: Element> {
    None,
    Identity,
    Projected(Linear<T>),
}

impl<T: Element> SkipPath<T> {
    fn new(skip_width: Option<usize>, m: usize, rng: &mut Prng) -> Self {
        match skip_width {
            None => SkipPath::None,
            Some(w) if w == m => SkipPath::Identity,
            Some(w) => SkipPath::Projected(Linear::new_no_bias(w, m, rng)),
        }
    }

    fn apply(
        &self,
        tape: &mut Tape<T>,
        skip: Option<&Tensor<T>>,
        m: usize,
    ) -> Result<Option<Tensor<T>>> {
        match self {
            SkipPath::None => Ok(None),
            SkipPath::Identity => {
                let s = skip.ok_or_else(|| {
                    Error::Contract("block built with a residual path but no skip given".into())
                })?;
                if s.channels() != m {
                    return Err(Error::Config(format!(
                        "skip has {} channels but the block needs {m} and has no projection",
                        s.channels()
                    )));
                }
                Ok(Some(s.clone()))
            }
            SkipPath::Projected(p) => {
                let s = skip.ok_or_else(|| {
                    Error::Contract("block built with a residual path but no skip given".into())
                })?;
                Ok(Some(p.forward(tape, s)?))
            }
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        if let SkipPath::Projected(p) = self {
            p.visit_params(&format!("{prefix}.proj"), f)?;
        }
        Ok(())
    }
}

/// Global branch: two pointwise stages, residual add, optional post-add
/// activation. `zero_second_stage` exists for the degeneracy checks.
#[derive(Debug, Clone)]
pub struct SharedMlpBlock<T: Element> {
    pub(crate) h1: Linear<T>,
    pub(crate) bn1: BatchNorm<T>,
    pub(crate) h2: Linear<T>,
    pub(crate) bn2: BatchNorm<T>,
    pub(crate) skip: SkipPath<T>,
    post_add_activation: bool,
    m: usize,
}

impl<T: Element> SharedMlpBlock<T> {
    pub fn new(
        c_in: usize,
        m: usize,
        skip_width: Option<usize>,
        post_add_activation: bool,
        rng: &mut Prng,
    ) -> Self {
        Self {
            h1: Linear::new(c_in, m, rng),
            bn1: BatchNorm::new(m),
            h2: Linear::new(m, m, rng),
            bn2: BatchNorm::new(m),
            skip: SkipPath::new(skip_width, m, rng),
            post_add_activation,
            m,
        }
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn forward(
        &mut self,
        ctx: &mut RunCtx<'_, T>,
        x: &Tensor<T>,
        skip: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let s1 = self.h1.forward(ctx.tape, x)?;
        let s1 = self.bn1.forward(ctx, &s1)?;
        let s1 = ctx.tape.relu(&s1)?;
        let s2 = self.h2.forward(ctx.tape, &s1)?;
        let s2 = self.bn2.forward(ctx, &s2)?;
        let summed = match self.skip.apply(ctx.tape, skip, self.m)? {
            Some(p) => ctx.tape.add(&s2, &p)?,
            None => s2,
        };
        if self.post_add_activation {
            ctx.tape.relu(&summed)
        } else {
            Ok(summed)
        }
    }

    pub fn zero_second_stage(&mut self) {
        self.h2.zero();
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        self.h1.visit_params(&format!("{prefix}.h1"), f)?;
        self.bn1.visit_params(&format!("{prefix}.bn1"), f)?;
        self.h2.visit_params(&format!("{prefix}.h2"), f)?;
        self.bn2.visit_params(&format!("{prefix}.bn2"), f)?;
        self.skip.visit_params(prefix, f)
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f)?;
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f)
    }
}

/// Local branch: kNN graph in the branch's input space, edge features
/// through two pointwise stages, max over neighbors, then the residual add.
#[derive(Debug, Clone)]
pub struct EdgeConvBlock<T: Element> {
    pub(crate) e1: Linear<T>,
    pub(crate) bn1: BatchNorm<T>,
    pub(crate) e2: Linear<T>,
    pub(crate) bn2: BatchNorm<T>,
    pub(crate) skip: SkipPath<T>,
    post_add_activation: bool,
    k: usize,
    m: usize,
}

impl<T: Element> EdgeConvBlock<T> {
    pub fn new(
        c_in: usize,
        m: usize,
        k: usize,
        skip_width: Option<usize>,
        post_add_activation: bool,
        rng: &mut Prng,
    ) -> Self {
        Self {
            e1: Linear::new(2 * c_in, m, rng),
            bn1: BatchNorm::new(m),
            e2: Linear::new(m, m, rng),
            bn2: BatchNorm::new(m),
            skip: SkipPath::new(skip_width, m, rng),
            post_add_activation,
            k,
            m,
        }
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn forward(
        &mut self,
        ctx: &mut RunCtx<'_, T>,
        x: &Tensor<T>,
        skip: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let k = self.k;
        let graph = ctx.next_graph(|| knn(x, k))?;
        let ef = edge_features(ctx.tape, x, &graph)?;
        let e1 = self.e1.forward(ctx.tape, &ef)?;
        let e1 = self.bn1.forward(ctx, &e1)?;
        let e1 = ctx.tape.relu(&e1)?;
        let e2 = self.e2.forward(ctx.tape, &e1)?;
        let e2 = self.bn2.forward(ctx, &e2)?;
        let pooled = neighbor_max(ctx.tape, &e2)?;
        let summed = match self.skip.apply(ctx.tape, skip, self.m)? {
            Some(p) => ctx.tape.add(&pooled, &p)?,
            None => pooled,
        };
        if self.post_add_activation {
            ctx.tape.relu(&summed)
        } else {
            Ok(summed)
        }
    }

    pub fn zero_second_stage(&mut self) {
        self.e2.zero();
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        self.e1.visit_params(&format!("{prefix}.e1"), f)?;
        self.bn1.visit_params(&format!("{prefix}.bn1"), f)?;
        self.e2.visit_params(&format!("{prefix}.e2"), f)?;
        self.bn2.visit_params(&format!("{prefix}.bn2"), f)?;
        self.skip.visit_params(prefix, f)
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f)?;
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f)
    }
}

/// One full layer: both branches on (possibly different slices of) the
/// layer input, output `[G : L]` of width 2M. Kept branch outputs feed the
/// next layer's skips.
#[derive(Debug, Clone)]
pub struct SawLayer<T: Element> {
    pub(crate) global: SharedMlpBlock<T>,
    pub(crate) local: EdgeConvBlock<T>,
}

/// A layer's branch outputs: the concatenation feeds forward, the halves
/// become the next layer's skips.
pub struct SawLayerOut<T: Element> {
    pub combined: Tensor<T>,
    pub g: Tensor<T>,
    pub l: Tensor<T>,
}

impl<T: Element> SawLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        shared_in: usize,
        edge_in: usize,
        m: usize,
        k: usize,
        g_skip_width: Option<usize>,
        l_skip_width: Option<usize>,
        post_add_activation: bool,
        rng: &mut Prng,
    ) -> Self {
        Self {
            global: SharedMlpBlock::new(shared_in, m, g_skip_width, post_add_activation, rng),
            local: EdgeConvBlock::new(edge_in, m, k, l_skip_width, post_add_activation, rng),
        }
    }

    pub fn out_width(&self) -> usize {
        2 * self.global.width()
    }

    /// `x_shared`/`x_edge` are the branch inputs (identical except under a
    /// channel split on the first layer).
    pub fn forward(
        &mut self,
        ctx: &mut RunCtx<'_, T>,
        x_shared: &Tensor<T>,
        x_edge: &Tensor<T>,
        g_skip: Option<&Tensor<T>>,
        l_skip: Option<&Tensor<T>>,
    ) -> Result<SawLayerOut<T>> {
        let g = self.global.forward(ctx, x_shared, g_skip)?;
        let l = self.local.forward(ctx, x_edge, l_skip)?;
        let combined = ctx.tape.concat(&[&g, &l], x_shared.rank() - 1)?;
        Ok(SawLayerOut { combined, g, l })
    }

    pub fn zero_second_stages(&mut self) {
        self.global.zero_second_stage();
        self.local.zero_second_stage();
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        self.global.visit_params(&format!("{prefix}.global"), f)?;
        self.local.visit_params(&format!("{prefix}.local"), f)
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        self.global.visit_buffers(&format!("{prefix}.global"), f)?;
        self.local.visit_buffers(&format!("{prefix}.local"), f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn rng() -> Prng {
        rng_from(7, &[3])
    }

    fn cloud(b: usize, n: usize, c: usize) -> Tensor<f32> {
        Tensor::from_fn(&[b, n, c], |i| ((i * 131 % 97) as f32 - 48.0) * 0.027).as_leaf()
    }

    #[test]
    fn shared_block_output_shape() {
        let mut blk = SharedMlpBlock::<f32>::new(3, 8, Some(3), true, &mut rng());
        let x = cloud(2, 5, 3);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let g = blk.forward(&mut ctx, &x, Some(&x)).unwrap();
        assert_eq!(g.shape(), &[2, 5, 8]);
    }

    #[test]
    fn zeroed_second_stage_passes_skip_through() {
        // same-width skip, no projection: G must equal relu(skip) exactly
        let mut blk = SharedMlpBlock::<f32>::new(8, 8, Some(8), true, &mut rng());
        blk.zero_second_stage();
        let x = cloud(2, 5, 8);
        let skip = cloud(2, 5, 8);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let g = blk.forward(&mut ctx, &x, Some(&skip)).unwrap();
        let want = {
            let mut t = Tape::inference();
            t.relu(&skip).unwrap()
        };
        assert!(g.bit_eq(&want));
    }

    #[test]
    fn missing_projection_is_a_config_error() {
        // block built expecting an 8-wide skip, then handed a 3-wide one
        let mut blk = SharedMlpBlock::<f32>::new(8, 8, Some(8), true, &mut rng());
        let x = cloud(1, 4, 8);
        let skip = cloud(1, 4, 3);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let err = blk.forward(&mut ctx, &x, Some(&skip)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn permuting_points_permutes_shared_block_output() {
        let mut blk = SharedMlpBlock::<f32>::new(3, 6, Some(3), true, &mut rng());
        let x = cloud(1, 5, 3);
        let perm = [3usize, 0, 4, 1, 2];
        let xd = x.data();
        let permuted: Vec<f32> = perm
            .iter()
            .flat_map(|&p| xd[p * 3..(p + 1) * 3].to_vec())
            .collect();
        let xp = Tensor::new(&[1, 5, 3], permuted).unwrap();

        let run = |input: &Tensor<f32>, blk: &mut SharedMlpBlock<f32>| {
            let mut tape = Tape::inference();
            let mut ctx = RunCtx::eval(&mut tape);
            blk.forward(&mut ctx, input, Some(input)).unwrap()
        };
        let y = run(&x, &mut blk);
        let yp = run(&xp, &mut blk);
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(
                &yp.data()[i * 6..(i + 1) * 6],
                &y.data()[p * 6..(p + 1) * 6],
                "row {i}"
            );
        }
    }

    #[test]
    fn edge_block_identical_points_give_constant_output() {
        let mut blk = EdgeConvBlock::<f32>::new(3, 6, 2, None, true, &mut rng());
        let x = Tensor::<f32>::filled(&[1, 5, 3], 0.25).as_leaf();
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let l = blk.forward(&mut ctx, &x, None).unwrap();
        let d = l.data();
        for n in 1..5 {
            assert_eq!(&d[n * 6..(n + 1) * 6], &d[..6], "point {n}");
        }
    }

    #[test]
    fn edge_block_needs_more_points_than_k() {
        let mut blk = EdgeConvBlock::<f32>::new(3, 6, 8, None, true, &mut rng());
        let x = cloud(1, 5, 3);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let err = blk.forward(&mut ctx, &x, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn saw_layer_concatenates_g_then_l() {
        let mut layer = SawLayer::<f32>::new(3, 3, 8, 3, Some(3), Some(3), true, &mut rng());
        let x = cloud(2, 6, 3);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let out = layer.forward(&mut ctx, &x, &x, Some(&x), Some(&x)).unwrap();
        assert_eq!(out.combined.shape(), &[2, 6, 16]);
        assert_eq!(&out.combined.data()[..8], &out.g.data()[..8]);
        assert_eq!(&out.combined.data()[8..16], &out.l.data()[..8]);
    }

    #[test]
    fn residual_degeneracy_hits_projected_skips_bit_exactly() {
        let mut layer = SawLayer::<f32>::new(3, 3, 8, 3, Some(3), Some(3), true, &mut rng());
        layer.zero_second_stages();
        let x = cloud(2, 6, 3);
        let g_skip = cloud(2, 6, 3);
        let l_skip = cloud(2, 6, 3);
        let mut tape = Tape::inference();
        let out = {
            let mut ctx = RunCtx::eval(&mut tape);
            layer
                .forward(&mut ctx, &x, &x, Some(&g_skip), Some(&l_skip))
                .unwrap()
        };
        // expected: [relu(P_g(g_skip)) : relu(P_l(l_skip))]
        let want = {
            let mut t = Tape::inference();
            let pg = match &layer.global.skip {
                SkipPath::Projected(p) => p.forward(&mut t, &g_skip).unwrap(),
                _ => unreachable!("3 != 8 forces a projection"),
            };
            let pl = match &layer.local.skip {
                SkipPath::Projected(p) => p.forward(&mut t, &l_skip).unwrap(),
                _ => unreachable!(),
            };
            let pg = t.relu(&pg).unwrap();
            let pl = t.relu(&pl).unwrap();
            t.concat(&[&pg, &pl], 2).unwrap()
        };
        assert!(out.combined.bit_eq(&want));
    }

    #[test]
    fn post_add_activation_off_keeps_negative_values() {
        let mut blk = SharedMlpBlock::<f32>::new(8, 8, Some(8), false, &mut rng());
        blk.zero_second_stage();
        let x = cloud(2, 5, 8);
        let mut skip_data = vec![0.0f32; 2 * 5 * 8];
        skip_data[0] = -3.0;
        let skip = Tensor::new(&[2, 5, 8], skip_data).unwrap();
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let g = blk.forward(&mut ctx, &x, Some(&skip)).unwrap();
        assert_eq!(g.data()[0], -3.0);
    }
}
