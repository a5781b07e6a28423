//! Input alignment: a small trunk of the same layers predicts a 3x3
//! transform per cloud, applied to the raw coordinates before the main
//! network. The final map starts as zero weights with an identity bias, so
//! an untrained transformer is exactly the identity.

use crate::context::RunCtx;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Linear, TensorVisitor};
use crate::rng::Prng;
use crate::sawnet::blocks::SawLayer;
use crate::sawnet::config::TransformerConfig;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct TransformerNet<T: Element> {
    trunk: Vec<SawLayer<T>>,
    hidden: Vec<(Linear<T>, BatchNorm<T>)>,
    final_map: Linear<T>,
}

impl<T: Element> TransformerNet<T> {
    pub fn new(cfg: &TransformerConfig, rng: &mut Prng) -> Result<Self> {
        if cfg.widths.is_empty() {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        let mut trunk = Vec::with_capacity(cfg.widths.len());
        let mut c_in = 3usize;
        let mut skip_w = 3usize;
        for &m in &cfg.widths {
            trunk.push(SawLayer::new(
                c_in,
                c_in,
                m,
                cfg.k,
                Some(skip_w),
                Some(skip_w),
                true,
                rng,
            ));
            c_in = 2 * m;
            skip_w = m;
        }
        let mut hidden = Vec::with_capacity(cfg.head.len());
        let mut w_in = c_in;
        for &w in &cfg.head {
            hidden.push((Linear::new(w_in, w, rng), BatchNorm::new(w)));
            w_in = w;
        }
        // identity bias: row-major flattening of the 3x3 identity
        let eye: Vec<T> = (0..9)
            .map(|i| if i % 4 == 0 { T::one() } else { T::zero() })
            .collect();
        Ok(Self {
            trunk,
            hidden,
            final_map: Linear::zero_with_bias(w_in, eye)?,
        })
    }

    /// `points` is `[batch, n, 3]`; returns the aligned cloud and the
    /// predicted `[batch, 3, 3]` transform.
    pub fn forward(
        &mut self,
        ctx: &mut RunCtx<'_, T>,
        points: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if points.rank() != 3 || points.shape()[2] != 3 {
            return Err(Error::BadShape {
                op: "transformer",
                msg: "expected [batch, points, 3]".into(),
                shape: points.shape().to_vec(),
            });
        }
        let b = points.shape()[0];
        let mut x = points.clone();
        let mut g_skip = points.clone();
        let mut l_skip = points.clone();
        for layer in &mut self.trunk {
            let out = layer.forward(ctx, &x, &x, Some(&g_skip), Some(&l_skip))?;
            x = out.combined;
            g_skip = out.g;
            l_skip = out.l;
        }
        let (mut h, _) = ctx.tape.reduce_max(&x, 1)?;
        for (lin, bn) in &mut self.hidden {
            let z = lin.forward(ctx.tape, &h)?;
            let z = bn.forward(ctx, &z)?;
            h = ctx.tape.relu(&z)?;
        }
        let t9 = self.final_map.forward(ctx.tape, &h)?;
        let t = ctx.tape.reshape(&t9, &[b, 3, 3])?;
        let aligned = ctx.tape.matmul(points, &t)?;
        Ok((aligned, t))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.layer{i}"), f)?;
        }
        for (i, (lin, bn)) in self.hidden.iter_mut().enumerate() {
            lin.visit_params(&format!("{prefix}.head{i}"), f)?;
            bn.visit_params(&format!("{prefix}.head{i}.bn"), f)?;
        }
        self.final_map.visit_params(&format!("{prefix}.final"), f)
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            layer.visit_buffers(&format!("{prefix}.layer{i}"), f)?;
        }
        for (i, (_, bn)) in self.hidden.iter_mut().enumerate() {
            bn.visit_buffers(&format!("{prefix}.head{i}.bn"), f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::Tape;

    fn small_cfg() -> TransformerConfig {
        TransformerConfig {
            widths: vec![4, 6],
            head: vec![8],
            k: 3,
        }
    }

    #[test]
    fn identity_at_initialization() {
        let mut rng = rng_from(11, &[0]);
        let mut net = TransformerNet::<f32>::new(&small_cfg(), &mut rng).unwrap();
        let points =
            Tensor::from_fn(&[2, 7, 3], |i| ((i * 61 % 23) as f32 - 11.0) * 0.09).as_leaf();
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let (aligned, t) = net.forward(&mut ctx, &points).unwrap();
        assert!(aligned.bit_eq(&points), "alignment must start as identity");
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_eq!(t.data()[b * 9 + i * 3 + j], want);
                }
            }
        }
    }

    #[test]
    fn transform_shape_and_application() {
        let mut rng = rng_from(11, &[0]);
        let mut net = TransformerNet::<f32>::new(&small_cfg(), &mut rng).unwrap();
        // push the final map away from identity and confirm aligned = points * t
        net.final_map = Linear::new(8, 9, &mut rng);
        let points = Tensor::from_fn(&[1, 6, 3], |i| (i as f32).sin()).as_leaf();
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        let (aligned, t) = net.forward(&mut ctx, &points).unwrap();
        assert_eq!(t.shape(), &[1, 3, 3]);
        assert_eq!(aligned.shape(), &[1, 6, 3]);
        let td = t.data();
        let pd = points.data();
        for n in 0..6 {
            for j in 0..3 {
                let want: f32 = (0..3).map(|i| pd[n * 3 + i] * td[i * 3 + j]).sum();
                let got = aligned.data()[n * 3 + j];
                assert!((want - got).abs() < 1e-5, "point {n} col {j}");
            }
        }
    }

    #[test]
    fn rejects_non_xyz_input() {
        let mut rng = rng_from(11, &[0]);
        let mut net = TransformerNet::<f32>::new(&small_cfg(), &mut rng).unwrap();
        let bad = Tensor::<f32>::zeros(&[2, 7, 5]);
        let mut tape = Tape::inference();
        let mut ctx = RunCtx::eval(&mut tape);
        assert!(net.forward(&mut ctx, &bad).is_err());
    }
}
