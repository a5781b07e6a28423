//! Building-block layers.
//!
//! Every layer exposes its trainable tensors through `visit_params` (and
//! persistent non-trainable state through `visit_buffers`) using stable
//! dotted names; the optimizer and the checkpoint format both key off that
//! traversal order, so it must never depend on hash maps or change between
//! runs of the same configuration.

use rand::Rng;

use crate::context::RunCtx;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Element, Tape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_DECAY: f64 = 0.7;

/// Visitor over named tensors; used for optimization and persistence.
pub type TensorVisitor<'v, T> = dyn FnMut(&str, &mut Tensor<T>) -> Result<()> + 'v;

/// Uniform Glorot initialization for a weight of the given fan.
pub fn glorot<T: Element>(
    rng: &mut Prng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(rng.gen_range(-a..a)))
        .collect();
    Tensor::with_node(shape.to_vec(), data, Some(crate::tensor::fresh_node()))
}

/// Affine map over the last axis: a dense layer on flat features, a shared
/// pointwise MLP when the input carries point or neighbor axes. Works on
/// any rank >= 2 input `[.., c_in] -> [.., c_out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Element> {
    pub(crate) w: Tensor<T>,
    pub(crate) b: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Prng) -> Self {
        Self {
            w: glorot(rng, &[c_in, c_out], c_in, c_out),
            b: Some(Tensor::zeros(&[c_out]).as_leaf()),
        }
    }

    /// Pure channel remap; residual projections use this.
    pub fn new_no_bias(c_in: usize, c_out: usize, rng: &mut Prng) -> Self {
        Self {
            w: glorot(rng, &[c_in, c_out], c_in, c_out),
            b: None,
        }
    }

    /// Weights zero, bias set explicitly; the identity-producing final maps
    /// of alignment networks start here.
    pub fn zero_with_bias(c_in: usize, bias: Vec<T>) -> Result<Self> {
        let c_out = bias.len();
        Ok(Self {
            w: Tensor::zeros(&[c_in, c_out]).as_leaf(),
            b: Some(Tensor::new(&[c_out], bias)?.as_leaf()),
        })
    }

    pub fn c_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// Overwrites weights (and bias) with zeros, keeping parameter identity.
    pub fn zero(&mut self) {
        self.w = self
            .w
            .with_data(vec![T::zero(); self.w.len()])
            .expect("same length");
        if let Some(b) = &self.b {
            self.b = Some(b.with_data(vec![T::zero(); b.len()]).expect("same length"));
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.matmul(x, &self.w)?;
        match &self.b {
            Some(b) => tape.add_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        f(&format!("{prefix}.w"), &mut self.w)?;
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.b"), b)?;
        }
        Ok(())
    }
}

/// Batch normalization over the last axis. Training passes normalize with
/// batch statistics (biased variance) and fold them into running estimates;
/// eval passes normalize with the running estimates only, so eval outputs
/// for one item never depend on its batch companions.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Element> {
    pub(crate) gamma: Tensor<T>,
    pub(crate) beta: Tensor<T>,
    pub(crate) running_mean: Tensor<T>,
    pub(crate) running_var: Tensor<T>,
    pub eps: T,
    pub decay: T,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[c], T::one()).as_leaf(),
            beta: Tensor::zeros(&[c]).as_leaf(),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], T::one()),
            eps: T::from_f64(BN_EPS),
            decay: T::from_f64(BN_DECAY),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, ctx: &mut RunCtx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if ctx.is_train() {
            let (y, mean, var) = ctx.tape.batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
            let d = self.decay;
            let keep = T::one() - d;
            let rm: Vec<T> = self
                .running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| d * r + keep * m)
                .collect();
            let rv: Vec<T> = self
                .running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| d * r + keep * v)
                .collect();
            self.running_mean = self.running_mean.with_data(rm)?;
            self.running_var = self.running_var.with_data(rv)?;
            Ok(y)
        } else {
            let shift: Vec<T> = self.running_mean.data().iter().map(|&m| -m).collect();
            let scale: Vec<T> = self
                .running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + self.eps).sqrt())
                .collect();
            let y = ctx.tape.shift_scale(x, &shift, &scale)?;
            let y = ctx.tape.scale_channels(&y, &self.gamma)?;
            ctx.tape.add_bias(&y, &self.beta)
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        f(&format!("{prefix}.gamma"), &mut self.gamma)?;
        f(&format!("{prefix}.beta"), &mut self.beta)
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean)?;
        f(&format!("{prefix}.running_var"), &mut self.running_var)
    }
}

/// Inverted dropout: training scales survivors by 1/keep so eval is the
/// identity. Rate 0 skips the op entirely, keeping such configurations
/// bit-identical to not having the layer.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate })
    }

    pub fn forward<T: Element>(&self, ctx: &mut RunCtx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !ctx.is_train() || self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let inv = T::from_f64(1.0 / keep);
        let rng = ctx.rng()?;
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask = Tensor::new(x.shape(), mask)?;
        ctx.tape.mul(x, &mask)
    }
}

/// Grouped pointwise map: the channel axis is split into `g` equal groups,
/// each with its own affine map, outputs concatenated. Equivalent to a
/// dense layer whose weight is block diagonal.
#[derive(Debug, Clone)]
pub struct GroupedMlp<T: Element> {
    pub(crate) groups: Vec<Linear<T>>,
    in_per_group: usize,
}

impl<T: Element> GroupedMlp<T> {
    pub fn new(c_in: usize, c_out: usize, g: usize, rng: &mut Prng) -> Result<Self> {
        if g == 0 || c_in % g != 0 || c_out % g != 0 {
            return Err(Error::Config(format!(
                "group count {g} must divide both widths ({c_in} -> {c_out})"
            )));
        }
        let groups = (0..g)
            .map(|_| Linear::new(c_in / g, c_out / g, rng))
            .collect();
        Ok(Self {
            groups,
            in_per_group: c_in / g,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let axis = x.rank() - 1;
        let mut outs = Vec::with_capacity(self.groups.len());
        for (gi, lin) in self.groups.iter().enumerate() {
            let part = tape.slice(x, axis, gi * self.in_per_group, self.in_per_group)?;
            outs.push(lin.forward(tape, &part)?);
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        tape.concat(&refs, axis)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        for (gi, lin) in self.groups.iter_mut().enumerate() {
            lin.visit_params(&format!("{prefix}.g{gi}"), f)?;
        }
        Ok(())
    }
}

/// Depthwise pointwise map: stage one gives every point its own `[c_in,
/// c_in]` weight matrix (bias shared across points), stage two mixes
/// channels with an ordinary shared map. Tied to a fixed point count.
#[derive(Debug, Clone)]
pub struct DepthwiseMlp<T: Element> {
    pub(crate) w1: Tensor<T>,
    pub(crate) b1: Tensor<T>,
    pub(crate) point: Linear<T>,
}

impl<T: Element> DepthwiseMlp<T> {
    pub fn new(n_points: usize, c_in: usize, c_out: usize, rng: &mut Prng) -> Self {
        Self {
            w1: glorot(rng, &[n_points, c_in, c_in], c_in, c_in),
            b1: Tensor::zeros(&[c_in]).as_leaf(),
            point: Linear::new(c_in, c_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.w1.shape()[0];
        let c = self.w1.shape()[1];
        if x.rank() != 3 || x.shape()[1] != n || x.shape()[2] != c {
            return Err(Error::BadShape {
                op: "depthwise",
                msg: format!("expected [batch, {n}, {c}]"),
                shape: x.shape().to_vec(),
            });
        }
        let b = x.shape()[0];
        // [b, n, 1, c] x [n, c, c] batches the per-point matrices over b.
        let rows = tape.reshape(x, &[b, n, 1, c])?;
        let mixed = tape.matmul(&rows, &self.w1)?;
        let mixed = tape.reshape(&mixed, &[b, n, c])?;
        let mixed = tape.add_bias(&mixed, &self.b1)?;
        self.point.forward(tape, &mixed)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut TensorVisitor<T>) -> Result<()> {
        f(&format!("{prefix}.w1"), &mut self.w1)?;
        f(&format!("{prefix}.b1"), &mut self.b1)?;
        self.point.visit_params(&format!("{prefix}.point"), f)
    }
}
