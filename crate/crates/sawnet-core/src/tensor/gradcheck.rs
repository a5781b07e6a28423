//! Numeric differentiation for validating tape gradients.
//!
//! Checks run in f64. A central difference at step h has truncation error
//! O(h^2) but is garbage if the interval [x-h, x+h] crosses a relu or max
//! kink, so [`GradCheck`] retries failing elements at smaller steps before
//! declaring a mismatch: shrinking the step moves the interval off the kink
//! whenever the draw was merely unlucky, while a genuinely wrong gradient
//! keeps failing at every step.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`, one element at
/// a time. `f` must be pure: same input, same output.
pub fn finite_diff<F>(mut f: F, x: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&x.with_data(plus)?)?;
        let fm = f(&x.with_data(minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at element {i}, step {step}"
            )));
        }
        *g = (fp - fm) / (2.0 * step);
    }
    Tensor::new(x.shape(), grad)
}

/// Relative disagreement between two values, 0 when both are equal
/// (including both zero).
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Worst per-element [`rel_err`] between two same-shaped tensors.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Tolerances and step schedule for comparing analytic gradients against
/// central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Steps to try, in order; an element passes if any step agrees.
    pub steps: Vec<f64>,
    /// Relative tolerance against max(|analytic|, |numeric|).
    pub rel_tol: f64,
    /// Absolute tolerance is `abs_tol * max(1, |f(x)|)`; it absorbs
    /// cancellation noise when the true derivative is near zero.
    pub abs_tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            steps: vec![1e-5, 1e-6, 1e-7],
            rel_tol: 1e-4,
            abs_tol: 1e-8,
        }
    }
}

impl GradCheck {
    fn agree(&self, ad: f64, fd: f64, floor: f64) -> bool {
        let diff = (ad - fd).abs();
        diff <= self.rel_tol * ad.abs().max(fd.abs()) || diff <= floor
    }

    /// Verifies `analytic` against central differences of `f` at `x`.
    /// Elements are independent, so they run in parallel; `f` is called
    /// with tensors that share `x`'s node id.
    pub fn check<F>(&self, f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, label: &str) -> Result<()>
    where
        F: Fn(&Tensor<f64>) -> Result<f64> + Sync,
    {
        if x.shape() != analytic.shape() {
            return Err(Error::Contract(format!(
                "{label}: analytic gradient shape {:?} does not match input shape {:?}",
                analytic.shape(),
                x.shape()
            )));
        }
        let f0 = f(x)?;
        let floor = self.abs_tol * f0.abs().max(1.0);
        let base = x.to_vec();

        let probe = |i: usize| -> Result<Option<String>> {
            let ad = analytic.data()[i];
            let mut last = f64::NAN;
            for &h in &self.steps {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let fp = f(&x.with_data(plus)?)?;
                let fm = f(&x.with_data(minus)?)?;
                last = (fp - fm) / (2.0 * h);
                if self.agree(ad, last, floor) {
                    return Ok(None);
                }
            }
            Ok(Some(format!(
                "{label}[{i}]: analytic {ad:.8e} vs numeric {last:.8e}"
            )))
        };

        let failures: Vec<String> = if x.len() >= 8 {
            (0..x.len())
                .into_par_iter()
                .map(probe)
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect()
        } else {
            let mut out = Vec::new();
            for i in 0..x.len() {
                if let Some(msg) = probe(i)? {
                    out.push(msg);
                }
            }
            out
        };

        if failures.is_empty() {
            Ok(())
        } else {
            Err(Error::Verification(format!(
                "{} of {} gradient elements disagree; first: {}",
                failures.len(),
                x.len(),
                failures[0]
            )))
        }
    }

    /// Worst element's best-step relative discrepancy, for reporting.
    /// Elements inside the absolute floor contribute zero, so
    /// `measure(..) <= rel_tol` iff `check(..)` passes.
    pub fn measure<F>(&self, f: F, x: &Tensor<f64>, analytic: &Tensor<f64>) -> Result<f64>
    where
        F: Fn(&Tensor<f64>) -> Result<f64> + Sync,
    {
        if x.shape() != analytic.shape() {
            return Err(Error::Contract(format!(
                "measure: analytic gradient shape {:?} does not match input shape {:?}",
                analytic.shape(),
                x.shape()
            )));
        }
        let f0 = f(x)?;
        let floor = self.abs_tol * f0.abs().max(1.0);
        let base = x.to_vec();

        let probe = |i: usize| -> Result<f64> {
            let ad = analytic.data()[i];
            let mut best = f64::INFINITY;
            for &h in &self.steps {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let fp = f(&x.with_data(plus)?)?;
                let fm = f(&x.with_data(minus)?)?;
                let fd = (fp - fm) / (2.0 * h);
                let diff = (ad - fd).abs();
                if diff <= floor {
                    return Ok(0.0);
                }
                best = best.min(diff / ad.abs().max(fd.abs()).max(f64::MIN_POSITIVE));
            }
            Ok(best)
        };

        let errs: Vec<f64> = if x.len() >= 8 {
            (0..x.len()).into_par_iter().map(probe).collect::<Result<Vec<_>>>()?
        } else {
            let mut out = Vec::new();
            for i in 0..x.len() {
                out.push(probe(i)?);
            }
            out
        };
        Ok(errs.into_iter().fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn quadratic_matches_analytic() {
        let x = Tensor::param(&[4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let f = |t: &Tensor<f64>| -> Result<f64> {
            let mut tape = Tape::inference();
            let sq = tape.mul(t, t)?;
            tape.sum_all(&sq)?.item()
        };
        let mut tape = Tape::new();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss, &[x.node().unwrap()]).unwrap();
        GradCheck::default()
            .check(f, &x, grads.get(x.node().unwrap()).unwrap(), "quadratic")
            .unwrap();
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::param(&[3], vec![0.5, 1.5, -0.5]).unwrap();
        let f = |t: &Tensor<f64>| -> Result<f64> {
            let mut tape = Tape::inference();
            let sq = tape.mul(t, t)?;
            tape.sum_all(&sq)?.item()
        };
        let wrong = Tensor::new(&[3], vec![1.1, 3.0, -1.0]).unwrap();
        let err = GradCheck::default().check(f, &x, &wrong, "wrong").unwrap_err();
        assert!(matches!(err, Error::Verification(_)));
    }

    #[test]
    fn relu_kink_falls_back_to_smaller_steps() {
        // 2e-6 sits inside the default first step (1e-5) but outside the
        // second (1e-6), so this passes only via the fallback chain.
        let x = Tensor::param(&[2], vec![2e-6, 1.0]).unwrap();
        let f = |t: &Tensor<f64>| -> Result<f64> {
            let mut tape = Tape::inference();
            let r = tape.relu(t)?;
            tape.sum_all(&r)?.item()
        };
        let mut tape = Tape::new();
        let r = tape.relu(&x).unwrap();
        let loss = tape.sum_all(&r).unwrap();
        let grads = tape.backward(&loss, &[x.node().unwrap()]).unwrap();
        GradCheck::default()
            .check(f, &x, grads.get(x.node().unwrap()).unwrap(), "relu")
            .unwrap();
    }

    #[test]
    fn finite_diff_of_linear_is_exact_to_tolerance() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = |t: &Tensor<f64>| -> Result<f64> {
            let mut tape = Tape::inference();
            let p = tape.mul(t, &w)?;
            tape.sum_all(&p)?.item()
        };
        let fd = finite_diff(f, &x, 1e-5).unwrap();
        assert!(max_rel_err(&fd, &w) < 1e-9);
    }
}
