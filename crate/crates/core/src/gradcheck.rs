//! Central finite-difference checks of tape gradients, in f64.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `|g_tape - g_fd|_2 / max(|g_tape|_2, |g_fd|_2)`.
    pub relative_error: f64,
    pub n: usize,
    pub grad_norm: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.relative_error <= tol
    }
}

pub const DEFAULT_STEP: f64 = 1e-6;

fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    GradCheck {
        relative_error: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
        n: analytic.len(),
        grad_norm: norm(analytic),
    }
}

fn central(x0: &[f64], h: f64, mut value: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        x[i] = x0[i] + h;
        let up = value(&x)?;
        x[i] = x0[i] - h;
        let down = value(&x)?;
        x[i] = x0[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Checks the gradient of a scalar loss with respect to every parameter.
pub fn check_params<F>(params: &ParamSet<f64>, h: f64, loss: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let l = loss(&tape, &p)?;
        let g = tape.backward(l, false);
        p.grads(&g).iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>()
    };
    let mut work = params.clone();
    let numeric = central(&params.flatten(), h, |flat| {
        work.unflatten(flat);
        let tape = Tape::new();
        let p = work.bind(&tape, false);
        Ok(loss(&tape, &p)?.item())
    })?;
    Ok(compare(&analytic, &numeric))
}

/// Checks the gradient of a scalar loss with respect to an input tensor.
pub fn check_input<F>(x: &Tensor<f64>, h: f64, loss: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let l = loss(&tape, v)?;
        let g = tape.backward(l, false);
        g.tensor(v).unwrap_or_else(|| Tensor::zeros(x.shape())).into_data()
    };
    let numeric = central(x.data(), h, |flat| {
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(x.shape(), flat.to_vec()));
        Ok(loss(&tape, v)?.item())
    })?;
    Ok(compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_has_exact_derivative() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]);
        let r = check_input(&x, DEFAULT_STEP, |_, v| Ok(v.mul(v).mul(v).sum())).unwrap();
        assert!(r.passes(1e-8), "{r:?}");
        assert_eq!(r.n, 3);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // detach hides the dependence from the tape but not from the values
        let x = Tensor::from_vec(&[2], vec![0.3, 0.7]);
        let r = check_input(&x, DEFAULT_STEP, |_, v| Ok(v.square().add(v.detach().square()).sum())).unwrap();
        assert!((r.relative_error - 0.5).abs() < 1e-6, "{r:?}");
    }
}
