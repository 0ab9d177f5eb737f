//! Central finite-difference checks against [`crate::autodiff::backward`].

use crate::autodiff::{grad, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms: `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between the autodiff gradient of scalar `f` at `x` and
/// central differences with step `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let report = finite_diff_check_many(|vs: &[Var]| f(&vs[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Multi-input version of [`finite_diff_check`]; each input is perturbed
/// element by element.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&vars)?;
    let refs: Vec<&Var> = vars.iter().collect();
    let analytic: Vec<Tensor> = grad(&out, &refs, false)?.iter().map(|v| (*v.value()).clone()).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        f(&vs)?.item()
    };

    let mut numeric = Vec::with_capacity(xs.len());
    let mut worst = (0, 0);
    let mut max_rel = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        let mut num = vec![0.0; x.len()];
        for (i, n) in num.iter_mut().enumerate() {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            *n = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[which].data()[i], *n);
            if err > max_rel || err.is_nan() {
                max_rel = if err.is_nan() { f64::INFINITY } else { err };
                worst = (which, i);
            }
        }
        numeric.push(Tensor::from_parts(x.shape().to_vec(), num));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        analytic,
        numeric,
    })
}
