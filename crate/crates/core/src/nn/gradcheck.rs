//! Central finite-difference checks of autodiff gradients.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;

use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub labels: Vec<String>,
}

impl GradCheck {
    /// `||a - n|| / max(||a||, ||n||)` over all checked entries.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).powi(2)).sum();
        let na: f64 = self.analytic.iter().map(|a| a * a).sum();
        let nn: f64 = self.numeric.iter().map(|a| a * a).sum();
        let denom = na.max(nn).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            diff.sqrt() / denom
        }
    }

    pub fn worst(&self) -> Option<(String, f64, f64)> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .zip(&self.labels)
            .max_by(|((&a1, &n1), _), ((&a2, &n2), _)| (a1 - n1).abs().total_cmp(&(a2 - n2).abs()))
            .map(|((a, n), l)| (l.clone(), *a, *n))
    }
}

fn perturb(var: &Var, index: usize, delta: f64) -> Result<Tensor> {
    let original = var.as_tensor().detach().copy()?;
    let mut flat = original.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    flat[index] += delta;
    let t = Tensor::from_vec(flat, original.shape(), original.device())?.to_dtype(original.dtype())?;
    var.set(&t)?;
    Ok(original)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compare `grad` (analytic gradients aligned with `vars`) against central
/// differences of `loss` on up to `per_tensor` random entries of every var.
pub fn check_vars<F>(
    loss: F,
    vars: &[(String, Var)],
    grads: &[Option<Tensor>],
    per_tensor: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    let mut out = GradCheck { analytic: vec![], numeric: vec![], labels: vec![] };
    for ((name, var), grad) in vars.iter().zip(grads) {
        let n = var.elem_count();
        let g = match grad {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        for idx in sample(rng, n, per_tensor.min(n)) {
            let original = perturb(var, idx, step)?;
            let plus = scalar(&loss()?)?;
            var.set(&original)?;
            perturb(var, idx, -step)?;
            let minus = scalar(&loss()?)?;
            var.set(&original)?;
            out.analytic.push(g[idx]);
            out.numeric.push((plus - minus) / (2.0 * step));
            out.labels.push(format!("{name}[{idx}]"));
        }
    }
    Ok(out)
}

/// Convenience wrapper: runs backward on `loss()` first.
pub fn check<F>(loss: F, vars: &[(String, Var)], per_tensor: usize, step: f64, rng: &mut Rng) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    let l = loss()?;
    let store = l.backward()?;
    let grads: Vec<Option<Tensor>> = vars.iter().map(|(_, v)| store.get(v.as_tensor()).cloned()).collect();
    check_vars(loss, vars, &grads, per_tensor, step, rng)
}
