use candle_core::{Tensor, Var};

use crate::error::Result;

/// R1 applies on 1-based iterations that are multiples of `every`.
pub fn r1_due(iteration: u64, every: u64) -> bool {
    every > 0 && iteration > 0 && iteration % every == 0
}

/// First R1 iteration strictly after `t`.
pub fn next_r1(t: u64, every: u64) -> u64 {
    t + every - t % every
}

fn input_gradient<F>(enc_logit: &F, reals: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = Var::from_tensor(&reals.detach())?;
    let logits = enc_logit(x.as_tensor())?;
    let grads = logits.sum_all()?.backward()?;
    Ok(match grads.get(x.as_tensor()) {
        Some(g) => g.detach(),
        None => reals.zeros_like()?,
    })
}

/// `(γ/2) · E_b ‖∇ₓ enc_logit(x_b)‖²` on the raw encoder logit.
pub fn r1_penalty<F>(enc_logit: F, reals: &Tensor, gamma: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let g = input_gradient(&enc_logit, reals)?;
    let b = reals.dim(0)? as f64;
    let sq = g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok(gamma / 2.0 * sq / b)
}

#[derive(Debug, Clone)]
pub struct R1Result {
    pub value: f64,
    /// Gradient of the penalty for each of `params`, in order.
    pub grads: Vec<Option<Tensor>>,
}

/// Penalty value and its parameter gradient. The autodiff backend has no
/// second-order derivatives, so the mixed term `∂θ ⟨∇ₓD, g⟩` is taken as a
/// central difference along the input-gradient direction `g`:
/// `(γ/B) · [∇θ ΣD(x + εg) − ∇θ ΣD(x − εg)] / 2ε`, with `ε` chosen so that the
/// largest pixel moves by `step`.
pub fn r1_penalty_with_grads<F>(
    enc_logit: F,
    reals: &Tensor,
    gamma: f64,
    params: &[(String, Var)],
    step: f64,
) -> Result<R1Result>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let g = input_gradient(&enc_logit, reals)?;
    let b = reals.dim(0)? as f64;
    let value = gamma / 2.0 * g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? / b;
    let gmax = g.abs()?.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if gmax == 0.0 {
        return Ok(R1Result { value, grads: vec![None; params.len()] });
    }
    let eps = step / gmax;
    let side = |sign: f64| -> Result<Vec<Option<Tensor>>> {
        let x = (reals.detach() + (&g * (sign * eps))?)?;
        let store = enc_logit(&x)?.sum_all()?.backward()?;
        Ok(params.iter().map(|(_, p)| store.get(p.as_tensor()).cloned()).collect())
    };
    let plus = side(1.0)?;
    let minus = side(-1.0)?;
    let scale = gamma / (b * 2.0 * eps);
    let grads = plus
        .into_iter()
        .zip(minus)
        .map(|(p, m)| -> Result<Option<Tensor>> {
            Ok(match (p, m) {
                (Some(p), Some(m)) => Some(((p - m)? * scale)?),
                (Some(p), None) => Some((p * scale)?),
                (None, Some(m)) => Some((m * -scale)?),
                (None, None) => None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(R1Result { value, grads })
}
