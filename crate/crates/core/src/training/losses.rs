use candle_core::Tensor;

use crate::config::TrainConfig;
use crate::data::GivenMask;
use crate::discriminators::CollocationDis;
use crate::error::{shape_err, Result};

/// Mean absolute pixel difference per item, averaged over items and outfits.
pub fn l1_loss(real: &Tensor, synth: &Tensor) -> Result<Tensor> {
    if real.dims() != synth.dims() {
        return shape_err(format!("L1 inputs differ: {:?} vs {:?}", real.dims(), synth.dims()));
    }
    Ok((real - synth)?.abs()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub l1: f64,
    pub vgg: f64,
    pub coll: f64,
}

impl From<&TrainConfig> for Lambdas {
    fn from(t: &TrainConfig) -> Self {
        Self { l1: t.lambda1, vgg: t.lambda2, coll: t.lambda3 }
    }
}

/// The four generator-side loss terms, each a scalar tensor.
#[derive(Debug, Clone)]
pub struct GLossParts {
    pub gan: Tensor,
    pub l1: Tensor,
    pub vgg: Tensor,
    pub coll: Tensor,
}

pub fn total_g_loss(parts: &GLossParts, lambdas: Lambdas) -> Result<Tensor> {
    let weighted = ((&parts.l1 * lambdas.l1)? + (&parts.vgg * lambdas.vgg)?)?;
    Ok(((&parts.gan + weighted)? + (&parts.coll * lambdas.coll)?)?)
}

/// Item embeddings of composited outfits in which the rows of given items are
/// cut from the graph, so the loss reaches the model only through targets.
pub fn mixed_embeddings(
    coll: &CollocationDis,
    outfit: &Tensor,
    given: &[GivenMask],
    categories: &[Vec<usize>],
) -> Result<Tensor> {
    let e = coll.embed_outfits(outfit, categories)?;
    let (b, n, d) = e.dims3()?;
    let keep: Vec<u8> = (0..b * n).map(|k| given[k / n].is_given(k % n) as u8).collect();
    let keep = Tensor::from_vec(keep, (b, n, 1), e.device())?.broadcast_as((b, n, d))?;
    Ok(keep.where_cond(&e.detach(), &e)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminators::CollocationDims;
    use crate::nn::ParamStore;
    use crate::rng::seeded;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;

    fn s(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn val(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    const DEFAULT_WEIGHTS: Lambdas = Lambdas { l1: 100.0, vgg: 10.0, coll: 10.0 };

    #[test]
    fn weighted_sum_example() {
        let parts = GLossParts { gan: s(1.0), l1: s(0.1), vgg: s(0.02), coll: s(0.005) };
        assert!((val(total_g_loss(&parts, DEFAULT_WEIGHTS).unwrap()) - 11.25).abs() < 1e-12);
        let zero = GLossParts { gan: s(0.0), l1: s(0.0), vgg: s(0.0), coll: s(0.0) };
        assert_eq!(val(total_g_loss(&zero, DEFAULT_WEIGHTS).unwrap()), 0.0);
    }

    proptest! {
        #[test]
        fn weighted_sum_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, d in -5.0f64..5.0, k in -3.0f64..3.0) {
            let p = GLossParts { gan: s(a), l1: s(b), vgg: s(c), coll: s(d) };
            let q = GLossParts { gan: s(k * a), l1: s(k * b), vgg: s(k * c), coll: s(k * d) };
            let lp = val(total_g_loss(&p, DEFAULT_WEIGHTS).unwrap());
            let lq = val(total_g_loss(&q, DEFAULT_WEIGHTS).unwrap());
            prop_assert!((lq - k * lp).abs() < 1e-9 * (1.0 + lp.abs()));
        }
    }

    #[test]
    fn l1_examples() {
        let ones = Tensor::ones((2, 4, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert_eq!(val(l1_loss(&ones, &zeros).unwrap()), 1.0);
        assert_eq!(val(l1_loss(&ones, &ones).unwrap()), 0.0);
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let a = ps.uniform("a", (1, 2, 3, 4, 4), 1.0, &mut seeded(1)).unwrap().as_tensor().clone();
        let b = ps.uniform("b", (1, 2, 3, 4, 4), 1.0, &mut seeded(2)).unwrap().as_tensor().clone();
        assert_eq!(val(l1_loss(&a, &b).unwrap()), val(l1_loss(&b, &a).unwrap()));
        assert!(l1_loss(&a, &ones).is_err());
    }

    #[test]
    fn given_rows_carry_no_gradient() {
        let dims = CollocationDims { resolution: 16, n_categories: 4, channels: 2, embed_dim: 3 };
        let coll = CollocationDis::new(dims, DType::F64, &Device::Cpu, &mut seeded(3)).unwrap();
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let x: Var = ps.uniform("x", (1, 4, 3, 16, 16), 1.0, &mut seeded(4)).unwrap();
        let neg = ps.uniform("n", (1, 4, 3), 1.0, &mut seeded(5)).unwrap().as_tensor().clone();
        let given = vec![GivenMask::parse("1,0,1,0").unwrap()];
        let cats = vec![vec![0, 1, 2, 3]];
        let e = mixed_embeddings(&coll, x.as_tensor(), &given, &cats).unwrap();
        let loss = crate::discriminators::collocation_g_loss(&e, &neg, None).unwrap();
        let g = loss.backward().unwrap().get(x.as_tensor()).unwrap().flatten_from(2).unwrap().to_vec3::<f64>().unwrap();
        for (i, item) in g[0].iter().enumerate() {
            let mag: f64 = item.iter().map(|v| v.abs()).sum();
            if given[0].is_given(i) {
                assert_eq!(mag, 0.0);
            } else {
                assert!(mag > 0.0);
            }
        }
    }
}
