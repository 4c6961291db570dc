use candle_core::{Module, Tensor, Var, D};

use super::ParamStore;
use crate::error::Result;
use crate::rng::Rng;

pub const LRELU_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::leaky_relu(x, LRELU_SLOPE)
}

/// `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> candle_core::Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}

/// Linear layer with equalized learning rate: weights are stored with unit
/// variance and rescaled by `1/sqrt(fan_in)` on every forward pass.
#[derive(Debug, Clone)]
pub struct EqLinear {
    weight: Var,
    bias: Var,
    scale: f64,
}

impl EqLinear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias_init: f64, rng: &mut Rng) -> Result<Self> {
        let weight = ps.normal(&format!("{name}.weight"), (d_out, d_in), 1.0, rng)?;
        let bias = ps.constant(&format!("{name}.bias"), d_out, bias_init)?;
        Ok(Self { weight, bias, scale: 1.0 / (d_in as f64).sqrt() })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for EqLinear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = (self.weight.as_tensor() * self.scale)?;
        x.broadcast_matmul(&w.t()?)?.broadcast_add(self.bias.as_tensor())
    }
}

/// Square-kernel convolution with equalized learning rate and "same" padding.
#[derive(Debug, Clone)]
pub struct EqConv2d {
    weight: Var,
    bias: Var,
    scale: f64,
    stride: usize,
    padding: usize,
}

impl EqConv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = ps.normal(&format!("{name}.weight"), (c_out, c_in, kernel, kernel), 1.0, rng)?;
        let bias = ps.constant(&format!("{name}.bias"), c_out, 0.0)?;
        Ok(Self {
            weight,
            bias,
            scale: 1.0 / ((c_in * kernel * kernel) as f64).sqrt(),
            stride,
            padding: kernel / 2,
        })
    }
}

impl Module for EqConv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = (self.weight.as_tensor() * self.scale)?;
        let y = x.conv2d(&w, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use candle_core::{DType, Device};

    #[test]
    fn conv_shapes() {
        let mut ps = ParamStore::new(DType::F32, &Device::Cpu);
        let mut rng = seeded(0);
        let down = EqConv2d::new(&mut ps, "d", 3, 5, 3, 2, &mut rng).unwrap();
        let same = EqConv2d::new(&mut ps, "s", 3, 5, 3, 1, &mut rng).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(down.forward(&x).unwrap().dims(), &[2, 5, 8, 8]);
        assert_eq!(same.forward(&x).unwrap().dims(), &[2, 5, 16, 16]);
    }

    #[test]
    fn linear_matches_manual() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let lin = EqLinear::new(&mut ps, "l", 4, 2, 0.5, &mut seeded(1)).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = lin.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let w = ps.get("l.weight").unwrap().to_vec2::<f64>().unwrap();
        for o in 0..2 {
            let expect: f64 = (0..4).map(|i| w[o][i] * (i + 1) as f64).sum::<f64>() / 2.0 + 0.5;
            assert!((y[0][o] - expect).abs() < 1e-12);
        }
    }
}
