use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

/// Named trainable tensors of one network, ordered by name.
///
/// Initial values come from a caller-supplied seeded generator so that a
/// network is a pure function of its configuration and seed.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self { dtype, device: device.clone(), vars: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: Shape) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: impl Into<Shape>, std: f64, rng: &mut Rng) -> Result<Var> {
        let shape = shape.into();
        let values = (0..shape.elem_count())
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        self.insert(name, values, shape)
    }

    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, bound: f64, rng: &mut Rng) -> Result<Var> {
        let shape = shape.into();
        let values = (0..shape.elem_count())
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Var> {
        let shape = shape.into();
        let values = vec![value; shape.elem_count()];
        self.insert(name, values, shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn named_vec(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach().copy().expect("cpu copy")))
            .collect()
    }

    /// Check that `values` holds every parameter with the right shape.
    pub fn check(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Input(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return shape_err(format!(
                    "parameter `{name}`: stored shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                ));
            }
        }
        Ok(())
    }

    /// Overwrite every parameter from `values`. All names and shapes are
    /// checked before anything is written.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        self.check(values)?;
        for (name, var) in &self.vars {
            var.set(&values[name].to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Bitwise equality of all parameters with `other`.
    pub fn bit_equal(&self, other: &HashMap<String, Tensor>) -> Result<bool> {
        for (name, var) in &self.vars {
            let Some(t) = other.get(name) else { return Ok(false) };
            let a = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let b = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
