//! Seeded parameter storage.
//!
//! Every parameter is initialized from an RNG derived from the store seed and
//! the parameter's full name, so initialization does not depend on
//! construction order and never touches global randomness.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// U(−b, b) with b = 1/√fan_in, the default for conv and linear layers.
    FanIn,
    Normal(f64),
}

#[derive(Debug, Default)]
struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

/// Shared, thread-safe map from parameter names to variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { inner: Arc::default(), seed, dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope { store: self.clone(), prefix: String::new() }
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = rng_for(self.seed, name, 0);
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::FanIn => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let b = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::Normal(std) => (0..n).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            }).collect(),
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn get(&self, name: String, shape: &[usize], init: Init, buffer: bool) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        let map = if buffer { &mut inner.buffers } else { &mut inner.params };
        if let Some(v) = map.get(&name) {
            if v.dims() != shape {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let t = self.init_tensor(&name, shape, init)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        map.insert(name, v);
        Ok(out)
    }

    pub(crate) fn buffer_var(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("param store poisoned").buffers.get(name).cloned()
    }

    /// Trainable variables whose names start with any of `prefixes`
    /// (all variables when `prefixes` is empty).
    pub fn vars(&self, prefixes: &[&str]) -> Vec<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .params
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Trainable variables whose names start with none of `prefixes`.
    pub fn vars_excluding(&self, prefixes: &[&str]) -> Vec<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.params.iter().filter(|(k, _)| !prefixes.iter().any(|p| k.starts_with(p))).map(|(_, v)| v.clone()).collect()
    }

    /// Deep copy of every parameter and buffer value.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named().into_iter().map(|(n, v)| Ok((n, v.as_tensor().copy()?))).collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        for (n, t) in snapshot {
            self.assign(n, t)?;
        }
        Ok(())
    }

    /// Name → variable, trainable parameters first, then buffers.
    pub fn named(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.params.iter().chain(inner.buffers.iter()).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.inner.lock().expect("param store poisoned").params.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.inner.lock().expect("param store poisoned").params.values().map(|v| v.elem_count()).sum()
    }

    /// Hash over every parameter and buffer value, in name order.
    pub fn checksum(&self) -> Result<u64> {
        let mut h = crate::rng::label_hash("params");
        for (name, v) in self.named() {
            h = crate::rng::mix64(h ^ crate::rng::label_hash(&name));
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h = crate::rng::mix64(h ^ x.to_bits());
            }
        }
        Ok(h)
    }

    /// Overwrite a parameter or buffer with new values of the same shape.
    pub fn assign(&self, name: &str, values: &Tensor) -> Result<()> {
        let inner = self.inner.lock().expect("param store poisoned");
        let v = inner
            .params
            .get(name)
            .or_else(|| inner.buffers.get(name))
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if v.dims() != values.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                v.dims(),
                values.dims()
            )));
        }
        v.set(&values.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copy every value from `other` (same architecture, any dtype).
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, v) in other.named() {
            self.assign(&name, v.as_tensor())?;
        }
        Ok(())
    }
}

/// Name prefix into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let prefix =
            if self.prefix.is_empty() { name.as_ref().to_string() } else { format!("{}.{}", self.prefix, name.as_ref()) };
        Scope { store: self.store.clone(), prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(self.full(name), shape, init, false)
    }

    /// Non-trainable state (running statistics).
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<(String, Tensor)> {
        let full = self.full(name);
        let t = self.store.get(full.clone(), shape, init, true)?;
        Ok((full, t))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
