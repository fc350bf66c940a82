//! Named parameter storage with seeded initialization.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};

#[derive(Debug, Default)]
struct Inner {
    /// Trainable parameters.
    vars: BTreeMap<String, Var>,
    /// Frozen tensors such as batch-norm statistics.
    buffers: BTreeMap<String, Tensor>,
}

/// Shared registry of every tensor a model owns, keyed by dotted path.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
    tracked: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        ParamStore {
            inner: Arc::default(),
            dtype,
            device,
            tracked: true,
        }
    }

    /// Store whose layers see detached views of the variables: forward passes
    /// record no autograd graph, so intermediates are freed eagerly. The views
    /// share storage, so [`ParamStore::assign`] still reaches them.
    pub fn untracked(dtype: DType, device: Device) -> Self {
        ParamStore {
            tracked: false,
            ..ParamStore::new(dtype, device)
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let g = self.inner.lock().expect("param store poisoned");
        g.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let g = self.inner.lock().expect("param store poisoned");
        g.buffers.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("param store poisoned").vars.get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite a named tensor (trainable or frozen) in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let mut g = self.inner.lock().expect("param store poisoned");
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        if let Some(v) = g.vars.get(name) {
            if v.shape() != value.shape() {
                return Err(ModelError::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    v.shape(),
                    value.shape()
                )));
            }
            v.set(&value)?;
            return Ok(());
        }
        match g.buffers.get_mut(name) {
            Some(b) if b.shape() == value.shape() => {
                *b = value;
                Ok(())
            }
            Some(b) => Err(ModelError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                b.shape(),
                value.shape()
            ))),
            None => Err(ModelError::Shape(format!("unknown parameter {name}"))),
        }
    }

    fn insert_var(&self, name: String, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = if self.tracked {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        };
        let mut g = self.inner.lock().expect("param store poisoned");
        if g.vars.insert(name.clone(), var).is_some() {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        Ok(out)
    }

    /// Current value of a frozen buffer; buffers can be reassigned after
    /// construction, so layers look them up at call time.
    pub fn buffer(&self, name: &str) -> Result<Tensor> {
        let g = self.inner.lock().expect("param store poisoned");
        g.buffers
            .get(name)
            .cloned()
            .ok_or_else(|| ModelError::Shape(format!("unknown buffer {name}")))
    }
}

/// Hierarchical initializer writing into a [`ParamStore`].
pub struct Init<'a> {
    store: &'a ParamStore,
    rng: Arc<Mutex<ChaCha8Rng>>,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            prefix: String::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Init<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng.clone(),
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn from_values(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, self.store.device())?)
    }

    /// Trainable tensor drawn from `U(-bound, bound)`.
    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().expect("init rng poisoned");
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        self.store.insert_var(self.path(name), self.from_values(values, shape)?)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.store
            .insert_var(self.path(name), self.from_values(vec![value; n], shape)?)
    }

    /// Frozen tensor, excluded from optimization but saved in checkpoints.
    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<String> {
        let n: usize = shape.iter().product();
        let t = self.from_values(vec![value; n], shape)?.to_dtype(self.store.dtype())?;
        let key = self.path(name);
        let mut g = self.store.inner.lock().expect("param store poisoned");
        if g.buffers.insert(key.clone(), t).is_some() {
            return Err(ModelError::Config(format!("duplicate buffer {key}")));
        }
        Ok(key)
    }
}
