use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `gain / sqrt(fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
    Normal(f64),
}

struct Param {
    var: Var,
    frozen: bool,
}

struct Inner {
    params: BTreeMap<String, Param>,
}

/// Named trainable arrays of one model, with deterministic initialization.
///
/// Initial values depend only on `(seed, full parameter name)`, so adding a
/// layer never perturbs the initialization of the others.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                params: BTreeMap::new(),
            })),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().params.get(name).map(|p| p.var.clone())
    }

    pub fn set_frozen(&self, frozen: bool) {
        for p in self.inner.lock().unwrap().params.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.inner.lock().unwrap().params.get(name).map(|p| p.frozen)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.inner
            .lock()
            .unwrap()
            .params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.clone()))
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let inner = self.inner.lock().unwrap();
        inner.params.iter().filter(|(_, p)| !p.frozen).map(|(k, _)| k.clone()).collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        let inner = self.inner.lock().unwrap();
        inner.params.iter().filter(|(_, p)| p.frozen).map(|(k, _)| k.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.inner.lock().unwrap().params.values().map(|p| p.var.elem_count()).sum()
    }

    /// SHA-256 over every parameter's name, shape and little-endian `f32`
    /// bytes, in name order.
    pub fn content_hash(&self) -> Result<String> {
        let inner = self.inner.lock().unwrap();
        let mut h = Sha256::new();
        for (name, p) in &inner.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in p.var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in tensor_f32(p.var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Current values as `f32` arrays, in name order.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let inner = self.inner.lock().unwrap();
        inner
            .params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.dims().to_vec(), tensor_f32(p.var.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter from `arrays`. The name sets and shapes must
    /// match exactly.
    pub fn restore(&self, arrays: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        if arrays.len() != inner.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model has {}",
                arrays.len(),
                inner.params.len()
            )));
        }
        for (name, shape, data) in arrays {
            let p = inner
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected array `{name}`")))?;
            if p.var.dims() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: checkpoint {shape:?}, model {:?}",
                    p.var.dims()
                )));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            p.var.set(&t)?;
        }
        Ok(())
    }

    fn create(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(p) = inner.params.get(name) {
            if p.var.dims() != shape {
                return Err(Error::Config(format!("parameter `{name}` requested with two shapes")));
            }
            return Ok(p.var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Kaiming { fan_in, gain } => normal(self.seed, name, n, gain / (fan_in.max(1) as f64).sqrt()),
            Init::Normal(std) => normal(self.seed, name, n, std),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.params.insert(name.to_string(), Param { var, frozen: false });
        Ok(out)
    }
}

fn normal(seed: u64, name: &str, n: usize, std: f64) -> Vec<f64> {
    let mut rng = keyed_rng(seed, name, 0);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect()
}

pub(crate) fn tensor_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct ParamPath {
    store: ParamStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, part: impl std::fmt::Display) -> ParamPath {
        let prefix = if self.prefix.is_empty() {
            part.to_string()
        } else {
            format!("{}.{}", self.prefix, part)
        };
        ParamPath {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(&full, shape, init)
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

/// Checks that a set of stores partitions cleanly into frozen and trainable
/// parameters and that `optimized` is exactly the trainable set.
pub fn audit_partition(stores: &[(&str, &ParamStore)], optimized: &[Var]) -> Result<()> {
    let mut trainable = 0usize;
    for (label, store) in stores {
        let t = store.trainable_names();
        let f = store.frozen_names();
        if t.len() + f.len() != store.len() || t.iter().any(|n| f.contains(n)) {
            return Err(Error::Integrity(format!("parameter partition of `{label}` is inconsistent")));
        }
        for (name, var) in store.vars() {
            let in_opt = optimized.iter().any(|v| v.as_tensor().id() == var.as_tensor().id());
            let frozen = store.is_frozen(&name).unwrap_or(true);
            if in_opt == frozen {
                return Err(Error::Integrity(format!(
                    "`{label}.{name}` is {} but {} the optimizer",
                    if frozen { "frozen" } else { "trainable" },
                    if in_opt { "inside" } else { "outside" }
                )));
            }
        }
        trainable += t.len();
    }
    if trainable != optimized.len() {
        return Err(Error::Integrity("optimizer holds parameters outside the audited stores".into()));
    }
    Ok(())
}
