//! Minimal neural-network plumbing on top of candle: a seeded parameter
//! store, the handful of layers the models need, optimizers, and the
//! checkpoint container.

mod checkpoint;
mod conv;
mod layers;
mod params;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

pub use checkpoint::{file_hash, ArrayEntry, Checkpoint, Header};
pub use conv::{conv2d, upsample2x};
pub use layers::{from_tokens, group_norm, l1, leaky_relu, mse, to_tokens, Conv2d, GroupNorm, Linear};
pub use params::{audit_partition, Init, ParamPath, ParamStore};
pub(crate) use params::tensor_f32;

use crate::error::Result;

/// AdamW over an explicit variable list.
pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        self.inner.backward_step(loss)?;
        Ok(())
    }
}

/// Scalar value of a 0-d tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&crate::imaging::ImageRgb], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(crate::Error::Dimension("empty image batch".into()));
    };
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if im.shape() != (h, w) {
            return Err(crate::Error::Dimension("image batch with mixed shapes".into()));
        }
        data.extend(im.to_chw());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(B, 3, H, W)` tensor into clipped images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<crate::imaging::ImageRgb>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(crate::Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let data = tensor_f32(t)?;
    data.chunks_exact(3 * h * w)
        .take(b)
        .map(|chunk| crate::imaging::ImageRgb::from_chw(h, w, chunk))
        .collect()
}

/// Content hashes of frozen models, re-checked while a later stage trains.
pub struct FrozenGuard<'a> {
    entries: Vec<(String, &'a ParamStore, String)>,
}

impl<'a> FrozenGuard<'a> {
    /// Records the current hash of every store; all of them must be frozen.
    pub fn new(stores: &[(&str, &'a ParamStore)]) -> Result<Self> {
        let mut entries = Vec::with_capacity(stores.len());
        for (label, store) in stores {
            if !store.trainable_names().is_empty() {
                return Err(crate::Error::Integrity(format!("`{label}` must be frozen before this stage")));
            }
            entries.push((label.to_string(), *store, store.content_hash()?));
        }
        Ok(Self { entries })
    }

    pub fn hashes(&self) -> Vec<(String, String)> {
        self.entries.iter().map(|(l, _, h)| (l.clone(), h.clone())).collect()
    }

    /// Fails with an integrity error if any store changed since creation.
    pub fn verify(&self) -> Result<()> {
        for (label, store, expected) in &self.entries {
            let now = store.content_hash()?;
            if &now != expected {
                return Err(crate::Error::Integrity(format!(
                    "frozen `{label}` weights changed: {expected} became {now}"
                )));
            }
        }
        Ok(())
    }
}
