//! Neural networks: the TransUNet denoiser, the final `t = 1` decoder and
//! the VAE baseline, plus the checkpoint container they share.

pub mod checkpoint;
pub mod decoder;
pub mod layers;
pub mod transformer;
pub mod transunet;
pub mod vae;

use std::cell::RefCell;
use std::rc::Rc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub use checkpoint::{Checkpoint, ModelKind};
pub use decoder::{DecoderConfig, FinalDecoder};
pub use transunet::{Denoiser, DenoiserConfig, TransUNet};
pub use vae::{Vae, VaeNet};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Randn { stdev: f64 },
    Const(f64),
}

struct Store {
    vars: VarMap,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Creates named parameters from a seeded generator, so two models built
/// with the same seed and config start from identical weights.
#[derive(Clone)]
pub struct ParamBuilder {
    prefix: String,
    store: Rc<RefCell<Store>>,
}

impl ParamBuilder {
    pub fn new(vars: &VarMap, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            prefix: String::new(),
            store: Rc::new(RefCell::new(Store {
                vars: vars.clone(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                device: device.clone(),
            })),
        }
    }

    /// Child builder whose parameter names are prefixed with `name.`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            prefix,
            store: self.store.clone(),
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let path = self.pp(name).prefix;
        let mut store = self.store.borrow_mut();
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { stdev } => {
                let dist = Normal::new(0.0, stdev).expect("finite stdev");
                (0..n).map(|_| dist.sample(&mut store.rng)).collect()
            }
        };
        let tensor = Tensor::from_vec(data, shape, &store.device)?.to_dtype(store.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let previous = store.vars.data().lock().unwrap().insert(path.clone(), var.clone());
        assert!(previous.is_none(), "parameter `{path}` created twice");
        Ok(var.as_tensor().clone())
    }
}

/// Total element count of every variable.
pub fn parameter_count(vars: &VarMap) -> usize {
    vars.all_vars().iter().map(|v| v.elem_count()).sum()
}

/// Variables sorted by their canonical path.
pub fn sorted_vars(vars: &VarMap) -> Vec<(String, Var)> {
    let mut out: Vec<(String, Var)> = vars
        .data()
        .lock()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
