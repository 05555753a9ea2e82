use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`
    Uniform(f64),
    Normal(f64),
}

struct BuildState {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
}

/// Scoped handle used by model constructors to create named parameters.
#[derive(Clone, Copy)]
pub struct ParamBuilder<'a> {
    state: &'a RefCell<BuildState>,
    prefix: &'a str,
}

impl<'a> ParamBuilder<'a> {
    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    /// Runs `f` with a builder whose names are prefixed by `name.`.
    pub fn scope<T>(&self, name: &str, f: impl FnOnce(ParamBuilder<'_>) -> Result<T>) -> Result<T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        f(ParamBuilder {
            state: self.state,
            prefix: &prefix,
        })
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut st = self.state.borrow_mut();
        if st.vars.contains_key(&full) {
            return Err(Error::InvalidArgument(format!("parameter `{full}` defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| st.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidArgument(format!("init std {std}: {e}")))?;
                (0..n).map(|_| dist.sample(&mut st.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(st.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        st.vars.insert(full, var);
        Ok(out)
    }
}

/// Name-ordered collection of trainable variables.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    /// Builds a model, drawing initial values from a ChaCha stream seeded with
    /// `seed` in parameter-creation order.
    pub fn build<T>(
        seed: u64,
        dtype: DType,
        f: impl FnOnce(ParamBuilder<'_>) -> Result<T>,
    ) -> Result<(T, ParamStore)> {
        let state = RefCell::new(BuildState {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        });
        let model = f(ParamBuilder {
            state: &state,
            prefix: "",
        })?;
        let vars = state.into_inner().vars;
        Ok((model, ParamStore { vars, dtype }))
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`, which must name exactly the
    /// same set of parameters with the same shapes. Nothing is written unless
    /// all entries match.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        self.check_compatible(values)?;
        for (name, var) in &self.vars {
            var.set(&values[name].to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Fails unless `values` could be assigned.
    pub fn check_compatible(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// SHA-256 over parameter names and little-endian values.
    pub fn checksum(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            hash_tensor(&mut h, var.as_tensor())?;
        }
        Ok(h.finalize().into())
    }
}

pub(crate) fn hash_tensor(h: &mut Sha256, t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}
